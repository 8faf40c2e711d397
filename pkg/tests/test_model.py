import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from attnsum import autodiff as ad
from attnsum.corpus import EncodedDocument
from attnsum.model import (ModelConfig, checkpoint_bytes, collate, encode_batch, encode_document,
                           init_params, load_checkpoint, msp_decode_logprob, msp_log_softmax,
                           param_shapes, pointer_decode_step, save_checkpoint)

from conftest import random_doc


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=20, d_model=10, n_heads=3)
    assert ModelConfig(vocab_size=20, d_model=16).ffn_hidden == 64


def test_param_shapes_respect_flags():
    on = param_shapes(ModelConfig(vocab_size=20, d_model=8, n_heads=2))
    off = param_shapes(ModelConfig(vocab_size=20, d_model=8, n_heads=2,
                                   use_sentence_pos_embedding=False, share_embeddings=False))
    assert "encoder.sent_pos" in on and "encoder.sent_pos" not in off
    assert "msp.tok_emb" in off and "msp.tok_emb" not in on


def test_init_is_uniform_within_scale():
    config = ModelConfig(vocab_size=20, d_model=8, n_heads=2)
    params = init_params(config, 0)
    w = params["encoder.token.0.attn.wq"].data
    assert np.abs(w).max() <= 0.02 and np.abs(w).max() > 0.01
    assert np.all(params["encoder.token.0.ln1.g"].data == 1.0)
    assert np.all(params["encoder.token.0.attn.bq"].data == 0.0)


def test_single_sentence_attention_is_one(small_config, make_doc):
    params = init_params(small_config, 0)
    doc = make_doc(np.random.default_rng(0), 1)
    _, A = encode_document(doc, params, small_config)
    np.testing.assert_array_equal(A, [[1.0]])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 6))
def test_reps_match_sentence_count(seed, n):
    config = ModelConfig(vocab_size=20, d_model=8, n_heads=2, max_tokens=40, max_sentences=8)
    rng = np.random.default_rng(seed)
    doc = random_doc(rng, n)
    reps, A = encode_document(doc, init_params(config, seed % 7), config)
    assert len(reps) == n and reps.H.shape == (n, 8) and A.shape == (n, n)


def test_forward_deterministic(small_config, make_doc):
    doc = make_doc(np.random.default_rng(3), 4)
    out = []
    for _ in range(2):
        reps, A = encode_document(doc, init_params(small_config, 5), small_config)
        out.append(reps.H.data.tobytes() + A.tobytes())
    assert out[0] == out[1]


def test_padding_does_not_leak(small_config, make_doc):
    params = init_params(small_config, 1)
    rng = np.random.default_rng(4)
    short, long = make_doc(rng, 2, max_len=2), make_doc(rng, 5, max_len=4)
    H1, _, A1 = encode_batch(collate([short], small_config), params, small_config)
    H2, _, A2 = encode_batch(collate([short, long], small_config), params, small_config)
    np.testing.assert_allclose(H2.data[0, :2], H1.data[0], atol=1e-12)
    np.testing.assert_allclose(A2[0, :2, :2], A1[0], atol=1e-12)


def test_limits_enforced(small_config):
    doc = EncodedDocument([[0] + [5] * 50 + [1]])
    with pytest.raises(ValueError, match="exceeds"):
        encode_document(doc, init_params(small_config, 0), small_config)


def test_sentence_permutation_covariance():
    config = ModelConfig(vocab_size=20, d_model=16, n_heads=2, max_tokens=40, max_sentences=8,
                         init_scale=0.3, use_sentence_pos_embedding=False,
                         reset_token_positions_per_sentence=True)
    params = init_params(config, 2)
    doc = random_doc(np.random.default_rng(6), 4)
    perm = [2, 0, 3, 1]
    shuffled = EncodedDocument([doc.sentences[i] for i in perm])
    H, A = encode_document(doc, params, config)
    Hs, As = encode_document(shuffled, params, config)
    np.testing.assert_allclose(Hs.H.data, H.H.data[perm], atol=1e-10)
    np.testing.assert_allclose(As, A[np.ix_(perm, perm)], atol=1e-10)


def test_sentence_positions_break_covariance(small_config, make_doc):
    params = init_params(small_config, 2)
    doc = make_doc(np.random.default_rng(6), 3)
    perm = [2, 0, 1]
    H, _ = encode_document(doc, params, small_config)
    Hs, _ = encode_document(EncodedDocument([doc.sentences[i] for i in perm]), params, small_config)
    assert not np.allclose(Hs.H.data, H.H.data[perm])


# ---------------------------------------------------------------- decoders

def test_msp_outputs_are_log_simplex(small_config):
    params = init_params(small_config, 0)
    logp = msp_log_softmax([0, 7, 8, 9, 1], np.random.default_rng(0).normal(size=16), params, small_config)
    np.testing.assert_allclose(np.log(np.exp(logp).sum(axis=-1)), 0.0, atol=1e-12)


def test_msp_causality(small_config):
    params = init_params(small_config, 0)
    h = np.random.default_rng(1).normal(size=16)
    target = [0, 7, 8, 9, 10, 1]
    base = msp_decode_logprob(target, h, params, small_config)
    for k in range(1, len(target) - 1):
        changed = list(target)
        changed[k] = 15
        alt = msp_decode_logprob(changed, h, params, small_config)
        # position j predicts token j+1 from tokens <= j; log-probs before k's input are fixed
        np.testing.assert_array_equal(alt[:k - 1], base[:k - 1])
        full_a = msp_log_softmax(changed, h, params, small_config)
        full_b = msp_log_softmax(target, h, params, small_config)
        np.testing.assert_array_equal(full_a[:k], full_b[:k])
        assert not np.allclose(full_a[k:], full_b[k:])


def test_msp_conditioning_is_live(small_config):
    params = init_params(small_config, 0)
    target = [0, 7, 8, 1]
    zero = msp_decode_logprob(target, np.zeros(16), params, small_config)
    rand = msp_decode_logprob(target, np.random.default_rng(2).normal(size=16), params, small_config)
    assert not np.allclose(zero, rand)


def test_pointer_single_sentence(small_config):
    params = init_params(small_config, 0)
    np.testing.assert_array_equal(pointer_decode_step([], np.ones((1, 16)), params, small_config), [1.0])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 6))
def test_pointer_distribution_sums_to_one(seed, n):
    config = ModelConfig(vocab_size=20, d_model=8, n_heads=2, max_sentences=8, init_scale=0.5)
    params = init_params(config, seed % 5)
    rng = np.random.default_rng(seed)
    Hp = rng.normal(size=(n, 8))
    prefix = rng.permutation(n)[: int(rng.integers(0, n))].tolist()
    p = pointer_decode_step(prefix, Hp, params, config)
    assert p.shape == (n,) and np.all(p > 0)
    assert abs(p.sum() - 1.0) < 1e-12


def test_pointer_argmax_of_scores(small_config):
    # the distribution is a softmax of g, so its argmax is the argmax of g
    params = init_params(small_config, 3)
    Hp = np.random.default_rng(3).normal(size=(4, 16))
    p = pointer_decode_step([], Hp, params, small_config)
    doubled = dict(params)
    doubled["ptr.v_a"] = ad.Tensor(params["ptr.v_a"].data * 2.0)
    p2 = pointer_decode_step([], Hp, doubled, small_config)
    assert np.argmax(p) == np.argmax(p2)
    g_ratio = np.log(p2) - np.log(p2).max() - 2 * (np.log(p) - np.log(p).max())
    np.testing.assert_allclose(g_ratio, 0.0, atol=1e-10)


def test_pointer_revisits_allowed(small_config):
    params = init_params(small_config, 4)
    Hp = np.random.default_rng(4).normal(size=(3, 16))
    p = pointer_decode_step([0, 1], Hp, params, small_config)
    assert p[0] > 0 and p[1] > 0


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip(tmp_path, small_config, make_doc):
    params = init_params(small_config, 9)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, params, small_config)
    loaded, config = load_checkpoint(path)
    assert config == small_config
    assert checkpoint_bytes(loaded, config) == path.read_bytes()
    doc = make_doc(np.random.default_rng(0), 3)
    a = encode_document(doc, params, small_config)
    b = encode_document(doc, loaded, config)
    assert a[0].H.data.tobytes() == b[0].H.data.tobytes() and a[1].tobytes() == b[1].tobytes()


def test_checkpoint_layout(tmp_path, small_config):
    import json
    import struct
    raw = checkpoint_bytes(init_params(small_config, 0), small_config)
    (hlen,) = struct.unpack_from("<Q", raw)
    header = json.loads(raw[8:8 + hlen])
    names = [p["name"] for p in header["params"]]
    assert names == sorted(names)
    n_values = sum(int(np.prod(p["shape"])) for p in header["params"])
    assert len(raw) == 8 + hlen + 8 * n_values
