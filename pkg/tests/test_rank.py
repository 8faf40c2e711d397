import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from attnsum import rank
from attnsum.corpus import EncodedDocument, mask_sentence
from attnsum.model import ModelConfig, encode_document, init_params, msp_decode_logprob
from attnsum.rank import (RankConfig, combine_external, combine_iterate, normalize_scores,
                          propagate, score_document, select_summary, sentence_prob,
                          sentence_probs, token_probabilities)

from conftest import random_doc

pos_vec = arrays(np.float64, st.integers(1, 7), elements=st.floats(0.01, 1.0))


def _stochastic(rng, n):
    A = rng.random((n, n))
    return A / A.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------- r_hat

def test_sentence_prob_is_arithmetic_mean(monkeypatch):
    monkeypatch.setattr(rank, "token_probabilities", lambda *a, **k: [np.array([0.2, 0.4])])
    assert sentence_prob(None, 0, None, None) == pytest.approx(0.3)


def test_token_probabilities_match_single_decoding(small_config, make_doc):
    params = init_params(small_config, 0)
    doc = make_doc(np.random.default_rng(1), 3)
    batched = token_probabilities(doc, params, small_config)
    for i in range(3):
        sents = [list(s) for s in doc.sentences]
        sents[i] = mask_sentence(sents[i])
        reps, _ = encode_document(EncodedDocument(sents), params, small_config)
        single = np.exp(msp_decode_logprob(doc.sentences[i], reps.H.data[i], params, small_config))
        np.testing.assert_allclose(batched[i], single, rtol=1e-12)


def test_one_masked_pass_per_sentence(monkeypatch, small_config, make_doc):
    seen = []
    real = rank.encode_batch

    def spy(batch, *a, **k):
        seen.append(len(batch.n_sentences))
        return real(batch, *a, **k)

    monkeypatch.setattr(rank, "encode_batch", spy)
    doc = make_doc(np.random.default_rng(2), 5)
    sentence_probs(doc, init_params(small_config, 0), small_config)
    assert sum(seen) == 5


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 5))
def test_r_hat_in_unit_interval(seed, n):
    config = ModelConfig(vocab_size=20, d_model=8, n_heads=2, max_tokens=40, max_sentences=8, init_scale=0.5)
    r = sentence_probs(random_doc(np.random.default_rng(seed), n), init_params(config, 0), config)
    assert np.all(r > 0) and np.all(r <= 1)


# ---------------------------------------------------------------- normalisation, propagation

def test_normalize_examples():
    np.testing.assert_allclose(normalize_scores([1, 1]), [0.5, 0.5])
    np.testing.assert_allclose(normalize_scores([0.2, 0.3, 0.5]), [0.2, 0.3, 0.5])
    with pytest.raises(ValueError):
        normalize_scores([0, 0])


@settings(max_examples=50, deadline=None)
@given(pos_vec, st.floats(1e-3, 1e3))
def test_normalize_scale_invariant(r, c):
    np.testing.assert_allclose(normalize_scores(r * c), normalize_scores(r), rtol=1e-12)


def test_propagate_identity_and_single():
    np.testing.assert_array_equal(propagate([0.2, 0.3, 0.5], np.eye(3)), 0.0)
    np.testing.assert_array_equal(propagate([1.0], [[1.0]]), [0.0])


def test_propagate_direction_is_transpose():
    rng = np.random.default_rng(0)
    A = _stochastic(rng, 4)
    r = normalize_scores(rng.random(4))
    np.testing.assert_allclose(propagate(r, A, "ij"), propagate(r, A.T, "ji"), rtol=1e-14)
    off = A - np.diag(np.diag(A))
    np.testing.assert_allclose(propagate(r, A, "ji"),
                               [sum(A[j, i] * r[j] for j in range(4) if j != i) for i in range(4)])
    np.testing.assert_allclose(propagate(r, A, "ij"), off @ r)


def test_propagate_shape_mismatch():
    with pytest.raises(ValueError):
        propagate([0.5, 0.5], np.eye(3))


# ---------------------------------------------------------------- combine

@pytest.mark.parametrize("T", [0, 1, 2, 3])
def test_self_only_is_fixpoint(T):
    r = np.array([0.2, 0.5, 0.3])
    out = combine_iterate(r, _stochastic(np.random.default_rng(0), 3), RankConfig(gamma1=1, gamma2=0, T=T))
    np.testing.assert_allclose(out.r, r, rtol=1e-14)


def test_symmetric_two_sentence_example():
    A = np.array([[0.0, 1.0], [1.0, 0.0]])
    out = combine_iterate([0.6, 0.4], A, RankConfig())
    np.testing.assert_allclose(out.r_prime, [0.4, 0.6])
    np.testing.assert_allclose(out.r, [0.5, 0.5])
    raw = combine_iterate([0.6, 0.4], A, RankConfig(no_renorm=True))
    np.testing.assert_allclose(raw.r, [1.0, 1.0])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 6), st.floats(0, 2), st.floats(0.01, 2), st.integers(0, 4))
def test_combine_is_distribution(seed, n, g1, g2, T):
    rng = np.random.default_rng(seed)
    out = combine_iterate(normalize_scores(rng.random(n) + 0.01), _stochastic(rng, n),
                          RankConfig(gamma1=g1, gamma2=g2, T=T))
    assert np.all(out.r >= 0)
    assert abs(out.r.sum() - 1.0) < 1e-12
    assert abs(out.r_tilde.sum() - 1.0) < 1e-12


def test_uniform_r_tilde_start():
    out = combine_iterate([0.7, 0.2, 0.1], np.eye(3), RankConfig(uniform_r_tilde=True, gamma2=0))
    np.testing.assert_allclose(out.r, [1 / 3] * 3)


@pytest.mark.parametrize("kwargs", [dict(gamma1=0, gamma2=0), dict(gamma1=-1), dict(T=-1),
                                    dict(attention_direction="up"), dict(summary_len=-1)])
def test_rank_config_validation(kwargs):
    with pytest.raises(ValueError):
        RankConfig(**kwargs)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 7))
def test_zero_rprime_orders_by_r_hat(seed, n):
    rng = np.random.default_rng(seed)
    r_hat = rng.random(n) + 0.01
    out = combine_iterate(normalize_scores(r_hat), _stochastic(rng, n),
                          RankConfig(zero_r_prime=True, T=2), r_hat=r_hat)
    assert list(np.argsort(-out.r, kind="stable")) == list(np.argsort(-r_hat, kind="stable"))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 7), st.floats(1e-3, 1e3))
def test_selection_scale_invariant(seed, n, c):
    rng = np.random.default_rng(seed)
    r_hat, A = rng.random(n) + 0.01, _stochastic(rng, n)
    sents = [f"s{i} w{i}" for i in range(n)]
    rc = RankConfig(T=2)
    a = select_summary(sents, combine_iterate(normalize_scores(r_hat), A, rc), rc)
    b = select_summary(sents, combine_iterate(normalize_scores(r_hat * c), A, rc), rc)
    assert a == b


def test_score_document_pipeline(small_config, make_doc):
    doc = make_doc(np.random.default_rng(0), 4)
    params = init_params(small_config, 0)
    s = score_document(doc, params, small_config, RankConfig())
    np.testing.assert_allclose(s.r_hat, sentence_probs(doc, params, small_config))
    assert len(s) == 4 and set(s.to_dict()) == {"r_hat", "r_tilde", "r_prime", "r"}


# ---------------------------------------------------------------- selection

def test_select_top_without_blocking():
    rc = RankConfig(summary_len=2, use_trigram_blocking=False)
    assert select_summary(["x", "y", "z"], [0.5, 0.3, 0.2], rc) == [0, 1]


def test_trigram_blocking_skips_overlap():
    sents = ["a b c d", "b c d e", "f g h"]
    assert select_summary(sents, [0.5, 0.3, 0.2], RankConfig(summary_len=2)) == [0, 2]
    assert select_summary(sents, [0.5, 0.3, 0.2],
                          RankConfig(summary_len=2, use_trigram_blocking=False)) == [0, 1]


def test_short_sentences_never_blocked():
    assert select_summary(["a b", "a b", "a b"], [0.4, 0.35, 0.25], RankConfig()) == [0, 1, 2]


def test_ties_go_to_earlier_sentence():
    assert select_summary(["p", "q", "r", "s"], [0.25] * 4, RankConfig(summary_len=2)) == [0, 1]


@settings(max_examples=60, deadline=None)
@given(st.lists(st.lists(st.sampled_from("abcd"), min_size=1, max_size=6), min_size=1, max_size=8),
       st.integers(0, 2**31 - 1), st.integers(0, 5))
def test_selected_summary_has_no_shared_trigram(words, seed, k):
    sents = [" ".join(w) for w in words]
    scores = np.random.default_rng(seed).random(len(sents))
    idx = select_summary(sents, scores, RankConfig(summary_len=k))
    assert idx == sorted(set(idx)) and len(idx) <= k
    for a in idx:
        for b in idx:
            if a != b:
                assert not rank.trigrams(sents[a]) & rank.trigrams(sents[b])


def test_combine_external():
    np.testing.assert_allclose(combine_external([0.6, 0.4], [0.2, 0.8], 1.0), [0.6, 0.4])
    out = combine_external([0.6, 0.4], [0.2, 0.8], 0.5)
    np.testing.assert_allclose(out, [0.4, 0.6])
    assert out.sum() == pytest.approx(1.0)
    np.testing.assert_allclose(combine_external([0.6, 0.4], [0.2, 0.8]), [0.56, 0.44])
    with pytest.raises(ValueError):
        combine_external([0.5, 0.5], [1.0])
