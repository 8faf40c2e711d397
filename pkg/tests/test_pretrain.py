import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from attnsum.autodiff import Tensor
from attnsum.corpus import EncodedDocument, MASKED, MaskedInstance, make_masked, make_shuffled, mask_sentence
from attnsum.model import ModelConfig, checkpoint_bytes, copy_params, init_params, param_group
from attnsum.pretrain import TrainConfig, msp_loss, ss_loss, train

from conftest import random_doc


def _masked_one(doc, i):
    sents = [list(s) for s in doc.sentences]
    sents[i] = mask_sentence(sents[i])
    return MaskedInstance(doc, EncodedDocument(sents), [i], {i: MASKED})


def _tiny(vocab=10, **kw):
    base = dict(vocab_size=vocab, d_model=8, n_heads=2, max_tokens=40, max_sentences=8, init_scale=0.3)
    base.update(kw)
    return ModelConfig(**base)


def test_msp_uniform_output_gives_log_vocab():
    config = _tiny(vocab=10)
    params = init_params(config, 0)
    params["msp.w_out"] = Tensor(np.zeros_like(params["msp.w_out"].data), requires_grad=True)
    doc = EncodedDocument([[0, 5, 6, 1], [0, 7, 8, 1], [0, 9, 1]])
    # sentence 0 has 3 predicted tokens: 5, 6, EOS
    loss = msp_loss(_masked_one(doc, 0), params, config)
    assert float(loss.data) == pytest.approx(np.log(10), abs=1e-12)


def test_ss_single_sentence_zero_loss():
    config = _tiny()
    doc = EncodedDocument([[0, 5, 1]])
    loss = ss_loss(make_shuffled(doc, np.random.default_rng(0)), init_params(config, 0), config)
    assert float(loss.data) == pytest.approx(0.0, abs=1e-12)


def test_ss_uniform_pointer_gives_log_n():
    config = _tiny()
    params = init_params(config, 0)
    params["ptr.v_a"] = Tensor(np.zeros_like(params["ptr.v_a"].data), requires_grad=True)
    doc = random_doc(np.random.default_rng(1), 4, vocab_size=10)
    inst = make_shuffled(doc, np.random.default_rng(2))
    # per-document normalisation divides the sum of 4 steps by |D| = 4
    assert float(ss_loss(inst, params, config).data) == pytest.approx(np.log(4), abs=1e-12)
    raw = ss_loss(inst, params, config, raw_sum=True)
    assert float(raw.data) == pytest.approx(4 * np.log(4), abs=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 5))
def test_losses_non_negative(seed, n):
    config = _tiny(vocab=20)
    rng = np.random.default_rng(seed)
    doc = random_doc(rng, n)
    params = init_params(config, seed % 3)
    assert float(msp_loss(make_masked(doc, rng), params, config).data) >= 0
    assert float(ss_loss(make_shuffled(doc, rng), params, config).data) >= 0


def test_raw_sum_matches_token_count():
    config = _tiny(vocab=20)
    params = init_params(config, 1)
    docs = [random_doc(np.random.default_rng(k), 3) for k in range(2)]
    insts = [_masked_one(docs[0], 1), _masked_one(docs[1], 2)]
    counts = [len(docs[0].sentences[1]) - 1, len(docs[1].sentences[2]) - 1]
    per_doc = [float(msp_loss(i, params, config, raw_sum=True).data) for i in insts]
    batched_raw = float(msp_loss(insts, params, config, raw_sum=True).data)
    batched = float(msp_loss(insts, params, config).data)
    assert batched_raw == pytest.approx(sum(per_doc), rel=1e-12)
    assert batched == pytest.approx(np.mean([p / c for p, c in zip(per_doc, counts)]), rel=1e-12)


def test_train_config_requires_msp():
    with pytest.raises(ValueError):
        TrainConfig(enable_msp=False)


def _corpus(n=4, seed=0):
    rng = np.random.default_rng(seed)
    return [random_doc(rng, int(rng.integers(2, 5)), doc_id=f"d{k}") for k in range(n)]


def test_zero_epochs_returns_init():
    config = _tiny(vocab=20)
    params = init_params(config, 0)
    before = checkpoint_bytes(params, config)
    params, report = train(_corpus(), params, config, TrainConfig(epochs=0))
    assert checkpoint_bytes(params, config) == before and report.steps == []


def test_training_deterministic():
    config = _tiny(vocab=20)
    tc = TrainConfig(epochs=3, batch_size=2, encoder_lr=1e-3, decoder_lr=1e-3, seed=4)
    outs = []
    for _ in range(2):
        params, report = train(_corpus(), init_params(config, 0), config, tc)
        outs.append((checkpoint_bytes(params, config), report.to_csv()))
    assert outs[0] == outs[1]


def test_msp_only_leaves_pointer_at_init():
    config = _tiny(vocab=20)
    init = init_params(config, 0)
    params, report = train(_corpus(), copy_params(init), config,
                           TrainConfig(epochs=2, batch_size=2, encoder_lr=1e-3, decoder_lr=1e-3,
                                       enable_ss=False))
    for name in params:
        same = np.array_equal(params[name].data, init[name].data)
        assert same == name.startswith("ptr."), name
    assert report.to_csv(ss_enabled=False).splitlines()[0] == "step,msp_loss,total"


def test_gradient_reaches_every_encoder_parameter():
    config = _tiny(vocab=20, max_sentences=4)
    params = init_params(config, 0)
    rng = np.random.default_rng(0)
    docs = [random_doc(rng, 4, doc_id=f"d{k}") for k in range(3)]
    loss = msp_loss([make_masked(d, rng) for d in docs], params, config) + \
        ss_loss([make_shuffled(d, rng) for d in docs], params, config)
    loss.backward()
    for name, p in params.items():
        if param_group(name) == "encoder":
            assert p.grad is not None and np.any(p.grad != 0), name


def test_single_document_msp_overfit():
    config = ModelConfig(vocab_size=20, d_model=16, n_heads=2, max_tokens=40, max_sentences=8,
                         init_scale=0.1)
    doc = random_doc(np.random.default_rng(3), 3, min_len=3)
    tc = TrainConfig(epochs=300, batch_size=1, encoder_lr=3e-3, decoder_lr=3e-3, enable_ss=False)
    _, report = train([doc], init_params(config, 0), config, tc)
    first = report.steps[0]["msp_loss"]
    tail = np.mean([r["msp_loss"] for r in report.steps[-10:]])
    assert tail < 0.1 * first


def test_checkpoints_written_at_interval(tmp_path):
    config = _tiny(vocab=20)
    tc = TrainConfig(epochs=2, batch_size=2, checkpoint_every=2, checkpoint_dir=str(tmp_path))
    train(_corpus(), init_params(config, 0), config, tc)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["step_000002.ckpt", "step_000004.ckpt"]


def test_validation_keeps_best_epoch():
    config = _tiny(vocab=20)
    scores = iter([0.1, 0.9, 0.2])
    snapshots = []

    def validate(params):
        snapshots.append(copy_params(params))
        return next(scores)

    params, report = train(_corpus(), init_params(config, 0), config,
                           TrainConfig(epochs=3, batch_size=2, encoder_lr=1e-3, decoder_lr=1e-3),
                           validation=validate)
    assert report.best_epoch == 2
    for name in params:
        np.testing.assert_array_equal(params[name].data, snapshots[1][name].data)


def test_report_csv_columns():
    config = _tiny(vocab=20)
    _, report = train(_corpus(), init_params(config, 0), config, TrainConfig(epochs=1, batch_size=2))
    lines = report.to_csv().splitlines()
    assert lines[0] == "step,msp_loss,ss_loss,total" and len(lines) == 1 + len(report.steps)
    row = report.steps[0]
    assert row["total"] == pytest.approx(row["msp_loss"] + row["ss_loss"])
