import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from attnsum import AttentionSummarizer, Document, check_documents
from attnsum.datasets import make_toy_corpus

FAST = dict(d_model=8, n_heads=2, token_layers=1, sentence_layers=1, decoder_layers=1,
            max_tokens=64, max_sentences=12, init_scale=0.3, epochs=2, batch_size=4,
            encoder_lr=3e-3, decoder_lr=3e-3)


@pytest.fixture(scope="module")
def fitted():
    docs = make_toy_corpus(6, random_state=1)
    return AttentionSummarizer(**FAST).fit(docs), docs


def test_params_round_trip_through_clone():
    est = AttentionSummarizer(d_model=16, gamma1=0.5, attention_direction="ij")
    twin = clone(est)
    assert twin.get_params() == est.get_params()
    assert not hasattr(twin, "params_")


def test_not_fitted():
    with pytest.raises(NotFittedError):
        AttentionSummarizer().predict([["A b."]])


def test_fit_sets_attributes(fitted):
    est, docs = fitted
    assert len(est.vocab_) == est.model_config_.vocab_size
    assert len(est.train_report_.steps) == 2 * 2   # 2 epochs of 2 length batches
    assert est.model_config_.d_model == 8


def test_predict_transform_agree(fitted):
    est, docs = fitted
    idx = est.predict(docs)
    scores = est.transform(docs)
    assert len(idx) == len(scores) == len(docs)
    for i, s, d in zip(idx, scores, docs):
        assert i == sorted(i) and len(i) <= 3
        assert len(s.r) == len(d.sentences) and abs(s.r.sum() - 1) < 1e-12


def test_rank_params_apply_without_refit(fitted):
    est, docs = fitted
    est.set_params(summary_len=1)
    try:
        assert all(len(i) == 1 for i in est.predict(docs))
    finally:
        est.set_params(summary_len=3)


def test_score_in_unit_interval(fitted):
    est, docs = fitted
    assert 0.0 <= est.score(docs) <= 1.0
    refs = [d.sentences for d in docs]
    assert est.score(docs, refs) > 0


def test_score_requires_references(fitted):
    est, _ = fitted
    with pytest.raises(ValueError):
        est.score([["A b.", "C d."]])


def test_fit_deterministic():
    docs = make_toy_corpus(4, random_state=2)
    a = AttentionSummarizer(**FAST).fit(docs)
    b = AttentionSummarizer(**FAST).fit(docs)
    for k in a.params_:
        np.testing.assert_array_equal(a.params_[k].data, b.params_[k].data)


def test_from_pretrained_matches(fitted):
    est, docs = fitted
    wrapped = AttentionSummarizer.from_pretrained(est.params_, est.model_config_, est.vocab_, T=1)
    assert wrapped.predict(docs) == est.predict(docs)


def test_bad_rank_option_fails_before_training():
    with pytest.raises(ValueError):
        AttentionSummarizer(attention_direction="sideways").fit(make_toy_corpus(2))


def test_check_documents_forms():
    docs = check_documents([Document("x", ["a."]), {"doc_id": "y", "sentences": ["b.", "c."]},
                            ["d.", "e."]])
    assert [d.doc_id for d in docs] == ["x", "y", "2"]
    with pytest.raises(TypeError):
        check_documents(Document("x", ["a."]))
    with pytest.raises(TypeError):
        check_documents([42])
    with pytest.raises(ValueError):
        check_documents([])
