"""scikit-learn style front end and the shared inference pipeline."""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .corpus import Document, EncodedDocument, Vocab, build_vocab, encode
from .evaluation import average_scores, rouge_scores
from .model import ModelConfig, Params, init_params
from .pretrain import TrainConfig, train
from .rank import RankConfig, SentenceScores, score_document, select_summary

logger = logging.getLogger(__name__)


def check_documents(X) -> list[Document]:
    """Accept Documents, dicts with ``sentences``, or bare lists of sentence strings."""
    if isinstance(X, (Document, dict)) or isinstance(X, str):
        raise TypeError("expected a sequence of documents, got a single item")
    docs = []
    for k, item in enumerate(X):
        if isinstance(item, Document):
            docs.append(item)
        elif isinstance(item, dict):
            docs.append(Document(str(item.get("doc_id", k)), list(item["sentences"]),
                                 item.get("summary")))
        elif isinstance(item, (list, tuple)) and all(isinstance(s, str) for s in item):
            docs.append(Document(str(k), list(item)))
        else:
            raise TypeError(f"document {k}: unsupported type {type(item).__name__}")
    if not docs:
        raise ValueError("no documents given")
    return docs


def encode_corpus(docs: Iterable[Document], vocab: Vocab, config: ModelConfig) -> list[EncodedDocument]:
    out = []
    for d in docs:
        enc = encode(d, vocab, config.max_tokens, config.max_sentences)
        if enc.truncated:
            logger.warning("document %s truncated to %d sentences / %d tokens",
                           d.doc_id, len(enc), enc.n_tokens)
        out.append(enc)
    return out


@dataclass
class Summary:
    doc_id: str
    indices: list[int]
    sentences: list[str]
    scores: SentenceScores

    def to_record(self) -> dict:
        return {"doc_id": self.doc_id, "indices": self.indices,
                "sentences": self.sentences, "scores": self.scores.to_dict()}


def summarize_documents(docs: Sequence[Document], vocab: Vocab, params: Params,
                        config: ModelConfig, rc: RankConfig, threads: int = 1) -> list[Summary]:
    """Score and select sentences for every document; output order follows input."""
    encoded = encode_corpus(docs, vocab, config)

    def one(k: int) -> Summary:
        scores = score_document(encoded[k], params, config, rc)
        # selection only sees the sentences the model scored
        kept = docs[k].sentences[:len(encoded[k])]
        idx = select_summary(kept, scores, rc)
        return Summary(docs[k].doc_id, idx, [kept[i] for i in idx], scores)

    if threads <= 1:
        return [one(k) for k in range(len(docs))]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, range(len(docs))))


class AttentionSummarizer(BaseEstimator):
    """Unsupervised extractive summarizer.

    ``fit`` builds a vocabulary and pre-trains the hierarchical encoder with
    masked-sentence prediction and (optionally) sentence shuffling;
    ``transform`` returns per-sentence scores and ``predict`` the selected
    sentence indices. Documents may be :class:`Document` objects, dicts with
    a ``sentences`` key, or lists of sentence strings.
    """

    def __init__(self, d_model=64, n_heads=4, token_layers=2, local_token_layers=1,
                 sentence_layers=2, decoder_layers=2, max_tokens=512, max_sentences=64,
                 dropout=0.0, use_sentence_pos_embedding=True,
                 reset_token_positions_per_sentence=False, share_embeddings=True,
                 init_scale=0.02, epochs=1, batch_size=8, encoder_lr=4e-5, decoder_lr=4e-4,
                 clip_norm=1.0, warmup_steps=0, enable_ss=True, raw_sum_loss=False,
                 min_count=1, gamma1=1.0, gamma2=1.0, T=1, use_trigram_blocking=True,
                 summary_len=3, attention_direction="ji", uniform_r_tilde=False,
                 zero_r_prime=False, no_renorm=False, n_jobs=1, random_state=0):
        self.d_model = d_model
        self.n_heads = n_heads
        self.token_layers = token_layers
        self.local_token_layers = local_token_layers
        self.sentence_layers = sentence_layers
        self.decoder_layers = decoder_layers
        self.max_tokens = max_tokens
        self.max_sentences = max_sentences
        self.dropout = dropout
        self.use_sentence_pos_embedding = use_sentence_pos_embedding
        self.reset_token_positions_per_sentence = reset_token_positions_per_sentence
        self.share_embeddings = share_embeddings
        self.init_scale = init_scale
        self.epochs = epochs
        self.batch_size = batch_size
        self.encoder_lr = encoder_lr
        self.decoder_lr = decoder_lr
        self.clip_norm = clip_norm
        self.warmup_steps = warmup_steps
        self.enable_ss = enable_ss
        self.raw_sum_loss = raw_sum_loss
        self.min_count = min_count
        self.gamma1 = gamma1
        self.gamma2 = gamma2
        self.T = T
        self.use_trigram_blocking = use_trigram_blocking
        self.summary_len = summary_len
        self.attention_direction = attention_direction
        self.uniform_r_tilde = uniform_r_tilde
        self.zero_r_prime = zero_r_prime
        self.no_renorm = no_renorm
        self.n_jobs = n_jobs
        self.random_state = random_state

    def _model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(
            vocab_size=vocab_size, d_model=self.d_model, n_heads=self.n_heads,
            token_layers=self.token_layers, local_token_layers=self.local_token_layers,
            sentence_layers=self.sentence_layers, decoder_layers=self.decoder_layers,
            max_tokens=self.max_tokens, max_sentences=self.max_sentences, dropout=self.dropout,
            use_sentence_pos_embedding=self.use_sentence_pos_embedding,
            reset_token_positions_per_sentence=self.reset_token_positions_per_sentence,
            share_embeddings=self.share_embeddings, init_scale=self.init_scale)

    def _train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size,
                           encoder_lr=self.encoder_lr, decoder_lr=self.decoder_lr,
                           seed=self.random_state, clip_norm=self.clip_norm,
                           enable_ss=self.enable_ss, raw_sum_loss=self.raw_sum_loss,
                           warmup_steps=self.warmup_steps)

    def rank_config(self) -> RankConfig:
        return RankConfig(gamma1=self.gamma1, gamma2=self.gamma2, T=self.T,
                          use_trigram_blocking=self.use_trigram_blocking,
                          summary_len=self.summary_len,
                          attention_direction=self.attention_direction,
                          uniform_r_tilde=self.uniform_r_tilde, zero_r_prime=self.zero_r_prime,
                          no_renorm=self.no_renorm)

    def fit(self, X, y=None):
        docs = check_documents(X)
        self.rank_config()  # fail fast on bad ranking options
        self.vocab_ = build_vocab(docs, self.min_count)
        self.model_config_ = self._model_config(len(self.vocab_))
        params = init_params(self.model_config_, self.random_state)
        encoded = encode_corpus(docs, self.vocab_, self.model_config_)
        self.params_, self.train_report_ = train(encoded, params, self.model_config_,
                                                 self._train_config())
        return self

    @classmethod
    def from_pretrained(cls, params: Params, config: ModelConfig, vocab: Vocab, **kwargs):
        """Wrap an existing checkpoint; ``kwargs`` set ranking options."""
        est = cls(**kwargs)
        est.vocab_, est.model_config_, est.params_ = vocab, config, params
        return est

    def summarize(self, X) -> list[Summary]:
        check_is_fitted(self, "params_")
        return summarize_documents(check_documents(X), self.vocab_, self.params_,
                                   self.model_config_, self.rank_config(), self.n_jobs)

    def transform(self, X) -> list[SentenceScores]:
        return [s.scores for s in self.summarize(X)]

    def predict(self, X) -> list[list[int]]:
        return [s.indices for s in self.summarize(X)]

    def score(self, X, y=None) -> float:
        """Mean of ROUGE-1/2/L F1 against ``y`` or the documents' own references."""
        docs = check_documents(X)
        refs = y if y is not None else [d.reference_summary for d in docs]
        if any(not r for r in refs):
            raise ValueError("every document needs a reference summary to score")
        per_doc = [rouge_scores(s.sentences, r) for s, r in zip(self.summarize(docs), refs)]
        agg = average_scores(per_doc)
        return float(np.mean([agg.rouge1.f1, agg.rouge2.f1, agg.rougeL.f1]))
