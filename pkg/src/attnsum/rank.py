"""Sentence ranking from masked-sentence probabilities and sentence attention."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .corpus import Document, EncodedDocument, mask_sentence, tokenize
from .model import ModelConfig, Params, collate, encode_batch, msp_logits

logger = logging.getLogger(__name__)

JI, IJ = "ji", "ij"


@dataclass
class RankConfig:
    gamma1: float = 1.0
    gamma2: float = 1.0
    T: int = 1
    use_trigram_blocking: bool = True
    summary_len: int = 3
    attention_direction: str = JI
    uniform_r_tilde: bool = False
    zero_r_prime: bool = False
    no_renorm: bool = False

    def __post_init__(self):
        self.attention_direction = self.attention_direction.lower()
        if self.attention_direction not in (JI, IJ):
            raise ValueError(f"attention_direction must be 'ji' or 'ij', got {self.attention_direction!r}")
        if self.gamma1 < 0 or self.gamma2 < 0 or (self.gamma1 == 0 and self.gamma2 == 0):
            raise ValueError("gamma1, gamma2 must be non-negative and not both zero")
        if self.T < 0:
            raise ValueError("T must be >= 0")
        if self.T > 3:
            logger.warning("T=%d: more than 3 iterations is rarely useful", self.T)
        if self.summary_len < 0:
            raise ValueError("summary_len must be >= 0")


@dataclass
class SentenceScores:
    r_hat: np.ndarray
    r_tilde: np.ndarray
    r_prime: np.ndarray
    r: np.ndarray
    attention: np.ndarray | None = field(default=None, repr=False)

    def __len__(self):
        return len(self.r)

    def to_dict(self) -> dict:
        return {k: [float(x) for x in getattr(self, k)] for k in ("r_hat", "r_tilde", "r_prime", "r")}


def masked_variants(doc: EncodedDocument) -> list[EncodedDocument]:
    """D with sentence i masked, for every i."""
    out = []
    for i in range(len(doc)):
        sents = [list(s) for s in doc.sentences]
        sents[i] = mask_sentence(sents[i])
        out.append(EncodedDocument(sents, doc_id=doc.doc_id))
    return out


def token_probabilities(doc: EncodedDocument, params: Params, config: ModelConfig,
                        indices: Sequence[int] | None = None) -> list[np.ndarray]:
    """p(w_j | w_<j, D with S_i masked) for every predicted token of each sentence i.

    Each sentence costs one masked encoder pass; the passes are batched.
    """
    indices = list(range(len(doc))) if indices is None else list(indices)
    for i in indices:
        if not 0 <= i < len(doc):
            raise IndexError(f"sentence index {i} out of range for {len(doc)} sentences")
    variants = masked_variants(doc)
    with ad.no_grad():
        H, _, _ = encode_batch(collate([variants[i] for i in indices], config), params, config)
        cond = ad.take(H, (np.arange(len(indices)), np.array(indices)))
        targets = [doc.sentences[i] for i in indices]
        logits, gold, real = msp_logits(targets, cond, params, config)
        logp = ad.log_softmax(logits, axis=-1).data
    L = len(real) // len(indices)
    picked = np.exp(logp[np.arange(len(gold)), gold]).reshape(len(indices), L)
    return [picked[k, :len(targets[k]) - 1] for k in range(len(indices))]


def sentence_prob(doc: EncodedDocument, i: int, params: Params, config: ModelConfig) -> float:
    """Arithmetic mean of the token probabilities of sentence i given the rest of D."""
    return float(token_probabilities(doc, params, config, [i])[0].mean())


def sentence_probs(doc: EncodedDocument, params: Params, config: ModelConfig) -> np.ndarray:
    return np.array([p.mean() for p in token_probabilities(doc, params, config)])


def normalize_scores(r_hat) -> np.ndarray:
    r_hat = np.asarray(r_hat, dtype=np.float64)
    total = r_hat.sum()
    if np.any(r_hat < 0) or total <= 0:
        raise ValueError("sentence scores must be non-negative with a positive sum")
    return r_hat / total


def propagate(r_tilde, A, direction: str = JI) -> np.ndarray:
    """Importance received from the other sentences through attention edges.

    ``ji``: r'_i = sum_{j != i} A[j, i] r_j ; ``ij``: r'_i = sum_{j != i} A[i, j] r_j.
    """
    r_tilde = np.asarray(r_tilde, dtype=np.float64)
    A = np.asarray(A, dtype=np.float64)
    n = len(r_tilde)
    if A.shape != (n, n):
        raise ValueError(f"attention shape {A.shape} does not match {n} sentences")
    off = A - np.diag(np.diag(A))
    if direction == JI:
        return off.T @ r_tilde
    if direction == IJ:
        return off @ r_tilde
    raise ValueError(f"unknown direction {direction!r}")


def combine_iterate(r_tilde, A, rc: RankConfig, r_hat=None) -> SentenceScores:
    """Iterate r = gamma1 * r_tilde + gamma2 * r' for T rounds, feeding r back as r_tilde."""
    r_tilde = np.asarray(r_tilde, dtype=np.float64)
    n = len(r_tilde)
    start = np.full(n, 1.0 / n) if rc.uniform_r_tilde else r_tilde
    current = start.copy()
    r_prime = np.zeros(n)
    for _ in range(rc.T):
        r_prime = np.zeros(n) if rc.zero_r_prime else propagate(current, A, rc.attention_direction)
        r = rc.gamma1 * current + rc.gamma2 * r_prime
        if not rc.no_renorm:
            r = r / r.sum()
        current = r
    return SentenceScores(r_hat=np.asarray(r_hat if r_hat is not None else r_tilde, dtype=np.float64),
                          r_tilde=start, r_prime=r_prime, r=current, attention=np.asarray(A))


def score_document(doc: EncodedDocument, params: Params, config: ModelConfig,
                   rc: RankConfig) -> SentenceScores:
    """Full scoring pipeline for one encoded document."""
    r_hat = sentence_probs(doc, params, config)
    with ad.no_grad():
        _, _, A = encode_batch(collate([doc], config), params, config)
    return combine_iterate(normalize_scores(r_hat), A[0], rc, r_hat=r_hat)


def trigrams(sentence: str) -> set[tuple[str, ...]]:
    toks = tokenize(sentence)
    return {tuple(toks[k:k + 3]) for k in range(len(toks) - 2)}


def select_summary(doc: Document | Sequence[str], scores, rc: RankConfig) -> list[int]:
    """Top sentences by descending score (earlier index wins ties), skipping
    any sentence that shares a word trigram with those already chosen.
    Returned in document order."""
    sentences = doc.sentences if isinstance(doc, Document) else list(doc)
    r = np.asarray(scores.r if isinstance(scores, SentenceScores) else scores, dtype=np.float64)
    if len(sentences) < len(r):
        raise ValueError("scores longer than the document")
    order = sorted(range(len(r)), key=lambda i: (-r[i], i))
    chosen, seen = [], set()
    for i in order:
        if len(chosen) >= rc.summary_len:
            break
        tri = trigrams(sentences[i])
        if rc.use_trigram_blocking and tri & seen:
            continue
        chosen.append(i)
        seen |= tri
    return sorted(chosen)


def combine_external(r, external, weight_self: float = 0.9) -> np.ndarray:
    """Linear blend of two per-document normalised score vectors."""
    r = np.asarray(r.r if isinstance(r, SentenceScores) else r, dtype=np.float64)
    external = np.asarray(external, dtype=np.float64)
    if r.shape != external.shape:
        raise ValueError(f"score lengths differ: {len(r)} vs {len(external)}")
    if not 0.0 <= weight_self <= 1.0:
        raise ValueError("weight_self must lie in [0, 1]")
    return weight_self * r + (1.0 - weight_self) * external
