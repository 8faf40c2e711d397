"""ROUGE-1/2/L, LEAD-k and greedy ORACLE baselines, and position analysis."""
from __future__ import annotations

import csv
import io
import math
import re
from collections import Counter
from dataclasses import dataclass
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from .corpus import Document

_NON_ALNUM = re.compile(r"[^a-z0-9]+")


def rouge_tokenize(text: str) -> list[str]:
    """Lowercase and split on anything that is not a letter or digit. No stemming."""
    return _NON_ALNUM.sub(" ", text.lower()).split()


class Score(NamedTuple):
    precision: float
    recall: float
    f1: float


def _prf(hits: float, n_cand: int, n_ref: int) -> Score:
    p = hits / n_cand if n_cand else 0.0
    r = hits / n_ref if n_ref else 0.0
    return Score(p, r, 2 * p * r / (p + r) if p + r > 0 else 0.0)


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[k:k + n]) for k in range(len(tokens) - n + 1))


def rouge_n(candidate: Sequence[str], reference: Sequence[str], n: int) -> Score:
    """Clipped n-gram overlap between two token lists."""
    if n < 1:
        raise ValueError("n must be >= 1")
    c, r = ngrams(candidate, n), ngrams(reference, n)
    hits = sum((c & r).values())
    return _prf(hits, sum(c.values()), sum(r.values()))


def lcs_table(a: Sequence[str], b: Sequence[str]) -> list[list[int]]:
    t = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i, x in enumerate(a, 1):
        row, prev = t[i], t[i - 1]
        for j, y in enumerate(b, 1):
            row[j] = prev[j - 1] + 1 if x == y else max(prev[j], row[j - 1])
    return t


def lcs_positions(ref: Sequence[str], cand: Sequence[str]) -> set[int]:
    """Indices into ``ref`` of one longest common subsequence with ``cand``."""
    t = lcs_table(ref, cand)
    i, j, hits = len(ref), len(cand), set()
    while i > 0 and j > 0:
        if ref[i - 1] == cand[j - 1]:
            hits.add(i - 1)
            i -= 1
            j -= 1
        elif t[i - 1][j] >= t[i][j - 1]:
            i -= 1
        else:
            j -= 1
    return hits


def rouge_l(candidate: Sequence[Sequence[str]], reference: Sequence[Sequence[str]]) -> Score:
    """Summary-level ROUGE-L with union LCS.

    For each reference sentence the LCS matches against every candidate
    sentence are unioned; each matched token counts once per available
    occurrence in both summaries.
    """
    if not reference:
        raise ValueError("reference summary is empty")
    ref_counts = Counter(t for s in reference for t in s)
    cand_counts = Counter(t for s in candidate for t in s)
    n_ref = sum(ref_counts.values())
    n_cand = sum(cand_counts.values())
    hits = 0
    for ref_sent in reference:
        union: set[int] = set()
        for cand_sent in candidate:
            union |= lcs_positions(ref_sent, cand_sent)
        for k in sorted(union):
            tok = ref_sent[k]
            if ref_counts[tok] > 0 and cand_counts[tok] > 0:
                hits += 1
                ref_counts[tok] -= 1
                cand_counts[tok] -= 1
    return _prf(hits, n_cand, n_ref)


@dataclass
class RougeScore:
    rouge1: Score
    rouge2: Score
    rougeL: Score

    def rows(self):
        return [("rouge-1", self.rouge1), ("rouge-2", self.rouge2), ("rouge-l", self.rougeL)]


def rouge_scores(candidate: Sequence[str], reference: Sequence[str]) -> RougeScore:
    """ROUGE-1/2/L between two summaries given as lists of sentence strings."""
    cs = [rouge_tokenize(s) for s in candidate]
    rs = [rouge_tokenize(s) for s in reference]
    cflat = [t for s in cs for t in s]
    rflat = [t for s in rs for t in s]
    return RougeScore(rouge_n(cflat, rflat, 1), rouge_n(cflat, rflat, 2), rouge_l(cs, rs))


def average_scores(scores: Sequence[RougeScore]) -> RougeScore:
    def avg(attr):
        return Score(*(float(np.mean([getattr(s, attr)[k] for s in scores])) for k in range(3)))
    return RougeScore(avg("rouge1"), avg("rouge2"), avg("rougeL"))


def _oracle_objective(sent_tokens, selected, ref_tokens) -> float:
    cand = [t for i in sorted(selected) for t in sent_tokens[i]]
    return 0.5 * (rouge_n(cand, ref_tokens, 1).f1 + rouge_n(cand, ref_tokens, 2).f1)


def oracle_extract(doc: Document, max_sentences: int = 3) -> list[int]:
    """Greedy forward selection maximising mean(ROUGE-1 F1, ROUGE-2 F1).

    The first sentence is always taken; later additions must strictly improve
    the objective. Returned in document order.
    """
    if not doc.reference_summary:
        raise ValueError(f"document {doc.doc_id!r} has no reference summary")
    sent_tokens = [rouge_tokenize(s) for s in doc.sentences]
    ref_tokens = [t for s in doc.reference_summary for t in rouge_tokenize(s)]
    selected: list[int] = []
    current = -1.0
    while len(selected) < min(max_sentences, len(sent_tokens)):
        best_i, best = None, -1.0
        for i in range(len(sent_tokens)):
            if i in selected:
                continue
            score = _oracle_objective(sent_tokens, selected + [i], ref_tokens)
            if score > best:
                best_i, best = i, score
        if best_i is None or (selected and best <= current):
            break
        selected.append(best_i)
        current = best
    return sorted(selected)


def lead_k(doc: Document | Sequence[str], k: int = 3) -> list[int]:
    n = len(doc.sentences if isinstance(doc, Document) else doc)
    return list(range(min(k, n)))


@dataclass
class PositionHistogram:
    counts: np.ndarray

    @property
    def K(self) -> int:
        return len(self.counts)

    @property
    def normalized(self) -> np.ndarray:
        total = self.counts.sum()
        return self.counts / total if total > 0 else np.zeros(self.K)


def position_histogram(selections: Sequence[Sequence[int]], K: int = 12) -> PositionHistogram:
    """Counts of selected sentences at positions 1..K (0-based indices < K)."""
    counts = np.zeros(K)
    for sel in selections:
        for i in sel:
            if 0 <= i < K:
                counts[i] += 1
    return PositionHistogram(counts)


def position_kl(p, q, eps: float = 1e-9) -> float:
    """KL(p || q) with 0 * log 0 = 0.

    Only when p has mass where q is zero is q floored at ``eps`` and
    renormalised, which keeps the result finite; otherwise q is used as is.
    """
    p = p.normalized if isinstance(p, PositionHistogram) else np.asarray(p, dtype=np.float64)
    q = q.normalized if isinstance(q, PositionHistogram) else np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"histograms differ in length: {len(p)} vs {len(q)}")
    mask = p > 0
    if np.any(q[mask] <= 0):
        q = np.maximum(q, eps)
        q = q / q.sum()
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def evaluate_corpus(summaries: Mapping[str, Sequence[str]],
                    references: Mapping[str, Sequence[str] | None]
                    ) -> tuple[RougeScore | None, dict[str, RougeScore], list[str]]:
    """Per-document ROUGE averaged over documents.

    Returns the aggregate (None if nothing was scorable), per-document scores
    and a list of problems (missing ids or references).
    """
    per_doc, problems = {}, []
    for doc_id, cand in summaries.items():
        if doc_id not in references:
            problems.append(f"{doc_id}: not found in corpus")
            continue
        ref = references[doc_id]
        if not ref:
            problems.append(f"{doc_id}: no reference summary")
            continue
        per_doc[doc_id] = rouge_scores(cand, ref)
    for doc_id in references:
        if doc_id not in summaries:
            problems.append(f"{doc_id}: no candidate summary")
    agg = average_scores(list(per_doc.values())) if per_doc else None
    return agg, per_doc, problems


def rouge_table_csv(systems: Mapping[str, RougeScore]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["system", "metric", "precision", "recall", "f1"])
    for name, score in systems.items():
        for metric, s in score.rows():
            w.writerow([name, metric, f"{s.precision:.6f}", f"{s.recall:.6f}", f"{s.f1:.6f}"])
    return buf.getvalue()


def histogram_csv(hists: Mapping[str, PositionHistogram]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    names = list(hists)
    w.writerow(["position"] + names)
    K = max(h.K for h in hists.values())
    for k in range(K):
        w.writerow([k + 1] + [f"{hists[n].normalized[k]:.6f}" for n in names])
    return buf.getvalue()


def kl_table_csv(kls: Mapping[str, float]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "kl_to_oracle"])
    for name, v in kls.items():
        w.writerow([name, "inf" if math.isinf(v) else f"{v:.6f}"])
    return buf.getvalue()
