"""Corpus ingestion, vocabulary, encoding and pre-training instance generation."""
from __future__ import annotations

import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

BOS, EOS, MASK, UNK, PAD = "<s>", "</s>", "[MASK]", "<unk>", "<pad>"
RESERVED = (BOS, EOS, MASK, UNK, PAD)
BOS_ID, EOS_ID, MASK_ID, UNK_ID, PAD_ID = range(5)

MASK_RATE = 0.15
# branch split inside a selected sentence: [MASK] / random sentence / keep
MASK_BRANCH = 0.8
REPLACE_BRANCH = 0.1

MASKED, RANDOM_REPLACED, KEPT = "masked", "random_replaced", "kept"


class CorpusError(ValueError):
    """Malformed corpus input."""


@dataclass
class Document:
    doc_id: str
    sentences: list[str]
    reference_summary: list[str] | None = None

    def __post_init__(self):
        if not self.sentences:
            raise CorpusError(f"document {self.doc_id!r} has no sentences")
        if any(not s.strip() for s in self.sentences):
            raise CorpusError(f"document {self.doc_id!r} has an empty sentence")


def load_corpus(path) -> list[Document]:
    """Read a JSONL corpus (keys ``doc_id``, ``sentences``, optional ``summary``).

    Malformed lines raise :class:`CorpusError` naming the line number.
    Documents with an empty sentence list are skipped and counted in a warning.
    """
    docs, rejected = [], 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict) or "sentences" not in obj or "doc_id" not in obj:
                raise CorpusError(f"{path}:{lineno}: expected object with 'doc_id' and 'sentences'")
            sents = obj["sentences"]
            if not isinstance(sents, list) or not all(isinstance(s, str) for s in sents):
                raise CorpusError(f"{path}:{lineno}: 'sentences' must be a list of strings")
            sents = [s for s in sents if s.strip()]
            if not sents:
                rejected += 1
                continue
            summary = obj.get("summary")
            if summary is not None and not isinstance(summary, list):
                raise CorpusError(f"{path}:{lineno}: 'summary' must be a list of strings")
            docs.append(Document(str(obj["doc_id"]), sents, summary))
    if rejected:
        logger.warning("%s: rejected %d document(s) with no sentences", path, rejected)
    return docs


def save_corpus(docs: Iterable[Document], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in docs:
            obj = {"doc_id": d.doc_id, "sentences": d.sentences}
            if d.reference_summary is not None:
                obj["summary"] = d.reference_summary
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")


ABBREVIATIONS = frozenset({
    "mr", "mrs", "ms", "dr", "prof", "sr", "jr", "st", "vs", "etc", "inc", "ltd",
    "co", "corp", "gen", "gov", "sen", "rep", "lt", "col", "capt", "no", "fig",
    "jan", "feb", "mar", "apr", "jun", "jul", "aug", "sep", "sept", "oct", "nov", "dec",
    "u.s", "e.g", "i.e",
})

_BOUNDARY = re.compile(r"[.!?]+[\"')\]]*(?=\s+[A-Z\"'(\[]|\s*$)")


def segment(raw_text: str) -> list[str]:
    """Rule-based sentence splitter.

    Splits after ``.``, ``!`` or ``?`` when followed by whitespace and an
    uppercase letter (or end of text), unless the word before a period is a
    known abbreviation or a single capital initial ("J. Smith").
    """
    text = raw_text.strip()
    out, start = [], 0
    for m in _BOUNDARY.finditer(text):
        end = m.end()
        if text[m.start()] == "." and m.group().startswith(".") and len(m.group()) == 1:
            word = re.search(r"(\S+)$", text[start:m.start()])
            raw = word.group(1).rstrip(".") if word else ""
            if raw.lower() in ABBREVIATIONS or (len(raw) == 1 and raw.isupper()):
                continue
        piece = text[start:end].strip()
        if piece:
            out.append(piece)
        start = end
    tail = text[start:].strip()
    if tail:
        out.append(tail)
    return out


def tokenize(sentence: str) -> list[str]:
    return sentence.lower().split()


class Vocab:
    """Token/id mapping with reserved ids 0..4 for ``<s> </s> [MASK] <unk> <pad>``."""

    def __init__(self, tokens: Sequence[str] = ()):
        self.itos = list(RESERVED) + [t for t in tokens]
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.itos == other.itos

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK_ID)

    def ids(self, tokens: Iterable[str]) -> list[int]:
        return [self.stoi.get(t, UNK_ID) for t in tokens]

    def tokens(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[i] for i in ids]

    def save(self, path) -> None:
        """One token per line, reserved tokens first; line k (from 0) holds id k."""
        Path(path).write_text("".join(t + "\n" for t in self.itos), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        if tuple(lines[:len(RESERVED)]) != RESERVED:
            raise CorpusError(f"{path}: vocabulary must start with the reserved tokens {RESERVED}")
        return cls(lines[len(RESERVED):])


def build_vocab(docs: Sequence[Document], min_count: int = 1) -> Vocab:
    """Lowercased whitespace tokens with count >= ``min_count``, ordered by
    descending count then token."""
    if not docs:
        raise CorpusError("cannot build a vocabulary from an empty corpus")
    counts = Counter(t for d in docs for s in d.sentences for t in tokenize(s))
    kept = [t for t, c in counts.items() if c >= min_count and t not in RESERVED]
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocab(kept)


@dataclass
class EncodedDocument:
    """Sentence token-id lists, each wrapped in BOS ... EOS.

    ``flat`` is their concatenation; ``boundary_index[i]`` is the flat position
    of sentence i's BOS.
    """

    sentences: list[list[int]]
    doc_id: str = ""
    truncated: bool = False
    flat: np.ndarray = field(init=False, repr=False)
    boundary_index: np.ndarray = field(init=False, repr=False)
    positions: np.ndarray = field(init=False, repr=False)
    sentence_positions: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.sentences = [list(s) for s in self.sentences]
        lengths = [len(s) for s in self.sentences]
        self.flat = np.array([t for s in self.sentences for t in s], dtype=np.int64)
        self.boundary_index = np.concatenate([[0], np.cumsum(lengths)[:-1]]).astype(np.int64)
        self.positions = np.arange(len(self.flat), dtype=np.int64)
        self.sentence_positions = np.concatenate([np.arange(n) for n in lengths]).astype(np.int64)

    def __len__(self):
        return len(self.sentences)

    @property
    def n_tokens(self) -> int:
        return len(self.flat)


def encode(doc: Document, vocab: Vocab, max_tokens: int = 512,
           max_sentences: int = 64) -> EncodedDocument:
    """Wrap each sentence in BOS/EOS and truncate at a sentence boundary."""
    if max_tokens < 3:
        raise ValueError("max_tokens must leave room for BOS, one token and EOS")
    sents, total, truncated = [], 0, len(doc.sentences) > max_sentences
    for raw in doc.sentences[:max_sentences]:
        ids = [BOS_ID] + vocab.ids(tokenize(raw)) + [EOS_ID]
        if total + len(ids) > max_tokens:
            truncated = True
            if not sents:
                ids = ids[: max_tokens - 1] + [EOS_ID]
                sents.append(ids)
            break
        sents.append(ids)
        total += len(ids)
    return EncodedDocument(sents, doc_id=doc.doc_id, truncated=truncated)


def decode(enc: EncodedDocument, vocab: Vocab) -> list[list[str]]:
    """Interior tokens of every sentence (BOS/EOS stripped)."""
    return [vocab.tokens(s[1:-1]) for s in enc.sentences]


@dataclass
class MaskedInstance:
    """A document with some sentences corrupted, plus the originals to predict."""

    source: EncodedDocument
    masked: EncodedDocument
    masked_indices: list[int]
    actions: dict[int, str]

    @property
    def targets(self) -> dict[int, list[int]]:
        return {i: self.source.sentences[i] for i in self.masked_indices}


@dataclass
class ShuffledInstance:
    """``permuted.sentences[positions[i]]`` is original sentence ``i`` (0-based)."""

    source: EncodedDocument
    permuted: EncodedDocument
    positions: list[int]


def mask_sentence(sentence: Sequence[int]) -> list[int]:
    """Replace interior tokens with [MASK]; BOS/EOS stay."""
    return [sentence[0]] + [MASK_ID] * (len(sentence) - 2) + [sentence[-1]]


def _fit_length(replacement: Sequence[int], length: int) -> list[int]:
    interior = list(replacement[1:-1]) or [UNK_ID]
    need = length - 2
    reps = -(-need // len(interior)) if need > 0 else 0
    return [BOS_ID] + (interior * reps)[:need] + [EOS_ID]


def make_masked(doc: EncodedDocument, rng: np.random.Generator,
                pool: Sequence[Sequence[int]] | None = None) -> MaskedInstance:
    """Sentence-level BERT-style corruption.

    Each sentence is selected with probability 0.15 (one is forced when none
    is). A selected sentence is masked (80%), swapped for a random sentence
    from ``pool`` resized to the same length (10%) or kept (10%).
    """
    n = len(doc)
    if n < 1:
        raise ValueError("cannot mask an empty document")
    pool = doc.sentences if pool is None else pool
    selected = [i for i in range(n) if rng.random() < MASK_RATE]
    if not selected:
        selected = [int(rng.integers(n))]
    new = [list(s) for s in doc.sentences]
    actions = {}
    for i in selected:
        u = rng.random()
        if u < MASK_BRANCH:
            new[i] = mask_sentence(doc.sentences[i])
            actions[i] = MASKED
        elif u < MASK_BRANCH + REPLACE_BRANCH:
            repl = pool[int(rng.integers(len(pool)))]
            new[i] = _fit_length(repl, len(doc.sentences[i]))
            actions[i] = RANDOM_REPLACED
        else:
            actions[i] = KEPT
    masked = EncodedDocument(new, doc_id=doc.doc_id, truncated=doc.truncated)
    return MaskedInstance(doc, masked, selected, actions)


def make_shuffled(doc: EncodedDocument, rng: np.random.Generator,
                  order: Sequence[int] | None = None) -> ShuffledInstance:
    """Shuffle sentences; ``order[k]`` is the original index placed at slot k."""
    n = len(doc)
    if n < 1:
        raise ValueError("cannot shuffle an empty document")
    order = list(rng.permutation(n)) if order is None else list(order)
    if sorted(order) != list(range(n)):
        raise ValueError(f"order {order} is not a permutation of range({n})")
    positions = [0] * n
    for slot, i in enumerate(order):
        positions[i] = slot
    permuted = EncodedDocument([doc.sentences[i] for i in order], doc_id=doc.doc_id,
                               truncated=doc.truncated)
    return ShuffledInstance(doc, permuted, [int(p) for p in positions])
