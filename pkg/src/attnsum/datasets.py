"""Synthetic corpora for smoke tests and demos."""
from __future__ import annotations

import numpy as np

from .corpus import Document

_FILLER = (
    "the a of and to in on for with by at from after before over under near about "
    "was is were are had has said told went came made took saw found kept left put set "
    "day week year time way man woman city town road house room door car park game team "
    "small large early late first last new old long short good bad high low open quiet"
).split()

_TOPICS = (
    "storm flood river rain coast wind",
    "court judge trial jury lawyer verdict",
    "market stock price bank trade profit",
    "vote election party senate campaign ballot",
    "vaccine doctor hospital patient virus clinic",
    "rocket orbit launch moon crew station",
    "match goal striker coach league title",
    "museum painting artist gallery canvas portrait",
    "fire smoke crew forest blaze acre",
    "school teacher pupil exam class lesson",
    "chef kitchen recipe dish menu flavor",
    "ship port cargo sailor harbor dock",
)


def make_toy_corpus(n_docs: int = 8, n_sentences: tuple[int, int] = (5, 7),
                    sentence_len: tuple[int, int] = (4, 6), n_salient: int = 2,
                    random_state: int = 0) -> list[Document]:
    """Documents whose reference summary copies the topic-heavy sentences.

    Each document draws a topic; ``n_salient`` sentences mix several topic
    words into filler and are placed at random positions, the rest are
    filler with at most one topic word. The reference summary is the salient
    sentences in document order, so extractive oracles are position-agnostic.
    """
    rng = np.random.default_rng(random_state)
    docs = []
    for k in range(n_docs):
        topic = _TOPICS[int(rng.integers(len(_TOPICS)))].split()
        n = int(rng.integers(n_sentences[0], n_sentences[1] + 1))
        salient = set(rng.choice(n, size=min(n_salient, n), replace=False).tolist())
        sents = []
        for i in range(n):
            length = int(rng.integers(sentence_len[0], sentence_len[1] + 1))
            words = list(rng.choice(_FILLER, size=length))
            n_topic = 3 if i in salient else int(rng.integers(0, 2))
            slots = rng.choice(length, size=min(n_topic, length), replace=False)
            for s in slots:
                words[int(s)] = str(rng.choice(topic))
            sents.append(" ".join(words).capitalize() + ".")
        summary = [sents[i] for i in sorted(salient)]
        docs.append(Document(f"toy-{k:03d}", sents, summary))
    return docs
