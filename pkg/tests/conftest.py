import numpy as np
import pytest

from attnsum.corpus import EncodedDocument
from attnsum.model import ModelConfig

_CRITERIA: dict[str, list] = {}


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            _CRITERIA.setdefault(mark.args[0], [])


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        detail = "; ".join(f"{k}={v}" for k, v in report.user_properties)
        _CRITERIA[mark.args[0]].append((report.outcome, detail))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for name, results in _CRITERIA.items():
        if not results:
            status, detail = "NOT RUN", ""
        else:
            ok = all(o == "passed" for o, _ in results)
            status = "PASS" if ok else "FAIL"
            detail = " | ".join(d for _, d in results if d)
        tr.write_line(f"[{status}] {name}" + (f"  ({detail})" if detail else ""))


@pytest.fixture
def small_config():
    return ModelConfig(vocab_size=20, d_model=16, n_heads=2, token_layers=2, sentence_layers=2,
                       decoder_layers=1, max_tokens=40, max_sentences=8, init_scale=0.3)


def random_doc(rng, n_sent, vocab_size=20, min_len=1, max_len=4, doc_id="doc"):
    sents = []
    for _ in range(n_sent):
        body = rng.integers(5, vocab_size, size=int(rng.integers(min_len, max_len + 1))).tolist()
        sents.append([0] + body + [1])
    return EncodedDocument(sents, doc_id=doc_id)


@pytest.fixture
def make_doc():
    return random_doc
