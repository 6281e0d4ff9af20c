from __future__ import annotations

import numpy as np
import pytest

from herbgen.kg import RELATIONS, KnowledgeGraph, Triple
from herbgen.model import ModelConfig, ModelParams, Transformer
from herbgen.vocab import build_vocabulary

HERBS = ["人参", "白术", "当归", "甘草", "黄芪", "茯苓"]
ATTRS = {
    "人参": ("温", "甘", "脾经", "补气"),
    "白术": ("温", "苦", "胃经", "健脾"),
    "当归": ("温", "辛", "肝经", "补血"),
    "甘草": ("平", "甘", "心经", "和中"),
    "黄芪": ("微温", "甘", "肺经", "固表"),
    "茯苓": ("平", "淡", "肾经", "利水"),
}
SYMPTOMS = ["便血不止", "气短乏力", "面色萎黄", "心悸失眠", "食少便溏", "自汗恶风"]


def make_kg() -> KnowledgeGraph:
    return KnowledgeGraph.from_triples(
        Triple(h, r, tail) for h, tails in ATTRS.items() for r, tail in zip(RELATIONS, tails)
    )


@pytest.fixture(scope="session")
def kg():
    return make_kg()


@pytest.fixture(scope="session")
def lexicon():
    corpus = SYMPTOMS + [h + "".join(t) for h, t in ATTRS.items()]
    vocab, registry, _ = build_vocabulary(corpus, HERBS)
    return vocab, registry


@pytest.fixture(scope="session")
def vocab(lexicon):
    return lexicon[0]


@pytest.fixture(scope="session")
def registry(lexicon):
    return lexicon[1]


def tiny_model(vocab_size: int, layers: int = 2, hidden: int = 16, heads: int = 2, seed: int = 0,
               init_std: float = 0.5, max_len: int = 128) -> Transformer:
    cfg = ModelConfig(vocab_size, hidden_size=hidden, num_layers=layers, num_heads=heads,
                      max_len=max_len, init_std=init_std)
    return Transformer(ModelParams.init(cfg, seed))


# -- acceptance summary -----------------------------------------------------------

_ACCEPTANCE: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): acceptance criterion test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    number, title = marker.args
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        _ACCEPTANCE[number] = (title, status)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, status = _ACCEPTANCE[number]
        terminalreporter.write_line(f"[{status}] criterion {number}: {title}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
