import json
from pathlib import Path

import numpy as np
import pytest

from lectrack.corpus import SYSTEM, USER_ASR, DialogExample, TokenEvent
from lectrack.model import ComponentModel
from lectrack.pipeline import RunConfig, prepare, save_prepared
from lectrack.preprocess import Vocabulary

from synth import write_corpus

TOY_WORDS = ["request", "slot", "food", "looking", "for", "chinese", "indian", "cheap", "the", "inform", "a"]


def numeric_gradient(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` with respect to array ``x`` (perturbed in place)."""
    out = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        out[idx] = (fp - fm) / (2 * h)
    return out


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    denom = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b)) / denom)


def toy_vocab() -> Vocabulary:
    # 11 words plus #OOV = 12 entries
    return Vocabulary(TOY_WORDS)


def toy_model(seed=0, classes=("chinese", "indian", "none", "dontcare"), use_scores=True, **dims) -> ComponentModel:
    dims = {"embed_dim": 4, "input_dim": 5, "hidden": 3, "use_scores": use_scores, **dims}
    return ComponentModel.create("food", list(classes), toy_vocab(), np.random.default_rng(seed), **dims)


def make_example(turns, labels=None, dialog_id="d0") -> DialogExample:
    """``turns``: list of (system tokens, [(user word, score)]); labels per turn."""
    events = []
    lab = {}
    ends = []
    for ti, (sys_toks, user) in enumerate(turns):
        for tok in sys_toks:
            events.append(TokenEvent(tok, 1.0, SYSTEM, ti))
        for w, s in user:
            events.append(TokenEvent(w, s, USER_ASR, ti))
        last = events[-1]
        events[-1] = TokenEvent(last.token, last.score, last.source, ti, True)
        if labels is not None:
            lab[len(events) - 1] = dict(labels[ti])
        ends.append(len(events) - 1)
    return DialogExample(dialog_id, events, lab, ends, {})


@pytest.fixture
def toy():
    return toy_model()


@pytest.fixture(scope="session")
def corpus(tmp_path_factory) -> dict:
    root = tmp_path_factory.mktemp("corpus")
    cfg = write_corpus(root)
    cfg["train"] = {"embed_dim": 8, "input_dim": 12, "hidden": 10, "max_epochs": 2, "patience": 2}
    cfg["ensemble_size"] = 2
    path = root / "config.json"
    path.write_text(json.dumps(cfg))
    cfg["path"] = str(path)
    return cfg


@pytest.fixture(scope="session")
def prepared(corpus, tmp_path_factory):
    config = RunConfig.load(corpus["path"])
    data = prepare(config)
    save_prepared(data, Path(tmp_path_factory.mktemp("prepared")))
    return data


# criterion number -> (name, passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        name, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n} ({name}): {'PASS' if ok else 'FAIL'}  {detail}")
