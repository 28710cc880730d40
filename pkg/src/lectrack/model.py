"""The per-component tracker network and its incremental interface.

Each token goes through an embedding lookup, a ReLU layer that also sees the
ASR confidence, one LSTM step and a softmax classifier.  The LSTM input gate
uses tanh rather than the logistic function.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .corpus import DialogExample, TokenEvent
from .nncore import InitSpec, Node, ParamStore, Tape, TensorInit, init_params, sigmoid, softmax
from .preprocess import AbstractionAssignment, Vocabulary, assignment_prefixes, deabstract_distribution

# gate order inside the packed LSTM matrices
GATES = ("i", "f", "o", "g")


@dataclass(frozen=True)
class ModelDims:
    vocab_size: int
    n_classes: int
    embed_dim: int = 170
    input_dim: int = 300
    hidden: int = 100
    use_scores: bool = True

    @property
    def lstm_input(self) -> int:
        return self.input_dim if self.use_scores else self.embed_dim


def init_spec(dims: ModelDims) -> InitSpec:
    h = dims.hidden
    tensors = [TensorInit("embedding", (dims.vocab_size, dims.embed_dim), dims.vocab_size)]
    if dims.use_scores:
        tensors += [
            TensorInit("input_W", (dims.embed_dim + 1, dims.input_dim), dims.embed_dim + 1),
            TensorInit("input_b", (dims.input_dim,), 1, bias=True),
        ]
    tensors += [
        TensorInit("lstm_Wx", (dims.lstm_input, 4 * h), dims.lstm_input),
        TensorInit("lstm_Wh", (h, 4 * h), h),
        TensorInit("lstm_b", (4 * h,), 1, bias=True, constants=((h, 2 * h, 1.0),)),
        TensorInit("classifier_W", (h, dims.n_classes), h),
        TensorInit("classifier_b", (dims.n_classes,), 1, bias=True),
    ]
    return InitSpec(tuple(tensors))


@dataclass
class ComponentModel:
    """Weights plus everything needed to interpret them for one component."""

    component: str
    classes: list[str]
    dims: ModelDims
    params: ParamStore
    vocab: Vocabulary

    @classmethod
    def create(
        cls,
        component: str,
        classes: Sequence[str],
        vocab: Vocabulary,
        rng: np.random.Generator,
        **dims,
    ) -> "ComponentModel":
        d = ModelDims(vocab_size=len(vocab), n_classes=len(classes), **dims)
        return cls(component, list(classes), d, init_params(init_spec(d), rng), vocab)

    def manifest(self) -> dict:
        return {
            "component": self.component,
            "classes": self.classes,
            "dims": asdict(self.dims),
            "vocab_hash": self.vocab.hash,
        }


@dataclass(frozen=True)
class TrackerState:
    c: np.ndarray
    h: np.ndarray
    token_count: int = 0

    @classmethod
    def initial(cls, hidden: int) -> "TrackerState":
        return cls(np.zeros(hidden), np.zeros(hidden), 0)


def embed_with_score(token_id: int, score: float, model: ComponentModel) -> np.ndarray:
    p = model.params
    if not 0 <= token_id < p["embedding"].shape[0]:
        raise IndexError(f"token id {token_id} outside vocabulary of size {p['embedding'].shape[0]}")
    e = p["embedding"][token_id]
    if not model.dims.use_scores:
        return e.copy()
    x = np.concatenate([e, [float(score)]])
    return np.maximum(x @ p["input_W"] + p["input_b"], 0.0)


def lstm_step(u: np.ndarray, state: TrackerState, model: ComponentModel) -> TrackerState:
    p = model.params
    h = model.dims.hidden
    z = u @ p["lstm_Wx"] + state.h @ p["lstm_Wh"] + p["lstm_b"]
    i = np.tanh(z[:h])
    f = sigmoid(z[h : 2 * h])
    o = sigmoid(z[2 * h : 3 * h])
    g = np.tanh(z[3 * h :])
    c = f * state.c + i * g
    return TrackerState(c, o * np.tanh(c), state.token_count + 1)


def classify(state: TrackerState, model: ComponentModel) -> np.ndarray:
    p = model.params
    return softmax(state.h @ p["classifier_W"] + p["classifier_b"])


def track_token(
    state: TrackerState, event: TokenEvent, model: ComponentModel
) -> tuple[TrackerState, np.ndarray]:
    """Consume one token; returns the new state and the class distribution."""
    u = embed_with_score(model.vocab.encode(event.token), event.score, model)
    new = lstm_step(u, state, model)
    return new, classify(new, model)


def check_shared_vocab(models: Iterable[ComponentModel]) -> str:
    hashes = {m.vocab.hash for m in models}
    if len(hashes) > 1:
        raise ValueError("component models do not share one vocabulary")
    return hashes.pop() if hashes else ""


def run_sequence(
    model: ComponentModel, token_ids: np.ndarray, scores: np.ndarray
) -> np.ndarray:
    """Batched evaluation: distributions after every token, shape (n, C).

    The input layer and the input half of the LSTM are evaluated for the
    whole sequence at once; only the recurrence is sequential.
    """
    p = model.params
    hdim = model.dims.hidden
    n = len(token_ids)
    e = p["embedding"][token_ids]
    if model.dims.use_scores:
        x = np.concatenate([e, np.asarray(scores, dtype=float).reshape(n, 1)], axis=1)
        u = np.maximum(x @ p["input_W"] + p["input_b"], 0.0)
    else:
        u = e
    xw = u @ p["lstm_Wx"] + p["lstm_b"] if n else np.zeros((0, 4 * hdim))
    c = np.zeros(hdim)
    h = np.zeros(hdim)
    hs = np.zeros((n, hdim))
    for t in range(n):
        z = xw[t] + h @ p["lstm_Wh"]
        i = np.tanh(z[:hdim])
        f = sigmoid(z[hdim : 2 * hdim])
        o = sigmoid(z[2 * hdim : 3 * hdim])
        g = np.tanh(z[3 * hdim :])
        c = f * c + i * g
        h = o * np.tanh(c)
        hs[t] = h
    return softmax(hs @ p["classifier_W"] + p["classifier_b"]) if n else np.zeros((0, model.dims.n_classes))


def prior(model: ComponentModel) -> np.ndarray:
    return classify(TrackerState.initial(model.dims.hidden), model)


def encode_example(example: DialogExample, vocab: Vocabulary) -> tuple[np.ndarray, np.ndarray]:
    ids = vocab.encode_all(e.token for e in example.events)
    scores = np.array([e.score for e in example.events], dtype=float)
    return ids, scores


def component_beliefs(
    model: ComponentModel,
    example: DialogExample,
    encoded: tuple[np.ndarray, np.ndarray] | None = None,
) -> list[np.ndarray]:
    """Class distributions at the end of every turn (before de-abstraction)."""
    ids, scores = encoded if encoded is not None else encode_example(example, model.vocab)
    probs = run_sequence(model, ids, scores)
    base = None
    out = []
    for t in example.turn_ends:
        if t < 0:
            if base is None:
                base = prior(model)
            out.append(base)
        else:
            out.append(probs[t])
    return out


def track_dialog(
    example: DialogExample,
    models: Mapping[str, ComponentModel],
    assignment: AbstractionAssignment | None,
    concrete: Mapping[str, Sequence[str]],
) -> list[dict[str, np.ndarray]]:
    """Belief state per turn: for each component, a distribution over its
    concrete values (abstract classes already substituted back)."""
    check_shared_vocab(models.values())
    per_turn = assignment_prefixes(assignment or AbstractionAssignment(), example.events, example.turn_ends)
    encoded = None
    beliefs: list[dict[str, np.ndarray]] = [dict() for _ in example.turn_ends]
    for name, model in models.items():
        if encoded is None:
            encoded = encode_example(example, model.vocab)
        for k, p in enumerate(component_beliefs(model, example, encoded)):
            beliefs[k][name] = deabstract_distribution(p, model.classes, name, per_turn[k], concrete[name])
    return beliefs


def tape_forward(
    tape: Tape,
    dims: ModelDims,
    token_ids: np.ndarray,
    scores: np.ndarray,
    positions: Sequence[int],
) -> Node:
    """Record the full unrolled network; returns logits at ``positions``."""
    hdim = dims.hidden
    n = len(token_ids)
    x = tape.embed(tape.param("embedding"), token_ids)
    if dims.use_scores:
        x = tape.concat(x, tape.constant(np.asarray(scores, dtype=float).reshape(n, 1)))
        x = tape.relu(tape.affine(x, tape.param("input_W"), tape.param("input_b")))
    xw = tape.affine(x, tape.param("lstm_Wx"), tape.param("lstm_b"))
    wh = tape.param("lstm_Wh")
    c = tape.constant(np.zeros(hdim))
    h = tape.constant(np.zeros(hdim))
    wanted = set(positions)
    kept: dict[int, Node] = {}
    last = max(positions) if len(positions) else -1
    for t in range(last + 1):
        z = tape.add(tape.row(xw, t), tape.affine(h, wh))
        i = tape.tanh(tape.slice(z, 0, hdim))
        f = tape.sigmoid(tape.slice(z, hdim, 2 * hdim))
        o = tape.sigmoid(tape.slice(z, 2 * hdim, 3 * hdim))
        g = tape.tanh(tape.slice(z, 3 * hdim, 4 * hdim))
        c = tape.add(tape.mul(f, c), tape.mul(i, g))
        h = tape.mul(o, tape.tanh(c))
        if t in wanted:
            kept[t] = h
    hs = tape.stack([kept[t] for t in positions])
    return tape.affine(hs, tape.param("classifier_W"), tape.param("classifier_b"))


def trace_record(
    dialog_id: str,
    t: int,
    event: TokenEvent,
    distributions: Mapping[str, tuple[Sequence[str], np.ndarray]],
    k: int = 3,
) -> dict:
    """One JSON-ready line of a token-level tracking trace."""
    top = {}
    for name, (values, p) in distributions.items():
        order = np.argsort(-p, kind="stable")[:k]
        top[name] = [[values[j], float(p[j])] for j in order]
    return {"dialog_id": dialog_id, "t": t, "token": event.token, "score": event.score, "top": top}
