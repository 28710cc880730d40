"""DSTC2 corpus loading and dialog serialization.

A dialog is turned into one flat stream of ``TokenEvent`` values: for every
turn the flattened system acts come first, then the user words.  Labels sit
on the last token of each turn.
"""

from __future__ import annotations

import json
import logging
import math
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

log = logging.getLogger(__name__)

SYSTEM = "system"
USER_ASR = "user_asr"
USER_TRANSCRIPT = "user_transcript"
USER_SOURCES = (USER_ASR, USER_TRANSCRIPT)

NONE = "none"
DONTCARE = "dontcare"
REQUESTED = "requested"

GOAL = "goal"
METHOD = "method"
REQUESTED_GROUP = "requested"
GROUPS = (GOAL, METHOD, REQUESTED_GROUP)

METHOD_COMPONENT = "method"
REQ_PREFIX = "req_"

_PUNCT = str.maketrans("", "", string.punctuation)


class CorpusError(Exception):
    """Raised when a dialog or ontology cannot be loaded."""


@dataclass(frozen=True)
class Act:
    act: str
    slots: tuple[tuple[str, str], ...] = ()

    @classmethod
    def from_json(cls, obj: dict) -> "Act":
        pairs = tuple((str(s), str(v)) for s, v in obj.get("slots", []))
        return cls(str(obj["act"]), pairs)


@dataclass(frozen=True)
class TurnLabel:
    goal: dict[str, str]
    method: str
    requested: frozenset[str]
    transcription: str


@dataclass(frozen=True)
class RawTurn:
    system_acts: tuple[Act, ...]
    system_transcript: str
    asr: tuple[tuple[str, float], ...]
    slu: tuple[tuple[tuple[Act, ...], float], ...]
    label: TurnLabel


@dataclass(frozen=True)
class RawDialog:
    dialog_id: str
    turns: tuple[RawTurn, ...]


@dataclass(frozen=True)
class TokenEvent:
    token: str
    score: float
    source: str
    turn_index: int
    turn_final: bool = False


@dataclass
class DialogExample:
    """A serialized dialog.

    ``labels`` maps an event index to ``{component: value}``.  ``turn_ends``
    gives, per turn, the index of the event carrying that turn's belief
    (``-1`` when nothing has been emitted yet).
    """

    dialog_id: str
    events: list[TokenEvent]
    labels: dict[int, dict[str, str]]
    turn_ends: list[int]
    schedule: dict[str, int | None] = field(default_factory=dict)

    @property
    def n_turns(self) -> int:
        return len(self.turn_ends)

    def to_json(self) -> dict:
        return {
            "dialog_id": self.dialog_id,
            "events": [
                [e.token, e.score, e.source, e.turn_index, e.turn_final] for e in self.events
            ],
            "labels": [[t, self.labels[t]] for t in sorted(self.labels)],
            "turn_ends": self.turn_ends,
            "schedule": self.schedule,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "DialogExample":
        events = [TokenEvent(tok, float(sc), src, int(ti), bool(tf)) for tok, sc, src, ti, tf in obj["events"]]
        labels = {int(t): dict(lab) for t, lab in obj["labels"]}
        return cls(obj["dialog_id"], events, labels, list(obj["turn_ends"]), dict(obj["schedule"]))


@dataclass(frozen=True)
class SlotSchema:
    components: tuple[tuple[str, tuple[str, ...]], ...]
    groups: dict[str, tuple[str, ...]]

    def values(self, component: str) -> tuple[str, ...]:
        return dict(self.components)[component]

    @property
    def names(self) -> list[str]:
        return [name for name, _ in self.components]

    @property
    def informable(self) -> tuple[str, ...]:
        return self.groups[GOAL]

    def group_of(self, component: str) -> str:
        for group, members in self.groups.items():
            if component in members:
                return group
        raise KeyError(component)

    def to_json(self) -> dict:
        return {
            "components": [[n, list(v)] for n, v in self.components],
            "groups": {g: list(m) for g, m in self.groups.items()},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SlotSchema":
        return cls(
            tuple((n, tuple(v)) for n, v in obj["components"]),
            {g: tuple(m) for g, m in obj["groups"].items()},
        )


def requested_component(slot: str) -> str:
    return REQ_PREFIX + slot


def _dedupe(values: Iterable[str]) -> tuple[str, ...]:
    return tuple(dict.fromkeys(values))


def build_schema(ontology: dict) -> SlotSchema:
    components: list[tuple[str, tuple[str, ...]]] = []
    goal = []
    for slot, values in ontology["informable"].items():
        vals = _dedupe([*(str(v) for v in values if v not in (NONE, DONTCARE)), NONE, DONTCARE])
        components.append((slot, vals))
        goal.append(slot)
    methods = _dedupe([*(str(m) for m in ontology.get("method", []) if m != NONE), NONE])
    components.append((METHOD_COMPONENT, methods))
    requested = []
    for slot in ontology.get("requestable", []):
        name = requested_component(slot)
        components.append((name, (NONE, REQUESTED)))
        requested.append(name)
    groups = {GOAL: tuple(goal), METHOD: (METHOD_COMPONENT,), REQUESTED_GROUP: tuple(requested)}
    return SlotSchema(tuple(components), groups)


def load_ontology(path: str | Path) -> SlotSchema:
    path = Path(path)
    try:
        with open(path) as f:
            ontology = json.load(f)
        return build_schema(ontology)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise CorpusError(f"cannot load ontology {path}: {exc}") from exc


def _parse_turn(log_turn: dict, label_turn: dict) -> RawTurn:
    output = log_turn.get("output", {})
    acts = tuple(Act.from_json(a) for a in output.get("dialog-acts", []))
    live = log_turn.get("input", {}).get("live", {})
    asr = [(str(h["asr-hyp"]), float(h["score"])) for h in live.get("asr-hyps", [])]
    asr.sort(key=lambda h: -h[1])
    slu = tuple(
        (tuple(Act.from_json(a) for a in h.get("slu-hyp", [])), float(h.get("score", 0.0)))
        for h in live.get("slu-hyps", [])
    )
    label = TurnLabel(
        goal={str(k): str(v) for k, v in label_turn.get("goal-labels", {}).items()},
        method=str(label_turn.get("method-label", NONE)),
        requested=frozenset(str(s) for s in label_turn.get("requested-slots", [])),
        transcription=str(label_turn.get("transcription", "")),
    )
    return RawTurn(acts, str(output.get("transcript", "")), tuple(asr), slu, label)


def load_dialog(session_dir: str | Path) -> RawDialog:
    session_dir = Path(session_dir)
    try:
        with open(session_dir / "log.json") as f:
            log_obj = json.load(f)
        with open(session_dir / "label.json") as f:
            label_obj = json.load(f)
    except (OSError, ValueError) as exc:
        raise CorpusError(f"dialog {session_dir}: {exc}") from exc
    dialog_id = str(log_obj.get("session-id", session_dir.name))
    log_turns, label_turns = log_obj.get("turns", []), label_obj.get("turns", [])
    if len(log_turns) != len(label_turns):
        raise CorpusError(
            f"dialog {dialog_id}: {len(log_turns)} log turns but {len(label_turns)} label turns"
        )
    if not log_turns:
        raise CorpusError(f"dialog {dialog_id}: no turns")
    try:
        turns = tuple(_parse_turn(lt, lb) for lt, lb in zip(log_turns, label_turns))
    except (KeyError, TypeError, ValueError) as exc:
        raise CorpusError(f"dialog {dialog_id}: malformed turn: {exc}") from exc
    return RawDialog(dialog_id, turns)


def read_flist(flist: str | Path) -> list[str]:
    with open(flist) as f:
        return [line.strip() for line in f if line.strip()]


def load_dataset(
    data_root: str | Path, flist: str | Path, ontology: str | Path
) -> tuple[list[RawDialog], SlotSchema]:
    schema = load_ontology(ontology)
    try:
        entries = read_flist(flist)
    except OSError as exc:
        raise CorpusError(f"cannot read flist {flist}: {exc}") from exc
    root = Path(data_root)
    return [load_dialog(root / entry) for entry in entries], schema


def tokenize(text: str) -> list[str]:
    words = (w.translate(_PUNCT) for w in text.lower().split())
    return [w for w in words if w]


def flatten_system_act(act: Act) -> list[str]:
    if not act.slots:
        return [act.act]
    out: list[str] = []
    for slot, value in act.slots:
        out.append(act.act)
        out.append(slot)
        out.extend(tokenize(value))
    return out


def flatten_system_acts(acts: Iterable[Act]) -> list[str]:
    out: list[str] = []
    for act in acts:
        out.extend(flatten_system_act(act))
    return out


def clamp_score(score: float) -> float:
    if math.isnan(score):
        return 0.0
    return min(1.0, max(0.0, score))


def _transform_score(score: float, mode: str) -> float:
    if mode == "exp":
        score = math.exp(min(score, 0.0))
    elif mode != "clamp":
        raise ValueError(f"unknown score transform {mode!r}")
    return clamp_score(score)


def turn_labels(label: TurnLabel, schema: SlotSchema) -> dict[str, str]:
    out: dict[str, str] = {}
    for slot in schema.groups[GOAL]:
        out[slot] = label.goal.get(slot, NONE)
    out[METHOD_COMPONENT] = label.method
    for comp in schema.groups[REQUESTED_GROUP]:
        out[comp] = REQUESTED if comp[len(REQ_PREFIX):] in label.requested else NONE
    return out


def user_words(turn: RawTurn, user_source: str, score_transform: str = "clamp") -> list[tuple[str, float]]:
    if user_source == "transcript":
        return [(w, 1.0) for w in tokenize(turn.label.transcription)]
    if user_source != "asr_1best":
        raise ValueError(f"unknown user source {user_source!r}")
    if not turn.asr:
        return []
    hyp, score = turn.asr[0]
    score = _transform_score(score, score_transform)
    return [(w, score) for w in tokenize(hyp)]


def serialize_dialog(
    raw: RawDialog,
    user_source: str,
    schema: SlotSchema,
    score_transform: str = "clamp",
) -> DialogExample:
    """Serialize ``raw`` into a token stream with turn-final labels.

    ``user_source`` is ``"asr_1best"`` or ``"transcript"``.
    """
    src = USER_ASR if user_source == "asr_1best" else USER_TRANSCRIPT
    events: list[TokenEvent] = []
    labels: dict[int, dict[str, str]] = {}
    turn_ends: list[int] = []
    for ti, turn in enumerate(raw.turns):
        start = len(events)
        for tok in flatten_system_acts(turn.system_acts):
            events.append(TokenEvent(tok, 1.0, SYSTEM, ti))
        for word, score in user_words(turn, user_source, score_transform):
            events.append(TokenEvent(word, score, src, ti))
        lab = turn_labels(turn.label, schema)
        if len(events) > start:
            last = events[-1]
            events[-1] = TokenEvent(last.token, last.score, last.source, ti, True)
            labels[len(events) - 1] = lab
        elif events:
            log.warning("dialog %s turn %d emitted no tokens; label moved to previous token", raw.dialog_id, ti)
            labels[len(events) - 1] = lab
        else:
            log.warning("dialog %s turn %d emitted no tokens and has no predecessor", raw.dialog_id, ti)
        turn_ends.append(len(events) - 1)
    return DialogExample(raw.dialog_id, events, labels, turn_ends, mention_schedule(raw, schema))


def _mentions(act: Act, from_user: bool) -> tuple[set[str], set[str]]:
    """Return (informable slots, requested slots) referenced by one act."""
    informable: set[str] = set()
    requested: set[str] = set()
    for slot, value in act.slots:
        if slot == "slot":
            informable.add(value)
            if from_user and act.act == "request":
                requested.add(value)
        else:
            informable.add(slot)
    return informable, requested


def mention_schedule(raw: RawDialog, schema: SlotSchema) -> dict[str, int | None]:
    """First turn at which each component counts as mentioned, or None.

    Goal slots are mentioned by any system act or SLU hypothesis act that
    references the slot.  Requestable slots are mentioned by an SLU
    ``request`` act naming them.  The method component is always scheduled.
    """
    first: dict[str, int | None] = {name: None for name in schema.names}
    first[METHOD_COMPONENT] = 0
    goal = set(schema.groups[GOAL])
    req = {c[len(REQ_PREFIX):]: c for c in schema.groups[REQUESTED_GROUP]}
    for ti, turn in enumerate(raw.turns):
        acts = [(a, False) for a in turn.system_acts]
        acts += [(a, True) for hyp, _ in turn.slu for a in hyp]
        for act, from_user in acts:
            inf, rq = _mentions(act, from_user)
            for slot in inf & goal:
                if first[slot] is None:
                    first[slot] = ti
            for slot in rq:
                comp = req.get(slot)
                if comp is not None and first[comp] is None:
                    first[comp] = ti
    return first
