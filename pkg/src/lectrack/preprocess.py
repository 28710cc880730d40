"""Vocabulary, rare-value abstraction, OOV noise and training-set assembly."""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .corpus import (
    DONTCARE,
    GOAL,
    NONE,
    USER_SOURCES,
    DialogExample,
    SlotSchema,
    TokenEvent,
    tokenize,
)

OOV = "#OOV"
VOCAB_VERSION = 1
ABSTRACTION_VERSION = 1


def abstract_token(component: str, index: int) -> str:
    return f"#{component}{index}"


def canonical_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


class Vocabulary:
    """Dense token <-> id map.  Unknown tokens encode to ``#OOV``."""

    def __init__(self, tokens: Iterable[str]):
        self.tokens: list[str] = sorted(set(tokens) | {OOV})
        self.token_to_id = {t: i for i, t in enumerate(self.tokens)}
        self.oov_id = self.token_to_id[OOV]

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def encode(self, token: str) -> int:
        return self.token_to_id.get(token, self.oov_id)

    def encode_all(self, tokens: Iterable[str]) -> np.ndarray:
        return np.array([self.encode(t) for t in tokens], dtype=np.int64)

    @property
    def hash(self) -> str:
        return canonical_hash(self.tokens)

    def to_json(self) -> dict:
        return {"version": VOCAB_VERSION, "tokens": self.tokens, "hash": self.hash}

    @classmethod
    def from_json(cls, obj: dict) -> "Vocabulary":
        if obj.get("version") != VOCAB_VERSION:
            raise ValueError(f"unsupported vocabulary version {obj.get('version')}")
        vocab = cls(obj["tokens"])
        if vocab.tokens != list(obj["tokens"]):
            raise ValueError("vocabulary tokens are not sorted and unique")
        return vocab


def build_vocabulary(
    examples: Iterable[DialogExample],
    abstract_components: Sequence[str] = (),
    max_abstract: int = 8,
) -> Vocabulary:
    tokens = {e.token for ex in examples for e in ex.events}
    for comp in abstract_components:
        tokens.update(abstract_token(comp, j) for j in range(1, max_abstract + 1))
    return Vocabulary(tokens)


@dataclass
class AbstractionDict:
    """Rare values per component, keyed by their surface token sequence."""

    forms: dict[str, dict[tuple[str, ...], str]]
    threshold: int = 40
    max_abstract: int = 8

    @property
    def components(self) -> list[str]:
        return list(self.forms)

    def abstract_classes(self, component: str) -> list[str]:
        if component not in self.forms:
            return []
        return [abstract_token(component, j) for j in range(1, self.max_abstract + 1)]

    def is_abstracted(self, component: str, value: str) -> bool:
        return any(v == value for v in self.forms.get(component, {}).values())

    def add_value(self, component: str, value: str) -> None:
        """Register a value by hand, e.g. one never seen in training."""
        form = tuple(tokenize(value))
        if not form:
            raise ValueError(f"value {value!r} has an empty surface form")
        self.forms.setdefault(component, {})[form] = value

    def to_json(self) -> dict:
        return {
            "version": ABSTRACTION_VERSION,
            "threshold": self.threshold,
            "max_abstract": self.max_abstract,
            "forms": {c: [[list(f), v] for f, v in forms.items()] for c, forms in self.forms.items()},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "AbstractionDict":
        if obj.get("version") != ABSTRACTION_VERSION:
            raise ValueError(f"unsupported abstraction version {obj.get('version')}")
        forms = {c: {tuple(f): v for f, v in items} for c, items in obj["forms"].items()}
        return cls(forms, obj["threshold"], obj["max_abstract"])


def label_counts(examples: Iterable[DialogExample]) -> Counter:
    """Count (component, value) over every labeled turn."""
    counts: Counter = Counter()
    for ex in examples:
        for lab in ex.labels.values():
            counts.update(lab.items())
    return counts


def build_abstraction_dict(
    schema: SlotSchema,
    counts: Mapping[tuple[str, str], int],
    threshold: int = 40,
    max_abstract: int = 8,
    components: Sequence[str] | None = None,
) -> AbstractionDict:
    if components is None:
        components = schema.groups[GOAL]
    forms: dict[str, dict[tuple[str, ...], str]] = {}
    for comp in components:
        entries = {}
        for value in schema.values(comp):
            if value in (NONE, DONTCARE):
                continue
            if counts.get((comp, value), 0) < threshold:
                form = tuple(tokenize(value))
                if form:
                    entries[form] = value
        forms[comp] = entries
    return AbstractionDict(forms, threshold, max_abstract)


@dataclass
class AbstractionAssignment:
    """Per component: abstract index -> concrete value, for one dialog."""

    values: dict[str, dict[int, str]] = field(default_factory=dict)

    def index_of(self, component: str, value: str) -> int | None:
        for j, v in self.values.get(component, {}).items():
            if v == value:
                return j
        return None

    def to_json(self) -> dict:
        return {c: {str(j): v for j, v in m.items()} for c, m in self.values.items()}

    @classmethod
    def from_json(cls, obj: dict) -> "AbstractionAssignment":
        return cls({c: {int(j): v for j, v in m.items()} for c, m in obj.items()})


def _match_table(adict: AbstractionDict) -> dict[tuple[str, ...], tuple[str, str]]:
    table: dict[tuple[str, ...], tuple[str, str]] = {}
    for comp, forms in adict.forms.items():
        for form, value in forms.items():
            table.setdefault(form, (comp, value))
    return table


def abstract_example(
    example: DialogExample, adict: AbstractionDict, use_labels: bool = True
) -> tuple[DialogExample, AbstractionAssignment]:
    """Replace rare values by ``#<component><j>`` tokens and label classes.

    With ``use_labels=False`` (tracking time) the assignment is built from the
    token stream alone and the labels are left untouched.
    """
    table = _match_table(adict)
    max_len = max((len(f) for f in table), default=0)
    assign: dict[str, dict[int, str]] = {}

    def index_for(comp: str, value: str) -> int | None:
        slots = assign.setdefault(comp, {})
        for j, v in slots.items():
            if v == value:
                return j
        if len(slots) >= adict.max_abstract:
            return None
        j = len(slots) + 1
        slots[j] = value
        return j

    events = example.events
    new_events: list[TokenEvent] = []
    new_labels: dict[int, dict[str, str]] = {}
    new_turn_ends: list[int] = []
    index_map: dict[int, int] = {}
    i = 0
    n = len(events)
    while i < n:
        match = None
        turn = events[i].turn_index
        for length in range(min(max_len, n - i), 0, -1):
            span = events[i : i + length]
            # n-grams never cross a turn boundary
            if any(e.turn_index != turn for e in span) or any(e.turn_final for e in span[:-1]):
                continue
            key = tuple(e.token for e in span)
            if key in table:
                match = (length, table[key])
                break
        if match is not None:
            length, (comp, value) = match
            j = index_for(comp, value)
            if j is not None:
                span = events[i : i + length]
                new_events.append(
                    TokenEvent(
                        abstract_token(comp, j),
                        min(e.score for e in span),
                        span[0].source,
                        turn,
                        span[-1].turn_final,
                    )
                )
                for k in range(i, i + length):
                    index_map[k] = len(new_events) - 1
                i += length
                _label_step(example, i - 1, use_labels, adict, index_for, new_labels, len(new_events) - 1)
                continue
        new_events.append(events[i])
        index_map[i] = len(new_events) - 1
        _label_step(example, i, use_labels, adict, index_for, new_labels, len(new_events) - 1)
        i += 1

    for t in example.turn_ends:
        new_turn_ends.append(index_map[t] if t >= 0 else -1)
    if use_labels:
        for old, lab in new_labels.items():
            new_labels[old] = {
                c: (abstract_token(c, j) if (j := _lookup(assign, c, v)) is not None else v)
                for c, v in lab.items()
            }
    else:
        new_labels = {index_map[t]: dict(lab) for t, lab in example.labels.items()}
    out = DialogExample(example.dialog_id, new_events, new_labels, new_turn_ends, dict(example.schedule))
    return out, AbstractionAssignment(assign)


def _lookup(assign: dict[str, dict[int, str]], comp: str, value: str) -> int | None:
    for j, v in assign.get(comp, {}).items():
        if v == value:
            return j
    return None


def _label_step(example, old_index, use_labels, adict, index_for, new_labels, new_index) -> None:
    lab = example.labels.get(old_index)
    if lab is None:
        return
    if use_labels:
        for comp, value in lab.items():
            if adict.is_abstracted(comp, value):
                index_for(comp, value)
    new_labels[new_index] = dict(lab)


def assignment_prefixes(
    assignment: AbstractionAssignment, events: Sequence[TokenEvent], stops: Sequence[int]
) -> list[AbstractionAssignment]:
    """The assignment as known after each event index in ``stops``.

    An abstract index counts as assigned once its token has appeared, so a
    turn never receives mass for a value that is only mentioned later.
    """
    first: dict[str, int] = {}
    for t, e in enumerate(events):
        first.setdefault(e.token, t)
    out = []
    for stop in stops:
        out.append(
            AbstractionAssignment(
                {
                    comp: {j: v for j, v in m.items() if first.get(abstract_token(comp, j), stop + 1) <= stop}
                    for comp, m in assignment.values.items()
                }
            )
        )
    return out


def deabstract_distribution(
    p: np.ndarray,
    classes: Sequence[str],
    component: str,
    assignment: AbstractionAssignment,
    concrete: Sequence[str],
) -> np.ndarray:
    """Map a distribution over ``classes`` onto the ``concrete`` value list.

    Mass of an assigned abstract class moves to its value; mass of an
    unassigned abstract class moves to ``none``.
    """
    out = np.zeros(len(concrete))
    pos = {v: k for k, v in enumerate(concrete)}
    mapping = assignment.values.get(component, {})
    prefix = f"#{component}"
    for k, cls in enumerate(classes):
        if cls in pos:
            out[pos[cls]] += p[k]
            continue
        if not cls.startswith(prefix):
            raise KeyError(f"class {cls!r} of {component} is neither concrete nor abstract")
        j = int(cls[len(prefix):])
        out[pos[mapping.get(j, NONE)]] += p[k]
    return out


def inject_oov(example: DialogExample, alpha: float, rng: np.random.Generator) -> DialogExample:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if alpha == 0.0:
        return example
    draws = rng.random(len(example.events))
    events = [
        replace(e, token=OOV) if e.source in USER_SOURCES and u < alpha else e
        for e, u in zip(example.events, draws)
    ]
    return replace(example, events=events)


def mix_transcriptions(
    asr_examples: Sequence[DialogExample], transcript_examples: Sequence[DialogExample]
) -> list[DialogExample]:
    return list(asr_examples) + list(transcript_examples)
