"""Model averaging over independently initialized component models."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .corpus import DialogExample, SlotSchema
from .evaluate import TurnPrediction
from .model import ComponentModel, component_beliefs, encode_example
from .preprocess import AbstractionAssignment, assignment_prefixes, deabstract_distribution

ENSEMBLE_VERSION = 1


def average_predictions(distributions: Sequence[np.ndarray]) -> np.ndarray:
    if not distributions:
        raise ValueError("nothing to average")
    n = len(distributions[0])
    if any(len(d) != n for d in distributions):
        raise ValueError("distributions differ in length")
    return np.mean(np.stack(distributions), axis=0)


@dataclass
class Ensemble:
    """Per component, the list of member models (all sharing one vocabulary)."""

    members: dict[str, list[ComponentModel]] = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        hashes = set()
        for comp, models in self.members.items():
            if not models:
                raise ValueError(f"component {comp} has no members")
            dims = {m.dims for m in models}
            classes = {tuple(m.classes) for m in models}
            if len(dims) != 1 or len(classes) != 1:
                raise ValueError(f"members of {comp} differ in shape or classes")
            hashes.update(m.vocab.hash for m in models)
        if len(hashes) > 1:
            raise ValueError("ensemble members do not share one vocabulary")

    @classmethod
    def single(cls, models: Mapping[str, ComponentModel]) -> "Ensemble":
        return cls({c: [m] for c, m in models.items()})

    @property
    def components(self) -> list[str]:
        return list(self.members)

    @property
    def size(self) -> int:
        return min((len(m) for m in self.members.values()), default=0)


def track_ensemble(
    example: DialogExample,
    ensemble: Ensemble,
    assignment: AbstractionAssignment | None,
    schema: SlotSchema,
) -> list[dict[str, np.ndarray]]:
    """Per turn: averaged member distributions, then de-abstracted once."""
    per_turn = assignment_prefixes(assignment or AbstractionAssignment(), example.events, example.turn_ends)
    beliefs: list[dict[str, np.ndarray]] = [dict() for _ in example.turn_ends]
    encoded = None
    for comp, models in ensemble.members.items():
        if encoded is None:
            encoded = encode_example(example, models[0].vocab)
        per_member = [component_beliefs(m, example, encoded) for m in models]
        concrete = schema.values(comp)
        for k in range(len(example.turn_ends)):
            avg = average_predictions([member[k] for member in per_member])
            beliefs[k][comp] = deabstract_distribution(avg, models[0].classes, comp, per_turn[k], concrete)
    return beliefs


def predict_dataset(
    ensemble: Ensemble,
    examples: Sequence[DialogExample],
    assignments: Sequence[AbstractionAssignment | None],
    schema: SlotSchema,
) -> list[TurnPrediction]:
    preds = []
    for ex, assign in zip(examples, assignments):
        for k, dists in enumerate(track_ensemble(ex, ensemble, assign, schema)):
            preds.append(TurnPrediction(ex.dialog_id, k, dists))
    return preds


def write_manifest(path: str | Path, entries: Mapping[str, Sequence[dict]]) -> None:
    """``entries``: component -> list of {"checkpoint": path, "sha256": hash}."""
    obj = {"version": ENSEMBLE_VERSION, "members": {c: list(v) for c, v in entries.items()}}
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True))


def read_manifest(path: str | Path) -> dict[str, list[dict]]:
    obj = json.loads(Path(path).read_text())
    if obj.get("version") != ENSEMBLE_VERSION:
        raise ValueError(f"unsupported ensemble manifest version {obj.get('version')}")
    return obj["members"]
