"""DSTC2 featured metrics: joint accuracy and L2 for Goal, Method, Requested.

Turns count toward a group only once the group has been mentioned
(schedule 2).  Joint distributions are products of per-component marginals
with tiny hypotheses pruned into an explicit residual.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .corpus import (
    GOAL,
    GROUPS,
    METHOD,
    METHOD_COMPONENT,
    NONE,
    REQ_PREFIX,
    REQUESTED_GROUP,
    RawDialog,
    SlotSchema,
    mention_schedule,
    turn_labels,
)

log = logging.getLogger(__name__)

PRUNE = 1e-6


class TrackerOutputError(ValueError):
    pass


@dataclass
class JointBelief:
    """Retained joint hypotheses (best first) plus the pruned residual mass."""

    components: tuple[str, ...]
    hypotheses: list[tuple[tuple[str, ...], float]]
    residual: float

    @property
    def top(self) -> tuple[str, ...]:
        return self.hypotheses[0][0] if self.hypotheses else tuple(NONE for _ in self.components)

    def score_of(self, label: tuple[str, ...]) -> float | None:
        for hyp, s in self.hypotheses:
            if hyp == label:
                return s
        return None

    def l2(self, label: tuple[str, ...]) -> float:
        sq = sum(s * s for _, s in self.hypotheses)
        return _l2(sq, self.residual, self.score_of(label))

    def correct(self, label: tuple[str, ...]) -> bool:
        return self.top == label


def _l2(sq_sum: float, residual: float, label_score: float | None) -> float:
    total = sq_sum + residual * residual + 1.0
    if label_score is not None:
        total -= 2.0 * label_score
    return math.sqrt(max(total, 0.0))


def _argmax_tuple(marginals: Sequence[np.ndarray]) -> tuple[int, ...]:
    return tuple(int(np.argmax(p)) for p in marginals)


def _product(marginals: Sequence[np.ndarray], idx: Sequence[int]) -> float:
    s = 1.0
    for p, j in zip(marginals, idx):
        s = s * float(p[j])
    return s


def _retained_products(marginals: Sequence[np.ndarray], threshold: float, with_index: bool):
    """Products >= threshold, built slot by slot.

    Partial products only shrink as slots are added, so a partial product
    below the threshold can be dropped early without losing any retained
    hypothesis.
    """
    vals = np.ones(1)
    idx = np.zeros((1, 0), dtype=np.int64)
    for p in marginals:
        p = np.asarray(p, dtype=float)
        prod = (vals[:, None] * p[None, :]).reshape(-1)
        keep = prod >= threshold
        if with_index:
            rows = np.repeat(idx, len(p), axis=0)
            cols = np.tile(np.arange(len(p)), len(vals))
            idx = np.concatenate([rows, cols[:, None]], axis=1)[keep]
        vals = prod[keep]
    return vals, idx


def joint_belief(
    components: Sequence[str],
    values: Sequence[Sequence[str]],
    marginals: Sequence[np.ndarray],
    threshold: float = PRUNE,
) -> JointBelief:
    """Joint distribution of independent components as a pruned hypothesis list.

    The tuple of per-component argmaxes is always kept and listed first.
    """
    vals, idx = _retained_products(marginals, threshold, True)
    top = _argmax_tuple(marginals)
    order = sorted(range(len(vals)), key=lambda k: (-vals[k], tuple(idx[k])))
    hyps = []
    top_score = _product(marginals, top)
    hyps.append((tuple(values[s][j] for s, j in enumerate(top)), top_score))
    for k in order:
        key = tuple(int(j) for j in idx[k])
        if key == top:
            continue
        hyps.append((tuple(values[s][j] for s, j in enumerate(key)), float(vals[k])))
    retained = sum(s for _, s in hyps)
    return JointBelief(tuple(components), hyps, max(0.0, 1.0 - retained))


def joint_goal(
    marginals: Mapping[str, tuple[Sequence[str], np.ndarray]], threshold: float = PRUNE
) -> JointBelief:
    names = list(marginals)
    return joint_belief(names, [marginals[n][0] for n in names], [marginals[n][1] for n in names], threshold)


def joint_stats(
    marginals: Sequence[np.ndarray], label: Sequence[int], threshold: float = PRUNE
) -> tuple[bool, float]:
    """(top hypothesis correct, L2) without materializing hypothesis tuples."""
    vals, _ = _retained_products(marginals, threshold, False)
    top = _argmax_tuple(marginals)
    top_score = _product(marginals, top)
    sq = float(np.dot(vals, vals))
    mass = float(np.sum(vals))
    if top_score < threshold:
        sq += top_score * top_score
        mass += top_score
    label = tuple(int(j) for j in label)
    correct = label == top
    label_score = _product(marginals, label) if all(j >= 0 for j in label) else 0.0
    retained = correct or label_score >= threshold
    return correct, _l2(sq, max(0.0, 1.0 - mass), label_score if retained else None)


def binary_marginal(p_requested: float) -> np.ndarray:
    return np.array([1.0 - p_requested, p_requested])


@dataclass
class TurnPrediction:
    """Per-component distributions (aligned with the schema's value lists)
    for one turn, plus an optional explicit joint goal list."""

    dialog_id: str
    turn: int
    distributions: dict[str, np.ndarray]
    goal_joint: JointBelief | None = None


@dataclass
class Reference:
    dialog_id: str
    labels: list[dict[str, str]]
    schedule: dict[str, int | None]


def references_from_raw(dialogs: Iterable[RawDialog], schema: SlotSchema) -> list[Reference]:
    return [
        Reference(d.dialog_id, [turn_labels(t.label, schema) for t in d.turns], mention_schedule(d, schema))
        for d in dialogs
    ]


def group_start(schedule: Mapping[str, int | None], schema: SlotSchema, group: str) -> int | None:
    """First turn scored for ``group``; None if never."""
    if group == METHOD:
        return 0
    firsts = [schedule.get(c) for c in schema.groups[group]]
    firsts = [f for f in firsts if f is not None]
    return min(firsts) if firsts else None


@dataclass
class GroupScore:
    accuracy: float
    l2: float
    n: int


@dataclass
class MetricsReport:
    groups: dict[str, GroupScore] = field(default_factory=dict)

    def __getitem__(self, group: str) -> GroupScore:
        return self.groups[group]

    def to_json(self) -> dict:
        return {g: {"accuracy": s.accuracy, "l2": s.l2, "n": s.n} for g, s in self.groups.items()}

    @classmethod
    def from_json(cls, obj: dict) -> "MetricsReport":
        return cls({g: GroupScore(v["accuracy"], v["l2"], v["n"]) for g, v in obj.items()})

    def table(self) -> str:
        lines = [f"{'group':<10} {'acc':>7} {'L2':>7} {'turns':>7}"]
        for g, s in self.groups.items():
            lines.append(f"{g:<10} {s.accuracy:7.4f} {s.l2:7.4f} {s.n:7d}")
        return "\n".join(lines)


def _label_index(schema: SlotSchema, comp: str, value: str) -> int:
    try:
        return schema.values(comp).index(value)
    except ValueError:
        return -1


def score_group(
    pred: TurnPrediction | None,
    labels: Mapping[str, str],
    schema: SlotSchema,
    group: str,
    threshold: float = PRUNE,
) -> tuple[bool, float]:
    comps = schema.groups[group]
    if pred is None:
        return False, math.sqrt(2.0)
    if group == GOAL and pred.goal_joint is not None:
        label = tuple(labels[c] for c in comps)
        return pred.goal_joint.correct(label), pred.goal_joint.l2(label)
    marg = []
    for c in comps:
        p = pred.distributions.get(c)
        if p is None:
            raise TrackerOutputError(f"dialog {pred.dialog_id} turn {pred.turn}: no distribution for {c}")
        marg.append(p)
    label = [_label_index(schema, c, labels[c]) for c in comps]
    return joint_stats(marg, label, threshold)


def score(
    predictions: Iterable[TurnPrediction],
    references: Sequence[Reference],
    schema: SlotSchema,
    groups: Sequence[str] = GROUPS,
    threshold: float = PRUNE,
) -> MetricsReport:
    by_key = {(p.dialog_id, p.turn): p for p in predictions}
    totals = {g: [0, 0.0, 0] for g in groups}
    missing = 0
    for ref in references:
        starts = {g: group_start(ref.schedule, schema, g) for g in groups}
        for k, labels in enumerate(ref.labels):
            pred = by_key.get((ref.dialog_id, k))
            for g in groups:
                start = starts[g]
                if start is None or k < start:
                    continue
                if pred is None:
                    missing += 1
                ok, l2 = score_group(pred, labels, schema, g, threshold)
                acc = totals[g]
                acc[0] += int(ok)
                acc[1] += l2
                acc[2] += 1
    if missing:
        log.warning("%d scheduled (turn, group) pairs had no prediction and were scored as wrong", missing)
    report = MetricsReport()
    for g, (ok, l2, n) in totals.items():
        report.groups[g] = GroupScore(ok / n if n else 0.0, l2 / n if n else 0.0, n)
    return report


def accuracy(predictions, references, schema, group, threshold: float = PRUNE) -> float:
    return score(predictions, references, schema, (group,), threshold)[group].accuracy


def l2(predictions, references, schema, group, threshold: float = PRUNE) -> float:
    return score(predictions, references, schema, (group,), threshold)[group].l2


def component_accuracy(
    predictions: Iterable[TurnPrediction],
    references: Sequence[Reference],
    schema: SlotSchema,
    component: str,
) -> float:
    """Argmax accuracy of a single component on its group's scheduled turns."""
    group = schema.group_of(component)
    values = schema.values(component)
    by_key = {(p.dialog_id, p.turn): p for p in predictions}
    ok = n = 0
    for ref in references:
        start = group_start(ref.schedule, schema, group)
        if start is None:
            continue
        for k in range(start, len(ref.labels)):
            pred = by_key.get((ref.dialog_id, k))
            n += 1
            if pred is not None and values[int(np.argmax(pred.distributions[component]))] == ref.labels[k][component]:
                ok += 1
    return ok / n if n else 0.0


# official tracker-output format


def export_tracker_output(
    predictions: Iterable[TurnPrediction],
    schema: SlotSchema,
    dataset: str,
    wall_time: float = 0.0,
    threshold: float = PRUNE,
) -> dict:
    sessions: dict[str, list] = {}
    for pred in sorted(predictions, key=lambda p: (p.dialog_id, p.turn)):
        turns = sessions.setdefault(pred.dialog_id, [])
        if pred.turn != len(turns):
            raise ValueError(f"dialog {pred.dialog_id}: turn {pred.turn} out of order")
        turns.append(_export_turn(pred, schema, threshold))
    return {
        "dataset": dataset,
        "wall-time": wall_time,
        "sessions": [{"session-id": sid, "turns": turns} for sid, turns in sessions.items()],
    }


def _export_turn(pred: TurnPrediction, schema: SlotSchema, threshold: float) -> dict:
    goal = schema.groups[GOAL]
    goal_labels = {}
    for slot in goal:
        values = schema.values(slot)
        dist = {v: float(p) for v, p in zip(values, pred.distributions[slot]) if v != NONE and p > 0.0}
        goal_labels[slot] = dist
    joint = pred.goal_joint or joint_belief(
        goal, [schema.values(s) for s in goal], [pred.distributions[s] for s in goal], threshold
    )
    joint_list = [
        {"slots": {s: v for s, v in zip(joint.components, hyp) if v != NONE}, "score": float(sc)}
        for hyp, sc in joint.hypotheses
    ]
    method = {
        v: float(p) for v, p in zip(schema.values(METHOD_COMPONENT), pred.distributions[METHOD_COMPONENT])
    }
    requested = {
        c[len(REQ_PREFIX):]: float(pred.distributions[c][1]) for c in schema.groups[REQUESTED_GROUP]
    }
    return {
        "goal-labels": goal_labels,
        "goal-labels-joint": joint_list,
        "method-label": method,
        "requested-slots": requested,
    }


def _marginal(dist: Mapping[str, float], values: Sequence[str], where: str) -> np.ndarray:
    out = np.zeros(len(values))
    pos = {v: k for k, v in enumerate(values)}
    for v, p in dist.items():
        if v not in pos:
            raise TrackerOutputError(f"{where}: unknown value {v!r}")
        out[pos[v]] += float(p)
    rest = 1.0 - float(out.sum())
    if rest < -1e-6:
        raise TrackerOutputError(f"{where}: probabilities sum to {out.sum():.6f} > 1")
    if NONE in pos:
        out[pos[NONE]] += max(rest, 0.0)
    return out


def parse_tracker_output(obj: dict, schema: SlotSchema) -> list[TurnPrediction]:
    """Read the official DSTC2 tracker-output JSON structure."""
    goal = schema.groups[GOAL]
    preds = []
    try:
        sessions = obj["sessions"]
    except (KeyError, TypeError) as exc:
        raise TrackerOutputError("tracker output has no 'sessions' list") from exc
    for si, session in enumerate(sessions):
        sid = session.get("session-id", f"#{si}")
        for k, turn in enumerate(session.get("turns", [])):
            where = f"session {sid} turn {k}"
            try:
                dists = {}
                goal_labels = turn.get("goal-labels", {})
                for slot in goal:
                    dists[slot] = _marginal(goal_labels.get(slot, {}), schema.values(slot), f"{where} goal {slot}")
                dists[METHOD_COMPONENT] = _marginal(
                    turn.get("method-label", {}), schema.values(METHOD_COMPONENT), f"{where} method"
                )
                req = turn.get("requested-slots", {})
                for comp in schema.groups[REQUESTED_GROUP]:
                    p = float(req.get(comp[len(REQ_PREFIX):], 0.0))
                    if not 0.0 <= p <= 1.0 + 1e-9:
                        raise TrackerOutputError(f"{where}: requested probability {p} outside [0, 1]")
                    dists[comp] = binary_marginal(min(p, 1.0))
                joint = None
                if "goal-labels-joint" in turn:
                    hyps = []
                    for h in turn["goal-labels-joint"]:
                        slots = h["slots"]
                        hyps.append((tuple(slots.get(s, NONE) for s in goal), float(h["score"])))
                    retained = sum(s for _, s in hyps)
                    if retained > 1.0 + 1e-6:
                        raise TrackerOutputError(f"{where}: joint goal scores sum to {retained:.6f} > 1")
                    best = max(range(len(hyps)), key=lambda j: hyps[j][1], default=None)
                    if best is not None:
                        hyps.insert(0, hyps.pop(best))
                    joint = JointBelief(tuple(goal), hyps, max(0.0, 1.0 - retained))
            except TrackerOutputError:
                raise
            except (KeyError, TypeError, ValueError, AttributeError) as exc:
                raise TrackerOutputError(f"{where}: {exc}") from exc
            preds.append(TurnPrediction(sid, k, dists, joint))
    return preds


def score_external(
    path: str | Path, references: Sequence[Reference], schema: SlotSchema
) -> MetricsReport:
    path = Path(path)
    try:
        obj = json.loads(path.read_text())
    except (OSError, ValueError) as exc:
        raise TrackerOutputError(f"{path}: {exc}") from exc
    return score(parse_tracker_output(obj, schema), references, schema)

