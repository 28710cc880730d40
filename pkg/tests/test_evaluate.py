import itertools
import json
import math
import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lectrack.corpus import build_schema
from lectrack.evaluate import (
    JointBelief,
    MetricsReport,
    Reference,
    TrackerOutputError,
    TurnPrediction,
    export_tracker_output,
    joint_belief,
    joint_goal,
    joint_stats,
    parse_tracker_output,
    score,
    score_external,
)

ONTO = {
    "informable": {"food": ["thai", "indian"], "area": ["north", "south"]},
    "requestable": ["phone", "addr"],
    "method": ["byconstraints", "finished"],
}
SCHEMA = build_schema(ONTO)


def test_deterministic_joint():
    jb = joint_goal({"a": (["x", "y"], np.array([1.0, 0.0])), "b": (["u", "v"], np.array([0.0, 1.0]))})
    assert jb.hypotheses == [(("x", "v"), 1.0)]
    assert jb.residual == 0.0


def test_joint_product():
    jb = joint_goal({"a": (["x", "y"], np.array([0.6, 0.4])), "b": (["u", "v"], np.array([0.5, 0.5]))})
    scores = [s for _, s in jb.hypotheses]
    np.testing.assert_allclose(scores, [0.30, 0.30, 0.20, 0.20], rtol=1e-12)
    assert jb.top == ("x", "u")
    assert jb.residual == pytest.approx(0.0, abs=1e-12)


def test_l2_closed_forms():
    jb = JointBelief(("a",), [(("x",), 0.5), (("y",), 0.5)], 0.0)
    assert jb.l2(("x",)) == pytest.approx(math.sqrt(0.5), abs=1e-12)
    assert jb.l2(("x",)) == pytest.approx(0.7071, abs=1e-4)
    assert JointBelief(("a",), [(("x",), 1.0)], 0.0).l2(("x",)) == 0.0
    assert JointBelief(("a",), [(("x",), 1.0)], 0.0).l2(("y",)) == pytest.approx(math.sqrt(2))
    # label only in the residual: everything counts as wrong
    jb = JointBelief(("a",), [(("x",), 0.7)], 0.3)
    assert jb.l2(("z",)) == pytest.approx(math.sqrt(0.49 + 0.09 + 1.0))


def random_marginals(rng, sizes):
    out = []
    for n in sizes:
        p = rng.dirichlet(np.full(n, 0.3))
        out.append(p)
    return out


def brute(marginals, label):
    sq = 0.0
    lab = 0.0
    for idx in itertools.product(*[range(len(p)) for p in marginals]):
        s = math.prod(float(p[j]) for p, j in zip(marginals, idx))
        sq += s * s
        if idx == tuple(label):
            lab = s
    correct = all(int(np.argmax(p)) == j for p, j in zip(marginals, label))
    return correct, math.sqrt(sq + 1 - 2 * lab)


def test_joint_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        sizes = rng.integers(2, 6, size=rng.integers(1, 5))
        marg = random_marginals(rng, sizes)
        label = [int(rng.integers(0, n)) if rng.random() < 0.5 else int(np.argmax(p)) for n, p in zip(sizes, marg)]
        ok, l2_full = joint_stats(marg, label, threshold=0.0)
        ok_ref, l2_ref = brute(marg, label)
        assert ok == ok_ref
        assert l2_full == pytest.approx(l2_ref, abs=1e-12)
        ok_pruned, l2_pruned = joint_stats(marg, label)
        assert ok_pruned == ok
        assert abs(l2_pruned - l2_full) <= 1e-3


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([1e-2, 1e-4, 1e-6, 1e-9]))
def test_pruning_invariants(seed, threshold):
    rng = np.random.default_rng(seed)
    sizes = rng.integers(2, 8, size=rng.integers(1, 5))
    marg = random_marginals(rng, sizes)
    names = [f"s{k}" for k in range(len(sizes))]
    values = [[f"v{j}" for j in range(n)] for n in sizes]
    jb = joint_belief(names, values, marg, threshold)
    assert abs(sum(s for _, s in jb.hypotheses) + jb.residual - 1.0) < 1e-9
    assert jb.top == tuple(v[int(np.argmax(p))] for v, p in zip(values, marg))
    label = [int(rng.integers(0, n)) for n in sizes]
    lab_names = tuple(v[j] for v, j in zip(values, label))
    ok, l2v = joint_stats(marg, label, threshold)
    assert ok == jb.correct(lab_names)
    assert l2v == pytest.approx(jb.l2(lab_names), abs=1e-12)
    ok0, l20 = joint_stats(marg, label, 0.0)
    assert ok0 == ok
    if threshold <= 1e-6:
        assert abs(l2v - l20) <= 1e-3


def dist(values, chosen=None, rng=None):
    if chosen is not None:
        p = np.zeros(len(values))
        p[values.index(chosen)] = 1.0
        return p
    return rng.dirichlet(np.ones(len(values)))


def synthetic_refs(rng, n_dialogs=20, n_turns=5):
    refs = []
    for d in range(n_dialogs):
        labels = []
        for _ in range(n_turns):
            lab = {c: str(rng.choice(SCHEMA.values(c))) for c in SCHEMA.names}
            labels.append(lab)
        sched = {c: (int(rng.integers(0, n_turns + 1)) if rng.random() < 0.8 else None) for c in SCHEMA.names}
        sched["method"] = 0
        refs.append(Reference(f"d{d}", labels, sched))
    return refs


def synthetic_preds(rng, refs, one_hot):
    preds = []
    for ref in refs:
        for k, lab in enumerate(ref.labels):
            dists = {}
            for c in SCHEMA.names:
                vals = list(SCHEMA.values(c))
                if one_hot:
                    chosen = lab[c] if rng.random() < 0.7 else str(rng.choice(vals))
                    dists[c] = dist(vals, chosen)
                else:
                    dists[c] = dist(vals, rng=rng)
            preds.append(TurnPrediction(ref.dialog_id, k, dists))
    return preds


def test_one_hot_l2_identity():
    rng = np.random.default_rng(1)
    refs = synthetic_refs(rng)
    rep = score(synthetic_preds(rng, refs, True), refs, SCHEMA)
    for g, s in rep.groups.items():
        assert s.n > 0
        assert abs(s.l2 - math.sqrt(2) * (1 - s.accuracy)) < 1e-12, g


def test_all_correct():
    rng = np.random.default_rng(2)
    refs = synthetic_refs(rng)
    preds = [
        TurnPrediction(r.dialog_id, k, {c: dist(list(SCHEMA.values(c)), lab[c]) for c in SCHEMA.names})
        for r in refs
        for k, lab in enumerate(r.labels)
    ]
    rep = score(preds, refs, SCHEMA)
    for s in rep.groups.values():
        assert s.accuracy == 1.0 and s.l2 == 0.0


def test_schedule_counts():
    lab = {c: "none" for c in SCHEMA.names}
    lab["method"] = "byconstraints"
    refs = [Reference("d", [lab] * 4, {"food": 2, "area": None, "method": 0, "req_phone": 3, "req_addr": None})]
    preds = [
        TurnPrediction("d", k, {c: dist(list(SCHEMA.values(c)), lab[c]) for c in SCHEMA.names}) for k in range(4)
    ]
    rep = score(preds, refs, SCHEMA)
    assert rep["goal"].n == 2
    assert rep["method"].n == 4
    assert rep["requested"].n == 1


def test_missing_prediction_is_wrong(caplog):
    lab = {c: "none" for c in SCHEMA.names}
    refs = [Reference("d", [lab, lab], {"method": 0})]
    preds = [TurnPrediction("d", 0, {c: dist(list(SCHEMA.values(c)), lab[c]) for c in SCHEMA.names})]
    rep = score(preds, refs, SCHEMA, ["method"])
    assert rep["method"].accuracy == 0.5
    assert rep["method"].l2 == pytest.approx(math.sqrt(2) / 2)
    assert "no prediction" in caplog.text


def test_export_parse_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    refs = synthetic_refs(rng)
    preds = synthetic_preds(rng, refs, False)
    obj = export_tracker_output(preds, SCHEMA, "synthetic", 1.5)
    assert obj["dataset"] == "synthetic" and len(obj["sessions"]) == len(refs)
    turn = obj["sessions"][0]["turns"][0]
    assert set(turn) == {"goal-labels", "goal-labels-joint", "method-label", "requested-slots"}
    path = tmp_path / "out.json"
    path.write_text(json.dumps(obj))
    direct = score(preds, refs, SCHEMA)
    external = score_external(path, refs, SCHEMA)
    for g in direct.groups:
        assert direct[g].accuracy == external[g].accuracy
        assert direct[g].n == external[g].n
        assert direct[g].l2 == pytest.approx(external[g].l2, abs=1e-12)
    assert MetricsReport.from_json(direct.to_json()) == direct
    assert "goal" in direct.table()


def test_score_is_order_invariant():
    rng = np.random.default_rng(4)
    refs = synthetic_refs(rng)
    preds = synthetic_preds(rng, refs, False)
    shuffled = list(preds)
    random.Random(0).shuffle(shuffled)
    a = score(preds, refs, SCHEMA)
    b = score(shuffled, refs[::-1], SCHEMA)
    for g in a.groups:
        assert a[g].accuracy == b[g].accuracy
        assert a[g].l2 == pytest.approx(b[g].l2, abs=1e-12)
    obj = export_tracker_output(preds, SCHEMA, "x")
    obj["sessions"].reverse()
    c = score(parse_tracker_output(obj, SCHEMA), refs, SCHEMA)
    for g in a.groups:
        assert a[g].accuracy == c[g].accuracy


def test_parse_fills_missing_mass_into_none():
    obj = {"sessions": [{"session-id": "d", "turns": [{"goal-labels": {"food": {"thai": 0.6}}, "method-label": {}}]}]}
    (pred,) = parse_tracker_output(obj, SCHEMA)
    vals = list(SCHEMA.values("food"))
    assert pred.distributions["food"][vals.index("thai")] == 0.6
    assert pred.distributions["food"][vals.index("none")] == pytest.approx(0.4)
    assert pred.distributions["area"][list(SCHEMA.values("area")).index("none")] == 1.0
    assert pred.goal_joint is None


@pytest.mark.parametrize(
    "turn,match",
    [
        ({"goal-labels": {"food": {"pizza": 0.5}}}, "unknown value"),
        ({"goal-labels": {"food": {"thai": 0.7, "indian": 0.6}}}, "sum to"),
        ({"requested-slots": {"phone": 1.7}}, "outside"),
        ({"goal-labels-joint": [{"slots": {}, "score": 0.8}, {"slots": {"food": "thai"}, "score": 0.8}]}, "joint"),
        ({"goal-labels-joint": [{"score": 0.8}]}, "turn 0"),
    ],
)
def test_malformed_output(turn, match):
    obj = {"sessions": [{"session-id": "d7", "turns": [turn]}]}
    with pytest.raises(TrackerOutputError, match=match) as info:
        parse_tracker_output(obj, SCHEMA)
    assert "d7" in str(info.value)


def test_unreadable_output(tmp_path):
    with pytest.raises(TrackerOutputError):
        parse_tracker_output({"nope": []}, SCHEMA)
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(TrackerOutputError):
        score_external(bad, [], SCHEMA)
