from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from lectrack.corpus import SYSTEM, USER_ASR, USER_TRANSCRIPT, DialogExample, TokenEvent, build_schema
from lectrack.preprocess import (
    OOV,
    AbstractionAssignment,
    AbstractionDict,
    Vocabulary,
    abstract_example,
    assignment_prefixes,
    build_abstraction_dict,
    build_vocabulary,
    deabstract_distribution,
    inject_oov,
    label_counts,
    mix_transcriptions,
)

from conftest import make_example
from synth import ONTOLOGY

SCHEMA = build_schema(ONTOLOGY)
FOOD = SCHEMA.values("food")


def food_dict(*values, max_abstract=8):
    adict = AbstractionDict({"food": {}}, 40, max_abstract)
    for v in values:
        adict.add_value("food", v)
    return adict


def test_vocabulary_specials_only():
    vocab = build_vocabulary([])
    assert vocab.tokens == [OOV]
    vocab = build_vocabulary([], ["food"], 2)
    assert vocab.tokens == sorted([OOV, "#food1", "#food2"])


def test_vocabulary_shared_tokens():
    a = make_example([(["hello"], [("cheap", 1.0)])])
    b = make_example([(["hello"], [("cheap", 0.3)])], dialog_id="d1")
    assert build_vocabulary([a, b]).tokens == build_vocabulary([a]).tokens


def test_vocabulary_encode():
    vocab = Vocabulary(["b", "a"])
    assert vocab.tokens == [OOV, "a", "b"]
    assert [vocab.encode(t) for t in ["a", "b", "zzz"]] == [1, 2, vocab.oov_id]
    assert Vocabulary.from_json(vocab.to_json()).hash == vocab.hash


def test_threshold_is_strict():
    counts = Counter({("food", "chinese"): 40, ("food", "jamaican"): 3, ("food", "thai"): 39})
    adict = build_abstraction_dict(SCHEMA, counts)
    assert not adict.is_abstracted("food", "chinese")
    assert adict.is_abstracted("food", "jamaican")
    assert adict.is_abstracted("food", "thai")
    # values never seen in training are abstracted as well
    assert adict.is_abstracted("food", "basque")
    for comp in SCHEMA.groups["goal"]:
        assert not adict.is_abstracted(comp, "none")
        assert not adict.is_abstracted(comp, "dontcare")
    assert adict.abstract_classes("food") == [f"#food{j}" for j in range(1, 9)]
    assert AbstractionDict.from_json(adict.to_json()) == adict


def test_label_counts():
    ex = make_example([(["a"], []), (["b"], [])], labels=[{"food": "thai"}, {"food": "thai"}])
    assert label_counts([ex])[("food", "thai")] == 2


def test_abstract_jamaican():
    ex = make_example(
        [(["hello"], [("looking", 0.9), ("for", 0.9), ("jamaican", 0.9), ("food", 0.9)])],
        labels=[{"food": "jamaican", "area": "none"}],
    )
    out, assign = abstract_example(ex, food_dict("jamaican"))
    assert [e.token for e in out.events] == ["hello", "looking", "for", "#food1", "food"]
    assert out.labels[4] == {"food": "#food1", "area": "none"}
    assert assign.values == {"food": {1: "jamaican"}}


def test_abstract_two_values_consistent():
    ex = make_example(
        [
            (["hello"], [("jamaican", 0.8)]),
            (["inform", "food", "jamaican"], [("basque", 0.7)]),
            (["inform", "food", "basque"], [("jamaican", 0.6)]),
        ],
        labels=[{"food": "jamaican"}, {"food": "basque"}, {"food": "jamaican"}],
    )
    out, assign = abstract_example(ex, food_dict("jamaican", "basque"))
    toks = [e.token for e in out.events]
    assert toks == ["hello", "#food1", "inform", "food", "#food1", "#food2", "inform", "food", "#food2", "#food1"]
    assert [out.labels[t]["food"] for t in sorted(out.labels)] == ["#food1", "#food2", "#food1"]
    assert assign.values["food"] == {1: "jamaican", 2: "basque"}


def test_abstract_identity_without_matches():
    ex = make_example([(["hello"], [("cheap", 0.5)])], labels=[{"food": "none"}])
    out, assign = abstract_example(ex, food_dict("jamaican"))
    assert out == ex
    assert assign.values.get("food", {}) == {}


def test_multiword_value_takes_min_score():
    ex = make_example([(["hello"], [("north", 0.9), ("american", 0.4), ("food", 0.9)])], labels=[{"food": "none"}])
    out, _ = abstract_example(ex, food_dict("north american"))
    assert [(e.token, e.score) for e in out.events] == [("hello", 1.0), ("#food1", 0.4), ("food", 0.9)]
    assert out.events[1].source == USER_ASR


def test_ngram_does_not_cross_turns():
    ex = make_example([(["north"], []), (["american"], [])], labels=[{"food": "none"}] * 2)
    out, _ = abstract_example(ex, food_dict("north american"))
    assert [e.token for e in out.events] == ["north", "american"]


def test_max_abstract_cap():
    ex = make_example([(["x"], [("jamaican", 1.0), ("basque", 1.0), ("thai", 1.0)])], labels=[{"food": "thai"}])
    out, assign = abstract_example(ex, food_dict("jamaican", "basque", "thai", max_abstract=2))
    assert [e.token for e in out.events] == ["x", "#food1", "#food2", "thai"]
    assert out.labels[3]["food"] == "thai"


def test_label_only_value_gets_an_index():
    # a rare value that only appears in the label still claims an abstract class
    ex = make_example([(["x"], [("jamaican", 1.0)])], labels=[{"food": "basque"}])
    out, assign = abstract_example(ex, food_dict("jamaican", "basque"))
    assert assign.values["food"] == {1: "jamaican", 2: "basque"}
    assert out.labels[1]["food"] == "#food2"


def test_tracking_time_abstraction_ignores_labels():
    ex = make_example([(["x"], [("jamaican", 1.0)])], labels=[{"food": "basque"}])
    out, assign = abstract_example(ex, food_dict("jamaican", "basque"), use_labels=False)
    assert assign.values["food"] == {1: "jamaican"}
    assert out.labels[1]["food"] == "basque"


def test_deabstract_examples():
    classes = list(FOOD) + ["#food1", "#food2"]
    p = np.zeros(len(classes))
    p[classes.index("#food1")] = 0.7
    p[classes.index("#food2")] = 0.1
    p[classes.index("thai")] = 0.2
    out = deabstract_distribution(p, classes, "food", AbstractionAssignment({"food": {1: "jamaican"}}), FOOD)
    assert out[FOOD.index("jamaican")] == pytest.approx(0.7)
    assert out[FOOD.index("none")] == pytest.approx(0.1)
    assert out[FOOD.index("thai")] == pytest.approx(0.2)


def test_deabstract_rejects_foreign_class():
    with pytest.raises(KeyError):
        deabstract_distribution(np.ones(1), ["#area1"], "food", AbstractionAssignment(), FOOD)


@settings(max_examples=100, deadline=None)
@given(
    arrays(np.float64, 10, elements=st.floats(0.0, 1.0)),
    st.dictionaries(st.integers(1, 3), st.sampled_from(["jamaican", "basque", "north american"]), max_size=3),
)
def test_deabstract_conserves_mass(raw, mapping):
    p = raw + 1e-3
    p = p / p.sum()
    classes = list(FOOD)[:7] + ["#food1", "#food2", "#food3"]
    concrete = list(FOOD)
    assert len(classes) == 10
    out = deabstract_distribution(p, classes, "food", AbstractionAssignment({"food": mapping}), concrete)
    assert abs(out.sum() - p.sum()) < 1e-9
    assert np.all(out >= 0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.sampled_from(["jamaican", "basque", "north american", "thai", "chinese"]), min_size=1, max_size=6))
def test_one_hot_round_trip(values):
    adict = food_dict("jamaican", "basque", "north american")
    turns = [(["inform"], [(w, 0.5) for w in v.split()] + [("food", 0.5)]) for v in values]
    ex = make_example(turns, labels=[{"food": v} for v in values])
    out, assign = abstract_example(ex, adict)
    classes = list(FOOD) + adict.abstract_classes("food")
    # turn structure is preserved
    assert len(out.turn_ends) == len(ex.turn_ends)
    assert [e.turn_index for e in out.events if e.turn_final] == list(range(len(values)))
    assert all(out.events[t].turn_final for t in out.turn_ends)
    for t, v in zip(sorted(out.labels), values):
        p = np.zeros(len(classes))
        p[classes.index(out.labels[t]["food"])] = 1.0
        got = deabstract_distribution(p, classes, "food", assign, FOOD)
        expect = np.zeros(len(FOOD))
        expect[FOOD.index(v)] = 1.0
        np.testing.assert_array_equal(got, expect)


def stream(n, source=USER_ASR):
    events = [TokenEvent(f"w{i % 7}", 0.5, source if i % 3 else SYSTEM, 0, i == n - 1) for i in range(n)]
    return DialogExample("d", events, {n - 1: {}}, [n - 1])


def test_oov_alpha_zero_is_identity():
    ex = stream(50)
    assert inject_oov(ex, 0.0, np.random.default_rng(0)) == ex


def test_oov_alpha_one_replaces_user_tokens_only():
    ex = stream(50)
    out = inject_oov(ex, 1.0, np.random.default_rng(0))
    for a, b in zip(ex.events, out.events):
        if a.source == SYSTEM:
            assert b == a
        else:
            assert b.token == OOV and b.score == a.score


def test_oov_rate():
    ex = stream(15_000, USER_TRANSCRIPT)
    out = inject_oov(ex, 0.1, np.random.default_rng(123))
    user = [e for e in out.events if e.source != SYSTEM]
    assert len(user) == 10_000
    frac = sum(e.token == OOV for e in user) / len(user)
    assert abs(frac - 0.1) < 0.01


def test_oov_seeded_and_validated():
    ex = stream(200)
    a = inject_oov(ex, 0.3, np.random.default_rng(7))
    b = inject_oov(ex, 0.3, np.random.default_rng(7))
    assert a == b
    for bad in (-0.1, 1.5):
        with pytest.raises(ValueError):
            inject_oov(ex, bad, np.random.default_rng(0))


def test_mix_transcriptions():
    asr = [stream(5) for _ in range(3)]
    tr = [stream(4, USER_TRANSCRIPT) for _ in range(3)]
    assert len(mix_transcriptions(asr, tr)) == 6
    assert mix_transcriptions(asr, []) == asr


def test_assignment_prefixes():
    events = [TokenEvent(t, 1.0, USER_ASR, 0) for t in ["hi", "#food1", "x", "#area1", "#food2"]]
    full = AbstractionAssignment({"food": {1: "basque", 2: "thai"}, "area": {1: "east"}})
    a, b, c, d = assignment_prefixes(full, events, [0, 1, 3, 4])
    assert a.values == {"food": {}, "area": {}}
    assert b.values == {"food": {1: "basque"}, "area": {}}
    assert c.values == {"food": {1: "basque"}, "area": {1: "east"}}
    assert d.values == full.values
    assert assignment_prefixes(full, events, []) == []
