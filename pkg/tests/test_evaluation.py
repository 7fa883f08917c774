"""Metric tests on hand-enumerated micro datasets.

Each fixture lists alignments, detection probabilities and predicted times in
ms, and the expected metrics worked out by hand.
"""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kwloc.corpus import Alignment, WordSpan
from kwloc.errors import InputError, InvariantViolation
from kwloc.evaluation import (
    EvalReport,
    ScoreTable,
    chance_accuracy,
    chance_accuracy_mc,
    confusion_top_words,
    eval_actual,
    eval_oracle,
    eval_spotting,
    micro_f1,
    per_keyword_f1,
)


def ali(utt, dur, *spans):
    return Alignment(utt, dur, tuple(WordSpan(w, s, e) for w, s, e in spans))


def table(vocab, rows):
    """``rows``: ``{utt_id: [(prob, tau_ms) per keyword]}``."""
    ids = tuple(rows)
    probs = np.array([[p for p, _ in rows[u]] for u in ids], dtype=float)
    taus = np.array([[t for _, t in rows[u]] for u in ids], dtype=np.int64)
    return ScoreTable(ids, tuple(vocab), probs, taus, "fixture")


def alignments(*items):
    return {a.utt_id: a for a in items}


# 1: everything detected is present and correctly placed
def fixture_clean():
    A = alignments(
        ali("u1", 300, ("a", 0, 100), ("x", 100, 200)),
        ali("u2", 300, ("b", 50, 150), ("a", 150, 250)),
        ali("u3", 200, ("x", 0, 100)),
    )
    S = table("ab", {"u1": [(0.9, 50), (0.1, 0)], "u2": [(0.8, 200), (0.7, 100)], "u3": [(0.2, 0), (0.3, 0)]})
    return A, S


# 2: boundary rule, tau at start counts and tau at end does not
def fixture_boundaries():
    A = alignments(
        ali("u1", 300, ("a", 100, 200)),
        ali("u2", 100, ("a", 0, 50)),
        ali("u3", 400, ("a", 200, 300)),
        ali("u4", 100, ("x", 0, 100)),
    )
    S = table("a", {"u1": [(0.6, 100)], "u2": [(0.4, 50)], "u3": [(0.9, 250)], "u4": [(0.7, 10)]})
    return A, S


# 3: one false alarm and one miss
def fixture_false_alarm():
    A = alignments(ali("u1", 200, ("a", 0, 100)), ali("u2", 200, ("b", 0, 100)))
    S = table("ab", {"u1": [(0.9, 50), (0.8, 50)], "u2": [(0.1, 0), (0.2, 150)]})
    return A, S


# 4: nothing detected, a keyword absent from the set, ranking ties
def fixture_no_detections():
    A = alignments(ali("u1", 100, ("x", 0, 100)), ali("u2", 100, ("a", 0, 100)))
    S = table("ab", {"u1": [(0.1, 0), (0.1, 0)], "u2": [(0.1, 0), (0.1, 0)]})
    return A, S


# 5: repeated keyword, a location in a gap, a location on another word
def fixture_repeats():
    A = alignments(
        ali("u1", 400, ("a", 0, 100), ("y", 150, 250), ("a", 300, 400)),
        ali("u2", 300, ("x", 0, 100), ("a", 100, 200)),
        ali("u3", 200, ("y", 0, 100), ("a", 100, 200)),
    )
    S = table("a", {"u1": [(0.9, 350)], "u2": [(0.8, 250)], "u3": [(0.6, 50)]})
    return A, S


FIXTURES = [fixture_clean, fixture_boundaries, fixture_false_alarm, fixture_no_detections, fixture_repeats]

EXPECTED = {
    "fixture_clean": dict(
        oracle=1.0,
        actual=({"precision": 1.0, "recall": 1.0, "f1": 1.0}, {"precision": 1.0, "recall": 1.0, "f1": 1.0}),
        spotting=({"p_at_10": 0.5, "p_at_n": 1.0}, {"p_at_10": 0.5, "p_at_n": 1.0}),
    ),
    "fixture_boundaries": dict(
        oracle=2 / 3,
        actual=({"precision": 2 / 3, "recall": 2 / 3, "f1": 2 / 3}, {"precision": 2 / 3, "recall": 2 / 3, "f1": 2 / 3}),
        spotting=({"p_at_10": 0.5, "p_at_n": 2 / 3}, {"p_at_10": 0.75, "p_at_n": 2 / 3}),
    ),
    "fixture_false_alarm": dict(
        oracle=0.5,
        actual=({"precision": 0.5, "recall": 0.5, "f1": 0.5}, {"precision": 0.5, "recall": 0.5, "f1": 0.5}),
        spotting=({"p_at_10": 0.25, "p_at_n": 0.5}, {"p_at_10": 0.5, "p_at_n": 0.5}),
    ),
    "fixture_no_detections": dict(
        oracle=1.0,
        actual=({"precision": None, "recall": 0.0, "f1": None}, {"precision": None, "recall": 0.0, "f1": None}),
        spotting=({"p_at_10": 0.5, "p_at_n": 0.0}, {"p_at_10": 0.5, "p_at_n": 0.0}),
    ),
    "fixture_repeats": dict(
        oracle=1 / 3,
        actual=({"precision": 1 / 3, "recall": 1 / 3, "f1": 1 / 3}, {"precision": 1.0, "recall": 1.0, "f1": 1.0}),
        spotting=({"p_at_10": 1 / 3, "p_at_n": 1 / 3}, {"p_at_10": 1.0, "p_at_n": 1.0}),
    ),
}


def _same(a, b):
    assert a.keys() == b.keys()
    for k in a:
        if b[k] is None:
            assert a[k] is None, k
        else:
            assert a[k] == pytest.approx(b[k], abs=1e-15), k


@pytest.mark.parametrize("fixture", FIXTURES, ids=lambda f: f.__name__)
def test_oracle(fixture):
    A, S = fixture()
    assert eval_oracle(S, A).overall["accuracy"] == pytest.approx(EXPECTED[fixture.__name__]["oracle"], abs=1e-15)


@pytest.mark.parametrize("fixture", FIXTURES, ids=lambda f: f.__name__)
def test_actual(fixture):
    A, S = fixture()
    report = eval_actual(S, A, 0.5)
    loc, det = EXPECTED[fixture.__name__]["actual"]
    _same(report.overall, loc)
    _same(report.upper, det)


@pytest.mark.parametrize("fixture", FIXTURES, ids=lambda f: f.__name__)
def test_spotting(fixture):
    A, S = fixture()
    report = eval_spotting(S, A)
    loc, spot = EXPECTED[fixture.__name__]["spotting"]
    _same(report.overall, loc)
    _same(report.upper, spot)
    assert any("P@10" in f for f in report.flags)


def test_counts_and_flags():
    A, S = fixture_false_alarm()
    r = eval_actual(S, A)
    assert r.counts == {"detected": 2, "occurrences": 2, "correct_detections": 1, "correct_locations": 1}
    A, S = fixture_no_detections()
    assert "no detections" in eval_actual(S, A).flags[0]
    assert eval_oracle(S, A).per_keyword["b"]["accuracy"] is None
    spot = eval_spotting(S, A)
    assert spot.per_keyword["b"]["p_at_10"] is None
    assert any("'b'" in f for f in spot.flags)


def test_three_pairs_two_correct():
    A = alignments(*(ali(f"u{i}", 300, ("a", 100, 200)) for i in range(3)))
    S = table("a", {"u0": [(0.9, 150)], "u1": [(0.9, 120)], "u2": [(0.9, 250)]})
    assert eval_oracle(S, A).overall["accuracy"] == pytest.approx(2 / 3)


def test_top_ten_all_present_seven_located():
    A = alignments(*(ali(f"u{i:02d}", 300, ("a", 100, 200)) for i in range(12)))
    rows = {f"u{i:02d}": [(1 - i / 100, 150 if i < 7 else 250)] for i in range(12)}
    r = eval_spotting(table("a", rows), A)
    assert r.upper["p_at_10"] == 1.0
    assert r.overall["p_at_10"] == pytest.approx(0.7)
    assert not r.flags


def test_confusion_top_words():
    A, S = fixture_repeats()
    assert confusion_top_words(S, A, "a") == [("--", 1), ("a", 1), ("y", 1)]
    assert confusion_top_words(S, A, "a", k_utts=1) == [("a", 1)]
    assert len(confusion_top_words(S, A, "a", k_words=2)) == 2
    with pytest.raises(InputError):
        confusion_top_words(S, A, "zzz")


def test_per_keyword_f1():
    A, S = fixture_false_alarm()
    report = eval_actual(S, A)
    f1, excluded = per_keyword_f1(report)
    assert f1 == {"a": 1.0, "b": 0.0}
    assert excluded == {}
    A, S = fixture_no_detections()
    f1, excluded = per_keyword_f1(eval_actual(S, A))
    assert f1 == {} and set(excluded) == {"a", "b"}
    with pytest.raises(InputError):
        per_keyword_f1(eval_oracle(S, A))


@pytest.mark.parametrize("fixture", FIXTURES, ids=lambda f: f.__name__)
def test_micro_f1_matches_headline(fixture):
    A, S = fixture()
    r = eval_actual(S, A)
    assert micro_f1(r) == r.overall["f1"]


def test_report_invariants_enforced():
    with pytest.raises(InvariantViolation):
        EvalReport("actual", "m", {"precision": 0.6}, {}, upper={"precision": 0.5})
    with pytest.raises(InvariantViolation):
        EvalReport("oracle", "m", {"accuracy": 1.2}, {})
    EvalReport("actual", "m", {"precision": None}, {}, upper={"precision": None})


def test_report_serialisation():
    A, S = fixture_clean()
    r = eval_spotting(S, A)
    doc = json.loads(r.to_json())
    assert doc["task"] == "spotting" and doc["overall"]["p_at_n"] == 1.0
    text = r.to_text()
    assert "p_at_10" in text and "upper_p_at_10" in text
    assert text.splitlines()[2].startswith("(all)")


def test_score_table_checks():
    with pytest.raises(InputError):
        ScoreTable(("u",), ("a",), np.zeros((1, 2)), np.zeros((1, 2)))
    with pytest.raises(InputError):
        ScoreTable(("u", "u"), ("a",), np.zeros((2, 1)), np.zeros((2, 1)))
    A, S = fixture_clean()
    with pytest.raises(InputError):
        eval_oracle(S, {})


# properties on random data

def random_case(seed, n_utts=8, vocab="abcd"):
    rng = np.random.default_rng(seed)
    A, rows = {}, {}
    for i in range(n_utts):
        t, spans = 0, []
        for _ in range(int(rng.integers(1, 5))):
            t += int(rng.integers(0, 50))
            d = int(rng.integers(50, 150))
            spans.append((str(rng.choice(list(vocab) + ["x", "y"])), t, t + d))
            t += d
        dur = t + int(rng.integers(0, 50))
        uid = f"r{i:02d}"
        A[uid] = ali(uid, dur, *spans)
        rows[uid] = [(float(rng.random()), int(rng.integers(0, dur))) for _ in vocab]
    return A, table(vocab, rows)


@given(st.integers(0, 10_000), st.floats(0.05, 0.95))
@settings(max_examples=60, deadline=None)
def test_ordering_relations_hold(seed, theta):
    A, S = random_case(seed)
    for r in (eval_actual(S, A, theta), eval_spotting(S, A)):
        for k, v in r.overall.items():
            if v is not None and r.upper.get(k) is not None:
                assert v <= r.upper[k]


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_metrics_invariant_to_utterance_order(seed):
    A, S = random_case(seed)
    perm = np.random.default_rng(seed).permutation(len(S.utt_ids))
    T = ScoreTable(tuple(S.utt_ids[i] for i in perm), S.vocab, S.probs[perm], S.taus_ms[perm], S.method)
    for f in (eval_oracle, eval_actual, eval_spotting):
        assert f(S, A).overall == f(T, A).overall


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_higher_threshold_fewer_detections(seed):
    A, S = random_case(seed)
    assert eval_actual(S, A, 0.9).counts["detected"] <= eval_actual(S, A, 0.5).counts["detected"]


def test_chance_baseline_analytic_vs_monte_carlo():
    A, S = random_case(3, n_utts=40)
    exact = chance_accuracy(A, S.utt_ids, S.vocab)
    mc = chance_accuracy_mc(A, S.utt_ids, S.vocab, n_draws=2000, seed=1)
    assert abs(exact - mc) < 0.02


def test_chance_baseline_simple():
    A = alignments(ali("u1", 400, ("a", 0, 100)), ali("u2", 200, ("a", 0, 50), ("a", 100, 150)))
    assert chance_accuracy(A, ["u1", "u2"], ["a"]) == pytest.approx((0.25 + 0.5) / 2)
