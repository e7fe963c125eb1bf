import random

import pytest

from tripner.corpus import EntityTriplet
from tripner.errors import MetricsError
from tripner.metrics import (
    Counts,
    StepMetrics,
    coarse_micro_then_macro,
    compute_gap,
    evaluate_step,
    macro_f1,
    match_entities,
    merge_counts,
)


def brute_force_counts(gold, pred):
    """Independent tally: nested loops with explicit one-to-one matching."""
    gold = list(gold)
    pred = list(pred)
    used = [False] * len(gold)
    counts = {}

    def entry(name):
        return counts.setdefault(name, {"tp": 0, "fp": 0, "fn": 0})

    for p in pred:
        hit = None
        for i, g in enumerate(gold):
            if not used[i] and g == p:
                hit = i
                break
        if hit is None:
            entry(p.type)["fp"] += 1
        else:
            used[hit] = True
            entry(p.type)["tp"] += 1
    for i, g in enumerate(gold):
        if not used[i]:
            entry(g.type)["fn"] += 1
    return counts


def brute_force_f1(counts, name):
    c = counts.get(name, {"tp": 0, "fp": 0, "fn": 0})
    tp, fp, fn = c["tp"], c["fp"], c["fn"]
    if tp == 0 and (fp or fn):
        return 0.0
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 2 * precision * recall / (precision + recall)


def random_instance(rng, types="ABC", n=6, max_entities=5):
    def entities():
        out = []
        for _ in range(rng.randint(0, max_entities)):
            start = rng.randrange(n)
            end = rng.randrange(start, n)
            out.append(EntityTriplet(start, end, rng.choice(types)))
        return out

    return entities(), entities()


class TestMatchEntities:
    def test_identical_sets_are_all_tp(self):
        gold = [EntityTriplet(0, 1, "A"), EntityTriplet(2, 2, "B")]
        counts = match_entities(gold, list(gold))
        assert counts["A"].tp == 1 and counts["B"].tp == 1
        assert all(c.fp == 0 and c.fn == 0 for c in counts.values())

    def test_off_by_one_span_is_fp_plus_fn(self):
        gold = [EntityTriplet(0, 1, "A")]
        pred = [EntityTriplet(0, 2, "A")]
        counts = match_entities(gold, pred)
        assert (counts["A"].tp, counts["A"].fp, counts["A"].fn) == (0, 1, 1)

    def test_hand_counted_mixed_case(self):
        gold = [EntityTriplet(0, 1, "A"), EntityTriplet(2, 2, "B")]
        pred = [EntityTriplet(0, 1, "A"), EntityTriplet(2, 2, "A")]
        counts = match_entities(gold, pred)
        assert (counts["A"].tp, counts["A"].fp) == (1, 1)
        assert counts["B"].fn == 1

    def test_each_gold_matched_at_most_once(self):
        gold = [EntityTriplet(0, 0, "A")]
        pred = [EntityTriplet(0, 0, "A"), EntityTriplet(0, 0, "A")]
        counts = match_entities(gold, pred)
        assert (counts["A"].tp, counts["A"].fp) == (1, 1)


class TestMacroF1:
    def test_all_types_perfect(self):
        counts = {"A": Counts(tp=3), "B": Counts(tp=1)}
        assert macro_f1(counts, ["A", "B"]) == 1.0

    def test_mean_of_one_and_zero(self):
        counts = {"A": Counts(tp=2), "B": Counts(fp=1, fn=1)}
        assert macro_f1(counts, ["A", "B"]) == 0.5

    def test_three_type_fixture_from_counting_oracle(self):
        # Four sentences tallied by hand: A perfect (f1 1), B has tp=1 fp=1
        # fn=0 -> p=0.5, r=1, f1=2/3; C missed entirely -> 0.
        gold = [
            [EntityTriplet(0, 0, "A"), EntityTriplet(1, 1, "B")],
            [EntityTriplet(2, 3, "A")],
            [EntityTriplet(0, 1, "C")],
            [],
        ]
        pred = [
            [EntityTriplet(0, 0, "A"), EntityTriplet(1, 1, "B")],
            [EntityTriplet(2, 3, "A"), EntityTriplet(0, 0, "B")],
            [],
            [],
        ]
        counts = merge_counts(match_entities(g, p) for g, p in zip(gold, pred))
        oracle = merge_counts(
            [
                {
                    name: Counts(**entry)
                    for name, entry in brute_force_counts(g, p).items()
                }
                for g, p in zip(gold, pred)
            ]
        )
        for name in "ABC":
            assert (counts[name].tp, counts[name].fp, counts[name].fn) == (
                oracle[name].tp, oracle[name].fp, oracle[name].fn,
            )
        assert macro_f1(counts, ["A", "B", "C"]) == pytest.approx(0.5556, abs=1e-4)

    def test_absent_seen_type_contributes_zero(self):
        counts = {"A": Counts(tp=1)}
        assert macro_f1(counts, ["A", "B"]) == 0.5

    def test_empty_seen_types_raises(self):
        with pytest.raises(MetricsError):
            macro_f1({}, [])


class TestBruteForceEquivalence:
    def test_exact_agreement_on_1000_random_instances(self):
        rng = random.Random(4242)
        for _ in range(1000):
            gold, pred = random_instance(rng)
            counts = match_entities(gold, pred)
            oracle = brute_force_counts(gold, pred)
            names = set(counts) | set(oracle)
            for name in names:
                ours = counts.get(name, Counts())
                theirs = oracle.get(name, {"tp": 0, "fp": 0, "fn": 0})
                assert (ours.tp, ours.fp, ours.fn) == (
                    theirs["tp"], theirs["fp"], theirs["fn"],
                )
                assert ours.prf()[2] == pytest.approx(brute_force_f1(oracle, name))

    def test_permutation_invariance(self):
        rng = random.Random(7)
        gold, pred = random_instance(rng, max_entities=6)
        base = match_entities(gold, pred)
        for _ in range(10):
            shuffled = pred[:]
            rng.shuffle(shuffled)
            again = match_entities(gold, shuffled)
            assert {k: (v.tp, v.fp, v.fn) for k, v in base.items()} == {
                k: (v.tp, v.fp, v.fn) for k, v in again.items()
            }

    def test_monotone_sanity(self):
        rng = random.Random(21)
        for _ in range(50):
            gold, pred = random_instance(rng)
            missing = [g for g in gold if g not in pred]
            if missing:
                better = match_entities(gold, pred + [missing[0]])
                base = match_entities(gold, pred)
                for name in set(base) | set(better):
                    assert (
                        better.get(name, Counts()).prf()[2]
                        >= base.get(name, Counts()).prf()[2] - 1e-12
                    )
            wrong = EntityTriplet(0, 0, "Z")
            worse = match_entities(gold, pred + [wrong])
            base = match_entities(gold, pred)
            for name in base:
                assert worse[name].prf()[2] <= base[name].prf()[2] + 1e-12


class TestCoarseGrouping:
    def test_single_group_equals_plain_micro(self):
        counts = {"x1": Counts(tp=2, fp=1), "x2": Counts(tp=1, fn=1)}
        coarse = {"x1": "X", "x2": "X"}
        tp, fp, fn = 3, 1, 1
        precision, recall = tp / (tp + fp), tp / (tp + fn)
        micro = 2 * precision * recall / (precision + recall)
        assert coarse_micro_then_macro(counts, coarse) == pytest.approx(micro)

    def test_mean_across_groups(self):
        # Engineered so group micro F1s are exactly 0.8 and 0.6.
        counts = {"a": Counts(tp=2, fp=1), "b": Counts(tp=3, fp=2, fn=2)}
        coarse = {"a": "GA", "b": "GB"}
        assert coarse_micro_then_macro(counts, coarse) == pytest.approx(0.7)

    def test_pooled_group_micro_fixture(self):
        counts = {"f1": Counts(tp=2), "f2": Counts(fp=1, fn=1)}
        coarse = {"f1": "G", "f2": "G"}
        assert coarse_micro_then_macro(counts, coarse) == pytest.approx(2 * 2 / (2 * 2 + 1 + 1))

    def test_missing_coarse_label_raises(self):
        with pytest.raises(MetricsError):
            coarse_micro_then_macro({"f1": Counts(tp=1)}, {})


class TestGap:
    def series(self, scores):
        return [StepMetrics(step=i + 1, macro_f1=s) for i, s in enumerate(scores)]

    def test_identical_series_all_zero(self):
        gaps = compute_gap(self.series([0.8, 0.9]), self.series([0.8, 0.9]))
        assert gaps == [0.0, 0.0]

    def test_subtraction(self):
        gaps = compute_gap(self.series([0.85, 0.80]), self.series([0.85, 0.90]))
        assert gaps == pytest.approx([0.0, -0.10])

    def test_step_mismatch_raises(self):
        with pytest.raises(MetricsError):
            compute_gap(self.series([0.5]), self.series([0.5, 0.6]))
        bad = self.series([0.5])
        bad[0].step = 3
        with pytest.raises(MetricsError):
            compute_gap(bad, self.series([0.5]))


class TestEvaluateStep:
    def test_per_type_table_and_macro(self):
        gold = [[EntityTriplet(0, 0, "A")], [EntityTriplet(1, 1, "B")]]
        pred = [[EntityTriplet(0, 0, "A")], []]
        metrics = evaluate_step(1, gold, pred, ["A", "B"])
        assert metrics.per_type["A"]["f1"] == 1.0
        assert metrics.per_type["B"]["fn"] == 1
        assert metrics.macro_f1 == 0.5

    def test_coarse_scores_attach_when_labels_cover(self):
        gold = [[EntityTriplet(0, 0, "A")]]
        metrics = evaluate_step(1, gold, gold, ["A"], coarse_of={"A": "G"})
        assert metrics.coarse_macro_f1 == 1.0

    def test_length_mismatch_raises(self):
        with pytest.raises(MetricsError):
            evaluate_step(1, [[]], [[], []], ["A"])
