"""Entity-level exact-match F1 across class-incremental steps.

Scores use exact (start, end, type) matching with no partial credit. Step
reports carry per-type precision/recall/F1, the unweighted macro over seen
types, an optional micro-within-coarse then macro-across-coarse score, and
the gap against a matched non-incremental run.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .corpus import EntityTriplet
from .errors import MetricsError


@dataclass
class Counts:
    """Exact-match tallies for one entity type."""

    tp: int = 0
    fp: int = 0
    fn: int = 0

    def add(self, other: "Counts") -> None:
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn

    def prf(self) -> tuple[float, float, float]:
        precision = self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0
        recall = self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0
        if precision + recall == 0.0:
            return precision, recall, 0.0
        return precision, recall, 2 * precision * recall / (precision + recall)


def match_entities(
    gold: Iterable[EntityTriplet], pred: Iterable[EntityTriplet]
) -> dict[str, Counts]:
    """Per-type TP/FP/FN with each gold mention matched at most once."""
    gold_counter = Counter(gold)
    pred_counter = Counter(pred)
    counts: dict[str, Counts] = {}
    for triplet in set(gold_counter) | set(pred_counter):
        entry = counts.setdefault(triplet.type, Counts())
        matched = min(gold_counter[triplet], pred_counter[triplet])
        entry.tp += matched
        entry.fp += pred_counter[triplet] - matched
        entry.fn += gold_counter[triplet] - matched
    return counts


def merge_counts(per_sentence: Iterable[Mapping[str, Counts]]) -> dict[str, Counts]:
    """Deterministic reduction of per-sentence tallies."""
    total: dict[str, Counts] = {}
    for counts in per_sentence:
        for name, entry in counts.items():
            total.setdefault(name, Counts()).add(entry)
    return total


def macro_f1(counts: Mapping[str, Counts], seen_types: Sequence[str]) -> float:
    """Unweighted mean of per-type F1 over exactly the seen types.

    A seen type with no gold mentions and no predictions contributes 0.
    """
    if not seen_types:
        raise MetricsError("macro F1 requires a nonempty set of seen types")
    scores = [counts.get(name, Counts()).prf()[2] for name in seen_types]
    return sum(scores) / len(scores)


def coarse_micro_then_macro(
    counts: Mapping[str, Counts], coarse_of: Mapping[str, str]
) -> float:
    """Pool counts within each coarse group (micro), then average across groups."""
    groups: dict[str, Counts] = {}
    for name, entry in counts.items():
        coarse = coarse_of.get(name)
        if coarse is None:
            raise MetricsError(f"fine type {name!r} has no coarse label")
        groups.setdefault(coarse, Counts()).add(entry)
    if not groups:
        raise MetricsError("no counts to group")
    micros = [entry.prf()[2] for _, entry in sorted(groups.items())]
    return sum(micros) / len(micros)


@dataclass
class StepMetrics:
    """Evaluation summary after one incremental step."""

    step: int
    per_type: dict[str, dict[str, float]] = field(default_factory=dict)
    macro_f1: float = 0.0
    coarse_macro_f1: float | None = None
    gap: float | None = None

    def to_dict(self) -> dict:
        payload = {
            "step": self.step,
            "per_type": self.per_type,
            "macro_f1": self.macro_f1,
        }
        if self.coarse_macro_f1 is not None:
            payload["coarse_macro_f1"] = self.coarse_macro_f1
        if self.gap is not None:
            payload["gap"] = self.gap
        return payload


def evaluate_step(
    step: int,
    gold_sets: Sequence[Sequence[EntityTriplet]],
    pred_sets: Sequence[Sequence[EntityTriplet]],
    seen_types: Sequence[str],
    coarse_of: Mapping[str, str] | None = None,
) -> StepMetrics:
    """Score parallel gold/prediction sentence lists for one step."""
    if len(gold_sets) != len(pred_sets):
        raise MetricsError(
            f"gold/prediction length mismatch: {len(gold_sets)} vs {len(pred_sets)}"
        )
    counts = merge_counts(match_entities(g, p) for g, p in zip(gold_sets, pred_sets))
    per_type: dict[str, dict[str, float]] = {}
    for name in seen_types:
        entry = counts.get(name, Counts())
        precision, recall, f1 = entry.prf()
        per_type[name] = {
            "tp": entry.tp,
            "fp": entry.fp,
            "fn": entry.fn,
            "precision": precision,
            "recall": recall,
            "f1": f1,
        }
    metrics = StepMetrics(step=step, per_type=per_type, macro_f1=macro_f1(counts, seen_types))
    if coarse_of and all(name in coarse_of for name in seen_types):
        seen_counts = {name: counts.get(name, Counts()) for name in seen_types}
        metrics.coarse_macro_f1 = coarse_micro_then_macro(seen_counts, coarse_of)
    return metrics


def compute_gap(
    cl_series: Sequence[StepMetrics], noncl_series: Sequence[StepMetrics]
) -> list[float]:
    """Per-step difference: incremental macro F1 minus upper-bound macro F1."""
    if len(cl_series) != len(noncl_series):
        raise MetricsError(
            f"series length mismatch: {len(cl_series)} vs {len(noncl_series)} steps"
        )
    gaps: list[float] = []
    for cl_step, noncl_step in zip(cl_series, noncl_series):
        if cl_step.step != noncl_step.step:
            raise MetricsError(f"step mismatch: {cl_step.step} vs {noncl_step.step}")
        gaps.append(cl_step.macro_f1 - noncl_step.macro_f1)
    return gaps
