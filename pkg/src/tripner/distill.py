"""Confidence-filtered pseudo labeling and knowledge distillation.

The previous step's model makes a one-off prediction on the new task's
training sentences. Each predicted triplet's confidence is the minimum of its
three step probabilities; per-type thresholds are the configured value capped
by the median confidence of that type (keeping at least half of each type's
predictions). Surviving triplets form the pseudo prefix, and the recorded
teacher distributions drive a KL loss against the student.
"""

from __future__ import annotations

import base64
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from statistics import median
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch

from .codec import (
    EntityTypeRegistry,
    TargetSequence,
    TripletOrder,
    canonical_sort,
    encode_targets,
)
from .corpus import EntityTriplet, Sentence
from .errors import DistillError
from .model import BatchEncoderOutput, EncoderOutput, PointerModel


@dataclass
class PseudoPrediction:
    """Teacher-decoded triplets for one sentence with aligned distributions.

    ``distributions`` has one row per generative step (three per triplet) over
    the teacher's output space of size n + ek_teacher + 1; ``confidences`` has
    one entry per triplet: the minimum of its three step probabilities.
    """

    sentence_id: str
    triplets: list[EntityTriplet]
    distributions: np.ndarray  # (3 * len(triplets), V_teacher) float32
    confidences: np.ndarray  # (len(triplets),) float32

    def confidence_of(self, index: int) -> float:
        return float(self.confidences[index])


@dataclass
class ThresholdTable:
    """Effective per-type thresholds: configured value capped by the median."""

    configured: dict[str, float]
    effective: dict[str, float]
    prediction_counts: dict[str, int] = field(default_factory=dict)

    def threshold_for(self, type_name: str) -> float:
        try:
            return self.effective[type_name]
        except KeyError:
            raise DistillError(f"no threshold for entity type {type_name!r}") from None

    def to_dict(self) -> dict:
        return {
            "configured": dict(sorted(self.configured.items())),
            "effective": dict(sorted(self.effective.items())),
            "prediction_counts": dict(sorted(self.prediction_counts.items())),
        }


@dataclass
class PrunedPseudoSequence:
    """Confidence-filtered pseudo labels re-encoded in canonical order."""

    sequence: TargetSequence  # pseudo-only target (pseudo_len == len)
    distributions: np.ndarray  # (len(sequence), V_teacher), aligned per step
    triplets: list[EntityTriplet]
    dropped_per_type: dict[str, int] = field(default_factory=dict)
    kept_per_type: dict[str, int] = field(default_factory=dict)


def triplet_confidence(step_probs: Sequence[float]) -> float:
    """Quality of one predicted triplet: the minimum of its three probabilities."""
    if len(step_probs) != 3:
        raise DistillError(f"a triplet spans exactly 3 steps, got {len(step_probs)}")
    return float(min(step_probs))


def build_prediction(
    sentence_id: str,
    generated: TargetSequence,
    step_distributions: np.ndarray,
    n: int,
    registry: EntityTypeRegistry,
    order: TripletOrder,
) -> PseudoPrediction:
    """Chunk a generated sequence into per-triplet predictions.

    Malformed chunks (possible only with unconstrained decoding) and duplicate
    triplets are dropped together with their distribution rows.
    """
    ek = len(registry)
    roles = TripletOrder(order).roles
    triplets: list[EntityTriplet] = []
    rows: list[np.ndarray] = []
    confidences: list[float] = []
    seen: set[EntityTriplet] = set()
    indices = generated.indices
    for base in range(0, len(indices) - 2, 3):
        chunk = indices[base : base + 3]
        slots = dict(zip(roles, chunk))
        start, end, type_index = slots["start"], slots["end"], slots["type"]
        if not (0 <= start <= end < n and n <= type_index < n + ek):
            continue
        triplet = EntityTriplet(start, end, registry.type_at(type_index - n))
        if triplet in seen:
            continue
        seen.add(triplet)
        chunk_dists = step_distributions[base : base + 3]
        confidence = triplet_confidence(
            [float(chunk_dists[i, chunk[i]]) for i in range(3)]
        )
        triplets.append(triplet)
        rows.extend(chunk_dists)
        confidences.append(confidence)
    distributions = (
        np.stack(rows).astype(np.float32)
        if rows
        else np.zeros((0, n + ek + 1), dtype=np.float32)
    )
    return PseudoPrediction(
        sentence_id=sentence_id,
        triplets=triplets,
        distributions=distributions,
        confidences=np.asarray(confidences, dtype=np.float32),
    )


def predict_pseudo(
    teacher: PointerModel,
    sentences: Sequence[Sentence],
    max_triplets: int,
    constrained: bool = True,
    expected_types: Sequence[str] | None = None,
    cache_path: str | Path | None = None,
    teacher_hash: str | None = None,
    batch_size: int = 32,
) -> list[PseudoPrediction]:
    """One-off teacher prediction over a dataset, optionally disk-cached.

    The cache is keyed by the teacher checkpoint hash and sentence ids; a
    rerun with the same checkpoint reuses the cached file byte-for-byte.
    """
    if expected_types is not None and tuple(expected_types) != teacher.registry.types:
        raise DistillError(
            f"teacher registry {teacher.registry.types} does not match the "
            f"expected old types {tuple(expected_types)}"
        )
    if cache_path is not None:
        cached = _load_cache(Path(cache_path), teacher_hash, [s.id for s in sentences])
        if cached is not None:
            return cached
    teacher.eval()
    predictions: list[PseudoPrediction] = []
    for base in range(0, len(sentences), batch_size):
        batch = sentences[base : base + batch_size]
        enc = teacher.encode_batch(batch)
        sequences, dist_lists = teacher.generate_batch(enc, max_triplets, constrained)
        for sentence, sequence, dists in zip(batch, sequences, dist_lists):
            step_dists = (
                np.stack([d.probs.numpy() for d in dists]).astype(np.float32)
                if dists
                else np.zeros((0, teacher.output_size), dtype=np.float32)
            )
            predictions.append(
                build_prediction(
                    sentence.id, sequence, step_dists, teacher.n, teacher.registry,
                    teacher.order,
                )
            )
    if cache_path is not None:
        _write_cache(
            Path(cache_path), teacher_hash, predictions, teacher.output_size,
            teacher.n, teacher.registry, teacher.order,
        )
    return predictions


def compute_thresholds(
    predictions: Iterable[PseudoPrediction],
    configured: Mapping[str, float],
    types: Sequence[str],
) -> ThresholdTable:
    """Effective threshold per type: min(configured, median confidence).

    The median runs over all predicted triplets of that type across the whole
    prediction set; with an even count it is the mean of the two middle
    values. Types with no predictions keep their configured value.
    """
    by_type: dict[str, list[float]] = {name: [] for name in types}
    for prediction in predictions:
        for triplet, confidence in zip(prediction.triplets, prediction.confidences):
            by_type.setdefault(triplet.type, []).append(float(confidence))
    effective: dict[str, float] = {}
    counts: dict[str, int] = {}
    config_used: dict[str, float] = {}
    for name, confidences in by_type.items():
        if name not in configured:
            raise DistillError(f"no configured threshold for type {name!r}")
        delta = float(configured[name])
        config_used[name] = delta
        counts[name] = len(confidences)
        effective[name] = min(delta, median(confidences)) if confidences else delta
    return ThresholdTable(
        configured=config_used, effective=effective, prediction_counts=counts
    )


def prune(
    prediction: PseudoPrediction,
    thresholds: ThresholdTable,
    n: int,
    registry: EntityTypeRegistry,
    order: TripletOrder,
) -> PrunedPseudoSequence:
    """Drop triplets below their type's effective threshold.

    Survivors are re-encoded in canonical order and their recorded teacher
    distribution rows are carried along, re-indexed over the surviving steps.
    """
    kept: list[tuple[EntityTriplet, np.ndarray]] = []
    dropped: dict[str, int] = {}
    kept_counts: dict[str, int] = {}
    for i, triplet in enumerate(prediction.triplets):
        if prediction.confidence_of(i) >= thresholds.threshold_for(triplet.type):
            kept.append((triplet, prediction.distributions[3 * i : 3 * i + 3]))
            kept_counts[triplet.type] = kept_counts.get(triplet.type, 0) + 1
        else:
            dropped[triplet.type] = dropped.get(triplet.type, 0) + 1
    kept_order = {trip: rows for trip, rows in kept}
    survivors = canonical_sort([trip for trip, _ in kept], registry)
    encoded = encode_targets(survivors, n, registry, order)
    sequence = TargetSequence(
        indices=encoded.indices, n=n, pseudo_len=len(encoded.indices), ground_len=0
    )
    if survivors:
        distributions = np.concatenate([kept_order[trip] for trip in survivors])
    else:
        width = prediction.distributions.shape[1] if prediction.distributions.size else n + len(registry) + 1
        distributions = np.zeros((0, width), dtype=np.float32)
    return PrunedPseudoSequence(
        sequence=sequence,
        distributions=distributions.astype(np.float32),
        triplets=survivors,
        dropped_per_type=dropped,
        kept_per_type=kept_counts,
    )


def align_to_student(
    teacher_rows: np.ndarray, n: int, teacher_types: int, student_types: int
) -> np.ndarray:
    """Map teacher distributions into the student's larger output space.

    Position slots and old-type slots keep their indices (the registry is
    append-only); the EOS slot moves to the new end; new-type slots receive
    zero mass.
    """
    teacher_width = n + teacher_types + 1
    if teacher_rows.ndim != 2 or teacher_rows.shape[1] != teacher_width:
        raise DistillError(
            f"teacher distributions have width {teacher_rows.shape[-1]}, "
            f"expected n + ek + 1 = {teacher_width}"
        )
    if student_types < teacher_types:
        raise DistillError(
            f"student registry ({student_types} types) does not extend the "
            f"teacher registry ({teacher_types} types)"
        )
    aligned = np.zeros((teacher_rows.shape[0], n + student_types + 1), dtype=teacher_rows.dtype)
    aligned[:, : n + teacher_types] = teacher_rows[:, : n + teacher_types]
    aligned[:, -1] = teacher_rows[:, -1]
    return aligned


def kd_term_from_logprobs(
    student_logprobs: torch.Tensor,
    teacher_probs: torch.Tensor,
    form: str = "kl",
    labels: Sequence[int] | None = None,
) -> torch.Tensor:
    """Distillation term over the pruned prefix given aligned tensors.

    ``kl`` is the soft-label KL divergence averaged over steps; ``ce`` is the
    hard cross entropy on the pseudo-label indices (the ablation form;
    ``labels`` are the pruned sequence indices, defaulting to the teacher's
    argmax when omitted).
    """
    if student_logprobs.shape != teacher_probs.shape:
        raise DistillError(
            f"shape mismatch: student {tuple(student_logprobs.shape)} vs "
            f"teacher {tuple(teacher_probs.shape)}"
        )
    steps = student_logprobs.shape[0]
    if steps == 0:
        return torch.zeros((), dtype=student_logprobs.dtype)
    if form == "kl":
        # Rows are renormalized: float32 storage leaves them summing to
        # 1 +- 1e-7, which would otherwise leak into the divergence.
        teacher_probs = teacher_probs / teacher_probs.sum(dim=-1, keepdim=True)
        # Zero-mass slots contribute nothing; they must be excluded before the
        # subtraction because the student carries -inf log-probs on pad slots.
        support = teacher_probs > 0
        zeros = torch.zeros_like(teacher_probs)
        log_teacher = torch.where(support, torch.log(teacher_probs.clamp(min=1e-45)), zeros)
        safe_student = torch.where(support, student_logprobs, zeros)
        per_step = (teacher_probs * (log_teacher - safe_student)).sum(dim=-1)
        return per_step.sum() / steps
    if form == "ce":
        if labels is not None:
            if len(labels) != steps:
                raise DistillError(
                    f"{len(labels)} pseudo labels for {steps} prefix steps"
                )
            targets = torch.tensor(list(labels), dtype=torch.long)
        else:
            targets = teacher_probs.argmax(dim=-1)
        picked = student_logprobs.gather(-1, targets[:, None]).squeeze(-1)
        return -picked.sum() / steps
    raise DistillError(f"unknown distillation form {form!r} (expected 'kl' or 'ce')")


def kd_loss(
    pruned: PrunedPseudoSequence,
    student: PointerModel,
    enc: EncoderOutput,
    form: str = "kl",
) -> torch.Tensor:
    """Distillation loss of one sentence: student teacher-forced on the prefix.

    The recorded teacher distributions are aligned into the student space and
    compared against the student's step distributions; empty prefixes give 0.
    """
    steps = len(pruned.sequence)
    if steps == 0:
        return torch.zeros(())
    teacher_types = pruned.distributions.shape[1] - student.n - 1
    aligned = align_to_student(
        pruned.distributions, student.n, teacher_types, student.ek
    )
    input_ids = torch.tensor(
        [student._realize_ids(pruned.sequence.indices, enc.token_ids)[:steps]],
        dtype=torch.long,
    )
    batch = BatchEncoderOutput(
        states=enc.states[None], mask=enc.mask[None], token_ids=enc.token_ids[None]
    )
    logits = student.forced_logits(batch, input_ids)[0]
    # The contract-level op reduces in float64 so that a student matching the
    # aligned teacher lands within 1e-8 of zero.
    logprobs = torch.log_softmax(logits.to(torch.float64), dim=-1)
    teacher = torch.from_numpy(aligned).to(dtype=torch.float64)
    return kd_term_from_logprobs(
        logprobs, teacher, form=form, labels=pruned.sequence.indices
    )


def rescore_with_teacher(
    pruned: PrunedPseudoSequence, teacher: PointerModel, enc: EncoderOutput
) -> PrunedPseudoSequence:
    """Replace recorded distributions by teacher-forced scores on the pruned prefix."""
    if len(pruned.sequence) == 0:
        return pruned
    _, dists = teacher.score_sequence(enc, pruned.sequence, teacher.registry)
    pruned.distributions = np.stack([d.probs.numpy() for d in dists]).astype(np.float32)
    return pruned


# ------------------------------------------------------------------ caching


def _encode_array(array: np.ndarray) -> dict:
    payload = zlib.compress(array.astype(np.float32).tobytes())
    return {
        "shape": list(array.shape),
        "data": base64.b64encode(payload).decode("ascii"),
    }


def _decode_array(payload: dict) -> np.ndarray:
    raw = zlib.decompress(base64.b64decode(payload["data"]))
    return np.frombuffer(raw, dtype=np.float32).reshape(payload["shape"]).copy()


def _write_cache(
    path: Path,
    teacher_hash: str | None,
    predictions: Sequence[PseudoPrediction],
    output_size: int,
    n: int,
    registry: EntityTypeRegistry,
    order: TripletOrder,
) -> None:
    roles = TripletOrder(order).roles
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        header = {
            "teacher_hash": teacher_hash,
            "output_size": output_size,
            "order": TripletOrder(order).value,
            "sentence_ids": [p.sentence_id for p in predictions],
        }
        handle.write(json.dumps(header) + "\n")
        for prediction in predictions:
            indices: list[int] = []
            for triplet in prediction.triplets:
                slots = {
                    "start": triplet.start,
                    "end": triplet.end,
                    "type": n + registry.ordinal(triplet.type),
                }
                indices.extend(slots[role] for role in roles)
            record = {
                "sentence_id": prediction.sentence_id,
                "indices": indices,
                "triplets": [[t.start, t.end, t.type] for t in prediction.triplets],
                "confidences": [float(c) for c in prediction.confidences],
                "distributions": _encode_array(prediction.distributions),
            }
            handle.write(json.dumps(record) + "\n")


def _load_cache(
    path: Path, teacher_hash: str | None, sentence_ids: list[str]
) -> list[PseudoPrediction] | None:
    if not path.exists():
        return None
    with open(path, encoding="utf-8") as handle:
        lines = handle.read().splitlines()
    if not lines:
        return None
    header = json.loads(lines[0])
    if header.get("teacher_hash") != teacher_hash or header.get("sentence_ids") != sentence_ids:
        return None
    predictions: list[PseudoPrediction] = []
    for line in lines[1:]:
        record = json.loads(line)
        predictions.append(
            PseudoPrediction(
                sentence_id=record["sentence_id"],
                triplets=[EntityTriplet(s, e, t) for s, e, t in record["triplets"]],
                distributions=_decode_array(record["distributions"]),
                confidences=np.asarray(record["confidences"], dtype=np.float32),
            )
        )
    return predictions
