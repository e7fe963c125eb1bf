"""Per-task optimization and orchestration of the incremental sequence.

The first task trains from scratch with cross entropy only. Every later task
warm-starts from the previous checkpoint, extends the registry with the new
types, builds targets as (pruned pseudo prefix + gold suffix + stop step),
and minimizes alpha * KD + beta * CE. The non-incremental upper bound
retrains from scratch at each step on the union of all train sets with full
annotations of the types seen so far.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import random
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .backbone import BackboneSpec, Vocabulary, seed_everything
from .codec import (
    EntityTypeRegistry,
    TargetSequence,
    TripletOrder,
    concat_targets,
    decode_triplets,
    encode_targets,
)
from .corpus import CLSchedule, CLTask, EntityTriplet, Sentence, restrict_annotations
from .distill import (
    ThresholdTable,
    align_to_student,
    compute_thresholds,
    kd_term_from_logprobs,
    predict_pseudo,
    prune,
    rescore_with_teacher,
)
from .errors import TrainerError
from .losses import ce_term_from_logprobs
from .metrics import StepMetrics, evaluate_step
from .model import PointerModel, checkpoint_hash, load_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    """Hyperparameters of one experiment; every random draw stems from ``seed``."""

    learning_rate: float = 5e-5
    warmup_ratio: float = 0.1
    epochs: int = 10
    batch_size: int = 8
    alpha: float = 1.0  # distillation weight; 0 disables the pseudo pipeline
    beta: float = 0.5  # cross-entropy weight
    composition: TripletOrder = TripletOrder.SET
    ctf: bool = True  # confidence threshold filtering of pseudo triplets
    kd_form: str = "kl"  # {"kl", "ce"}
    seed: int = 13
    max_triplets: int = 8
    constrained_decode: bool = True
    rescore_pruned_teacher: bool = False
    early_stopping: bool = False  # keep the best dev-F1 epoch instead of the last
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    new_type_noise: float = 0.02
    delta_default: float = 0.6
    delta_per_type: dict[str, float] = field(default_factory=dict)
    eval_batch_size: int = 64

    def __post_init__(self) -> None:
        if self.alpha < 0 or self.beta < 0:
            raise TrainerError("loss weights must be nonnegative")
        if self.epochs < 1:
            raise TrainerError("epochs must be at least 1")
        self.composition = TripletOrder(self.composition)
        if self.kd_form not in ("kl", "ce"):
            raise TrainerError(f"unknown kd_form {self.kd_form!r}")

    def delta_for(self, type_name: str) -> float:
        return float(self.delta_per_type.get(type_name, self.delta_default))

    def to_dict(self) -> dict:
        payload = asdict(self)
        payload["composition"] = self.composition.value
        return payload


@dataclass
class TaskRunRecord:
    """Outcome of one training step."""

    step: int
    losses: dict[str, float]  # final-epoch means: kd, ce, total
    checkpoint: str
    pseudo_stats: dict
    wall_time: float
    metrics: StepMetrics | None = None

    def to_dict(self) -> dict:
        payload = {
            "step": self.step,
            "losses": self.losses,
            "checkpoint": self.checkpoint,
            "pseudo_stats": self.pseudo_stats,
            "wall_time": self.wall_time,
        }
        if self.metrics is not None:
            payload["metrics"] = self.metrics.to_dict()
        return payload


@dataclass
class _Example:
    sentence: Sentence
    target: TargetSequence
    teacher_rows: np.ndarray | None = None  # aligned to the student space


def schedule_words(schedule: CLSchedule) -> set[str]:
    """Word inventory for the scratch vocabulary: all train/dev tokens."""
    words: set[str] = set()
    for task in schedule.tasks:
        for part in (task.train, task.dev):
            for sentence in part:
                words.update(sentence.tokens)
    return words


def detect_padded_length(schedule: CLSchedule) -> int:
    """Smallest n covering every sentence in the schedule."""
    longest = 1
    for task in schedule.tasks:
        for part in (task.train, task.dev, task.test):
            for sentence in part:
                longest = max(longest, len(sentence.tokens))
    return longest


def _lr_lambda(total_steps: int, warmup_steps: int):
    def factor(step: int) -> float:
        if warmup_steps > 0 and step < warmup_steps:
            return (step + 1) / warmup_steps
        remaining = max(1, total_steps - warmup_steps)
        return max(0.0, (total_steps - step) / remaining)

    return factor


def _batch_loss(
    model: PointerModel,
    batch: Sequence[_Example],
    alpha: float,
    beta: float,
    kd_form: str,
) -> tuple[torch.Tensor, float, float]:
    """Mean per-sentence loss over one batch, teacher-forced in one pass."""
    enc = model.encode_batch([ex.sentence for ex in batch])
    realized = [
        model._realize_ids(ex.target.indices, enc.token_ids[row])
        for row, ex in enumerate(batch)
    ]
    width = max(len(ids) for ids in realized)
    input_ids = torch.full(
        (len(batch), width), model.vocab.pad_id, dtype=torch.long
    )
    for row, ids in enumerate(realized):
        input_ids[row, : len(ids)] = torch.tensor(ids, dtype=torch.long)
    logits = model.forced_logits(enc, input_ids)
    logprobs = torch.log_softmax(logits, dim=-1)
    totals: list[torch.Tensor] = []
    kd_sum = 0.0
    ce_sum = 0.0
    for row, example in enumerate(batch):
        prefix_len = example.target.pseudo_len
        kd_term = torch.zeros((), dtype=logprobs.dtype)
        if alpha != 0 and example.teacher_rows is not None and prefix_len > 0:
            teacher = torch.from_numpy(example.teacher_rows).to(dtype=logprobs.dtype)
            kd_term = kd_term_from_logprobs(
                logprobs[row, :prefix_len], teacher, form=kd_form,
                labels=example.target.pseudo_indices,
            )
        ce_term = ce_term_from_logprobs(
            logprobs[row], example.target, model.eos_output_index
        )
        totals.append(alpha * kd_term + beta * ce_term)
        kd_sum += float(kd_term.detach())
        ce_sum += float(ce_term.detach())
    loss = torch.stack(totals).mean()
    return loss, kd_sum / len(batch), ce_sum / len(batch)


def _train_epochs(
    model: PointerModel,
    examples: Sequence[_Example],
    config: TrainConfig,
    alpha: float,
    beta: float,
    label: str,
    dev: Sequence[Sentence] = (),
    dev_types: Sequence[str] = (),
) -> dict[str, float]:
    """Run the per-task optimization; returns final-epoch loss means."""
    if not examples:
        raise TrainerError(f"{label}: no training examples")
    model.train()
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay
    )
    steps_per_epoch = math.ceil(len(examples) / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    warmup_steps = int(round(config.warmup_ratio * total_steps))
    scheduler = torch.optim.lr_scheduler.LambdaLR(
        optimizer, _lr_lambda(total_steps, warmup_steps)
    )
    shuffler = random.Random(config.seed * 7919 + len(examples))
    best_state: dict | None = None
    best_dev = -1.0
    summary = {"kd": 0.0, "ce": 0.0, "total": 0.0}
    for epoch in range(config.epochs):
        order = list(range(len(examples)))
        shuffler.shuffle(order)
        kd_total = ce_total = loss_total = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = [examples[i] for i in order[start : start + config.batch_size]]
            loss, kd_val, ce_val = _batch_loss(model, batch, alpha, beta, config.kd_form)
            optimizer.zero_grad()
            loss.backward()
            if config.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            optimizer.step()
            scheduler.step()
            kd_total += kd_val * len(batch)
            ce_total += ce_val * len(batch)
            loss_total += float(loss.detach()) * len(batch)
        summary = {
            "kd": kd_total / len(examples),
            "ce": ce_total / len(examples),
            "total": loss_total / len(examples),
        }
        logger.info(
            "%s | epoch %d/%d | kd %.4f | ce %.4f | loss %.4f",
            label, epoch + 1, config.epochs, summary["kd"], summary["ce"], summary["total"],
        )
        if config.early_stopping and dev:
            dev_metrics = evaluate_model(model, dev, dev_types, config)
            model.train()
            if dev_metrics.macro_f1 > best_dev:
                best_dev = dev_metrics.macro_f1
                best_state = copy.deepcopy(model.state_dict())
    if best_state is not None:
        model.load_state_dict(best_state)
    return summary


def predict_entities(
    model: PointerModel, sentences: Sequence[Sentence], config: TrainConfig
) -> list[list[EntityTriplet]]:
    """Decode entity triplets for a list of sentences."""
    model.eval()
    predictions: list[list[EntityTriplet]] = []
    for start in range(0, len(sentences), config.eval_batch_size):
        batch = sentences[start : start + config.eval_batch_size]
        enc = model.encode_batch(batch)
        sequences, _ = model.generate_batch(
            enc, config.max_triplets, config.constrained_decode
        )
        for sequence in sequences:
            decoded = decode_triplets(
                sequence.indices, model.n, model.registry, model.order
            )
            predictions.append(decoded.triplets)
    return predictions


def evaluate_model(
    model: PointerModel,
    sentences: Sequence[Sentence],
    seen_types: Sequence[str],
    config: TrainConfig,
    step: int = 0,
    coarse_of: dict[str, str] | None = None,
) -> StepMetrics:
    """Entity-level scores of the model's decoded triplets on a test set."""
    predictions = predict_entities(model, sentences, config)
    golds = [list(s.entities) for s in sentences]
    return evaluate_step(step, golds, predictions, seen_types, coarse_of)


def _gold_target(
    sentence: Sentence, n: int, registry: EntityTypeRegistry, order: TripletOrder
) -> TargetSequence:
    return encode_targets(sentence.entities, n, registry, order)


def _build_incremental_examples(
    task: CLTask,
    model: PointerModel,
    teacher: PointerModel | None,
    teacher_hash: str | None,
    config: TrainConfig,
    run_dir: Path | None,
) -> tuple[list[_Example], dict]:
    """Targets for one incremental task: pruned pseudo prefix + gold suffix."""
    n, order = model.n, model.order
    gold = [_gold_target(s, n, model.registry, order) for s in task.train]
    if teacher is None:
        return [_Example(s, g) for s, g in zip(task.train, gold)], {}

    old_types = teacher.registry.types
    cache_path = (
        run_dir / "pseudo_cache" / f"step{task.index}_train.jsonl" if run_dir else None
    )
    predictions = predict_pseudo(
        teacher,
        task.train,
        max_triplets=config.max_triplets,
        constrained=config.constrained_decode,
        expected_types=old_types,
        cache_path=cache_path,
        teacher_hash=teacher_hash,
    )
    if config.ctf:
        configured = {t: config.delta_for(t) for t in old_types}
        thresholds = compute_thresholds(predictions, configured, old_types)
    else:
        # Ablation: keep every pseudo triplet (thresholds that nothing undercuts).
        thresholds = ThresholdTable(
            configured={t: 0.0 for t in old_types},
            effective={t: 0.0 for t in old_types},
            prediction_counts={t: 0 for t in old_types},
        )
    kept: dict[str, int] = {}
    dropped: dict[str, int] = {}
    examples: list[_Example] = []
    for sentence, gold_target, prediction in zip(task.train, gold, predictions):
        pruned = prune(prediction, thresholds, n, teacher.registry, order)
        if config.rescore_pruned_teacher and len(pruned.sequence):
            rescore_with_teacher(pruned, teacher, teacher.encode(sentence))
        for name, count in pruned.kept_per_type.items():
            kept[name] = kept.get(name, 0) + count
        for name, count in pruned.dropped_per_type.items():
            dropped[name] = dropped.get(name, 0) + count
        rows = align_to_student(pruned.distributions, n, teacher.ek, model.ek)
        examples.append(
            _Example(
                sentence=sentence,
                target=concat_targets(pruned.sequence, gold_target),
                teacher_rows=rows,
            )
        )
    stats = {
        "kept_per_type": dict(sorted(kept.items())),
        "dropped_per_type": dict(sorted(dropped.items())),
        "thresholds": thresholds.to_dict(),
        "pseudo_triplets_in_targets": int(sum(kept.values())),
    }
    if run_dir is not None:
        path = run_dir / "thresholds" / f"step{task.index}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(thresholds.to_dict(), indent=2), encoding="utf-8")
    return examples, stats


def _check_target_capacity(spec: BackboneSpec, examples: Sequence[_Example]) -> None:
    longest = max((len(ex.target) for ex in examples), default=0)
    if longest + 1 > spec.max_target_len + 1:
        raise TrainerError(
            f"longest target ({longest} indices) exceeds decoder capacity "
            f"max_target_len={spec.max_target_len}"
        )


def train_task(
    k: int,
    schedule: CLSchedule,
    teacher_ckpt: str | Path | None,
    config: TrainConfig,
    spec: BackboneSpec,
    n: int,
    run_dir: str | Path | None = None,
    vocab_words: set[str] | None = None,
) -> tuple[PointerModel, TaskRunRecord]:
    """Train the model for step k and save its checkpoint.

    Step 1 starts from scratch and needs no teacher; later steps warm-start
    from the previous checkpoint, extend the registry, and train against
    pseudo-prefixed targets.
    """
    if not 1 <= k <= len(schedule.tasks):
        raise TrainerError(f"step {k} outside schedule of {len(schedule.tasks)} tasks")
    task = schedule.tasks[k - 1]
    run_dir = Path(run_dir) if run_dir is not None else None
    started = time.time()
    seed_everything(config.seed + 1000 * k)

    teacher: PointerModel | None = None
    teacher_hash: str | None = None
    if k == 1:
        if teacher_ckpt is not None:
            raise TrainerError("step 1 trains from scratch; no teacher expected")
        words = vocab_words if vocab_words is not None else schedule_words(schedule)
        registry = EntityTypeRegistry(task.new_types, coarse_of=schedule.coarse_of)
        vocab = Vocabulary(words, type_names=registry.types)
        model = PointerModel(spec, vocab, registry, n, config.composition)
    else:
        if teacher_ckpt is None:
            raise TrainerError(f"step {k} needs the step {k - 1} checkpoint")
        teacher, teacher_step = load_checkpoint(teacher_ckpt)
        if teacher_step != k - 1:
            raise TrainerError(
                f"teacher checkpoint is for step {teacher_step}, expected {k - 1}"
            )
        if teacher.order != config.composition:
            raise TrainerError(
                f"teacher uses composition {teacher.order.value}, config says "
                f"{config.composition.value}; the order is fixed per experiment"
            )
        expected = schedule.seen_types(k - 1)
        if teacher.registry.types != expected:
            raise TrainerError(
                f"teacher registry {teacher.registry.types} does not cover the "
                f"types seen through step {k - 1}: {expected}"
            )
        teacher_hash = checkpoint_hash(teacher_ckpt)
        teacher.eval()
        model = copy.deepcopy(teacher)
        model.extend_types(task.new_types, noise_std=config.new_type_noise)

    distilling = teacher is not None and config.alpha > 0
    examples, pseudo_stats = _build_incremental_examples(
        task, model, teacher if distilling else None, teacher_hash, config, run_dir
    )
    _check_target_capacity(spec, examples)
    alpha, beta = (0.0, 1.0) if k == 1 else (config.alpha, config.beta)
    losses = _train_epochs(
        model,
        examples,
        config,
        alpha,
        beta,
        label=f"step {k}",
        dev=task.dev,
        dev_types=task.new_types,
    )
    checkpoint_dir = (
        run_dir / "checkpoints" / f"step{k}" if run_dir else Path(f"step{k}")
    )
    if run_dir is not None:
        save_checkpoint(model, checkpoint_dir, k)
    record = TaskRunRecord(
        step=k,
        losses=losses,
        checkpoint=str(checkpoint_dir),
        pseudo_stats=pseudo_stats,
        wall_time=time.time() - started,
    )
    return model, record


def _write_record(run_dir: Path, record: TaskRunRecord) -> None:
    path = run_dir / "records" / f"step{record.step}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(record.to_dict(), indent=2), encoding="utf-8")


def _write_metrics(run_dir: Path, metrics: StepMetrics) -> None:
    path = run_dir / "metrics" / f"step{metrics.step}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(metrics.to_dict(), indent=2), encoding="utf-8")


def _load_resumed_record(run_dir: Path, k: int) -> TaskRunRecord | None:
    record_path = run_dir / "records" / f"step{k}.json"
    sidecar = run_dir / "checkpoints" / f"step{k}" / "sidecar.json"
    if not (record_path.exists() and sidecar.exists()):
        return None
    payload = json.loads(record_path.read_text(encoding="utf-8"))
    metrics = None
    if "metrics" in payload:
        m = payload["metrics"]
        metrics = StepMetrics(
            step=m["step"],
            per_type=m["per_type"],
            macro_f1=m["macro_f1"],
            coarse_macro_f1=m.get("coarse_macro_f1"),
            gap=m.get("gap"),
        )
    return TaskRunRecord(
        step=payload["step"],
        losses=payload["losses"],
        checkpoint=payload["checkpoint"],
        pseudo_stats=payload["pseudo_stats"],
        wall_time=payload["wall_time"],
        metrics=metrics,
    )


def run_cl_sequence(
    schedule: CLSchedule,
    config: TrainConfig,
    spec: BackboneSpec,
    run_dir: str | Path,
    n: int | None = None,
) -> list[TaskRunRecord]:
    """Train tasks 1..l sequentially, evaluating after each step.

    Completed steps found in the run directory are reused, so an interrupted
    run resumes from the last finished checkpoint.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    n = n if n is not None else detect_padded_length(schedule)
    words = schedule_words(schedule)
    records: list[TaskRunRecord] = []
    teacher_ckpt: Path | None = None
    for k in range(1, len(schedule.tasks) + 1):
        task = schedule.tasks[k - 1]
        resumed = _load_resumed_record(run_dir, k)
        if resumed is not None:
            logger.info("step %d already complete; resuming past it", k)
            records.append(resumed)
            teacher_ckpt = run_dir / "checkpoints" / f"step{k}"
            continue
        try:
            model, record = train_task(
                k, schedule, teacher_ckpt, config, spec, n, run_dir, vocab_words=words
            )
        except TrainerError as exc:
            raise TrainerError(f"step {k}: {exc}") from exc
        record.metrics = evaluate_model(
            model,
            task.test,
            schedule.seen_types(k),
            config,
            step=k,
            coarse_of=schedule.coarse_of or None,
        )
        logger.info(
            "step %d | test macro F1 %.4f over %d types",
            k, record.metrics.macro_f1, len(schedule.seen_types(k)),
        )
        _write_record(run_dir, record)
        _write_metrics(run_dir, record.metrics)
        records.append(record)
        teacher_ckpt = run_dir / "checkpoints" / f"step{k}"
    return records


def run_noncl_upperbound(
    schedule: CLSchedule,
    config: TrainConfig,
    spec: BackboneSpec,
    run_dir: str | Path,
    n: int | None = None,
) -> list[TaskRunRecord]:
    """Upper bound: retrain from scratch at each step on all data seen so far.

    Step k unions the train sets of tasks 1..k, re-annotated for every type
    seen through step k, and trains with cross entropy only.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    n = n if n is not None else detect_padded_length(schedule)
    words = schedule_words(schedule)
    records: list[TaskRunRecord] = []
    for k in range(1, len(schedule.tasks) + 1):
        task = schedule.tasks[k - 1]
        resumed = _load_resumed_record(run_dir, k)
        if resumed is not None:
            logger.info("non-incremental step %d already complete; skipping", k)
            records.append(resumed)
            continue
        started = time.time()
        seed_everything(config.seed + 1000 * k)
        seen = schedule.seen_types(k)
        registry = EntityTypeRegistry(seen, coarse_of=schedule.coarse_of)
        vocab = Vocabulary(words, type_names=registry.types)
        model = PointerModel(spec, vocab, registry, n, config.composition)
        sentences = [
            restrict_annotations(s, seen)
            for earlier in schedule.tasks[:k]
            for s in earlier.train_full
        ]
        examples = [
            _Example(s, _gold_target(s, n, registry, config.composition))
            for s in sentences
        ]
        _check_target_capacity(spec, examples)
        losses = _train_epochs(
            model, examples, config, alpha=0.0, beta=1.0, label=f"non-incremental step {k}"
        )
        checkpoint_dir = run_dir / "checkpoints" / f"step{k}"
        save_checkpoint(model, checkpoint_dir, k)
        record = TaskRunRecord(
            step=k,
            losses=losses,
            checkpoint=str(checkpoint_dir),
            pseudo_stats={},
            wall_time=time.time() - started,
            metrics=evaluate_model(
                model,
                task.test,
                seen,
                config,
                step=k,
                coarse_of=schedule.coarse_of or None,
            ),
        )
        logger.info(
            "non-incremental step %d | test macro F1 %.4f", k, record.metrics.macro_f1
        )
        _write_record(run_dir, record)
        _write_metrics(run_dir, record.metrics)
        records.append(record)
    return records
