import json
import math

import pytest
import torch

from tripner.backbone import BackboneSpec
from tripner.codec import TargetSequence, encode_targets
from tripner.corpus import EntityTriplet, Sentence, make_schedule
from tripner.errors import TrainerError
from tripner.losses import ce_loss, ce_term_from_logprobs, total_loss
from tripner.model import load_checkpoint
from tripner.synth import SynthSpec, generate_corpus
from tripner.trainer import (
    TrainConfig,
    detect_padded_length,
    evaluate_model,
    run_cl_sequence,
    run_noncl_upperbound,
    train_task,
)

from conftest import make_tiny_model


def small_world(train_size=60, dev_size=12, test_size=30, types=2, seed=3):
    names = ("ALPHA", "BETA", "GAMMA")[:types]
    corpus = generate_corpus(
        SynthSpec(
            type_names=names,
            train_size=train_size,
            dev_size=dev_size,
            test_size=test_size,
            seed=seed,
        )
    )
    schedule = make_schedule(
        corpus, [(t,) for t in names], "split", "all", seed=21
    )
    spec = BackboneSpec(hidden_dim=32, heads=4, max_target_len=40)
    return schedule, spec


def fast_config(**overrides):
    base = dict(
        learning_rate=1e-3, epochs=2, batch_size=8, seed=5, max_triplets=5,
    )
    base.update(overrides)
    return TrainConfig(**base)


class TestCELoss:
    def test_perfect_student_has_zero_loss(self):
        logprobs = torch.full((4, 6), -30.0)
        target = TargetSequence((0, 1, 4), n=3, ground_len=3)
        for step, label in enumerate(target.indices):
            logprobs[step, label] = 0.0
        assert float(ce_term_from_logprobs(logprobs, target)) == pytest.approx(0.0)

    def test_uniform_student_scores_log_vocab(self, sample_sentence):
        model = make_tiny_model()
        with torch.no_grad():
            for parameter in model.parameters():
                parameter.zero_()
        full_length = Sentence(id="full", tokens=tuple(f"w{i}" for i in range(10)),
                               entities=(EntityTriplet(0, 0, "A"),))
        enc = model.encode(full_length)
        target = encode_targets(full_length.entities, 10, model.registry)
        value = float(ce_loss(target, model, enc).detach())
        assert value == pytest.approx(math.log(13), abs=1e-5)  # n + ek + 1 slots

    def test_hand_computed_fixture(self):
        # Per-step gold probabilities (0.5, 0.25, 0.125):
        # loss = (log 2 + log 4 + log 8) / 3 ~= 1.386.
        logprobs = torch.full((3, 5), -40.0, dtype=torch.float64)
        target = TargetSequence((0, 2, 4), n=3, ground_len=3)
        for step, (label, p) in enumerate(zip(target.indices, (0.5, 0.25, 0.125))):
            logprobs[step, label] = math.log(p)
        value = float(ce_term_from_logprobs(logprobs, target))
        assert value == pytest.approx((math.log(2) + math.log(4) + math.log(8)) / 3)
        assert value == pytest.approx(1.386, abs=1e-3)

    def test_eos_step_included_when_requested(self):
        logprobs = torch.full((4, 6), math.log(0.5), dtype=torch.float64)
        target = TargetSequence((0, 1, 4), n=3, ground_len=3)
        with_eos = float(ce_term_from_logprobs(logprobs, target, eos_index=5))
        without = float(ce_term_from_logprobs(logprobs, target))
        assert with_eos == pytest.approx(without)  # uniform rows: same mean
        short = torch.full((3, 6), 0.0)
        with pytest.raises(TrainerError):
            ce_term_from_logprobs(short, target, eos_index=5)

    def test_only_ground_suffix_counts(self):
        logprobs = torch.full((6, 8), -40.0, dtype=torch.float64)
        target = TargetSequence((0, 1, 6, 2, 2, 7), n=5, pseudo_len=3, ground_len=3)
        for step, label in enumerate(target.indices):
            logprobs[step, label] = math.log(0.5) if step >= 3 else -40.0
        value = float(ce_term_from_logprobs(logprobs, target))
        assert value == pytest.approx(math.log(2))

    def test_out_of_vocabulary_index_raises(self):
        logprobs = torch.zeros((3, 4))
        target = TargetSequence((0, 1, 9), n=3, ground_len=3)
        with pytest.raises(TrainerError):
            ce_term_from_logprobs(logprobs, target)

    def test_empty_target_without_eos_is_zero(self, sample_sentence):
        model = make_tiny_model()
        enc = model.encode(sample_sentence)
        assert float(ce_loss(TargetSequence.empty(10), model, enc)) == 0.0

    def test_empty_target_with_eos_trains_the_stop_step(self, sample_sentence):
        model = make_tiny_model()
        enc = model.encode(sample_sentence)
        value = ce_loss(TargetSequence.empty(10), model, enc, include_eos_step=True)
        assert float(value.detach()) > 0.0


class TestTotalLoss:
    def test_weighted_sum(self):
        assert float(total_loss(0.2, 1.0, alpha=1.0, beta=0.5)) == pytest.approx(0.7)

    def test_alpha_zero_is_pure_ce(self):
        assert float(total_loss(123.0, 2.0, alpha=0.0, beta=1.0)) == pytest.approx(2.0)

    def test_zero_components(self):
        assert float(total_loss(0.0, 0.0, alpha=1.0, beta=0.5)) == 0.0

    def test_linear_in_each_component(self):
        a = float(total_loss(1.0, 0.0, alpha=0.7, beta=0.3))
        b = float(total_loss(2.0, 0.0, alpha=0.7, beta=0.3))
        assert b == pytest.approx(2 * a)


class TestTrainTask:
    def test_learning_reduces_cross_entropy(self):
        schedule, spec = small_world()
        n = detect_padded_length(schedule)
        _, short = train_task(1, schedule, None, fast_config(epochs=1), spec, n)
        _, longer = train_task(1, schedule, None, fast_config(epochs=5), spec, n)
        assert longer.losses["ce"] < short.losses["ce"]

    def test_step_one_rejects_a_teacher(self, tmp_path):
        schedule, spec = small_world()
        with pytest.raises(TrainerError):
            train_task(1, schedule, tmp_path, fast_config(), spec, 12)

    def test_later_step_requires_teacher(self):
        schedule, spec = small_world()
        with pytest.raises(TrainerError, match="step 2"):
            train_task(2, schedule, None, fast_config(), spec, 12)

    def test_ctf_off_keeps_every_pseudo_triplet(self, tmp_path):
        schedule, spec = small_world()
        n = detect_padded_length(schedule)
        config = fast_config()
        train_task(1, schedule, None, config, spec, n, run_dir=tmp_path / "a")
        ckpt = tmp_path / "a" / "checkpoints" / "step1"
        _, with_ctf = train_task(
            2, schedule, ckpt, config, spec, n, run_dir=tmp_path / "a"
        )
        no_ctf = fast_config(ctf=False)
        _, without = train_task(
            2, schedule, ckpt, no_ctf, spec, n, run_dir=tmp_path / "b"
        )
        assert sum(without.pseudo_stats["dropped_per_type"].values()) == 0
        assert (
            without.pseudo_stats["pseudo_triplets_in_targets"]
            >= with_ctf.pseudo_stats["pseudo_triplets_in_targets"]
        )

    def test_early_stopping_keeps_best_dev_epoch(self, tmp_path):
        schedule, spec = small_world()
        n = detect_padded_length(schedule)
        config = fast_config(epochs=3, early_stopping=True)
        model, record = train_task(1, schedule, None, config, spec, n)
        dev_metrics = evaluate_model(
            model, schedule.tasks[0].dev, schedule.tasks[0].new_types, config
        )
        assert 0.0 <= dev_metrics.macro_f1 <= 1.0
        assert record.losses["ce"] > 0

    def test_warm_start_preserves_old_vocabulary_distributions(self, tmp_path):
        schedule, spec = small_world()
        n = detect_padded_length(schedule)
        config = fast_config()
        model1, _ = train_task(
            1, schedule, None, config, spec, n, run_dir=tmp_path / "run"
        )
        teacher, _ = load_checkpoint(tmp_path / "run" / "checkpoints" / "step1")
        import copy

        student = copy.deepcopy(teacher)
        student.extend_types(schedule.tasks[1].new_types)
        sentence = schedule.tasks[1].train[0]
        enc_t = teacher.encode(sentence)
        enc_s = student.encode(sentence)
        dist_t = teacher.decode_step(enc_t, TargetSequence.empty(n), teacher.registry)
        dist_s = student.decode_step(enc_s, TargetSequence.empty(n), student.registry)
        old = n + teacher.ek  # positions plus old types keep their slots
        ratio_t = dist_t.probs[:old] / dist_t.probs[:old].sum()
        ratio_s = dist_s.probs[:old] / dist_s.probs[:old].sum()
        assert torch.allclose(ratio_t, ratio_s, atol=1e-6)


class TestRunSequences:
    def test_single_task_schedule_matches_upper_bound(self, tmp_path):
        schedule, spec = small_world(types=1)
        config = fast_config()
        cl = run_cl_sequence(schedule, config, spec, tmp_path / "cl")
        ub = run_noncl_upperbound(schedule, config, spec, tmp_path / "ub")
        assert cl[0].metrics.macro_f1 == ub[0].metrics.macro_f1
        assert cl[0].losses == ub[0].losses

    def test_deterministic_metric_tables(self, tmp_path):
        schedule, spec = small_world()
        config = fast_config()
        a = run_cl_sequence(schedule, config, spec, tmp_path / "a")
        b = run_cl_sequence(schedule, config, spec, tmp_path / "b")
        assert [r.metrics.to_dict() for r in a] == [r.metrics.to_dict() for r in b]
        assert [r.losses for r in a] == [r.losses for r in b]

    def test_resume_skips_completed_steps_and_agrees(self, tmp_path):
        schedule, spec = small_world()
        config = fast_config()
        first = run_cl_sequence(schedule, config, spec, tmp_path / "r")
        records_dir = tmp_path / "r" / "records"
        step2 = json.loads((records_dir / "step2.json").read_text())
        (records_dir / "step2.json").unlink()  # simulate an interrupted run
        second = run_cl_sequence(schedule, config, spec, tmp_path / "r")
        assert [r.metrics.to_dict() for r in first] == [
            r.metrics.to_dict() for r in second
        ]
        assert json.loads((records_dir / "step2.json").read_text())["losses"] == step2[
            "losses"
        ]

    def test_noncl_step_one_equals_cl_step_one(self, tmp_path):
        schedule, spec = small_world()
        config = fast_config()
        cl = run_cl_sequence(schedule, config, spec, tmp_path / "cl")
        ub = run_noncl_upperbound(schedule, config, spec, tmp_path / "ub")
        assert cl[0].metrics.to_dict() == ub[0].metrics.to_dict()

    def test_retention_with_overfit_teacher_on_two_tasks(self, tmp_path):
        # Two-task oracle: the step-2 student must still decode old-type
        # entities on held-out sentences whose gold triplets are known by
        # construction.
        schedule, spec = small_world(train_size=80, test_size=40)
        config = fast_config(epochs=6)
        records = run_cl_sequence(schedule, config, spec, tmp_path / "run")
        student, _ = load_checkpoint(tmp_path / "run" / "checkpoints" / "step2")
        probes = [
            s for s in schedule.tasks[1].test
            if any(e.type == "ALPHA" for e in s.entities)
        ][:20]
        metrics = evaluate_model(student, probes, ("ALPHA",), config, step=2)
        assert metrics.per_type["ALPHA"]["tp"] > 0
        assert records[1].pseudo_stats["pseudo_triplets_in_targets"] > 0


class TestConfigValidation:
    def test_negative_weights_rejected(self):
        with pytest.raises(TrainerError):
            TrainConfig(alpha=-0.1)

    def test_zero_epochs_rejected(self):
        with pytest.raises(TrainerError):
            TrainConfig(epochs=0)

    def test_unknown_kd_form_rejected(self):
        with pytest.raises(TrainerError):
            TrainConfig(kd_form="mse")

    def test_per_type_delta_lookup(self):
        config = TrainConfig(delta_default=0.5, delta_per_type={"X": 0.9})
        assert config.delta_for("X") == 0.9
        assert config.delta_for("Y") == 0.5
