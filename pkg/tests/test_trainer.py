"""Tests for schedules, the training loop, checkpoints, and resume."""

import math

import numpy as np
import pytest

from conftest import make_tiny_spec, split_per_speaker
from svkit.model import (
    AuxBranchSpec,
    build_model,
    extract_embedding,
    load_checkpoint,
)
from svkit.trainer import (
    DivergenceError,
    TrainConfig,
    schedule_lr,
    schedule_task_weight,
    resume_training,
    train,
    validate,
)


def tiny_config(**kw):
    base = dict(variant="baseline", epochs=2, batch_size=4,
                crop_range=(15, 20), lr_initial=0.01, lr_final=0.001,
                weight_decay=1e-4, seed=7, validation_cap=40)
    base.update(kw)
    return TrainConfig(**base)


def params_bytes(model):
    return b"".join(p.values.tobytes() for p in model.params.values())


class TestTrainConfig:
    def test_rejects_bad_values(self):
        with pytest.raises(ValueError):
            tiny_config(variant="gan")
        with pytest.raises(ValueError):
            tiny_config(batch_size=1)
        with pytest.raises(ValueError):
            tiny_config(task_weight_factor=0.0)
        with pytest.raises(ValueError):
            tiny_config(task_weight_floor=0.0)
        with pytest.raises(ValueError):
            tiny_config(patience=0)

    def test_round_trips_through_dict(self):
        cfg = tiny_config(variant="gncn", task_weight_initial=0.2)
        d = cfg.to_dict()
        assert d["crop_range"] == [15, 20]
        assert TrainConfig(**d).to_dict() == d


class TestLrSchedule:
    def test_endpoints_are_exact(self):
        assert schedule_lr(0, 100, 0.001, 0.0001) == 0.001
        assert schedule_lr(100, 100, 0.001, 0.0001) == 0.0001

    def test_midpoint_is_geometric_mean(self):
        mid = schedule_lr(50, 100, 0.001, 0.0001)
        np.testing.assert_allclose(mid, math.sqrt(0.001 * 0.0001), rtol=1e-12)

    def test_monotone_decreasing(self):
        lrs = [schedule_lr(i, 20, 0.01, 0.001) for i in range(21)]
        assert all(a > b for a, b in zip(lrs, lrs[1:]))

    def test_rejects_out_of_range_step(self):
        with pytest.raises(ValueError):
            schedule_lr(-1, 10, 0.1, 0.01)
        with pytest.raises(ValueError):
            schedule_lr(11, 10, 0.1, 0.01)


class TestTaskWeightSchedule:
    def test_improving_history_keeps_weight(self):
        assert schedule_task_weight([3.0, 2.0, 1.0], 0.1) == 0.1

    def test_stall_halves_weight(self):
        got = schedule_task_weight([2.0, 1.0, 1.0], 0.1, factor=0.5,
                                   patience=1)
        np.testing.assert_allclose(got, 0.05, rtol=1e-15)

    def test_patience_two_needs_two_flat_epochs(self):
        assert schedule_task_weight([2.0, 1.0, 1.1], 0.1, patience=2) == 0.1
        got = schedule_task_weight([2.0, 1.0, 1.1, 1.05], 0.1, patience=2)
        assert got == 0.05

    def test_floor_clamps_decay(self):
        got = schedule_task_weight([1.0, 1.0], 0.0015, factor=0.5,
                                   floor=1e-3)
        assert got == 1e-3

    def test_zero_weight_stays_zero(self):
        assert schedule_task_weight([1.0, 1.0, 1.0], 0.0) == 0.0


class TestTrainingLoop:
    def test_baseline_runs_and_logs(self, tiny_corpus, tmp_path):
        train_seqs, val_seqs = split_per_speaker(tiny_corpus)
        model = build_model(make_tiny_spec(), seed=1)
        cfg = tiny_config()
        ck = tmp_path / "ck.xvck"
        log = train(model, train_seqs, val_seqs, cfg, checkpoint_path=ck)
        steps_per_epoch = len(train_seqs) // cfg.batch_size
        assert len(log.steps) == cfg.epochs * steps_per_epoch
        assert len(log.epochs) == cfg.epochs
        assert all(s.aux == 0.0 for s in log.steps)
        assert ck.exists()
        _, opt, progress = load_checkpoint(ck)
        assert progress["epoch"] == cfg.epochs
        assert opt.t == len(log.steps)

    def test_loss_moves_toward_fit_on_easy_data(self, tiny_corpus):
        train_seqs, val_seqs = split_per_speaker(tiny_corpus)
        model = build_model(make_tiny_spec(), seed=2)
        cfg = tiny_config(epochs=8, lr_initial=0.02, lr_final=0.005)
        log = train(model, train_seqs, val_seqs, cfg)
        first = log.epochs[0].mean_ce
        last = log.epochs[-1].mean_ce
        assert last < first
        assert last < math.log(6)  # beats the uniform-guess loss

    def test_same_config_reproduces_bitwise(self, tiny_corpus):
        train_seqs, val_seqs = split_per_speaker(tiny_corpus)
        outs = []
        logs = []
        for _ in range(2):
            model = build_model(make_tiny_spec(), seed=3)
            log = train(model, train_seqs, val_seqs, tiny_config())
            outs.append(params_bytes(model))
            logs.append([(s.ce, s.total, s.learning_rate) for s in log.steps])
        assert outs[0] == outs[1]
        assert logs[0] == logs[1]

    def test_gtm_variant_trains_bias_free_classifier(self, tiny_corpus):
        train_seqs, val_seqs = split_per_speaker(tiny_corpus)
        model = build_model(make_tiny_spec(classifier_bias=False), seed=4)
        cfg = tiny_config(variant="gtm", gtm_alpha=0.05)
        log = train(model, train_seqs, val_seqs, cfg)
        assert "classifier.bias" not in model.params
        assert all(s.aux > 0.0 for s in log.steps)
        assert all(s.task_weight == 0.05 for s in log.steps)
        # total is ce + alpha * regularizer at every step
        for s in log.steps:
            np.testing.assert_allclose(s.total, s.ce + 0.05 * s.aux,
                                       rtol=1e-12)

    def test_gncn_variant_regresses_noise_targets(self, tiny_corpus):
        train_seqs, val_seqs = split_per_speaker(tiny_corpus)
        aux = AuxBranchSpec(mode="f1", tap="fc", projection_dim=6)
        model = build_model(make_tiny_spec(), aux, seed=5)
        cfg = tiny_config(variant="gncn", task_weight_initial=0.1)
        log = train(model, train_seqs, val_seqs, cfg)
        assert all(s.aux > 0.0 for s in log.steps)
        assert log.steps[0].task_weight == 0.1
        for s in log.steps:
            np.testing.assert_allclose(s.total, s.ce + s.task_weight * s.aux,
                                       rtol=1e-12)
        # the decayed weight for the next epoch is recorded per epoch
        assert all(e.task_weight_next <= 0.1 for e in log.epochs)

    def test_gncn_requires_aux_model(self, tiny_corpus):
        train_seqs, val_seqs = split_per_speaker(tiny_corpus)
        model = build_model(make_tiny_spec(), seed=6)
        with pytest.raises(ValueError):
            train(model, train_seqs, val_seqs, tiny_config(variant="gncn"))

    def test_zero_task_weight_reproduces_baseline_bitwise(self, tiny_corpus):
        train_seqs, val_seqs = split_per_speaker(tiny_corpus)
        base = build_model(make_tiny_spec(), seed=7)
        base_log = train(base, train_seqs, val_seqs, tiny_config())
        aux = AuxBranchSpec(mode="f1", tap="bn", projection_dim=6)
        gncn = build_model(make_tiny_spec(), aux, seed=7)
        gncn_log = train(gncn, train_seqs, val_seqs,
                         tiny_config(variant="gncn", task_weight_initial=0.0))
        for name, p in base.params.items():
            np.testing.assert_array_equal(p.values, gncn.params[name].values,
                                          err_msg=name)
        assert [s.ce for s in base_log.steps] == \
            [s.ce for s in gncn_log.steps]

    def test_unknown_validation_speaker_rejected(self, tiny_corpus):
        from svkit.corpus import FeatureSequence
        train_seqs, val_seqs = split_per_speaker(tiny_corpus)
        odd = FeatureSequence("odd", "nobody", val_seqs[0].frames)
        model = build_model(make_tiny_spec(), seed=8)
        with pytest.raises(ValueError):
            train(model, train_seqs, [odd], tiny_config())

    def test_divergence_reports_step(self, tiny_corpus):
        train_seqs, val_seqs = split_per_speaker(tiny_corpus)
        model = build_model(make_tiny_spec(), seed=9)
        # any product with a frame feature overflows float64 right away
        model.params["frame1.kernel"].values = np.full((5, 6, 8), 1e308)
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(DivergenceError) as info:
                train(model, train_seqs, val_seqs, tiny_config())
        assert info.value.step == 1


class TestValidate:
    def test_untrained_model_scores_near_chance(self, tiny_corpus):
        train_seqs, val_seqs = split_per_speaker(tiny_corpus)
        model = build_model(make_tiny_spec(), seed=10)
        label_map = {s: i for i, s in
                     enumerate(sorted({q.speaker_id for q in tiny_corpus}))}
        ce, acc = validate(model, val_seqs, label_map, cap=40)
        assert abs(ce - math.log(6)) < 0.5
        assert 0.0 <= acc <= 1.0

    def test_does_not_touch_running_stats(self, tiny_corpus):
        _, val_seqs = split_per_speaker(tiny_corpus)
        model = build_model(make_tiny_spec(), seed=11)
        before = {k: (st.running_mean.copy(), st.running_var.copy())
                  for k, st in model.bn_states.items()}
        label_map = {s: i for i, s in
                     enumerate(sorted({q.speaker_id for q in tiny_corpus}))}
        validate(model, val_seqs, label_map, cap=40)
        for k, st in model.bn_states.items():
            np.testing.assert_array_equal(st.running_mean, before[k][0])
            np.testing.assert_array_equal(st.running_var, before[k][1])


class TestResume:
    def test_resume_matches_straight_run_bitwise(self, tiny_corpus, tmp_path):
        train_seqs, val_seqs = split_per_speaker(tiny_corpus)
        cfg = tiny_config(epochs=3)

        straight = build_model(make_tiny_spec(), seed=12)
        straight_log = train(straight, train_seqs, val_seqs, cfg,
                             checkpoint_path=tmp_path / "straight.xvck")

        interrupted = build_model(make_tiny_spec(), seed=12)
        train(interrupted, train_seqs, val_seqs, cfg,
              checkpoint_path=tmp_path / "part.xvck", stop_after_epoch=1)
        resumed, resumed_log = resume_training(
            tmp_path / "part.xvck", train_seqs, val_seqs, cfg,
            out_checkpoint_path=tmp_path / "resumed.xvck")

        assert params_bytes(straight) == params_bytes(resumed)
        tail = straight_log.steps[len(straight_log.steps)
                                  - len(resumed_log.steps):]
        assert [(s.ce, s.total) for s in tail] == \
            [(s.ce, s.total) for s in resumed_log.steps]
        # final checkpoints carry identical model arrays
        a, _, _ = load_checkpoint(tmp_path / "straight.xvck")
        b, _, _ = load_checkpoint(tmp_path / "resumed.xvck")
        assert params_bytes(a) == params_bytes(b)

    def test_resume_rejects_config_mismatch(self, tiny_corpus, tmp_path):
        train_seqs, val_seqs = split_per_speaker(tiny_corpus)
        cfg = tiny_config(epochs=2)
        model = build_model(make_tiny_spec(), seed=13)
        train(model, train_seqs, val_seqs, cfg,
              checkpoint_path=tmp_path / "ck.xvck", stop_after_epoch=1)
        with pytest.raises(ValueError, match="seed"):
            resume_training(tmp_path / "ck.xvck", train_seqs, val_seqs,
                            tiny_config(epochs=2, seed=99))

    def test_resume_rejects_completed_run(self, tiny_corpus, tmp_path):
        train_seqs, val_seqs = split_per_speaker(tiny_corpus)
        cfg = tiny_config(epochs=2)
        model = build_model(make_tiny_spec(), seed=14)
        train(model, train_seqs, val_seqs, cfg,
              checkpoint_path=tmp_path / "ck.xvck")
        with pytest.raises(ValueError, match="epochs"):
            resume_training(tmp_path / "ck.xvck", train_seqs, val_seqs, cfg)

    def test_checkpoint_without_progress_cannot_resume(self, tiny_corpus,
                                                       tmp_path):
        from svkit.model import save_checkpoint
        model = build_model(make_tiny_spec(), seed=15)
        path = tmp_path / "bare.xvck"
        save_checkpoint(path, model)
        train_seqs, val_seqs = split_per_speaker(tiny_corpus)
        with pytest.raises(ValueError):
            resume_training(path, train_seqs, val_seqs, tiny_config())


class TestLogExport:
    def test_csv_files_round_trip_floats(self, tiny_corpus, tmp_path):
        train_seqs, val_seqs = split_per_speaker(tiny_corpus)
        model = build_model(make_tiny_spec(), seed=16)
        log = train(model, train_seqs, val_seqs, tiny_config())
        sp = tmp_path / "steps.csv"
        ep = tmp_path / "epochs.csv"
        log.write_step_csv(sp)
        log.write_epoch_csv(ep)
        rows = sp.read_text().strip().split("\n")
        assert rows[0] == "step,epoch,ce,aux,task_weight,learning_rate,total"
        assert len(rows) == len(log.steps) + 1
        first = rows[1].split(",")
        assert float(first[2]) == log.steps[0].ce  # repr round-trips
        erows = ep.read_text().strip().split("\n")
        assert len(erows) == len(log.epochs) + 1
