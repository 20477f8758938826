import numpy as np
import pytest

from m2t.config import TrainConfig, DataConfig
from m2t.data import AugmentSpec
from m2t.engine import DimensionError, Tensor
from m2t.trainer import (
    MetricsRecord,
    NanLossError,
    OptimizerState,
    Param,
    Trainer,
    ablation_grid,
    lars_step,
    modeled_sec_per_iter,
    run_training,
    sgd_step,
)


def small_config(**overrides):
    base = dict(
        mode="byol_m2t",
        seed=0,
        epochs=2,
        batch_size=16,
        workers=4,
        lr_base=0.3,
        data=DataConfig(kind="synthetic", num_classes=4, dim=8,
                        per_class=20, spread=0.3),
        augment=AugmentSpec(noise_std=0.2, mask_prob=0.1,
                            solarize_prob_teacher=0.0),
        log_interval=1,
        warmup_epochs=0,
    )
    base.update(overrides)
    return TrainConfig(**base)


def param(name, values, exclude=False):
    return Param(name=name, tensor=Tensor(np.asarray(values, dtype=float),
                                          requires_grad=True),
                 exclude=exclude)


class TestSgdStep:
    def test_zero_grads_zero_buffers_leave_params(self):
        p = param("w", [1.0, 2.0])
        state = OptimizerState(weight_decay=0.0)
        sgd_step([p], [np.zeros(2)], state, lr=0.1)
        np.testing.assert_array_equal(p.tensor.values, [1.0, 2.0])

    def test_single_step(self):
        p = param("w", [1.0, 2.0])
        state = OptimizerState(weight_decay=0.0)
        g = np.array([0.5, -0.5])
        sgd_step([p], [g], state, lr=0.1)
        np.testing.assert_allclose(p.tensor.values, [0.95, 2.05])

    def test_two_steps_with_constant_gradient(self):
        p = param("w", [0.0])
        state = OptimizerState(weight_decay=0.0, momentum=0.9)
        g = np.array([1.0])
        lr = 0.1
        sgd_step([p], [g], state, lr)
        sgd_step([p], [g], state, lr)
        # First step moves lr*g, second lr*(0.9 g + g).
        expected = -(lr * 1.0 + lr * 1.9)
        np.testing.assert_allclose(p.tensor.values, [expected])

    def test_weight_decay_excluded_when_configured(self):
        p = param("bias", [2.0], exclude=True)
        state = OptimizerState(weight_decay=0.5, wd_exclude=True)
        sgd_step([p], [np.zeros(1)], state, lr=0.1)
        np.testing.assert_array_equal(p.tensor.values, [2.0])
        q = param("weight", [2.0], exclude=False)
        sgd_step([q], [np.zeros(1)], state, lr=0.1)
        assert q.tensor.values[0] < 2.0

    def test_shape_mismatch(self):
        p = param("w", [1.0, 2.0])
        with pytest.raises(DimensionError, match="shape"):
            sgd_step([p], [np.zeros(3)], OptimizerState(), lr=0.1)


class TestLarsStep:
    def test_excluded_block_matches_sgd(self):
        vals = np.array([1.0, -2.0, 0.5])
        g = np.array([0.3, 0.1, -0.2])
        a = param("bias", vals.copy(), exclude=True)
        b = param("bias", vals.copy(), exclude=True)
        lars_state = OptimizerState(kind="lars", weight_decay=0.1,
                                    wd_exclude=True)
        sgd_state = OptimizerState(kind="sgd", weight_decay=0.1,
                                   wd_exclude=True)
        lars_step([a], [g.copy()], lars_state, lr=0.2)
        sgd_step([b], [g.copy()], sgd_state, lr=0.2)
        np.testing.assert_array_equal(a.tensor.values, b.tensor.values)

    def test_zero_norm_weight_is_not_moved(self):
        p = param("w", np.zeros(4))
        state = OptimizerState(kind="lars", weight_decay=0.0)
        lars_step([p], [np.ones(4)], state, lr=0.5)
        np.testing.assert_array_equal(p.tensor.values, np.zeros(4))

    def test_hand_computed_local_lr(self):
        p = param("w", [3.0, 4.0])
        state = OptimizerState(kind="lars", weight_decay=0.0,
                               trust_coeff=0.001, momentum=0.9)
        g = np.array([0.0, 1.0])
        lr = 1.0
        lars_step([p], [g], state, lr)
        # local lr = 0.001 * 5 / (1 + 1e-9) = 0.005; update = -lr * 0.005 * g
        np.testing.assert_allclose(p.tensor.values, [3.0, 4.0 - 0.005],
                                   rtol=1e-6)


class TestTrainStep:
    def test_zero_lr_zero_m_only_history_moves(self):
        cfg = small_config(lr_base=0.0, m_base=0.0)
        trainer = Trainer(cfg)
        student_before = [t.values.copy() for _, t, _ in
                          trainer.pair.student_params()]
        teacher_before = [t.values.copy() for t, _ in trainer.pair.ema_pairs()]
        batch = trainer.dataset.samples[:16]
        rec = trainer.train_step(batch, k=0)
        for before, (_, t, _) in zip(student_before,
                                     trainer.pair.student_params()):
            np.testing.assert_array_equal(t.values, before)
        for before, (t, _) in zip(teacher_before, trainer.pair.ema_pairs()):
            np.testing.assert_array_equal(t.values, before)
        assert rec.hist_drift > 0.0
        assert all(s.initialized for s in trainer.pair.teacher_bn_states())

    def test_commit_count_equals_iterations(self):
        cfg = small_config()
        trainer = Trainer(cfg)
        result = trainer.run()
        total = cfg.epochs * trainer.iters_per_epoch
        for state in trainer.pair.teacher_bn_states():
            assert state.commits == total
            assert state.pending == []

    def test_teacher_never_accumulates_gradients(self):
        cfg = small_config()
        trainer = Trainer(cfg)
        trainer.train_step(trainer.dataset.samples[:16], k=0)
        for t, _ in trainer.pair.ema_pairs():
            assert t.grad is None and not t.requires_grad

    def test_nan_loss_aborts_with_diagnostic(self):
        cfg = small_config()
        trainer = Trainer(cfg)
        trainer.pair.encoder.layers[0].weight.values[0, 0] = np.nan
        with pytest.raises(NanLossError) as exc:
            trainer.train_step(trainer.dataset.samples[:16], k=0)
        assert np.isnan(exc.value.diagnostic.loss)


class TestRunTraining:
    def test_zero_epochs_checkpoint_is_initialization(self):
        cfg = small_config(epochs=0)
        trainer = Trainer(cfg)
        init_weights = {name: t.values.copy()
                        for name, t, _ in trainer.pair.t_encoder.params()}
        result = trainer.run()
        for i, layer in enumerate(trainer.pair.t_encoder.layers):
            np.testing.assert_array_equal(
                result.payload["arrays"][f"enc{i}.weight"],
                init_weights[f"t_enc{i}.weight"])
        assert result.metrics == []
        assert result.payload["bn_initialized"] == [False, False]

    def test_determinism_identical_metric_streams(self):
        cfg1 = small_config()
        cfg2 = small_config()
        r1 = run_training(cfg1)
        r2 = run_training(cfg2)
        rows1 = [m.csv_row() for m in r1.metrics]
        rows2 = [m.csv_row() for m in r2.metrics]
        assert rows1 == rows2
        for name in r1.payload["arrays"]:
            assert (r1.payload["arrays"][name].tobytes()
                    == r2.payload["arrays"][name].tobytes())

    def test_synced_multiworker_equals_plain_single_worker(self):
        base = dict(seed=3, epochs=1, batch_size=16, lr_base=0.3,
                    data=DataConfig(kind="synthetic", num_classes=4, dim=8,
                                    per_class=20, spread=0.3),
                    augment=AugmentSpec(noise_std=0.2,
                                        solarize_prob_teacher=0.0),
                    log_interval=1, warmup_epochs=0)
        synced = TrainConfig(mode="byol_synced", workers=4, **base)
        plain = TrainConfig(mode="byol_plain", workers=1, **base)
        r_synced = run_training(synced)
        r_plain = run_training(plain)
        for a, b in zip(r_synced.metrics, r_plain.metrics):
            assert a.loss == b.loss
            assert a.l1 == b.l1 and a.l2 == b.l2
            assert a.hist_drift == b.hist_drift
        for name in r_synced.payload["arrays"]:
            assert (r_synced.payload["arrays"][name].tobytes()
                    == r_plain.payload["arrays"][name].tobytes())

    def test_m_zero_schedule_freezes_teacher(self):
        cfg = small_config(m_base=0.0)
        trainer = Trainer(cfg)
        init = [t.values.copy() for t, _ in trainer.pair.ema_pairs()]
        trainer.run()
        for before, (t, _) in zip(init, trainer.pair.ema_pairs()):
            np.testing.assert_array_equal(t.values, before)

    def test_all_losses_finite_on_reference_config(self):
        result = run_training(small_config(epochs=3))
        losses = [m.loss for m in result.metrics]
        assert all(np.isfinite(l) for l in losses)
        assert result.health["nonfinite_losses"] == 0

    def test_trailing_batch_kept_when_worker_divisible(self):
        # 4*20=80 samples, batch 32, workers 4 -> 2 full + 16 remainder.
        cfg = small_config(batch_size=32, workers=4)
        trainer = Trainer(cfg)
        assert trainer.batch_sizes == [32, 32, 16]

    def test_moco_mode_runs_and_fills_queue(self):
        cfg = small_config(mode="moco", m_base=0.001, m_schedule="constant",
                           alpha_base=0.064, alpha_schedule="constant",
                           queue_capacity=32)
        trainer = Trainer(cfg)
        result = trainer.run()
        assert len(trainer.queue) == 32
        assert all(np.isfinite(m.loss) for m in result.metrics)
        # Predictor is excluded from the optimizer in contrastive mode.
        assert not any(name.startswith("pred") for name in
                       (p.name for p in trainer.params))

    def test_moco_shuffling_teacher_runs(self):
        cfg = small_config(mode="moco", teacher_bn="shuffling", m_base=0.001,
                           m_schedule="constant", alpha_base=0.064,
                           alpha_schedule="constant", queue_capacity=32)
        result = run_training(cfg)
        assert all(np.isfinite(m.loss) for m in result.metrics)


class TestCostModel:
    def test_synced_costs_more_than_momentum(self):
        cfg_m = small_config()
        t_m = Trainer(cfg_m)
        cfg_s = small_config(mode="byol_synced")
        t_s = Trainer(cfg_s)
        cost_m = modeled_sec_per_iter(cfg_m, t_m.pair, cfg_m.batch_size)
        cost_s = modeled_sec_per_iter(cfg_s, t_s.pair, cfg_s.batch_size)
        assert cost_s > cost_m

    def test_momentum_matches_plain_compute(self):
        cfg_m = small_config()
        cfg_p = small_config(mode="byol_plain")
        cost_m = modeled_sec_per_iter(cfg_m, Trainer(cfg_m).pair, 16)
        cost_p = modeled_sec_per_iter(cfg_p, Trainer(cfg_p).pair, 16)
        assert cost_m == cost_p


class TestAblationGrid:
    def test_grid_shape_and_shared_seeds(self):
        cfg = small_config(epochs=1, probe_epochs=4)
        rows = ablation_grid(cfg)
        assert len(rows) == 6
        combos = {(r["student"], r["teacher"]) for r in rows}
        assert combos == {("plain", "plain"), ("plain", "synced"),
                          ("plain", "momentum"), ("synced", "plain"),
                          ("synced", "synced"), ("synced", "momentum")}
        for r in rows:
            assert 0.0 <= r["accuracy"] <= 1.0
        # Synced/synced must model slower iterations than plain/plain.
        cost = {(r["student"], r["teacher"]): r["sec_per_iter_model"]
                for r in rows}
        assert cost[("synced", "synced")] > cost[("plain", "plain")]
        assert cost[("plain", "momentum")] == cost[("plain", "plain")]
