import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from m2t import engine
from m2t import normalization as norm
from m2t.engine import DimensionError, backward, constant, parameter, record
from m2t.normalization import (
    BatchStats,
    MomentumBNState,
    WorkerLayout,
    batch_stats,
    bn_apply,
    identity_norm_params,
    momentum_bn_forward,
    momentum_bn_lazy_commit,
    plain_bn_forward,
    shuffling_bn_forward,
    synced_bn_forward,
)


def two_pass_stats(x: np.ndarray):
    """Independent reference: accumulate mean, then squared deviations."""
    m, c = x.shape
    mean = np.zeros(c)
    for j in range(c):
        acc = 0.0
        for i in range(m):
            acc += x[i, j]
        mean[j] = acc / m
    var = np.zeros(c)
    for j in range(c):
        acc = 0.0
        for i in range(m):
            acc += (x[i, j] - mean[j]) ** 2
        var[j] = acc / m
    return mean, var


class TestBatchStats:
    def test_biased_variance(self):
        s = batch_stats(constant([[1.0], [2.0], [3.0]]))
        np.testing.assert_array_equal(s.mean.values, [2.0])
        np.testing.assert_allclose(s.var.values, [2.0 / 3.0], rtol=1e-15)
        assert s.count == 3

    def test_constant_batch(self):
        s = batch_stats(constant([[5.0, 5.0], [5.0, 5.0]]))
        np.testing.assert_array_equal(s.mean.values, [5.0, 5.0])
        np.testing.assert_array_equal(s.var.values, [0.0, 0.0])

    def test_random_batch_matches_two_pass_reference(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(32, 8))
        s = batch_stats(constant(x))
        mean, var = two_pass_stats(x)
        np.testing.assert_allclose(s.mean.values, mean, atol=1e-12)
        np.testing.assert_allclose(s.var.values, var, atol=1e-12)

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError):
            batch_stats(constant(np.zeros((0, 3))))


class TestBnApply:
    def test_self_stats_standardize(self):
        rng = np.random.default_rng(1)
        x = constant(rng.normal(3.0, 2.0, size=(64, 4)))
        p = identity_norm_params(4, eps=1e-5)
        y = bn_apply(x, batch_stats(x), p)
        np.testing.assert_allclose(y.values.mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(y.values.var(axis=0), 1.0, atol=1e-4)

    def test_constant_input_maps_to_beta(self):
        x = constant(np.full((5, 2), 7.0))
        p = norm.NormParams(gamma=constant([2.0, 2.0]), beta=constant([3.0, 3.0]))
        y = bn_apply(x, batch_stats(x), p)
        np.testing.assert_allclose(y.values, 3.0)

    def test_hand_computed_example(self):
        x = constant([[0.0], [2.0]])
        p = identity_norm_params(1, eps=1e-5)
        y = bn_apply(x, batch_stats(x), p)
        expected = (np.array([[0.0], [2.0]]) - 1.0) / np.sqrt(1.0 + 1e-5)
        np.testing.assert_allclose(y.values, expected, rtol=1e-12)
        assert y.values[0, 0] == pytest.approx(-0.999995, abs=1e-6)

    def test_channel_mismatch(self):
        x = constant(np.zeros((4, 3)))
        with pytest.raises(DimensionError, match="channel"):
            bn_apply(x, batch_stats(x), identity_norm_params(2))

    def test_full_backward_through_stats(self):
        # Gradient flows through mean and variance of the current batch.
        rng = np.random.default_rng(2)
        x = parameter(rng.normal(size=(6, 3)))
        gamma = parameter(np.full(3, 1.3))
        beta = parameter(np.full(3, -0.2))
        p = norm.NormParams(gamma=gamma, beta=beta, eps=1e-5)
        target = rng.normal(size=(6, 3))

        def f():
            y = bn_apply(x, batch_stats(x), p)
            d = y - target
            return engine.sum(d * d)

        report = engine.finite_diff_check(
            f, [("x", x), ("gamma", gamma), ("beta", beta)])
        assert report.passed, report.per_block

    def test_history_stats_are_gradient_constants(self):
        x = parameter(np.array([[1.0, 2.0], [3.0, 4.0]]))
        stats = BatchStats(mean=constant([1.0, 1.0]),
                           var=constant([2.0, 2.0]), count=8)
        p = identity_norm_params(2)
        with record():
            loss = engine.sum(bn_apply(x, stats, p))
        backward(loss)
        assert stats.mean.grad is None and stats.var.grad is None
        assert x.grad is not None


class TestWorkerLayout:
    def test_ranges_partition(self):
        layout = WorkerLayout(batch_size=8, num_workers=4)
        assert layout.ranges == [(0, 2), (2, 4), (4, 6), (6, 8)]

    def test_indivisible_batch_rejected(self):
        with pytest.raises(ValueError, match="divisible"):
            WorkerLayout(batch_size=10, num_workers=4)


class TestPlainBn:
    def test_single_worker_equals_bn_apply(self):
        rng = np.random.default_rng(3)
        x = constant(rng.normal(size=(16, 4)))
        p = identity_norm_params(4)
        got = plain_bn_forward(x, WorkerLayout(16, 1), p)
        want = bn_apply(x, batch_stats(x), p)
        assert got.values.tobytes() == want.values.tobytes()

    def test_constant_slices_normalize_to_beta(self):
        x = constant([[1.0], [1.0], [3.0], [3.0]])
        p = norm.NormParams(gamma=constant([1.0]), beta=constant([0.5]))
        y = plain_bn_forward(x, WorkerLayout(4, 2), p)
        np.testing.assert_allclose(y.values, 0.5)

    def test_matches_slice_wise_oracle(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(32, 8))
        p = identity_norm_params(8)
        y = plain_bn_forward(constant(x), WorkerLayout(32, 4), p)
        for a, b in WorkerLayout(32, 4).ranges:
            piece = constant(x[a:b])
            ref = bn_apply(piece, batch_stats(piece), p)
            np.testing.assert_array_equal(y.values[a:b], ref.values)

    def test_backward_through_worker_slices(self):
        rng = np.random.default_rng(5)
        x = parameter(rng.normal(size=(8, 3)))
        p = identity_norm_params(3)
        target = rng.normal(size=(8, 3))

        def f():
            y = plain_bn_forward(x, WorkerLayout(8, 2), p)
            d = y - target
            return engine.sum(d * d)

        assert engine.finite_diff_check(f, [("x", x)]).passed

    def test_thread_cap_does_not_change_results(self, monkeypatch):
        rng = np.random.default_rng(6)
        x = constant(rng.normal(size=(32, 8)))
        p = identity_norm_params(8)
        monkeypatch.setenv("M2T_THREADS", "1")
        sequential = plain_bn_forward(x, WorkerLayout(32, 4), p)
        monkeypatch.setenv("M2T_THREADS", "4")
        threaded = plain_bn_forward(x, WorkerLayout(32, 4), p)
        assert sequential.values.tobytes() == threaded.values.tobytes()


class TestSyncedBn:
    def test_equals_single_worker_plain_bitwise(self):
        rng = np.random.default_rng(7)
        x = constant(rng.normal(size=(24, 5)))
        p = identity_norm_params(5)
        for w in (2, 3, 4):
            got = synced_bn_forward(x, WorkerLayout(24, w), p)
            want = plain_bn_forward(x, WorkerLayout(24, 1), p)
            assert got.values.tobytes() == want.values.tobytes()

    def test_hand_stats_over_union(self):
        x = constant([[0.0], [2.0], [4.0], [6.0]])
        p = identity_norm_params(1, eps=1e-12)
        y = synced_bn_forward(x, WorkerLayout(4, 2), p)
        # union mean 3, union biased variance 5
        expected = (x.values - 3.0) / np.sqrt(5.0 + 1e-12)
        np.testing.assert_allclose(y.values, expected, rtol=1e-12)

    def test_global_zero_mean(self):
        rng = np.random.default_rng(8)
        x = constant(rng.normal(2.0, 3.0, size=(20, 6)))
        y = synced_bn_forward(x, WorkerLayout(20, 4), identity_norm_params(6))
        np.testing.assert_allclose(y.values.mean(axis=0), 0.0, atol=1e-12)


class TestShufflingBn:
    def test_identity_permutation_equals_plain(self):
        rng = np.random.default_rng(9)
        x = constant(rng.normal(size=(12, 3)))
        p = identity_norm_params(3)
        layout = WorkerLayout(12, 3)
        got = shuffling_bn_forward(x, layout, p, perm=np.arange(12))
        want = plain_bn_forward(x, layout, p)
        assert got.values.tobytes() == want.values.tobytes()

    def test_single_worker_any_permutation_equals_plain(self):
        rng = np.random.default_rng(10)
        x = constant(rng.normal(size=(8, 2)))
        p = identity_norm_params(2)
        got = shuffling_bn_forward(x, WorkerLayout(8, 1), p, perm_seed=123)
        want = plain_bn_forward(x, WorkerLayout(8, 1), p)
        np.testing.assert_allclose(got.values, want.values, rtol=1e-12, atol=1e-12)

    def test_rows_normalized_by_shuffled_group_stats(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(16, 4))
        p = identity_norm_params(4)
        layout = WorkerLayout(16, 4)
        seed = 77
        y = shuffling_bn_forward(constant(x), layout, p, perm_seed=seed)

        # Oracle: follow the permutation and recompute each group's stats.
        perm = np.random.default_rng(seed).permutation(16)
        position_of = np.argsort(perm)
        for i in range(16):
            group = position_of[i] // layout.per_worker
            a, b = layout.ranges[group]
            members = x[perm[a:b]]
            mu, sig = members.mean(axis=0), members.var(axis=0)
            expected = (x[i] - mu) / np.sqrt(sig + p.eps)
            np.testing.assert_allclose(y.values[i], expected, rtol=1e-10, atol=1e-12)

    def test_rejects_non_permutation(self):
        x = constant(np.zeros((4, 1)))
        with pytest.raises(ValueError, match="permutation"):
            shuffling_bn_forward(x, WorkerLayout(4, 2),
                                 identity_norm_params(1), perm=np.array([0, 0, 1, 2]))


class TestMomentumBn:
    def _state(self, mean=None, var=None, semantics="weight_on_batch"):
        st_ = MomentumBNState(alpha_semantics=semantics)
        if mean is not None:
            st_.hist_mean = np.asarray(mean, dtype=float)
            st_.hist_var = np.asarray(var, dtype=float)
            st_.initialized = True
        return st_

    def test_alpha_one_is_bitwise_plain_bn(self):
        rng = np.random.default_rng(12)
        x = constant(rng.normal(size=(16, 4)))
        p = identity_norm_params(4)
        state = self._state(mean=np.zeros(4), var=np.ones(4))
        y, _ = momentum_bn_forward(x, state, 1.0, p)
        want = bn_apply(x, batch_stats(x), p)
        assert y.values.tobytes() == want.values.tobytes()

    def test_alpha_zero_uses_pure_history(self):
        x = constant([[3.0]])
        p = identity_norm_params(1, eps=1e-12)
        state = self._state(mean=[1.0], var=[4.0])
        y, _ = momentum_bn_forward(x, state, 0.0, p)
        assert y.values[0, 0] == pytest.approx(1.0, abs=1e-9)

    def test_half_blend_hand_example(self):
        x = constant([[0.0], [2.0]])
        p = identity_norm_params(1, eps=1e-12)
        state = self._state(mean=[0.0], var=[1.0])
        y, s = momentum_bn_forward(x, state, 0.5, p)
        # batch mean 1, batch var 1 -> blended mean 0.5, blended var 1
        np.testing.assert_allclose(y.values, [[-0.5], [1.5]], atol=1e-9)
        np.testing.assert_array_equal(s.mean.values, [1.0])

    def test_weight_on_history_mirrors_blend(self):
        x = constant([[0.0], [2.0]])
        p = identity_norm_params(1, eps=1e-12)
        state = self._state(mean=[0.0], var=[1.0], semantics="weight_on_history")
        # Literal reading: history carries weight alpha.
        y, _ = momentum_bn_forward(x, state, 0.5, p)
        np.testing.assert_allclose(y.values, [[-0.5], [1.5]], atol=1e-9)
        y2, _ = momentum_bn_forward(x, state, 1.0, p)
        np.testing.assert_allclose(y2.values, [[0.0], [2.0]], atol=1e-9)

    def test_forward_does_not_touch_history(self):
        x = constant(np.random.default_rng(13).normal(size=(4, 2)))
        state = self._state(mean=[1.0, 1.0], var=[2.0, 2.0])
        momentum_bn_forward(x, state, 0.3, identity_norm_params(2))
        np.testing.assert_array_equal(state.hist_mean, [1.0, 1.0])
        np.testing.assert_array_equal(state.hist_var, [2.0, 2.0])
        assert len(state.pending) == 1

    def test_uninitialized_history_falls_back_to_batch(self):
        x = constant([[0.0], [2.0]])
        state = MomentumBNState()
        y, _ = momentum_bn_forward(x, state, 0.25, identity_norm_params(1, eps=1e-12))
        np.testing.assert_allclose(y.values, [[-1.0], [1.0]], atol=1e-9)

    def test_alpha_out_of_range(self):
        x = constant([[1.0]])
        with pytest.raises(ValueError, match="alpha"):
            momentum_bn_forward(x, MomentumBNState(), 1.5, identity_norm_params(1))


class TestLazyCommit:
    def _stats(self, mean, var, count=4):
        return BatchStats(mean=engine.constant(mean), var=engine.constant(var),
                          count=count)

    def test_fixed_point(self):
        state = MomentumBNState(hist_mean=np.array([2.0]), hist_var=np.array([3.0]),
                                initialized=True)
        s = self._stats([2.0], [3.0])
        state.pending.extend([s, s])
        momentum_bn_lazy_commit(state, s, s, 0.7)
        np.testing.assert_array_equal(state.hist_mean, [2.0])
        np.testing.assert_array_equal(state.hist_var, [3.0])
        assert state.pending == []

    def test_alpha_one_takes_view_average(self):
        state = MomentumBNState(hist_mean=np.array([9.0]), hist_var=np.array([9.0]),
                                initialized=True)
        s1, s2 = self._stats([1.0], [2.0]), self._stats([3.0], [4.0])
        state.pending.extend([s1, s2])
        momentum_bn_lazy_commit(state, s1, s2, 1.0)
        np.testing.assert_array_equal(state.hist_mean, [2.0])
        np.testing.assert_array_equal(state.hist_var, [3.0])

    def test_quarter_blend(self):
        state = MomentumBNState(hist_mean=np.array([0.0]), hist_var=np.array([1.0]),
                                initialized=True)
        s = self._stats([4.0], [1.0])
        state.pending.extend([s, s])
        momentum_bn_lazy_commit(state, s, s, 0.25)
        np.testing.assert_allclose(state.hist_mean, [1.0])

    def test_commit_without_pending_rejected(self):
        state = MomentumBNState()
        s = self._stats([1.0], [1.0])
        with pytest.raises(ValueError, match="pending"):
            momentum_bn_lazy_commit(state, s, s, 0.5)

    def test_count_mismatch_rejected(self):
        state = MomentumBNState()
        s1 = self._stats([1.0], [1.0], count=4)
        s2 = self._stats([1.0], [1.0], count=8)
        state.pending.extend([s1, s2])
        with pytest.raises(ValueError, match="count"):
            momentum_bn_lazy_commit(state, s1, s2, 0.5)

    def test_first_commit_seeds_history_with_view_average(self):
        state = MomentumBNState()
        s1, s2 = self._stats([1.0], [2.0]), self._stats([3.0], [6.0])
        state.pending.extend([s1, s2])
        momentum_bn_lazy_commit(state, s1, s2, 0.1)
        assert state.initialized
        np.testing.assert_array_equal(state.hist_mean, [2.0])
        np.testing.assert_array_equal(state.hist_var, [4.0])

    @settings(max_examples=50)
    @given(st.lists(st.tuples(st.floats(0, 10), st.floats(0, 10),
                              st.floats(0, 1)), min_size=1, max_size=20))
    def test_history_variance_stays_nonnegative(self, steps):
        state = MomentumBNState()
        for v1, v2, alpha in steps:
            s1 = self._stats([0.0], [v1])
            s2 = self._stats([0.0], [v2])
            state.pending.extend([s1, s2])
            momentum_bn_lazy_commit(state, s1, s2, alpha)
            assert state.hist_var[0] >= 0.0


class TestLeakageFreedom:
    def test_view_v_normalization_independent_of_view_vprime(self):
        """Perturbing the other view arbitrarily leaves this view's teacher
        normalization bit-identical within the iteration."""
        rng = np.random.default_rng(14)
        p = identity_norm_params(3)
        v = rng.normal(size=(8, 3))

        def teacher_pass(other_view):
            state = MomentumBNState(hist_mean=np.zeros(3), hist_var=np.ones(3),
                                    initialized=True)
            y_other, s_other = momentum_bn_forward(constant(other_view), state, 0.5, p)
            y_v, s_v = momentum_bn_forward(constant(v), state, 0.5, p)
            momentum_bn_lazy_commit(state, s_other, s_v, 0.5)
            return y_v.values.tobytes()

        base = teacher_pass(rng.normal(size=(8, 3)))
        for _ in range(5):
            assert teacher_pass(rng.normal(10.0, 100.0, size=(8, 3))) == base


def test_comm_bytes_model():
    layout = WorkerLayout(32, 4)
    assert norm.comm_bytes("plain", layout, 8) == 0
    assert norm.comm_bytes("momentum", layout, 8) == 0
    assert norm.comm_bytes("synced", layout, 8) == 2 * 8 * 8 * 4
    assert norm.comm_bytes("shuffling", layout, 8) == 2 * 32 * 8 * 8
    assert norm.comm_bytes("synced", WorkerLayout(32, 1), 8) == 0
