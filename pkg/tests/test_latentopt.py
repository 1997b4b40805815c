import numpy as np
import pytest

from mvd.consistency import MultiViewState, SamplingPolicy, ViewState
from mvd.errors import ConfigurationError
from mvd.latentopt import (
    OptimizerConfig,
    finite_difference_pair_grad,
    latent_pair_grad,
    latent_pair_loss,
    make_plan_cache,
    optimization_event,
    optimize_pair,
    update_locks,
)
from mvd.scene import build_rig, look_at_camera, make_icosphere, rasterize
from mvd.warpfield import IdentityCodec, PoolCodec, build_warp_plan


def sphere_pair_plans(res=24):
    mesh = make_icosphere(radius=1.0, subdivisions=3)
    cam_a = look_at_camera([0.0, 0.0, 4.0], [0, 0, 0], res, res)
    cam_b = look_at_camera([2.0, 0.4, 3.5], [0, 0, 0], res, res)
    g_a = rasterize(mesh, cam_a)
    g_b = rasterize(mesh, cam_b)
    diag = mesh.bbox_diagonal()
    plan_a_from_b = build_warp_plan(g_a, g_b, cam_b, scene_diagonal=diag)
    plan_b_from_a = build_warp_plan(g_b, g_a, cam_a, scene_diagonal=diag)
    return plan_a_from_b, plan_b_from_a


class TestPairLoss:
    def test_identical_latents_zero(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((3, 6, 6)).astype(np.float32)
        out = latent_pair_loss(x, x.copy(), IdentityCodec(), None, None)
        assert out.value == 0.0 and not out.empty_overlap

    def test_scalar_hand_value(self):
        x_i = np.full((1, 1, 1), 1.0, np.float32)
        x_j = np.full((1, 1, 1), 0.4, np.float32)
        out = latent_pair_loss(x_i, x_j, IdentityCodec(), None, None)
        assert abs(out.value - 0.72) <= 1e-6

    def test_empty_overlap_annotated(self):
        pa, pb = sphere_pair_plans()
        pa.valid[:] = False
        pa.sample_idx = pa.sample_idx[:0]
        pa.sample_w = pa.sample_w[:0]
        pb.valid[:] = False
        pb.sample_idx = pb.sample_idx[:0]
        pb.sample_w = pb.sample_w[:0]
        x = np.zeros((3, 24, 24), np.float32)
        out = latent_pair_loss(x, x + 1.0, IdentityCodec(), pa, pb)
        assert out.value == 0.0 and out.empty_overlap


class TestGradients:
    @pytest.mark.parametrize("codec", [IdentityCodec(), PoolCodec(4)])
    def test_analytic_matches_finite_difference_identity_warp(self, codec):
        rng = np.random.default_rng(1)
        shape = (2, 3, 3) if codec.ratio == 1 else (2, 2, 2)
        x_i = rng.standard_normal(shape).astype(np.float32)
        x_j = rng.standard_normal(shape).astype(np.float32)
        g_i, g_j, _ = latent_pair_grad(x_i, x_j, codec, None, None)
        f_i, f_j, _ = finite_difference_pair_grad(x_i, x_j, codec, None, None)
        scale = max(np.abs(f_i).max(), np.abs(f_j).max(), 1e-12)
        assert np.max(np.abs(g_i - f_i)) / scale <= 1e-4
        assert np.max(np.abs(g_j - f_j)) / scale <= 1e-4

    def test_analytic_matches_finite_difference_real_warp(self):
        pa, pb = sphere_pair_plans(res=8)
        rng = np.random.default_rng(2)
        codec = IdentityCodec()
        x_i = rng.standard_normal((2, 8, 8)).astype(np.float32)
        x_j = rng.standard_normal((2, 8, 8)).astype(np.float32)
        g_i, g_j, _ = latent_pair_grad(x_i, x_j, codec, pa, pb)
        f_i, f_j, _ = finite_difference_pair_grad(x_i, x_j, codec, pa, pb)
        scale = max(np.abs(f_i).max(), np.abs(f_j).max(), 1e-12)
        assert np.max(np.abs(g_i - f_i)) / scale <= 1e-4
        assert np.max(np.abs(g_j - f_j)) / scale <= 1e-4


class TestOptimizePair:
    def test_equal_latents_unchanged(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((1, 4, 4)).astype(np.float32)
        cfg = OptimizerConfig()
        a, b, trace = optimize_pair(x, x.copy(), IdentityCodec(), None, None, cfg)
        assert np.array_equal(a, x) and np.array_equal(b, x)

    def test_locked_side_attracts_unlocked(self):
        # hand-iterated gradient descent as the oracle
        cfg = OptimizerConfig(step_size=0.5, iterations=6)
        a_val = 0.9
        x_i = np.full((1, 1, 1), 0.1, np.float32)
        x_j = np.full((1, 1, 1), a_val, np.float32)
        out_i, out_j, trace = optimize_pair(
            x_i, x_j, IdentityCodec(), None, None, cfg, lock_j=True
        )
        assert np.array_equal(out_j, x_j)
        # manual descent with identical step-halving policy
        x = 0.1
        step = 0.5
        cur = 2 * (x - a_val) ** 2
        for _ in range(cfg.iterations):
            if cur == 0.0:
                break
            g = 4 * (x - a_val)
            while True:
                trial_x = x - step * g
                trial = 2 * (trial_x - a_val) ** 2
                if trial < cur * (1 - 1e-12):
                    x, cur = trial_x, trial
                    break
                step *= 0.5
        assert abs(float(out_i[0, 0, 0]) - x) <= 1e-6
        dist = [abs(v) for v in np.sqrt(np.maximum(np.array(trace), 0) / 2.0)]
        assert all(d2 <= d1 + 1e-12 for d1, d2 in zip(dist, dist[1:]))

    def test_loss_monotone_on_random_pair(self):
        pa, pb = sphere_pair_plans(res=16)
        rng = np.random.default_rng(4)
        x_i = rng.standard_normal((3, 16, 16)).astype(np.float32)
        x_j = rng.standard_normal((3, 16, 16)).astype(np.float32)
        _, _, trace = optimize_pair(
            x_i, x_j, IdentityCodec(), pa, pb, OptimizerConfig(iterations=8)
        )
        assert len(trace) >= 2
        assert all(b <= a for a, b in zip(trace, trace[1:]))

    def test_both_locked_noop(self):
        x = np.ones((1, 2, 2), np.float32)
        a, b, trace = optimize_pair(
            x, x + 1, IdentityCodec(), None, None, OptimizerConfig(), True, True
        )
        assert np.array_equal(a, x) and trace == []

    def test_config_validation(self):
        with pytest.raises(ConfigurationError):
            OptimizerConfig(step_size=0.0).validate()
        with pytest.raises(ConfigurationError):
            OptimizerConfig(iterations=0).validate()
        with pytest.raises(ConfigurationError):
            OptimizerConfig(gradient="adam").validate()


class TestEvent:
    def make_state(self, rig, value_fn):
        views = [
            ViewState(i, np.full((1, 2, 2), value_fn(i), np.float32), track=rig.track_of(i))
            for i in range(len(rig))
        ]
        return MultiViewState(views, timestep=100)

    def test_lock_schedule(self):
        rig = build_rig([0, 0, 0], 4.0, 2.0, 4)
        policy = SamplingPolicy()
        state = self.make_state(rig, lambda i: float(i))
        state = MultiViewState(state.views, timestep=150)
        early = update_locks(state, rig, policy, num_steps=150)
        locked = {v.view_id for v in early.views if v.locked}
        assert locked == {0, 2, 4, 6}  # front and back on both tracks
        late = MultiViewState(early.views, timestep=100)  # elapsed = 1/3 >= 0.2
        late = update_locks(late, rig, policy, num_steps=150)
        locked = {v.view_id for v in late.views if v.locked}
        assert locked == {0, 1, 2, 3, 4, 5, 6, 7}

    def test_lock_monotone_and_bit_identical(self):
        rig = build_rig([0, 0, 0], 4.0, 2.0, 4)
        state = self.make_state(rig, lambda i: float(i))
        state = update_locks(state, rig, SamplingPolicy(), 150)
        frozen = {v.view_id: v.latent.copy() for v in state.views if v.locked}
        out = optimization_event(
            state, rig, SamplingPolicy(), OptimizerConfig(iterations=3),
            IdentityCodec(), make_plan_cache(lambda i, j: None), 150,
        )
        for v in out.views:
            if v.view_id in frozen:
                assert np.array_equal(v.latent, frozen[v.view_id])
                assert v.locked

    def test_all_locked_unchanged(self):
        rig = build_rig([0, 0, 0], 4.0, 2.0, 4)
        state = self.make_state(rig, lambda i: float(i))
        state = MultiViewState(
            [ViewState(v.view_id, v.latent, True, v.track) for v in state.views], 100
        )
        out = optimization_event(
            state, rig, SamplingPolicy(), OptimizerConfig(),
            IdentityCodec(), make_plan_cache(lambda i, j: None), 150,
        )
        for a, b in zip(out.views, state.views):
            assert np.array_equal(a.latent, b.latent)

    def test_unlocked_converges_toward_locked_reference(self):
        # identity geometry, one locked view: the free views drift toward it
        rig = build_rig([0, 0, 0], 4.0, 2.0, 4)
        policy = SamplingPolicy(lock_front_back_first_event=True, lock_sides_fraction=2.0)
        state = self.make_state(rig, lambda i: 1.0 if i in (0, 2, 4, 6) else 0.0)
        cfg = OptimizerConfig(iterations=10)
        lookup = make_plan_cache(lambda i, j: None)
        for _ in range(8):
            state = optimization_event(state, rig, policy, cfg, IdentityCodec(), lookup, 150)
        free = [v.latent.mean() for v in state.views if not v.locked]
        assert all(abs(f - 1.0) <= 1e-3 for f in free)
