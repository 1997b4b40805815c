import math

import numpy as np
import pytest

from mvd.errors import ConfigurationError, ContractError
from mvd.schedule import (
    BetaSpec,
    Schedule,
    build_schedule,
    ddim_step,
    noise_from_original,
    predict_original,
)


def two_step_schedule():
    # alpha_bar = [1, 0.81, 0.64]: beta_1 = 0.19, beta_2 = 1 - 0.64/0.81
    return Schedule.from_alpha_bar([1.0, 0.81, 0.64])


def full(value, shape=(1, 2, 2)):
    return np.full(shape, value, dtype=np.float32)


class TestBuildSchedule:
    def test_single_step_linear(self):
        s = build_schedule(1, BetaSpec("linear", 0.19, 0.19))
        assert np.allclose(s.alpha_bar, [1.0, 0.81])

    def test_default_150_monotone(self):
        s = build_schedule(150)
        assert s.alpha_bar.shape == (151,)
        # brute-force scan for strict monotonicity and range
        for t in range(1, 151):
            assert s.alpha_bar[t] < s.alpha_bar[t - 1]
            assert 0.0 < s.alpha_bar[t] <= 1.0

    def test_zero_steps_rejected(self):
        with pytest.raises(ConfigurationError):
            build_schedule(0)

    def test_bad_beta_range_names_field(self):
        with pytest.raises(ConfigurationError, match="beta"):
            build_schedule(10, BetaSpec("linear", 0.5, 0.1))
        with pytest.raises(ConfigurationError, match="beta"):
            build_schedule(10, BetaSpec("linear", 0.0, 0.1))

    def test_cosine_monotone(self):
        s = build_schedule(50, BetaSpec(kind="cosine"))
        assert np.all(np.diff(s.alpha_bar) < 0)
        assert s.alpha_bar[0] == 1.0


class TestPredictOriginal:
    def test_zero_noise(self):
        s = two_step_schedule()
        x0 = predict_original(full(1.0), full(0.0), 2, s)
        assert np.allclose(x0, 1.0 / 0.8)

    def test_hand_evaluated(self):
        s = two_step_schedule()
        expected = (1.0 - math.sqrt(1 - 0.64) * 0.5) / math.sqrt(0.64)
        assert abs(expected - 0.875) < 1e-12
        x0 = predict_original(full(1.0), full(0.5), 2, s)
        assert np.allclose(x0, expected, atol=1e-6)

    def test_shape_mismatch(self):
        s = two_step_schedule()
        with pytest.raises(ContractError):
            predict_original(full(1.0), full(0.5, (1, 3, 3)), 2, s)

    def test_timestep_bounds(self):
        s = two_step_schedule()
        with pytest.raises(ContractError):
            predict_original(full(1.0), full(0.0), 3, s)
        with pytest.raises(ContractError):
            predict_original(full(1.0), full(0.0), 0, s)


class TestDdimStep:
    def test_final_step_is_predicted_original(self):
        s = two_step_schedule()
        x_t, eps = full(0.7), full(-0.3)
        out = ddim_step(x_t, eps, 1, s)
        assert np.array_equal(out, predict_original(x_t, eps, 1, s))

    def test_hand_evaluated(self):
        s = two_step_schedule()
        x0 = (1.0 - math.sqrt(0.36) * 0.5) / 0.8
        expected = math.sqrt(0.81) * x0 + math.sqrt(0.19) * 0.5
        out = ddim_step(full(1.0), full(0.5), 2, s)
        assert np.allclose(out, expected, atol=1e-6)

    def test_zero_noise_rescales(self):
        s = two_step_schedule()
        out = ddim_step(full(1.0), full(0.0), 2, s)
        assert np.allclose(out, math.sqrt(0.81) / math.sqrt(0.64), atol=1e-6)


class TestNoiseFromOriginal:
    def test_round_trip_random(self):
        s = build_schedule(150)
        rng = np.random.default_rng(7)
        for t in (1, 2, 50, 149, 150):
            x_t = rng.standard_normal((3, 8, 8)).astype(np.float32)
            eps = rng.standard_normal((3, 8, 8)).astype(np.float32)
            back = noise_from_original(x_t, predict_original(x_t, eps, t, s), t, s)
            assert np.max(np.abs(back - eps)) <= 1e-6

    def test_hand_evaluated(self):
        s = two_step_schedule()
        eps = noise_from_original(full(1.0), full(0.875), 2, s)
        assert np.allclose(eps, (1.0 - 0.8 * 0.875) / 0.6, atol=1e-6)

    def test_zero_noise_fixed_point(self):
        s = two_step_schedule()
        eps = noise_from_original(full(1.0), full(1.0 / 0.8), 2, s)
        assert np.max(np.abs(eps)) <= 1e-6

    def test_alpha_one_guarded(self):
        s = two_step_schedule()
        with pytest.raises(ContractError):
            noise_from_original(full(1.0), full(1.0), 0, s)


class TestRolloutProperty:
    def test_oracle_rollout_reaches_target(self):
        # oracle noise whose predicted original is a fixed target y
        s = build_schedule(150)
        rng = np.random.default_rng(11)
        y = rng.standard_normal((2, 4, 4)).astype(np.float32)
        x = rng.standard_normal((2, 4, 4)).astype(np.float32)
        for t in range(150, 0, -1):
            eps = noise_from_original(x, y, t, s)
            x = ddim_step(x, eps, t, s)
        assert np.max(np.abs(x - y)) <= 1e-4

    def test_determinism(self):
        s = build_schedule(10)
        rng = np.random.default_rng(3)
        x_t = rng.standard_normal((1, 4, 4)).astype(np.float32)
        eps = rng.standard_normal((1, 4, 4)).astype(np.float32)
        a = ddim_step(x_t, eps, 5, s)
        b = ddim_step(x_t.copy(), eps.copy(), 5, s)
        assert np.array_equal(a, b)
