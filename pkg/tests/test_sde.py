import math

import numpy as np
import pytest

from ctinpaint.sde import DiffusionState, VeSchedule, diffusion, drift, perturb, reverse_step, sigma
from ctinpaint.score import AnalyticScore, GaussianDataSpec

SCHED = VeSchedule(0.01, 128.0, 1000)


class TestSigma:
    def test_endpoints(self):
        assert sigma(SCHED, 0.0) == 0.01
        assert sigma(SCHED, 1.0) == 128.0

    def test_midpoint(self):
        assert sigma(SCHED, 0.5) == pytest.approx(0.01 * 12800**0.5, rel=1e-12)
        assert sigma(SCHED, 0.5) == pytest.approx(1.13137, rel=1e-6)

    @pytest.mark.parametrize("t", [0.0, 0.13, 0.5, 0.77])
    def test_constant_ratio(self, t):
        d = 0.2
        assert sigma(SCHED, t + d) / sigma(SCHED, t) == pytest.approx(12800**d, rel=1e-12)

    @pytest.mark.parametrize("t", [-0.01, 1.01, float("nan")])
    def test_rejects_out_of_range(self, t):
        with pytest.raises(ValueError):
            sigma(SCHED, t)

    def test_grid_strictly_increasing(self):
        s = VeSchedule(n_steps=50).sigmas()
        assert len(s) == 51 and np.all(np.diff(s) > 0)

    @pytest.mark.parametrize("kwargs", [dict(sigma_min=0), dict(sigma_min=2, sigma_max=1), dict(n_steps=0)])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            VeSchedule(**kwargs)


class TestCoefficients:
    def test_drift_zero(self):
        assert not drift(np.ones((3, 3)), 0.4).any()

    @pytest.mark.parametrize("t", np.round(np.arange(0.1, 1.0, 0.1), 2))
    def test_g2_matches_finite_difference(self, t):
        h = 1e-6
        fd = (sigma(SCHED, t + h) ** 2 - sigma(SCHED, t - h) ** 2) / (2 * h)
        assert SCHED.g2(t) == pytest.approx(fd, rel=1e-4)
        assert diffusion(SCHED, t) == pytest.approx(math.sqrt(fd), rel=1e-4)


class TestPerturb:
    def test_t0_is_identity(self):
        x0 = np.arange(6.0).reshape(2, 3)
        noise = np.random.default_rng(0).standard_normal(x0.shape)
        assert np.array_equal(perturb(SCHED, x0, 0.0, noise), x0)

    def test_zero_noise(self):
        x0 = np.arange(6.0).reshape(2, 3)
        assert np.array_equal(perturb(SCHED, x0, 0.7, np.zeros_like(x0)), x0)

    @pytest.mark.parametrize("t", [0.25, 0.5, 1.0])
    def test_variance(self, t):
        rng = np.random.default_rng(1)
        x0 = np.full((4, 4), 0.3)
        draws = perturb(SCHED, x0, t, rng.standard_normal((10_000, 4, 4))) - x0
        target = sigma(SCHED, t) ** 2 - 0.01**2
        assert np.all(np.abs(draws.var(axis=0) / target - 1) < 0.05)

    def test_per_batch_times(self):
        x0 = np.zeros((2, 2, 2))
        out = perturb(SCHED, x0, np.array([0.0, 1.0]), np.ones_like(x0))
        assert np.all(out[0] == 0)
        assert np.allclose(out[1], math.sqrt(128.0**2 - 0.01**2))


class TestReverseStep:
    def test_zero_score_zero_noise(self):
        x = np.random.default_rng(0).standard_normal((3, 3))
        out = reverse_step(SCHED, DiffusionState(x, 10, SCHED), np.zeros_like(x), np.zeros_like(x))
        assert np.array_equal(out.x, x) and out.step_index == 9

    def test_single_pixel_formula(self):
        sched = VeSchedule(0.01, 128.0, 10)
        i = 7
        dvar = sigma(sched, 0.7) ** 2 - sigma(sched, 0.6) ** 2
        out = reverse_step(sched, DiffusionState(np.array([[2.0]]), i, sched),
                           np.array([[-0.5]]), np.array([[0.25]]))
        assert out.x[0, 0] == pytest.approx(2.0 - 0.5 * dvar + 0.25 * math.sqrt(dvar), rel=1e-12)
        assert out.t == pytest.approx(0.6)

    def test_rejects_index_zero(self):
        with pytest.raises(ValueError):
            reverse_step(SCHED, DiffusionState(np.zeros((2, 2)), 0, SCHED), np.zeros((2, 2)), np.zeros((2, 2)))

    def test_em_chain_recovers_gaussian_mean(self):
        sched = VeSchedule(0.01, 128.0, 500)
        rng = np.random.default_rng(7)
        mean = rng.uniform(-1, 1, (8, 8))
        spec = GaussianDataSpec(mean, 0.5)
        model = AnalyticScore(spec, sched)
        chains = 500
        state = DiffusionState(128.0 * rng.standard_normal((chains, 8, 8)), sched.n_steps, sched)
        while state.step_index > 0:
            score = model(state.x, state.t)
            state = reverse_step(sched, state, score, rng.standard_normal(state.x.shape))
        assert np.all(np.diff([state.step_index]) <= 0)
        dev = state.x - mean
        se = 0.5 / math.sqrt(chains * 64)
        assert abs(dev.mean()) < 3 * se
        assert dev.std() == pytest.approx(0.5, rel=0.05)
