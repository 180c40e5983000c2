"""Variance-exploding SDE: noise schedule, perturbation kernel, reverse step."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

__all__ = ["VeSchedule", "DiffusionState", "sigma", "perturb", "reverse_step", "drift", "diffusion"]


@dataclass(frozen=True)
class VeSchedule:
    """Geometric noise schedule ``sigma(t) = sigma_min * (sigma_max / sigma_min) ** t``.

    ``n_steps`` discretizes ``t`` uniformly on ``[0, 1]`` with ``n_steps + 1``
    grid points, so grid index ``i`` sits at ``t = i / n_steps``.
    """

    sigma_min: float = 0.01
    sigma_max: float = 128.0
    n_steps: int = 1000

    def __post_init__(self):
        if not self.sigma_max > self.sigma_min > 0:
            raise ValueError("schedule requires sigma_max > sigma_min > 0")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ValueError("n_steps must be a positive integer")

    def sigma(self, t):
        return sigma(self, t)

    def marginal_std(self, t):
        """Std of ``x_t - x_0``: ``sqrt(sigma(t)^2 - sigma(0)^2)``."""
        s = np.asarray(sigma(self, t), dtype=np.float64)
        return np.sqrt(np.maximum(s * s - self.sigma_min**2, 0.0))

    def g2(self, t):
        """Squared diffusion coefficient ``d[sigma^2]/dt``."""
        s = np.asarray(sigma(self, t), dtype=np.float64)
        return 2.0 * s * s * math.log(self.sigma_max / self.sigma_min)

    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) / self.n_steps

    def sigmas(self) -> np.ndarray:
        """Sigma at every grid point, increasing with index."""
        return sigma(self, self.times())

    def with_steps(self, n_steps: int) -> "VeSchedule":
        return replace(self, n_steps=n_steps)

    def to_dict(self) -> dict:
        return {"sigma_min": self.sigma_min, "sigma_max": self.sigma_max, "n_steps": self.n_steps}


def sigma(sched: VeSchedule, t):
    """Noise level at time ``t`` (scalar or array in ``[0, 1]``)."""
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any((t_arr < 0) | (t_arr > 1)) or np.any(~np.isfinite(t_arr)):
        raise ValueError(f"t must lie in [0, 1], got {t}")
    out = sched.sigma_min * (sched.sigma_max / sched.sigma_min) ** t_arr
    # pin the endpoints exactly
    out = np.where(t_arr == 0, sched.sigma_min, np.where(t_arr == 1, sched.sigma_max, out))
    return float(out) if out.ndim == 0 else out


def drift(x: np.ndarray, t) -> np.ndarray:
    """VE drift is identically zero."""
    return np.zeros_like(x)


def diffusion(sched: VeSchedule, t):
    """``g(t) = sqrt(d[sigma^2]/dt)``."""
    return np.sqrt(sched.g2(t))


def perturb(sched: VeSchedule, x0: np.ndarray, t, noise: np.ndarray) -> np.ndarray:
    """Sample of the forward kernel: ``x0 + sqrt(sigma(t)^2 - sigma(0)^2) * noise``.

    ``t`` may be a scalar or one value per leading batch entry.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    std = sched.marginal_std(t)
    if np.ndim(std):
        std = np.reshape(std, np.shape(std) + (1,) * (x0.ndim - np.ndim(std)))
    return x0 + std * noise


@dataclass(frozen=True)
class DiffusionState:
    """Sample ``x`` at grid index ``step_index`` of ``sched``."""

    x: np.ndarray
    step_index: int
    sched: VeSchedule

    def __post_init__(self):
        if not 0 <= self.step_index <= self.sched.n_steps:
            raise ValueError(f"step_index {self.step_index} outside [0, {self.sched.n_steps}]")

    @property
    def t(self) -> float:
        return self.step_index / self.sched.n_steps

    @property
    def sigma(self) -> float:
        return sigma(self.sched, self.t)

    def moved(self, x: np.ndarray, step_index: int | None = None) -> "DiffusionState":
        return DiffusionState(x, self.step_index if step_index is None else step_index, self.sched)


def _previous_sigmas(state: DiffusionState) -> tuple[float, float]:
    if state.step_index < 1:
        raise ValueError("cannot step before t = 0 (step_index is 0)")
    i = state.step_index
    n = state.sched.n_steps
    return sigma(state.sched, i / n), sigma(state.sched, (i - 1) / n)


def reverse_step(sched: VeSchedule, state: DiffusionState, score: np.ndarray,
                 noise: np.ndarray) -> DiffusionState:
    """Euler-Maruyama step of the reverse VE SDE, one grid step toward t = 0.

    ``x <- x + (s_i^2 - s_{i-1}^2) * score + sqrt(s_i^2 - s_{i-1}^2) * noise``
    """
    if state.sched != sched:
        state = DiffusionState(state.x, state.step_index, sched)
    s_cur, s_prev = _previous_sigmas(state)
    dvar = s_cur**2 - s_prev**2
    x = state.x + dvar * score + math.sqrt(dvar) * noise
    return state.moved(x, state.step_index - 1)
