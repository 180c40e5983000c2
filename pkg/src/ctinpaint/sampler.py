"""Predictor-corrector sampling of the reverse VE SDE.

The predictor is VE ancestral sampling; the corrector is Langevin dynamics
whose step size is set from a target signal-to-noise ratio. All step
functions accept a single image ``(H, W)`` or a batch of independent chains
``(B, H, W)``; norms are taken per image.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .sde import DiffusionState, VeSchedule, sigma

__all__ = [
    "SamplerConfig",
    "SamplingError",
    "ChainNoise",
    "langevin_step_size",
    "predictor_step",
    "corrector_step",
    "pc_sample",
]


@dataclass(frozen=True)
class SamplerConfig:
    n_steps: int = 1000
    snr: float = 0.4
    corrector_iters: int = 1
    seed: int = 0

    def __post_init__(self):
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ValueError("n_steps must be a positive integer")
        if not self.snr > 0:
            raise ValueError("snr must be positive")
        if self.corrector_iters < 0:
            raise ValueError("corrector_iters must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


class SamplingError(FloatingPointError):
    def __init__(self, step_index: int, stage: str):
        super().__init__(f"non-finite sample after {stage} at step index {step_index}")
        self.step_index = step_index
        self.stage = stage


class ChainNoise:
    """Per-chain Gaussian streams derived from one master seed.

    Chain ``k`` draws from ``default_rng([seed, k])``, so its trajectory does
    not depend on which other chains share the batch. Duck-types the
    ``standard_normal`` method of :class:`numpy.random.Generator`.
    """

    def __init__(self, seed: int, chain_ids=None, batched: bool = True):
        self.batched = batched
        ids = [0] if chain_ids is None else list(chain_ids)
        self._rngs = [np.random.default_rng([int(seed), int(k)]) for k in ids]

    @classmethod
    def for_shape(cls, seed: int, shape, chain_ids=None) -> "ChainNoise":
        if len(shape) == 2:
            return cls(seed, chain_ids if chain_ids is not None else [0], batched=False)
        ids = range(shape[0]) if chain_ids is None else chain_ids
        if len(ids) != shape[0]:
            raise ValueError("need one chain id per batch entry")
        return cls(seed, ids)

    def standard_normal(self, shape) -> np.ndarray:
        if not self.batched:
            return self._rngs[0].standard_normal(shape)
        if shape[0] != len(self._rngs):
            raise ValueError(f"batch of {shape[0]} but {len(self._rngs)} chain streams")
        return np.stack([r.standard_normal(shape[1:]) for r in self._rngs])


def _image_norms(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    if a.ndim == 2:
        return np.asarray(np.sqrt(np.sum(a * a)))
    return np.sqrt(np.sum(a * a, axis=(-2, -1)))


def langevin_step_size(score: np.ndarray, noise: np.ndarray, snr: float) -> np.ndarray:
    """``eps = 2 * (snr * ||noise|| / ||score||)^2`` per image; ``nan`` where the score is zero."""
    s_norm = _image_norms(score)
    z_norm = _image_norms(noise)
    with np.errstate(divide="ignore", invalid="ignore"):
        eps = 2.0 * (snr * z_norm / s_norm) ** 2
    return np.where(s_norm > 0, eps, np.nan)


def _check(x: np.ndarray, step_index: int, stage: str) -> None:
    if not np.all(np.isfinite(x)):
        raise SamplingError(step_index, stage)


def predictor_step(sched: VeSchedule, model, state: DiffusionState, rng) -> DiffusionState:
    """VE ancestral update from grid index ``i`` to ``i - 1``.

    ``x <- x + (s_i^2 - s_{i-1}^2) score + sqrt(s_{i-1}^2 (s_i^2 - s_{i-1}^2) / s_i^2) z``
    """
    i = state.step_index
    if i < 1:
        raise ValueError("predictor_step needs step_index >= 1")
    n = sched.n_steps
    s_cur, s_prev = sigma(sched, i / n), sigma(sched, (i - 1) / n)
    dvar = s_cur**2 - s_prev**2
    score = model(state.x, i / n)
    z = rng.standard_normal(np.shape(state.x))
    x = state.x + dvar * score + math.sqrt(s_prev**2 * dvar / s_cur**2) * z
    return DiffusionState(x, i - 1, sched)


def corrector_step(model, state: DiffusionState, snr: float, rng):
    """One Langevin iteration at fixed ``t``.

    Returns ``(new_state, skipped)`` where ``skipped`` flags images whose score
    norm was zero; those images are left unchanged.
    """
    if not snr > 0:
        raise ValueError("snr must be positive")
    score = model(state.x, state.t)
    z = rng.standard_normal(np.shape(state.x))
    eps = langevin_step_size(score, z, snr)
    skipped = np.isnan(eps)
    eps = np.where(skipped, 0.0, eps)
    if np.ndim(eps):
        eps = eps[:, None, None]
    x = state.x + eps * score + np.sqrt(2.0 * eps) * z
    return state.moved(x), skipped


def pc_sample(sched: VeSchedule, model, cfg: SamplerConfig, shape, *, chain_ids=None,
              callback=None) -> np.ndarray:
    """Draw samples of ``shape`` by alternating corrector and predictor steps.

    Starts from ``sigma(1) * N(0, I)`` and walks the ``cfg.n_steps`` grid down
    to ``t = 0``. ``callback(state)`` is called after every predictor step.
    """
    grid = sched.with_steps(cfg.n_steps)
    rng = ChainNoise.for_shape(cfg.seed, tuple(shape), chain_ids)
    state = DiffusionState(grid.sigma_max * rng.standard_normal(tuple(shape)), grid.n_steps, grid)
    while state.step_index > 0:
        for _ in range(cfg.corrector_iters):
            state, _ = corrector_step(model, state, cfg.snr, rng)
            _check(state.x, state.step_index, "corrector")
        state = predictor_step(grid, model, state, rng)
        _check(state.x, state.step_index + 1, "predictor")
        if callback is not None:
            callback(state)
    return state.x
