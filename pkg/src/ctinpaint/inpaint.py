"""Conditional resampling for projection inpainting, and an interpolation baseline.

Masks follow the metal-mask convention: 1 marks known background pixels,
0 marks the region to restore.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .sampler import ChainNoise, SamplerConfig, SamplingError, corrector_step, predictor_step
from .sde import DiffusionState, VeSchedule, perturb

__all__ = ["InpaintProblem", "known_branch", "compose", "inpaint", "interpolate_baseline"]


def _check_binary(m: np.ndarray) -> None:
    if not np.all((m == 0) | (m == 1)):
        raise ValueError("mask must contain only 0 and 1")


@dataclass(frozen=True)
class InpaintProblem:
    """Measured projection(s) ``y`` with mask ``m``; both ``(H, W)`` or ``(B, H, W)``.

    ``clamp`` bounds the restored pixels (normalized units); ``None`` disables it.
    """

    y: np.ndarray
    m: np.ndarray
    sched: VeSchedule = VeSchedule()
    cfg: SamplerConfig = SamplerConfig()
    clamp: tuple[float, float] | None = (0.0, 1.0)

    def __post_init__(self):
        y = np.asarray(self.y, dtype=np.float64)
        m = np.asarray(self.m, dtype=np.float64)
        if y.shape != m.shape:
            raise ValueError(f"image shape {y.shape} does not match mask shape {m.shape}")
        if y.ndim not in (2, 3):
            raise ValueError("expected (H, W) or (B, H, W) arrays")
        _check_binary(m)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "m", m)


def known_branch(problem: InpaintProblem, t, noise: np.ndarray) -> np.ndarray:
    """Forward-perturbed measurement at time ``t``."""
    return perturb(problem.sched, problem.y, t, noise)


def compose(x1: np.ndarray, x2: np.ndarray, m: np.ndarray) -> np.ndarray:
    """``x1 * m + x2 * (1 - m)`` for a binary ``m``, evaluated as an exact select."""
    x1, x2, m = np.asarray(x1), np.asarray(x2), np.asarray(m)
    if not x1.shape == x2.shape == m.shape:
        raise ValueError(f"shape mismatch: {x1.shape}, {x2.shape}, {m.shape}")
    _check_binary(m)
    return np.where(m == 1, x1, x2)


def inpaint(problem: InpaintProblem, model, *, chain_ids=None, callback=None) -> np.ndarray:
    """Restore the masked pixels of ``problem.y`` with the PC reverse chain.

    After every corrector+predictor step the known pixels are replaced by the
    measurement perturbed to the new noise level. The final composition at
    ``t = 0`` leaves known pixels equal to ``y``. ``chain_ids`` selects the
    per-image noise streams (defaults to batch positions).
    """
    y, m, cfg = problem.y, problem.m, problem.cfg
    grid = problem.sched.with_steps(cfg.n_steps)
    rng = ChainNoise.for_shape(cfg.seed, y.shape, chain_ids)

    x1 = perturb(grid, y, 1.0, rng.standard_normal(y.shape))
    x2 = grid.sigma_max * rng.standard_normal(y.shape)
    state = DiffusionState(compose(x1, x2, m), grid.n_steps, grid)
    while state.step_index > 0:
        for _ in range(cfg.corrector_iters):
            state, _ = corrector_step(model, state, cfg.snr, rng)
        state = predictor_step(grid, model, state, rng)
        if not np.all(np.isfinite(state.x)):
            raise SamplingError(state.step_index + 1, "predictor")
        x1 = perturb(grid, y, state.t, rng.standard_normal(y.shape))
        state = state.moved(compose(x1, state.x, m))
        if callback is not None:
            callback(state)

    restored = state.x
    if problem.clamp is not None:
        restored = np.clip(restored, *problem.clamp)
    return compose(y, restored, m)


def _laplace_fill(y: np.ndarray, m: np.ndarray) -> np.ndarray:
    rows, cols = y.shape
    unknown = np.flatnonzero(m.ravel() == 0)
    if unknown.size == 0:
        return y.copy()
    index = -np.ones(rows * cols, dtype=np.int64)
    index[unknown] = np.arange(unknown.size)
    r, c = np.divmod(unknown, cols)

    # 5-point Laplacian with reflecting (Neumann) image borders
    diag = np.zeros(unknown.size)
    rhs = np.zeros(unknown.size)
    i_rows, i_cols = [], []
    yflat = y.ravel()
    for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        nr, nc = r + dr, c + dc
        inside = (nr >= 0) & (nr < rows) & (nc >= 0) & (nc < cols)
        diag += inside
        nb = nr[inside] * cols + nc[inside]
        src = np.flatnonzero(inside)
        nb_idx = index[nb]
        is_unknown = nb_idx >= 0
        i_rows.append(src[is_unknown])
        i_cols.append(nb_idx[is_unknown])
        np.add.at(rhs, src[~is_unknown], yflat[nb[~is_unknown]])
    off_r = np.concatenate(i_rows)
    off_c = np.concatenate(i_cols)
    A = sp.csr_matrix(
        (np.r_[diag, -np.ones(off_r.size)], (np.r_[np.arange(unknown.size), off_r],
                                              np.r_[np.arange(unknown.size), off_c])),
        shape=(unknown.size, unknown.size),
    )
    out = yflat.copy()
    out[unknown] = spla.spsolve(A.tocsc(), rhs)
    return out.reshape(rows, cols)


def interpolate_baseline(y: np.ndarray, m: np.ndarray) -> np.ndarray:
    """Fill masked pixels with the harmonic (Laplace) interpolant of the known ones.

    Known pixels are returned unchanged. Accepts ``(H, W)`` or ``(B, H, W)``.
    """
    y = np.asarray(y, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    if y.shape != m.shape:
        raise ValueError(f"image shape {y.shape} does not match mask shape {m.shape}")
    _check_binary(m)
    if y.ndim == 3:
        return np.stack([interpolate_baseline(a, b) for a, b in zip(y, m)])
    if not np.any(m == 1):
        raise ValueError("mask has no known pixels to interpolate from")
    return np.where(m == 1, y, _laplace_fill(y, m))
