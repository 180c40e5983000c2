"""Score functions: a closed-form Gaussian oracle and a trainable denoiser.

A score model maps ``(x, t)`` to an estimate of ``grad_x log p_t(x)``. Images
are numpy arrays of shape ``(H, W)`` or ``(B, H, W)``; ``t`` is a scalar or one
value per batch entry.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .sde import VeSchedule, perturb

__all__ = [
    "ScoreModel",
    "GaussianDataSpec",
    "AnalyticScore",
    "analytic_score",
    "TimeEmbedding",
    "time_features",
    "NetConfig",
    "DenoiserNet",
    "LearnedScore",
    "dsm_loss",
    "TrainOptions",
    "TrainingDiverged",
    "train",
    "make_optimizer",
    "save_checkpoint",
    "load_checkpoint",
]

log = logging.getLogger(__name__)

T_EPS = 1e-5


class ScoreModel:
    """Interface: ``model(x, t)`` returns the score field with the shape of ``x``."""

    kind = "abstract"

    def evaluate(self, x: np.ndarray, t) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, x, t):
        return self.evaluate(x, t)


@dataclass(frozen=True)
class GaussianDataSpec:
    """Data distribution ``N(mean, tau^2 I)`` with independent pixels."""

    mean: np.ndarray
    tau: float

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        mean = np.asarray(self.mean, dtype=np.float64)
        return mean + self.tau * rng.standard_normal((n,) + mean.shape)

    def marginal_var(self, sched: VeSchedule, t) -> np.ndarray:
        return self.tau**2 + sched.marginal_std(t) ** 2


def analytic_score(spec: GaussianDataSpec, sched: VeSchedule, x, t) -> np.ndarray:
    """``-(x - mean) / (tau^2 + sigma(t)^2 - sigma(0)^2)`` per pixel."""
    x = np.asarray(x, dtype=np.float64)
    var = np.asarray(spec.marginal_var(sched, t))
    if var.ndim:
        var = var.reshape(var.shape + (1,) * (x.ndim - var.ndim))
    return -(x - np.asarray(spec.mean)) / var


class AnalyticScore(ScoreModel):
    kind = "analytic"

    def __init__(self, spec: GaussianDataSpec, sched: VeSchedule):
        self.spec = spec
        self.sched = sched

    def evaluate(self, x, t):
        return analytic_score(self.spec, self.sched, x, t)


# --------------------------------------------------------------------------
# time conditioning
# --------------------------------------------------------------------------

@dataclass
class TimeEmbedding:
    """Gaussian random Fourier features of ``t``.

    ``n_features`` is the output length; half of it are frozen frequencies
    drawn once from ``N(0, scale^2)``.
    """

    n_features: int = 64
    scale: float = 16.0
    seed: int = 0
    frequencies: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.n_features < 2 or self.n_features % 2:
            raise ValueError("n_features must be a positive even number")
        rng = np.random.default_rng([self.seed, 0x7E])
        self.frequencies = self.scale * rng.standard_normal(self.n_features // 2)
        self.frequencies.setflags(write=False)


def time_features(emb: TimeEmbedding, t) -> np.ndarray:
    """``[sin(2 pi w t), cos(2 pi w t)]``; shape ``(n_features,)`` or ``(B, n_features)``."""
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any((t_arr < 0) | (t_arr > 1)):
        raise ValueError("t must lie in [0, 1]")
    proj = 2 * np.pi * t_arr[..., None] * emb.frequencies
    return np.concatenate([np.sin(proj), np.cos(proj)], axis=-1)


# --------------------------------------------------------------------------
# network
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class NetConfig:
    channels: tuple[int, int, int] = (32, 64, 64)
    n_features: int = 64
    fourier_scale: float = 16.0
    groups: int = 8
    # input preconditioning: x is divided by sqrt(data_std^2 + sigma(t)^2)
    data_std: float = 0.5

    def to_dict(self) -> dict:
        return {**asdict(self), "channels": list(self.channels)}

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(**{**d, "channels": tuple(d["channels"])})


class _Block(nn.Module):
    def __init__(self, c_in, c_out, emb_dim, groups, stride=1):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1)
        self.temb = nn.Linear(emb_dim, c_out)
        self.norm = nn.GroupNorm(min(groups, c_out), c_out)

    def forward(self, h, emb):
        h = self.conv(h) + self.temb(emb)[:, :, None, None]
        return nn.functional.silu(self.norm(h))


class DenoiserNet(nn.Module):
    """Three-level encoder/decoder with time features added to every block.

    Decoder blocks upsample by nearest neighbour and concatenate the encoder
    feature map of the same resolution. The output is divided by ``sigma(t)``
    so the raw network predicts a unit-scale noise direction. Input height and
    width must be divisible by 4.
    """

    def __init__(self, sched: VeSchedule, config: NetConfig = NetConfig(), seed: int = 0):
        super().__init__()
        self.sched = sched
        self.config = config
        self.seed = seed
        c1, c2, c3 = config.channels
        emb_dim = config.n_features
        g = config.groups
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.embed = nn.Linear(config.n_features, emb_dim)
            self.conv_in = nn.Conv2d(1, c1, 3, padding=1)
            self.enc1 = _Block(c1, c1, emb_dim, g)
            self.enc2 = _Block(c1, c2, emb_dim, g, stride=2)
            self.enc3 = _Block(c2, c3, emb_dim, g, stride=2)
            self.mid = _Block(c3, c3, emb_dim, g)
            self.dec2 = _Block(c3 + c2, c2, emb_dim, g)
            self.dec1 = _Block(c2 + c1, c1, emb_dim, g)
            self.conv_out = nn.Conv2d(c1, 1, 3, padding=1)
        emb = TimeEmbedding(config.n_features, config.fourier_scale, seed)
        self.register_buffer("freqs", torch.tensor(emb.frequencies, dtype=torch.float32))
        self.log_ratio = math.log(sched.sigma_max / sched.sigma_min)

    def sigma_t(self, t: torch.Tensor) -> torch.Tensor:
        return self.sched.sigma_min * torch.exp(t * self.log_ratio)

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        """``x``: ``(B, H, W)``; ``t``: ``(B,)``. Returns the score, ``(B, H, W)``."""
        proj = 2 * math.pi * t[:, None] * self.freqs[None, :]
        emb = nn.functional.silu(self.embed(torch.cat([torch.sin(proj), torch.cos(proj)], -1)))
        sig = self.sigma_t(t)[:, None, None, None]
        h0 = self.conv_in(x[:, None] / torch.sqrt(sig**2 + self.config.data_std**2))
        h1 = self.enc1(h0, emb)
        h2 = self.enc2(h1, emb)
        h3 = self.mid(self.enc3(h2, emb), emb)
        up = nn.functional.interpolate(h3, scale_factor=2, mode="nearest")
        d2 = self.dec2(torch.cat([up, h2], 1), emb)
        up = nn.functional.interpolate(d2, scale_factor=2, mode="nearest")
        d1 = self.dec1(torch.cat([up, h1], 1), emb)
        return (self.conv_out(d1) / sig)[:, 0]


class LearnedScore(ScoreModel):
    """Numpy-facing wrapper around a :class:`DenoiserNet`."""

    kind = "learned"

    def __init__(self, net: DenoiserNet, chunk: int = 256):
        self.net = net.eval()
        self.chunk = chunk

    def evaluate(self, x, t):
        x = np.asarray(x)
        single = x.ndim == 2
        xb = x[None] if single else x
        tb = np.broadcast_to(np.asarray(t, dtype=np.float64), (xb.shape[0],))
        out = np.empty(xb.shape, dtype=np.float64)
        with torch.no_grad():
            for lo in range(0, xb.shape[0], self.chunk):
                hi = lo + self.chunk
                xs = torch.from_numpy(np.ascontiguousarray(xb[lo:hi], dtype=np.float32))
                ts = torch.from_numpy(np.ascontiguousarray(tb[lo:hi], dtype=np.float32))
                out[lo:hi] = self.net(xs, ts).numpy()
        return out[0] if single else out


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

def dsm_loss(model, sched: VeSchedule, batch, rng: np.random.Generator) -> torch.Tensor:
    """Weighted denoising score matching loss, averaged over the batch.

    For each image: ``t ~ U(0, 1]``, ``x_t = perturb(x0, t, z)`` and the term is
    ``std(t)^2 * || model(x_t, t) + z / std(t) ||^2`` with the squared norm summed
    over pixels. ``model`` takes and returns torch tensors.
    """
    x0 = np.asarray(batch, dtype=np.float64)
    if x0.ndim == 2:
        x0 = x0[None]
    if x0.shape[0] == 0:
        raise ValueError("dsm_loss needs a non-empty batch")
    n = x0.shape[0]
    t = T_EPS + (1.0 - T_EPS) * (1.0 - rng.uniform(size=n))  # in (T_EPS, 1]
    z = rng.standard_normal(x0.shape)
    xt = perturb(sched, x0, t, z)
    std = sched.marginal_std(t)
    dtype = next(model.parameters()).dtype if isinstance(model, nn.Module) else torch.float64
    score = model(torch.as_tensor(xt, dtype=dtype), torch.as_tensor(t, dtype=dtype))
    std_t = torch.as_tensor(std, dtype=dtype)[:, None, None]
    resid = std_t * score + torch.as_tensor(z, dtype=dtype)
    return (resid**2).sum(dim=(1, 2)).mean()


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite training loss {loss} at step {step}")
        self.step = step
        self.loss = loss


@dataclass(frozen=True)
class TrainOptions:
    lr: float = 1e-4
    steps: int = 1000
    batch: int = 16
    seed: int = 0
    optimizer: str = "adam"
    grad_clip: float | None = 1.0

    def to_dict(self) -> dict:
        return asdict(self)


def make_optimizer(net: nn.Module, opts: TrainOptions) -> torch.optim.Optimizer:
    if opts.optimizer == "adam":
        return torch.optim.Adam(net.parameters(), lr=opts.lr)
    if opts.optimizer == "sgd":
        return torch.optim.SGD(net.parameters(), lr=opts.lr)
    raise ValueError(f"unknown optimizer {opts.optimizer!r}")


def train(
    net: DenoiserNet,
    sched: VeSchedule,
    dataset: np.ndarray,
    opts: TrainOptions,
    *,
    optimizer: torch.optim.Optimizer | None = None,
    start_step: int = 0,
    checkpoint_dir=None,
    callback=None,
) -> tuple[DenoiserNet, list[float]]:
    """Fit ``net`` by DSM for steps ``start_step .. opts.steps - 1``.

    Minibatch indices, times and noise for step ``k`` come from a generator
    seeded with ``(opts.seed, k)``, so a run resumed at ``start_step`` with the
    saved optimizer state reproduces an uninterrupted run exactly.
    ``callback(step, net)`` is invoked after every update when given.
    """
    data = np.asarray(dataset, dtype=np.float64)
    if data.ndim != 3 or data.shape[0] == 0:
        raise ValueError("dataset must be a non-empty (N, H, W) array")
    optimizer = optimizer or make_optimizer(net, opts)
    trace: list[float] = []
    net.train()
    for step in range(start_step, opts.steps):
        rng = np.random.default_rng([opts.seed, step])
        idx = rng.integers(0, data.shape[0], size=opts.batch)
        loss = dsm_loss(net, sched, data[idx], rng)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise TrainingDiverged(step, value)
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        if opts.grad_clip:
            nn.utils.clip_grad_norm_(net.parameters(), opts.grad_clip)
        optimizer.step()
        trace.append(value)
        if callback is not None:
            callback(step, net)
        if step % 500 == 0:
            log.debug("step %d loss %.4f", step, value)
    net.eval()
    if checkpoint_dir is not None:
        save_checkpoint(checkpoint_dir, net, optimizer, opts.steps, opts)
    return net, trace


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def _flatten(tensors: dict[str, torch.Tensor]) -> tuple[bytes, list[dict]]:
    layout, chunks, offset = [], [], 0
    for name, tensor in tensors.items():
        arr = tensor.detach().cpu().numpy().astype("<f4").ravel()
        layout.append({"name": name, "shape": list(tensor.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.size
    return b"".join(chunks), layout


def _unflatten(blob: bytes, layout: list[dict]) -> dict[str, torch.Tensor]:
    flat = np.frombuffer(blob, dtype="<f4")
    out = {}
    for entry in layout:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        arr = flat[entry["offset"]:entry["offset"] + n].reshape(entry["shape"])
        out[entry["name"]] = torch.from_numpy(arr.copy())
    return out


def save_checkpoint(path, net: DenoiserNet, optimizer: torch.optim.Optimizer | None,
                    step: int, opts: TrainOptions | None = None, **extra) -> Path:
    """Write ``params.bin`` + ``manifest.json`` (and ``optim.bin`` when given)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    blob, layout = _flatten(net.state_dict())
    (path / "params.bin").write_bytes(blob)
    manifest = {
        "architecture": net.config.to_dict(),
        "seed": net.seed,
        "schedule": {"sigma_min": net.sched.sigma_min, "sigma_max": net.sched.sigma_max,
                     "n_steps": net.sched.n_steps},
        "step": int(step),
        "params": layout,
        "train_options": opts.to_dict() if opts else None,
        **extra,
    }
    if optimizer is not None:
        state = optimizer.state_dict()
        tensors = {}
        for pid, pstate in sorted(state["state"].items()):
            for key, value in sorted(pstate.items()):
                tensors[f"{pid}.{key}"] = torch.as_tensor(value, dtype=torch.float32).reshape(-1) \
                    if key == "step" else value
        oblob, olayout = _flatten(tensors)
        (path / "optim.bin").write_bytes(oblob)
        manifest["optimizer"] = {"kind": type(optimizer).__name__, "state": olayout,
                                 "param_groups": state["param_groups"]}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path, opts: TrainOptions | None = None):
    """Restore ``(net, optimizer_or_None, manifest)`` from :func:`save_checkpoint` output."""
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    sched = VeSchedule(**manifest["schedule"])
    net = DenoiserNet(sched, NetConfig.from_dict(manifest["architecture"]), manifest["seed"])
    net.load_state_dict(_unflatten((path / "params.bin").read_bytes(), manifest["params"]))
    net.eval()
    optimizer = None
    if "optimizer" in manifest and opts is not None:
        optimizer = make_optimizer(net, opts)
        flat = _unflatten((path / "optim.bin").read_bytes(), manifest["optimizer"]["state"])
        state: dict[int, dict] = {}
        for name, tensor in flat.items():
            pid, key = name.split(".", 1)
            if key == "step":
                tensor = tensor.reshape(())
            state.setdefault(int(pid), {})[key] = tensor
        optimizer.load_state_dict({"state": state, "param_groups": manifest["optimizer"]["param_groups"]})
    return net, optimizer, manifest
