"""Experiment configuration: a JSON document with one section per stage.

Every stochastic stage draws from a labeled substream of the single master
``seed`` (see :func:`substream`), so two commands sharing a config see the same
phantoms, minibatches and sampler noise.
"""
from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .projector import DESK_GEOMETRY, MASK_RANGES, ProjectionGeometry
from .sampler import SamplerConfig
from .score import NetConfig, TrainOptions
from .sde import VeSchedule

__all__ = [
    "PhantomSection",
    "TrainSection",
    "SamplerSection",
    "EvalSection",
    "PathsSection",
    "ExperimentConfig",
    "substream",
    "load_config",
]

FAMILIES = ("metal", "circle", "hrect", "vrect")


def substream(seed: int, *labels) -> int:
    """32-bit seed derived from ``seed`` and a path of string/int labels."""
    key = [int(seed)]
    for label in labels:
        key.append(zlib.crc32(label.encode()) if isinstance(label, str) else int(label))
    return int(np.random.SeedSequence(key).generate_state(1)[0])


def _tuple(v):
    return tuple(v) if isinstance(v, (list, tuple)) else v


@dataclass(frozen=True)
class PhantomSection:
    n_volumes: int = 10
    dims: tuple[int, int, int] = (64, 64, 64)
    spacing: float = 2.0
    n_implants: tuple[int, int] = (1, 4)
    test_fraction: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "dims", _tuple(self.dims))
        object.__setattr__(self, "n_implants", _tuple(self.n_implants))
        if self.n_volumes < 2:
            raise ValueError("need at least two volumes for a train/test split")
        if not 0 < self.test_fraction < 1:
            raise ValueError("test_fraction must lie in (0, 1)")

    @property
    def n_test_volumes(self) -> int:
        return max(1, int(round(self.test_fraction * self.n_volumes)))


@dataclass(frozen=True)
class TrainSection:
    lr: float = 2e-3
    steps: int = 3000
    batch: int = 32
    grad_clip: float | None = 1.0

    def options(self, seed: int) -> TrainOptions:
        return TrainOptions(lr=self.lr, steps=self.steps, batch=self.batch, seed=seed,
                            grad_clip=self.grad_clip)


@dataclass(frozen=True)
class SamplerSection:
    n_steps: int = 200
    snr: float = 0.4
    corrector_iters: int = 1
    batch: int = 64
    ablate_snr: tuple[float, ...] = (0.2, 0.4, 0.6)
    ablate_steps: tuple[int, ...] = (500, 1000, 2000)
    ablate_images: int = 8

    def __post_init__(self):
        object.__setattr__(self, "ablate_snr", _tuple(self.ablate_snr))
        object.__setattr__(self, "ablate_steps", _tuple(self.ablate_steps))
        SamplerConfig(self.n_steps, self.snr, self.corrector_iters)

    def config(self, seed: int, n_steps: int | None = None, snr: float | None = None) -> SamplerConfig:
        return SamplerConfig(n_steps or self.n_steps, snr or self.snr, self.corrector_iters, seed)


@dataclass(frozen=True)
class EvalSection:
    peak: float = 1.0
    families: tuple[str, ...] = FAMILIES
    # mask sizes on a 256-row detector, rescaled to the configured detector
    mask_ranges: dict = field(default_factory=lambda: {k: list(v) for k, v in MASK_RANGES.items()})
    metal_threshold: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "families", _tuple(self.families))
        unknown = set(self.families) - set(FAMILIES)
        if unknown:
            raise ValueError(f"unknown mask families {sorted(unknown)}")


@dataclass(frozen=True)
class PathsSection:
    out: str = "run"
    data: str = "data"
    checkpoint: str = "checkpoint"
    inpaint: str = "inpaint"
    ablate: str = "ablate"
    eval: str = "eval"

    def resolve(self, name: str, base: Path | None = None) -> Path:
        root = Path(self.out) if base is None else base / self.out
        return root / getattr(self, name)


_SECTIONS = {
    "geometry": ProjectionGeometry,
    "phantom": PhantomSection,
    "schedule": VeSchedule,
    "model": NetConfig,
    "train": TrainSection,
    "sampler": SamplerSection,
    "eval": EvalSection,
    "paths": PathsSection,
}


def _section_from(cls, data: dict):
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ValueError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    return cls(**{k: _tuple(v) if k != "mask_ranges" else v for k, v in data.items()})


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    geometry: ProjectionGeometry = DESK_GEOMETRY
    phantom: PhantomSection = PhantomSection()
    schedule: VeSchedule = VeSchedule()
    model: NetConfig = NetConfig()
    train: TrainSection = TrainSection()
    sampler: SamplerSection = SamplerSection()
    eval: EvalSection = EvalSection()
    paths: PathsSection = PathsSection()

    def to_dict(self) -> dict:
        out = {"seed": self.seed}
        for name in _SECTIONS:
            out[name] = json.loads(json.dumps(asdict(getattr(self, name))))
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        unknown = set(data) - set(_SECTIONS) - {"seed"}
        if unknown:
            raise ValueError(f"unknown config sections {sorted(unknown)}")
        kwargs = {name: _section_from(sec, data[name]) for name, sec in _SECTIONS.items() if name in data}
        if "seed" in data:
            kwargs["seed"] = int(data["seed"])
        return cls(**kwargs)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def loads(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(json.loads(text))

    def with_overrides(self, seed: int | None = None, out: str | None = None) -> "ExperimentConfig":
        cfg = self
        if seed is not None:
            cfg = replace(cfg, seed=int(seed))
        if out is not None:
            cfg = replace(cfg, paths=replace(cfg.paths, out=str(out)))
        return cfg

    def path(self, name: str) -> Path:
        return self.paths.resolve(name)


def load_config(path) -> ExperimentConfig:
    return ExperimentConfig.loads(Path(path).read_text())
