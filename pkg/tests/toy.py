"""Tiny experiment configs that run the whole CLI pipeline in seconds."""
from dataclasses import replace

from ctinpaint.config import ExperimentConfig, PathsSection, PhantomSection, SamplerSection, TrainSection
from ctinpaint.projector import CARM_GEOMETRY
from ctinpaint.score import NetConfig


def tiny_config(out, seed=3, views_step=90.0, n_volumes=3, detector=16, steps=4, **sections):
    geom = replace(CARM_GEOMETRY.scaled((detector, detector)), angular_step_deg=views_step)
    cfg = ExperimentConfig(
        seed=seed,
        geometry=geom,
        phantom=PhantomSection(n_volumes=n_volumes, dims=(16, 16, 16), spacing=8.0),
        model=NetConfig(channels=(8, 16, 16), n_features=16, groups=4),
        train=TrainSection(steps=steps, batch=4),
        sampler=SamplerSection(n_steps=5, batch=4, ablate_steps=(5, 10, 20), ablate_images=2),
        paths=PathsSection(out=str(out)),
    )
    return replace(cfg, **sections)
