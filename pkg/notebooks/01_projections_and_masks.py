"""
Projecting a procedural knee
============================

Build one random knee phantom, project it at a few angles of the circular
trajectory and render the matching metal masks. Previews are written as PGM
files next to this script (``out_01/``).
"""

from pathlib import Path

import numpy as np

from ctinpaint.io import write_pgm
from ctinpaint.projector import (DESK_GEOMETRY, build_phantom, forward_project, random_knee_phantom,
                                 render_mask, synthetic_masks, trajectory_angles)

out = Path(__file__).with_name("out_01")
out.mkdir(exist_ok=True)

# The desk geometry keeps the C-arm distances and field of view of the
# 256x256 detector, on a 64x64 grid.
geom = DESK_GEOMETRY
angles = trajectory_angles(geom)
print(f"{len(angles)} views, detector {geom.detector_px}, pitch {geom.pixel_mm:.2f} mm")

# A phantom is a list of primitives; tissue and metal go to separate volumes.
spec = random_knee_phantom(seed=7)
tissue, metal = build_phantom(spec)
print(f"{len(spec.parts)} parts, {sum(p.tag == 'metal' for p in spec.parts)} implants")

###############################################################################
# Line integrals through tissue, and the metal footprint as a binary mask
# (1 = background, 0 = occluded by metal).

views = angles[::15]
projs = np.stack([forward_project(tissue, geom, a) for a in views])
masks = np.stack([render_mask(metal, geom, a) for a in views])
scale = projs.max()
for a, p, m in zip(views, projs, masks):
    write_pgm(out / f"proj_{a:05.1f}.pgm", p / scale)
    write_pgm(out / f"mask_{a:05.1f}.pgm", m)
    print(f"angle {a:5.1f}: max integral {p.max():.3f}, masked pixels {int((m == 0).sum())}")

###############################################################################
# Synthetic masks test generalization. Sizes are given on the 256-row detector
# and rescaled, so a 40 px circle becomes a 10 px circle here.

for kind, size in (("circle", 10), ("hrect", 8), ("vrect", 8)):
    m = synthetic_masks(kind, size, seed=1, shape=geom.detector_px)
    write_pgm(out / f"{kind}.pgm", m)
    print(f"{kind:6s}: {int((m == 0).sum())} masked pixels")
