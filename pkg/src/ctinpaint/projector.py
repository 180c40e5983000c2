"""Cone-beam forward projection of voxel phantoms and metal-mask rendering.

Coordinates are in millimetres with the isocenter at the origin. The source
orbits the z axis in the xy-plane; the flat detector sits opposite the source
with its v axis parallel to z. Row 0 of a projection is the top (+z) edge of
the detector.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

__all__ = [
    "Volume3D",
    "ProjectionGeometry",
    "CARM_GEOMETRY",
    "DESK_GEOMETRY",
    "Primitive",
    "PhantomSpec",
    "trajectory_angles",
    "ray_endpoints",
    "forward_project",
    "build_phantom",
    "random_knee_phantom",
    "render_mask",
    "synthetic_masks",
    "MASK_RANGES",
]


@dataclass
class Volume3D:
    """Isotropic voxel grid of attenuation values.

    ``data`` is indexed ``[ix, iy, iz]``; ``origin`` is the mm position of the
    outer corner of voxel ``(0, 0, 0)`` relative to the isocenter.
    """

    data: np.ndarray
    spacing: float
    origin: tuple[float, float, float] = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError(f"volume data must be 3-D and non-empty, got {self.data.shape}")
        if not self.spacing > 0:
            raise ValueError("voxel spacing must be positive")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("volume contains non-finite values")
        if self.origin is None:
            self.origin = tuple(-0.5 * n * self.spacing for n in self.data.shape)
        self.origin = tuple(float(o) for o in self.origin)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    @classmethod
    def zeros(cls, dims, spacing, origin=None) -> "Volume3D":
        return cls(np.zeros(tuple(dims)), spacing, origin)

    def voxel_centers(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Per-axis 1-D arrays of voxel-center coordinates (mm)."""
        return tuple(
            o + (np.arange(n) + 0.5) * self.spacing for o, n in zip(self.origin, self.dims)
        )

    def with_data(self, data) -> "Volume3D":
        return Volume3D(data, self.spacing, self.origin)


@dataclass(frozen=True)
class ProjectionGeometry:
    """Circular C-arm trajectory with a flat detector."""

    sdd: float = 1164.0
    sid: float = 622.0
    detector_px: tuple[int, int] = (256, 256)
    pixel_mm: float = 1.16
    angular_range_deg: float = 360.0
    angular_step_deg: float = 6.0

    def __post_init__(self):
        if not self.sdd > self.sid > 0:
            raise ValueError("geometry requires sdd > sid > 0")
        if len(self.detector_px) != 2 or min(self.detector_px) < 1:
            raise ValueError("detector_px must be two positive counts")
        if not self.pixel_mm > 0:
            raise ValueError("pixel_mm must be positive")
        object.__setattr__(self, "detector_px", tuple(int(n) for n in self.detector_px))

    @property
    def magnification(self) -> float:
        return self.sdd / self.sid

    def scaled(self, detector_px: tuple[int, int]) -> "ProjectionGeometry":
        """Same field of view on a coarser/finer detector (pixel pitch rescaled)."""
        factor = self.detector_px[0] / detector_px[0]
        return ProjectionGeometry(
            self.sdd, self.sid, tuple(detector_px), self.pixel_mm * factor,
            self.angular_range_deg, self.angular_step_deg,
        )


CARM_GEOMETRY = ProjectionGeometry()
DESK_GEOMETRY = CARM_GEOMETRY.scaled((64, 64))


def trajectory_angles(geom: ProjectionGeometry) -> np.ndarray:
    """Source angles in degrees: ``0, step, ..., range - step``."""
    ratio = geom.angular_range_deg / geom.angular_step_deg
    count = int(round(ratio))
    if geom.angular_step_deg <= 0 or count < 1 or abs(ratio - count) > 1e-9:
        raise ValueError(
            f"angular step {geom.angular_step_deg} does not divide range {geom.angular_range_deg}"
        )
    return np.arange(count) * float(geom.angular_step_deg)


def ray_endpoints(geom: ProjectionGeometry, angle: float) -> tuple[np.ndarray, np.ndarray]:
    """Source position ``(3,)`` and detector pixel centers ``(rows, cols, 3)``."""
    theta = math.radians(angle)
    c, s = math.cos(theta), math.sin(theta)
    source = np.array([geom.sid * c, geom.sid * s, 0.0])
    det_center = -(geom.sdd - geom.sid) * np.array([c, s, 0.0])
    u_axis = np.array([-s, c, 0.0])
    v_axis = np.array([0.0, 0.0, 1.0])
    rows, cols = geom.detector_px
    u = (np.arange(cols) - (cols - 1) / 2.0) * geom.pixel_mm
    v = ((rows - 1) / 2.0 - np.arange(rows)) * geom.pixel_mm
    pixels = (
        det_center[None, None, :]
        + u[None, :, None] * u_axis[None, None, :]
        + v[:, None, None] * v_axis[None, None, :]
    )
    return source, pixels


@numba.njit(cache=True)
def _siddon_ray(data, origin, spacing, src, dst):
    nx, ny, nz = data.shape
    dims = (nx, ny, nz)
    d = np.empty(3)
    for k in range(3):
        d[k] = dst[k] - src[k]
    length = math.sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2])
    if length == 0.0:
        return 0.0

    a_min = 0.0
    a_max = 1.0
    for k in range(3):
        lo = origin[k]
        hi = origin[k] + dims[k] * spacing
        if d[k] == 0.0:
            if src[k] <= lo or src[k] >= hi:
                return 0.0
        else:
            a0 = (lo - src[k]) / d[k]
            a1 = (hi - src[k]) / d[k]
            if a0 > a1:
                a0, a1 = a1, a0
            a_min = max(a_min, a0)
            a_max = min(a_max, a1)
    if a_min >= a_max:
        return 0.0

    idx = np.empty(3, np.int64)
    a_next = np.empty(3)
    a_step = np.empty(3)
    step_dir = np.empty(3, np.int64)
    for k in range(3):
        # seed the index from the entry point, nudged inward to avoid face ties
        pos = src[k] + (a_min + 1e-12 * (a_max - a_min)) * d[k]
        i = int(math.floor((pos - origin[k]) / spacing))
        i = min(max(i, 0), dims[k] - 1)
        idx[k] = i
        if d[k] > 0.0:
            step_dir[k] = 1
            a_next[k] = (origin[k] + (i + 1) * spacing - src[k]) / d[k]
            a_step[k] = spacing / d[k]
        elif d[k] < 0.0:
            step_dir[k] = -1
            a_next[k] = (origin[k] + i * spacing - src[k]) / d[k]
            a_step[k] = -spacing / d[k]
        else:
            step_dir[k] = 0
            a_next[k] = np.inf
            a_step[k] = np.inf

    total = 0.0
    a_cur = a_min
    while a_cur < a_max:
        k = 0
        if a_next[1] < a_next[k]:
            k = 1
        if a_next[2] < a_next[k]:
            k = 2
        a_end = min(a_next[k], a_max)
        if a_end > a_cur:
            total += data[idx[0], idx[1], idx[2]] * (a_end - a_cur)
        a_cur = a_end
        idx[k] += step_dir[k]
        a_next[k] += a_step[k]
        if idx[k] < 0 or idx[k] >= dims[k]:
            break
    return total * length


@numba.njit(cache=True)
def _project_rays(data, origin, spacing, src, pixels):
    rows, cols = pixels.shape[0], pixels.shape[1]
    out = np.zeros((rows, cols))
    for r in range(rows):
        for c in range(cols):
            out[r, c] = _siddon_ray(data, origin, spacing, src, pixels[r, c])
    return out


def forward_project(vol: Volume3D, geom: ProjectionGeometry, angle: float) -> np.ndarray:
    """Line integrals of ``vol`` from the point source through every detector pixel.

    Exact ray/voxel intersection lengths (incremental Siddon traversal). Rays
    that miss the volume integrate to zero.

    Returns
    -------
    ndarray of shape ``geom.detector_px``.
    """
    source, pixels = ray_endpoints(geom, angle)
    return _project_rays(
        np.ascontiguousarray(vol.data, dtype=np.float64),
        np.asarray(vol.origin, dtype=np.float64),
        float(vol.spacing),
        source,
        np.ascontiguousarray(pixels),
    )


# --------------------------------------------------------------------------
# phantoms
# --------------------------------------------------------------------------

_KINDS = ("ellipsoid", "cylinder", "plate")


def _rotation(angles_deg) -> np.ndarray:
    """Rotation matrix from z-y-x Euler angles (degrees)."""
    az, ay, ax = np.radians(angles_deg)
    cz, sz = np.cos(az), np.sin(az)
    cy, sy = np.cos(ay), np.sin(ay)
    cx, sx = np.cos(ax), np.sin(ax)
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    return rz @ ry @ rx


@dataclass(frozen=True)
class Primitive:
    """One solid in a phantom.

    ``axes`` are semi-axes in the primitive's local frame. For a cylinder the
    first two are the cross-section radii and the third is the half length
    along local z; for a plate they are the box half extents, and ``holes``
    lists ``(x, y, radius)`` through-holes along local z.
    """

    kind: str
    center: tuple[float, float, float]
    axes: tuple[float, float, float]
    attenuation: float
    tag: str = "tissue"
    rotation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    holes: tuple[tuple[float, float, float], ...] = ()

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        if self.tag not in ("tissue", "metal"):
            raise ValueError(f"tag must be 'tissue' or 'metal', got {self.tag!r}")
        if self.attenuation < 0:
            raise ValueError("attenuation must be non-negative")
        if min(self.axes) <= 0:
            raise ValueError("primitive axes must be positive")

    def bounding_radius(self) -> float:
        a = np.asarray(self.axes, dtype=float)
        if self.kind == "ellipsoid":
            return float(a.max())
        if self.kind == "cylinder":
            return float(math.hypot(a[:2].max(), a[2]))
        return float(np.linalg.norm(a))

    def contains(self, x, y, z) -> np.ndarray:
        """Boolean occupancy at world points (broadcast arrays, mm)."""
        rot = _rotation(self.rotation)
        p = np.stack(np.broadcast_arrays(x, y, z), axis=-1) - np.asarray(self.center)
        local = p @ rot  # row vectors times R == R^T applied to each point
        ax, ay, az = self.axes
        lx, ly, lz = local[..., 0], local[..., 1], local[..., 2]
        if self.kind == "ellipsoid":
            return (lx / ax) ** 2 + (ly / ay) ** 2 + (lz / az) ** 2 <= 1.0
        if self.kind == "cylinder":
            return ((lx / ax) ** 2 + (ly / ay) ** 2 <= 1.0) & (np.abs(lz) <= az)
        inside = (np.abs(lx) <= ax) & (np.abs(ly) <= ay) & (np.abs(lz) <= az)
        for hx, hy, hr in self.holes:
            inside &= (lx - hx) ** 2 + (ly - hy) ** 2 > hr**2
        return inside


@dataclass(frozen=True)
class PhantomSpec:
    """Phantom recipe: a voxel grid plus primitives painted in list order."""

    seed: int
    parts: tuple[Primitive, ...]
    dims: tuple[int, int, int] = (64, 64, 64)
    spacing: float = 2.0

    def __post_init__(self):
        object.__setattr__(self, "parts", tuple(self.parts))


def build_phantom(spec: PhantomSpec) -> tuple[Volume3D, Volume3D]:
    """Rasterize ``spec`` at voxel centers into (tissue, metal) volumes.

    Later parts overwrite earlier ones within the same volume, so a marrow
    ellipsoid listed after its cortical shell carves the shell's interior.
    """
    tissue = Volume3D.zeros(spec.dims, spec.spacing)
    metal = Volume3D.zeros(spec.dims, spec.spacing)
    lo = np.asarray(tissue.origin)
    hi = lo + np.asarray(spec.dims) * spec.spacing
    xs, ys, zs = tissue.voxel_centers()
    X, Y, Z = xs[:, None, None], ys[None, :, None], zs[None, None, :]
    for i, part in enumerate(spec.parts):
        # sphere-vs-box distance: conservative test for "entirely outside"
        c = np.asarray(part.center, dtype=float)
        gap = np.maximum(0.0, np.maximum(lo - c, c - hi))
        if np.linalg.norm(gap) > part.bounding_radius():
            raise ValueError(f"part {i} ({part.kind}) lies entirely outside the volume")
        target = metal if part.tag == "metal" else tissue
        target.data[part.contains(X, Y, Z)] = part.attenuation
    return tissue, metal


SOFT_TISSUE = 0.02
CORTICAL_BONE = 0.06
MARROW = 0.03
METAL = 0.5


def random_knee_phantom(
    seed: int,
    dims: tuple[int, int, int] = (64, 64, 64),
    spacing: float = 2.0,
    n_implants: tuple[int, int] = (1, 4),
) -> PhantomSpec:
    """Procedural single-leg knee: soft tissue, femur, tibia, patella, implants.

    Implant centers are drawn uniformly inside the soft-tissue bounding box.
    """
    rng = np.random.default_rng(seed)
    half = 0.5 * np.asarray(dims) * spacing
    parts: list[Primitive] = []

    # leg axis runs along z; a slight tilt and in-plane offset per phantom
    tilt = (rng.uniform(0, 360), rng.uniform(-6, 6), 0.0)
    leg_r = rng.uniform(0.62, 0.78, size=2) * half[:2].min()
    leg_c = np.r_[rng.uniform(-0.08, 0.08, size=2) * half[:2], 0.0]
    parts.append(Primitive("cylinder", tuple(leg_c), (leg_r[0], leg_r[1], 2 * half[2]),
                           SOFT_TISSUE, rotation=tilt))

    joint_z = rng.uniform(-0.15, 0.15) * half[2]
    bone_r = rng.uniform(0.18, 0.24) * half[:2].min()
    shift = rng.uniform(-0.15, 0.15, size=2) * leg_r
    gap = rng.uniform(0.04, 0.08) * half[2]
    # femur shaft and condyles above the joint, tibia below
    femur_c = (leg_c[0] + shift[0], leg_c[1] + shift[1], joint_z + gap + half[2])
    tibia_c = (leg_c[0] + shift[0], leg_c[1] + shift[1], joint_z - gap - half[2])
    for c, r in ((femur_c, bone_r), (tibia_c, bone_r * rng.uniform(0.9, 1.1))):
        parts.append(Primitive("cylinder", c, (r, r, half[2]), CORTICAL_BONE, rotation=tilt))
        parts.append(Primitive("cylinder", c, (0.6 * r, 0.6 * r, half[2]), MARROW, rotation=tilt))
    condyle = rng.uniform(1.6, 2.0) * bone_r
    parts.append(Primitive(
        "ellipsoid", (femur_c[0], femur_c[1], joint_z + gap + 0.5 * condyle),
        (condyle, 0.8 * condyle, 0.7 * condyle), CORTICAL_BONE, rotation=tilt,
    ))
    parts.append(Primitive(
        "ellipsoid", (tibia_c[0], tibia_c[1], joint_z - gap - 0.4 * condyle),
        (0.95 * condyle, 0.8 * condyle, 0.5 * condyle), CORTICAL_BONE, rotation=tilt,
    ))
    pat_dir = rng.uniform(0, 2 * np.pi)
    pat_off = 0.75 * leg_r.min()
    parts.append(Primitive(
        "ellipsoid",
        (leg_c[0] + pat_off * np.cos(pat_dir), leg_c[1] + pat_off * np.sin(pat_dir), joint_z + 2 * gap),
        (0.5 * bone_r, 0.9 * bone_r, 1.1 * bone_r), CORTICAL_BONE,
        rotation=(np.degrees(pat_dir), 0.0, 0.0),
    ))

    lo_box = leg_c - np.r_[leg_r, half[2]] * np.r_[0.8, 0.8, 0.8]
    hi_box = leg_c + np.r_[leg_r, half[2]] * np.r_[0.8, 0.8, 0.8]
    wire_r = max(1.0, 0.75 * spacing)
    for _ in range(rng.integers(n_implants[0], n_implants[1] + 1)):
        center = tuple(rng.uniform(lo_box, hi_box))
        rot = tuple(rng.uniform([0, 0, 0], [360, 180, 360]))
        kind = rng.choice(["kwire", "screw", "plate"])
        if kind == "kwire":
            length = rng.uniform(0.25, 0.5) * half[2]
            parts.append(Primitive("cylinder", center, (wire_r, wire_r, length), METAL, "metal", rot))
        elif kind == "screw":
            r = rng.uniform(1.5, 2.5) * wire_r
            length = rng.uniform(0.15, 0.3) * half[2]
            parts.append(Primitive("cylinder", center, (r, r, length), METAL, "metal", rot))
        else:
            w = rng.uniform(2.5, 4.0) * wire_r
            length = rng.uniform(0.3, 0.5) * half[2]
            n_holes = int(rng.integers(2, 5))
            hole_y = np.linspace(-0.7 * length, 0.7 * length, n_holes)
            holes = tuple((0.0, float(y), 0.45 * w) for y in hole_y)
            parts.append(Primitive("plate", center, (w, length, max(1.0, 0.6 * spacing)),
                                   METAL, "metal", rot, holes))
    return PhantomSpec(seed, tuple(parts), tuple(dims), spacing)


# --------------------------------------------------------------------------
# masks
# --------------------------------------------------------------------------

def render_mask(
    metal: Volume3D, geom: ProjectionGeometry, angle: float, threshold: float | None = None
) -> np.ndarray:
    """Binary mask with 0 where the metal line integral exceeds ``threshold``.

    ``threshold=None`` uses 1e-3 of the largest metal integral in this view.
    """
    proj = forward_project(metal, geom, angle)
    if threshold is None:
        peak = proj.max()
        if peak <= 0:
            return np.ones_like(proj)
        threshold = 1e-3 * peak
    elif not threshold > 0:
        raise ValueError("threshold must be positive")
    return np.where(proj > threshold, 0.0, 1.0)


# allowed sizes on the 256-pixel detector; they scale with detector height
MASK_RANGES = {"circle": (20.0, 60.0), "hrect": (20.0, 50.0), "vrect": (20.0, 50.0)}


def synthetic_masks(kind: str, size_px: float, seed, shape=(256, 256)) -> np.ndarray:
    """Circle or full-span rectangle mask (zeros inside the shape).

    ``size_px`` is the circle diameter or the band thickness; it must lie in
    :data:`MASK_RANGES` scaled by ``shape[0] / 256``. The shape is placed
    uniformly at random so that it stays fully inside the image.
    """
    if kind not in MASK_RANGES:
        raise ValueError(f"unknown mask kind {kind!r}")
    rows, cols = shape
    lo, hi = (v * rows / 256.0 for v in MASK_RANGES[kind])
    if not lo - 1e-9 <= size_px <= hi + 1e-9:
        raise ValueError(f"{kind} size {size_px} outside [{lo:g}, {hi:g}] for a {rows}-row image")
    rng = np.random.default_rng(seed)
    mask = np.ones(shape)
    if kind == "circle":
        r = size_px / 2.0
        cy = rng.uniform(r, rows - r)
        cx = rng.uniform(r, cols - r)
        yy, xx = np.mgrid[0:rows, 0:cols] + 0.5
        mask[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = 0.0
    else:
        width = int(round(size_px))
        extent = rows if kind == "hrect" else cols
        start = int(rng.integers(0, extent - width + 1))
        if kind == "hrect":
            mask[start:start + width, :] = 0.0
        else:
            mask[:, start:start + width] = 0.0
    return mask
