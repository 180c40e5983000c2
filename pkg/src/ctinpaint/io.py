"""Raw float32 images/volumes with JSON sidecars, and 8-bit PGM previews."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .projector import Volume3D

__all__ = ["save_image", "load_image", "save_volume", "load_volume", "write_pgm", "read_pgm"]

_LE_F32 = np.dtype("<f4")


def _stem(path) -> Path:
    path = Path(path)
    return path.with_suffix("") if path.suffix in (".f32", ".json") else path


def save_image(path, image: np.ndarray, **meta) -> Path:
    """Write ``<path>.f32`` (row-major little-endian float32) and ``<path>.json``."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {image.shape}")
    if not np.all(np.isfinite(image)):
        raise ValueError("refusing to save non-finite image")
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    stem.with_suffix(".f32").write_bytes(np.ascontiguousarray(image, dtype=_LE_F32).tobytes())
    sidecar = {"rows": int(image.shape[0]), "cols": int(image.shape[1]), **meta}
    stem.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return stem.with_suffix(".f32")


def load_image(path) -> tuple[np.ndarray, dict]:
    stem = _stem(path)
    meta = json.loads(stem.with_suffix(".json").read_text())
    raw = np.frombuffer(stem.with_suffix(".f32").read_bytes(), dtype=_LE_F32)
    if raw.size != meta["rows"] * meta["cols"]:
        raise ValueError(f"{stem}: {raw.size} floats do not match {meta['rows']}x{meta['cols']}")
    return raw.reshape(meta["rows"], meta["cols"]).astype(np.float64), meta


def save_volume(path, vol: Volume3D, **meta) -> Path:
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    # x fastest on disk, matching the usual raw-volume convention
    stem.with_suffix(".f32").write_bytes(
        np.ascontiguousarray(vol.data.transpose(2, 1, 0), dtype=_LE_F32).tobytes()
    )
    sidecar = {"dims": list(vol.dims), "spacing": vol.spacing, "origin": list(vol.origin), **meta}
    stem.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return stem.with_suffix(".f32")


def load_volume(path) -> tuple[Volume3D, dict]:
    stem = _stem(path)
    meta = json.loads(stem.with_suffix(".json").read_text())
    nx, ny, nz = meta["dims"]
    raw = np.frombuffer(stem.with_suffix(".f32").read_bytes(), dtype=_LE_F32)
    data = raw.reshape(nz, ny, nx).transpose(2, 1, 0).astype(np.float64)
    return Volume3D(data, meta["spacing"], tuple(meta["origin"])), meta


def write_pgm(path, image: np.ndarray, vmin: float = 0.0, vmax: float = 1.0) -> Path:
    """Binary (P5) 8-bit PGM; values are mapped linearly from [vmin, vmax].

    A {0,1} mask therefore becomes 0 (metal) / 255 (background).
    """
    image = np.asarray(image, dtype=np.float64)
    scaled = np.clip((image - vmin) / (vmax - vmin), 0.0, 1.0)
    pixels = np.round(scaled * 255).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = f"P5\n{image.shape[1]} {image.shape[0]}\n255\n".encode("ascii")
    path.write_bytes(header + pixels.tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    """Read a P5 PGM written by :func:`write_pgm` as uint8."""
    blob = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while blob[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not blob[pos:pos + 1].isspace():
            pos += 1
        fields.append(blob[start:pos])
    if fields[0] != b"P5":
        raise ValueError("only binary P5 PGM is supported")
    cols, rows = int(fields[1]), int(fields[2])
    return np.frombuffer(blob[pos + 1:pos + 1 + rows * cols], dtype=np.uint8).reshape(rows, cols)
