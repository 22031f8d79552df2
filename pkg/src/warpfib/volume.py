"""Scalar 3D volumes: container, trilinear sampling, noise and raw file I/O.

Intensities are stored as float32 in an (nx, ny, nz) array; on disk the raw
stream is little-endian float32 in x-fastest order, described by a small JSON
header (``*.vol.json``) that points at the raw file (``*.vol.raw``).
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class VolumeFormatError(ValueError):
    """Raised when a volume header or raw stream is inconsistent."""


@dataclass(frozen=True)
class Volume3D:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float]
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or min(dims) < 2:
            raise ValueError(f"dims must be three integers >= 2, got {self.dims}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        origin = tuple(float(o) for o in self.origin)
        data = np.asarray(self.data, dtype=np.float32)
        if data.shape != dims:
            raise ValueError(f"data shape {data.shape} does not match dims {dims}")
        if not np.all(np.isfinite(data)):
            raise ValueError("volume intensities must be finite")
        data = data.copy()
        data.flags.writeable = False
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "data", data)

    @classmethod
    def from_function(cls, fn, dims, spacing, origin) -> "Volume3D":
        """Sample ``fn(points) -> values`` at every voxel center."""
        vol = cls(dims, spacing, origin, np.zeros(tuple(dims), dtype=np.float32))
        pts = vol.grid_points()
        values = np.asarray(fn(pts), dtype=np.float64)
        return vol.with_data(values.reshape(vol.dims, order="F"))

    @classmethod
    def over_box(cls, lo, hi, dims) -> "Volume3D":
        """Zero volume whose voxel centers span the closed box [lo, hi]."""
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        dims = tuple(int(d) for d in dims)
        spacing = (hi - lo) / (np.asarray(dims) - 1)
        return cls(dims, tuple(spacing), tuple(lo), np.zeros(dims, dtype=np.float32))

    def with_data(self, data) -> "Volume3D":
        return Volume3D(self.dims, self.spacing, self.origin, data)

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.asarray(self.origin)
        hi = lo + np.asarray(self.spacing) * (np.asarray(self.dims) - 1)
        return lo, hi

    def flat(self) -> np.ndarray:
        """Intensities in x-fastest order."""
        return self.data.ravel(order="F")

    def grid_points(self) -> np.ndarray:
        """Voxel-center coordinates (mm), x-fastest, shape (nx*ny*nz, 3)."""
        axes = [o + s * np.arange(n) for o, s, n in zip(self.origin, self.spacing, self.dims)]
        gx, gy, gz = np.meshgrid(*axes, indexing="ij")
        return np.stack([gx.ravel(order="F"), gy.ravel(order="F"), gz.ravel(order="F")], axis=1)

    def sample(self, points, return_grad=False):
        """Trilinear interpolation at physical points.

        Points outside the grid are clamped onto the boundary voxel layer;
        the gradient has zero component along any clamped axis.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        origin = np.asarray(self.origin)
        spacing = np.asarray(self.spacing)
        dims = np.asarray(self.dims)

        idx = (pts - origin) / spacing
        upper = dims - 1
        clamped = np.clip(idx, 0.0, upper)
        base = np.minimum(np.floor(clamped).astype(np.int64), upper - 1)
        frac = clamped - base

        vals = self.flat()
        nx, ny = self.dims[0], self.dims[1]
        i, j, k = base[:, 0], base[:, 1], base[:, 2]
        fx, fy, fz = frac[:, 0], frac[:, 1], frac[:, 2]

        def at(di, dj, dk):
            return vals[(i + di) + nx * ((j + dj) + ny * (k + dk))].astype(np.float64)

        c000, c100 = at(0, 0, 0), at(1, 0, 0)
        c010, c110 = at(0, 1, 0), at(1, 1, 0)
        c001, c101 = at(0, 0, 1), at(1, 0, 1)
        c011, c111 = at(0, 1, 1), at(1, 1, 1)

        c00 = c000 + fx * (c100 - c000)
        c10 = c010 + fx * (c110 - c010)
        c01 = c001 + fx * (c101 - c001)
        c11 = c011 + fx * (c111 - c011)
        c0 = c00 + fy * (c10 - c00)
        c1 = c01 + fy * (c11 - c01)
        out = c0 + fz * (c1 - c0)
        if not return_grad:
            return out

        gx = ((1 - fy) * (1 - fz) * (c100 - c000) + fy * (1 - fz) * (c110 - c010)
              + (1 - fy) * fz * (c101 - c001) + fy * fz * (c111 - c011))
        gy = (1 - fz) * (c10 - c00) + fz * (c11 - c01)
        gz = c1 - c0
        grad = np.stack([gx, gy, gz], axis=1) / spacing
        grad[(idx < 0) | (idx > upper)] = 0.0
        return out, grad


def add_gaussian_noise(vol: Volume3D, sigma: float, seed: int) -> Volume3D:
    if sigma < 0:
        raise ValueError(f"noise sigma must be non-negative, got {sigma}")
    if sigma == 0:
        return vol
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, sigma, size=vol.dims[::-1]).transpose(2, 1, 0)
    return vol.with_data(vol.data.astype(np.float64) + noise)


# ---------------------------------------------------------------------------
# file I/O


def _raw_path_for(header_path: Path) -> Path:
    name = header_path.name
    stem = name[: -len(".vol.json")] if name.endswith(".vol.json") else header_path.stem
    return header_path.with_name(stem + ".vol.raw")


def write_volume(vol: Volume3D, path) -> Path:
    """Write ``<name>.vol.json`` plus its ``<name>.vol.raw`` stream."""
    path = Path(path)
    raw_path = _raw_path_for(path)
    header = {
        "dims": list(vol.dims),
        "spacing": list(vol.spacing),
        "origin": list(vol.origin),
        "dtype": "f32",
        "order": "x-fastest",
        "raw": raw_path.name,
    }
    _atomic_write_bytes(raw_path, vol.flat().astype("<f4").tobytes())
    _atomic_write_bytes(path, (json.dumps(header, indent=2) + "\n").encode())
    return path


def read_volume(path) -> Volume3D:
    path = Path(path)
    try:
        header = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise VolumeFormatError(f"{path}: malformed header: {exc}") from exc
    for key in ("dims", "spacing", "origin"):
        if key not in header or len(header[key]) != 3:
            raise VolumeFormatError(f"{path}: header field '{key}' missing or not a triple")
    if header.get("dtype", "f32") != "f32":
        raise VolumeFormatError(f"{path}: unsupported dtype {header['dtype']!r}")
    if header.get("order", "x-fastest") != "x-fastest":
        raise VolumeFormatError(f"{path}: unsupported order {header['order']!r}")
    raw_path = path.with_name(header["raw"]) if "raw" in header else _raw_path_for(path)
    raw = np.frombuffer(raw_path.read_bytes(), dtype="<f4")
    dims = tuple(int(d) for d in header["dims"])
    expected = dims[0] * dims[1] * dims[2]
    if raw.size != expected:
        raise VolumeFormatError(
            f"{raw_path}: expected {expected} float32 values for dims {dims}, found {raw.size}")
    data = raw.reshape(dims, order="F")
    return Volume3D(dims, tuple(header["spacing"]), tuple(header["origin"]), data)


@dataclass(frozen=True)
class FrameSequence:
    """Frames T_{t_0..t_N} with t_0 = 0 (the reference) and t_N = 1."""

    frames: tuple[Volume3D, ...]
    times: tuple[float, ...]

    def __post_init__(self):
        frames = tuple(self.frames)
        times = tuple(float(t) for t in self.times)
        if len(frames) != len(times) or len(frames) < 2:
            raise ValueError("a sequence needs at least two frames with one time each")
        if times[0] != 0.0 or times[-1] != 1.0:
            raise ValueError(f"sequence times must start at 0 and end at 1, got {times}")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("sequence times must be strictly increasing")
        ref = frames[0]
        for f in frames[1:]:
            if (f.dims, f.spacing, f.origin) != (ref.dims, ref.spacing, ref.origin):
                raise ValueError("all frames must share dims, spacing and origin")
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "times", times)

    @property
    def reference(self) -> Volume3D:
        return self.frames[0]

    @property
    def n_frames(self) -> int:
        """Number of template frames (excludes the reference)."""
        return len(self.frames) - 1


def write_sequence(seq: FrameSequence, path, **extra) -> Path:
    path = Path(path)
    stem = path.name[: -len(".seq.json")] if path.name.endswith(".seq.json") else path.stem
    entries = []
    for i, (vol, t) in enumerate(zip(seq.frames, seq.times)):
        vol_path = path.with_name(f"{stem}_frame{i:03d}.vol.json")
        write_volume(vol, vol_path)
        entries.append({"t": t, "path": vol_path.name})
    manifest = {"frames": entries, **extra}
    _atomic_write_bytes(path, (json.dumps(manifest, indent=2) + "\n").encode())
    return path


def read_sequence(path) -> FrameSequence:
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise VolumeFormatError(f"{path}: malformed sequence manifest: {exc}") from exc
    frames, times = [], []
    try:
        for entry in manifest["frames"]:
            frames.append(read_volume(path.parent / entry["path"]))
            times.append(entry["t"])
        return FrameSequence(tuple(frames), tuple(times))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, VolumeFormatError):
            raise
        raise VolumeFormatError(f"{path}: invalid sequence manifest: {exc}") from exc


def _atomic_write_bytes(path: Path, payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)
