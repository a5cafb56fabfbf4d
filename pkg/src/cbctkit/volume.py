"""Voxel volume and projection containers with sidecar-file I/O.

File format (shared by volumes and projection stacks): a JSON text header
``<name>.json`` next to a raw little-endian float32 payload ``<name>.raw``.
Volume payloads are stored x-fastest, then y, then z; projection payloads are
stored u-fastest, then v, then view.  Both round-trip bit-exactly.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import HeaderError, PayloadMismatchError, UnitError

UNIT_HU = "HU"
UNIT_NORMALIZED = "normalized"
UNIT_LINE_INTEGRAL = "line-integral"

# HU normalization window: -1500..1000 HU maps linearly onto -1..1, no clipping.
HU_LO = -1500.0
HU_HI = 1000.0
HU_HALF_RANGE = (HU_HI - HU_LO) / 2.0  # 1250


def _strip_sidecar_suffix(path: str) -> str:
    if path.endswith(".json") or path.endswith(".raw"):
        return os.path.splitext(path)[0]
    return path


@dataclass(frozen=True)
class VoxelVolume:
    """A 3D scalar grid with physical spacing and origin.

    ``values`` has shape (nx, ny, nz) and float32 dtype; ``origin`` is the
    world position (mm) of the center of voxel (0, 0, 0).  Instances are
    immutable: the value array is marked read-only on construction.
    """

    values: np.ndarray
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    unit: str = UNIT_HU

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float32)
        if arr.ndim != 3:
            raise ValueError(f"volume values must be 3D, got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ValueError(f"volume dims must all be >= 1, got {arr.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or any(s <= 0 for s in spacing):
            raise ValueError(f"spacing must be 3 positive floats, got {self.spacing}")
        origin = tuple(float(o) for o in self.origin)
        if len(origin) != 3:
            raise ValueError(f"origin must have 3 components, got {self.origin}")
        if self.unit not in (UNIT_HU, UNIT_NORMALIZED, UNIT_LINE_INTEGRAL):
            raise ValueError(f"unknown unit tag {self.unit!r}")
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.values.shape

    def with_values(self, values: np.ndarray, unit: str | None = None) -> "VoxelVolume":
        """Same grid, new values (and optionally a new unit tag)."""
        return VoxelVolume(values, self.spacing, self.origin, unit or self.unit)

    def voxel_centers(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """World coordinates (mm) of voxel centers along each axis."""
        nx, ny, nz = self.dims
        sx, sy, sz = self.spacing
        ox, oy, oz = self.origin
        return (
            ox + sx * np.arange(nx),
            oy + sy * np.arange(ny),
            oz + sz * np.arange(nz),
        )


def centered_grid(dims, spacing, unit: str = UNIT_HU) -> VoxelVolume:
    """Zero volume whose voxel centers are symmetric about the world origin."""
    dims = tuple(int(d) for d in dims)
    spacing = tuple(float(s) for s in spacing)
    origin = tuple(-(d - 1) / 2.0 * s for d, s in zip(dims, spacing))
    return VoxelVolume(np.zeros(dims, dtype=np.float32), spacing, origin, unit)


@dataclass(frozen=True)
class ProjectionStack:
    """Ordered set of 2D detector images (line integrals) with per-view angles.

    ``values`` has shape (n_views, n_u, n_v); ``angles`` are gantry angles in
    degrees, strictly increasing within one scan.
    """

    values: np.ndarray
    pitch: tuple[float, float]
    angles: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float32)
        if arr.ndim != 3:
            raise ValueError(f"projection values must be 3D, got shape {arr.shape}")
        pitch = tuple(float(p) for p in self.pitch)
        if len(pitch) != 2 or any(p <= 0 for p in pitch):
            raise ValueError(f"pitch must be 2 positive floats, got {self.pitch}")
        angles = np.asarray(self.angles, dtype=np.float64)
        if angles.ndim != 1 or angles.shape[0] != arr.shape[0]:
            raise ValueError(
                f"need one angle per view: {angles.shape} vs {arr.shape[0]} views"
            )
        if angles.size > 1 and not np.all(np.diff(angles) > 0):
            raise ValueError("view angles must be strictly increasing")
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        angles = np.ascontiguousarray(angles)
        angles.flags.writeable = False
        object.__setattr__(self, "values", arr)
        object.__setattr__(self, "pitch", pitch)
        object.__setattr__(self, "angles", angles)

    @property
    def n_views(self) -> int:
        return self.values.shape[0]

    @property
    def det(self) -> tuple[int, int]:
        return self.values.shape[1], self.values.shape[2]

    def select_views(self, indices) -> "ProjectionStack":
        """Sub-stack at the given view indices (bit-exact value subset)."""
        idx = np.asarray(indices, dtype=np.int64)
        return ProjectionStack(self.values[idx], self.pitch, self.angles[idx])


def write_volume(vol: VoxelVolume, path: str) -> None:
    """Write ``<path>.json`` + ``<path>.raw`` (payload x-fastest, then y, z)."""
    base = _strip_sidecar_suffix(path)
    header = {
        "dims": list(vol.dims),
        "spacing_mm": list(vol.spacing),
        "origin_mm": list(vol.origin),
        "dtype": "f32le",
        "unit": vol.unit,
    }
    payload = np.ascontiguousarray(vol.values.transpose(2, 1, 0), dtype="<f4")
    with open(base + ".json", "w", encoding="utf-8") as fh:
        json.dump(header, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(base + ".raw", "wb") as fh:
        fh.write(payload.tobytes())


def read_volume(path: str) -> VoxelVolume:
    """Inverse of :func:`write_volume`; bit-exact round trip.

    Raises FileNotFoundError for a missing file, HeaderError for a malformed
    header, PayloadMismatchError when the payload length disagrees with dims.
    """
    base = _strip_sidecar_suffix(path)
    header_path, raw_path = base + ".json", base + ".raw"
    if not os.path.exists(header_path):
        raise FileNotFoundError(header_path)
    if not os.path.exists(raw_path):
        raise FileNotFoundError(raw_path)
    with open(header_path, "r", encoding="utf-8") as fh:
        try:
            header = json.load(fh)
        except json.JSONDecodeError as exc:
            raise HeaderError(f"{header_path}: not valid JSON ({exc})") from exc
    for key in ("dims", "spacing_mm", "origin_mm", "dtype", "unit"):
        if key not in header:
            raise HeaderError(f"{header_path}: missing key {key!r}")
    if header["dtype"] != "f32le":
        raise HeaderError(f"{header_path}: unsupported dtype {header['dtype']!r}")
    dims = header["dims"]
    if len(dims) != 3 or any(int(d) < 1 for d in dims):
        raise HeaderError(f"{header_path}: bad dims {dims}")
    nx, ny, nz = (int(d) for d in dims)
    expected = nx * ny * nz * 4
    blob = open(raw_path, "rb").read()
    if len(blob) != expected:
        raise PayloadMismatchError(
            f"{raw_path}: payload is {len(blob)} bytes, header implies {expected}"
        )
    flat = np.frombuffer(blob, dtype="<f4")
    values = flat.reshape(nz, ny, nx).transpose(2, 1, 0)
    return VoxelVolume(values, header["spacing_mm"], header["origin_mm"], header["unit"])


def write_projections(stack: ProjectionStack, path: str) -> None:
    """Write ``<path>.json`` + ``<path>.raw`` (payload u-fastest, then v, view)."""
    base = _strip_sidecar_suffix(path)
    n_u, n_v = stack.det
    header = {
        "n_views": stack.n_views,
        "det": [n_u, n_v],
        "pitch_mm": list(stack.pitch),
        "angles_deg": [float(a) for a in stack.angles],
        "dtype": "f32le",
        "unit": UNIT_LINE_INTEGRAL,
    }
    payload = np.ascontiguousarray(stack.values.transpose(0, 2, 1), dtype="<f4")
    with open(base + ".json", "w", encoding="utf-8") as fh:
        json.dump(header, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(base + ".raw", "wb") as fh:
        fh.write(payload.tobytes())


def read_projections(path: str) -> ProjectionStack:
    """Inverse of :func:`write_projections`."""
    base = _strip_sidecar_suffix(path)
    header_path, raw_path = base + ".json", base + ".raw"
    if not os.path.exists(header_path):
        raise FileNotFoundError(header_path)
    if not os.path.exists(raw_path):
        raise FileNotFoundError(raw_path)
    with open(header_path, "r", encoding="utf-8") as fh:
        try:
            header = json.load(fh)
        except json.JSONDecodeError as exc:
            raise HeaderError(f"{header_path}: not valid JSON ({exc})") from exc
    for key in ("n_views", "det", "pitch_mm", "angles_deg", "dtype"):
        if key not in header:
            raise HeaderError(f"{header_path}: missing key {key!r}")
    if header["dtype"] != "f32le":
        raise HeaderError(f"{header_path}: unsupported dtype {header['dtype']!r}")
    n_views = int(header["n_views"])
    n_u, n_v = (int(d) for d in header["det"])
    expected = n_views * n_u * n_v * 4
    blob = open(raw_path, "rb").read()
    if len(blob) != expected:
        raise PayloadMismatchError(
            f"{raw_path}: payload is {len(blob)} bytes, header implies {expected}"
        )
    values = np.frombuffer(blob, dtype="<f4").reshape(n_views, n_v, n_u).transpose(0, 2, 1)
    return ProjectionStack(values, header["pitch_mm"], header["angles_deg"])


def normalize_hu(vol: VoxelVolume) -> VoxelVolume:
    """Map HU linearly onto the model range: -1500 -> -1, 1000 -> +1, no clipping."""
    if vol.unit != UNIT_HU:
        raise UnitError(f"normalize_hu expects unit 'HU', got {vol.unit!r}")
    if not np.all(np.isfinite(vol.values)):
        raise ValueError("normalize_hu requires finite HU values")
    norm = (vol.values.astype(np.float64) - HU_LO) / HU_HALF_RANGE - 1.0
    return vol.with_values(norm.astype(np.float32), UNIT_NORMALIZED)


def denormalize(vol: VoxelVolume) -> VoxelVolume:
    """Exact inverse affine map of :func:`normalize_hu`."""
    if vol.unit != UNIT_NORMALIZED:
        raise UnitError(f"denormalize expects unit 'normalized', got {vol.unit!r}")
    hu = (vol.values.astype(np.float64) + 1.0) * HU_HALF_RANGE + HU_LO
    return vol.with_values(hu.astype(np.float32), UNIT_HU)


def normalize_array(hu: np.ndarray) -> np.ndarray:
    """Array-level HU -> normalized map (same affine map as :func:`normalize_hu`)."""
    return (((np.asarray(hu, dtype=np.float64) - HU_LO) / HU_HALF_RANGE) - 1.0).astype(
        np.float32
    )


def denormalize_array(norm: np.ndarray) -> np.ndarray:
    """Array-level normalized -> HU map."""
    return (
        (np.asarray(norm, dtype=np.float64) + 1.0) * HU_HALF_RANGE + HU_LO
    ).astype(np.float32)
