"""Cone-beam acquisition geometry and view sampling.

World frame convention (documented and tested, used by every ray-based module):
right-handed axes, rotation axis = z, gantry angle measured counterclockwise
from +x.  At gantry angle theta the source sits at
``(sad*cos(theta), sad*sin(theta), 0)``; the detector is centered at distance
``sid`` from the source on the far side of the axis, with its u-axis tangent
to the rotation (``(-sin, cos, 0)``) and its v-axis along +z.  For half-fan
scans the detector pixel grid is shifted by ``lateral_offset_u`` along u, so
pixel u-coordinates are measured relative to the piercing point (the central
ray's intersection with the detector plane):

    u(iu) = lateral_offset_u + (iu - (n_u - 1)/2) * p_u
    v(iv) = (iv - (n_v - 1)/2) * p_v
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

FULL_FAN = "full-fan"
HALF_FAN = "half-fan"

HALF_TRAJECTORY_ARC_DEG = 210.0


@dataclass(frozen=True)
class ConeBeamGeometry:
    """Full acquisition description for a circular cone-beam scan."""

    sad: float
    sid: float
    det: tuple[int, int]
    pitch: tuple[float, float]
    lateral_offset_u: float = 0.0
    arc_deg: float = 360.0
    fan_mode: str = FULL_FAN

    def __post_init__(self):
        if not (0 < self.sad < self.sid):
            raise ConfigError(f"need 0 < sad < sid, got sad={self.sad}, sid={self.sid}")
        if len(self.det) != 2 or any(int(n) < 1 for n in self.det):
            raise ConfigError(f"detector dims must be positive, got {self.det}")
        if any(p <= 0 for p in self.pitch):
            raise ConfigError(f"detector pitches must be positive, got {self.pitch}")
        if not (0 < self.arc_deg <= 360.0):
            raise ConfigError(f"arc_deg must be in (0, 360], got {self.arc_deg}")
        if self.fan_mode == HALF_FAN and self.lateral_offset_u == 0.0:
            raise ConfigError("half-fan requires a nonzero lateral detector offset")
        if self.fan_mode == FULL_FAN and self.lateral_offset_u != 0.0:
            raise ConfigError("full-fan requires zero lateral detector offset")
        if self.fan_mode not in (FULL_FAN, HALF_FAN):
            raise ConfigError(f"unknown fan mode {self.fan_mode!r}")
        object.__setattr__(self, "det", (int(self.det[0]), int(self.det[1])))
        object.__setattr__(self, "pitch", (float(self.pitch[0]), float(self.pitch[1])))

    @property
    def magnification(self) -> float:
        return self.sid / self.sad

    def pixel_coords(self) -> tuple[np.ndarray, np.ndarray]:
        """Physical (u, v) pixel-center coordinates relative to the piercing point."""
        n_u, n_v = self.det
        p_u, p_v = self.pitch
        u = self.lateral_offset_u + (np.arange(n_u) - (n_u - 1) / 2.0) * p_u
        v = (np.arange(n_v) - (n_v - 1) / 2.0) * p_v
        return u, v

    def to_dict(self) -> dict:
        return {
            "sad_mm": self.sad,
            "sid_mm": self.sid,
            "det": list(self.det),
            "pitch_mm": list(self.pitch),
            "lateral_offset_mm": self.lateral_offset_u,
            "arc_deg": self.arc_deg,
            "fan_mode": self.fan_mode,
        }

    @staticmethod
    def from_dict(d: dict) -> "ConeBeamGeometry":
        try:
            return ConeBeamGeometry(
                sad=float(d["sad_mm"]),
                sid=float(d["sid_mm"]),
                det=tuple(d["det"]),
                pitch=tuple(d["pitch_mm"]),
                lateral_offset_u=float(d.get("lateral_offset_mm", 0.0)),
                arc_deg=float(d.get("arc_deg", 360.0)),
                fan_mode=d.get("fan_mode", FULL_FAN),
            )
        except KeyError as exc:
            raise ConfigError(f"geometry dict missing key {exc}") from exc

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @staticmethod
    def load(path: str) -> "ConeBeamGeometry":
        with open(path, "r", encoding="utf-8") as fh:
            return ConeBeamGeometry.from_dict(json.load(fh))


def make_reference_geometry() -> ConeBeamGeometry:
    """Clinical half-fan scan protocol used for the simulated acquisitions.

    SAD 1000 mm, SID 1540 mm, 366x160 detector pixels at 1.176x2.688 mm,
    detector shifted laterally by 175 mm, full 360-degree trajectory.
    """
    return ConeBeamGeometry(
        sad=1000.0,
        sid=1540.0,
        det=(366, 160),
        pitch=(1.176, 2.688),
        lateral_offset_u=175.0,
        arc_deg=360.0,
        fan_mode=HALF_FAN,
    )


def make_desk_geometry() -> ConeBeamGeometry:
    """Desk-scale geometry: same SAD/SID ratio and detector extent as the
    reference protocol, but 4x coarser detector pixels (92x40)."""
    return ConeBeamGeometry(
        sad=1000.0,
        sid=1540.0,
        det=(92, 40),
        pitch=(1.176 * 4, 2.688 * 4),
        lateral_offset_u=175.0,
        arc_deg=360.0,
        fan_mode=HALF_FAN,
    )


def make_full_fan_geometry(arc_deg: float = HALF_TRAJECTORY_ARC_DEG) -> ConeBeamGeometry:
    """Full-fan preset (no lateral offset); default arc is the 210-degree
    half trajectory used by the geometry-generalisation experiment."""
    return ConeBeamGeometry(
        sad=1000.0,
        sid=1540.0,
        det=(92, 40),
        pitch=(1.176 * 4, 2.688 * 4),
        lateral_offset_u=0.0,
        arc_deg=arc_deg,
        fan_mode=FULL_FAN,
    )


@dataclass(frozen=True)
class ViewSet:
    """Gantry angles (degrees) of one scan, plus their indices in the dense
    scan when this set is a sparse subset."""

    angles: np.ndarray
    indices: np.ndarray

    def __post_init__(self):
        angles = np.ascontiguousarray(np.asarray(self.angles, dtype=np.float64))
        indices = np.ascontiguousarray(np.asarray(self.indices, dtype=np.int64))
        if angles.ndim != 1 or indices.shape != angles.shape:
            raise ConfigError("angles and indices must be 1D and the same length")
        if angles.size > 1 and not np.all(np.diff(angles) > 0):
            raise ConfigError("view angles must be strictly increasing")
        if indices.size > 1 and not np.all(np.diff(indices) > 0):
            raise ConfigError("view indices must be strictly increasing")
        angles.flags.writeable = False
        indices.flags.writeable = False
        object.__setattr__(self, "angles", angles)
        object.__setattr__(self, "indices", indices)

    @property
    def n_views(self) -> int:
        return self.angles.size

    def subset(self, k: int) -> "ViewSet":
        """Maximally uniform k-view subset (indices refer to this set)."""
        idx = uniform_view_subset(self.n_views, k)
        return ViewSet(self.angles[idx], idx)


def full_view_set(geom: ConeBeamGeometry, n_views: int) -> ViewSet:
    """Angles uniformly spaced over [0, arc_deg), starting at 0."""
    n_views = int(n_views)
    if n_views < 2:
        raise ConfigError(f"need at least 2 views, got {n_views}")
    angles = np.arange(n_views, dtype=np.float64) * (geom.arc_deg / n_views)
    return ViewSet(angles, np.arange(n_views, dtype=np.int64))


def uniform_view_subset(total: int, k: int) -> np.ndarray:
    """Indices ``floor(i*total/k)`` for i < k: maximal angular uniformity,
    consecutive gaps differing by at most 1."""
    total, k = int(total), int(k)
    if not (1 <= k <= total):
        raise ConfigError(f"need 1 <= k <= total, got k={k}, total={total}")
    return (np.arange(k, dtype=np.int64) * total) // k


def source_position(geom: ConeBeamGeometry, angle_deg: float) -> np.ndarray:
    """Source position (mm) on the circle of radius SAD in the z=0 plane."""
    theta = math.radians(float(angle_deg))
    return np.array(
        [geom.sad * math.cos(theta), geom.sad * math.sin(theta), 0.0], dtype=np.float64
    )


def detector_frame(geom: ConeBeamGeometry, angle_deg: float):
    """(piercing point, u-axis, v-axis) of the detector at one gantry angle.

    The piercing point lies at distance SID from the source along the central
    ray; pixel positions are ``piercing + u*u_hat + v*v_hat`` with (u, v) from
    :meth:`ConeBeamGeometry.pixel_coords`.
    """
    theta = math.radians(float(angle_deg))
    e_src = np.array([math.cos(theta), math.sin(theta), 0.0])
    u_hat = np.array([-math.sin(theta), math.cos(theta), 0.0])
    v_hat = np.array([0.0, 0.0, 1.0])
    piercing = (geom.sad - geom.sid) * e_src
    return piercing, u_hat, v_hat
