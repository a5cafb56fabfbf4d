"""Ray-driven cone-beam forward projection.

Each detector pixel value is the line integral of the attenuation map along
the segment from the source to the pixel center, computed by composite
midpoint sampling with trilinear interpolation.  The sampling step along each
ray is ``min(spacing)/2`` rounded down so that an integer number of midpoint
samples exactly tiles the in-volume segment (constants integrate exactly).

The integration domain is the full physical extent of the grid (voxel centers
plus a half-voxel margin on every face); inside the margin the field takes
the nearest edge value, outside it contributes zero.

Two interpolation backends produce the same integrals to within float32
rounding: a pure-numpy gather (the reference, used by :func:`ray_integral`)
and a torch backend (default for :func:`forward_project`, roughly 3x faster
on CPU).  Both are deterministic: fixed view order, fixed reduction order,
64-bit per-ray accumulation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .geometry import ConeBeamGeometry, ViewSet, detector_frame, source_position
from .volume import ProjectionStack, VoxelVolume

MU_WATER = 0.02  # linear attenuation of water, mm^-1


@dataclass(frozen=True)
class AttenuationMap:
    """Linear attenuation values (mm^-1) on a voxel grid; same layout as
    :class:`~cbctkit.volume.VoxelVolume` but never serialized directly."""

    values: np.ndarray
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float]

    def __post_init__(self):
        arr = np.ascontiguousarray(np.asarray(self.values, dtype=np.float32))
        if arr.ndim != 3:
            raise ValueError(f"attenuation values must be 3D, got {arr.shape}")
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.values.shape


def hu_to_mu(vol: VoxelVolume) -> AttenuationMap:
    """mu = max(0, mu_water * (1 + hu/1000)); air -> 0, water -> 0.02 mm^-1."""
    if not np.all(np.isfinite(vol.values)):
        raise ValueError("hu_to_mu requires finite HU values")
    mu = MU_WATER * (1.0 + vol.values.astype(np.float64) / 1000.0)
    np.maximum(mu, 0.0, out=mu)
    return AttenuationMap(mu.astype(np.float32), vol.spacing, vol.origin)


def mu_to_hu(mu: np.ndarray) -> np.ndarray:
    """Inverse of :func:`hu_to_mu` without the clamp at zero; negative mu maps
    below -1000 HU (streaks are preserved, not clipped)."""
    return (1000.0 * (np.asarray(mu, dtype=np.float64) / MU_WATER - 1.0)).astype(
        np.float32
    )


def _grid_bounds(amap: AttenuationMap):
    s = np.asarray(amap.spacing, dtype=np.float64)
    o = np.asarray(amap.origin, dtype=np.float64)
    d = np.asarray(amap.dims, dtype=np.float64)
    return o - 0.5 * s, o + (d - 0.5) * s


def _segment_clip(p0, direc, length, lo, hi):
    """Entry/exit distances of segments p0 + t*direc, t in [0, length], with
    the axis-aligned box [lo, hi].  Slab method, vectorized over rays."""
    t_in = np.zeros(direc.shape[0])
    t_out = np.asarray(length, dtype=np.float64).copy()
    for ax in range(3):
        d = direc[:, ax]
        p = p0[:, ax]
        safe = np.where(d != 0.0, d, 1.0)
        ta = (lo[ax] - p) / safe
        tb = (hi[ax] - p) / safe
        near, far = np.minimum(ta, tb), np.maximum(ta, tb)
        parallel = d == 0.0
        inside = (p >= lo[ax]) & (p <= hi[ax])
        near = np.where(parallel, np.where(inside, -np.inf, np.inf), near)
        far = np.where(parallel, np.where(inside, np.inf, -np.inf), far)
        t_in = np.maximum(t_in, near)
        t_out = np.minimum(t_out, far)
    return t_in, t_out


def _ragged_midpoints(p0, direc, t_in, t_out, step_target):
    """Midpoint sample positions for every ray, concatenated.

    Returns (coords (T, 3), ray_id (T,), delta_t per hit ray, hit mask,
    segment start offsets into the T axis).
    """
    span = t_out - t_in
    hit = span > 0.0
    n_steps = np.maximum(1, np.ceil(span[hit] / step_target)).astype(np.int64)
    delta_t = span[hit] / n_steps
    total = int(n_steps.sum())
    ray_id = np.repeat(np.arange(n_steps.size), n_steps)
    starts = np.concatenate(([0], np.cumsum(n_steps)[:-1]))
    within = np.arange(total) - starts[ray_id]
    ts = t_in[hit][ray_id] + (within + 0.5) * delta_t[ray_id]
    coords = p0[hit][ray_id] + ts[:, None] * direc[hit][ray_id]
    return coords, ray_id, delta_t, hit, starts


def _trilinear_numpy(amap: AttenuationMap, coords: np.ndarray) -> np.ndarray:
    """Reference trilinear gather at world coordinates (mm), clamped to the
    voxel-center grid so the half-voxel margin takes the edge value."""
    nx, ny, nz = amap.dims
    idx = (coords - np.asarray(amap.origin)) / np.asarray(amap.spacing)
    base = np.floor(idx).astype(np.int32)
    np.clip(base[..., 0], 0, nx - 2, out=base[..., 0])
    np.clip(base[..., 1], 0, ny - 2, out=base[..., 1])
    np.clip(base[..., 2], 0, nz - 2, out=base[..., 2])
    frac = np.clip((idx - base).astype(np.float32), 0.0, 1.0)
    flat = (base[..., 0] * ny + base[..., 1]) * nz + base[..., 2]
    sx, sy = ny * nz, nz
    values = amap.values.ravel()
    fx, fy, fz = frac[..., 0], frac[..., 1], frac[..., 2]
    c000 = values[flat]
    c100 = values[flat + sx]
    c010 = values[flat + sy]
    c110 = values[flat + sx + sy]
    c001 = values[flat + 1]
    c101 = values[flat + sx + 1]
    c011 = values[flat + sy + 1]
    c111 = values[flat + sx + sy + 1]
    c00 = c000 + (c100 - c000) * fx
    c10 = c010 + (c110 - c010) * fx
    c01 = c001 + (c101 - c001) * fx
    c11 = c011 + (c111 - c011) * fx
    c0 = c00 + (c10 - c00) * fy
    c1 = c01 + (c11 - c01) * fy
    return c0 + (c1 - c0) * fz


class _TorchSampler:
    """Trilinear gather backed by torch grid_sample (border padding and
    align_corners=False reproduce the clamped-margin convention)."""

    def __init__(self, amap: AttenuationMap):
        import torch

        self._torch = torch
        vol = np.ascontiguousarray(amap.values.transpose(2, 1, 0))  # (z, y, x)
        self._vol = torch.from_numpy(vol)[None, None]
        lo, hi = _grid_bounds(amap)
        self._lo = lo
        self._scale = 2.0 / (hi - lo)

    def __call__(self, coords: np.ndarray) -> np.ndarray:
        torch = self._torch
        import torch.nn.functional as F

        grid = (coords - self._lo) * self._scale - 1.0
        g = torch.from_numpy(grid.astype(np.float32)).view(1, 1, 1, -1, 3)
        out = F.grid_sample(
            self._vol, g, mode="bilinear", padding_mode="border", align_corners=False
        )
        return out.view(-1).numpy()


def _integrate_rays(amap, p0, p1, sampler=None) -> np.ndarray:
    """Line integrals for a batch of segments p0[i] -> p1[i] (float64)."""
    p0 = np.atleast_2d(np.asarray(p0, dtype=np.float64))
    p1 = np.atleast_2d(np.asarray(p1, dtype=np.float64))
    delta = p1 - p0
    length = np.linalg.norm(delta, axis=1)
    if np.any(length == 0.0):
        raise ConfigError("ray endpoints must differ")
    direc = delta / length[:, None]
    lo, hi = _grid_bounds(amap)
    t_in, t_out = _segment_clip(p0, direc, length, lo, hi)
    out = np.zeros(p0.shape[0], dtype=np.float64)
    coords, ray_id, delta_t, hit, starts = _ragged_midpoints(
        p0, direc, t_in, t_out, min(amap.spacing) / 2.0
    )
    if coords.shape[0] == 0:
        return out
    if sampler is None:
        samples = _trilinear_numpy(amap, coords)
    else:
        samples = sampler(coords)
    sums = np.add.reduceat(samples.astype(np.float64), starts)
    out[hit] = sums * delta_t
    return out


def ray_integral(amap: AttenuationMap, p0, p1) -> float:
    """Integral of mu along the segment p0 -> p1 (mm points); 0 if it misses.
    Always uses the numpy reference gather."""
    return float(_integrate_rays(amap, np.asarray(p0), np.asarray(p1))[0])


def forward_project(
    amap: AttenuationMap,
    geom: ConeBeamGeometry,
    views: ViewSet,
    backend: str = "torch",
) -> ProjectionStack:
    """Project the attenuation map into one detector image per view."""
    if views.n_views == 0:
        raise ConfigError("cannot project an empty view set")
    if backend == "torch":
        sampler = _TorchSampler(amap)
    elif backend == "numpy":
        sampler = None
    else:
        raise ConfigError(f"unknown projector backend {backend!r}")
    n_u, n_v = geom.det
    u, v = geom.pixel_coords()
    out = np.empty((views.n_views, n_u, n_v), dtype=np.float32)
    for i, angle in enumerate(views.angles):
        src = source_position(geom, angle)
        piercing, u_hat, v_hat = detector_frame(geom, angle)
        pix = (
            piercing[None, None, :]
            + u[:, None, None] * u_hat[None, None, :]
            + v[None, :, None] * v_hat[None, None, :]
        ).reshape(-1, 3)
        p0 = np.broadcast_to(src, pix.shape)
        vals = _integrate_rays(amap, p0, pix, sampler=sampler)
        out[i] = vals.reshape(n_u, n_v).astype(np.float32)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("forward projection produced non-finite values")
    return ProjectionStack(out, geom.pitch, views.angles)


def add_poisson_noise(
    stack: ProjectionStack, photons_per_ray: float, seed: int = 0
) -> ProjectionStack:
    """Optional extension (off by default everywhere): resample line integrals
    through a Poisson counting model with ``photons_per_ray`` unattenuated
    photons.  The simulated acquisitions themselves are noise-free."""
    if photons_per_ray <= 0:
        raise ConfigError("photons_per_ray must be positive")
    rng = np.random.default_rng(seed)
    transmission = np.exp(-stack.values.astype(np.float64))
    counts = rng.poisson(photons_per_ray * transmission)
    counts = np.maximum(counts, 1)
    noisy = -np.log(counts / photons_per_ray)
    return ProjectionStack(noisy.astype(np.float32), stack.pitch, stack.angles)
