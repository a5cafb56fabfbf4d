"""FDK filtered backprojection for circular cone-beam scans.

Pipeline: cosine pre-weighting -> redundancy weighting -> Ram-Lak ramp
filtering of detector rows -> voxel-driven backprojection -> attenuation to
HU conversion.  All stages are deterministic and linear in the projections.

Scaling convention.  Filtering happens in physical detector coordinates
(pitch p_u), so the discrete convolution carries a factor p_u and the
backprojection distance weight carries the detector magnification:

    recon_mu(r) = kappa * dbeta * sum_views (sad*sid / U^2) * q(u(r), v(r))

with U the source-to-voxel distance along the central-ray direction,
dbeta = arc/n_views, and kappa = 1/2 only for full-fan 360-degree scans
(every ray measured twice, uniform redundancy weight 1).  Half-fan scans use
a raised-cosine lateral blend whose conjugate weights sum to 1; short scans
use Parker-style weights; both make kappa = 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .geometry import FULL_FAN, HALF_FAN, ConeBeamGeometry
from .projector import AttenuationMap, mu_to_hu
from .volume import ProjectionStack, VoxelVolume

# Minimum FFT length: keeps the DC-nulling perturbation of the impulse
# response below 1e-6 of the kernel center tap (offset ~ 8 / (pi*L)^2).
_MIN_FFT_LENGTH = 1024


@dataclass(frozen=True)
class RampFilter:
    """Frequency response of the Ram-Lak ramp filter at a given FFT length."""

    length: int
    response: np.ndarray  # rfft magnitudes, DC bin exactly zero
    pitch: float

    def __post_init__(self):
        if self.length & (self.length - 1):
            raise ConfigError("ramp filter length must be a power of two")
        resp = np.ascontiguousarray(np.asarray(self.response, dtype=np.float64))
        resp.flags.writeable = False
        object.__setattr__(self, "response", resp)


def make_ramp_filter(n_u: int, pitch: float) -> RampFilter:
    """Ram-Lak filter built from the textbook spatial kernel.

    The spatial taps are ``h[0] = 1/(4 p^2)``, ``h[k] = -1/(pi^2 k^2 p^2)``
    for odd k and 0 for even k, wrapped onto an FFT grid of power-of-two
    length >= 2*n_u (>= 1024) so circular convolution equals linear
    convolution; the DC bin of the response is forced to exactly zero.
    """
    if n_u < 2:
        raise ConfigError("ramp filter needs at least 2 detector columns")
    length = _MIN_FFT_LENGTH
    while length < 2 * n_u:
        length *= 2
    h = np.zeros(length, dtype=np.float64)
    h[0] = 1.0 / (4.0 * pitch * pitch)
    k = np.arange(1, length // 2 + 1)
    odd = k[k % 2 == 1]
    taps = -1.0 / (np.pi * np.pi * odd.astype(np.float64) ** 2 * pitch * pitch)
    h[odd] = taps
    h[-odd] = taps
    response = np.fft.rfft(h).real
    response[0] = 0.0
    return RampFilter(length, response, float(pitch))


def ramp_filter(stack: ProjectionStack, filt: RampFilter | None = None) -> ProjectionStack:
    """Convolve every detector row (along u) with the Ram-Lak kernel.

    Rows are edge-replicated out to the FFT length before filtering: a
    constant row then fills the whole circle and the zeroed DC bin nulls it
    exactly, and the replicated margin softens lateral-truncation effects on
    the short side of half-fan scans.  The result carries the sample-pitch
    factor p_u, approximating the continuous filtered projection.
    """
    n_u, _ = stack.det
    if n_u < 2:
        raise ConfigError("ramp_filter needs at least 2 detector columns")
    if filt is None:
        filt = make_ramp_filter(n_u, stack.pitch[0])
    pad_left = (filt.length - n_u) // 2
    pad_right = filt.length - n_u - pad_left
    padded = np.pad(
        stack.values.astype(np.float64),
        ((0, 0), (pad_left, pad_right), (0, 0)),
        mode="edge",
    )
    spectra = np.fft.rfft(padded, axis=1)
    spectra *= filt.response[None, :, None]
    rows = np.fft.irfft(spectra, n=filt.length, axis=1)[:, pad_left : pad_left + n_u, :]
    rows *= stack.pitch[0]
    return ProjectionStack(rows.astype(np.float32), stack.pitch, stack.angles)


def cosine_weight_map(geom: ConeBeamGeometry) -> np.ndarray:
    """FDK cone/fan pre-weight sid / sqrt(sid^2 + u^2 + v^2), shape (n_u, n_v)."""
    u, v = geom.pixel_coords()
    return (
        geom.sid / np.sqrt(geom.sid**2 + u[:, None] ** 2 + v[None, :] ** 2)
    ).astype(np.float64)


def cosine_weight(stack: ProjectionStack, geom: ConeBeamGeometry) -> ProjectionStack:
    """Apply the cosine pre-weight to every view."""
    w = cosine_weight_map(geom)
    return ProjectionStack(
        (stack.values.astype(np.float64) * w[None, :, :]).astype(np.float32),
        stack.pitch,
        stack.angles,
    )


def halffan_weight_profile(geom: ConeBeamGeometry) -> np.ndarray:
    """Raised-cosine lateral blend for half-fan scans, shape (n_u,).

    Inside the overlap band |u| <= u_ov = W/2 - |offset| a ray at detector
    coordinate u and its conjugate at -u are both measured over a full
    rotation; the blend w(u) = (1 + sin(pi*u/(2*u_ov)))/2 makes conjugate
    weights sum to 1 and falls to zero at the detector edge nearest the
    rotation axis.  Outside the band the single measured ray keeps weight 1.
    """
    if geom.fan_mode != HALF_FAN:
        raise ConfigError("half-fan weights require half-fan geometry")
    u, _ = geom.pixel_coords()
    width = geom.det[0] * geom.pitch[0]
    u_ov = width / 2.0 - abs(geom.lateral_offset_u)
    if u_ov <= 0:
        return np.ones_like(u)
    side = 1.0 if geom.lateral_offset_u > 0 else -1.0
    arg = np.clip(side * u, -u_ov, u_ov)
    return 0.5 * (1.0 + np.sin(np.pi * arg / (2.0 * u_ov)))


def parker_weight_map(geom: ConeBeamGeometry, angles_deg: np.ndarray) -> np.ndarray:
    """Parker-style short-scan weights for full-fan arcs < 360 degrees.

    Shape (n_views, n_u).  With arc A = pi + 2*G (G the half overscan angle)
    and per-column fan angle gamma = atan(u/sid):

        w = sin^2(pi/4 * beta / (G + gamma))        beta <  2G + 2*gamma
        w = 1                                       until beta < pi + 2*gamma
        w = sin^2(pi/4 * (A - beta) / (G - gamma))  after

    Conjugate views (beta, gamma) and (beta + pi - 2*gamma, -gamma) then sum
    to exactly 1.
    """
    if geom.fan_mode != FULL_FAN:
        raise ConfigError("Parker weights require full-fan geometry")
    arc = math.radians(geom.arc_deg)
    u, _ = geom.pixel_coords()
    gamma = np.arctan2(u, geom.sid)
    gamma_max = float(np.max(np.abs(gamma)))
    g_eff = (arc - np.pi) / 2.0
    if g_eff < gamma_max:
        raise ConfigError(
            f"arc {geom.arc_deg} deg too short for fan half-angle "
            f"{math.degrees(gamma_max):.2f} deg (need >= 180 + 2*fan)"
        )
    beta = np.radians(np.asarray(angles_deg, dtype=np.float64))[:, None]
    gamma = gamma[None, :]
    eps = 1e-12
    ramp_up = np.sin(np.pi / 4.0 * beta / np.maximum(g_eff + gamma, eps)) ** 2
    ramp_down = np.sin(np.pi / 4.0 * (arc - beta) / np.maximum(g_eff - gamma, eps)) ** 2
    w = np.ones(np.broadcast_shapes(beta.shape, gamma.shape))
    w = np.where(beta < 2.0 * g_eff + 2.0 * gamma, ramp_up, w)
    w = np.where(beta >= np.pi + 2.0 * gamma, ramp_down, w)
    return w


def redundancy_weight(stack: ProjectionStack, geom: ConeBeamGeometry) -> ProjectionStack:
    """Apply half-fan / short-scan redundancy weights (see module docstring)."""
    full_rotation = geom.arc_deg >= 360.0 - 1e-9
    if geom.fan_mode == HALF_FAN:
        if not full_rotation:
            raise ConfigError("half-fan reconstruction requires a 360-degree arc")
        w = halffan_weight_profile(geom)
        vals = stack.values.astype(np.float64) * w[None, :, None]
    elif full_rotation:
        # full-fan full rotation: uniform weight, global 1/2 folded into
        # the backprojection scale
        return stack
    else:
        w = parker_weight_map(geom, stack.angles)
        vals = stack.values.astype(np.float64) * w[:, :, None]
    return ProjectionStack(vals.astype(np.float32), stack.pitch, stack.angles)


def redundancy_scale(geom: ConeBeamGeometry) -> float:
    """Global redundancy factor applied during backprojection."""
    if geom.fan_mode == FULL_FAN and geom.arc_deg >= 360.0 - 1e-9:
        return 0.5
    return 1.0


@dataclass(frozen=True)
class WeightMaps:
    """Materialized FDK weights: ``cosine`` is (n_u, n_v); ``redundancy`` is
    (n_views, n_u, n_v) with all values in [0, 1]."""

    cosine: np.ndarray
    redundancy: np.ndarray

    def __post_init__(self):
        cos = np.ascontiguousarray(np.asarray(self.cosine, dtype=np.float64))
        red = np.ascontiguousarray(np.asarray(self.redundancy, dtype=np.float64))
        cos.flags.writeable = False
        red.flags.writeable = False
        object.__setattr__(self, "cosine", cos)
        object.__setattr__(self, "redundancy", red)


def compute_weight_maps(geom: ConeBeamGeometry, angles_deg) -> WeightMaps:
    """Cosine and per-view redundancy weight maps for a scan."""
    angles = np.asarray(angles_deg, dtype=np.float64)
    n_views = angles.size
    n_u, n_v = geom.det
    cosine = cosine_weight_map(geom)
    full_rotation = geom.arc_deg >= 360.0 - 1e-9
    if geom.fan_mode == HALF_FAN:
        if not full_rotation:
            raise ConfigError("half-fan reconstruction requires a 360-degree arc")
        red = np.broadcast_to(
            halffan_weight_profile(geom)[None, :, None], (n_views, n_u, n_v)
        ).copy()
    elif full_rotation:
        red = np.ones((n_views, n_u, n_v))
    else:
        red = np.broadcast_to(
            parker_weight_map(geom, angles)[:, :, None], (n_views, n_u, n_v)
        ).copy()
    return WeightMaps(cosine, red)


def _bilinear_detector(padded_flat, n_u, n_v, iu, iv):
    """Bilinear lookup on a zero-padded detector image; off-detector -> 0."""
    stride = n_v + 2
    gu = iu + 1.0
    gv = iv + 1.0
    bu = np.floor(gu).astype(np.int32)
    bv = np.floor(gv).astype(np.int32)
    np.clip(bu, 0, n_u, out=bu)
    np.clip(bv, 0, n_v, out=bv)
    fu = np.clip((gu - bu).astype(np.float32), 0.0, 1.0)
    fv = np.clip((gv - bv).astype(np.float32), 0.0, 1.0)
    flat = bu * stride + bv
    c00 = padded_flat[flat]
    c10 = padded_flat[flat + stride]
    c01 = padded_flat[flat + 1]
    c11 = padded_flat[flat + stride + 1]
    top = c00 + (c10 - c00) * fu
    bot = c01 + (c11 - c01) * fu
    return top + (bot - top) * fv


def backproject(
    stack: ProjectionStack, geom: ConeBeamGeometry, grid: VoxelVolume
) -> AttenuationMap:
    """Voxel-driven backprojection of a filtered, weighted stack.

    Returns linear attenuation on the template grid.  Accumulation is in
    float64 with a fixed view order, so repeated runs are bit-identical.
    """
    n_u, n_v = stack.det
    p_u, p_v = stack.pitch
    xs, ys, zs = grid.voxel_centers()
    X = xs[:, None, None]
    Y = ys[None, :, None]
    Z = zs[None, None, :].astype(np.float64)
    accum = np.zeros(grid.dims, dtype=np.float64)
    dbeta = math.radians(geom.arc_deg) / stack.n_views
    scale = redundancy_scale(geom) * dbeta * geom.sad * geom.sid
    cu = (n_u - 1) / 2.0
    cv = (n_v - 1) / 2.0
    for i in range(stack.n_views):
        theta = math.radians(float(stack.angles[i]))
        cb, sb = math.cos(theta), math.sin(theta)
        r_dot_src = X * cb + Y * sb
        r_dot_u = -X * sb + Y * cb
        U = geom.sad - r_dot_src
        # voxels at or behind the source plane receive no contribution
        valid = U > 1e-6
        inv_u = np.where(valid, 1.0 / np.where(valid, U, 1.0), 0.0)
        u_det = geom.sid * r_dot_u * inv_u
        v_det = geom.sid * Z * inv_u
        iu = (u_det - geom.lateral_offset_u) / p_u + cu
        iv = v_det / p_v + cv
        padded = np.zeros((n_u + 2, n_v + 2), dtype=np.float32)
        padded[1:-1, 1:-1] = stack.values[i]
        sample = _bilinear_detector(padded.ravel(), n_u, n_v, iu, iv)
        accum += np.where(valid, sample * (inv_u * inv_u), 0.0)
    accum *= scale
    return AttenuationMap(accum.astype(np.float32), grid.spacing, grid.origin)


def fdk_reconstruct(
    stack: ProjectionStack, geom: ConeBeamGeometry, grid: VoxelVolume
) -> VoxelVolume:
    """Full FDK chain on a raw stack; returns a volume in HU (no clamping,
    streak undershoot below -1000 HU is preserved)."""
    weighted = cosine_weight(stack, geom)
    weighted = redundancy_weight(weighted, geom)
    filtered = ramp_filter(weighted)
    mu = backproject(filtered, geom, grid)
    return VoxelVolume(mu_to_hu(mu.values), grid.spacing, grid.origin, unit="HU")
