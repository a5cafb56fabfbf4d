"""Distortion and overlap metrics: masked MAE, masked PSNR (MAX = 2000 HU),
3D SSIM, Dice, and the Otsu-plus-morphology body mask.

MAE and PSNR operate on flattened masked voxels; SSIM is never masked (it
needs spatial context) and uses a uniform 7x7x7 window over valid positions.
All reductions accumulate in float64, so results are deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigError
from .volume import VoxelVolume

PSNR_MAX = 2000.0  # HU span from -1000 to 1000
SSIM_WINDOW = 7
SSIM_C1 = (0.01 * PSNR_MAX) ** 2
SSIM_C2 = (0.03 * PSNR_MAX) ** 2

_DILATION_RADIUS = 2
_EROSION_RADIUS = 2


@dataclass(frozen=True)
class BodyMask:
    """Boolean body mask plus the parameters that produced it."""

    mask: np.ndarray
    threshold_hu: float
    dilation_radius: int = _DILATION_RADIUS
    erosion_radius: int = _EROSION_RADIUS

    def __post_init__(self):
        m = np.ascontiguousarray(np.asarray(self.mask, dtype=bool))
        m.flags.writeable = False
        object.__setattr__(self, "mask", m)


@dataclass(frozen=True)
class MetricReport:
    mae_masked: float
    psnr_masked: float
    psnr_unmasked: float
    ssim: float
    dice: float | None = None

    def as_dict(self) -> dict:
        d = {
            "mae_masked": self.mae_masked,
            "psnr_masked": self.psnr_masked,
            "psnr_unmasked": self.psnr_unmasked,
            "ssim": self.ssim,
        }
        if self.dice is not None:
            d["dice"] = self.dice
        return d


def _values(vol) -> np.ndarray:
    if isinstance(vol, VoxelVolume):
        return vol.values
    return np.asarray(vol)


def otsu_threshold(vol) -> float:
    """Threshold maximizing between-class variance over a 256-bin histogram
    of the value range present.  Returned value is a bin edge."""
    values = _values(vol).astype(np.float64).ravel()
    vmin, vmax = float(values.min()), float(values.max())
    if vmin == vmax:
        raise ConfigError("otsu_threshold needs at least 2 distinct values")
    counts, edges = np.histogram(values, bins=256, range=(vmin, vmax))
    total = counts.sum()
    centers = (edges[:-1] + edges[1:]) / 2.0
    w0 = np.cumsum(counts)
    w1 = total - w0
    mass0 = np.cumsum(counts * centers)
    mass1 = mass0[-1] - mass0
    with np.errstate(invalid="ignore", divide="ignore"):
        mu0 = mass0 / w0
        mu1 = mass1 / w1
        var_between = (w0 / total) * (w1 / total) * (mu0 - mu1) ** 2
    var_between = np.nan_to_num(var_between[:-1], nan=-1.0)
    best = int(np.argmax(var_between))
    return float(edges[best + 1])


def _ball_l1(radius: int) -> np.ndarray:
    """6-connectivity ball (L1 ball) structuring element of the given radius."""
    r = int(radius)
    grid = np.abs(np.arange(-r, r + 1))
    dist = grid[:, None, None] + grid[None, :, None] + grid[None, None, :]
    return dist <= r


def body_mask(vol) -> BodyMask:
    """Otsu threshold -> binary -> morphological closing (dilate then erode,
    radius 2 L1 balls) -> largest 6-connected component."""
    values = _values(vol)
    if values.min() == values.max():
        raise ConfigError("body_mask found an empty foreground (constant volume)")
    thr = otsu_threshold(values)
    binary = values > thr
    if not binary.any():
        raise ConfigError("body_mask found an empty foreground")
    ball = _ball_l1(_DILATION_RADIUS)
    closed = ndimage.binary_dilation(binary, structure=ball)
    closed = ndimage.binary_erosion(closed, structure=_ball_l1(_EROSION_RADIUS))
    labels, n_labels = ndimage.label(closed)
    if n_labels == 0:
        raise ConfigError("body_mask found an empty foreground after morphology")
    sizes = ndimage.sum_labels(np.ones_like(labels), labels, index=np.arange(1, n_labels + 1))
    keep = 1 + int(np.argmax(sizes))
    return BodyMask(labels == keep, thr)


def _check_pair(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None):
    if a.shape != b.shape:
        raise ConfigError(f"volume shapes differ: {a.shape} vs {b.shape}")
    if mask is not None:
        if mask.shape != a.shape:
            raise ConfigError(f"mask shape {mask.shape} does not match {a.shape}")
        if not mask.any():
            raise ConfigError("metric mask is empty")


def mae(a, b, mask=None) -> float:
    """Mean absolute difference over masked voxels (all voxels if no mask)."""
    av, bv = _values(a), _values(b)
    m = None if mask is None else _values(mask).astype(bool)
    _check_pair(av, bv, m)
    diff = np.abs(av.astype(np.float64) - bv.astype(np.float64))
    if m is not None:
        diff = diff[m]
    return float(diff.mean(dtype=np.float64))


def mse(a, b, mask=None) -> float:
    av, bv = _values(a), _values(b)
    m = None if mask is None else _values(mask).astype(bool)
    _check_pair(av, bv, m)
    diff = av.astype(np.float64) - bv.astype(np.float64)
    if m is not None:
        diff = diff[m]
    return float(np.mean(diff * diff, dtype=np.float64))


def psnr(a, b, mask=None) -> float:
    """10*log10(MAX^2 / MSE) with MAX = 2000 HU; identical inputs -> inf."""
    err = mse(a, b, mask)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(PSNR_MAX * PSNR_MAX / err)


def ssim(a, b) -> float:
    """Mean local SSIM over valid 7x7x7 windows, unmasked, L = 2000 HU.

    Local means/variances use uniform windows and ddof=0; volumes smaller
    than the window are rejected.
    """
    av = _values(a).astype(np.float64)
    bv = _values(b).astype(np.float64)
    _check_pair(av, bv, None)
    w = SSIM_WINDOW
    if any(dim < w for dim in av.shape):
        raise ConfigError(f"ssim needs dims >= {w}, got {av.shape}")
    mu_a = _window_mean(av, w)
    mu_b = _window_mean(bv, w)
    var_a = _window_mean(av * av, w) - mu_a * mu_a
    var_b = _window_mean(bv * bv, w) - mu_b * mu_b
    cov = _window_mean(av * bv, w) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(num / den, dtype=np.float64))


def _window_mean(x: np.ndarray, w: int) -> np.ndarray:
    """Means of all w^3 windows fully inside the volume, via cumulative sums."""
    c = x
    for ax in range(3):
        c = np.cumsum(c, axis=ax, dtype=np.float64)
    c = np.pad(c, [(1, 0)] * 3)
    s = (
        c[w:, w:, w:]
        - c[:-w, w:, w:]
        - c[w:, :-w, w:]
        - c[w:, w:, :-w]
        + c[:-w, :-w, w:]
        + c[:-w, w:, :-w]
        + c[w:, :-w, :-w]
        - c[:-w, :-w, :-w]
    )
    return s / float(w**3)


def dice(seg_a, seg_b) -> float:
    """2|A & B| / (|A| + |B|); defined as 1.0 when both masks are empty."""
    a = _values(seg_a).astype(bool)
    b = _values(seg_b).astype(bool)
    if a.shape != b.shape:
        raise ConfigError(f"segmentation shapes differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def evaluate_pair(pred, target, mask="body") -> MetricReport:
    """MetricReport for one (prediction, target) volume pair.

    ``mask`` is "body" (Otsu body mask of the target), "none", or an explicit
    boolean array.
    """
    pv, tv = _values(pred), _values(target)
    if isinstance(mask, str):
        if mask == "body":
            m = body_mask(tv).mask
        elif mask == "none":
            m = None
        else:
            raise ConfigError(f"unknown mask mode {mask!r}")
    else:
        m = None if mask is None else _values(mask).astype(bool)
    return MetricReport(
        mae_masked=mae(pv, tv, m),
        psnr_masked=psnr(pv, tv, m),
        psnr_unmasked=psnr(pv, tv, None),
        ssim=ssim(pv, tv),
    )
