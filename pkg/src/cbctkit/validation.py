"""Input validation helpers for the estimator API."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .volume import VoxelVolume


def as_volume_stack(X, name: str = "X") -> np.ndarray:
    """Coerce a list of volumes / 3D array / 4D array into (N, nx, ny, nz)
    float32, rejecting non-finite values."""
    if isinstance(X, VoxelVolume):
        X = [X]
    if isinstance(X, (list, tuple)):
        arrays = []
        for i, item in enumerate(X):
            arr = item.values if isinstance(item, VoxelVolume) else np.asarray(item)
            if arr.ndim != 3:
                raise ConfigError(f"{name}[{i}] must be a 3D volume, got shape {arr.shape}")
            arrays.append(arr.astype(np.float32))
        if not arrays:
            raise ConfigError(f"{name} must contain at least one volume")
        shapes = {a.shape for a in arrays}
        if len(shapes) != 1:
            raise ConfigError(f"{name} volumes have mixed shapes: {sorted(shapes)}")
        stack = np.stack(arrays)
    else:
        stack = np.asarray(X, dtype=np.float32)
        if stack.ndim == 3:
            stack = stack[None]
        if stack.ndim != 4:
            raise ConfigError(
                f"{name} must be a 4D stack or a list of 3D volumes, got shape {stack.shape}"
            )
    if not np.all(np.isfinite(stack)):
        raise ConfigError(f"{name} contains non-finite values")
    return stack


def check_paired_stacks(X: np.ndarray, y: np.ndarray) -> None:
    if X.shape != y.shape:
        raise ConfigError(f"X and y shapes differ: {X.shape} vs {y.shape}")


def check_divisible_dims(dims, levels: int) -> None:
    factor = 2 ** (int(levels) - 1)
    bad = [d for d in dims if d % factor]
    if bad:
        raise ConfigError(
            f"volume dims {tuple(dims)} must be divisible by {factor} "
            f"for a {levels}-level network"
        )
