"""Procedural ellipsoid phantoms and the paired sparse/dense dataset factory.

Each phantom is an outer soft-tissue ellipsoid (the body) in air, with a few
ellipsoidal inclusions drawn from {lung, bone, soft, lesion} HU classes.  The
dataset factory forward-projects every phantom once with a dense view set,
reconstructs the dense target, then reconstructs the sparse input from a
maximally uniform subset of the same projections, so the sparse stack is a
bit-exact subset of the dense one.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np

from . import __version__
from .errors import ConfigError
from .fdk import fdk_reconstruct
from .geometry import ConeBeamGeometry, full_view_set, uniform_view_subset
from .projector import forward_project, hu_to_mu
from .volume import VoxelVolume, centered_grid, read_volume, write_volume

AIR_HU = -1000.0

# HU class -> uniform sampling band (center +- half-width)
HU_CLASSES = {
    "lung": (-850.0, 50.0),
    "bone": (700.0, 200.0),
    "soft": (50.0, 50.0),
    "lesion": (50.0, 30.0),
}


@dataclass(frozen=True)
class Ellipsoid:
    center: tuple[float, float, float]
    semi_axes: tuple[float, float, float]
    hu: float

    def __post_init__(self):
        if any(a <= 0 for a in self.semi_axes):
            raise ConfigError(f"ellipsoid semi-axes must be positive: {self.semi_axes}")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "semi_axes", tuple(float(a) for a in self.semi_axes))


def ellipsoid_contains(outer: Ellipsoid, inner: Ellipsoid) -> bool:
    """Sufficient containment test: normalized center distance plus the worst
    axis ratio must not exceed 1."""
    c = np.asarray(inner.center) - np.asarray(outer.center)
    b = np.asarray(outer.semi_axes)
    d = float(np.linalg.norm(c / b))
    rho = float(np.max(np.asarray(inner.semi_axes) / b))
    return d + rho <= 1.0


@dataclass(frozen=True)
class PhantomSpec:
    """Recipe for one phantom.  When ``body``/``inclusions`` are omitted they
    are sampled deterministically from ``seed``; explicit ellipsoids are
    validated for containment inside the body."""

    seed: int
    dims: tuple[int, int, int] = (64, 64, 32)
    spacing: tuple[float, float, float] = (4.0, 4.0, 6.0)
    n_inclusions: int | None = None
    body: Ellipsoid | None = None
    inclusions: tuple[Ellipsoid, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        if any(d < 1 for d in self.dims) or any(s <= 0 for s in self.spacing):
            raise ConfigError(f"bad grid: dims={self.dims} spacing={self.spacing}")
        if self.inclusions is not None:
            if self.body is None:
                raise ConfigError("explicit inclusions require an explicit body")
            object.__setattr__(self, "inclusions", tuple(self.inclusions))
            for inc in self.inclusions:
                if not ellipsoid_contains(self.body, inc):
                    raise ConfigError(f"inclusion {inc} lies outside the body ellipsoid")
                if not (-1000.0 <= inc.hu <= 1000.0):
                    raise ConfigError(f"inclusion HU {inc.hu} outside [-1000, 1000]")


def sample_layout(spec: PhantomSpec) -> tuple[Ellipsoid, tuple[Ellipsoid, ...]]:
    """Body and inclusions for a spec; a pure, replayable function of the seed.

    Beyond the large organ-scale inclusions, a handful of small high-contrast
    structures (bone fragments and air pockets, down to near-voxel size) are
    added; these carry the high spatial frequencies that make sparse-view
    reconstructions exhibit realistic streaks."""
    if spec.body is not None and spec.inclusions is not None:
        return spec.body, spec.inclusions
    rng = np.random.default_rng(spec.seed)
    extent = np.asarray(spec.dims) * np.asarray(spec.spacing)
    body_semi = (
        extent[0] * rng.uniform(0.30, 0.42),
        extent[1] * rng.uniform(0.30, 0.42),
        extent[2] * rng.uniform(0.35, 0.47),
    )
    body_center = tuple(rng.uniform(-0.02, 0.02) * e for e in extent)
    body = Ellipsoid(body_center, body_semi, rng.uniform(0.0, 80.0))
    n_inc = (
        int(rng.integers(8, 15)) if spec.n_inclusions is None else int(spec.n_inclusions)
    )
    names = sorted(HU_CLASSES)
    inclusions = []

    def place(semi_lo, semi_hi, hu):
        for _attempt in range(200):
            semi = tuple(rng.uniform(semi_lo, semi_hi) for _ in range(3))
            center = tuple(
                bc + rng.uniform(-0.85, 0.85) * bs
                for bc, bs in zip(body.center, body.semi_axes)
            )
            candidate = Ellipsoid(center, semi, hu)
            if ellipsoid_contains(body, candidate):
                inclusions.append(candidate)
                return

    for _ in range(n_inc):
        cls = names[rng.integers(0, len(names))]
        center_hu, half = HU_CLASSES[cls]
        place(6.0, 26.0, rng.uniform(center_hu - half, center_hu + half))
    for _ in range(int(rng.integers(4, 9))):
        if rng.integers(0, 2):
            hu = rng.uniform(500.0, 900.0)  # calcification-like bone speck
        else:
            hu = rng.uniform(-900.0, -800.0)  # small air pocket
        place(3.0, 8.0, hu)
    return body, tuple(inclusions)


def generate_phantom(spec: PhantomSpec) -> VoxelVolume:
    """Rasterize the phantom: air background, body HU inside the body
    ellipsoid, then inclusions painted in order (later entries override,
    standing in for nested structures)."""
    body, inclusions = sample_layout(spec)
    grid = centered_grid(spec.dims, spec.spacing)
    xs, ys, zs = grid.voxel_centers()
    X = xs[:, None, None]
    Y = ys[None, :, None]
    Z = zs[None, None, :]
    values = np.full(spec.dims, AIR_HU, dtype=np.float32)

    def inside(e: Ellipsoid):
        return (
            ((X - e.center[0]) / e.semi_axes[0]) ** 2
            + ((Y - e.center[1]) / e.semi_axes[1]) ** 2
            + ((Z - e.center[2]) / e.semi_axes[2]) ** 2
        ) <= 1.0

    values[inside(body)] = body.hu
    for inc in inclusions:
        values[inside(inc)] = inc.hu
    return VoxelVolume(values, spec.spacing, grid.origin, unit="HU")


def sample_seed(master_seed: int, index: int) -> int:
    """Per-sample RNG stream derived from (master seed, sample index)."""
    return int(np.random.SeedSequence([int(master_seed), int(index)]).generate_state(1)[0])


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def make_dataset(
    n: int,
    views_sparse: int,
    views_dense: int,
    geom: ConeBeamGeometry,
    out_dir: str,
    master_seed: int = 0,
    dims=(64, 64, 32),
    spacing=(4.0, 4.0, 6.0),
    n_inclusions: int | None = None,
    verbose: bool = False,
) -> dict:
    """Write ``n`` paired samples (sparse FDK input, dense FDK target) plus a
    manifest that reproduces them bit-exactly."""
    n = int(n)
    if n < 1:
        raise ConfigError(f"need at least one sample, got n={n}")
    if not (2 <= views_sparse <= views_dense):
        raise ConfigError(
            f"need 2 <= views_sparse <= views_dense, got {views_sparse}/{views_dense}"
        )
    os.makedirs(out_dir, exist_ok=True)
    views = full_view_set(geom, views_dense)
    subset = uniform_view_subset(views_dense, views_sparse)
    grid = centered_grid(dims, spacing)
    samples = []
    for i in range(n):
        seed = sample_seed(master_seed, i)
        spec = PhantomSpec(seed, dims, spacing, n_inclusions)
        phantom = generate_phantom(spec)
        stack = forward_project(hu_to_mu(phantom), geom, views)
        target = fdk_reconstruct(stack, geom, grid)
        inp = fdk_reconstruct(stack.select_views(subset), geom, grid)
        input_base = os.path.join(out_dir, f"sample{i:04d}_input")
        target_base = os.path.join(out_dir, f"sample{i:04d}_target")
        write_volume(inp, input_base)
        write_volume(target, target_base)
        samples.append(
            {
                "index": i,
                "seed": seed,
                "input": os.path.basename(input_base),
                "target": os.path.basename(target_base),
                "sha256_input": _sha256(input_base + ".raw"),
                "sha256_target": _sha256(target_base + ".raw"),
            }
        )
        if verbose:
            print(f"[simulate] sample {i + 1}/{n} done", flush=True)
    manifest = {
        "kind": "paired-dataset",
        "version": __version__,
        "master_seed": int(master_seed),
        "n_samples": n,
        "views_dense": int(views_dense),
        "views_sparse": int(views_sparse),
        "subset_indices": [int(j) for j in subset],
        "geometry": geom.to_dict(),
        "grid": {"dims": list(grid.dims), "spacing_mm": list(grid.spacing)},
        "n_inclusions": n_inclusions,
        "samples": samples,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def load_manifest(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("kind") != "paired-dataset":
        raise ConfigError(f"{path}: not a paired-dataset manifest")
    return manifest


@dataclass(frozen=True)
class PairedSample:
    """One (sparse input, dense target) pair plus the manifest row that
    reproduces it.  Iterable as (input, target) for unpacking."""

    input: VoxelVolume
    target: VoxelVolume
    meta: dict

    def __iter__(self):
        yield self.input
        yield self.target

    def __getitem__(self, index):
        return (self.input, self.target)[index]


def load_pairs(manifest_path: str) -> list[PairedSample]:
    """Load the (input, target) volume pairs listed in a dataset manifest."""
    manifest = load_manifest(manifest_path)
    root = os.path.dirname(os.path.abspath(manifest_path))
    pairs = []
    for entry in manifest["samples"]:
        inp = read_volume(os.path.join(root, entry["input"]))
        tgt = read_volume(os.path.join(root, entry["target"]))
        pairs.append(PairedSample(inp, tgt, dict(entry)))
    return pairs
