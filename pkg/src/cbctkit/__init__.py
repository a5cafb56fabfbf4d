"""Sparse-view cone-beam CT toolkit: simulation, FDK reconstruction, and
learned iterative streak removal, all runnable at desk scale."""

__version__ = "0.1.0"

from .geometry import (
    ConeBeamGeometry,
    ViewSet,
    full_view_set,
    make_desk_geometry,
    make_full_fan_geometry,
    make_reference_geometry,
    source_position,
    uniform_view_subset,
)
from .volume import (
    ProjectionStack,
    VoxelVolume,
    centered_grid,
    denormalize,
    normalize_hu,
    read_projections,
    read_volume,
    write_projections,
    write_volume,
)

__all__ = [
    "ConeBeamGeometry",
    "ProjectionStack",
    "SparseViewRestorer",
    "ViewSet",
    "VoxelVolume",
    "__version__",
    "centered_grid",
    "denormalize",
    "full_view_set",
    "make_desk_geometry",
    "make_full_fan_geometry",
    "make_reference_geometry",
    "normalize_hu",
    "read_projections",
    "read_volume",
    "source_position",
    "uniform_view_subset",
    "write_projections",
    "write_volume",
]


def __getattr__(name):
    # estimator import is lazy so that volume/geometry users do not pay the
    # torch import cost
    if name == "SparseViewRestorer":
        from .estimator import SparseViewRestorer

        return SparseViewRestorer
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
