"""E(3)-equivariant rigid head pose estimation on voxel grids.

Set ``STEERPOSE_THREADS`` to bound BLAS/OpenMP threads (default: library default).
"""
import os as _os

_threads = _os.environ.get("STEERPOSE_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

from .errors import (AmbiguousProjection, ConfigError, DegenerateBasis, DegenerateOutput,  # noqa: E402
                     EmptyOccupancy, EmptySelectionRule, FormatError, ProtocolError, SolverDegeneracy,
                     ValidationError)

__version__ = "0.1.0"

__all__ = [
    "AmbiguousProjection", "ConfigError", "DegenerateBasis", "DegenerateOutput", "EmptyOccupancy",
    "EmptySelectionRule", "FormatError", "ProtocolError", "SolverDegeneracy", "ValidationError",
]
