"""2-D to 3-D feature lifting with 3D deformable attention.

The core operators live in :mod:`dfa3d.dfa`; :mod:`dfa3d.lifting` runs them
over a 3D anchor grid and :mod:`dfa3d.harness` holds the benchmark and
verification routines behind the ``dfa3d`` command.
"""

import numba as _numba

# probe OpenMP before TBB; the system TBB is too old and warns on import
_numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

from .depth_field import DepthField, expand_features, interpolate_to_scale, normalize_depth  # noqa: E402
from .dfa import (  # noqa: E402
    ProjectionTables,
    SamplingSpec,
    aggregate_views,
    dfa2d,
    dfa3d_backward,
    dfa3d_efficient,
    dfa3d_vanilla,
    generate_sampling,
)
from .geometry import CameraModel, colinear_queries, project_point  # noqa: E402
from .tensor_core import DenseTensor, alloc, counted_multiply_region, measure  # noqa: E402

__all__ = [
    "CameraModel",
    "DenseTensor",
    "DepthField",
    "ProjectionTables",
    "SamplingSpec",
    "aggregate_views",
    "alloc",
    "colinear_queries",
    "counted_multiply_region",
    "dfa2d",
    "dfa3d_backward",
    "dfa3d_efficient",
    "dfa3d_vanilla",
    "expand_features",
    "generate_sampling",
    "interpolate_to_scale",
    "measure",
    "normalize_depth",
    "project_point",
]
