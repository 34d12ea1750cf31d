"""Occlusion-aware conditioning toolkit for multi-human body scenes.

Builds the conditioning buffers (depth, normal, ray-intersection counts,
occlusion masks, masked depth edges) from parametric body scenes, provides
the spatially varying guidance and residual-composition field math, and
implements geometry-level evaluation metrics.
"""

__version__ = "0.1.0"

from . import bodymodel, scene, raster, occlusion, guidance, shapectl, metrics  # noqa: F401
from .errors import (  # noqa: F401
    OccondError,
    ShapeDimensionError,
    PoseDimensionError,
    SceneValidationError,
    SchemaError,
)
