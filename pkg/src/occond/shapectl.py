"""User-defined body shape control: blending and similarity of shape vectors."""

from __future__ import annotations

import math
import warnings

import numpy as np

from .bodymodel import ShapeVector
from .errors import ShapeDimensionError

# Beyond this blend ratio the synthetic shape basis is unlikely to stay
# plausibly linear; extrapolation is permitted but flagged.
EXTRAPOLATION_WARN = 2.0


def _as_betas(beta) -> np.ndarray:
    if isinstance(beta, ShapeVector):
        return beta.betas
    return np.asarray(beta, dtype=np.float64)


def blend_shapes(beta1, beta2, gamma: float) -> ShapeVector:
    """Interpolate (or extrapolate) between two shape vectors.

    target = gamma * beta1 + (1 - gamma) * beta2; gamma outside [0, 1]
    extrapolates and is not clamped.
    """
    a = _as_betas(beta1)
    b = _as_betas(beta2)
    if a.shape != b.shape:
        raise ShapeDimensionError(f"shape vectors differ in length: {a.shape} vs {b.shape}")
    if not np.isfinite(gamma):
        raise ValueError("gamma must be finite")
    if abs(gamma) > EXTRAPOLATION_WARN:
        warnings.warn(
            f"blend ratio {gamma} extrapolates far outside the reference shapes",
            stacklevel=2,
        )
    return ShapeVector(gamma * a + (1.0 - gamma) * b)


def shape_distance(beta_a, beta_b) -> float:
    """Cosine similarity between two shape vectors, in [-1, 1]."""
    a = _as_betas(beta_a)
    b = _as_betas(beta_b)
    if a.shape != b.shape:
        raise ShapeDimensionError(f"shape vectors differ in length: {a.shape} vs {b.shape}")
    aa = float(np.dot(a, a))
    bb = float(np.dot(b, b))
    if aa == 0.0 or bb == 0.0:
        raise ValueError("cosine similarity is undefined for a zero shape vector")
    value = float(np.dot(a, b)) / math.sqrt(aa * bb)
    return min(1.0, max(-1.0, value))
