"""Occlusion mask extraction and depth-edge signals.

A pixel is occluded when its camera ray crosses more than two surfaces;
the raw mask is the exact elementwise threshold ``count > 2``.  The
refined mask drops small connected components and dilates what remains,
and is the canonical mask consumed downstream.  Depth edges come either
from the absolute-gradient threshold or from a Canny detector run on the
depth buffer rescaled to [0, 255]; edges restricted to the occlusion mask
form the sparse boundary conditioning signal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

# Refinement defaults are stated at 1024x1024 and scaled for other sizes;
# the references give no values, so these are artifact choices exposed as
# flags: large enough to kill 1-2 px speckle, small enough to keep
# limb-contact regions.
BASE_AREA_MIN = 50
BASE_DILATION_RADIUS = 3
BASE_SIZE = 1024

DEFAULT_TAU = 0.1  # meters; gradient-threshold fallback, no reference value
DEFAULT_CANNY_LOW = 5.0  # on the [0, 255] rescaled depth
DEFAULT_CANNY_HIGH = 15.0

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class RefineParams:
    area_min: int
    dilation_radius: int


@dataclass(frozen=True)
class OcclusionMask:
    """Binary occlusion mask with the refinement parameters that shaped it."""

    mask: np.ndarray  # (H, W) uint8 in {0, 1}
    params: RefineParams = RefineParams(area_min=0, dilation_radius=0)


@dataclass(frozen=True)
class EdgeMap:
    """Binary edge map plus the extraction method and its parameters."""

    edges: np.ndarray  # (H, W) uint8 in {0, 1}
    method: str
    params: dict


def _as_binary(data) -> np.ndarray:
    arr = data.mask if isinstance(data, OcclusionMask) else data
    arr = arr.edges if isinstance(arr, EdgeMap) else arr
    return (np.asarray(arr) != 0).astype(np.uint8)


def default_refine_params(width: int, height: int) -> tuple[int, int]:
    """Refinement defaults scaled from the 1024x1024 base values.

    area_min scales with image area, dilation radius with linear size.
    """
    area_scale = (width * height) / (BASE_SIZE * BASE_SIZE)
    area_min = int(round(BASE_AREA_MIN * area_scale))
    radius = int(round(BASE_DILATION_RADIUS * math.sqrt(area_scale)))
    return max(area_min, 0), max(radius, 0)


def occlusion_mask(count: np.ndarray) -> OcclusionMask:
    """Raw mask: 1 where the ray intersects more than two surfaces."""
    mask = (np.asarray(count) > 2).astype(np.uint8)
    return OcclusionMask(mask=mask)


def filter_small_components(mask, area_min: int) -> np.ndarray:
    """Drop 8-connected components smaller than ``area_min`` pixels."""
    if area_min < 0:
        raise ValueError("area_min must be >= 0")
    binary = _as_binary(mask)
    if area_min == 0 or not binary.any():
        return binary
    labels, n = ndimage.label(binary, structure=EIGHT_CONNECTED)
    sizes = np.bincount(labels.ravel(), minlength=n + 1)
    keep = sizes >= area_min
    keep[0] = False
    return keep[labels].astype(np.uint8)


def disk_element(radius: int) -> np.ndarray:
    """Boolean disk: offsets within Euclidean distance ``radius``."""
    if radius < 0:
        raise ValueError("radius must be >= 0")
    span = np.arange(-radius, radius + 1)
    dx, dy = np.meshgrid(span, span)
    return dx * dx + dy * dy <= radius * radius


def dilate(mask, radius: int) -> np.ndarray:
    """Morphological dilation with a Euclidean disk element."""
    binary = _as_binary(mask)
    if radius == 0:
        return binary
    return ndimage.binary_dilation(binary, structure=disk_element(radius)).astype(np.uint8)


def refine_mask(raw, area_min: int, radius: int) -> OcclusionMask:
    """Canonical downstream mask: small components removed, then dilated."""
    filtered = filter_small_components(raw, area_min)
    return OcclusionMask(
        mask=dilate(filtered, radius),
        params=RefineParams(area_min=int(area_min), dilation_radius=int(radius)),
    )


def depth_edges(depth: np.ndarray, tau: float, depth_clip: float = 5.0) -> EdgeMap:
    """Gradient-threshold edges: |dd/dx| + |dd/dy| > tau on finite pixels.

    No-hit pixels substitute ``depth_clip`` so silhouettes register;
    gradients are central differences, one-sided at image borders.
    """
    if not tau > 0:
        raise ValueError("tau must be > 0")
    depth = np.asarray(depth, dtype=np.float64)
    finite = np.isfinite(depth)
    values = np.where(finite, depth, depth_clip)
    if depth.shape[0] > 1:
        gy = np.gradient(values, axis=0)
    else:
        gy = np.zeros_like(values)
    if depth.shape[1] > 1:
        gx = np.gradient(values, axis=1)
    else:
        gx = np.zeros_like(values)
    edges = ((np.abs(gx) + np.abs(gy)) > tau) & finite
    return EdgeMap(edges=edges.astype(np.uint8), method="gradient-threshold", params={"tau": tau})


def _gaussian_kernel_5x5(sigma: float) -> np.ndarray:
    span = np.arange(-2, 3, dtype=np.float64)
    xx, yy = np.meshgrid(span, span)
    kernel = np.exp(-(xx * xx + yy * yy) / (2.0 * sigma * sigma))
    return kernel / kernel.sum()


def canny_edges(depth: np.ndarray, low: float, high: float, depth_clip: float = 5.0) -> EdgeMap:
    """Canny on the depth buffer rescaled to [0, 255].

    Stages: no-hit substitution with ``depth_clip``, affine rescale of the
    (now finite) values to [0, 255], 5x5 Gaussian smoothing (sigma 1.0),
    Sobel gradients, 4-direction non-maximum suppression, and double
    threshold with 8-connected hysteresis.
    """
    if not (0 < low <= high):
        raise ValueError("need 0 < low <= high")
    depth = np.asarray(depth, dtype=np.float64)
    values = np.where(np.isfinite(depth), depth, depth_clip)
    lo, hi = values.min(), values.max()
    if hi > lo:
        img = (values - lo) / (hi - lo) * 255.0
    else:
        img = np.zeros_like(values)

    smoothed = ndimage.convolve(img, _gaussian_kernel_5x5(1.0), mode="nearest")
    sobel_x = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
    gx = ndimage.convolve(smoothed, sobel_x, mode="nearest")
    gy = ndimage.convolve(smoothed, sobel_x.T, mode="nearest")
    mag = np.hypot(gx, gy)
    angle = np.degrees(np.arctan2(gy, gx)) % 180.0

    nms = np.zeros_like(mag)
    h, w = mag.shape
    if h > 2 and w > 2:
        m = mag[1:-1, 1:-1]
        a = angle[1:-1, 1:-1]
        neighbors = {
            0: (mag[1:-1, 2:], mag[1:-1, :-2]),  # horizontal gradient
            45: (mag[2:, :-2], mag[:-2, 2:]),
            90: (mag[2:, 1:-1], mag[:-2, 1:-1]),
            135: (mag[:-2, :-2], mag[2:, 2:]),
        }
        bins = {
            0: ((a >= 0) & (a < 22.5)) | (a >= 157.5),
            45: (a >= 22.5) & (a < 67.5),
            90: (a >= 67.5) & (a < 112.5),
            135: (a >= 112.5) & (a < 157.5),
        }
        keep = np.zeros_like(m, dtype=bool)
        for direction, (n1, n2) in neighbors.items():
            sel = bins[direction]
            # strict against the forward neighbor so plateau ties (perfect
            # steps) thin to a single pixel
            keep |= sel & (m > n1) & (m >= n2)
        nms[1:-1, 1:-1] = np.where(keep, m, 0.0)

    strong = nms >= high
    weak = (nms >= low) & ~strong
    labels, n = ndimage.label(strong | weak, structure=EIGHT_CONNECTED)
    if n:
        anchored = np.zeros(n + 1, dtype=bool)
        anchored[np.unique(labels[strong])] = True
        anchored[0] = False
        edges = anchored[labels]
    else:
        edges = np.zeros_like(strong)
    return EdgeMap(
        edges=edges.astype(np.uint8),
        method="canny",
        params={"canny_low": low, "canny_high": high},
    )


def masked_edges(edges, mask) -> EdgeMap:
    """Edges restricted to the occlusion mask (elementwise AND)."""
    e = _as_binary(edges)
    m = _as_binary(mask)
    if e.shape != m.shape:
        raise ValueError(f"edge map {e.shape} and mask {m.shape} dimensions differ")
    method = edges.method if isinstance(edges, EdgeMap) else "unknown"
    params = dict(edges.params) if isinstance(edges, EdgeMap) else {}
    params["masked"] = True
    return EdgeMap(edges=(e & m).astype(np.uint8), method=method, params=params)
