"""Discrete per-pixel depth distributions.

Bin ``k`` sits at depth ``d_origin + k * d_delta``.  Depths outside the bin
range read missing bins as zero, the same padding rule the spatial
interpolation uses, so the trilinear and depth-weighted bilinear paths agree
everywhere.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from os import PathLike
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensor_core import alloc, load_tensor, outer_last, save_tensor

FIBER_TOL = 1e-6


@dataclass(frozen=True)
class DepthField:
    dist: np.ndarray  # V x H x W x D
    d_delta: float = 1.0
    d_origin: float = 0.0
    scale_id: int = 0

    def __post_init__(self):
        dist = np.asarray(self.dist)
        if dist.ndim != 4:
            raise ValueError(f"depth field must be V x H x W x D, got shape {dist.shape}")
        if dist.shape[-1] < 1:
            raise ValueError("need at least one depth bin")
        if not self.d_delta > 0:
            raise ValueError("d_delta must be positive")
        object.__setattr__(self, "dist", dist)

    @property
    def num_bins(self) -> int:
        return self.dist.shape[-1]

    @property
    def d_min(self) -> float:
        return self.d_origin

    @property
    def d_max(self) -> float:
        return self.d_origin + (self.num_bins - 1) * self.d_delta

    def bin_depths(self) -> np.ndarray:
        return self.d_origin + self.d_delta * np.arange(self.num_bins)

    def is_normalized(self, tol: float = FIBER_TOL) -> bool:
        return bool(np.all(np.abs(self.dist.sum(axis=-1) - 1.0) <= tol))

    def with_dist(self, dist: np.ndarray, scale_id: int | None = None) -> "DepthField":
        return DepthField(
            dist, self.d_delta, self.d_origin, self.scale_id if scale_id is None else scale_id
        )


def softmax_last(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_last_backward(probs: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. logits given softmax output and the gradient w.r.t. it."""
    return probs * (grad - np.sum(grad * probs, axis=-1, keepdims=True))


def normalize_depth(
    logits: np.ndarray, d_delta: float = 1.0, d_origin: float = 0.0, scale_id: int = 0
) -> DepthField:
    logits = np.asarray(logits)
    if not np.all(np.isfinite(logits)):
        raise ValueError("depth logits must be finite")
    dist = alloc(logits.shape, logits.dtype if logits.dtype == np.float32 else np.float64).data
    dist[...] = softmax_last(logits)
    return DepthField(dist, d_delta, d_origin, scale_id)


def _resize_axis_weights(src: int, dst: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Index pairs and weights for 1-D align-corners-false linear resampling."""
    scale = src / dst
    pos = (np.arange(dst) + 0.5) * scale - 0.5
    pos = np.clip(pos, 0.0, src - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, src - 1)
    t = pos - lo
    return lo, hi, t


def resize_bilinear(maps: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Resize axes 1 and 2 of a V x H x W x ... array (align-corners-false, edge clamped)."""
    if target_h < 1 or target_w < 1:
        raise ValueError("target extents must be >= 1")
    maps = np.asarray(maps)
    h, w = maps.shape[1], maps.shape[2]
    if (h, w) == (target_h, target_w):
        return maps.copy()
    ylo, yhi, ty = _resize_axis_weights(h, target_h)
    xlo, xhi, tx = _resize_axis_weights(w, target_w)
    tail = (1,) * (maps.ndim - 3)
    ty = ty.reshape((1, -1, 1) + tail)
    tx = tx.reshape((1, 1, -1) + tail)
    rows = maps[:, ylo] * (1 - ty) + maps[:, yhi] * ty
    return rows[:, :, xlo] * (1 - tx) + rows[:, :, xhi] * tx


def interpolate_to_scale(field: DepthField, target_h: int, target_w: int, scale_id: int | None = None) -> DepthField:
    """Resample every depth slice spatially, then renormalise each fiber."""
    dist = field.dist
    if dist.shape[1:3] == (target_h, target_w):
        return field.with_dist(dist.copy(), scale_id)
    resized = resize_bilinear(dist, target_h, target_w)
    total = resized.sum(axis=-1, keepdims=True)
    out = alloc(resized.shape, dist.dtype).data
    # all-zero fibers can only come from all-zero inputs; keep them zero
    np.divide(resized, total, out=out, where=total > 0)
    return field.with_dist(out, scale_id)


def depth_coordinate(field: DepthField, d_s: float) -> tuple[int, float]:
    """Lower bin index and fractional position of depth ``d_s``."""
    z = (d_s - field.d_origin) / field.d_delta
    k0 = math.floor(z)
    return k0, z - k0


def sample_depth_scores(
    field: DepthField, view: int, corners: Sequence[tuple[int, int]], d_s: float
) -> np.ndarray:
    """Depth scores at four integer ``(u, v)`` corners, linearly interpolated in depth."""
    _, h, w, nbins = field.dist.shape
    k0, td = depth_coordinate(field, d_s)
    out = np.zeros(len(corners), dtype=np.float64)
    for i, (u, v) in enumerate(corners):
        if not (0 <= u < w and 0 <= v < h):
            raise ValueError(f"corner {(u, v)} outside the {w}x{h} grid")
        fiber = field.dist[view, v, u]
        lo = fiber[k0] if 0 <= k0 < nbins else 0.0
        hi = fiber[k0 + 1] if 0 <= k0 + 1 < nbins else 0.0
        out[i] = lo * (1 - td) + hi * td
    return out


def expand_features(features: np.ndarray, field: DepthField) -> np.ndarray:
    """Materialise ``F[v, h, w, d, c] = dist[v, h, w, d] * features[v, h, w, c]``."""
    features = np.asarray(features)
    if features.shape[:3] != field.dist.shape[:3]:
        raise ValueError(
            f"spatial extents differ: features {features.shape[:3]}, depth {field.dist.shape[:3]}"
        )
    return outer_last(field.dist, features, dtype=features.dtype)


# -- synthetic generators ----------------------------------------------------


def uniform_field(views: int, h: int, w: int, bins: int, d_delta: float = 1.0, d_origin: float = 0.0, dtype=np.float64) -> DepthField:
    dist = np.full((views, h, w, bins), 1.0 / bins, dtype=dtype)
    return DepthField(dist, d_delta, d_origin)


def one_hot_field(depth_map: np.ndarray, bins: int, d_delta: float = 1.0, d_origin: float = 0.0, dtype=np.float64) -> DepthField:
    """One-hot at the nearest bin to each pixel's depth; pixels with depth <= 0 get uniform fibers."""
    depth_map = np.asarray(depth_map, dtype=np.float64)
    k = np.clip(np.rint((depth_map - d_origin) / d_delta), 0, bins - 1).astype(np.int64)
    dist = np.zeros(depth_map.shape + (bins,), dtype=dtype)
    np.put_along_axis(dist, k[..., None], 1.0, axis=-1)
    dist[depth_map <= 0] = 1.0 / bins
    return DepthField(dist, d_delta, d_origin)


def gaussian_field(depth_map: np.ndarray, bins: int, sigma: float, d_delta: float = 1.0, d_origin: float = 0.0, dtype=np.float64) -> DepthField:
    """Normalised Gaussian bump of width ``sigma`` (metres) around each pixel's depth."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    depth_map = np.asarray(depth_map, dtype=np.float64)
    centers = d_origin + d_delta * np.arange(bins)
    logits = -0.5 * ((centers - depth_map[..., None]) / sigma) ** 2
    dist = softmax_last(logits).astype(dtype)
    dist[depth_map <= 0] = 1.0 / bins
    return DepthField(dist, d_delta, d_origin)


# -- serialisation ------------------------------------------------------------


def save_field(field: DepthField, stem: str | PathLike) -> tuple[Path, Path]:
    """Write ``<stem>.dtnsr`` plus a ``<stem>.json`` sidecar."""
    stem = Path(stem)
    tpath = stem.with_suffix(".dtnsr")
    jpath = stem.with_suffix(".json")
    save_tensor(tpath, field.dist)
    jpath.write_text(
        json.dumps({"d_delta": field.d_delta, "d_origin": field.d_origin, "scale_id": field.scale_id})
    )
    return tpath, jpath


def load_field(stem: str | PathLike) -> DepthField:
    stem = Path(stem)
    dist = load_tensor(stem.with_suffix(".dtnsr")).data
    meta = json.loads(stem.with_suffix(".json").read_text())
    return DepthField(dist, float(meta["d_delta"]), float(meta["d_origin"]), int(meta["scale_id"]))


def multiscale_fields(base: DepthField, shapes: Sequence[tuple[int, int]]) -> list[DepthField]:
    """Depth fields for every feature scale, derived from the base-scale field."""
    return [interpolate_to_scale(base, h, w, scale_id=i) for i, (h, w) in enumerate(shapes)]
