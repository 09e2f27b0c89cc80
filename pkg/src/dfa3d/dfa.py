"""Deformable attention operators over multi-view, multi-scale feature maps.

``dfa3d_vanilla`` samples trilinearly from explicitly expanded
``depth x feature`` maps.  ``dfa3d_efficient`` produces the same values
without ever materialising them: each sampling point first interpolates the
depth scores of its four spatial corners, then does a score-weighted bilinear
sum of the 2-D features.  ``dfa2d`` is the depth-agnostic baseline.

Heads split the channel axis: head ``m`` reads channels
``[m*C/M, (m+1)*C/M)`` and the per-head results are concatenated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernels
from .depth_field import DepthField, softmax_last, softmax_last_backward
from .geometry import CameraModel, project_points, visibility_mask
from .tensor_core import alloc, count_multiplies, matvec_rows

WEIGHT_TOL = 1e-6


class ShapeMismatchError(ValueError):
    pass


@dataclass
class SamplingSpec:
    offsets: np.ndarray  # Q x M x L x K x 3  (du, dv in scale-0 pixels; dd in metres)
    weights: np.ndarray  # Q x M x L x K

    def __post_init__(self):
        self.offsets = np.ascontiguousarray(self.offsets, dtype=np.float64)
        self.weights = np.ascontiguousarray(self.weights, dtype=np.float64)
        if self.offsets.ndim != 5 or self.offsets.shape[-1] != 3:
            raise ShapeMismatchError(f"offsets must be Q x M x L x K x 3, got {self.offsets.shape}")
        if self.weights.shape != self.offsets.shape[:-1]:
            raise ShapeMismatchError(
                f"weights {self.weights.shape} do not match offsets {self.offsets.shape}"
            )
        if self.offsets.shape[3] < 1:
            raise ShapeMismatchError("need K >= 1 sampling points")

    @property
    def num_queries(self) -> int:
        return self.weights.shape[0]

    @property
    def heads(self) -> int:
        return self.weights.shape[1]

    @property
    def levels(self) -> int:
        return self.weights.shape[2]

    @property
    def points(self) -> int:
        return self.weights.shape[3]

    def weights_normalized(self, tol: float = WEIGHT_TOL) -> bool:
        sums = self.weights.reshape(self.num_queries, self.heads, -1).sum(axis=-1)
        return bool(np.all(np.abs(sums - 1.0) <= tol))


@dataclass
class ProjectionTables:
    refs: np.ndarray  # Q x V x 3, (u, v, d) at scale 0
    visible: np.ndarray  # Q x V bool

    def __post_init__(self):
        self.refs = np.ascontiguousarray(self.refs, dtype=np.float64)
        self.visible = np.ascontiguousarray(self.visible, dtype=np.bool_)
        if self.refs.ndim != 3 or self.refs.shape[-1] != 3:
            raise ShapeMismatchError(f"refs must be Q x V x 3, got {self.refs.shape}")
        if self.visible.shape != self.refs.shape[:2]:
            raise ShapeMismatchError("visibility mask does not match refs")
        if not np.all(np.isfinite(self.refs[self.visible])):
            raise ValueError("visible reference points must be finite")


def project_queries(
    positions: np.ndarray,
    cameras: Sequence[CameraModel],
    d_min: float,
    d_max: float,
    use_depth_range: bool = True,
) -> ProjectionTables:
    """Reference points of every query in every view plus the visibility mask.

    With ``use_depth_range=False`` only the image bounds and positive depth
    decide visibility (the 2-D baseline has no depth bins).
    """
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    refs = np.empty((positions.shape[0], len(cameras), 3))
    vis = np.empty((positions.shape[0], len(cameras)), dtype=np.bool_)
    for n, cam in enumerate(cameras):
        uvd = project_points(positions, cam)
        refs[:, n] = uvd
        if use_depth_range:
            vis[:, n] = visibility_mask(uvd, cam, d_min, d_max)
        else:
            with np.errstate(invalid="ignore"):
                vis[:, n] = visibility_mask(uvd, cam, 0.0, np.inf) & (uvd[:, 2] > 0)
    refs[~vis] = 0.0
    return ProjectionTables(refs, vis)


# -- sampling generation ------------------------------------------------------


def generate_sampling(
    queries: np.ndarray,
    w_s: np.ndarray,
    w_a: np.ndarray,
    heads: int = 1,
    levels: int = 1,
) -> SamplingSpec:
    """Offsets and attention weights as linear maps of query content.

    Rows of ``w_s`` are laid out ``(m, l, k, xyz)`` and rows of ``w_a`` as
    ``(m, l, k)``; weights are a softmax over ``(l, k)`` per head.
    """
    queries = np.asarray(queries, dtype=np.float64)
    w_s = np.asarray(w_s, dtype=np.float64)
    w_a = np.asarray(w_a, dtype=np.float64)
    if queries.ndim != 2:
        raise ShapeMismatchError(f"queries must be Q x Cq, got {queries.shape}")
    nq = queries.shape[0]
    if w_a.shape[0] % (heads * levels) or w_a.shape[0] == 0:
        raise ShapeMismatchError(f"w_a has {w_a.shape[0]} rows, not a multiple of heads*levels")
    k = w_a.shape[0] // (heads * levels)
    if w_s.shape[0] != 3 * w_a.shape[0]:
        raise ShapeMismatchError(f"w_s needs {3 * w_a.shape[0]} rows, has {w_s.shape[0]}")
    offsets = matvec_rows(w_s, queries).reshape(nq, heads, levels, k, 3)
    logits = matvec_rows(w_a, queries).reshape(nq, heads, levels * k)
    weights = softmax_last(logits).reshape(nq, heads, levels, k)
    return SamplingSpec(offsets, weights)


def generate_sampling_backward(
    queries: np.ndarray,
    w_s: np.ndarray,
    w_a: np.ndarray,
    spec: SamplingSpec,
    grad_offsets: np.ndarray,
    grad_weights: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Chain offset/weight gradients back to ``(queries, w_s, w_a)``."""
    queries = np.asarray(queries, dtype=np.float64)
    nq = queries.shape[0]
    g_off = np.asarray(grad_offsets).reshape(nq, -1)
    probs = spec.weights.reshape(nq, spec.heads, -1)
    g_logits = softmax_last_backward(probs, np.asarray(grad_weights).reshape(probs.shape)).reshape(nq, -1)
    grad_q = g_off @ np.asarray(w_s) + g_logits @ np.asarray(w_a)
    return grad_q, g_off.T @ queries, g_logits.T @ queries


# -- single-point reference samplers -----------------------------------------


def _axis_corners(x: float, extent: int) -> list[tuple[int, float]]:
    x0 = math.floor(x)
    t = x - x0
    return [(i, wt) for i, wt in ((x0, 1.0 - t), (x0 + 1, t)) if 0 <= i < extent]


def trilinear_sample(
    expanded: np.ndarray, s: Sequence[float], d_origin: float = 0.0, d_delta: float = 1.0
) -> np.ndarray:
    """Zero-padded trilinear sample of an ``H x W x D x C`` map at ``(u, v, d)``."""
    h, w, nd, c = expanded.shape
    u, v, d = s
    out = np.zeros(c, dtype=np.result_type(expanded, np.float64))
    z = (d - d_origin) / d_delta
    for yy, wy in _axis_corners(v, h):
        for xx, wx in _axis_corners(u, w):
            for kk, wz in _axis_corners(z, nd):
                out += (wx * wy * wz) * expanded[yy, xx, kk]
    return out


def bilinear_sample(features: np.ndarray, s: Sequence[float]) -> np.ndarray:
    """Zero-padded bilinear sample of an ``H x W x C`` map at ``(u, v)``."""
    h, w, c = features.shape
    u, v = s[0], s[1]
    out = np.zeros(c, dtype=np.result_type(features, np.float64))
    for yy, wy in _axis_corners(v, h):
        for xx, wx in _axis_corners(u, w):
            out += (wx * wy) * features[yy, xx]
    return out


# -- packing ---------------------------------------------------------------


@dataclass
class _Layout:
    shapes: np.ndarray  # L x 2 (H, W)
    starts: np.ndarray  # L
    scales: np.ndarray  # L x 2 (sx, sy) relative to scale 0
    views: int


def _layout(spatial: Sequence[tuple[int, int, int]]) -> _Layout:
    if not spatial:
        raise ShapeMismatchError("need at least one scale")
    views = spatial[0][0]
    if any(s[0] != views for s in spatial):
        raise ShapeMismatchError("all scales must have the same number of views")
    shapes = np.array([[s[1], s[2]] for s in spatial], dtype=np.int64)
    if np.any(shapes < 1):
        raise ShapeMismatchError("spatial extents must be >= 1")
    starts = np.concatenate([[0], np.cumsum(shapes[:, 0] * shapes[:, 1])[:-1]]).astype(np.int64)
    h0, w0 = shapes[0]
    scales = np.stack([shapes[:, 1] / w0, shapes[:, 0] / h0], axis=-1).astype(np.float64)
    return _Layout(shapes, starts, scales, int(views))


def _pack(maps: Sequence[np.ndarray], dtype) -> np.ndarray:
    """Concatenate per-scale ``V x H x W x ...`` maps into ``V x S x ...``."""
    if len(maps) == 1:
        m = np.ascontiguousarray(maps[0], dtype=dtype)
        return m.reshape((m.shape[0], m.shape[1] * m.shape[2]) + m.shape[3:])
    views = maps[0].shape[0]
    total = sum(m.shape[1] * m.shape[2] for m in maps)
    tail = maps[0].shape[3:]
    packed = alloc((views, total) + tail, dtype).data
    pos = 0
    for m in maps:
        n = m.shape[1] * m.shape[2]
        packed[:, pos : pos + n] = np.asarray(m).reshape((views, n) + tail)
        pos += n
    return packed


def _as_list(x) -> list:
    if isinstance(x, (list, tuple)):
        return list(x)
    return [x]


def _check_common(layout: _Layout, channels: int, proj: ProjectionTables, spec: SamplingSpec) -> None:
    if proj.refs.shape[1] != layout.views:
        raise ShapeMismatchError(f"projection has {proj.refs.shape[1]} views, maps have {layout.views}")
    if spec.num_queries != proj.refs.shape[0]:
        raise ShapeMismatchError(
            f"sampling spec has {spec.num_queries} queries, projection has {proj.refs.shape[0]}"
        )
    if spec.levels != len(layout.shapes):
        raise ShapeMismatchError(f"spec has {spec.levels} scales, maps have {len(layout.shapes)}")
    if channels % spec.heads:
        raise ShapeMismatchError(f"{channels} channels do not split into {spec.heads} heads")


def _depth_geometry(depth: Sequence[DepthField]) -> tuple[float, float, int]:
    d0 = depth[0]
    for f in depth[1:]:
        if f.d_delta != d0.d_delta or f.d_origin != d0.d_origin or f.num_bins != d0.num_bins:
            raise ShapeMismatchError("depth bins must agree across scales")
    return d0.d_origin, d0.d_delta, d0.num_bins


def _new_output(nq: int, nv: int, channels: int, aggregate: str | None, dtype) -> np.ndarray:
    if aggregate not in (None, "sum", "mean"):
        raise ValueError(f"unknown aggregation {aggregate!r}")
    return alloc((nq, 1 if aggregate else nv, channels), dtype).data


def _finish(out: np.ndarray, visible: np.ndarray, aggregate: str | None) -> np.ndarray:
    if aggregate is None:
        return out
    out = out[:, 0, :]
    if aggregate == "mean":
        count = visible.sum(axis=1)
        np.divide(out, count[:, None], out=out, where=count[:, None] > 0)
    return out


def _evaluated_points(proj: ProjectionTables, spec: SamplingSpec) -> int:
    return int(proj.visible.sum()) * spec.heads * spec.levels * spec.points


# -- operators ---------------------------------------------------------------


def dfa3d_vanilla(
    expanded,
    proj: ProjectionTables,
    spec: SamplingSpec,
    d_origin: float = 0.0,
    d_delta: float = 1.0,
    aggregate: str | None = None,
) -> np.ndarray:
    """Attention-weighted trilinear samples of expanded ``V x H x W x D x C`` maps.

    ``expanded`` is one array per scale.  Returns ``Q x V x C``, or ``Q x C``
    when ``aggregate`` folds the views in (``"sum"`` or ``"mean"``).
    """
    maps = _as_list(expanded)
    if any(np.ndim(m) != 5 for m in maps):
        raise ShapeMismatchError("expanded maps must be V x H x W x D x C")
    layout = _layout([m.shape[:3] for m in maps])
    nd, channels = maps[0].shape[3], maps[0].shape[4]
    if any(m.shape[3:] != (nd, channels) for m in maps):
        raise ShapeMismatchError("depth/channel extents differ across scales")
    _check_common(layout, channels, proj, spec)
    dtype = maps[0].dtype
    packed = _pack(maps, dtype)
    out = _new_output(spec.num_queries, layout.views, channels, aggregate, dtype)
    kernels.vanilla_forward(
        packed, layout.shapes, layout.starts, layout.scales, proj.refs, proj.visible,
        spec.offsets, spec.weights, float(d_origin), float(d_delta), out, aggregate is not None,
    )
    n = _evaluated_points(proj, spec)
    ch = channels // spec.heads
    count_multiplies(n * kernels.VANILLA_FEATURE * ch, "feature")
    count_multiplies(n * kernels.VANILLA_WEIGHT, "weight")
    return _finish(out, proj.visible, aggregate)


def dfa3d_efficient(
    features,
    depth,
    proj: ProjectionTables,
    spec: SamplingSpec,
    aggregate: str | None = None,
) -> np.ndarray:
    """Same values as :func:`dfa3d_vanilla` from the 2-D maps and depth fields.

    Depth scores are interpolated per sampling point while it is evaluated;
    nothing of size ``D x C`` is allocated.
    """
    feats = _as_list(features)
    fields = _as_list(depth)
    if len(feats) != len(fields):
        raise ShapeMismatchError(f"{len(feats)} feature scales but {len(fields)} depth fields")
    if any(np.ndim(f) != 4 for f in feats):
        raise ShapeMismatchError("feature maps must be V x H x W x C")
    for f, d in zip(feats, fields):
        if f.shape[:3] != d.dist.shape[:3]:
            raise ShapeMismatchError(f"feature map {f.shape[:3]} vs depth field {d.dist.shape[:3]}")
    layout = _layout([f.shape[:3] for f in feats])
    channels = feats[0].shape[3]
    if any(f.shape[3] != channels for f in feats):
        raise ShapeMismatchError("channel count differs across scales")
    _check_common(layout, channels, proj, spec)
    d_origin, d_delta, _ = _depth_geometry(fields)
    dtype = feats[0].dtype
    feat = _pack(feats, dtype)
    dist = _pack([f.dist for f in fields], dtype)
    out = _new_output(spec.num_queries, layout.views, channels, aggregate, dtype)
    kernels.efficient_forward(
        feat, dist, layout.shapes, layout.starts, layout.scales, proj.refs, proj.visible,
        spec.offsets, spec.weights, float(d_origin), float(d_delta), out, aggregate is not None,
    )
    n = _evaluated_points(proj, spec)
    ch = channels // spec.heads
    count_multiplies(n * kernels.EFFICIENT_FEATURE * ch, "feature")
    count_multiplies(n * kernels.EFFICIENT_DEPTH, "depth")
    count_multiplies(n * kernels.EFFICIENT_WEIGHT, "weight")
    return _finish(out, proj.visible, aggregate)


def dfa2d(features, proj: ProjectionTables, spec: SamplingSpec, aggregate: str | None = None) -> np.ndarray:
    """Standard deformable attention: the depth of refs and offsets is ignored."""
    feats = _as_list(features)
    if any(np.ndim(f) != 4 for f in feats):
        raise ShapeMismatchError("feature maps must be V x H x W x C")
    layout = _layout([f.shape[:3] for f in feats])
    channels = feats[0].shape[3]
    _check_common(layout, channels, proj, spec)
    dtype = feats[0].dtype
    feat = _pack(feats, dtype)
    out = _new_output(spec.num_queries, layout.views, channels, aggregate, dtype)
    kernels.bilinear_forward(
        feat, layout.shapes, layout.starts, layout.scales, proj.refs, proj.visible,
        spec.offsets, spec.weights, out, aggregate is not None,
    )
    n = _evaluated_points(proj, spec)
    count_multiplies(n * kernels.BILINEAR_FEATURE * (channels // spec.heads), "feature")
    count_multiplies(n * kernels.BILINEAR_WEIGHT, "weight")
    return _finish(out, proj.visible, aggregate)


def aggregate_views(per_view: np.ndarray, visible: np.ndarray, mode: str = "sum") -> np.ndarray:
    """Visibility-masked combination of per-view results (``Q x V x C`` -> ``Q x C``)."""
    per_view = np.asarray(per_view)
    visible = np.asarray(visible, dtype=bool)
    if per_view.shape[:2] != visible.shape:
        raise ShapeMismatchError(f"per-view results {per_view.shape} vs visibility {visible.shape}")
    masked = np.where(visible[..., None], per_view, 0)
    out = alloc((per_view.shape[0], per_view.shape[2]), per_view.dtype).data
    np.sum(masked, axis=1, out=out)
    if mode == "sum":
        return out
    if mode == "mean":
        count = visible.sum(axis=1)[:, None]
        np.divide(out, count, out=out, where=count > 0)
        return out
    raise ValueError(f"unknown aggregation mode {mode!r}")


# -- backward ----------------------------------------------------------------


@dataclass
class Gradients:
    features: list[np.ndarray]
    depth: list[np.ndarray]
    offsets: np.ndarray
    weights: np.ndarray
    depth_logits: list[np.ndarray] | None = None


def dfa3d_backward(
    grad_out: np.ndarray,
    features,
    depth,
    proj: ProjectionTables,
    spec: SamplingSpec,
    aggregate: str | None = None,
    workers: int = 1,
    depth_logits_chain: bool = False,
) -> Gradients:
    """Exact gradients of :func:`dfa3d_efficient` for an upstream gradient.

    Feature and depth gradients are accumulated in one buffer per worker and
    reduced in worker order.  With ``depth_logits_chain`` the depth gradients
    are also pushed through the per-fiber softmax, assuming each field's
    ``dist`` is the softmax of the caller's logits.
    """
    feats = _as_list(features)
    fields = _as_list(depth)
    layout = _layout([f.shape[:3] for f in feats])
    channels = feats[0].shape[3]
    _check_common(layout, channels, proj, spec)
    d_origin, d_delta, nd = _depth_geometry(fields)
    workers = max(1, min(int(workers), max(1, spec.num_queries)))
    dtype = np.float64
    feat = _pack(feats, dtype)
    dist = _pack([f.dist for f in fields], dtype)
    grad_out = np.asarray(grad_out, dtype=dtype)
    nq, nv = proj.visible.shape
    if aggregate is None:
        if grad_out.shape != (nq, nv, channels):
            raise ShapeMismatchError(f"upstream gradient {grad_out.shape}, expected {(nq, nv, channels)}")
        g_in = np.ascontiguousarray(grad_out)
    else:
        if grad_out.shape != (nq, channels):
            raise ShapeMismatchError(f"upstream gradient {grad_out.shape}, expected {(nq, channels)}")
        g_in = grad_out.copy()
        if aggregate == "mean":
            count = proj.visible.sum(axis=1)[:, None]
            np.divide(g_in, count, out=g_in, where=count > 0)
        g_in = g_in[:, None, :]
    total = feat.shape[1]
    g_feat_parts = alloc((workers, layout.views, total, channels), dtype).data
    g_dist_parts = alloc((workers, layout.views, total, nd), dtype).data
    g_off = alloc(spec.offsets.shape, dtype).data
    g_w = alloc(spec.weights.shape, dtype).data
    kernels.efficient_backward(
        feat, dist, layout.shapes, layout.starts, layout.scales, proj.refs, proj.visible,
        spec.offsets, spec.weights, float(d_origin), float(d_delta), g_in, aggregate is not None,
        g_feat_parts, g_dist_parts, g_off, g_w,
    )
    g_feat = alloc(g_feat_parts.shape[1:], dtype).data
    g_dist = alloc(g_dist_parts.shape[1:], dtype).data
    kernels.reduce_partials(g_feat_parts, g_feat)
    kernels.reduce_partials(g_dist_parts, g_dist)
    del g_feat_parts, g_dist_parts

    feat_grads, depth_grads = [], []
    for l, f in enumerate(feats):
        lo = layout.starts[l]
        n = f.shape[1] * f.shape[2]
        feat_grads.append(g_feat[:, lo : lo + n].reshape(f.shape))
        depth_grads.append(g_dist[:, lo : lo + n].reshape(fields[l].dist.shape))
    logit_grads = None
    if depth_logits_chain:
        logit_grads = [softmax_last_backward(f.dist, g) for f, g in zip(fields, depth_grads)]
    return Gradients(feat_grads, depth_grads, g_off, g_w, logit_grads)
