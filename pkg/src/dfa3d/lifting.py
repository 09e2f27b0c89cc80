"""Multi-layer feature lifting onto 3D anchors, plus synthetic scenes."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from . import geometry
from .depth_field import DepthField, gaussian_field, interpolate_to_scale, one_hot_field, uniform_field
from .dfa import (
    SamplingSpec,
    dfa2d,
    dfa3d_efficient,
    generate_sampling,
    project_queries,
)
from .geometry import CameraModel


class ConfigError(ValueError):
    pass


# -- anchors ------------------------------------------------------------------


@dataclass
class AnchorGrid:
    positions: np.ndarray  # Q x 3
    contents: np.ndarray  # Q x Cq
    extents: tuple[int, int, int] | None = None
    bounds: tuple[tuple[float, float], ...] | None = None

    @property
    def num_queries(self) -> int:
        return self.positions.shape[0]


def init_contents(n: int, cq: int, init: str = "zeros", seed: int = 0, scale: float = 1.0) -> np.ndarray:
    """Content features for ``n`` anchors.

    ``random`` draws i.i.d. N(0, scale^2) entries per anchor; ``shared`` draws
    one such vector and gives it to every anchor.
    """
    if init == "zeros":
        return np.zeros((n, cq))
    rng = np.random.default_rng(seed)
    if init == "random":
        return scale * rng.standard_normal((n, cq))
    if init == "shared":
        return np.repeat(scale * rng.standard_normal((1, cq)), n, axis=0)
    raise ConfigError(f"unknown content init {init!r}")


def build_anchor_grid(
    bounds: Sequence[Sequence[float]],
    extents: Sequence[int],
    cq: int,
    init: str = "zeros",
    seed: int = 0,
    scale: float = 1.0,
) -> AnchorGrid:
    """Cell centres of a regular ``nx x ny x nz`` grid, x-major ordering."""
    if len(bounds) != 3 or len(extents) != 3:
        raise ConfigError("need three (lo, hi) bounds and three extents")
    if any(int(e) < 1 for e in extents):
        raise ConfigError(f"grid extents must be >= 1, got {tuple(extents)}")
    axes = []
    for (lo, hi), n in zip(bounds, extents):
        step = (hi - lo) / n
        axes.append(lo + step * (np.arange(n) + 0.5))
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    positions = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=-1)
    contents = init_contents(positions.shape[0], cq, init, seed, scale)
    return AnchorGrid(
        positions,
        contents,
        tuple(int(e) for e in extents),
        tuple((float(lo), float(hi)) for lo, hi in bounds),
    )


def anchors_from_points(points, cq: int, init: str = "zeros", seed: int = 0, scale: float = 1.0) -> AnchorGrid:
    positions = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return AnchorGrid(positions, init_contents(positions.shape[0], cq, init, seed, scale))


# -- configuration ------------------------------------------------------------


@dataclass
class LiftConfig:
    num_layers: int = 1
    heads: int = 1
    points: int = 4
    aggregation: str = "sum"
    seed: int = 0
    offset_std: float = 1.0
    depth_offset_std: float = 0.5
    attn_std: float = 1.0
    zero_offsets: bool = False
    uniform_attention: bool = False
    update: str = "random"  # or "identity" (needs Cq == C)
    update_std: float = 1.0

    def __post_init__(self):
        if self.num_layers < 1:
            raise ConfigError("num_layers must be >= 1")
        if self.heads < 1 or self.points < 1:
            raise ConfigError("heads and points must be >= 1")
        if self.aggregation not in ("sum", "mean"):
            raise ConfigError(f"aggregation must be 'sum' or 'mean', got {self.aggregation!r}")
        if self.update not in ("random", "identity"):
            raise ConfigError(f"update must be 'random' or 'identity', got {self.update!r}")

    @classmethod
    def from_dict(cls, doc: dict) -> "LiftConfig":
        return _dataclass_from_dict(cls, doc)


@dataclass
class LayerParams:
    w_s: np.ndarray  # (M*L*K*3) x Cq
    w_a: np.ndarray  # (M*L*K) x Cq
    w_out: np.ndarray  # Cq x C


def make_layer_params(cfg: LiftConfig, cq: int, channels: int, levels: int) -> list[LayerParams]:
    rng = np.random.default_rng(cfg.seed)
    mlk = cfg.heads * levels * cfg.points
    params = []
    for _ in range(cfg.num_layers):
        std = np.tile([cfg.offset_std, cfg.offset_std, cfg.depth_offset_std], mlk)[:, None]
        w_s = std * rng.standard_normal((3 * mlk, cq)) / np.sqrt(cq)
        w_a = cfg.attn_std * rng.standard_normal((mlk, cq)) / np.sqrt(cq)
        w_out = cfg.update_std * rng.standard_normal((cq, channels)) / np.sqrt(channels)
        if cfg.zero_offsets:
            w_s[:] = 0.0
        if cfg.uniform_attention:
            w_a[:] = 0.0
        if cfg.update == "identity":
            if cq != channels:
                raise ConfigError(f"identity update needs Cq == C, got {cq} and {channels}")
            w_out = np.eye(cq)
        params.append(LayerParams(w_s, w_a, w_out))
    return params


# -- lifting ------------------------------------------------------------------


@dataclass
class LayerDiagnostics:
    sampling_locations: np.ndarray  # Q x V x M x L x K x 3, scale-0 pixels and metres
    lifted: np.ndarray  # Q x C aggregated result of the layer
    delta: np.ndarray  # Q x Cq content update
    visible: np.ndarray  # Q x V

    def summary(self) -> dict:
        return {
            "lifted_norm_mean": float(np.linalg.norm(self.lifted, axis=1).mean()) if len(self.lifted) else 0.0,
            "delta_norm_mean": float(np.linalg.norm(self.delta, axis=1).mean()) if len(self.delta) else 0.0,
            "delta_norm_max": float(np.linalg.norm(self.delta, axis=1).max()) if len(self.delta) else 0.0,
            "visible_pairs": int(self.visible.sum()),
        }


@dataclass
class LiftResult:
    contents: np.ndarray
    layers: list[LayerDiagnostics] = field(default_factory=list)


def _check_inputs(features, depth, cameras) -> None:
    if depth is not None and len(features) != len(depth):
        raise ConfigError(f"{len(features)} feature scales but {len(depth)} depth fields")
    for f in features:
        if f.shape[0] != len(cameras):
            raise ConfigError(f"feature maps have {f.shape[0]} views, rig has {len(cameras)} cameras")


def _run(grid, features, depth, cameras, cfg, params, mode) -> LiftResult:
    features = list(features)
    _check_inputs(features, depth, cameras)
    levels = len(features)
    channels = features[0].shape[-1]
    cq = grid.contents.shape[1]
    if params is None:
        params = make_layer_params(cfg, cq, channels, levels)
    if mode == "3d":
        d_min, d_max = depth[0].d_min, depth[0].d_max
        proj = project_queries(grid.positions, cameras, d_min, d_max)
    else:
        proj = project_queries(grid.positions, cameras, 0.0, np.inf, use_depth_range=False)
    contents = np.array(grid.contents, dtype=np.float64, copy=True)
    result = LiftResult(contents)
    for layer in params:
        spec = generate_sampling(contents, layer.w_s, layer.w_a, cfg.heads, levels)
        if mode == "3d":
            lifted = dfa3d_efficient(features, depth, proj, spec, aggregate=cfg.aggregation)
        else:
            spec = SamplingSpec(spec.offsets * np.array([1.0, 1.0, 0.0]), spec.weights)
            lifted = dfa2d(features, proj, spec, aggregate=cfg.aggregation)
        lifted = np.asarray(lifted, dtype=np.float64)
        delta = lifted @ layer.w_out.T
        contents = contents + delta
        locs = proj.refs[:, :, None, None, None, :] + spec.offsets[:, None]
        locs[~proj.visible] = np.nan
        result.layers.append(LayerDiagnostics(locs, lifted, delta, proj.visible))
    result.contents = contents
    return result


def lift(
    grid: AnchorGrid,
    features: Sequence[np.ndarray],
    depth: Sequence[DepthField],
    cameras: Sequence[CameraModel],
    cfg: LiftConfig,
    params: list[LayerParams] | None = None,
) -> LiftResult:
    """Refine anchor contents layer by layer with 3D deformable attention.

    Each layer projects the anchors, derives sampling offsets and weights from
    the current contents, samples every view, sums (or averages) the visible
    views and adds a linear projection of the result to the contents.
    """
    return _run(grid, features, depth, cameras, cfg, params, "3d")


def lift_dfa2d(
    grid: AnchorGrid,
    features: Sequence[np.ndarray],
    cameras: Sequence[CameraModel],
    cfg: LiftConfig,
    params: list[LayerParams] | None = None,
) -> LiftResult:
    """The same loop with depth-agnostic 2-D deformable attention."""
    return _run(grid, features, None, cameras, cfg, params, "2d")


# -- synthetic scenes ----------------------------------------------------------


@dataclass
class SceneSpec:
    num_views: int = 2
    image_w: int = 32
    image_h: int = 24
    fx: float | None = None
    strides: list[int] = field(default_factory=lambda: [1])
    channels: int = 8
    bins: int = 16
    d_delta: float = 1.0
    d_origin: float = 1.0
    depth_mode: str = "onehot"
    sigma: float = 1.0
    objects: list[dict] = field(default_factory=list)
    num_random_objects: int = 0
    object_radius: float = 1.0
    cameras: list[dict] | None = None

    def __post_init__(self):
        if self.num_views < 1 and not self.cameras:
            raise ConfigError("need at least one camera")
        if self.depth_mode not in ("onehot", "gaussian", "uniform"):
            raise ConfigError(f"depth_mode must be onehot, gaussian or uniform, got {self.depth_mode!r}")
        if self.bins < 1 or self.channels < 1:
            raise ConfigError("bins and channels must be >= 1")
        if not self.strides or any(int(s) < 1 for s in self.strides):
            raise ConfigError("strides must be a non-empty list of positive integers")
        for obj in self.objects:
            if "center" not in obj or len(obj["center"]) != 3:
                raise ConfigError(f"object needs a 3-vector center: {obj}")

    @classmethod
    def from_dict(cls, doc: dict) -> "SceneSpec":
        return _dataclass_from_dict(cls, doc)


@dataclass
class SyntheticScene:
    cameras: list[CameraModel]
    centers: np.ndarray  # N x 3
    radii: np.ndarray  # N
    signatures: np.ndarray  # N x C, orthonormal rows
    features: list[np.ndarray]  # per scale, V x H_l x W_l x C
    depth: list[DepthField]  # per scale
    depth_maps: np.ndarray  # V x H x W at scale 0, 0 where nothing is painted

    def digest(self) -> str:
        h = hashlib.sha256()
        for f in self.features:
            h.update(np.ascontiguousarray(f).tobytes())
        for d in self.depth:
            h.update(np.ascontiguousarray(d.dist).tobytes())
        h.update(np.ascontiguousarray(self.depth_maps).tobytes())
        return h.hexdigest()


def scene_cameras(spec: SceneSpec) -> list[CameraModel]:
    if spec.cameras:
        return geometry.rig_from_json(spec.cameras)
    return geometry.ring_rig(spec.num_views, spec.image_w, spec.image_h, fx=spec.fx)


def _paint(cam: CameraModel, centers, radii, signatures, channels):
    feat = np.zeros((cam.image_h, cam.image_w, channels))
    zbuf = np.full((cam.image_h, cam.image_w), np.inf)
    if len(centers) == 0:
        return feat, np.zeros_like(zbuf)
    uvd = geometry.project_points(centers, cam)
    vv, uu = np.mgrid[0 : cam.image_h, 0 : cam.image_w]
    for (u, v, d), r, sig in zip(uvd, radii, signatures):
        if not (d > 0 and np.isfinite(u) and np.isfinite(v)):
            continue
        r_px = max(cam.fx * r / d, 0.5)
        mask = ((uu - u) ** 2 + (vv - v) ** 2 <= r_px**2) & (d < zbuf)
        feat[mask] = sig
        zbuf[mask] = d
    zbuf[~np.isfinite(zbuf)] = 0.0
    return feat, zbuf


def generate_scene(spec: SceneSpec, seed: int = 0) -> SyntheticScene:
    """Deterministic multi-view scene with per-object orthonormal signatures.

    Each object is a sphere; its footprint in every view is painted with the
    object's signature (nearest object wins) and the painted pixels get the
    object's centre depth.  Unpainted pixels carry zero features and uniform
    depth fibers.
    """
    rng = np.random.default_rng(seed)
    cams = scene_cameras(spec)
    centers = [list(map(float, o["center"])) for o in spec.objects]
    radii = [float(o.get("radius", spec.object_radius)) for o in spec.objects]
    if spec.num_random_objects:
        # random objects sit within the depth range around the rig
        reach = spec.d_origin + spec.d_delta * (spec.bins - 1)
        for _ in range(spec.num_random_objects):
            ang = rng.uniform(0, 2 * np.pi)
            dist = rng.uniform(spec.d_origin + 1.0, max(spec.d_origin + 1.0, 0.8 * reach))
            centers.append([dist * np.cos(ang), dist * np.sin(ang), rng.uniform(-1.0, 1.0)])
            radii.append(spec.object_radius)
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    radii = np.asarray(radii, dtype=np.float64)
    n_obj = len(centers)
    if n_obj > spec.channels:
        raise ConfigError(f"{n_obj} objects need at least as many channels, got {spec.channels}")
    if n_obj:
        q, _ = np.linalg.qr(rng.standard_normal((spec.channels, n_obj)))
        signatures = q.T.copy()
    else:
        signatures = np.zeros((0, spec.channels))

    features = []
    depth_maps = None
    base_shape = (spec.image_h, spec.image_w)
    for stride in spec.strides:
        h = max(1, spec.image_h // stride)
        w = max(1, spec.image_w // stride)
        maps, depths = [], []
        for cam in cams:
            scaled = cam.scaled(w / cam.image_w, h / cam.image_h) if (h, w) != base_shape else cam
            f, d = _paint(scaled, centers, radii, signatures, spec.channels)
            maps.append(f)
            depths.append(d)
        features.append(np.stack(maps))
        if depth_maps is None:
            depth_maps = np.stack(depths)

    nbins = spec.bins
    if spec.depth_mode == "onehot":
        base = one_hot_field(depth_maps, nbins, spec.d_delta, spec.d_origin)
    elif spec.depth_mode == "gaussian":
        base = gaussian_field(depth_maps, nbins, spec.sigma, spec.d_delta, spec.d_origin)
    else:
        v, h, w = depth_maps.shape
        base = uniform_field(v, h, w, nbins, spec.d_delta, spec.d_origin)
    fields = [interpolate_to_scale(base, f.shape[1], f.shape[2], scale_id=i) for i, f in enumerate(features)]
    return SyntheticScene(cams, centers, radii, signatures, features, fields, depth_maps)


def _dataclass_from_dict(cls, doc: Any):
    if not isinstance(doc, dict):
        raise ConfigError(f"{cls.__name__} config must be a JSON object")
    known = set(cls.__dataclass_fields__)
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    try:
        return cls(**doc)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
