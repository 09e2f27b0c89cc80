"""Benchmark and verification routines behind the ``dfa3d`` command.

Every routine returns a JSON-serialisable report carrying ``"schema": "1"``
and a ``passed`` flag where a check is involved.
"""

from __future__ import annotations

import csv
import hashlib
import statistics
import time
from dataclasses import asdict, dataclass, field
from functools import partial
from pathlib import Path
from typing import Callable

import numpy as np

from . import geometry
from .depth_field import DepthField, expand_features, interpolate_to_scale, normalize_depth, sample_depth_scores
from .dfa import (
    ProjectionTables,
    SamplingSpec,
    dfa3d_backward,
    dfa3d_efficient,
    dfa3d_vanilla,
    generate_sampling,
    generate_sampling_backward,
    project_queries,
)
from .lifting import (
    ConfigError,
    LiftConfig,
    SceneSpec,
    _dataclass_from_dict,
    anchors_from_points,
    build_anchor_grid,
    generate_scene,
    lift,
    lift_dfa2d,
)
from .tensor_core import measure, resolve_dtype, save_tensor

SCHEMA = "1"
EQUIV_TOL = 1e-10
GRAD_TOL = 1e-6
FD_STEP = 1e-5


def relative_error(actual, expected) -> float:
    """``max|a - e| / max(|a|, |e|)`` over the whole tensor (0 when both vanish)."""
    a = np.asarray(actual, dtype=np.float64)
    e = np.asarray(expected, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(e).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(a - e).max() / scale)


# -- random instances -----------------------------------------------------------


@dataclass
class Instance:
    features: list[np.ndarray]
    depth: list[DepthField]
    proj: ProjectionTables
    spec: SamplingSpec

    @property
    def d_origin(self) -> float:
        return self.depth[0].d_origin

    @property
    def d_delta(self) -> float:
        return self.depth[0].d_delta

    def expanded(self) -> list[np.ndarray]:
        return [expand_features(f, d) for f, d in zip(self.features, self.depth)]


def _level_shapes(rng, levels: int, max_h: int, max_w: int) -> list[tuple[int, int]]:
    h = int(rng.integers(2, max_h + 1))
    w = int(rng.integers(2, max_w + 1))
    shapes = [(h, w)]
    for _ in range(1, levels):
        h, w = max(1, h // 2), max(1, w // 2)
        shapes.append((h, w))
    return shapes


def random_instance(
    rng: np.random.Generator,
    views: int,
    shapes: list[tuple[int, int]],
    bins: int,
    channels: int,
    heads: int,
    points: int,
    queries: int,
    case: str = "generic",
    dtype=np.float64,
) -> Instance:
    """A random operator input.

    ``case`` picks the sampling geometry: ``generic`` (anywhere, including
    outside the maps), ``boundary`` (straddling the spatial edges),
    ``depth_range`` (beyond the first or last bin) or ``shared_corner`` (pairs
    of points in horizontally adjacent cells that share a corner column).
    """
    levels = len(shapes)
    d_delta = float(rng.uniform(0.5, 2.0))
    d_origin = float(rng.uniform(0.0, 2.0))
    h0, w0 = shapes[0]
    features = [rng.standard_normal((views, h, w, channels)).astype(dtype) for h, w in shapes]
    base = normalize_depth(3.0 * rng.standard_normal((views, h0, w0, bins)), d_delta, d_origin)
    depth = [interpolate_to_scale(base, h, w, scale_id=i) for i, (h, w) in enumerate(shapes)]
    depth = [d.with_dist(d.dist.astype(dtype)) for d in depth]
    z_hi = bins - 1
    refs = np.stack(
        [
            rng.uniform(0, w0 - 1, (queries, views)),
            rng.uniform(0, h0 - 1, (queries, views)),
            d_origin + d_delta * rng.uniform(0, z_hi, (queries, views)),
        ],
        axis=-1,
    )
    visible = rng.random((queries, views)) < 0.8
    shape = (queries, heads, levels, points)
    offsets = np.stack(
        [
            rng.normal(0, 2.0, shape),
            rng.normal(0, 2.0, shape),
            rng.normal(0, d_delta, shape),
        ],
        axis=-1,
    )
    if case == "boundary":
        for axis, extent in ((0, w0), (1, h0)):
            edge = rng.choice([-1.0, extent * 1.0], size=shape) + rng.uniform(-0.9, 0.9, shape)
            offsets[..., axis] = edge - refs[:, 0, axis][:, None, None, None]
    elif case == "depth_range":
        low = d_origin - d_delta * rng.uniform(0.0, 1.5, shape)
        high = d_origin + d_delta * (z_hi + rng.uniform(0.0, 1.5, shape))
        target = np.where(rng.random(shape) < 0.5, low, high)
        offsets[..., 2] = target - refs[:, None, None, None, 0, 2]
    elif case == "shared_corner" and points >= 2:
        # points k and k+1 land in cells [x, x+1] and [x+1, x+2] of the same row
        for q in range(queries):
            for m in range(heads):
                x = rng.uniform(0, max(0.0, w0 - 3))
                y = rng.uniform(0, max(0.0, h0 - 1.01))
                base_u = refs[q, :, 0]
                base_v = refs[q, :, 1]
                offsets[q, m, 0, 0, 0] = x + rng.uniform(0.05, 0.95) - base_u[0]
                offsets[q, m, 0, 1, 0] = x + 1 + rng.uniform(0.05, 0.95) - base_u[0]
                offsets[q, m, 0, 0, 1] = y - base_v[0]
                offsets[q, m, 0, 1, 1] = y + rng.uniform(0, 0.3) - base_v[0]
    weights = rng.random(shape)
    weights /= weights.reshape(queries, heads, -1).sum(axis=-1)[:, :, None, None]
    return Instance(features, depth, ProjectionTables(refs, visible), SamplingSpec(offsets, weights))


# -- equivalence -----------------------------------------------------------------


@dataclass
class EquivConfig:
    max_views: int = 6
    max_height: int = 32
    max_width: int = 32
    max_bins: int = 16
    max_channels: int = 8
    max_heads: int = 2
    max_levels: int = 2
    max_points: int = 8
    max_queries: int = 64
    tolerance: float = EQUIV_TOL

    @classmethod
    def from_dict(cls, doc: dict) -> "EquivConfig":
        return _dataclass_from_dict(cls, doc)


CASES = ("generic", "boundary", "depth_range", "shared_corner")


def equiv_instance(cfg: EquivConfig, seed: int, trial: int) -> tuple[Instance, str]:
    rng = np.random.default_rng([seed, trial])
    case = CASES[trial % len(CASES)]
    heads = int(rng.integers(1, cfg.max_heads + 1))
    channels = heads * int(rng.integers(1, max(1, cfg.max_channels // heads) + 1))
    levels = int(rng.integers(1, cfg.max_levels + 1))
    points = int(rng.integers(2 if case == "shared_corner" else 1, cfg.max_points + 1))
    inst = random_instance(
        rng,
        views=int(rng.integers(1, cfg.max_views + 1)),
        shapes=_level_shapes(rng, levels, cfg.max_height, cfg.max_width),
        bins=int(rng.integers(2, cfg.max_bins + 1)),
        channels=channels,
        heads=heads,
        points=points,
        queries=int(rng.integers(1, cfg.max_queries + 1)),
        case=case,
    )
    return inst, case


def run_equiv(
    cfg: EquivConfig,
    trials: int,
    seed: int,
    efficient: Callable | None = None,
    vanilla: Callable | None = None,
) -> dict:
    """Compare the efficient operator against the expanded-map oracle on random inputs."""
    efficient = efficient or dfa3d_efficient
    vanilla = vanilla or dfa3d_vanilla
    worst = 0.0
    failures = []
    cases: dict[str, float] = {}
    t0 = time.perf_counter()
    for t in range(trials):
        inst, case = equiv_instance(cfg, seed, t)
        ref = vanilla(inst.expanded(), inst.proj, inst.spec, inst.d_origin, inst.d_delta)
        got = efficient(inst.features, inst.depth, inst.proj, inst.spec)
        err = relative_error(got, ref)
        worst = max(worst, err)
        cases[case] = max(cases.get(case, 0.0), err)
        if not err <= cfg.tolerance:
            failures.append({"seed": seed, "trial": t, "case": case, "relative_error": err})
    report = {
        "schema": SCHEMA,
        "command": "equiv",
        "trials": trials,
        "seed": seed,
        "tolerance": cfg.tolerance,
        "max_relative_error": worst,
        "max_relative_error_by_case": cases,
        "failures": failures,
        "passed": not failures,
        "seconds": time.perf_counter() - t0,
    }
    if trials == 0:
        report["warning"] = "no trials run; pass is vacuous"
    return report


# -- gradient check ----------------------------------------------------------------


@dataclass
class GradcheckConfig:
    instances: int = 20
    views: int = 2
    height: int = 5
    width: int = 6
    bins: int = 5
    channels: int = 4
    heads: int = 2
    levels: int = 2
    points: int = 2
    queries: int = 3
    query_dim: int = 6
    step: float = FD_STEP
    tolerance: float = GRAD_TOL
    margin: float = 0.05

    @classmethod
    def from_dict(cls, doc: dict) -> "GradcheckConfig":
        return _dataclass_from_dict(cls, doc)


def _interior_offsets(rng, inst: Instance, margin: float) -> np.ndarray:
    """Offsets placing every sampling point at least ``margin`` cells away from any cell face."""
    spec, proj = inst.spec, inst.proj
    shape = spec.weights.shape
    nl = shape[2]
    offsets = np.empty(shape + (3,))
    h0, w0 = inst.features[0].shape[1:3]
    # views share one offset per point, so only view 0 is kept visible here
    ref = proj.refs[:, 0]
    for l in range(nl):
        h, w = inst.features[l].shape[1:3]
        sx, sy = w / w0, h / h0
        nd = inst.depth[0].num_bins
        sub = shape[:2] + (shape[3],)
        cu = rng.integers(-1, w, sub) + rng.uniform(margin, 1 - margin, sub)
        cv = rng.integers(-1, h, sub) + rng.uniform(margin, 1 - margin, sub)
        cz = rng.integers(-1, nd, sub) + rng.uniform(margin, 1 - margin, sub)
        offsets[:, :, l, :, 0] = (cu + 0.5) / sx - 0.5 - ref[:, None, None, 0]
        offsets[:, :, l, :, 1] = (cv + 0.5) / sy - 0.5 - ref[:, None, None, 1]
        offsets[:, :, l, :, 2] = inst.d_origin + inst.d_delta * cz - ref[:, None, None, 2]
    return offsets


def gradcheck_instance(cfg: GradcheckConfig, seed: int, index: int):
    rng = np.random.default_rng([seed, index])
    shapes = [(cfg.height, cfg.width)]
    for _ in range(1, cfg.levels):
        h, w = shapes[-1]
        shapes.append((max(1, (h + 1) // 2), max(1, (w + 1) // 2)))
    inst = random_instance(
        rng, cfg.views, shapes, cfg.bins, cfg.channels, cfg.heads, cfg.points, cfg.queries
    )
    visible = inst.proj.visible.copy()
    visible[:, 0] = True
    visible[:, 1:] = False
    inst.proj = ProjectionTables(inst.proj.refs, visible)
    target = _interior_offsets(rng, inst, cfg.margin)
    # queries and linear maps reproducing ``target`` exactly
    nq = cfg.queries
    queries = rng.standard_normal((nq, cfg.query_dim))
    w_s = np.ascontiguousarray((np.linalg.pinv(queries) @ target.reshape(nq, -1)).T)
    w_a = 0.5 * rng.standard_normal((cfg.heads * cfg.levels * cfg.points, cfg.query_dim))
    inst.spec = generate_sampling(queries, w_s, w_a, cfg.heads, cfg.levels)
    aggregate = (None, "sum", "mean")[index % 3]
    out_shape = (nq, cfg.views, cfg.channels) if aggregate is None else (nq, cfg.channels)
    grad_out = rng.standard_normal(out_shape)
    logits = [np.log(d.dist) for d in inst.depth]
    return inst, queries, w_s, w_a, aggregate, grad_out, logits


def _fd(func: Callable[[], float], arr: np.ndarray, step: float) -> np.ndarray:
    if not arr.flags.c_contiguous:
        raise ValueError("finite differences perturb in place; the array must be C-contiguous")
    grad = np.zeros(arr.shape)
    flat = arr.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        plus = func()
        flat[i] = orig - step
        minus = func()
        flat[i] = orig
        g[i] = (plus - minus) / (2 * step)
    return grad


def _worst(actual: np.ndarray, expected: np.ndarray):
    diff = np.abs(np.asarray(actual) - np.asarray(expected))
    idx = np.unravel_index(int(np.argmax(diff)), diff.shape) if diff.size else ()
    return [int(i) for i in idx]


def run_gradcheck(cfg: GradcheckConfig, seed: int, zero_upstream: bool = False) -> dict:
    """Compare the analytic backward against central finite differences."""
    t0 = time.perf_counter()
    per_tensor: dict[str, float] = {}
    worst = {"tensor": None, "instance": None, "index": None, "relative_error": 0.0}
    nonzero = False
    for n in range(cfg.instances):
        inst, queries, w_s, w_a, aggregate, grad_out, logits = gradcheck_instance(cfg, seed, n)
        if zero_upstream:
            grad_out = np.zeros_like(grad_out)
        grads = dfa3d_backward(
            grad_out, inst.features, inst.depth, inst.proj, inst.spec, aggregate, depth_logits_chain=True
        )
        g_q, g_ws, g_wa = generate_sampling_backward(queries, w_s, w_a, inst.spec, grads.offsets, grads.weights)

        def loss(features=inst.features, depth=inst.depth, spec=inst.spec):
            out = dfa3d_efficient(features, depth, inst.proj, spec, aggregate)
            return float(np.sum(out * grad_out))

        checks = []
        for l, f in enumerate(inst.features):
            checks.append((f"features[{l}]", grads.features[l], _fd(loss, f, cfg.step)))
        for l, d in enumerate(inst.depth):
            checks.append((f"depth[{l}]", grads.depth[l], _fd(loss, d.dist, cfg.step)))
        checks.append(("offsets", grads.offsets, _fd(loss, inst.spec.offsets, cfg.step)))
        checks.append(("weights", grads.weights, _fd(loss, inst.spec.weights, cfg.step)))

        def loss_logits():
            fields = [d.with_dist(normalize_depth(lg).dist) for d, lg in zip(inst.depth, logits)]
            return loss(depth=fields)

        for l, lg in enumerate(logits):
            checks.append((f"depth_logits[{l}]", grads.depth_logits[l], _fd(loss_logits, lg, cfg.step)))

        def loss_chain():
            return loss(spec=generate_sampling(queries, w_s, w_a, cfg.heads, cfg.levels))

        checks.append(("queries", g_q, _fd(loss_chain, queries, cfg.step)))
        checks.append(("w_s", g_ws, _fd(loss_chain, w_s, cfg.step)))
        checks.append(("w_a", g_wa, _fd(loss_chain, w_a, cfg.step)))

        for name, analytic, numeric in checks:
            nonzero = nonzero or bool(np.any(analytic != 0))
            err = relative_error(analytic, numeric)
            key = name.split("[")[0]
            per_tensor[key] = max(per_tensor.get(key, 0.0), err)
            if err >= worst["relative_error"]:
                worst = {
                    "tensor": name,
                    "instance": n,
                    "index": _worst(analytic, numeric),
                    "relative_error": err,
                }
    passed = all(v <= cfg.tolerance for v in per_tensor.values())
    report = {
        "schema": SCHEMA,
        "command": "gradcheck",
        "seed": seed,
        "instances": cfg.instances,
        "step": cfg.step,
        "tolerance": cfg.tolerance,
        "max_relative_error": per_tensor,
        "worst": worst,
        "passed": passed,
        "seconds": time.perf_counter() - t0,
    }
    if zero_upstream:
        report["all_gradients_zero"] = not nonzero
    return report


# -- benchmark ---------------------------------------------------------------------


@dataclass
class BenchConfig:
    views: int = 6
    height: int = 48
    width: int = 88
    bins: int = 40
    channels: int = 64
    queries: int = 10000
    points: int = 4
    heads: int = 1
    levels: int = 1
    d_delta: float = 1.0
    d_origin: float = 1.0
    visibility: str = "geometric"
    dtype: str = "f32"
    seed: int = 0
    check_depth_doubling: bool = True

    def __post_init__(self):
        for name in ("views", "height", "width", "bins", "channels", "queries", "points", "heads", "levels"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.channels % self.heads:
            raise ConfigError("channels must be divisible by heads")
        if self.visibility not in ("geometric", "all"):
            raise ConfigError("visibility must be 'geometric' or 'all'")
        try:
            resolve_dtype(self.dtype)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_dict(cls, doc: dict) -> "BenchConfig":
        return _dataclass_from_dict(cls, doc)


def bench_inputs(cfg: BenchConfig, bins: int | None = None):
    """Features, depth fields, projection tables and sampling spec for a benchmark."""
    bins = cfg.bins if bins is None else bins
    rng = np.random.default_rng(cfg.seed)
    dt = resolve_dtype(cfg.dtype)
    shapes = [(cfg.height, cfg.width)]
    for _ in range(1, cfg.levels):
        h, w = shapes[-1]
        shapes.append((max(1, h // 2), max(1, w // 2)))
    features = [rng.standard_normal((cfg.views, h, w, cfg.channels)).astype(dt) for h, w in shapes]
    base = normalize_depth(rng.standard_normal((cfg.views, cfg.height, cfg.width, bins)), cfg.d_delta, cfg.d_origin)
    depth = [interpolate_to_scale(base, h, w, scale_id=i) for i, (h, w) in enumerate(shapes)]
    depth = [d.with_dist(d.dist.astype(dt)) for d in depth]
    d_max = cfg.d_origin + cfg.d_delta * (bins - 1)
    nq = cfg.queries
    if cfg.visibility == "geometric":
        cams = geometry.ring_rig(cfg.views, cfg.width, cfg.height)
        reach = cfg.d_origin + cfg.d_delta * (cfg.bins - 1)
        ang = rng.uniform(0, 2 * np.pi, nq)
        rad = rng.uniform(cfg.d_origin, reach, nq)
        pos = np.stack([rad * np.cos(ang), rad * np.sin(ang), rng.uniform(-2.0, 2.0, nq)], axis=-1)
        proj = project_queries(pos, cams, cfg.d_origin, d_max)
    else:
        refs = np.stack(
            [
                rng.uniform(0, cfg.width - 1, (nq, cfg.views)),
                rng.uniform(0, cfg.height - 1, (nq, cfg.views)),
                rng.uniform(cfg.d_origin, d_max, (nq, cfg.views)),
            ],
            axis=-1,
        )
        proj = ProjectionTables(refs, np.ones((nq, cfg.views), dtype=bool))
    shape = (nq, cfg.heads, cfg.levels, cfg.points)
    offsets = np.stack(
        [rng.normal(0, 2.0, shape), rng.normal(0, 2.0, shape), rng.normal(0, cfg.d_delta, shape)], axis=-1
    )
    logits = rng.standard_normal((nq, cfg.heads, cfg.levels * cfg.points))
    weights = np.exp(logits) / np.exp(logits).sum(axis=-1, keepdims=True)
    spec = SamplingSpec(offsets, weights.reshape(shape))
    return features, depth, proj, spec


def _timed(fn: Callable, repeats: int):
    """Warm-up call, then ``repeats`` measured calls.

    Returns the median wall time in ms, the report of the last call and its result.
    """
    fn()
    times = []
    for _ in range(max(1, repeats)):
        result = None
        with measure() as report:
            result = fn()
        times.append(report.wall_time * 1e3)
    return statistics.median(times), report, result


def _phase(ms: float, report) -> dict:
    return {"wall_time_ms": ms, "peak_bytes": report.peak_bytes, "multiplies": report.multiplies,
            "multiplies_by_category": report.by_category}


def run_bench(cfg: BenchConfig, repeats: int = 5) -> dict:
    """Vanilla (expand + aggregate) versus efficient (aggregate only) resource use."""
    t0 = time.perf_counter()
    features, depth, proj, spec = bench_inputs(cfg)
    d0, dd = depth[0].d_origin, depth[0].d_delta

    def expand():
        return [expand_features(f, d) for f, d in zip(features, depth)]

    def van_full():
        return dfa3d_vanilla(expand(), proj, spec, d0, dd, aggregate="sum")

    def eff_full():
        return dfa3d_efficient(features, depth, proj, spec, aggregate="sum")

    exp_ms, exp_rep, expanded = _timed(expand, repeats)
    agg_ms, agg_rep, _ = _timed(partial(dfa3d_vanilla, expanded, proj, spec, d0, dd, aggregate="sum"), repeats)
    expanded = None
    vfull_ms, vfull_rep, van_out = _timed(van_full, repeats)
    efull_ms, efull_rep, eff_out = _timed(eff_full, repeats)

    vanilla = {"expand": _phase(exp_ms, exp_rep), "aggregate": _phase(agg_ms, agg_rep), "full": _phase(vfull_ms, vfull_rep)}
    efficient = {"aggregate": _phase(efull_ms, efull_rep), "full": _phase(efull_ms, efull_rep)}
    points = int(proj.visible.sum()) * cfg.heads * cfg.levels * cfg.points
    ratios = {
        "memory_vanilla_over_efficient": vfull_rep.peak_bytes / max(1, efull_rep.peak_bytes),
        "time_vanilla_over_efficient": vfull_ms / efull_ms if efull_ms > 0 else float("inf"),
        "reference_memory": 3204 / 29,
        "reference_time": 161.9 / 5.2,
    }
    report = {
        "schema": SCHEMA,
        "command": "bench",
        "config": asdict(cfg),
        "repeats": repeats,
        "sampling_points": points,
        "vanilla": vanilla,
        "efficient": efficient,
        "ratios": ratios,
        "output_relative_error": relative_error(eff_out, van_out),
    }
    if cfg.check_depth_doubling:
        f2, d2, p2, s2 = bench_inputs(cfg, bins=2 * cfg.bins)
        with measure() as rep2:
            dfa3d_efficient(f2, d2, p2, s2, aggregate="sum")
        report["depth_doubling"] = {
            "bins": [cfg.bins, 2 * cfg.bins],
            "efficient_peak_bytes": [efull_rep.peak_bytes, rep2.peak_bytes],
            "relative_change": abs(rep2.peak_bytes - efull_rep.peak_bytes) / max(1, efull_rep.peak_bytes),
        }
    report["seconds"] = time.perf_counter() - t0
    return report


def multiply_counts(channels: int) -> dict:
    """Feature multiplies for a single sampling point on each path."""
    rng = np.random.default_rng(0)
    inst = random_instance(rng, 1, [(4, 4)], 4, channels, 1, 1, 1)
    inst.proj = ProjectionTables(np.array([[[1.3, 1.6, inst.d_origin + 1.4 * inst.d_delta]]]), np.ones((1, 1), bool))
    inst.spec = SamplingSpec(np.zeros((1, 1, 1, 1, 3)), np.ones((1, 1, 1, 1)))
    expanded = inst.expanded()
    with measure() as van:
        dfa3d_vanilla(expanded, inst.proj, inst.spec, inst.d_origin, inst.d_delta)
    with measure() as eff:
        dfa3d_efficient(inst.features, inst.depth, inst.proj, inst.spec)
    feat_v = van.by_category.get("feature", 0) + van.by_category.get("depth", 0)
    feat_e = eff.by_category.get("feature", 0) + eff.by_category.get("depth", 0)
    return {
        "channels": channels,
        "vanilla_feature_multiplies": feat_v,
        "efficient_feature_multiplies": feat_e,
        "vanilla_total": van.multiplies,
        "efficient_total": eff.multiplies,
        "passed": feat_e <= 0.5 * feat_v + 8,
    }


# -- ambiguity ----------------------------------------------------------------------


@dataclass
class AmbiguityConfig:
    scene: dict = field(default_factory=dict)
    view: int = 0
    pixel: list[float] | None = None
    depths: list[float] | None = None
    num_anchors: int = 8
    content_dim: int = 8
    content_init: str = "shared"
    lift: dict = field(default_factory=lambda: {"points": 1, "zero_offsets": True})
    seed: int = 0

    @classmethod
    def from_dict(cls, doc: dict) -> "AmbiguityConfig":
        return _dataclass_from_dict(cls, doc)


def default_ambiguity_config(depth_mode: str = "onehot") -> AmbiguityConfig:
    scene = {
        "num_views": 1,
        "image_w": 32,
        "image_h": 24,
        "fx": 20.0,
        "channels": 8,
        "bins": 16,
        "d_delta": 1.0,
        "d_origin": 1.0,
        "depth_mode": depth_mode,
        "objects": [{"center": [6.0, 0.0, 0.0], "radius": 1.5}],
    }
    return AmbiguityConfig(scene=scene)


def cosine_matrix(x: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarity; a pair involving a zero vector scores 0."""
    x = np.asarray(x, dtype=np.float64)
    gram = x @ x.T
    sq = np.diag(gram)
    denom = np.sqrt(np.outer(sq, sq))
    out = np.zeros_like(gram)
    np.divide(gram, denom, out=out, where=denom > 0)
    return out


def mean_offdiag(m: np.ndarray) -> float:
    n = m.shape[0]
    if n < 2:
        return 1.0
    iu = np.triu_indices(n, 1)
    return float(m[iu].mean())


def run_ambiguity(cfg: AmbiguityConfig) -> tuple[dict, dict[str, np.ndarray]]:
    """Colinear anchors on one camera ray, lifted with both operators.

    Returns the report and the similarity matrices keyed ``dfa2d``/``dfa3d``.
    """
    spec = SceneSpec.from_dict(cfg.scene)
    scene = generate_scene(spec, cfg.seed)
    cam = scene.cameras[cfg.view]
    field0 = scene.depth[0]
    if cfg.pixel is not None:
        u, v = cfg.pixel
    elif len(scene.centers):
        u, v, _ = geometry.project_point(scene.centers[0], cam)
        u, v = float(np.rint(u)), float(np.rint(v))
    else:
        u, v = float(np.rint(cam.u0)), float(np.rint(cam.v0))
    if cfg.depths is not None:
        depths = np.asarray(cfg.depths, dtype=np.float64)
    else:
        lo, hi = field0.d_min, field0.d_max
        # bin-centred depths that include the painted object's depth
        depths = lo + field0.d_delta * np.round(np.linspace(0.1, 0.9, cfg.num_anchors) * (hi - lo) / field0.d_delta)
        if len(scene.centers):
            obj_d = geometry.project_point(scene.centers[0], cam).d
            nearest = int(np.argmin(np.abs(depths - obj_d)))
            depths[nearest] = lo + field0.d_delta * np.round((obj_d - lo) / field0.d_delta)
    points = np.stack(geometry.colinear_queries(cam, u, v, depths))
    grid = anchors_from_points(points, cfg.content_dim, cfg.content_init, cfg.seed)
    lcfg = LiftConfig.from_dict({"seed": cfg.seed, **cfg.lift})
    r3 = lift(grid, scene.features, scene.depth, scene.cameras, lcfg)
    r2 = lift_dfa2d(grid, scene.features, scene.cameras, lcfg)
    f3 = r3.layers[-1].lifted
    f2 = r2.layers[-1].lifted
    sim3, sim2 = cosine_matrix(f3), cosine_matrix(f2)

    # depth-score ratio property on the first layer's single-view result
    x = int(np.rint(u)) if abs(u - np.rint(u)) < 1e-9 else None
    y = int(np.rint(v)) if abs(v - np.rint(v)) < 1e-9 else None
    ratio_err = None
    scores = None
    if x is not None and y is not None and 0 <= x < field0.dist.shape[2] and 0 <= y < field0.dist.shape[1]:
        scores = np.array([sample_depth_scores(field0, cfg.view, [(x, y)], d)[0] for d in depths])
        lifted = r3.layers[0].lifted
        ratio_err = 0.0
        for i in range(len(depths)):
            for j in range(len(depths)):
                if scores[j] == 0:
                    continue
                mask = lifted[j] != 0
                if not np.any(mask):
                    continue
                r_q = lifted[i][mask] / lifted[j][mask]
                r_w = scores[i] / scores[j]
                ratio_err = max(ratio_err, float(np.max(np.abs(r_q - r_w)) / max(1.0, abs(r_w))))

    report = {
        "schema": SCHEMA,
        "command": "ambiguity",
        "pixel": [u, v],
        "depths": depths.tolist(),
        "anchors": points.tolist(),
        "depth_mode": spec.depth_mode,
        "dfa2d": {"mean_similarity": mean_offdiag(sim2), "max_pairwise_difference": float(np.abs(f2 - f2[:1]).max())},
        "dfa3d": {"mean_similarity": mean_offdiag(sim3), "depth_scores": None if scores is None else scores.tolist(),
                  "max_ratio_error": ratio_err},
    }
    return report, {"dfa2d": sim2, "dfa3d": sim3}


def write_matrix_csv(path: Path, m: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for row in m:
            w.writerow([repr(float(x)) for x in row])


# -- lift demo --------------------------------------------------------------------


@dataclass
class DemoLiftConfig:
    grid_bounds: list[list[float]] = field(default_factory=lambda: [[-12.0, 12.0], [-12.0, 12.0], [-2.0, 2.0]])
    grid_extents: list[int] = field(default_factory=lambda: [12, 12, 2])
    content_dim: int = 8
    content_init: str = "random"
    content_seed: int = 0
    lift: dict = field(default_factory=lambda: {"num_layers": 2})

    @classmethod
    def from_dict(cls, doc: dict) -> "DemoLiftConfig":
        return _dataclass_from_dict(cls, doc)


def run_lift_demo(scene_doc: dict, demo: DemoLiftConfig, seed: int, out_dir: Path | None) -> tuple[dict, dict[str, np.ndarray]]:
    spec = SceneSpec.from_dict(scene_doc)
    scene = generate_scene(spec, seed)
    grid = build_anchor_grid(demo.grid_bounds, demo.grid_extents, demo.content_dim, demo.content_init, demo.content_seed)
    lcfg = LiftConfig.from_dict({"seed": seed, **demo.lift})
    result = lift(grid, scene.features, scene.depth, scene.cameras, lcfg)
    tensors = {"contents": result.contents}
    for i, layer in enumerate(result.layers):
        tensors[f"layer{i}_lifted"] = layer.lifted
        tensors[f"layer{i}_delta"] = layer.delta
        tensors[f"layer{i}_sampling_locations"] = layer.sampling_locations
    digest = hashlib.sha256()
    for name in sorted(tensors):
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(tensors[name]).tobytes())
    report = {
        "schema": SCHEMA,
        "command": "lift-demo",
        "seed": seed,
        "queries": grid.num_queries,
        "scene_digest": scene.digest(),
        "layers": [layer.summary() for layer in result.layers],
        "tensors_sha256": digest.hexdigest(),
    }
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        for name, arr in tensors.items():
            save_tensor(out_dir / f"{name}.dtnsr", arr)
    return report, tensors
