import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dfa3d import harness, kernels
from dfa3d.depth_field import DepthField, expand_features, normalize_depth, uniform_field
from dfa3d.dfa import (
    ProjectionTables,
    SamplingSpec,
    ShapeMismatchError,
    aggregate_views,
    bilinear_sample,
    dfa2d,
    dfa3d_backward,
    dfa3d_efficient,
    dfa3d_vanilla,
    generate_sampling,
    generate_sampling_backward,
    trilinear_sample,
)
from dfa3d.tensor_core import measure
import oracles


def _one(u, v, d, views=1):
    refs = np.tile([[u, v, d]], (1, views, 1)).reshape(1, views, 3)
    return ProjectionTables(refs, np.ones((1, views), bool))


def _spec(offsets, weights):
    offsets = np.asarray(offsets, dtype=np.float64).reshape(1, 1, 1, -1, 3)
    return SamplingSpec(offsets, np.asarray(weights, dtype=np.float64).reshape(1, 1, 1, -1))


def _instance(seed, views=2, shapes=((5, 5),), bins=4, channels=3, heads=1, points=3, queries=4, case="generic"):
    return harness.random_instance(
        np.random.default_rng(seed), views, list(shapes), bins, channels, heads, points, queries, case
    )


class TestGenerateSampling:
    def test_zero_attention_map_is_uniform(self, rng):
        q = rng.standard_normal((5, 4))
        spec = generate_sampling(q, rng.standard_normal((2 * 3 * 2 * 3, 4)), np.zeros((2 * 3 * 2, 4)), heads=2, levels=3)
        np.testing.assert_allclose(spec.weights, 1 / 6, atol=1e-15)

    def test_zero_offset_map(self, rng):
        q = rng.standard_normal((3, 4))
        spec = generate_sampling(q, np.zeros((12, 4)), rng.standard_normal((4, 4)))
        assert np.all(spec.offsets == 0)

    def test_matvec(self, rng):
        q = rng.standard_normal((1, 5))
        w_s = rng.standard_normal((6, 5))
        spec = generate_sampling(q, w_s, rng.standard_normal((2, 5)))
        want = [sum(w_s[r, c] * q[0, c] for c in range(5)) for r in range(6)]
        np.testing.assert_allclose(spec.offsets.ravel(), want, rtol=1e-14)

    def test_softmax_layout(self, rng):
        q = rng.standard_normal((2, 3))
        w_a = rng.standard_normal((2 * 2 * 3, 3))
        spec = generate_sampling(q, np.zeros((36, 3)), w_a, heads=2, levels=2)
        logits = q @ w_a.T
        for i in range(2):
            for m in range(2):
                want = oracles.softmax(logits[i, m * 6 : (m + 1) * 6])
                np.testing.assert_allclose(spec.weights[i, m].ravel(), want, rtol=1e-13)

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 10_000), heads=st.integers(1, 3), levels=st.integers(1, 3), k=st.integers(1, 4))
    def test_weights_sum_to_one(self, seed, heads, levels, k):
        r = np.random.default_rng(seed)
        q = 5 * r.standard_normal((7, 6))
        n = heads * levels * k
        spec = generate_sampling(q, r.standard_normal((3 * n, 6)), r.standard_normal((n, 6)), heads, levels)
        assert spec.weights_normalized(1e-6)
        assert np.all(spec.weights >= 0)

    def test_shape_errors(self, rng):
        q = rng.standard_normal((2, 3))
        with pytest.raises(ShapeMismatchError):
            generate_sampling(q, np.zeros((5, 3)), np.zeros((2, 3)))
        with pytest.raises(ShapeMismatchError):
            generate_sampling(q, np.zeros((9, 3)), np.zeros((3, 3)), heads=2)


class TestReferenceSamplers:
    def test_trilinear_on_node(self, rng):
        x = rng.standard_normal((1, 3, 3, 2))
        f = normalize_depth(rng.standard_normal((1, 3, 3, 4)), d_delta=0.5, d_origin=1.0)
        e = expand_features(x, f)[0]
        got = trilinear_sample(e, (2, 1, 1.0 + 0.5 * 3), 1.0, 0.5)
        np.testing.assert_allclose(got, f.dist[0, 1, 2, 3] * x[0, 1, 2], rtol=1e-15)

    def test_trilinear_mid_bin(self, rng):
        x = rng.standard_normal((1, 2, 2, 3))
        dist = np.zeros((1, 2, 2, 2))
        dist[..., 0], dist[..., 1] = 0.2, 0.8
        e = expand_features(x, DepthField(dist))[0]
        np.testing.assert_allclose(trilinear_sample(e, (1, 0, 0.5)), 0.5 * x[0, 0, 1], rtol=1e-15)

    def test_trilinear_matches_eight_terms(self, rng):
        x = rng.standard_normal((1, 3, 3, 2))
        f = normalize_depth(rng.standard_normal((1, 3, 3, 4)))
        e = expand_features(x, f)[0]
        for s in rng.uniform([-1.2, -1.2, -1.2], [3.2, 3.2, 4.2], (60, 3)):
            want = [oracles.trilinear_eq(x, f.dist, 0, *s, c) for c in range(2)]
            np.testing.assert_allclose(trilinear_sample(e, s), want, rtol=1e-13, atol=1e-15)

    def test_bilinear_matches_four_terms(self, rng):
        x = rng.standard_normal((1, 4, 3, 2))
        for s in rng.uniform(-1.5, 4.5, (40, 2)):
            want = [oracles.bilinear_eq(x, 0, *s, c) for c in range(2)]
            np.testing.assert_allclose(bilinear_sample(x[0], s), want, rtol=1e-13, atol=1e-15)


class TestVanilla:
    def test_degenerate_single_point(self, rng):
        x = rng.standard_normal((1, 4, 4, 3))
        f = normalize_depth(rng.standard_normal((1, 4, 4, 5)))
        e = expand_features(x, f)
        out = dfa3d_vanilla(e, _one(2, 1, 3), _spec([[0, 0, 0]], [1.0]))
        np.testing.assert_allclose(out[0, 0], trilinear_sample(e[0], (2, 1, 3)), rtol=1e-15)

    def test_convexity_over_duplicates(self, rng):
        x = rng.standard_normal((1, 4, 4, 3))
        e = expand_features(x, normalize_depth(rng.standard_normal((1, 4, 4, 5))))
        proj = _one(1.3, 2.2, 1.7)
        a = dfa3d_vanilla(e, proj, _spec([[0.4, -0.3, 0.2]], [1.0]))
        b = dfa3d_vanilla(e, proj, _spec([[0.4, -0.3, 0.2]] * 2, [0.5, 0.5]))
        np.testing.assert_allclose(a, b, rtol=1e-15)

    def test_scalar_oracle(self):
        inst = _instance(11, views=2, shapes=[(5, 5)], bins=4, channels=3, points=3, queries=4)
        got = dfa3d_vanilla(inst.expanded(), inst.proj, inst.spec, inst.d_origin, inst.d_delta)
        want = oracles.dfa3d_loop(
            inst.features, [d.dist for d in inst.depth], inst.proj.refs, inst.proj.visible,
            inst.spec.offsets, inst.spec.weights, inst.d_origin, inst.d_delta,
        )
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-14)

    def test_multiscale_multihead_oracle(self):
        inst = _instance(12, views=2, shapes=[(6, 7), (3, 3)], bins=5, channels=4, heads=2, points=2, queries=5)
        got = dfa3d_vanilla(inst.expanded(), inst.proj, inst.spec, inst.d_origin, inst.d_delta)
        want = oracles.dfa3d_loop(
            inst.features, [d.dist for d in inst.depth], inst.proj.refs, inst.proj.visible,
            inst.spec.offsets, inst.spec.weights, inst.d_origin, inst.d_delta,
        )
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-14)

    def test_invisible_pairs_are_zero(self):
        inst = _instance(13)
        out = dfa3d_vanilla(inst.expanded(), inst.proj, inst.spec, inst.d_origin, inst.d_delta)
        assert np.all(out[~inst.proj.visible] == 0)

    def test_shape_mismatch(self, rng):
        e = np.zeros((2, 3, 3, 2, 4))
        with pytest.raises(ShapeMismatchError):
            dfa3d_vanilla(e, _one(1, 1, 1), _spec([[0, 0, 0]], [1.0]))
        with pytest.raises(ShapeMismatchError):
            dfa3d_vanilla(e[..., 0], _one(1, 1, 1, views=2), _spec([[0, 0, 0]], [1.0]))


class TestEfficient:
    @pytest.mark.parametrize("case", harness.CASES)
    def test_equals_vanilla(self, case):
        for seed in range(6):
            inst = _instance(
                100 + seed, views=3, shapes=[(7, 9), (4, 5)], bins=6, channels=4, heads=2, points=4, queries=9, case=case
            )
            ref = dfa3d_vanilla(inst.expanded(), inst.proj, inst.spec, inst.d_origin, inst.d_delta)
            got = dfa3d_efficient(inst.features, inst.depth, inst.proj, inst.spec)
            assert harness.relative_error(got, ref) <= 1e-10

    def test_shared_corner_against_loop(self):
        inst = _instance(21, views=1, shapes=[(5, 6)], bins=4, channels=2, points=2, queries=3, case="shared_corner")
        got = dfa3d_efficient(inst.features, inst.depth, inst.proj, inst.spec)
        want = oracles.dfa3d_loop(
            inst.features, [d.dist for d in inst.depth], inst.proj.refs, inst.proj.visible,
            inst.spec.offsets, inst.spec.weights, inst.d_origin, inst.d_delta,
        )
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-14)

    def test_pre_weighting_features_is_not_equivalent(self):
        # baking one point's depth scores into the shared corner column breaks the neighbour
        inst = _instance(22, views=1, shapes=[(5, 6)], bins=4, channels=2, points=2, queries=1, case="shared_corner")
        inst.proj.visible[:] = True
        exact = dfa3d_efficient(inst.features, inst.depth, inst.proj, inst.spec)
        f = inst.depth[0]
        u, v, d = inst.proj.refs[0, 0] + inst.spec.offsets[0, 0, 0, 0]
        z = (d - f.d_origin) / f.d_delta
        k0 = int(np.floor(z))
        t = z - k0
        fib = np.pad(f.dist[0], ((0, 0), (0, 0), (2, 2)))
        w = (1 - t) * fib[..., k0 + 2] + t * fib[..., k0 + 3]
        baked = inst.features[0] * w[None, ..., None]
        flat = dfa3d_efficient(baked, uniform_field(1, 5, 6, 1, f.d_delta, d), inst.proj,
                               SamplingSpec(inst.spec.offsets * [1, 1, 0], inst.spec.weights))
        assert harness.relative_error(flat, exact) > 1e-6

    def test_uniform_depth_scales_2d(self):
        inst = _instance(23, views=2, shapes=[(6, 6)], bins=5, channels=3, points=3, queries=6)
        inst.depth = [uniform_field(2, 6, 6, 5, inst.d_delta, inst.d_origin)]
        # keep every point inside the depth range so every score is 1/D
        off = inst.spec.offsets.copy()
        off[..., 2] = 0.0
        inst.proj.refs[..., 2] = np.clip(inst.proj.refs[..., 2], inst.d_origin, inst.d_origin + 4 * inst.d_delta)
        spec = SamplingSpec(off, inst.spec.weights)
        a = dfa3d_efficient(inst.features, inst.depth, inst.proj, spec)
        b = dfa2d(inst.features, inst.proj, spec)
        np.testing.assert_allclose(a, b / 5, rtol=1e-13, atol=1e-15)

    def test_no_expansion_allocated(self):
        inst = _instance(24, views=2, shapes=[(16, 16)], bins=16, channels=8, points=4, queries=32)
        expanded_bytes = 2 * 16 * 16 * 16 * 8 * 8
        with measure() as rep:
            dfa3d_efficient(inst.features, inst.depth, inst.proj, inst.spec, aggregate="sum")
        assert rep.peak_bytes < expanded_bytes / 16
        assert rep.peak_bytes == 32 * 8 * 8

    def test_outside_point_contributes_zero(self, rng):
        x = rng.standard_normal((1, 3, 3, 2))
        f = normalize_depth(rng.standard_normal((1, 3, 3, 3)))
        proj = _one(1, 1, 1)
        far = _spec([[5.0, 0.0, 0.0]], [1.0])
        assert np.all(dfa3d_efficient(x, f, proj, far) == 0)
        assert np.all(dfa3d_vanilla(expand_features(x, f), proj, far) == 0)
        assert np.all(dfa2d(x, proj, far) == 0)

    def test_depth_geometry_must_agree(self, rng):
        x = [rng.standard_normal((1, 4, 4, 2)), rng.standard_normal((1, 2, 2, 2))]
        d = [uniform_field(1, 4, 4, 3), uniform_field(1, 2, 2, 3, d_delta=2.0)]
        spec = SamplingSpec(np.zeros((1, 1, 2, 1, 3)), np.full((1, 1, 2, 1), 0.5))
        with pytest.raises(ShapeMismatchError):
            dfa3d_efficient(x, d, _one(1, 1, 1), spec)

    def test_feature_depth_extent_mismatch(self, rng):
        with pytest.raises(ShapeMismatchError):
            dfa3d_efficient(np.zeros((1, 4, 4, 2)), uniform_field(1, 4, 3, 2), _one(1, 1, 1), _spec([[0, 0, 0]], [1.0]))

    def test_float32(self):
        inst = _instance(25, views=2, shapes=[(6, 6)], bins=4, channels=4, points=2, queries=5)
        f32 = [f.astype(np.float32) for f in inst.features]
        d32 = [d.with_dist(d.dist.astype(np.float32)) for d in inst.depth]
        out = dfa3d_efficient(f32, d32, inst.proj, inst.spec)
        assert out.dtype == np.float32
        ref = dfa3d_efficient(inst.features, inst.depth, inst.proj, inst.spec)
        assert harness.relative_error(out, ref) < 1e-5

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000), lam=st.floats(-4, 4))
    def test_linear_in_features_and_weights(self, seed, lam):
        inst = _instance(seed, views=2, shapes=[(4, 5)], bins=3, channels=2, points=2, queries=3)
        base = dfa3d_efficient(inst.features, inst.depth, inst.proj, inst.spec)
        scaled = dfa3d_efficient([lam * f for f in inst.features], inst.depth, inst.proj, inst.spec)
        np.testing.assert_allclose(scaled, lam * base, rtol=1e-12, atol=1e-12)
        w2 = SamplingSpec(inst.spec.offsets, lam * inst.spec.weights)
        np.testing.assert_allclose(
            dfa3d_efficient(inst.features, inst.depth, inst.proj, w2), lam * base, rtol=1e-12, atol=1e-12
        )


class TestDfa2d:
    def test_depth_ignored_for_colinear(self):
        inst = _instance(31, views=1, shapes=[(6, 6)], bins=4, channels=3, points=3, queries=1)
        refs = np.repeat(inst.proj.refs, 4, axis=0)
        refs[:, 0, 2] = [1.0, 2.0, 5.0, 9.0]
        proj = ProjectionTables(refs, np.ones((4, 1), bool))
        off = np.repeat(inst.spec.offsets, 4, axis=0)
        off[..., 2] = np.arange(4)[:, None, None, None]
        spec = SamplingSpec(off, np.repeat(inst.spec.weights, 4, axis=0))
        out = dfa2d(inst.features, proj, spec)
        for i in range(1, 4):
            assert out[i].tobytes() == out[0].tobytes()

    def test_node_sample(self, rng):
        x = rng.standard_normal((1, 3, 4, 2))
        out = dfa2d(x, _one(3, 2, 7), _spec([[0, 0, 0]], [1.0]))
        np.testing.assert_array_equal(out[0, 0], x[0, 2, 3])

    def test_scalar_oracle(self):
        inst = _instance(32, views=2, shapes=[(6, 7), (3, 4)], bins=3, channels=4, heads=2, points=3, queries=5)
        got = dfa2d(inst.features, inst.proj, inst.spec)
        want = oracles.dfa2d_loop(inst.features, inst.proj.refs, inst.proj.visible, inst.spec.offsets, inst.spec.weights)
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-14)


class TestAggregate:
    def test_single_view(self, rng):
        q = rng.standard_normal((1, 3, 4))
        np.testing.assert_array_equal(aggregate_views(q, [[False, True, False]])[0], q[0, 1])

    def test_nowhere(self, rng):
        q = rng.standard_normal((1, 3, 4))
        assert np.all(aggregate_views(q, [[False] * 3]) == 0)

    def test_sum_and_mean(self, rng):
        q = rng.standard_normal((1, 2, 4))
        np.testing.assert_allclose(aggregate_views(q, [[True, True]])[0], q[0, 0] + q[0, 1], rtol=1e-15)
        np.testing.assert_allclose(aggregate_views(q, [[True, True]], "mean")[0], (q[0, 0] + q[0, 1]) / 2, rtol=1e-15)

    def test_unknown_mode(self, rng):
        with pytest.raises(ValueError):
            aggregate_views(np.zeros((1, 1, 1)), [[True]], "max")

    @pytest.mark.parametrize("mode", ["sum", "mean"])
    def test_fused_matches_separate(self, mode):
        inst = _instance(41, views=4, shapes=[(6, 6)], bins=4, channels=3, points=2, queries=10)
        per_view = dfa3d_efficient(inst.features, inst.depth, inst.proj, inst.spec)
        fused = dfa3d_efficient(inst.features, inst.depth, inst.proj, inst.spec, aggregate=mode)
        np.testing.assert_allclose(fused, aggregate_views(per_view, inst.proj.visible, mode), rtol=1e-13, atol=1e-15)


def _interior_instance(seed, aggregate=None):
    cfg = harness.GradcheckConfig(instances=1)
    inst, queries, w_s, w_a, _, _, _ = harness.gradcheck_instance(cfg, seed, 0)
    nq, nv, c = cfg.queries, cfg.views, cfg.channels
    shape = (nq, nv, c) if aggregate is None else (nq, c)
    return inst, queries, w_s, w_a, np.random.default_rng(seed).standard_normal(shape)


class TestBackward:
    def test_zero_upstream(self):
        inst, _, _, _, g = _interior_instance(1)
        grads = dfa3d_backward(np.zeros_like(g), inst.features, inst.depth, inst.proj, inst.spec, depth_logits_chain=True)
        for arr in [*grads.features, *grads.depth, grads.offsets, grads.weights, *grads.depth_logits]:
            assert np.all(arr == 0)

    def test_weight_gradient_is_sample_dot_upstream(self):
        inst, _, _, _, g = _interior_instance(2)
        grads = dfa3d_backward(g, inst.features, inst.depth, inst.proj, inst.spec)
        nq, nm, nl, nk = inst.spec.weights.shape
        ch = inst.features[0].shape[-1] // nm
        for q in range(nq):
            for m in range(nm):
                for l in range(nl):
                    for k in range(nk):
                        one = np.zeros_like(inst.spec.weights)
                        one[q, m, l, k] = 1.0
                        sample = dfa3d_efficient(inst.features, inst.depth, inst.proj, SamplingSpec(inst.spec.offsets, one))
                        want = float(np.sum(sample[q, :, m * ch : (m + 1) * ch] * g[q, :, m * ch : (m + 1) * ch]))
                        assert grads.weights[q, m, l, k] == pytest.approx(want, rel=1e-12, abs=1e-14)

    @pytest.mark.parametrize("aggregate", [None, "sum", "mean"])
    def test_finite_differences(self, aggregate):
        inst, _, _, _, g = _interior_instance(3, aggregate)
        grads = dfa3d_backward(g, inst.features, inst.depth, inst.proj, inst.spec, aggregate)

        def loss():
            return float(np.sum(dfa3d_efficient(inst.features, inst.depth, inst.proj, inst.spec, aggregate) * g))

        for analytic, arr in [
            (grads.features[0], inst.features[0]),
            (grads.depth[1], inst.depth[1].dist),
            (grads.offsets, inst.spec.offsets),
            (grads.weights, inst.spec.weights),
        ]:
            assert harness.relative_error(analytic, harness._fd(loss, arr, 1e-5)) <= 1e-6

    def test_depth_offset_derivative_is_bin_slope(self):
        # single point, interior of a bin: d out / d dd = (w1 - w0) / d_delta * X at a node
        x = np.arange(1.0, 5.0).reshape(1, 2, 2, 1)
        f = DepthField(np.tile([0.1, 0.6, 0.3], (1, 2, 2, 1)), d_delta=0.5, d_origin=1.0)
        proj = _one(0, 1, 1.2)
        spec = _spec([[0.0, 0.0, 0.0]], [1.0])
        grads = dfa3d_backward(np.ones((1, 1, 1)), x, f, proj, spec)
        assert grads.offsets[0, 0, 0, 0, 2] == pytest.approx((0.6 - 0.1) / 0.5 * x[0, 1, 0, 0], rel=1e-13)

    def test_multi_worker_matches_single(self):
        inst = _instance(5, views=3, shapes=[(8, 8), (4, 4)], bins=5, channels=4, heads=2, points=3, queries=17)
        g = np.random.default_rng(5).standard_normal((17, 3, 4))
        one = dfa3d_backward(g, inst.features, inst.depth, inst.proj, inst.spec, workers=1)
        four = dfa3d_backward(g, inst.features, inst.depth, inst.proj, inst.spec, workers=4)
        for a, b in [*zip(one.features, four.features), *zip(one.depth, four.depth), (one.offsets, four.offsets)]:
            assert harness.relative_error(b, a) <= 1e-12
        np.testing.assert_array_equal(one.weights, four.weights)

    def test_multi_worker_deterministic(self):
        inst = _instance(6, views=2, shapes=[(6, 6)], bins=4, channels=2, points=3, queries=11)
        g = np.random.default_rng(6).standard_normal((11, 2, 2))
        a = dfa3d_backward(g, inst.features, inst.depth, inst.proj, inst.spec, workers=3)
        b = dfa3d_backward(g, inst.features, inst.depth, inst.proj, inst.spec, workers=3)
        assert a.features[0].tobytes() == b.features[0].tobytes()
        assert a.depth[0].tobytes() == b.depth[0].tobytes()

    def test_chain_to_queries(self):
        cfg = harness.GradcheckConfig(instances=1)
        inst, queries, w_s, w_a, agg, g, _ = harness.gradcheck_instance(cfg, 9, 0)
        grads = dfa3d_backward(g, inst.features, inst.depth, inst.proj, inst.spec, agg)
        g_q, _, _ = generate_sampling_backward(queries, w_s, w_a, inst.spec, grads.offsets, grads.weights)

        def loss():
            spec = generate_sampling(queries, w_s, w_a, cfg.heads, cfg.levels)
            return float(np.sum(dfa3d_efficient(inst.features, inst.depth, inst.proj, spec, agg) * g))

        assert harness.relative_error(g_q, harness._fd(loss, queries, 1e-5)) <= 1e-6

    def test_upstream_shape_checked(self):
        inst, _, _, _, g = _interior_instance(7)
        with pytest.raises(ShapeMismatchError):
            dfa3d_backward(g[:, 0], inst.features, inst.depth, inst.proj, inst.spec)


def test_kernel_counts_are_consistent():
    assert kernels.VANILLA_FEATURE == 8
    assert kernels.EFFICIENT_FEATURE == 4
    assert kernels.EFFICIENT_DEPTH == 8
