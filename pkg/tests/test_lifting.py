import numpy as np
import pytest

from dfa3d import geometry
from dfa3d.depth_field import sample_depth_scores
from dfa3d.dfa import bilinear_sample, dfa3d_efficient, dfa2d, generate_sampling, project_queries
from dfa3d.geometry import CameraModel, colinear_queries
from dfa3d.harness import cosine_matrix, mean_offdiag
from dfa3d.lifting import (
    ConfigError,
    LiftConfig,
    SceneSpec,
    anchors_from_points,
    build_anchor_grid,
    generate_scene,
    lift,
    lift_dfa2d,
    make_layer_params,
)

SEED42_DIGEST = "9a603aa1db86fbded92f7d8b52e6cfdb25c66b37f52518107765bad3059b5230"


class TestAnchorGrid:
    def test_single_cell(self):
        g = build_anchor_grid([[-1, 1]] * 3, [1, 1, 1], 4)
        np.testing.assert_array_equal(g.positions, [[0.0, 0.0, 0.0]])
        assert g.contents.shape == (1, 4) and np.all(g.contents == 0)

    def test_cell_centres(self):
        g = build_anchor_grid([[0, 2], [0, 1], [0, 1]], [2, 1, 1], 2)
        np.testing.assert_array_equal(g.positions, [[0.5, 0.5, 0.5], [1.5, 0.5, 0.5]])

    def test_count(self):
        g = build_anchor_grid([[-50, 50], [-50, 50], [-3, 3]], [50, 50, 4], 1)
        assert g.num_queries == 10_000
        lo = np.array([-50, -50, -3])
        hi = np.array([50, 50, 3])
        assert np.all((g.positions > lo) & (g.positions < hi))

    def test_seeded_random_init(self):
        a = build_anchor_grid([[0, 1]] * 3, [2, 2, 2], 5, init="random", seed=3)
        b = build_anchor_grid([[0, 1]] * 3, [2, 2, 2], 5, init="random", seed=3)
        np.testing.assert_array_equal(a.contents, b.contents)
        assert np.std(a.contents) > 0

    def test_shared_init(self):
        g = anchors_from_points(np.zeros((4, 3)), 6, init="shared", seed=1)
        assert np.all(g.contents == g.contents[0])

    def test_bad_inputs(self):
        with pytest.raises(ConfigError):
            build_anchor_grid([[0, 1]] * 3, [0, 1, 1], 2)
        with pytest.raises(ConfigError):
            build_anchor_grid([[0, 1]] * 3, [1, 1, 1], 2, init="ones")


class TestConfig:
    def test_validation(self):
        with pytest.raises(ConfigError):
            LiftConfig(num_layers=0)
        with pytest.raises(ConfigError):
            LiftConfig(aggregation="max")

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            LiftConfig.from_dict({"layers": 2})

    def test_identity_update_needs_matching_dims(self):
        with pytest.raises(ConfigError):
            make_layer_params(LiftConfig(update="identity"), 4, 8, 1)


def _one_view_scene(depth_mode="onehot", sigma=1.0, channels=4):
    spec = SceneSpec(
        num_views=1, image_w=16, image_h=12, fx=10.0, channels=channels, bins=12, d_origin=1.0,
        depth_mode=depth_mode, sigma=sigma, objects=[{"center": [5.0, 0.0, 0.0], "radius": 1.5}],
    )
    return generate_scene(spec, seed=0)


def _degenerate_cfg(**kw):
    return LiftConfig(points=1, zero_offsets=True, **kw)


class TestLift:
    def test_single_layer_degenerate(self):
        scene = _one_view_scene("gaussian")
        cam = scene.cameras[0]
        # integer pixel (7, 5) at depth 5 sees the object
        pts = np.stack(colinear_queries(cam, 7.0, 5.0, [5.0, 8.0]))
        grid = anchors_from_points(pts, 3)
        res = lift(grid, scene.features, scene.depth, scene.cameras, _degenerate_cfg())
        for i, d in enumerate([5.0, 8.0]):
            w = sample_depth_scores(scene.depth[0], 0, [(7, 5)], d)[0]
            np.testing.assert_allclose(res.layers[0].lifted[i], w * scene.features[0][0, 5, 7], rtol=1e-12)

    def test_invisible_everywhere(self):
        scene = _one_view_scene()
        behind = np.array([[-5.0, 0.0, 0.0], [-2.0, 3.0, 1.0]])
        grid = anchors_from_points(behind, 4, init="random", seed=2)
        res = lift(grid, scene.features, scene.depth, scene.cameras, LiftConfig(num_layers=3))
        np.testing.assert_array_equal(res.contents, grid.contents)
        for layer in res.layers:
            assert np.all(layer.delta == 0)
            assert not layer.visible.any()
            assert np.all(np.isnan(layer.sampling_locations))

    def test_near_far_ratio(self):
        scene = _one_view_scene("gaussian", sigma=2.0)
        cam = scene.cameras[0]
        near, far = 5.0, 9.0
        pts = np.stack(colinear_queries(cam, 7.0, 5.0, [near, far]))
        res = lift(anchors_from_points(pts, 3), scene.features, scene.depth, scene.cameras, _degenerate_cfg())
        lifted = res.layers[0].lifted
        w_near, w_far = (sample_depth_scores(scene.depth[0], 0, [(7, 5)], d)[0] for d in (near, far))
        assert w_near > w_far > 0
        ratio = np.linalg.norm(lifted[0]) / np.linalg.norm(lifted[1])
        assert ratio == pytest.approx(w_near / w_far, rel=1e-9)

    def test_snapshots_per_layer(self):
        scene = generate_scene(SceneSpec(num_views=2, num_random_objects=3), seed=4)
        grid = build_anchor_grid([[-10, 10], [-10, 10], [-1, 1]], [6, 6, 1], 8, init="random", seed=1)
        res = lift(grid, scene.features, scene.depth, scene.cameras, LiftConfig(num_layers=3, seed=4))
        assert len(res.layers) == 3
        locs = [layer.sampling_locations for layer in res.layers]
        assert locs[0].shape == (36, 2, 1, 1, 4, 3)
        assert not all(np.array_equal(locs[0], l, equal_nan=True) for l in locs[1:])

    def test_deterministic(self):
        scene = generate_scene(SceneSpec(num_views=2, num_random_objects=2), seed=5)
        grid = build_anchor_grid([[-8, 8], [-8, 8], [-1, 1]], [5, 5, 2], 8, init="random", seed=5)
        cfg = LiftConfig(num_layers=2, seed=5, heads=2)
        a = lift(grid, scene.features, scene.depth, scene.cameras, cfg)
        b = lift(grid, scene.features, scene.depth, scene.cameras, cfg)
        assert a.contents.tobytes() == b.contents.tobytes()

    def test_mean_aggregation(self):
        scene = generate_scene(SceneSpec(num_views=3, num_random_objects=2), seed=6)
        grid = build_anchor_grid([[-8, 8], [-8, 8], [-1, 1]], [5, 5, 1], 4, init="random", seed=6)
        s = lift(grid, scene.features, scene.depth, scene.cameras, LiftConfig(seed=6))
        m = lift(grid, scene.features, scene.depth, scene.cameras, LiftConfig(seed=6, aggregation="mean"))
        count = s.layers[0].visible.sum(1)
        hit = count > 0
        np.testing.assert_allclose(m.layers[0].lifted[hit], s.layers[0].lifted[hit] / count[hit, None], rtol=1e-12)

    def test_view_count_mismatch(self):
        scene = _one_view_scene()
        grid = anchors_from_points(np.ones((1, 3)), 2)
        with pytest.raises(ConfigError):
            lift(grid, scene.features, scene.depth, scene.cameras * 2, LiftConfig())

    def test_manual_composition(self):
        scene = generate_scene(SceneSpec(num_views=2, num_random_objects=3, strides=[1, 2]), seed=8)
        grid = build_anchor_grid([[-10, 10], [-10, 10], [-1, 1]], [4, 4, 1], 6, init="random", seed=8)
        cfg = LiftConfig(seed=8, heads=2)
        res = lift(grid, scene.features, scene.depth, scene.cameras, cfg)
        (p,) = make_layer_params(cfg, 6, 8, 2)
        proj = project_queries(grid.positions, scene.cameras, scene.depth[0].d_min, scene.depth[0].d_max)
        spec = generate_sampling(grid.contents, p.w_s, p.w_a, 2, 2)
        lifted = dfa3d_efficient(scene.features, scene.depth, proj, spec, aggregate="sum")
        np.testing.assert_array_equal(res.contents, grid.contents + lifted @ p.w_out.T)


class TestLiftDfa2d:
    def test_colinear_collapse(self):
        scene = _one_view_scene("onehot")
        cam = scene.cameras[0]
        pts = np.stack(colinear_queries(cam, 7.3, 5.6, np.linspace(2.0, 11.0, 8)))
        grid = anchors_from_points(pts, 5, init="shared", seed=3)
        res = lift_dfa2d(grid, scene.features, scene.cameras, LiftConfig(points=3, seed=3))
        lifted = res.layers[0].lifted
        assert np.abs(lifted - lifted[0]).max() == 0.0
        assert mean_offdiag(cosine_matrix(lifted)) == 1.0

    def test_single_view_bilinear(self):
        scene = _one_view_scene()
        cam = scene.cameras[0]
        pts = np.stack(colinear_queries(cam, 6.4, 4.25, [5.0]))
        res = lift_dfa2d(anchors_from_points(pts, 3), scene.features, scene.cameras, _degenerate_cfg())
        np.testing.assert_allclose(res.layers[0].lifted[0], bilinear_sample(scene.features[0][0], (6.4, 4.25)), rtol=1e-12)

    def test_manual_composition(self):
        scene = generate_scene(SceneSpec(num_views=2, num_random_objects=3), seed=9)
        grid = build_anchor_grid([[-10, 10], [-10, 10], [-1, 1]], [4, 4, 1], 6, init="random", seed=9)
        cfg = LiftConfig(seed=9)
        res = lift_dfa2d(grid, scene.features, scene.cameras, cfg)
        (p,) = make_layer_params(cfg, 6, 8, 1)
        proj = project_queries(grid.positions, scene.cameras, 0.0, np.inf, use_depth_range=False)
        spec = generate_sampling(grid.contents, p.w_s, p.w_a)
        lifted = dfa2d(scene.features, proj, spec, aggregate="sum")
        np.testing.assert_array_equal(res.contents, grid.contents + lifted @ p.w_out.T)


def test_disambiguation():
    spec = SceneSpec(
        num_views=1, image_w=32, image_h=24, fx=20.0, channels=8, bins=16, d_origin=1.0,
        objects=[{"center": [6.0, 0.0, 0.0], "radius": 1.5}],
    )
    scene = generate_scene(spec, 0)
    cam = scene.cameras[0]
    u, v, _ = geometry.project_point(scene.centers[0], cam)
    pts = np.stack(colinear_queries(cam, round(u), round(v), np.arange(2.0, 16.0, 2.0).tolist() + [6.0]))
    grid = anchors_from_points(pts, 8, init="shared", seed=0)
    cfg = _degenerate_cfg()
    s3 = mean_offdiag(cosine_matrix(lift(grid, scene.features, scene.depth, scene.cameras, cfg).layers[0].lifted))
    s2 = mean_offdiag(cosine_matrix(lift_dfa2d(grid, scene.features, scene.cameras, cfg).layers[0].lifted))
    assert s2 == 1.0
    assert s3 < s2


class TestScene:
    def test_empty(self):
        scene = generate_scene(SceneSpec(num_views=2, bins=6), seed=1)
        assert all(np.all(f == 0) for f in scene.features)
        np.testing.assert_array_equal(scene.depth[0].dist, 1 / 6)

    def test_on_axis_footprint_centred(self):
        cam = CameraModel(20.0, 20.0, 15.0, 10.0, 31, 21)
        spec = SceneSpec(
            cameras=[geometry.rig_to_json([cam])[0]], channels=2, objects=[{"center": [0.0, 0.0, 6.0], "radius": 1.0}],
        )
        scene = generate_scene(spec, seed=0)
        painted = np.argwhere(np.any(scene.features[0][0] != 0, axis=-1))
        np.testing.assert_allclose(painted.mean(axis=0), [10.0, 15.0])
        assert scene.depth_maps[0, 10, 15] == 6.0
        assert np.argmax(scene.depth[0].dist[0, 10, 15]) == 5

    def test_signatures_orthonormal(self):
        scene = generate_scene(SceneSpec(num_random_objects=5, channels=8), seed=3)
        np.testing.assert_allclose(scene.signatures @ scene.signatures.T, np.eye(5), atol=1e-12)

    def test_painted_depth_positive(self):
        scene = generate_scene(SceneSpec(num_random_objects=3), seed=2)
        painted = np.any(scene.features[0] != 0, axis=-1)
        assert np.all(scene.depth_maps[painted] > 0)
        assert np.all(scene.depth_maps[~painted] == 0)

    def test_seed42_fixture_hash(self):
        scene = generate_scene(SceneSpec(num_views=2, num_random_objects=3), seed=42)
        assert scene.digest() == SEED42_DIGEST

    def test_multiscale(self):
        scene = generate_scene(SceneSpec(strides=[1, 2, 4]), seed=0)
        assert [f.shape[1:3] for f in scene.features] == [(24, 32), (12, 16), (6, 8)]
        assert all(d.is_normalized() for d in scene.depth)

    def test_config_errors(self):
        with pytest.raises(ConfigError):
            SceneSpec.from_dict({"depth_mode": "lidar"})
        with pytest.raises(ConfigError):
            SceneSpec.from_dict({"colour": 1})
        with pytest.raises(ConfigError):
            generate_scene(SceneSpec(num_random_objects=9, channels=8))
