import numpy as np
import pytest

from aquasplat.geometry import quat_to_rotmat_np
from aquasplat.pointmap import (
    Edge,
    ViewGraph,
    align,
    confidence_loss,
    downsample,
    regression_loss,
    regression_residuals,
    to_gaussians,
)
from aquasplat.scene import PointMap, color_to_sh0
from conftest import two_view_graph


def pm(points, conf=None, view=0, scale=None):
    points = np.asarray(points, dtype=float)
    if conf is None:
        conf = np.ones(points.shape[:2])
    return PointMap(view, points, conf, scale)


# --------------------------------------------------------------------------- losses

def test_regression_loss_examples(rng):
    x = rng.normal(size=(4, 5, 3))
    assert regression_loss(pm(x), pm(x)) == 0
    assert regression_loss(pm(2 * x), pm(x)) == pytest.approx(0, abs=1e-15)
    with pytest.raises(ValueError):
        regression_loss(pm(np.array([[[1.0, 0, 0]]]), scale=1.0), pm(np.zeros((1, 1, 3))))
    with pytest.raises(ValueError):
        regression_loss(pm(x), pm(x[:3]))


def test_regression_loss_rescale_invariance(rng):
    a, b = rng.normal(size=(2, 3, 3, 3))
    assert regression_loss(pm(3 * a), pm(3 * b)) == pytest.approx(regression_loss(pm(a), pm(b)), abs=1e-12)


def test_confidence_loss_examples(rng):
    a, b = rng.normal(size=(2, 3, 4, 3))
    ones = np.ones((3, 4))
    assert confidence_loss(pm(a, ones), pm(b), alpha=0.7) == pytest.approx(regression_residuals(pm(a), pm(b)).sum())
    e = np.full((3, 4), np.e)
    assert confidence_loss(pm(a, e), pm(a), alpha=0.2) == pytest.approx(-0.2 * 12, abs=1e-12)
    with pytest.raises(ValueError):
        confidence_loss(pm(a, np.zeros((3, 4))), pm(b))


def test_confidence_doubling_sign(rng):
    # brute force: doubling gamma at one pixel raises the loss iff gamma r > alpha log 2
    a, b = rng.normal(size=(2, 4, 4, 3))
    r = regression_residuals(pm(a), pm(b))
    alpha = 0.5
    for i in range(4):
        for g in (0.5, 1.0, 3.0):
            conf = np.ones((4, 4))
            conf[i, i] = g
            base = confidence_loss(pm(a, conf), pm(b), alpha)
            conf[i, i] = 2 * g
            raised = confidence_loss(pm(a, conf), pm(b), alpha) > base
            assert raised == (g * r[i, i] > alpha * np.log(2))


# --------------------------------------------------------------------------- alignment

def test_align_identity_is_fixed_point(rng):
    x0, x1 = rng.normal(size=(2, 6, 6, 3))
    g = ViewGraph([0, 1], [Edge(0, 1, pm(x0, view=0), pm(x1, view=1))])
    sol = align(g)
    np.testing.assert_allclose(quat_to_rotmat_np(sol.rotations[1]), np.eye(3), atol=1e-6)
    np.testing.assert_allclose(sol.translations, 0, atol=1e-6)
    np.testing.assert_allclose(sol.scales, 1, atol=1e-6)
    assert sol.objective <= 1e-12


def test_align_recovers_planted_similarity(rng):
    g, R, t, s = two_view_graph(rng)
    sol = align(g)
    # gauge: scales have unit geometric mean, so the recovered edge scales are s^-1/2 and s^1/2
    s0, s1 = sol.scales
    assert s1 / s0 == pytest.approx(s, abs=1e-4)
    assert s0 * s1 == pytest.approx(1, abs=1e-12)
    np.testing.assert_allclose(quat_to_rotmat_np(sol.rotations[0]), np.eye(3), atol=1e-12)
    np.testing.assert_allclose(quat_to_rotmat_np(sol.rotations[1]), R, atol=1e-4)
    np.testing.assert_allclose(sol.translations[1], t, atol=1e-4)
    assert np.all(np.diff(sol.objective_trace) <= 0)


def test_align_noise_beats_identity(rng):
    g, *_ = two_view_graph(rng, noise=0.01)
    sol = align(g)
    assert sol.objective < sol.identity_objective
    assert np.all(np.diff(sol.objective_trace) <= 0)
    assert np.isfinite(sol.objective)


def test_align_three_views_gauge(rng):
    from aquasplat.synth import SynthSpec, make_pointmaps, make_scene
    spec = SynthSpec(seed=3, n_gaussians=30, n_views=3, resolution=32, pointmap_resolution=16)
    scene, _, views = make_scene(spec)
    sol = align(make_pointmaps(scene, views, 0.01, spec))
    assert np.exp(np.log(sol.scales).mean()) == pytest.approx(1, abs=1e-12)
    np.testing.assert_allclose(sol.rotations[0], [1, 0, 0, 0], atol=1e-12)
    np.testing.assert_allclose(sol.translations[0], 0, atol=1e-12)
    assert np.all(np.diff(sol.objective_trace) <= 0)


def test_view_graph_validation(rng):
    x = rng.normal(size=(2, 2, 3))
    with pytest.raises(ValueError):
        ViewGraph([0, 1, 2], [Edge(0, 1, pm(x), pm(x, view=1))])
    with pytest.raises(ValueError):
        ViewGraph([0], [Edge(0, 0, pm(x), pm(x))])
    with pytest.raises(ValueError):
        ViewGraph([0, 1], [])


# --------------------------------------------------------------------------- downsampling

def brute_downsample(points, conf, voxel):
    buckets = {}
    for i, p in enumerate(points):
        key = tuple(int(k) for k in np.floor(p / voxel))
        j = buckets.get(key)
        if j is None or conf[i] > conf[j]:
            buckets[key] = i
    return sorted(buckets.values())


def test_downsample_matches_brute_force(rng):
    for _ in range(20):
        pts = rng.uniform(-1, 1, (1000, 3))
        conf = rng.integers(0, 5, 1000).astype(float)  # many ties
        p, c, idx = downsample(pts, conf, 0.1, return_index=True)
        assert list(idx) == brute_downsample(pts, conf, 0.1)
        np.testing.assert_array_equal(p, pts[idx])
        np.testing.assert_array_equal(c, conf[idx])


def test_downsample_examples():
    p, c = downsample([[0.01, 0, 0], [0.02, 0, 0]], [0.4, 0.9], 0.1)
    np.testing.assert_array_equal(p, [[0.02, 0, 0]])
    assert list(c) == [0.9]
    pts = np.arange(12.0).reshape(4, 3)
    p, c = downsample(pts, [1, 2, 3, 4], 0.5)
    np.testing.assert_array_equal(p, pts)
    p, c = downsample(np.zeros((0, 3)), [], 0.1)
    assert p.shape == (0, 3) and c.shape == (0,)
    with pytest.raises(ValueError):
        downsample(pts, [1, 2, 3, 4], 0.0)


# --------------------------------------------------------------------------- to_gaussians

def test_to_gaussians_unit_grid():
    g = np.stack(np.meshgrid(*[np.arange(5.0)] * 3, indexing="ij"), -1).reshape(-1, 3)
    sc = to_gaussians(g, np.full((len(g), 3), 0.3), knn=6)
    assert len(sc) == len(g)
    interior = np.all((g > 0) & (g < 4), axis=1)
    np.testing.assert_allclose(np.exp(sc.log_scale[interior]), 1.0, atol=1e-12)
    np.testing.assert_allclose(sc.sh[:, 0], np.broadcast_to(color_to_sh0(np.full(3, 0.3)), (len(g), 3)))
    np.testing.assert_array_equal(sc.rotation, np.tile([1.0, 0, 0, 0], (len(g), 1)))
    np.testing.assert_allclose(1 / (1 + np.exp(-sc.opacity_logit)), 0.1, atol=1e-12)
    with pytest.raises(ValueError):
        to_gaussians(g[:6], np.zeros((6, 3)), knn=6)
