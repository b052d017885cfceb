import numpy as np
import pytest
from scipy.integrate import quad

from aquasplat.medium import medium_query
from aquasplat.render import (
    COV_FLOOR,
    RayRenderRecord,
    composite_pixel,
    project,
    render,
    render_plain,
    render_reference,
)
from aquasplat.scene import TINYNET, CameraView, GaussianScene, MediumModel, init_net_params, logit
from conftest import camera, random_medium, random_scene


def single(pos, scale=0.1, op=0.9, color_sh=(0.0, 0.0, 0.0)):
    return GaussianScene(np.array([pos], dtype=float), np.array([[color_sh]]), [logit(op)], [[1, 0, 0, 0]],
                         np.log(np.full((1, 3), scale)))


# --------------------------------------------------------------------------- projection

def test_project_on_axis():
    v = CameraView(100, 100, 50, 50, 100, 100)
    s = project(single([0, 0, 2.0]), v)
    np.testing.assert_allclose(s.means[0], [50, 50])
    assert s.depth[0] == 2.0


def test_project_culls_behind_camera():
    v = CameraView(100, 100, 50, 50, 100, 100)
    scene = GaussianScene.from_primitives(list(single([0, 0, -1.0])) + list(single([0, 0, 3.0])))
    s = project(scene, v)
    assert list(s.index) == [1]


def test_projected_covariance_matches_numerical_jacobian(rng):
    v = CameraView(120, 90, 40, 30, 80, 60)
    for _ in range(5):
        p = rng.uniform([-0.5, -0.5, 1.5], [0.5, 0.5, 3.0])
        sc = single(p, scale=0.07)
        sc.rotation = (q := rng.normal(size=(1, 4))) / np.linalg.norm(q)
        sc.log_scale = np.log(rng.uniform(0.02, 0.1, (1, 3)))

        def proj(x):
            return np.array([v.fx * x[0] / x[2] + v.cx, v.fy * x[1] / x[2] + v.cy])

        h = 1e-6
        J = np.stack([(proj(p + h * e) - proj(p - h * e)) / (2 * h) for e in np.eye(3)], 1)
        g = sc.primitive(0)
        from aquasplat.geometry import quat_to_rotmat_np
        Rg = quat_to_rotmat_np(g.rotation)
        Sigma = Rg @ np.diag(g.scale ** 2) @ Rg.T
        want = J @ Sigma @ J.T + COV_FLOOR * np.eye(2)
        np.testing.assert_allclose(project(sc, v).cov[0], want, rtol=1e-6)


def test_isotropic_covariance_on_axis():
    v = CameraView(100, 100, 50, 50, 100, 100)
    s, z = 0.05, 2.5
    cov = project(single([0, 0, z], scale=s), v).cov[0]
    np.testing.assert_allclose(cov - COV_FLOOR * np.eye(2), np.diag([(100 * s / z) ** 2] * 2), rtol=1e-12)


# --------------------------------------------------------------------------- composite_pixel

def test_composite_no_gaussians_is_backscatter():
    m = MediumModel([0.2, 0.3, 0.4], [0.1, 0.2, 0.3], [0.5, 0.6, 0.7])
    out = composite_pixel(RayRenderRecord([], [], [], np.zeros((0, 3))), m)
    np.testing.assert_allclose(out.rgb, [0.2, 0.3, 0.4], atol=1e-15)
    assert out.depth == -1.0


def test_composite_single_opaque_hit():
    ln2 = np.log(2.0)
    m = MediumModel([0.2, 0.4, 0.6], [ln2] * 3, [ln2] * 3)
    out = composite_pixel(RayRenderRecord([0], [1.0], [1.0], [[1, 1, 1]]), m)
    np.testing.assert_allclose(out.rgb, [0.6, 0.7, 0.8], atol=1e-15)


def test_composite_zero_coefficients_is_plain(rng):
    n = 6
    z = np.sort(rng.uniform(0.5, 4, n))
    a = rng.uniform(0.1, 0.9, n)
    c = rng.uniform(0, 1, (n, 3))
    out = composite_pixel(RayRenderRecord(np.arange(n), z, a, c), MediumModel([0.3, 0.3, 0.3], [0] * 3, [0] * 3))
    T = np.concatenate([[1.0], np.cumprod(1 - a)[:-1]])
    np.testing.assert_allclose(out.rgb, (T * a) @ c, atol=1e-15)


def test_composite_segment_integral_matches_quadrature(rng):
    # medium term against adaptive quadrature of c sigma_bs exp(-sigma_bs s) T(s), one segment at a time
    z = np.array([0.7, 1.3, 2.2])
    a = np.array([0.4, 0.5, 0.3])
    m = random_medium(rng)
    out = composite_pixel(RayRenderRecord([0, 1, 2], z, a, np.zeros((3, 3))), m)
    bounds = [0.0, *z, np.inf]
    T = np.concatenate([[1.0], np.cumprod(1 - a)])
    want = np.zeros(3)
    for ch in range(3):
        s = m.sigma_bs[ch]
        for k in range(4):
            val, _ = quad(lambda x: s * np.exp(-s * x), bounds[k], bounds[k + 1], epsabs=1e-14)
            want[ch] += m.backscatter_color[ch] * T[k] * val
    np.testing.assert_allclose(out.medium_rgb, want, atol=1e-12)


def test_zero_backscatter_coefficient_has_no_water_colour(rng):
    out = composite_pixel(RayRenderRecord([0], [1.0], [0.5], [[1, 1, 1]]),
                          MediumModel([0.5, 0.5, 0.5], [0.0] * 3, [0.0, 0.2, 0.0]))
    assert out.medium_rgb[0] == 0 and out.medium_rgb[2] == 0 and out.medium_rgb[1] > 0
    sc, v = random_scene(rng, 6), camera(16)
    np.testing.assert_array_equal(render(sc, MediumModel([0.4] * 3, [0.0] * 3, [0.0] * 3), v).rgb,
                                  render_plain(sc, v))


def test_composite_rejects_bad_input():
    with pytest.raises(ValueError):
        RayRenderRecord([0, 1], [2.0, 1.0], [0.5, 0.5], np.zeros((2, 3)))
    m = MediumModel()
    m.sigma_attn = np.array([-1.0, 0, 0])
    with pytest.raises(ValueError):
        composite_pixel(RayRenderRecord([], [], [], np.zeros((0, 3))), m)


# --------------------------------------------------------------------------- render

def test_empty_scene_is_pure_medium():
    m = MediumModel([0.1, 0.2, 0.3], [0.2] * 3, [0.4] * 3)
    out = render(GaussianScene.empty(), m, camera(16))
    np.testing.assert_allclose(out.rgb, np.broadcast_to([0.1, 0.2, 0.3], out.rgb.shape), atol=1e-15)
    assert np.all(out.accumulation == 0)
    assert np.all(out.depth == -1)


def test_large_opaque_splat_depth():
    v = CameraView(40, 40, 16, 16, 32, 32)
    sc = GaussianScene(np.array([[0, 0, 2.0]]), np.zeros((1, 1, 3)), [logit(0.99999)], [[1, 0, 0, 0]],
                       np.log([[10.0, 10.0, 1e-3]]))
    out = render(sc, MediumModel([0.2] * 3, [0.1] * 3, [0.1] * 3), v)
    mask = out.accumulation > 0.99
    assert mask.mean() > 0.9
    np.testing.assert_allclose(out.depth[mask], 2.0, atol=1e-6)


def test_energy_accounting(rng):
    for _ in range(5):
        out = render(random_scene(rng, 10), random_medium(rng), camera(24))
        np.testing.assert_allclose(out.accumulation + out.transmittance, 1.0, atol=1e-12)
        assert out.accumulation.min() >= 0 and out.accumulation.max() <= 1


def test_rgb_is_attenuated_object_plus_medium(rng):
    sc, m, v = random_scene(rng, 8), random_medium(rng), camera(20)
    out = render(sc, m, v)
    ref = render_reference(sc, m, v)
    np.testing.assert_allclose(out.rgb - out.medium_rgb, ref.rgb - ref.medium_rgb, atol=1e-12)
    np.testing.assert_allclose(out.medium_rgb, ref.medium_rgb, atol=1e-12)


def test_monotone_in_sigma_attn(rng):
    sc, v = random_scene(rng, 10), camera(24)
    prev = None
    for s in [0.0, 0.1, 0.3, 1.0, 3.0]:
        out = render(sc, MediumModel([0.3] * 3, [s] * 3, [0.2] * 3), v)
        obj = out.rgb - out.medium_rgb
        if prev is not None:
            assert np.all(obj <= prev + 1e-15)
        prev = obj


def test_backscatter_sweep_drives_background_to_medium_color(rng):
    sc, v = random_scene(rng, 4, scale=(0.03, 0.05)), camera(24)
    c = np.array([0.2, 0.5, 0.7])
    prev = None
    for s in [0.05, 0.1, 0.3, 1.0, 3.0, 10.0, 30.0]:
        out = render(sc, MediumModel(c, [0.1] * 3, [s] * 3), v)
        if prev is not None:
            assert np.all(out.medium_rgb >= prev - 1e-15)
            assert np.all(out.medium_rgb <= c + 1e-15)
        prev = out.medium_rgb
    background = out.accumulation < 1e-3
    assert background.any()
    np.testing.assert_allclose(out.rgb[background], np.broadcast_to(c, out.rgb[background].shape), atol=2e-3)


def test_permutation_invariance(rng):
    sc, m, v = random_scene(rng, 12), random_medium(rng), camera(24)
    perm = rng.permutation(len(sc))
    a, b = render(sc, m, v), render(sc.subset(perm), m, v)
    np.testing.assert_array_equal(a.rgb, b.rgb)
    np.testing.assert_array_equal(a.depth, b.depth)


def test_medium_free_is_plain_splatting_bitwise(rng):
    for _ in range(5):
        sc, v = random_scene(rng, 10, sh_degree=1), camera(24)
        np.testing.assert_array_equal(render(sc, MediumModel.clear(), v).rgb, render_plain(sc, v))


def test_tiled_parallel_equals_reference(rng):
    for deg in (0, 2):
        sc, m, v = random_scene(rng, 8, sh_degree=deg), random_medium(rng), camera(20)
        ref = render_reference(sc, m, v)
        for tile, threads in ((16, 4), (7, 1), (None, 1)):
            out = render(sc, m, v, tile=tile, threads=threads)
            for k in ("rgb", "object_rgb", "medium_rgb", "depth", "accumulation", "transmittance"):
                np.testing.assert_allclose(getattr(out, k), getattr(ref, k), atol=1e-12, err_msg=k)


def test_tinynet_render_matches_reference(rng):
    m = MediumModel(variant=TINYNET, net_params=init_net_params(rng, scale=0.5))
    sc, v = random_scene(rng, 6), camera(16)
    np.testing.assert_allclose(render(sc, m, v).rgb, render_reference(sc, m, v).rgb, atol=1e-12)


def test_resolution_equivariance(rng):
    # big splats so the fixed pixel-space covariance floor is negligible
    sc = random_scene(rng, 4, scale=(0.8, 1.0))
    m = random_medium(rng)
    lo, hi = camera(16), camera(32)
    a, b = render(sc, m, lo), render(sc, m, hi)
    np.testing.assert_allclose(b.rgb[::2, ::2], a.rgb, atol=2e-3)


# --------------------------------------------------------------------------- medium_query

def test_parametric_query_direction_independent(rng):
    m = random_medium(rng)
    a = medium_query(m, [1.0, 0, 0])
    b = medium_query(m, [0, 0.6, 0.8])
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)


def test_tinynet_zero_weights():
    c, sa, sb = medium_query(MediumModel(variant=TINYNET), [0, 0, 1.0])
    np.testing.assert_array_equal(c, [0.5, 0.5, 0.5])
    np.testing.assert_allclose(sa, np.log(2.0), atol=1e-15)


def test_tinynet_continuity_and_ranges(rng):
    m = MediumModel(variant=TINYNET, net_params=init_net_params(rng, scale=1.0))
    for _ in range(10):
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        e = d + 1e-6 * rng.normal(size=3)
        e /= np.linalg.norm(e)
        for x, y in zip(medium_query(m, d), medium_query(m, e)):
            assert np.linalg.norm(x - y) < 1e-5
        c, sa, sb = medium_query(m, d)
        assert np.all((c > 0) & (c < 1)) and np.all(sa >= 0) and np.all(sb >= 0)


def test_query_rejects_non_unit():
    with pytest.raises(ValueError):
        medium_query(MediumModel(), [0, 0, 2.0])
