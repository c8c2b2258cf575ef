import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_cloud, small_camera
from gradcheck import check_scene
from oracles import composite_reference
from splatsweep.camera import Intrinsics, OrbitSpec, orbit_camera, project_point
from splatsweep.gsmath import GaussianCloud, build_covariance, eval_sh, logit, rgb_to_sh0
from splatsweep.rasterizer import DEFAULT_SETTINGS, EXACT, project_splat, render, render_backward, with_workers


def on_axis_camera(size=33):
    # odd image size puts the optical axis through a pixel centre
    return orbit_camera(OrbitSpec(0, 0, 3.0), Intrinsics(width=size, height=size))


def single_splat(pos, scale, color, opacity, rot=(1, 0, 0, 0)):
    return GaussianCloud(
        np.array([pos], dtype=float),
        np.array([rot], dtype=float),
        np.log(np.array([scale], dtype=float)),
        np.array([logit(opacity)]),
        rgb_to_sh0(np.array(color, dtype=float))[None, None, :],
        0,
    )


def test_projection_isotropic_on_axis():
    cam = on_axis_camera()
    s = project_splat(cam, [0, 0, 0], 0.04 * np.eye(3), 0.5, np.zeros((1, 3)), low_pass=0.0)
    assert abs(s.cov2[0, 0] - s.cov2[1, 1]) < 1e-6 * s.cov2[0, 0]
    assert abs(s.cov2[0, 1]) < 1e-6 * s.cov2[0, 0]


def test_projection_scales_quadratically():
    cam = on_axis_camera()
    cov = build_covariance(np.array([0.9, 0.1, 0.3, -0.2]) / np.linalg.norm([0.9, 0.1, 0.3, -0.2]), [0.1, 0.2, 0.05])
    a = project_splat(cam, [0, 0, 0], cov, 0.5, np.zeros((1, 3)), low_pass=0.0).cov2
    b = project_splat(cam, [0, 0, 0], 4 * cov, 0.5, np.zeros((1, 3)), low_pass=0.0).cov2
    np.testing.assert_allclose(b, 4 * a, rtol=1e-12)


def test_projection_inverse_depth():
    cam = on_axis_camera()
    cov = 0.01 * np.eye(3)
    # camera at (3,0,0): x = 1 sits at depth 2, x = -1 at depth 4
    near = project_splat(cam, [1, 0, 0], cov, 0.5, np.zeros((1, 3)), low_pass=0.0)
    far = project_splat(cam, [-1, 0, 0], cov, 0.5, np.zeros((1, 3)), low_pass=0.0)
    np.testing.assert_allclose(np.sqrt(far.cov2[0, 0]), 0.5 * np.sqrt(near.cov2[0, 0]), rtol=1e-12)


def test_projection_matches_numerical_jacobian(rng):
    cam = small_camera(40)
    for _ in range(5):
        mean = rng.uniform(-0.3, 0.3, 3)
        q = rng.normal(size=4)
        cov = build_covariance(q / np.linalg.norm(q), rng.uniform(0.05, 0.2, 3))
        h = 1e-6
        jac = np.stack(
            [(project_point(cam, mean + h * e)[0] - project_point(cam, mean - h * e)[0]) / (2 * h) for e in np.eye(3)],
            axis=1,
        )
        s = project_splat(cam, mean, cov, 0.5, np.zeros((1, 3)))
        np.testing.assert_allclose(s.cov2, jac @ cov @ jac.T + 0.3 * np.eye(2), rtol=1e-6)
        np.testing.assert_allclose(s.mean_px, project_point(cam, mean)[0], atol=1e-9)


def test_empty_cloud_renders_background():
    out = render(small_camera(), GaussianCloud.empty())
    assert np.all(out.rgb == 0) and np.all(out.alpha == 0)
    out = render(small_camera(), GaussianCloud.empty(), background=(0.2, 0.4, 0.6))
    np.testing.assert_array_equal(out.rgb[5, 7], [0.2, 0.4, 0.6])


def test_huge_opaque_splat():
    cam = on_axis_camera()
    out = render(cam, single_splat([0, 0, 0], [2, 2, 2], [1, 0, 0], 1 - 1e-9))
    np.testing.assert_allclose(out.rgb[16, 16], [1, 0, 0], atol=1e-3)
    assert out.alpha[16, 16] > 0.999


def test_two_splat_compositing():
    cam = on_axis_camera()
    near = single_splat([0.5, 0, 0], [0.1] * 3, [1, 0, 0], 0.6)
    far = single_splat([-0.5, 0, 0], [0.1] * 3, [0, 0, 1], 0.8)
    for cloud in (near.concat(far), far.concat(near)):
        out = render(cam, cloud)
        np.testing.assert_allclose(out.rgb[16, 16], [0.6, 0, 0.4 * 0.8], atol=1e-12)
        np.testing.assert_allclose(out.alpha[16, 16], 1 - 0.4 * 0.2, atol=1e-12)


def test_render_matches_bruteforce_compositing(rng):
    cam = small_camera(20)
    cloud = random_cloud(rng, 6, degree=1)
    bg = np.array([0.1, 0.5, 0.9])
    splats = []
    for i in range(len(cloud)):
        g = cloud[i]
        cov = build_covariance(g.rotation / np.linalg.norm(g.rotation), np.exp(g.log_scale))
        d = g.position - cam.position
        color = np.clip(eval_sh(g.sh_coeffs, d / np.linalg.norm(d)), 0, 1)
        s = project_splat(cam, g.position, cov, 1 / (1 + np.exp(-g.opacity_logit)), g.sh_coeffs)
        splats.append((s.mean_px, s.cov2, s.depth, color, s.opacity))
    img, alpha = composite_reference(cam, splats, bg, 20, 20)
    out = render(cam, cloud, bg, EXACT)
    np.testing.assert_allclose(out.rgb, img, atol=1e-10)
    np.testing.assert_allclose(out.alpha, alpha, atol=1e-10)


def test_default_settings_close_to_exact(rng):
    cam = small_camera(32)
    cloud = random_cloud(rng, 10)
    a = render(cam, cloud, (1, 1, 1), DEFAULT_SETTINGS)
    b = render(cam, cloud, (1, 1, 1), EXACT)
    assert np.abs(a.rgb - b.rgb).max() < 0.02


def test_order_invariance(rng):
    cam = small_camera(32)
    cloud = random_cloud(rng, 12)
    perm = rng.permutation(12)
    a = render(cam, cloud, (1, 1, 1))
    b = render(cam, cloud.take(perm), (1, 1, 1))
    np.testing.assert_array_equal(a.rgb, b.rgb)
    np.testing.assert_array_equal(a.alpha, b.alpha)


def test_worker_count_does_not_change_results(rng):
    cam = small_camera(64)
    cloud = random_cloud(rng, 200, degree=1, scale=(0.01, 0.08))
    up = rng.normal(size=(64, 64, 3))
    ref = render(cam, cloud, (1, 1, 1))
    gref = render_backward(cam, cloud, up, None, (1, 1, 1))
    for workers in (2, 3, 8):
        s = with_workers(DEFAULT_SETTINGS, workers)
        out = render(cam, cloud, (1, 1, 1), s)
        np.testing.assert_array_equal(out.rgb, ref.rgb)
        g = render_backward(cam, cloud, up, None, (1, 1, 1), s)
        for k, v in g.as_dict().items():
            np.testing.assert_array_equal(v, gref.as_dict()[k])


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=25, deadline=None)
def test_alpha_in_unit_interval(seed):
    rng = np.random.default_rng(seed)
    cloud = random_cloud(rng, 8)
    cloud.opacity_logits *= 4
    out = render(small_camera(24), cloud, rng.uniform(0, 1, 3))
    assert np.all(out.alpha >= 0) and np.all(out.alpha <= 1)
    assert np.all(np.isfinite(out.rgb))
    assert np.all(out.rgb >= 0) and np.all(out.rgb <= 1)


def test_zero_upstream_gives_zero_gradients(rng):
    cam = small_camera()
    cloud = random_cloud(rng, 5, degree=2)
    g = render_backward(cam, cloud, np.zeros((32, 32, 3)), np.zeros((32, 32)))
    for v in g.as_dict().values():
        assert np.all(v == 0)


def test_offscreen_splat_gets_zero_gradient(rng):
    cam = small_camera()
    cloud = random_cloud(rng, 4)
    cloud.positions[2] = [30.0, 30.0, 30.0]
    g = render_backward(cam, cloud, rng.normal(size=(32, 32, 3)), rng.normal(size=(32, 32)))
    for v in g.as_dict().values():
        assert np.all(v[2] == 0)
    assert not g.visible[2]


def test_splat_behind_camera_is_culled(rng):
    cam = small_camera()
    cloud = random_cloud(rng, 2)
    cloud.positions[0] = cam.position * 1.5
    alone = render(cam, cloud.take([1]))
    both = render(cam, cloud)
    np.testing.assert_array_equal(alone.rgb, both.rgb)


@pytest.mark.parametrize("degree", [0, 1, 3])
def test_gradients_match_finite_differences(degree):
    rng = np.random.default_rng(100 + degree)
    for _ in range(3):
        res = check_scene(rng, int(rng.integers(1, 8)), degree)
        assert res.ok, res.failures[:5]


def test_gradients_with_default_cutoffs_are_finite(rng):
    cam = small_camera()
    cloud = random_cloud(rng, 10)
    g = render_backward(cam, cloud, rng.normal(size=(32, 32, 3)), None, (1, 1, 1))
    assert g.all_finite()
    assert g.positions.shape == cloud.positions.shape
