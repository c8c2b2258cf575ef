import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import quat_matrix_reference, real_sh_table
from splatsweep.errors import EmptyCloudError, InvalidParameterError, ShapeError
from splatsweep.gsmath import (
    SH_C0,
    GaussianCloud,
    SplatParams,
    build_covariance,
    eval_sh,
    init_cloud_from_points,
    init_cloud_random_sphere,
    logit,
    normalize_quaternions,
    quat_to_rotmat,
    realize,
    rgb_to_sh0,
    sh_basis,
    sigmoid,
)

quats = arrays(np.float64, 4, elements=st.floats(-1, 1)).filter(lambda q: np.linalg.norm(q) > 0.1)
scales = arrays(np.float64, 3, elements=st.floats(0.01, 3.0))


def test_identity_covariance():
    np.testing.assert_array_equal(build_covariance([1, 0, 0, 0], [1, 1, 1]), np.eye(3))


def test_axis_scaled_covariance():
    np.testing.assert_allclose(build_covariance([1, 0, 0, 0], [2, 1, 1]), np.diag([4.0, 1.0, 1.0]))


def test_random_rotation_preserves_eigenvalues(rng):
    q = normalize_quaternions(rng.normal(size=4))
    ev = np.linalg.eigvalsh(build_covariance(q, [0.3, 0.7, 1.1]))
    np.testing.assert_allclose(ev, [0.09, 0.49, 1.21], atol=1e-9)


def test_rotation_matrix_matches_sandwich_product(rng):
    for _ in range(20):
        q = rng.normal(size=4)
        np.testing.assert_allclose(quat_to_rotmat(normalize_quaternions(q)), quat_matrix_reference(q), atol=1e-12)


@given(quats, scales)
@settings(max_examples=200, deadline=None)
def test_covariance_is_spd_with_squared_scale_spectrum(q, s):
    cov = build_covariance(normalize_quaternions(q), s)
    np.testing.assert_allclose(cov, cov.T, atol=1e-12)
    np.linalg.cholesky(cov)
    np.testing.assert_allclose(np.sort(np.linalg.eigvalsh(cov)), np.sort(s**2), rtol=1e-8, atol=1e-12)


def test_covariance_rejects_bad_input():
    with pytest.raises(InvalidParameterError):
        build_covariance([1, 0, 0, 0], [1, np.nan, 1])
    with pytest.raises(InvalidParameterError):
        build_covariance([1, 0, 0, 0], [1, 0, 1])


def test_realize_activations():
    g = realize(SplatParams(np.zeros(3), np.array([2.0, 0, 0, 0]), np.zeros(3), 0.0, np.zeros((1, 3))))
    assert g.opacity == 0.5
    np.testing.assert_allclose(g.covariance, np.eye(3))
    low = realize(SplatParams(np.zeros(3), np.array([1.0, 0, 0, 0]), np.zeros(3), -10.0, np.zeros((1, 3))))
    assert low.opacity < 0.005


@given(st.floats(-30, 30), st.floats(-30, 30))
def test_opacity_monotone_in_logit(a, b):
    if a < b:
        assert sigmoid(a) <= sigmoid(b)
    assert 0.0 <= sigmoid(a) <= 1.0


def test_logit_inverts_sigmoid():
    p = np.linspace(0.01, 0.99, 50)
    np.testing.assert_allclose(sigmoid(logit(p)), p, atol=1e-12)


def test_sh_degree0_constant():
    d = np.array([0.3, -0.2, 0.9])
    d /= np.linalg.norm(d)
    c = np.ones((1, 3))
    np.testing.assert_allclose(eval_sh(c, d), [0.28209479] * 3, atol=1e-8)
    np.testing.assert_array_equal(eval_sh(c, d), eval_sh(c, -d))
    assert abs(SH_C0 - 0.28209479177387814) < 1e-15


def test_sh_degree1_against_tabulated(rng):
    coeffs = rng.normal(size=(4, 3))
    d = np.array([0.0, 0.0, 1.0])
    expected = real_sh_table(d, 1) @ coeffs
    np.testing.assert_allclose(eval_sh(coeffs, d), expected, atol=1e-9)


def test_sh_basis_matches_legendre_table_to_degree3(rng):
    for _ in range(50):
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        np.testing.assert_allclose(sh_basis(d[None], 3)[0], real_sh_table(d, 3), atol=1e-12)


def test_sh_basis_orthonormal_on_sphere():
    # midpoint quadrature on a fine latitude-longitude grid
    n = 400
    theta = (np.arange(n) + 0.5) * np.pi / n
    phi = (np.arange(2 * n) + 0.5) * np.pi / n
    t, p = np.meshgrid(theta, phi, indexing="ij")
    d = np.stack([np.sin(t) * np.cos(p), np.sin(t) * np.sin(p), np.cos(t)], axis=-1)
    y = sh_basis(d, 3)
    w = np.sin(t) * (np.pi / n) ** 2
    gram = np.einsum("ijk,ijl,ij->kl", y, y, w)
    np.testing.assert_allclose(gram, np.eye(16), atol=1e-4)


def test_eval_sh_rejects_bad_coefficient_count():
    with pytest.raises(ShapeError):
        eval_sh(np.zeros((5, 3)), [0, 0, 1])


def test_random_sphere_init():
    c = init_cloud_random_sphere(5000, 0.5, seed=7)
    assert len(c) == 5000
    assert np.all(np.linalg.norm(c.positions, axis=1) <= 0.5)
    np.testing.assert_array_equal(c.rotations, np.tile([1.0, 0, 0, 0], (5000, 1)))
    np.testing.assert_allclose(c.opacities, 0.1)
    np.testing.assert_allclose(c.scales, 0.5 / np.cbrt(5000))
    assert c.equals(init_cloud_random_sphere(5000, 0.5, seed=7))
    assert not c.equals(init_cloud_random_sphere(5000, 0.5, seed=8))


def test_random_sphere_is_uniform_in_volume():
    c = init_cloud_random_sphere(20000, 1.0, seed=3)
    r = np.linalg.norm(c.positions, axis=1)
    # for a uniform ball, P(r < 0.5) = 1/8
    assert abs(np.mean(r < 0.5) - 0.125) < 0.01


def test_random_sphere_rejects_zero_count():
    with pytest.raises(EmptyCloudError):
        init_cloud_random_sphere(0, 1.0, seed=0)


def test_init_from_single_point():
    c = init_cloud_from_points([[0, 0, 0]], [[1, 0, 0]])
    assert len(c) == 1
    np.testing.assert_array_equal(c.positions, [[0, 0, 0]])
    assert np.all(np.isfinite(c.log_scales))


def test_init_from_two_points_uses_nearest_distance():
    c = init_cloud_from_points([[0, 0, 0], [2, 0, 0]], [[1, 0, 0], [0, 1, 0]], k=1)
    np.testing.assert_allclose(c.log_scales, np.log(np.sqrt(2.0)))


def test_init_colors_round_trip(rng):
    pts = rng.normal(size=(30, 3))
    cols = rng.uniform(0, 1, (30, 3))
    c = init_cloud_from_points(pts, cols)
    for d in rng.normal(size=(5, 3)):
        np.testing.assert_allclose(eval_sh(c.sh_coeffs, d / np.linalg.norm(d)), cols, atol=1e-6)
    np.testing.assert_allclose(rgb_to_sh0(cols) * SH_C0, cols, atol=1e-12)


def test_cloud_indexing_and_concat(rng):
    a = init_cloud_random_sphere(4, 1.0, seed=1, sh_degree=1)
    b = a.take([3, 1])
    assert len(a.concat(b)) == 6
    s = a[2]
    np.testing.assert_array_equal(s.position, a.positions[2])
    assert GaussianCloud.empty(sh_degree=1).sh_coeffs.shape == (0, 4, 3)
