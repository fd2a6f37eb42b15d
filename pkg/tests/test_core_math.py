import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from splatattack.core_math import (
    LOW_PASS,
    SH_C0,
    SH_C1,
    covariance_from,
    eval_sh,
    normalize_quaternion,
    project_gaussian,
    project_point,
    projection_jacobian,
    quaternion_to_matrix,
    sh_basis,
    sh_basis_count,
)
from splatattack.errors import DegenerateRotationError, NumericInputError
from splatattack.scene import Camera, look_at_camera

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def unit_dirs(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


# --- spherical harmonics


def test_band_constants_match_closed_form():
    assert SH_C0 == pytest.approx(1.0 / (2.0 * math.sqrt(math.pi)), abs=1e-15)
    assert SH_C1 == pytest.approx(math.sqrt(3.0 / (4.0 * math.pi)), abs=1e-15)


def test_zero_coefficients_give_mid_gray():
    out = eval_sh(np.zeros(3), np.array([0.0, 0.6, 0.8]), degree=0)
    assert out.tolist() == [0.5, 0.5, 0.5]


def test_degree_zero_ignores_direction():
    c = np.array([0.3, -0.7, 1.1])
    a = eval_sh(c, np.array([1.0, 0.0, 0.0]), degree=0)
    b = eval_sh(c, np.array([0.0, -0.6, 0.8]), degree=0)
    assert np.array_equal(a, b)


def test_z_band_red_is_symmetric_about_half():
    c = np.zeros(12)
    c[2 * 3 + 0] = 1.0  # basis index 2 is the z-linear function, channel R
    up = eval_sh(c, np.array([0.0, 0.0, 1.0]), degree=1)
    down = eval_sh(c, np.array([0.0, 0.0, -1.0]), degree=1)
    y = math.sqrt(3.0 / (4.0 * math.pi))
    assert up[0] == pytest.approx(0.5 + y, abs=1e-15)
    assert down[0] == pytest.approx(0.5 - y, abs=1e-15)
    assert up[1] == up[2] == down[1] == down[2] == 0.5


def test_basis_is_orthonormal_monte_carlo():
    rng = np.random.default_rng(0)
    dirs = unit_dirs(rng, 1_000_000)
    y = sh_basis(dirs, 3)
    gram = 4.0 * np.pi * (y.T @ y) / len(dirs)
    assert np.abs(gram - np.eye(16)).max() < 0.02


def test_flat_and_table_layouts_agree():
    rng = np.random.default_rng(1)
    table = rng.normal(size=(16, 3))
    d = unit_dirs(rng, 1)[0]
    assert np.array_equal(eval_sh(table, d), eval_sh(table.ravel(), d))


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_non_finite_coefficient_rejected(bad):
    c = np.zeros(48)
    c[5] = bad
    with pytest.raises(NumericInputError):
        eval_sh(c, np.array([0.0, 0.0, 1.0]))


def test_non_unit_direction_rejected():
    with pytest.raises(NumericInputError):
        eval_sh(np.zeros(3), np.array([0.0, 0.0, 1.1]), degree=0)


def test_degree_out_of_range_rejected():
    with pytest.raises(NumericInputError):
        sh_basis_count(4)


def test_degree_zero_constant_over_random_directions():
    c = np.array([0.25, -1.5, 0.75])
    dirs = unit_dirs(np.random.default_rng(2), 1000)
    first = eval_sh(c, dirs[0], degree=0)
    for d in dirs[1:]:
        assert np.array_equal(eval_sh(c, d, degree=0), first)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, 48, elements=finite), arrays(np.float64, 3, elements=st.floats(-1, 1)))
def test_output_always_in_unit_range(coeffs, v):
    n = np.linalg.norm(v)
    d = v / n if n > 1e-3 else np.array([0.0, 0.0, 1.0])
    out = eval_sh(coeffs, d)
    assert np.all(out >= 0.0) and np.all(out <= 1.0)


# --- quaternions and covariance


def test_identity_rotation_unit_scale_is_identity():
    assert np.array_equal(covariance_from(np.zeros(3), np.array([1.0, 0, 0, 0])), np.eye(3))


def test_quarter_turn_about_z_moves_variance_to_y():
    c, s = math.cos(math.pi / 4), math.sin(math.pi / 4)
    cov = covariance_from(np.array([math.log(2.0), 0.0, 0.0]), np.array([c, 0.0, 0.0, s]))
    assert cov[0, 0] == pytest.approx(1.0, abs=1e-12)
    assert cov[1, 1] == pytest.approx(4.0, abs=1e-12)
    assert cov[2, 2] == pytest.approx(1.0, abs=1e-12)
    assert abs(cov[0, 1]) < 1e-12


def test_zero_quaternion_is_degenerate():
    with pytest.raises(DegenerateRotationError):
        covariance_from(np.zeros(3), np.zeros(4))


def test_covariance_symmetric_psd_with_exact_eigenvalues():
    rng = np.random.default_rng(3)
    for _ in range(1000):
        s = rng.uniform(-3, 1, 3)
        q = rng.normal(size=4)
        cov = covariance_from(s, q)
        assert np.array_equal(cov, cov.T)
        eig = np.linalg.eigvalsh(cov)
        assert eig.min() >= -1e-9
        assert np.allclose(np.sort(eig), np.sort(np.exp(2 * s)), rtol=0, atol=1e-9)


def test_rotation_matrix_orthonormal():
    rng = np.random.default_rng(4)
    for q in rng.normal(size=(100, 4)):
        r = quaternion_to_matrix(normalize_quaternion(q))
        assert np.abs(r @ r.T - np.eye(3)).max() < 1e-12
        assert np.linalg.det(r) == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=300, deadline=None)
@given(arrays(np.float64, 4, elements=st.floats(-1e3, 1e3)).filter(lambda q: np.linalg.norm(q) > 1e-6))
def test_normalization_idempotent(q):
    once = normalize_quaternion(q)
    assert np.array_equal(normalize_quaternion(once), once)


# --- projection


def _axis_camera():
    return Camera("axis", 64, 48, 50.0, 55.0, 31.5, 23.25, np.eye(4))


def test_axis_point_lands_on_principal_point():
    cam = _axis_camera()
    p = project_gaussian(np.array([0.0, 0.0, 3.0]), np.eye(3) * 0.01, cam)
    assert not p.culled
    assert p.mean2d.tolist() == [31.5, 23.25]
    assert p.depth == 3.0


def test_point_behind_camera_is_culled():
    p = project_gaussian(np.array([0.0, 0.0, -1.0]), np.eye(3), _axis_camera())
    assert p.culled


def test_cov2d_is_projected_covariance_plus_low_pass():
    rng = np.random.default_rng(5)
    cam = look_at_camera("c", (3.0, 1.0, 2.0), width=32, height=32)
    for _ in range(50):
        mean = rng.uniform(-0.5, 0.5, 3)
        cov = covariance_from(rng.uniform(-3, -1, 3), rng.normal(size=4))
        p = project_gaussian(mean, cov, cam)
        r = cam.world_to_camera[:3, :3]
        t = r @ mean + cam.world_to_camera[:3, 3]
        j = projection_jacobian(t, cam.fx, cam.fy)
        expect = j @ r @ cov @ r.T @ j.T + LOW_PASS * np.eye(2)
        assert np.allclose(p.cov2d, expect, atol=1e-12)
        assert np.array_equal(p.cov2d, p.cov2d.T)
        assert np.linalg.eigvalsh(p.cov2d).min() >= LOW_PASS - 1e-12


def test_projection_jacobian_matches_finite_differences():
    rng = np.random.default_rng(6)
    fx, fy, cx, cy = 40.0, 44.0, 16.0, 15.0
    h = 1e-5
    for _ in range(100):
        t = np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(1.0, 5.0)])
        j = projection_jacobian(t, fx, fy)
        fd = np.zeros((2, 3))
        for k in range(3):
            e = np.zeros(3)
            e[k] = h
            fd[:, k] = (project_point(t + e, fx, fy, cx, cy) - project_point(t - e, fx, fy, cx, cy)) / (2 * h)
        assert np.abs(fd - j).max() < 1e-4
