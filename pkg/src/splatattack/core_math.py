"""Numerical kernels shared by the renderer and the attacks.

Real spherical harmonics up to degree 3, quaternion algebra, 3D covariance
construction and EWA-style perspective projection. Every function here is
pure; batched variants take a leading splat axis.

SH coefficient layout is band-major, channel-minor: an array of shape
``(16, 3)`` where row ``k`` holds the R, G, B coefficients of basis
function ``k``. Flattened, that is ``[c0_R, c0_G, c0_B, c1_R, ...]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateRotationError, NumericInputError

MAX_SH_DEGREE = 3
SH_BASIS_COUNT = (MAX_SH_DEGREE + 1) ** 2  # 16
SH_COEFF_COUNT = 3 * SH_BASIS_COUNT  # 48

# Real SH normalization constants, same sign convention as the common 3DGS code.
SH_C0 = 0.28209479177387814  # 1 / (2 sqrt(pi))
SH_C1 = 0.4886025119029199  # sqrt(3 / (4 pi))
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)

NEAR_PLANE = 0.01
LOW_PASS = 0.3  # px^2 added to the 2D covariance diagonal


def sh_basis_count(degree: int) -> int:
    if not 0 <= degree <= MAX_SH_DEGREE:
        raise NumericInputError(f"SH degree must be in [0, {MAX_SH_DEGREE}], got {degree}")
    return (degree + 1) ** 2


def sh_basis(dirs: np.ndarray, degree: int = MAX_SH_DEGREE) -> np.ndarray:
    """Evaluate the real SH basis at unit directions.

    ``dirs`` has shape ``(..., 3)``; the result has shape ``(..., (degree+1)**2)``.
    """
    n = sh_basis_count(degree)
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    out = np.empty(dirs.shape[:-1] + (n,), dtype=np.float64)
    out[..., 0] = SH_C0
    if degree >= 1:
        out[..., 1] = -SH_C1 * y
        out[..., 2] = SH_C1 * z
        out[..., 3] = -SH_C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out[..., 4] = SH_C2[0] * x * y
        out[..., 5] = SH_C2[1] * y * z
        out[..., 6] = SH_C2[2] * (2.0 * zz - xx - yy)
        out[..., 7] = SH_C2[3] * x * z
        out[..., 8] = SH_C2[4] * (xx - yy)
    if degree >= 3:
        out[..., 9] = SH_C3[0] * y * (3.0 * xx - yy)
        out[..., 10] = SH_C3[1] * x * y * z
        out[..., 11] = SH_C3[2] * y * (4.0 * zz - xx - yy)
        out[..., 12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
        out[..., 13] = SH_C3[4] * x * (4.0 * zz - xx - yy)
        out[..., 14] = SH_C3[5] * z * (xx - yy)
        out[..., 15] = SH_C3[6] * x * (xx - 3.0 * yy)
    return out


def sh_basis_jacobian(dirs: np.ndarray, degree: int = MAX_SH_DEGREE) -> np.ndarray:
    """Partial derivatives of each basis polynomial w.r.t. (x, y, z).

    The polynomials are differentiated as functions on R^3; callers project
    onto the tangent plane when the direction is itself normalized.
    Result shape ``(..., (degree+1)**2, 3)``.
    """
    n = sh_basis_count(degree)
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    out = np.zeros(dirs.shape[:-1] + (n, 3), dtype=np.float64)
    if degree >= 1:
        out[..., 1, 1] = -SH_C1
        out[..., 2, 2] = SH_C1
        out[..., 3, 0] = -SH_C1
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out[..., 4, 0] = SH_C2[0] * y
        out[..., 4, 1] = SH_C2[0] * x
        out[..., 5, 1] = SH_C2[1] * z
        out[..., 5, 2] = SH_C2[1] * y
        out[..., 6, 0] = SH_C2[2] * -2.0 * x
        out[..., 6, 1] = SH_C2[2] * -2.0 * y
        out[..., 6, 2] = SH_C2[2] * 4.0 * z
        out[..., 7, 0] = SH_C2[3] * z
        out[..., 7, 2] = SH_C2[3] * x
        out[..., 8, 0] = SH_C2[4] * 2.0 * x
        out[..., 8, 1] = SH_C2[4] * -2.0 * y
    if degree >= 3:
        out[..., 9, 0] = SH_C3[0] * 6.0 * x * y
        out[..., 9, 1] = SH_C3[0] * (3.0 * xx - 3.0 * yy)
        out[..., 10, 0] = SH_C3[1] * y * z
        out[..., 10, 1] = SH_C3[1] * x * z
        out[..., 10, 2] = SH_C3[1] * x * y
        out[..., 11, 0] = SH_C3[2] * -2.0 * x * y
        out[..., 11, 1] = SH_C3[2] * (4.0 * zz - xx - 3.0 * yy)
        out[..., 11, 2] = SH_C3[2] * 8.0 * y * z
        out[..., 12, 0] = SH_C3[3] * -6.0 * x * z
        out[..., 12, 1] = SH_C3[3] * -6.0 * y * z
        out[..., 12, 2] = SH_C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy)
        out[..., 13, 0] = SH_C3[4] * (4.0 * zz - 3.0 * xx - yy)
        out[..., 13, 1] = SH_C3[4] * -2.0 * x * y
        out[..., 13, 2] = SH_C3[4] * 8.0 * x * z
        out[..., 14, 0] = SH_C3[5] * 2.0 * x * z
        out[..., 14, 1] = SH_C3[5] * -2.0 * y * z
        out[..., 14, 2] = SH_C3[5] * (xx - yy)
        out[..., 15, 0] = SH_C3[6] * (3.0 * xx - 3.0 * yy)
        out[..., 15, 1] = SH_C3[6] * -6.0 * x * y
    return out


def _check_sh(coeffs: np.ndarray) -> np.ndarray:
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.ndim == 1:
        if coeffs.size % 3 or coeffs.size // 3 not in (1, 4, 9, 16):
            raise NumericInputError(f"SH coefficient count {coeffs.size} is not 3*(L+1)^2")
        coeffs = coeffs.reshape(-1, 3)
    if coeffs.shape[-1] != 3 or coeffs.shape[-2] not in (1, 4, 9, 16):
        raise NumericInputError(f"bad SH coefficient shape {coeffs.shape}")
    if not np.all(np.isfinite(coeffs)):
        raise NumericInputError("SH coefficients must be finite")
    return coeffs


def eval_sh(coeffs, direction, degree: int | None = None) -> np.ndarray:
    """RGB seen along a unit ``direction`` for one splat's SH coefficients.

    ``coeffs`` is either the band-major flat vector of length ``3*(L+1)**2``
    or an array of shape ``((L+1)**2, 3)``. When ``degree`` is given, only
    the first ``(degree+1)**2`` basis functions contribute.
    """
    coeffs = _check_sh(coeffs)
    if degree is None:
        degree = int(round(np.sqrt(coeffs.shape[-2]))) - 1
    n = sh_basis_count(degree)
    if n > coeffs.shape[-2]:
        raise NumericInputError(f"degree {degree} needs {n} basis rows, have {coeffs.shape[-2]}")
    direction = np.asarray(direction, dtype=np.float64)
    if not np.all(np.isfinite(direction)):
        raise NumericInputError("direction must be finite")
    if abs(np.linalg.norm(direction) - 1.0) > 1e-6:
        raise NumericInputError("SH direction must have unit norm")
    basis = sh_basis(direction, degree)
    raw = 0.5 + basis @ coeffs[:n]
    return np.clip(raw, 0.0, 1.0)


def eval_sh_batch(coeffs: np.ndarray, dirs: np.ndarray, degree: int):
    """Batched SH color: returns ``(rgb, raw, basis)`` with clamp applied to ``rgb``."""
    n = sh_basis_count(degree)
    basis = sh_basis(dirs, degree)
    raw = 0.5 + np.einsum("nk,nkc->nc", basis, coeffs[:, :n, :])
    return np.clip(raw, 0.0, 1.0), raw, basis


def normalize_quaternion(q) -> np.ndarray:
    """Unit quaternion (w, x, y, z); batched over leading axes."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.sqrt(np.sum(q * q, axis=-1, keepdims=True))
    if np.any(norm <= 1e-12) or not np.all(np.isfinite(norm)):
        raise DegenerateRotationError("quaternion norm is zero or non-finite")
    # Already-unit inputs pass through untouched so normalizing is idempotent.
    return np.where(np.abs(norm - 1.0) <= 1e-15, q, q / norm)


def quaternion_to_matrix(q) -> np.ndarray:
    """Rotation matrix of a *unit* quaternion (w, x, y, z); shape ``(..., 3, 3)``."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    r = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    r[..., 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    r[..., 0, 1] = 2.0 * (x * y - w * z)
    r[..., 0, 2] = 2.0 * (x * z + w * y)
    r[..., 1, 0] = 2.0 * (x * y + w * z)
    r[..., 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    r[..., 1, 2] = 2.0 * (y * z - w * x)
    r[..., 2, 0] = 2.0 * (x * z - w * y)
    r[..., 2, 1] = 2.0 * (y * z + w * x)
    r[..., 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return r


def quaternion_matrix_vjp(q: np.ndarray, d_r: np.ndarray) -> np.ndarray:
    """Pull ``dL/dR`` back to ``dL/dq`` for unit quaternions, batched."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    g = d_r
    dw = 2.0 * (
        -z * g[..., 0, 1] + y * g[..., 0, 2] + z * g[..., 1, 0]
        - x * g[..., 1, 2] - y * g[..., 2, 0] + x * g[..., 2, 1]
    )
    dx = 2.0 * (
        y * g[..., 0, 1] + z * g[..., 0, 2] + y * g[..., 1, 0] - 2.0 * x * g[..., 1, 1]
        - w * g[..., 1, 2] + z * g[..., 2, 0] + w * g[..., 2, 1] - 2.0 * x * g[..., 2, 2]
    )
    dy = 2.0 * (
        -2.0 * y * g[..., 0, 0] + x * g[..., 0, 1] + w * g[..., 0, 2] + x * g[..., 1, 0]
        + z * g[..., 1, 2] - w * g[..., 2, 0] + z * g[..., 2, 1] - 2.0 * y * g[..., 2, 2]
    )
    dz = 2.0 * (
        -2.0 * z * g[..., 0, 0] - w * g[..., 0, 1] + x * g[..., 0, 2] + w * g[..., 1, 0]
        - 2.0 * z * g[..., 1, 1] + y * g[..., 1, 2] + x * g[..., 2, 0] + y * g[..., 2, 1]
    )
    return np.stack([dw, dx, dy, dz], axis=-1)


def normalize_vjp(q: np.ndarray, d_unit: np.ndarray) -> np.ndarray:
    """Backprop through ``q / |q|``."""
    norm = np.sqrt(np.sum(q * q, axis=-1, keepdims=True))
    unit = q / norm
    radial = np.sum(unit * d_unit, axis=-1, keepdims=True)
    return (d_unit - unit * radial) / norm


def covariance_from(log_scales, rotation) -> np.ndarray:
    """World-space covariance ``R diag(exp(s))^2 R^T``; batched over leading axes.

    ``rotation`` may be unnormalized; a zero quaternion raises
    :class:`DegenerateRotationError`.
    """
    log_scales = np.asarray(log_scales, dtype=np.float64)
    r = quaternion_to_matrix(normalize_quaternion(rotation))
    m = r * np.exp(log_scales)[..., None, :]
    cov = m @ np.swapaxes(m, -1, -2)
    # Exact symmetry regardless of matmul rounding.
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))


@dataclass(frozen=True)
class Projection:
    mean2d: np.ndarray  # (u, v) pixels
    cov2d: np.ndarray  # 2x2, low-pass dilated
    depth: float
    culled: bool = False


def projection_jacobian(t_cam, fx: float, fy: float) -> np.ndarray:
    """Jacobian of the pinhole map ``(x, y, z) -> (fx x/z + cx, fy y/z + cy)``."""
    tx, ty, tz = (np.asarray(t_cam, dtype=np.float64)[..., i] for i in range(3))
    j = np.zeros(np.shape(tx) + (2, 3), dtype=np.float64)
    j[..., 0, 0] = fx / tz
    j[..., 0, 2] = -fx * tx / (tz * tz)
    j[..., 1, 1] = fy / tz
    j[..., 1, 2] = -fy * ty / (tz * tz)
    return j


def project_point(t_cam, fx: float, fy: float, cx: float, cy: float) -> np.ndarray:
    t = np.asarray(t_cam, dtype=np.float64)
    return np.stack([fx * t[..., 0] / t[..., 2] + cx, fy * t[..., 1] / t[..., 2] + cy], axis=-1)


def project_gaussian(mean, cov, cam, near: float = NEAR_PLANE) -> Projection:
    """Project a world-space Gaussian through ``cam`` (anything with fx, fy, cx, cy, world_to_camera)."""
    w2c = np.asarray(cam.world_to_camera, dtype=np.float64)
    rot, trans = w2c[:3, :3], w2c[:3, 3]
    t = rot @ np.asarray(mean, dtype=np.float64) + trans
    if t[2] <= near:
        return Projection(np.full(2, np.nan), np.full((2, 2), np.nan), float(t[2]), culled=True)
    j = projection_jacobian(t, cam.fx, cam.fy)
    m = j @ rot
    cov2d = m @ np.asarray(cov, dtype=np.float64) @ m.T
    cov2d = 0.5 * (cov2d + cov2d.T) + LOW_PASS * np.eye(2)
    mean2d = project_point(t, cam.fx, cam.fy, cam.cx, cam.cy)
    return Projection(mean2d, cov2d, float(t[2]))
