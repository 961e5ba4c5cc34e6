import logging
from typing import Sequence

import numpy as np
from scipy.linalg import expm
from scipy.spatial.transform import Rotation

from ..errors import DegenerateInput
from ..models.geometry import ColoredPointCloud, TransformSim3

logger = logging.getLogger(__name__)

# Below this angle the closed-form SE(3) coefficients lose precision
# and their Taylor expansions are used instead.
_SMALL_ANGLE = 1e-2


def skew(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix [v]x, batched over leading dimensions"""
    v = np.asarray(v, dtype=np.float64)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def so3_exp(rotvec: np.ndarray) -> np.ndarray:
    """Rotation vector(s) to rotation matrix/matrices"""
    return Rotation.from_rotvec(np.asarray(rotvec, dtype=np.float64)).as_matrix()


def so3_log(rotation: np.ndarray) -> np.ndarray:
    """Rotation matrix/matrices to rotation vector(s)"""
    return Rotation.from_matrix(np.asarray(rotation, dtype=np.float64)).as_rotvec()


def geodesic_angle(rot_a: np.ndarray, rot_b: np.ndarray) -> float:
    """Angle in radians of the relative rotation Raᵀ·Rb"""
    return float(np.linalg.norm(so3_log(np.asarray(rot_a).T @ np.asarray(rot_b))))


def _left_jacobian_terms(phi: np.ndarray):
    theta = np.linalg.norm(phi, axis=-1)
    small = theta < _SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    th2 = theta * theta

    half_sin = np.sin(safe / 2.0)
    a_exact = 2.0 * half_sin * half_sin / (safe * safe)
    b_exact = (safe - np.sin(safe)) / (safe ** 3)
    c_exact = (1.0 - (safe / 2.0) / np.tan(safe / 2.0)) / (safe * safe)

    a = np.where(small, 0.5 - th2 / 24.0 + th2 * th2 / 720.0, a_exact)
    b = np.where(small, 1.0 / 6.0 - th2 / 120.0 + th2 * th2 / 5040.0, b_exact)
    c = np.where(small, 1.0 / 12.0 + th2 / 720.0 + th2 * th2 / 30240.0, c_exact)
    return a, b, c


def se3_exp(xi: np.ndarray):
    """Tangent vector(s) [rho, phi] -> (rotation, translation), batched"""
    xi = np.asarray(xi, dtype=np.float64)
    rho, phi = xi[..., :3], xi[..., 3:]
    a, b, _ = _left_jacobian_terms(phi)
    k = skew(phi)
    k2 = k @ k
    eye = np.broadcast_to(np.eye(3), k.shape)
    v = eye + a[..., None, None] * k + b[..., None, None] * k2
    rotation = so3_exp(phi)
    translation = np.einsum("...ij,...j->...i", v, rho)
    return rotation, translation


def se3_log(rotation: np.ndarray, translation: np.ndarray) -> np.ndarray:
    """(rotation, translation) -> tangent vector(s) [rho, phi], batched"""
    phi = so3_log(rotation)
    _, _, c = _left_jacobian_terms(phi)
    k = skew(phi)
    k2 = k @ k
    eye = np.broadcast_to(np.eye(3), k.shape)
    v_inv = eye - 0.5 * k + c[..., None, None] * k2
    rho = np.einsum("...ij,...j->...i", v_inv, np.asarray(translation, dtype=np.float64))
    return np.concatenate([rho, phi], axis=-1)


def se3_adjoint(rotation: np.ndarray, translation: np.ndarray) -> np.ndarray:
    """6x6 adjoint [[R, [t]x·R], [0, R]] for [rho, phi] tangents, batched"""
    rotation = np.asarray(rotation, dtype=np.float64)
    out = np.zeros(rotation.shape[:-2] + (6, 6))
    out[..., :3, :3] = rotation
    out[..., :3, 3:] = skew(translation) @ rotation
    out[..., 3:, 3:] = rotation
    return out


def se3_right_jacobian_inverse(xi: np.ndarray) -> np.ndarray:
    """
    Inverse right Jacobian of SE(3), so that log(exp(xi)·exp(d)) ≈ xi + J⁻¹·d

    Args:
        xi: (..., 6) tangent vectors [rho, phi]

    Returns:
        (..., 6, 6) matrices
    """
    xi = np.asarray(xi, dtype=np.float64)
    rho_hat, phi_hat = skew(xi[..., :3]), skew(xi[..., 3:])
    ad = np.zeros(xi.shape[:-1] + (6, 6))
    ad[..., :3, :3] = phi_hat
    ad[..., :3, 3:] = rho_hat
    ad[..., 3:, 3:] = phi_hat
    # expm([[A, I], [0, 0]]) holds Σ Aⁿ/(n+1)! in its top-right block; with A = −ad that is J_r
    block = np.zeros(xi.shape[:-1] + (12, 12))
    block[..., :6, :6] = -ad
    block[..., :6, 6:] = np.eye(6)
    right_jacobian = expm(block)[..., :6, 6:]
    return np.linalg.inv(right_jacobian)


def project_to_so3(matrix: np.ndarray) -> np.ndarray:
    """Frobenius-nearest proper rotation: U·diag(1, 1, det(UVᵀ))·Vᵀ"""
    m = np.asarray(matrix, dtype=np.float64)
    if m.shape != (3, 3) or not np.all(np.isfinite(m)):
        raise DegenerateInput("projection needs a finite 3x3 matrix")
    u, sigma, vt = np.linalg.svd(m)
    if sigma[0] <= 1e-15:
        raise DegenerateInput("cannot project the zero matrix onto SO(3)")
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def umeyama_sim3(src: np.ndarray, tgt: np.ndarray) -> TransformSim3:
    """
    Least-squares similarity transform mapping src onto tgt

    Args:
        src: (N, 3) source points
        tgt: (N, 3) corresponding target points

    Returns:
        TransformSim3 minimizing Σ‖tgt_i − (s·R·src_i + t)‖²
    """
    x = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    y = np.asarray(tgt, dtype=np.float64).reshape(-1, 3)
    if x.shape != y.shape:
        raise DegenerateInput(f"point sets differ in size: {x.shape} vs {y.shape}")
    n = x.shape[0]
    if n < 3:
        raise DegenerateInput(f"Umeyama needs at least 3 pairs, got {n}")

    mu_x = x.mean(axis=0)
    mu_y = y.mean(axis=0)
    xc = x - mu_x
    yc = y - mu_y

    var_x = np.sum(xc * xc) / n
    if var_x <= 1e-300 or np.ptp(x, axis=0).max() == 0.0:
        raise DegenerateInput("source points are all coincident")

    cov = yc.T @ xc / n
    u, d, vt = np.linalg.svd(cov)
    s_fix = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s_fix[2] = -1.0
    rotation = u @ np.diag(s_fix) @ vt
    scale = float(np.dot(d, s_fix) / var_x)
    if scale <= 0:
        raise DegenerateInput("target points collapse to a single location")
    translation = mu_y - scale * rotation @ mu_x
    return TransformSim3(scale=scale, rotation=rotation, translation=translation)


def pca_linearity(positions: Sequence) -> float:
    """Linearity 1 − (λ2 + λ3)/λ1 of a point sequence's centered covariance"""
    pts = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] < 2 or np.ptp(pts, axis=0).max() == 0.0:
        raise DegenerateInput("linearity needs at least two distinct points")
    centered = pts - pts.mean(axis=0)
    cov = centered.T @ centered / pts.shape[0]
    eigvals = np.clip(np.linalg.eigvalsh(cov)[::-1], 0.0, None)
    if eigvals[0] <= 0.0:
        raise DegenerateInput("covariance has no spread")
    return float(1.0 - (eigvals[1] + eigvals[2]) / eigvals[0])


def apply_sim3(transform: TransformSim3, cloud: ColoredPointCloud) -> ColoredPointCloud:
    return cloud.with_positions(transform.apply(cloud.positions))


def bbox_diagonal(positions: np.ndarray) -> float:
    pts = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] == 0:
        return 0.0
    return float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))
