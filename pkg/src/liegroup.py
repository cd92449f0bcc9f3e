"""
Closed-form Lie group operations used by the filters.

Groups covered:
- SO(3) rotations (plain 3x3 arrays)
- SE_{2+K}(3) extended poses and the block-diagonal group SE_{2+K}^M(3)
  (one extended pose over 2+K+M vectors plus M extra rotations)
- SE(3) poses, handled as the one-vector, zero-extra-rotation case

Tangent vectors are ordered [theta_0, phi_1..phi_n, theta_1..theta_M],
n = 2+K+M, so their length is 3 + 3n + 3M.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import polar

logger = logging.getLogger(__name__)

SMALL_ANGLE = 1e-7
NEAR_PI = 1e-4
ORTHO_RESIDUAL = 1e-9
ROTATION_TOL = 1e-6


class LieGroupError(ValueError):
    """Invalid rotation, block structure or tangent dimension."""


# --- SO(3) ---

def skew(v):
    """3-vector -> 3x3 skew-symmetric matrix, (v)x."""
    x, y, z = np.asarray(v, dtype=float).reshape(3)
    return np.array([[0.0, -z, y],
                     [z, 0.0, -x],
                     [-y, x, 0.0]])


def vee(S):
    """Inverse of skew, reads the lower-left entries."""
    S = np.asarray(S, dtype=float)
    return np.array([S[2, 1], S[0, 2], S[1, 0]])


def rotation_residual(R):
    R = np.asarray(R, dtype=float)
    return np.linalg.norm(R.T @ R - np.eye(3))


def is_rotation(R, tol=1e-9):
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        return False
    return rotation_residual(R) <= tol and abs(np.linalg.det(R) - 1.0) <= tol


def check_rotation(R, tol=ROTATION_TOL):
    """Returns R as a float array or raises LieGroupError."""
    R = np.asarray(R, dtype=float)
    if not is_rotation(R, tol):
        raise LieGroupError(f"not a rotation matrix (orthogonality residual "
                            f"{rotation_residual(R) if R.shape == (3, 3) else 'n/a'})")
    return R


def nearest_rotation(R):
    """Polar-decomposition projection onto SO(3)."""
    U, _ = polar(np.asarray(R, dtype=float))
    if np.linalg.det(U) < 0:
        raise LieGroupError("matrix is closer to a reflection than a rotation")
    return U


def so3_exp(w):
    """Rodrigues formula, Taylor coefficients below SMALL_ANGLE."""
    w = np.asarray(w, dtype=float).reshape(3)
    angle = np.linalg.norm(w)
    W = skew(w)
    if angle < SMALL_ANGLE:
        a = 1.0 - angle ** 2 / 6.0
        b = 0.5 - angle ** 2 / 24.0
    else:
        a = np.sin(angle) / angle
        b = (1.0 - np.cos(angle)) / angle ** 2
    return np.eye(3) + a * W + b * (W @ W)


def so3_log(R):
    """Principal logarithm, norm of the result is at most pi."""
    R = check_rotation(R)
    cos_angle = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    w = vee(R - R.T) / 2.0  # sin(angle) * axis
    sin_angle = np.linalg.norm(w)
    angle = np.arctan2(sin_angle, cos_angle)

    if angle < SMALL_ANGLE:
        return w * (1.0 + angle ** 2 / 6.0)

    if np.pi - angle < NEAR_PI:
        # (R + R^T)/2 - cos(angle) I = (1 - cos(angle)) a a^T
        S = (R + R.T) / 2.0 - cos_angle * np.eye(3)
        k = int(np.argmax(np.diag(S)))
        axis = S[:, k] / np.sqrt((1.0 - cos_angle) * S[k, k])
        if axis @ w < 0:
            axis = -axis
        return axis * angle

    return w * (angle / sin_angle)


def so3_left_jacobian(w):
    """J_l(w) = sum_k (w)x^k / (k+1)!."""
    w = np.asarray(w, dtype=float).reshape(3)
    angle = np.linalg.norm(w)
    W = skew(w)
    if angle < SMALL_ANGLE:
        b = 0.5 - angle ** 2 / 24.0
        c = 1.0 / 6.0 - angle ** 2 / 120.0
    else:
        b = (1.0 - np.cos(angle)) / angle ** 2
        c = (angle - np.sin(angle)) / angle ** 3
    return np.eye(3) + b * W + c * (W @ W)


def skew_batch(W):
    """(m, 3) vectors -> (m, 3, 3) skew-symmetric matrices."""
    W = np.asarray(W, dtype=float).reshape(-1, 3)
    S = np.zeros((len(W), 3, 3))
    S[:, 0, 1], S[:, 0, 2] = -W[:, 2], W[:, 1]
    S[:, 1, 0], S[:, 1, 2] = W[:, 2], -W[:, 0]
    S[:, 2, 0], S[:, 2, 1] = -W[:, 1], W[:, 0]
    return S


def _series_coefficients(W):
    angle = np.linalg.norm(W, axis=1)
    small = angle < SMALL_ANGLE
    t = np.where(small, 1.0, angle)
    a = np.where(small, 1.0 - angle ** 2 / 6.0, np.sin(t) / t)
    b = np.where(small, 0.5 - angle ** 2 / 24.0, (1.0 - np.cos(t)) / t ** 2)
    c = np.where(small, 1.0 / 6.0 - angle ** 2 / 120.0, (t - np.sin(t)) / t ** 3)
    return a[:, None, None], b[:, None, None], c[:, None, None]


def so3_exp_batch(W):
    """so3_exp over the rows of an (m, 3) array."""
    W = np.asarray(W, dtype=float).reshape(-1, 3)
    S = skew_batch(W)
    a, b, _ = _series_coefficients(W)
    return np.eye(3) + a * S + b * (S @ S)


def so3_left_jacobian_batch(W):
    W = np.asarray(W, dtype=float).reshape(-1, 3)
    S = skew_batch(W)
    _, b, c = _series_coefficients(W)
    return np.eye(3) + b * S + c * (S @ S)


def so3_left_jacobian_inv(w):
    w = np.asarray(w, dtype=float).reshape(3)
    angle = np.linalg.norm(w)
    W = skew(w)
    if angle < SMALL_ANGLE:
        c = 1.0 / 12.0 + angle ** 2 / 720.0
    else:
        half = angle / 2.0
        c = 1.0 / angle ** 2 - np.cos(half) / (2.0 * angle * np.sin(half))
    return np.eye(3) - 0.5 * W + c * (W @ W)


# --- SE_{2+K}^M(3) ---

@dataclass(frozen=True, eq=False)
class GroupElement:
    """
    Structured element of SE_{2+K}^M(3).

    rotation: 3x3 rotation of the extended-pose block
    vectors: (n, 3) array, n = 2+K+M vector slots (velocity, position,
             K feature positions, then M extra vectors)
    extra_rotations: (M, 3, 3) rotations of the block-diagonal tail
    """
    rotation: np.ndarray
    vectors: np.ndarray
    extra_rotations: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float)
        V = np.asarray(self.vectors, dtype=float).reshape(-1, 3)
        E = np.asarray(self.extra_rotations, dtype=float).reshape(-1, 3, 3)
        if R.shape != (3, 3):
            raise LieGroupError(f"rotation must be 3x3, got {R.shape}")
        if len(V) < len(E):
            raise LieGroupError("each extra rotation needs its own vector slot")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "vectors", V)
        object.__setattr__(self, "extra_rotations", E)

    @property
    def n_vectors(self):
        return len(self.vectors)

    @property
    def M(self):
        return len(self.extra_rotations)

    @property
    def K(self):
        return self.n_vectors - 2 - self.M

    @property
    def dim(self):
        return tangent_dim(self.n_vectors, self.M)

    @classmethod
    def identity(cls, K=0, M=1):
        n = 2 + K + M
        return cls(np.eye(3), np.zeros((n, 3)), np.tile(np.eye(3), (M, 1, 1)))

    @classmethod
    def pose(cls, R, p):
        """SE(3) element: one vector slot, no extra rotation."""
        return cls(R, np.reshape(p, (1, 3)), np.zeros((0, 3, 3)))

    def matrix(self):
        """Dense block-diagonal embedding (tests and debugging only)."""
        n, M = self.n_vectors, self.M
        size = 3 + n + 3 * M
        T = np.zeros((size, size))
        T[:3, :3] = self.rotation
        T[:3, 3:3 + n] = self.vectors.T
        T[3:3 + n, 3:3 + n] = np.eye(n)
        for j, Rj in enumerate(self.extra_rotations):
            o = 3 + n + 3 * j
            T[o:o + 3, o:o + 3] = Rj
        return T

    @classmethod
    def from_matrix(cls, T, n_vectors, M):
        T = np.asarray(T, dtype=float)
        size = 3 + n_vectors + 3 * M
        if T.shape != (size, size):
            raise LieGroupError(f"expected {size}x{size} embedding, got {T.shape}")
        extra = [T[3 + n_vectors + 3 * j:6 + n_vectors + 3 * j,
                   3 + n_vectors + 3 * j:6 + n_vectors + 3 * j] for j in range(M)]
        return cls(T[:3, :3], T[:3, 3:3 + n_vectors].T, np.array(extra).reshape(-1, 3, 3))

    def orthogonality_residual(self):
        residuals = [rotation_residual(self.rotation)]
        residuals += [rotation_residual(Rj) for Rj in self.extra_rotations]
        return max(residuals)

    def normalized(self):
        """Re-projects every rotation onto SO(3) when drift exceeds ORTHO_RESIDUAL."""
        if self.orthogonality_residual() <= ORTHO_RESIDUAL:
            return self
        logger.debug("re-orthonormalizing group element (residual %.2e)",
                     self.orthogonality_residual())
        extra = np.array([nearest_rotation(Rj) for Rj in self.extra_rotations]).reshape(-1, 3, 3)
        return GroupElement(nearest_rotation(self.rotation), self.vectors, extra)


def tangent_dim(n_vectors, M):
    return 3 + 3 * n_vectors + 3 * M


def _split(xi, n_vectors, M):
    xi = np.asarray(xi, dtype=float).reshape(-1)
    if xi.size != tangent_dim(n_vectors, M):
        raise LieGroupError(f"tangent vector has {xi.size} entries, expected "
                            f"{tangent_dim(n_vectors, M)}")
    theta0 = xi[:3]
    phis = xi[3:3 + 3 * n_vectors].reshape(n_vectors, 3)
    thetas = xi[3 + 3 * n_vectors:].reshape(M, 3)
    return theta0, phis, thetas


def _exp(xi, n_vectors, M):
    theta0, phis, thetas = _split(xi, n_vectors, M)
    J = so3_left_jacobian(theta0)
    extra = np.array([so3_exp(t) for t in thetas]).reshape(-1, 3, 3)
    return GroupElement(so3_exp(theta0), phis @ J.T, extra)


def _log(X):
    theta0 = so3_log(X.rotation)
    Jinv = so3_left_jacobian_inv(theta0)
    phis = X.vectors @ Jinv.T
    thetas = [so3_log(Rj) for Rj in X.extra_rotations]
    return np.concatenate([theta0, phis.reshape(-1), np.reshape(thetas, -1)])


def group_exp(xi, K=0, M=1):
    """Exponential of SE_{2+K}^M(3): left-Jacobian columns plus independent SO(3) tail."""
    return _exp(xi, 2 + K + M, M)


def group_log(X):
    """Blockwise logarithm; inverse of group_exp on |theta| < pi."""
    if not isinstance(X, GroupElement):
        raise LieGroupError("group_log expects a GroupElement")
    return _log(X)


def se3_exp(xi):
    """xi = [theta, rho] -> SE(3) element."""
    return _exp(xi, 1, 0)


def se3_log(X):
    if X.n_vectors != 1 or X.M != 0:
        raise LieGroupError("se3_log expects a single-vector pose")
    return _log(X)


def group_hat(xi, n_vectors, M):
    """Dense Lie-algebra matrix with the block-diagonal sparsity of the group."""
    theta0, phis, thetas = _split(xi, n_vectors, M)
    size = 3 + n_vectors + 3 * M
    A = np.zeros((size, size))
    A[:3, :3] = skew(theta0)
    A[:3, 3:3 + n_vectors] = phis.T
    for j, t in enumerate(thetas):
        o = 3 + n_vectors + 3 * j
        A[o:o + 3, o:o + 3] = skew(t)
    return A


def group_vee(A, n_vectors, M):
    A = np.asarray(A, dtype=float)
    parts = [vee(A[:3, :3]), A[:3, 3:3 + n_vectors].T.reshape(-1)]
    for j in range(M):
        o = 3 + n_vectors + 3 * j
        parts.append(vee(A[o:o + 3, o:o + 3]))
    return np.concatenate(parts)


def _check_compatible(X1, X2):
    if X1.n_vectors != X2.n_vectors or X1.M != X2.M:
        raise LieGroupError(f"shape mismatch: ({X1.n_vectors}, {X1.M}) vs ({X2.n_vectors}, {X2.M})")


def compose(X1, X2):
    _check_compatible(X1, X2)
    R = X1.rotation @ X2.rotation
    V = X2.vectors @ X1.rotation.T + X1.vectors
    extra = np.einsum("mij,mjk->mik", X1.extra_rotations, X2.extra_rotations)
    return GroupElement(R, V, extra).normalized()


def inverse(X):
    Rt = X.rotation.T
    V = -(X.vectors @ Rt.T)
    extra = np.transpose(X.extra_rotations, (0, 2, 1))
    return GroupElement(Rt, V, extra)


def adjoint(X):
    """Ad_X with hat(Ad_X xi) = X hat(xi) X^-1."""
    n, M = X.n_vectors, X.M
    R = X.rotation
    Ad = np.zeros((tangent_dim(n, M), tangent_dim(n, M)))
    Ad[:3, :3] = R
    for i, v in enumerate(X.vectors):
        o = 3 + 3 * i
        Ad[o:o + 3, :3] = skew(v) @ R
        Ad[o:o + 3, o:o + 3] = R
    base = 3 + 3 * n
    for j, Rj in enumerate(X.extra_rotations):
        o = base + 3 * j
        Ad[o:o + 3, o:o + 3] = Rj
    return Ad
