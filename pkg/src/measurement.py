"""
Camera model and observation Jacobians for local (MSCKF) features, map
features seen from the current frame and map features seen from map
keyframes, in both error charts. Also feature null-space projection and
the observability-constrained projection of current-frame map rows.

Sign convention for every Jacobian here: the residual r = y - h(x_hat)
satisfies r ~= -H eps + noise, where eps is the estimate-minus-truth
error of the state chart. Feature columns are returned separately so the
caller can project them out.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import block_diag, null_space, orth

from liegroup import skew
from state import INVARIANT, StateError, StateLayout

logger = logging.getLogger(__name__)

NULL_SPACE_RCOND = 1e-10
OC_RCOND = 1e-12


class MeasurementError(ValueError):
    """Invalid observation geometry or an unusable state for this observation."""


class BehindCameraError(MeasurementError):
    pass


class FeatureRejected(MeasurementError):
    """Rank-deficient feature geometry; the feature is dropped."""


@dataclass(frozen=True)
class PinholeCamera:
    fx: float = 400.0
    fy: float = 400.0
    cx: float = 376.0
    cy: float = 240.0
    width: int = 752
    height: int = 480
    sigma_px: float = 1.0
    z_min: float = 0.05

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise MeasurementError("focal lengths must be positive")

    def project(self, p_C):
        p_C = np.asarray(p_C, dtype=float)
        if p_C[2] <= self.z_min:
            raise BehindCameraError(f"point at depth {p_C[2]:.3f} m is behind the camera")
        return np.array([self.fx * p_C[0] / p_C[2] + self.cx,
                         self.fy * p_C[1] / p_C[2] + self.cy])

    def jacobian(self, p_C):
        """d(u, v)/d(p_C), 2x3."""
        x, y, z = p_C
        return np.array([[self.fx / z, 0.0, -self.fx * x / z ** 2],
                         [0.0, self.fy / z, -self.fy * y / z ** 2]])

    def project_with_jacobian(self, p_C):
        return self.project(p_C), self.jacobian(p_C)

    def in_image(self, uv):
        return 0.0 <= uv[0] < self.width and 0.0 <= uv[1] < self.height

    def normalized(self, uv):
        return np.array([(uv[0] - self.cx) / self.fx, (uv[1] - self.cy) / self.fy])

    def noise_cov(self, n_rows, sigma_px=None):
        sigma = self.sigma_px if sigma_px is None else sigma_px
        return np.eye(n_rows) * sigma ** 2


@dataclass(frozen=True)
class PixelMeasurement:
    u: float
    v: float
    frame_id: float
    feature_id: int

    @property
    def uv(self):
        return np.array([self.u, self.v])


@dataclass(frozen=True)
class FeatureTrack:
    """Observations of one local feature: tuple of (clone timestamp, uv)."""
    feature_id: int
    observations: tuple

    def __len__(self):
        return len(self.observations)


@dataclass(frozen=True)
class MapMatch:
    feature_id: int
    p_GF: np.ndarray
    current_uv: np.ndarray
    keyframe_obs: tuple

    def __post_init__(self):
        if not self.keyframe_obs:
            raise MeasurementError(f"map match {self.feature_id} has no keyframe observation")


@dataclass(frozen=True, eq=False)
class StackedResidual:
    r: np.ndarray
    H: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        if not (len(self.r) == self.H.shape[0] == self.V.shape[0] == self.V.shape[1]):
            raise MeasurementError("residual, Jacobian and noise row counts disagree")

    @property
    def rows(self):
        return len(self.r)

    @classmethod
    def stack(cls, residuals, n_cols):
        residuals = [sr for sr in residuals if sr is not None and sr.rows]
        if not residuals:
            return cls(np.zeros(0), np.zeros((0, n_cols)), np.zeros((0, 0)))
        return cls(np.concatenate([sr.r for sr in residuals]),
                   np.vstack([sr.H for sr in residuals]),
                   block_diag(*[sr.V for sr in residuals]))


def camera_pose(R_LI, p_LI, extrinsic):
    """Pose of the camera in the frame of (R_LI, p_LI)."""
    return R_LI @ extrinsic.R_IC, R_LI @ extrinsic.p_IC + p_LI


def _extrinsic_blocks(state, H, J, b):
    """Columns of the camera-from-IMU extrinsic; b is the point in the IMU frame."""
    ext = state.extrinsic
    JR = J @ ext.R_IC.T
    if state.error_param == INVARIANT:
        H[:, StateLayout.THETA_IC] = JR @ skew(b)
    else:
        H[:, StateLayout.THETA_IC] = JR @ skew(b - ext.p_IC)
    H[:, StateLayout.P_IC] = -JR


def local_obs_jacobian(state, p_f, camera, clone_index, anchor_index=None):
    """
    Predicted pixel and Jacobians of a local feature seen from a clone.

    Under the invariant chart the feature error is carried by the rotation
    error of the anchor clone (the newest by default), so the anchor and
    observing clone rotation blocks are exact negatives of each other.
    Returns (uv_pred, H_x over the full layout, H_f 2x3). The feature
    comes right after the state; camera and clone_index pick the view.
    """
    layout = state.layout
    if anchor_index is None:
        anchor_index = layout.n_clones - 1
    clone = state.clones[clone_index]
    ext = state.extrinsic
    p_f = np.asarray(p_f, dtype=float)
    b = clone.R_LI.T @ (p_f - clone.p_LI)
    uv, J = camera.project_with_jacobian(ext.R_IC.T @ (b - ext.p_IC))
    A = J @ ext.R_IC.T @ clone.R_LI.T

    H = np.zeros((len(uv), layout.dim))
    if state.error_param == INVARIANT:
        F = A @ skew(p_f)
        H[:, layout.clone_theta(anchor_index)] -= F
        H[:, layout.clone_theta(clone_index)] += F
    else:
        H[:, layout.clone_theta(clone_index)] = A @ skew(p_f - clone.p_LI)
    H[:, layout.clone_p(clone_index)] = -A
    _extrinsic_blocks(state, H, J, b)
    return uv, H, A


def map_obs_jacobian_current(state, camera, p_GF):
    """
    Predicted pixel of a map feature in the current frame with its
    Jacobians over the full layout and over the map feature.
    """
    if not state.is_initialized:
        raise MeasurementError("augmented variable is not initialized")
    nav = state.nav
    p_GF = np.asarray(p_GF, dtype=float)
    m = nav.R_LG @ p_GF
    b = nav.R_LI.T @ (m + nav.p_LG - nav.p_LI)
    uv, J = camera.project_with_jacobian(state.extrinsic.R_IC.T @ (b - state.extrinsic.p_IC))
    B = J @ state.extrinsic.R_IC.T @ nav.R_LI.T

    L = StateLayout
    H = np.zeros((len(uv), state.layout.dim))
    if state.error_param == INVARIANT:
        H[:, L.THETA_LI] = B @ skew(m)
    else:
        H[:, L.THETA_LI] = B @ skew(m + nav.p_LG - nav.p_LI)
    H[:, L.P_LI] = -B
    H[:, L.P_LG] = B
    H[:, L.THETA_LG] = -B @ skew(m)
    _extrinsic_blocks(state, H, J, b)
    return uv, H, B @ nav.R_LG


def map_obs_jacobian_keyframe(state, camera, p_GF, kf_id):
    """
    Predicted pixel of a map feature in a map keyframe. Only the keyframe
    slot and the feature carry non-zero columns.
    """
    try:
        j = state.keyframe_index(kf_id)
    except StateError as e:
        raise MeasurementError(str(e)) from e
    kf = state.keyframes[j]
    p_GF = np.asarray(p_GF, dtype=float)
    uv, J = camera.project_with_jacobian(kf.R_GKF.T @ (p_GF - kf.p_GKF))
    C = J @ kf.R_GKF.T

    slot = state.layout.keyframe(j)
    H = np.zeros((len(uv), state.layout.dim))
    if state.error_param == INVARIANT:
        H[:, slot.start:slot.start + 3] = C @ skew(p_GF)
    else:
        H[:, slot.start:slot.start + 3] = C @ skew(p_GF - kf.p_GKF)
    H[:, slot.start + 3:slot.stop] = -C
    return uv, H, C


def stack_and_project_feature(H_x, H_f, r, V):
    """
    Removes the feature from the stacked rows with an orthonormal left
    null basis N of H_f: returns (N r, N H_x, N V N^T).
    """
    H_x, H_f = np.atleast_2d(H_x), np.atleast_2d(H_f)
    rows = H_f.shape[0]
    N = null_space(H_f.T, rcond=NULL_SPACE_RCOND).T
    if N.shape[0] == 0 or N.shape[0] > rows - H_f.shape[1]:
        raise FeatureRejected(f"feature Jacobian leaves a {N.shape[0]}-dim null space "
                              f"over {rows} rows")
    return StackedResidual(N @ r, N @ H_x, N @ V @ N.T)


def oc_null_space(anchor, gravity, feature_priors, active_dim, n_keyframes):
    """
    Ten unobservable directions of the map-aided system, built at the
    frozen first estimate of R_LG. Row layout:
    [active error | matched keyframes (theta, p) | map features].
    Columns: gravity yaw, local translation (3), map translation (3),
    map rotation (3). Clone and extrinsic rows stay zero.
    """
    R0 = np.asarray(anchor, dtype=float)
    features = [np.asarray(p, dtype=float) for p in np.atleast_2d(feature_priors)]
    L = StateLayout
    I3 = np.eye(3)
    N = np.zeros((active_dim + 6 * n_keyframes + 3 * len(features), 10))
    N[L.THETA_LI, 0] = gravity
    N[L.THETA_LG, 0] = gravity
    N[L.P_LI, 1:4] = I3
    N[L.P_LG, 1:4] = I3
    N[L.P_LG, 4:7] = -R0
    N[L.THETA_LG, 7:10] = I3
    for j in range(n_keyframes):
        o = active_dim + 6 * j
        N[o:o + 3, 7:10] = -R0.T
        N[o + 3:o + 6, 4:7] = I3
    base = active_dim + 6 * n_keyframes
    for k, p_F in enumerate(features):
        o = base + 3 * k
        N[o:o + 3, 4:7] = I3
        N[o:o + 3, 7:10] = skew(p_F) @ R0.T
    return N


def oc_project(H, N3):
    """Frobenius-nearest H* with H* N3 = 0: H - H Q Q^T over an orthonormal basis Q of span(N3)."""
    Q = orth(N3, rcond=OC_RCOND)
    return H - (H @ Q) @ Q.T
