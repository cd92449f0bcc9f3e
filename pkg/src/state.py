"""
Augmented filter state: navigation + biases + augmented variable +
extrinsic + clone window (active part) and map keyframe poses (nuisance
part), with the covariance kept as explicit P_aa / P_an / P_nn blocks.

Error-slot order (single source of truth, see StateLayout):
    [theta_LI, v, p_LI, p_LG, theta_LG, b_g, b_a, theta_IC, p_IC,
     clone_1 (theta, p), ..., clone_s (theta, p) | kf_1 (theta, p), ...]
"""

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import block_diag

from liegroup import (GroupElement, compose, group_exp, group_log, inverse, se3_exp, se3_log,
                      so3_exp, so3_exp_batch, so3_left_jacobian_batch, so3_log)

logger = logging.getLogger(__name__)

INVARIANT = "invariant"
STANDARD = "standard"
ERROR_PARAMS = (INVARIANT, STANDARD)

DEFAULT_MAX_CLONES = 11
SYMMETRY_TOL = 1e-10
PSD_TOL = 1e-9


class StateError(ValueError):
    """Layout mismatch or an invalid state edit."""


class StateLayout:
    """Index table of the error vector. Every Jacobian builder uses it."""

    THETA_LI = slice(0, 3)
    V_LI = slice(3, 6)
    P_LI = slice(6, 9)
    P_LG = slice(9, 12)
    THETA_LG = slice(12, 15)
    B_G = slice(15, 18)
    B_A = slice(18, 21)
    THETA_IC = slice(21, 24)
    P_IC = slice(24, 27)

    NAV = slice(0, 15)
    PROPAGATED = slice(0, 21)
    AUGMENTED = slice(9, 15)
    EXTRINSIC = slice(21, 27)
    CORE_DIM = 27
    POSE_DIM = 6

    def __init__(self, n_clones=0, n_keyframes=0):
        self.n_clones = n_clones
        self.n_keyframes = n_keyframes

    @property
    def active_dim(self):
        return self.CORE_DIM + self.POSE_DIM * self.n_clones

    @property
    def nuisance_dim(self):
        return self.POSE_DIM * self.n_keyframes

    @property
    def dim(self):
        return self.active_dim + self.nuisance_dim

    def clone(self, i):
        start = self.CORE_DIM + self.POSE_DIM * i
        return slice(start, start + self.POSE_DIM)

    def clone_theta(self, i):
        start = self.CORE_DIM + self.POSE_DIM * i
        return slice(start, start + 3)

    def clone_p(self, i):
        start = self.CORE_DIM + self.POSE_DIM * i + 3
        return slice(start, start + 3)

    def keyframe(self, j):
        """Slot of keyframe j in the full error vector."""
        start = self.active_dim + self.POSE_DIM * j
        return slice(start, start + self.POSE_DIM)

    def keyframe_local(self, j):
        """Slot of keyframe j inside the nuisance block."""
        return slice(self.POSE_DIM * j, self.POSE_DIM * (j + 1))

    def slots(self):
        named = [("theta_LI", self.THETA_LI), ("v_LI", self.V_LI), ("p_LI", self.P_LI),
                 ("p_LG", self.P_LG), ("theta_LG", self.THETA_LG), ("b_g", self.B_G),
                 ("b_a", self.B_A), ("theta_IC", self.THETA_IC), ("p_IC", self.P_IC)]
        for i in range(self.n_clones):
            named += [(f"clone{i}_theta", self.clone_theta(i)), (f"clone{i}_p", self.clone_p(i))]
        for j in range(self.n_keyframes):
            s = self.keyframe(j)
            named += [(f"kf{j}_theta", slice(s.start, s.start + 3)),
                      (f"kf{j}_p", slice(s.start + 3, s.stop))]
        return named


@dataclass(frozen=True, eq=False)
class NavState:
    R_LI: np.ndarray
    v_LI: np.ndarray
    p_LI: np.ndarray
    p_LG: np.ndarray = field(default_factory=lambda: np.zeros(3))
    R_LG: np.ndarray = field(default_factory=lambda: np.eye(3))
    b_g: np.ndarray = field(default_factory=lambda: np.zeros(3))
    b_a: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def group(self):
        """(R_LI, v, p_LI, p_LG, R_LG) as an SE_2^1(3) element."""
        return GroupElement(self.R_LI, np.array([self.v_LI, self.p_LI, self.p_LG]),
                            self.R_LG[None])

    def with_group(self, X):
        return replace(self, R_LI=X.rotation, v_LI=X.vectors[0], p_LI=X.vectors[1],
                       p_LG=X.vectors[2], R_LG=X.extra_rotations[0])


@dataclass(frozen=True, eq=False)
class ClonedPose:
    R_LI: np.ndarray
    p_LI: np.ndarray
    timestamp: float


@dataclass(frozen=True, eq=False)
class Extrinsic:
    R_IC: np.ndarray
    p_IC: np.ndarray


@dataclass(frozen=True, eq=False)
class MapKeyframePose:
    R_GKF: np.ndarray
    p_GKF: np.ndarray
    kf_id: int


def _pose(R, p):
    return GroupElement.pose(R, p)


@dataclass(frozen=True, eq=False)
class AugmentedState:
    """
    Value type owned by one filter instance.

    P_aa, P_an, P_nn: covariance blocks over [active | nuisance] errors,
    expressed in the chart named by error_param.
    oc_anchor: first estimate of R_LG, frozen when the augmented variable
    is initialized (None before).
    """
    nav: NavState
    extrinsic: Extrinsic
    clones: tuple = ()
    keyframes: tuple = ()
    P_aa: np.ndarray = None
    P_an: np.ndarray = None
    P_nn: np.ndarray = None
    error_param: str = INVARIANT
    oc_anchor: np.ndarray = None
    max_clones: int = DEFAULT_MAX_CLONES
    timestamp: float = 0.0

    def __post_init__(self):
        if self.error_param not in ERROR_PARAMS:
            raise StateError(f"unknown error parameterization '{self.error_param}'")
        layout = self.layout
        if self.P_aa is None:
            object.__setattr__(self, "P_aa", np.zeros((layout.active_dim, layout.active_dim)))
        if self.P_an is None:
            object.__setattr__(self, "P_an", np.zeros((layout.active_dim, layout.nuisance_dim)))
        if self.P_nn is None:
            object.__setattr__(self, "P_nn", np.zeros((layout.nuisance_dim, layout.nuisance_dim)))
        if self.P_aa.shape != (layout.active_dim, layout.active_dim) \
                or self.P_an.shape != (layout.active_dim, layout.nuisance_dim) \
                or self.P_nn.shape != (layout.nuisance_dim, layout.nuisance_dim):
            raise StateError("covariance blocks do not match the state layout")

    @property
    def layout(self):
        return StateLayout(len(self.clones), len(self.keyframes))

    @property
    def is_initialized(self):
        """True once the augmented variable has been initialized."""
        return self.oc_anchor is not None

    @property
    def covariance(self):
        return np.block([[self.P_aa, self.P_an], [self.P_an.T, self.P_nn]])

    def with_covariance(self, P):
        a = self.layout.active_dim
        return replace(self, P_aa=P[:a, :a], P_an=P[:a, a:], P_nn=P[a:, a:])

    def keyframe_index(self, kf_id):
        for j, kf in enumerate(self.keyframes):
            if kf.kf_id == kf_id:
                return j
        raise StateError(f"keyframe {kf_id} is not in the nuisance set")

    def keyframe_ids(self):
        return [kf.kf_id for kf in self.keyframes]


def symmetrize(P):
    return (P + P.T) / 2.0


def check_covariance(P, sym_tol=SYMMETRY_TOL, psd_tol=PSD_TOL):
    """Returns (is_symmetric, min_eigenvalue >= -psd_tol)."""
    if P.size == 0:
        return True, True
    symmetric = np.max(np.abs(P - P.T)) <= sym_tol
    min_eig = np.min(np.linalg.eigvalsh(symmetrize(P)))
    return bool(symmetric), bool(min_eig >= -psd_tol)


def _check_layout(truth, est):
    if len(truth.clones) != len(est.clones) or truth.keyframe_ids() != est.keyframe_ids():
        raise StateError("truth and estimate have different layouts")


def right_invariant_error(truth, est):
    """Right-invariant error vector (group log of X_hat X^-1 per group slot)."""
    _check_layout(truth, est)
    parts = [group_log(compose(est.nav.group(), inverse(truth.nav.group()))),
             est.nav.b_g - truth.nav.b_g,
             est.nav.b_a - truth.nav.b_a,
             _pose_error(_pose(est.extrinsic.R_IC, est.extrinsic.p_IC),
                         _pose(truth.extrinsic.R_IC, truth.extrinsic.p_IC))]
    for c_est, c_true in zip(est.clones, truth.clones):
        parts.append(_pose_error(_pose(c_est.R_LI, c_est.p_LI), _pose(c_true.R_LI, c_true.p_LI)))
    for k_est, k_true in zip(est.keyframes, truth.keyframes):
        parts.append(_pose_error(_pose(k_est.R_GKF, k_est.p_GKF), _pose(k_true.R_GKF, k_true.p_GKF)))
    return np.concatenate(parts)


def _pose_error(T_est, T_true):
    return se3_log(compose(T_est, inverse(T_true)))


def _std_pose_error(R_est, p_est, R_true, p_true):
    return np.concatenate([so3_log(R_est @ R_true.T), p_est - p_true])


def standard_error(truth, est):
    """Additive errors with left (L-frame) rotation perturbations."""
    _check_layout(truth, est)
    n_est, n_true = est.nav, truth.nav
    parts = [so3_log(n_est.R_LI @ n_true.R_LI.T),
             n_est.v_LI - n_true.v_LI,
             n_est.p_LI - n_true.p_LI,
             n_est.p_LG - n_true.p_LG,
             so3_log(n_est.R_LG @ n_true.R_LG.T),
             n_est.b_g - n_true.b_g,
             n_est.b_a - n_true.b_a,
             _std_pose_error(est.extrinsic.R_IC, est.extrinsic.p_IC,
                             truth.extrinsic.R_IC, truth.extrinsic.p_IC)]
    for c_est, c_true in zip(est.clones, truth.clones):
        parts.append(_std_pose_error(c_est.R_LI, c_est.p_LI, c_true.R_LI, c_true.p_LI))
    for k_est, k_true in zip(est.keyframes, truth.keyframes):
        parts.append(_std_pose_error(k_est.R_GKF, k_est.p_GKF, k_true.R_GKF, k_true.p_GKF))
    return np.concatenate(parts)


def state_error(truth, est):
    """Error in the chart the estimate's covariance lives in."""
    if est.error_param == INVARIANT:
        return right_invariant_error(truth, est)
    return standard_error(truth, est)


def retract(state, correction, update_nuisance=False):
    """
    Applies an error-space correction. Group slots are left-multiplied by
    the exponential of their sub-vector (invariant) or perturbed additively
    with left rotation updates (standard). Keyframes move only when
    update_nuisance is set.
    """
    layout = state.layout
    correction = np.asarray(correction, dtype=float).reshape(-1)
    if correction.size not in (layout.active_dim, layout.dim):
        raise StateError(f"correction has {correction.size} entries, layout needs "
                         f"{layout.active_dim} or {layout.dim}")
    L = StateLayout
    nav = state.nav
    if state.error_param == INVARIANT:
        nav = nav.with_group(compose(group_exp(correction[L.NAV], K=0, M=1), nav.group()))
    else:
        nav = replace(nav,
                      R_LI=so3_exp(correction[L.THETA_LI]) @ nav.R_LI,
                      v_LI=nav.v_LI + correction[L.V_LI],
                      p_LI=nav.p_LI + correction[L.P_LI],
                      p_LG=nav.p_LG + correction[L.P_LG],
                      R_LG=so3_exp(correction[L.THETA_LG]) @ nav.R_LG)
    nav = replace(nav, b_g=nav.b_g + correction[L.B_G], b_a=nav.b_a + correction[L.B_A])

    R_IC, p_IC = _retract_pose(state.error_param, state.extrinsic.R_IC, state.extrinsic.p_IC,
                               correction[L.EXTRINSIC])
    clones = []
    for i, c in enumerate(state.clones):
        R, p = _retract_pose(state.error_param, c.R_LI, c.p_LI, correction[layout.clone(i)])
        clones.append(ClonedPose(R, p, c.timestamp))

    keyframes = state.keyframes
    if update_nuisance and correction.size == layout.dim:
        R = np.array([kf.R_GKF for kf in state.keyframes]).reshape(-1, 3, 3)
        p = np.array([kf.p_GKF for kf in state.keyframes]).reshape(-1, 3)
        R, p = _retract_poses(state.error_param, R, p, correction[layout.active_dim:].reshape(-1, 6))
        keyframes = tuple(MapKeyframePose(Rj, pj, kf.kf_id) for Rj, pj, kf in zip(R, p, state.keyframes))

    return replace(state, nav=nav, extrinsic=Extrinsic(R_IC, p_IC), clones=tuple(clones),
                   keyframes=keyframes)


def _retract_pose(error_param, R, p, delta):
    if error_param == INVARIANT:
        T = compose(se3_exp(delta), _pose(R, p))
        return T.rotation, T.vectors[0]
    return so3_exp(delta[:3]) @ R, p + delta[3:]


def _retract_poses(error_param, R, p, delta):
    """_retract_pose over stacked (m, 3, 3) rotations and (m, 3) positions."""
    dR = so3_exp_batch(delta[:, :3])
    if error_param == INVARIANT:
        rho = np.einsum("mij,mj->mi", so3_left_jacobian_batch(delta[:, :3]), delta[:, 3:])
        return dR @ R, np.einsum("mij,mj->mi", dR, p) + rho
    return dR @ R, p + delta[:, 3:]


def augment_clone(state, timestamp):
    """Appends a copy of the current pose; its error is a selection of the pose error."""
    if len(state.clones) >= state.max_clones:
        raise StateError(f"clone window full ({state.max_clones}); marginalize first")
    if state.clones and timestamp <= state.clones[-1].timestamp:
        raise StateError(f"duplicate or out-of-order clone timestamp {timestamp}")
    L = StateLayout
    sel = np.r_[np.arange(L.THETA_LI.start, L.THETA_LI.stop), np.arange(L.P_LI.start, L.P_LI.stop)]
    P_aa = state.P_aa
    P_aa = np.block([[P_aa, P_aa[:, sel]],
                     [P_aa[sel, :], P_aa[np.ix_(sel, sel)]]])
    P_an = np.vstack([state.P_an, state.P_an[sel, :]])
    clone = ClonedPose(state.nav.R_LI.copy(), state.nav.p_LI.copy(), float(timestamp))
    return replace(state, clones=state.clones + (clone,), P_aa=symmetrize(P_aa), P_an=P_an)


def marginalize_oldest(state):
    if not state.clones:
        raise StateError("no clone to marginalize")
    keep = np.r_[np.arange(StateLayout.CORE_DIM),
                 np.arange(StateLayout.CORE_DIM + StateLayout.POSE_DIM, state.layout.active_dim)]
    return replace(state, clones=state.clones[1:],
                   P_aa=state.P_aa[np.ix_(keep, keep)], P_an=state.P_an[keep, :])


def insert_keyframes(state, kfs, kf_cov):
    """
    Adds map keyframe poses to the nuisance set.

    kf_cov: one 6x6 prior shared by every keyframe, a list of 6x6 priors,
    or a dense (6m, 6m) matrix.
    """
    kfs = list(kfs)
    if not kfs:
        return state
    existing = set(state.keyframe_ids())
    new_ids = [kf.kf_id for kf in kfs]
    if existing.intersection(new_ids) or len(set(new_ids)) != len(new_ids):
        raise StateError(f"duplicate keyframe id among {new_ids}")

    kf_cov = np.asarray(kf_cov, dtype=float)
    m = len(kfs)
    if kf_cov.shape == (6, 6):
        prior = block_diag(*([kf_cov] * m))
    elif kf_cov.shape == (m, 6, 6):
        prior = block_diag(*kf_cov)
    elif kf_cov.shape == (6 * m, 6 * m):
        prior = kf_cov
    else:
        raise StateError(f"keyframe covariance of shape {kf_cov.shape} does not fit {m} keyframes")

    P_nn = block_diag(state.P_nn, prior) if state.P_nn.size else prior
    P_an = np.hstack([state.P_an, np.zeros((state.layout.active_dim, 6 * m))])
    return replace(state, keyframes=state.keyframes + tuple(kfs), P_nn=symmetrize(P_nn), P_an=P_an)


def init_augmented_variable(state, R_LG, p_LG, cov_init, anchor_rule="first_estimate"):
    """
    Sets the relative transformation L<-G and its 6x6 covariance over
    [p_LG, theta_LG]; cross terms start at zero. The OC anchor is frozen
    to this first estimate of R_LG.
    """
    if state.is_initialized:
        raise StateError("augmented variable already initialized")
    if anchor_rule != "first_estimate":
        raise StateError(f"unsupported anchor rule '{anchor_rule}'")
    aug = StateLayout.AUGMENTED
    P_aa = state.P_aa.copy()
    P_aa[aug, :] = 0.0
    P_aa[:, aug] = 0.0
    P_aa[aug, aug] = np.asarray(cov_init, dtype=float)
    P_an = state.P_an.copy()
    P_an[aug, :] = 0.0
    R_LG = np.asarray(R_LG, dtype=float)
    nav = replace(state.nav, R_LG=R_LG.copy(), p_LG=np.asarray(p_LG, dtype=float).copy())
    return replace(state, nav=nav, P_aa=symmetrize(P_aa), P_an=P_an, oc_anchor=R_LG.copy())
