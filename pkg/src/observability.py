"""
Numerical observability of the map-aided system.

The observability matrix stacks H_k Phi_{k|0} over a short window, with
the filter's own Jacobians and transition blocks evaluated either at the
truth ("ideal") or at independently perturbed values per step
("estimated"). Its right null space is compared against the closed-form
gauge bases: a 4-DoF gauge of the local frame L (rotation about gravity
plus translation) and, when map uncertainty is modelled, a 6-DoF gauge of
the map frame G.

The analysis state neglects IMU biases and the camera extrinsic and keeps
local features in the state:
    [theta_LI, v, p_LI, p_LG, theta_LG | local features | keyframes (theta, p) | map features]
Observations are 3D points in the camera frame; the pixel projection only
left-multiplies each block by a 2x3 matrix.
"""

import logging
from dataclasses import asdict, dataclass, replace

import numpy as np
import pandas as pd
from scipy.linalg import expm

from liegroup import skew, so3_exp, so3_log
from measurement import (local_obs_jacobian, map_obs_jacobian_current,
                         map_obs_jacobian_keyframe, oc_null_space, oc_project)
from propagation import GRAVITY, ImuSample, error_dynamics, std_ekf_error_dynamics
from state import (INVARIANT, STANDARD, AugmentedState, ClonedPose, Extrinsic,
                   MapKeyframePose, NavState, StateLayout)

logger = logging.getLogger(__name__)

PERFECT = "perfect"
IMPERFECT = "imperfect"
IDEAL = "ideal"
ESTIMATED = "estimated"

DEFAULT_STEPS = 50
DEFAULT_RATE = 10.0
DEFAULT_PERTURBATION = 1e-3
NULL_TOL = 1e-8
BASIS_TOL = 1e-6
MIN_STEPS = 10
MIN_ROTATION_RATE = 1e-3
MIN_ACCEL_SPREAD = 1e-3

NAV = StateLayout.NAV
I3 = np.eye(3)


class DegenerateMotionError(ValueError):
    """Trajectory too short or without rotation / acceleration excitation."""


class PointSensor:
    """Observes the point itself in the camera frame."""

    def project_with_jacobian(self, p_C):
        return np.array(p_C, dtype=float), I3.copy()


SENSOR = PointSensor()
IDENTITY_EXTRINSIC = Extrinsic(I3, np.zeros(3))


@dataclass(frozen=True)
class ObservabilityCase:
    system: str
    error_param: str
    linearization: str
    oc: bool = False

    def __post_init__(self):
        if self.system not in (PERFECT, IMPERFECT):
            raise ValueError(f"unknown system '{self.system}'")
        if self.error_param not in (INVARIANT, STANDARD):
            raise ValueError(f"unknown error parameterization '{self.error_param}'")
        if self.linearization not in (IDEAL, ESTIMATED):
            raise ValueError(f"unknown linearization '{self.linearization}'")
        if self.oc and (self.system, self.error_param) != (IMPERFECT, INVARIANT):
            raise ValueError("the constrained projection is defined for the imperfect invariant system only")

    @property
    def label(self):
        name = f"{self.error_param}/{self.system}/{self.linearization}"
        return name + "+oc" if self.oc else name

    @property
    def claimed_dim(self):
        """Dimension of the unobservable subspace this configuration should keep."""
        if self.linearization == IDEAL or self.oc:
            return 4 if self.system == PERFECT else 10
        return 4 if self.error_param == INVARIANT else 3


SUITE = (
    ObservabilityCase(PERFECT, STANDARD, IDEAL),
    ObservabilityCase(PERFECT, STANDARD, ESTIMATED),
    ObservabilityCase(PERFECT, INVARIANT, ESTIMATED),
    ObservabilityCase(IMPERFECT, STANDARD, IDEAL),
    ObservabilityCase(IMPERFECT, INVARIANT, IDEAL),
    ObservabilityCase(IMPERFECT, STANDARD, ESTIMATED),
    ObservabilityCase(IMPERFECT, INVARIANT, ESTIMATED),
    ObservabilityCase(IMPERFECT, INVARIANT, ESTIMATED, oc=True),
)


@dataclass(frozen=True, eq=False)
class MotionProfile:
    """
    Poses at a fixed rate with the IMU readings that move between them
    under a zero-order hold of the world acceleration.
    R, v, p: (n+1, ...) poses; omega, accel: (n, 3) body-frame readings.
    """
    dt: float
    R: np.ndarray
    v: np.ndarray
    p: np.ndarray
    omega: np.ndarray
    accel: np.ndarray

    @property
    def n_poses(self):
        return len(self.R)

    def imu(self, k):
        return ImuSample(k * self.dt, self.omega[k], self.accel[k])

    def world_accel(self, gravity=GRAVITY):
        return np.einsum("kij,kj->ki", self.R[:-1], self.accel) + gravity

    def check_excitation(self, gravity=GRAVITY):
        if np.max(np.linalg.norm(self.omega, axis=1)) < MIN_ROTATION_RATE:
            raise DegenerateMotionError("trajectory has no rotation excitation")
        w = self.world_accel(gravity)
        if np.max(np.linalg.norm(w - w.mean(axis=0), axis=1)) < MIN_ACCEL_SPREAD:
            raise DegenerateMotionError("trajectory has no acceleration excitation")


def integrate_motion(R0, v0, p0, omega, world_accel, dt, gravity=GRAVITY):
    """Exact discrete motion: R_{k+1} = R_k exp(w dt), constant world acceleration per step."""
    omega = np.asarray(omega, dtype=float)
    world_accel = np.asarray(world_accel, dtype=float)
    R, v, p, accel = [np.asarray(R0, dtype=float)], [np.asarray(v0, dtype=float)], \
        [np.asarray(p0, dtype=float)], []
    for w, acc in zip(omega, world_accel):
        accel.append(R[-1].T @ (acc - gravity))
        p.append(p[-1] + v[-1] * dt + 0.5 * acc * dt ** 2)
        v.append(v[-1] + acc * dt)
        R.append(R[-1] @ so3_exp(w * dt))
    return MotionProfile(dt, np.array(R), np.array(v), np.array(p), omega, np.array(accel))


def random_motion(rng, steps=DEFAULT_STEPS, rate=DEFAULT_RATE, gravity=GRAVITY):
    """Smooth random rotation rate and world acceleration over `steps` intervals."""
    dt = 1.0 / rate
    t = np.arange(steps)[:, None] * dt
    freq = rng.uniform(0.5, 1.5, size=(2, 3))
    phase = rng.uniform(0.0, 2 * np.pi, size=(2, 3))
    omega = 0.3 * np.sin(freq[0] * t + phase[0]) + rng.normal(scale=0.05, size=3)
    world_accel = np.sin(freq[1] * t + phase[1]) + rng.normal(scale=0.2, size=3)
    return integrate_motion(so3_exp(rng.normal(scale=0.3, size=3)), rng.normal(size=3),
                            rng.normal(scale=2.0, size=3), omega, world_accel, dt, gravity)


@dataclass(frozen=True, eq=False)
class LinearizationPoint:
    """Values at which one step's Jacobians and transition are evaluated."""
    R_LI: np.ndarray
    v_LI: np.ndarray
    p_LI: np.ndarray
    R_LG: np.ndarray
    p_LG: np.ndarray
    local_features: np.ndarray
    map_features: np.ndarray
    keyframes: tuple = ()

    def to_state(self, error_param):
        nav = NavState(self.R_LI, self.v_LI, self.p_LI, self.p_LG, self.R_LG)
        kfs = tuple(MapKeyframePose(R, p, j) for j, (R, p) in enumerate(self.keyframes))
        return AugmentedState(nav, IDENTITY_EXTRINSIC, (ClonedPose(self.R_LI, self.p_LI, 0.0),), kfs,
                              error_param=error_param, oc_anchor=self.R_LG)

    def predict(self):
        """Every point observation: local features, map features from the body, then from each keyframe."""
        state = self.to_state(INVARIANT)
        out = [local_obs_jacobian(state, f, SENSOR, 0)[0] for f in self.local_features]
        out += [map_obs_jacobian_current(state, SENSOR, F)[0] for F in self.map_features]
        out += [map_obs_jacobian_keyframe(state, SENSOR, F, j)[0]
                for F in self.map_features for j in range(len(self.keyframes))]
        return np.concatenate(out)

    def perturbed(self, rng, sigma, map_side=False):
        def rot(R):
            return so3_exp(rng.normal(scale=sigma, size=3)) @ R

        def vec(x):
            return x + rng.normal(scale=sigma, size=np.shape(x))

        kfs, features = self.keyframes, self.map_features
        if map_side:
            kfs = tuple((rot(R), vec(p)) for R, p in kfs)
            features = vec(features)
        return replace(self, R_LI=rot(self.R_LI), v_LI=vec(self.v_LI), p_LI=vec(self.p_LI),
                       R_LG=rot(self.R_LG), p_LG=vec(self.p_LG),
                       local_features=vec(self.local_features), keyframes=kfs, map_features=features)

    def transform_local(self, yaw, translation, gravity=GRAVITY):
        """Moves frame L by a rotation about gravity and a translation."""
        Q = so3_exp(yaw * np.asarray(gravity) / np.linalg.norm(gravity))
        t = np.asarray(translation, dtype=float)
        return replace(self, R_LI=Q @ self.R_LI, v_LI=Q @ self.v_LI, p_LI=Q @ self.p_LI + t,
                       R_LG=Q @ self.R_LG, p_LG=Q @ self.p_LG + t,
                       local_features=self.local_features @ Q.T + t)

    def transform_map(self, rotation, translation):
        """Re-expresses the map in a frame G' with p_G' = Q p_G + t."""
        Q, t = np.asarray(rotation, dtype=float), np.asarray(translation, dtype=float)
        return replace(self, R_LG=self.R_LG @ Q.T, p_LG=self.p_LG - self.R_LG @ Q.T @ t,
                       keyframes=tuple((Q @ R, Q @ p + t) for R, p in self.keyframes),
                       map_features=self.map_features @ Q.T + t)


@dataclass(frozen=True, eq=False)
class ObservabilityScene:
    """Static part of the analysis: features, keyframes and the true L-G transform."""
    local_features: np.ndarray
    map_features: np.ndarray
    keyframes: tuple
    R_LG: np.ndarray
    p_LG: np.ndarray

    def point(self, motion, k):
        return LinearizationPoint(motion.R[k], motion.v[k], motion.p[k], self.R_LG, self.p_LG,
                                  self.local_features, self.map_features, self.keyframes)


def random_scene(rng, motion, n_local=3, n_map=3, n_keyframes=2):
    center = motion.p.mean(axis=0)
    R_LG = so3_exp(rng.normal(scale=0.5, size=3))
    p_LG = center + rng.normal(scale=3.0, size=3)
    local = center + rng.normal(scale=5.0, size=(n_local, 3))
    in_L = center + rng.normal(scale=5.0, size=(n_map, 3))
    keyframes = tuple((so3_exp(rng.normal(size=3)), R_LG.T @ (center + rng.normal(scale=3.0, size=3) - p_LG))
                      for _ in range(n_keyframes))
    return ObservabilityScene(local, (in_L - p_LG) @ R_LG, keyframes, R_LG, p_LG)


class AnalysisLayout:
    """Index table of the analysis state."""

    def __init__(self, n_local, n_map, n_keyframes, imperfect):
        self.n_local = n_local
        self.n_map = n_map
        self.n_keyframes = n_keyframes if imperfect else 0
        self.imperfect = imperfect

    @property
    def map_start(self):
        return NAV.stop + 3 * self.n_local

    @property
    def dim(self):
        if not self.imperfect:
            return self.map_start
        return self.map_start + 6 * self.n_keyframes + 3 * self.n_map

    def local(self, i):
        start = NAV.stop + 3 * i
        return slice(start, start + 3)

    def keyframe(self, j):
        start = self.map_start + 6 * j
        return slice(start, start + 6)

    def map_feature(self, i):
        start = self.map_start + 6 * self.n_keyframes + 3 * i
        return slice(start, start + 3)


@dataclass(frozen=True, eq=False)
class ObservabilityMatrix:
    case: ObservabilityCase
    M: np.ndarray
    layout: AnalysisLayout
    origin: LinearizationPoint
    steps: int

    @property
    def rows_per_step(self):
        return self.M.shape[0] // self.steps


def null_space(M, tol=NULL_TOL):
    """Right null space by SVD: singular values below tol * sigma_max count as zero."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    n = M.shape[1]
    _, s, Vt = np.linalg.svd(M, full_matrices=True)
    if s.size == 0 or s[0] == 0.0:
        return np.eye(n), n
    rank = int(np.count_nonzero(s >= tol * s[0]))
    return Vt[rank:].T, n - rank


def _local_gauge(error_param, point, layout, gravity, with_yaw):
    g = np.asarray(gravity, dtype=float)
    L = StateLayout
    N = np.zeros((layout.dim, 4 if with_yaw else 3))
    for s in [L.P_LI, L.P_LG] + [layout.local(i) for i in range(layout.n_local)]:
        N[s, -3:] = I3
    if with_yaw:
        N[L.THETA_LI, 0] = g
        N[L.THETA_LG, 0] = g
        if error_param == STANDARD:
            N[L.V_LI, 0] = -skew(point.v_LI) @ g
            N[L.P_LI, 0] = -skew(point.p_LI) @ g
            N[L.P_LG, 0] = -skew(point.p_LG) @ g
            for i, f in enumerate(point.local_features):
                N[layout.local(i), 0] = -skew(f) @ g
    return N


def _map_gauge(error_param, point, layout, gravity):
    N = np.zeros((layout.dim, 6))
    if error_param == INVARIANT:
        full = oc_null_space(point.R_LG, gravity, point.map_features, NAV.stop, layout.n_keyframes)
        N[NAV] = full[NAV, 4:]
        N[layout.map_start:] = full[NAV.stop:, 4:]
        return N
    L = StateLayout
    N[L.P_LG, 0:3] = -point.R_LG
    N[L.THETA_LG, 3:6] = -point.R_LG
    for j, (_, p_kf) in enumerate(point.keyframes[:layout.n_keyframes]):
        s = layout.keyframe(j)
        N[s.start:s.start + 3, 3:6] = I3
        N[s.start + 3:s.stop, 0:3] = I3
        N[s.start + 3:s.stop, 3:6] = -skew(p_kf)
    for i, F in enumerate(point.map_features):
        N[layout.map_feature(i), 0:3] = I3
        N[layout.map_feature(i), 3:6] = -skew(F)
    return N


def theoretical_null_basis(case, point, layout, gravity=GRAVITY):
    """
    Closed-form unobservable directions of `case`, evaluated at `point`
    (the values at the first step). Columns: gravity yaw (when kept),
    local translation, then map translation and map rotation (when kept).
    """
    with_yaw = case.error_param == INVARIANT or case.linearization == IDEAL
    blocks = [_local_gauge(case.error_param, point, layout, gravity, with_yaw)]
    if case.system == IMPERFECT and (case.linearization == IDEAL or case.oc):
        blocks.append(_map_gauge(case.error_param, point, layout, gravity))
    return np.hstack(blocks)


def transition(case, point, imu, dt, layout, gravity=GRAVITY):
    """Phi over one step; only the navigation block moves."""
    state = point.to_state(case.error_param)
    if case.error_param == INVARIANT:
        A, _ = error_dynamics(state, gravity)
    else:
        A, _ = std_ekf_error_dynamics(state, imu, gravity)
    Phi = np.eye(layout.dim)
    Phi[NAV, NAV] = expm(A[NAV, NAV] * dt)
    return Phi


def observation_rows(case, point, layout, oc_basis=None):
    """Stacked point-observation Jacobians of one step in the analysis layout."""
    state = point.to_state(case.error_param)
    sl = state.layout
    L = StateLayout
    rows = []
    for i, f in enumerate(point.local_features):
        _, H, A = local_obs_jacobian(state, f, SENSOR, 0, anchor_index=0)
        row = np.zeros((3, layout.dim))
        row[:, L.THETA_LI] = H[:, sl.clone_theta(0)]
        row[:, L.P_LI] = H[:, sl.clone_p(0)]
        row[:, layout.local(i)] = A
        rows.append(row)

    map_cols = list(range(layout.map_start, layout.map_start + 6 * layout.n_keyframes))
    for i, F in enumerate(point.map_features):
        _, H, H_F = map_obs_jacobian_current(state, SENSOR, F)
        row = np.zeros((3, layout.dim))
        row[:, NAV] = H[:, NAV]
        if layout.imperfect:
            row[:, layout.map_feature(i)] = H_F
        if oc_basis is not None:
            f = layout.map_feature(i)
            cols = list(range(NAV.stop)) + map_cols + list(range(f.start, f.stop))
            row[:, cols] = oc_project(row[:, cols], oc_basis[cols])
        rows.append(row)
        for j in range(layout.n_keyframes):
            _, H, C = map_obs_jacobian_keyframe(state, SENSOR, F, j)
            row = np.zeros((3, layout.dim))
            row[:, layout.keyframe(j)] = H[:, sl.keyframe(j)]
            row[:, layout.map_feature(i)] = C
            rows.append(row)
    return np.vstack(rows)


def linearization_points(case, motion, scene, T, perturbation=DEFAULT_PERTURBATION, seed=0):
    """
    Truth for the ideal case. For the estimated case every step draws its
    own perturbation of the local-side values, while the map side keeps a
    single first estimate, as keyframes and map features are never updated.
    """
    points = [scene.point(motion, k) for k in range(T)]
    if case.linearization == IDEAL:
        return points
    rng = np.random.default_rng(seed)
    first = points[0].perturbed(rng, perturbation, map_side=case.system == IMPERFECT)
    return [first] + [replace(p.perturbed(rng, perturbation), keyframes=first.keyframes,
                              map_features=first.map_features) for p in points[1:]]


def build_observability_matrix(case, motion, scene, T=DEFAULT_STEPS,
                               perturbation=DEFAULT_PERTURBATION, seed=0, gravity=GRAVITY):
    if T < MIN_STEPS:
        raise DegenerateMotionError(f"{T} steps are too few, need at least {MIN_STEPS}")
    if T > motion.n_poses:
        raise ValueError(f"motion has {motion.n_poses} poses, {T} requested")
    motion.check_excitation(gravity)

    layout = AnalysisLayout(len(scene.local_features), len(scene.map_features),
                            len(scene.keyframes), case.system == IMPERFECT)
    points = linearization_points(case, motion, scene, T, perturbation, seed)
    oc_basis = theoretical_null_basis(case, points[0], layout, gravity) if case.oc else None

    Phi_k0 = np.eye(layout.dim)
    blocks = []
    for k, point in enumerate(points):
        if k:
            Phi_k0 = transition(case, points[k - 1], motion.imu(k - 1), motion.dt, layout, gravity) @ Phi_k0
        blocks.append(observation_rows(case, point, layout, oc_basis) @ Phi_k0)
    return ObservabilityMatrix(case, np.vstack(blocks), layout, points[0], T)


@dataclass(frozen=True)
class CaseReport:
    label: str
    claimed_dim: int
    null_dim: int
    basis_residual: float
    passed: bool

    def as_dict(self):
        return asdict(self)


def verify_case(case, motion, scene, T=DEFAULT_STEPS, tol=NULL_TOL,
                perturbation=DEFAULT_PERTURBATION, seed=0, gravity=GRAVITY):
    """Numerical null dimension against the claimed one, and the closed-form basis against M."""
    om = build_observability_matrix(case, motion, scene, T, perturbation, seed, gravity)
    _, dim = null_space(om.M, tol)
    N = theoretical_null_basis(case, om.origin, om.layout, gravity)
    N = N / np.linalg.norm(N, axis=0)
    residual = float(np.linalg.norm(om.M @ N) / np.linalg.norm(om.M))
    passed = dim == case.claimed_dim and residual <= BASIS_TOL
    log = logger.debug if passed else logger.warning
    log("%s: null dim %d (claimed %d), basis residual %.1e", case.label, dim, case.claimed_dim, residual)
    return CaseReport(case.label, case.claimed_dim, dim, residual, passed)


def verify_suite(scenes, cases=SUITE, **kwargs):
    """scenes: iterable of (motion, scene); one report row per scene and case."""
    rows = []
    for n, (motion, scene) in enumerate(scenes):
        for case in cases:
            rows.append({"trajectory": n, **verify_case(case, motion, scene, **kwargs).as_dict()})
    return pd.DataFrame(rows)


def gauge_invariance(motion, scene, rng, k=0, tol=1e-9, gravity=GRAVITY):
    """
    Moves L by a random rotation about gravity plus a translation, and G
    by a random 6-DoF transform; every predicted observation must stay put.
    """
    point = scene.point(motion, k)
    base = point.predict()
    scale = max(1.0, float(np.abs(base).max()))
    moved = {
        "gauge/local-4dof": (4, point.transform_local(rng.uniform(-np.pi, np.pi), rng.normal(scale=5.0, size=3),
                                                      gravity)),
        "gauge/map-6dof": (6, point.transform_map(so3_exp(rng.normal(size=3)), rng.normal(scale=5.0, size=3))),
    }
    reports = []
    for label, (dof, other) in moved.items():
        residual = float(np.abs(other.predict() - base).max()) / scale
        reports.append(CaseReport(label, dof, dof, residual, residual <= tol))
    return reports
