"""
Synthetic data for the saddle experiment: spline trajectories, IMU
streams, local feature tracks, a pre-built map (keyframes, features and
their keyframe observations) in true and perturbed form, and per-frame
map matches.

The waypoints of both saddle runs live in the map frame G. The query run
is handed to the filter in the local odometry frame L through the true
relative transformation (R_LG, p_LG).
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.interpolate import CubicSpline
from scipy.spatial.transform import Rotation

from liegroup import skew, so3_exp, so3_left_jacobian_inv, so3_log
from measurement import PinholeCamera, MapMatch
from propagation import GRAVITY, ImuSample, NoiseParams
from state import INVARIANT, Extrinsic, MapKeyframePose
from triangulation import TriangulationError, triangulate

logger = logging.getLogger(__name__)

# camera looks along body x, image x to the right, image y down
R_IC_FORWARD = np.array([[0.0, 0.0, 1.0],
                         [-1.0, 0.0, 0.0],
                         [0.0, -1.0, 0.0]])
DEFAULT_EXTRINSIC = Extrinsic(R_IC_FORWARD, np.array([0.05, 0.0, 0.02]))

MIN_VISIBLE_DEPTH = 0.5
MAX_DEPTH_FACTOR = 1.5
IMAGE_MARGIN = 10.0


class SimulationError(ValueError):
    """Invalid trajectory or simulation settings."""


@dataclass(frozen=True)
class TrajectorySpec:
    """Waypoints as rows (t, x, y, z, yaw)."""
    waypoints: tuple
    imu_rate: float = 200.0
    cam_rate: float = 10.0
    wobble: float = 0.03
    wobble_period: float = 7.0

    def __post_init__(self):
        w = np.asarray(self.waypoints, dtype=float)
        if w.ndim != 2 or w.shape[1] != 5:
            raise SimulationError("waypoints must be rows of (t, x, y, z, yaw)")
        if len(w) < 4:
            raise SimulationError(f"need at least 4 waypoints, got {len(w)}")
        if np.any(np.diff(w[:, 0]) <= 0):
            raise SimulationError("waypoint times must be strictly increasing")
        if np.any(np.linalg.norm(np.diff(w[:, 1:4], axis=0), axis=1) < 1e-9):
            raise SimulationError("coincident consecutive waypoints")
        if self.imu_rate <= 0 or self.cam_rate <= 0:
            raise SimulationError("rates must be positive")
        ratio = self.imu_rate / self.cam_rate
        if abs(ratio - round(ratio)) > 1e-9:
            raise SimulationError("imu_rate must be an integer multiple of cam_rate")
        if self.wobble < 0 or self.wobble_period <= 0:
            raise SimulationError("wobble amplitude must be >= 0 and its period > 0")

    @property
    def table(self):
        return np.asarray(self.waypoints, dtype=float)

    @property
    def imu_per_frame(self):
        return int(round(self.imu_rate / self.cam_rate))


def saddle_spec(radius=49.5, height=5.0, speed=3.0, laps=2, points_per_lap=24,
                offset=(0.0, 0.0, 0.0), duration_scale=1.0, imu_rate=200.0, cam_rate=10.0,
                wobble=0.03):
    """
    Two overlapping loops on a circle whose height follows cos(2 phi),
    timed at roughly constant speed. duration_scale < 1 keeps the first
    part of the path.
    """
    if radius <= 0 or speed <= 0 or duration_scale <= 0:
        raise SimulationError("radius, speed and duration_scale must be positive")
    total = 2 * math.pi * laps * min(duration_scale, 1.0)
    n = max(4, int(math.ceil(points_per_lap * laps * min(duration_scale, 1.0))) + 1)
    phi = np.linspace(0.0, total, n)
    xyz = np.c_[radius * np.cos(phi), radius * np.sin(phi), height * np.cos(2 * phi)]
    xyz = xyz + np.asarray(offset, dtype=float)
    yaw = phi + math.pi / 2
    chord = np.linalg.norm(np.diff(xyz, axis=0), axis=1)
    t = np.r_[0.0, np.cumsum(chord) / speed]
    return TrajectorySpec(tuple(map(tuple, np.c_[t, xyz, yaw])), imu_rate=imu_rate,
                          cam_rate=cam_rate, wobble=wobble)


@dataclass(frozen=True, eq=False)
class GroundTruth:
    """
    Dense truth sampled at the IMU rate. omega is the instantaneous body
    rate; acc is the world-frame acceleration (time derivative of v).
    """
    t: np.ndarray
    R: np.ndarray
    v: np.ndarray
    p: np.ndarray
    omega: np.ndarray
    acc: np.ndarray

    def __len__(self):
        return len(self.t)

    @property
    def dt(self):
        return float(self.t[1] - self.t[0])

    def specific_force(self, gravity=GRAVITY):
        """Body-frame accelerometer signal R^T (acc - g)."""
        return np.einsum("nji,nj->ni", self.R, self.acc - np.asarray(gravity, dtype=float))

    def transformed(self, R_AW, p_AW):
        """The same motion expressed in frame A, given the pose of W in A."""
        R_AW = np.asarray(R_AW, dtype=float)
        return GroundTruth(self.t, R_AW @ self.R, self.v @ R_AW.T,
                           self.p @ R_AW.T + np.asarray(p_AW, dtype=float),
                           self.omega, self.acc @ R_AW.T)

    def path_length(self):
        return float(np.linalg.norm(np.diff(self.p, axis=0), axis=1).sum())

    def index_at(self, t):
        return int(round((t - self.t[0]) / self.dt))

    def camera_poses(self, extrinsic, indices=None):
        """(R_WC, p_WC) arrays for the given sample indices."""
        idx = slice(None) if indices is None else np.asarray(indices)
        R, p = self.R[idx], self.p[idx]
        return R @ extrinsic.R_IC, p + R @ extrinsic.p_IC


def _euler_rates_to_body(roll, pitch, d_yaw, d_pitch, d_roll):
    sr, cr = np.sin(roll), np.cos(roll)
    sp, cp = np.sin(pitch), np.cos(pitch)
    return np.c_[d_roll - sp * d_yaw,
                 cr * d_pitch + sr * cp * d_yaw,
                 -sr * d_pitch + cr * cp * d_yaw]


def gen_trajectory(spec):
    """
    Cubic splines through the waypoint positions and yaws, sampled at the
    IMU rate. Roll and pitch follow a small sinusoid so every axis is
    excited. Body rates and accelerations come from the analytic
    spline derivatives.
    """
    w = spec.table
    t0, t1 = w[0, 0], w[-1, 0]
    n = int(math.floor((t1 - t0) * spec.imu_rate + 1e-9)) + 1
    t = t0 + np.arange(n) / spec.imu_rate

    pos = CubicSpline(w[:, 0], w[:, 1:4], bc_type="natural")
    heading = CubicSpline(w[:, 0], np.unwrap(w[:, 4]), bc_type="natural")
    p, v, acc = pos(t), pos(t, 1), pos(t, 2)
    yaw, d_yaw = heading(t), heading(t, 1)

    k = 2 * math.pi / spec.wobble_period
    roll = spec.wobble * np.sin(k * (t - t0))
    d_roll = spec.wobble * k * np.cos(k * (t - t0))
    k2 = k / 1.37
    pitch = spec.wobble * np.sin(k2 * (t - t0) + 0.5)
    d_pitch = spec.wobble * k2 * np.cos(k2 * (t - t0) + 0.5)

    R = Rotation.from_euler("ZYX", np.c_[yaw, pitch, roll]).as_matrix()
    omega = _euler_rates_to_body(roll, pitch, d_yaw, d_pitch, d_roll)
    logger.debug("trajectory: %d samples over %.1f s", n, t[-1] - t0)
    return GroundTruth(t, R, v, p, omega, acc)


def ideal_imu(truth, gravity=GRAVITY):
    """
    Interval-mean readings: the rotation increment over each IMU interval
    and the specific force that, held constant while the body rotates,
    reproduces the next velocity.
    """
    dt = truth.dt
    gravity = np.asarray(gravity, dtype=float)
    n = len(truth) - 1
    omega = np.empty((n, 3))
    accel = np.empty((n, 3))
    for k in range(n):
        phi = so3_log(truth.R[k].T @ truth.R[k + 1])
        omega[k] = phi / dt
        dv = truth.v[k + 1] - truth.v[k] - gravity * dt
        accel[k] = so3_left_jacobian_inv(phi) @ truth.R[k].T @ dv / dt
    return omega, accel


def gen_imu(truth, noise=None, seed=0, gravity=GRAVITY):
    """
    Noisy IMU stream, one sample per truth interval. White noise is drawn
    per sample with sigma / sqrt(dt); biases start at zero and follow
    random walks with sigma_w * sqrt(dt) steps.
    """
    noise = NoiseParams() if noise is None else noise
    omega, accel = ideal_imu(truth, gravity)
    dt = truth.dt
    n = len(omega)
    rng = np.random.default_rng(seed)
    n_g = rng.normal(size=(n, 3)) * (noise.sigma_g / math.sqrt(dt))
    n_a = rng.normal(size=(n, 3)) * (noise.sigma_a / math.sqrt(dt))
    walk_g = rng.normal(size=(n, 3)) * (noise.sigma_bg * math.sqrt(dt))
    walk_a = rng.normal(size=(n, 3)) * (noise.sigma_ba * math.sqrt(dt))
    b_g = np.vstack([np.zeros(3), np.cumsum(walk_g, axis=0)[:-1]])
    b_a = np.vstack([np.zeros(3), np.cumsum(walk_a, axis=0)[:-1]])
    gyro = omega + b_g + n_g
    acc = accel + b_a + n_a
    return [ImuSample(float(truth.t[k]), gyro[k], acc[k]) for k in range(n)]


# --- map ---

class MapBundle:
    """
    Pre-built map in frame G: keyframe camera poses with per-keyframe
    (sigma_theta rad, sigma_p m), feature positions and the keyframe
    observations of each feature.
    """

    def __init__(self, keyframes, sigmas, features, observations):
        self.keyframes = tuple(keyframes)
        self.sigmas = np.asarray(sigmas, dtype=float).reshape(len(self.keyframes), 2)
        self.features = dict(features)
        self.observations = observations.reset_index(drop=True)
        self._kf_index = {kf.kf_id: j for j, kf in enumerate(self.keyframes)}
        unknown_kf = set(self.observations["kf_id"]) - set(self._kf_index)
        unknown_f = set(self.observations["feature_id"]) - set(self.features)
        if unknown_kf or unknown_f:
            raise SimulationError(f"observations reference unknown keyframes {sorted(unknown_kf)[:5]} "
                                  f"or features {sorted(unknown_f)[:5]}")
        self._by_feature = {
            int(fid): [(int(row.kf_id), np.array([row.u, row.v])) for row in group.itertuples()]
            for fid, group in self.observations.groupby("feature_id", sort=True)
        }

    def __repr__(self):
        return (f"MapBundle({len(self.keyframes)} keyframes, {len(self.features)} features, "
                f"{len(self.observations)} observations)")

    def keyframe(self, kf_id):
        return self.keyframes[self._kf_index[kf_id]]

    def observations_of(self, feature_id):
        return self._by_feature.get(feature_id, [])

    def keyframe_prior(self, kf_id, error_param):
        """
        6x6 prior of one keyframe over (theta, p) in the given chart. The
        perturbation is drawn as R = exp(d_theta) R_true, p = p_true + d_p;
        the invariant se(3) error maps it through [[I, 0], [p^, I]].
        """
        s_theta, s_p = self.sigmas[self._kf_index[kf_id]]
        P = np.diag(np.r_[np.full(3, s_theta ** 2), np.full(3, s_p ** 2)])
        if error_param == INVARIANT:
            J = np.eye(6)
            J[3:, :3] = skew(self.keyframe(kf_id).p_GKF)
            P = J @ P @ J.T
        return P

    def max_reprojection_error(self, camera):
        worst = 0.0
        for row in self.observations.itertuples():
            kf = self.keyframe(int(row.kf_id))
            p_C = kf.R_GKF.T @ (self.features[int(row.feature_id)] - kf.p_GKF)
            worst = max(worst, float(np.abs(camera.project(p_C) - [row.u, row.v]).max()))
        return worst


def _sample_in_frustum(rng, camera, R_WC, p_WC, n, depth_range):
    u = rng.uniform(IMAGE_MARGIN, camera.width - IMAGE_MARGIN, n)
    v = rng.uniform(IMAGE_MARGIN, camera.height - IMAGE_MARGIN, n)
    z = rng.uniform(depth_range[0], depth_range[1], n)
    p_C = np.c_[(u - camera.cx) / camera.fx * z, (v - camera.cy) / camera.fy * z, z]
    return p_C @ R_WC.T + p_WC


def _project_many(camera, R_WC, p_WC, points, max_depth):
    """Pixels of points (n, 3) in one camera and the mask of visible ones."""
    p_C = (points - p_WC) @ R_WC
    z = p_C[:, 2]
    safe = np.where(np.abs(z) > 1e-9, z, 1e-9)
    uv = np.c_[camera.fx * p_C[:, 0] / safe + camera.cx, camera.fy * p_C[:, 1] / safe + camera.cy]
    visible = ((z > max(camera.z_min, MIN_VISIBLE_DEPTH)) & (z < max_depth)
               & (uv[:, 0] >= 0) & (uv[:, 0] < camera.width)
               & (uv[:, 1] >= 0) & (uv[:, 1] < camera.height))
    return uv, visible


def _keyframe_indices(truth, spacing):
    dist = np.r_[0.0, np.cumsum(np.linalg.norm(np.diff(truth.p, axis=0), axis=1))]
    marks = np.arange(0.0, dist[-1], spacing)
    return np.unique(np.searchsorted(dist, marks))


def gen_map(map_truth, n_features, perturb, seed=0, camera=None, extrinsic=DEFAULT_EXTRINSIC,
            keyframe_spacing=5.0, depth_range=(3.0, 30.0), sigma_px=None,
            perfect_sigmas=(math.radians(0.01), 1e-4)):
    """
    Keyframes every keyframe_spacing metres along the map run, n_features
    new features in each keyframe's frustum, observed from every keyframe
    that sees them.

    perturb: (sigma_p m, sigma_o rad). Returns (true bundle, noisy bundle).
    The noisy bundle holds perturbed keyframes, noisy pixels and features
    re-triangulated from both; features that fail triangulation are left
    out of it.
    """
    camera = PinholeCamera() if camera is None else camera
    sigma_p, sigma_o = perturb
    sigma_px = camera.sigma_px if sigma_px is None else sigma_px
    if min(sigma_p, sigma_o, sigma_px) < 0:
        raise SimulationError("map perturbation sigmas must be >= 0")
    rng = np.random.default_rng(seed)
    max_depth = depth_range[1] * MAX_DEPTH_FACTOR

    idx = _keyframe_indices(map_truth, keyframe_spacing)
    R_WC, p_WC = map_truth.camera_poses(extrinsic, idx)
    keyframes = [MapKeyframePose(R_WC[j], p_WC[j], j) for j in range(len(idx))]

    points = np.vstack([_sample_in_frustum(rng, camera, kf.R_GKF, kf.p_GKF, n_features, depth_range)
                        for kf in keyframes])
    rows = []
    for kf in keyframes:
        uv, visible = _project_many(camera, kf.R_GKF, kf.p_GKF, points, max_depth)
        for fid in np.flatnonzero(visible):
            rows.append((kf.kf_id, int(fid), uv[fid, 0], uv[fid, 1]))
    obs = pd.DataFrame(rows, columns=["kf_id", "feature_id", "u", "v"])
    views = obs.groupby("feature_id")["kf_id"].count()
    keep = set()
    for fid, group in obs[obs["feature_id"].isin(views[views >= 2].index)].groupby("feature_id"):
        poses = [(keyframes[k].R_GKF, keyframes[k].p_GKF) for k in group["kf_id"]]
        try:
            # exact data; rejects only geometry too weak to triangulate at all
            triangulate(camera, poses, list(group[["u", "v"]].to_numpy()))
        except TriangulationError:
            continue
        keep.add(int(fid))
    obs = obs[obs["feature_id"].isin(keep)].sort_values(["feature_id", "kf_id"])
    features = {fid: points[fid] for fid in sorted(keep)}
    true_bundle = MapBundle(keyframes, np.tile(perfect_sigmas, (len(keyframes), 1)), features, obs)

    noisy_kfs = [MapKeyframePose(so3_exp(rng.normal(0.0, 1.0, 3) * sigma_o) @ kf.R_GKF,
                                 kf.p_GKF + rng.normal(0.0, 1.0, 3) * sigma_p, kf.kf_id)
                 for kf in keyframes]
    noisy_obs = obs.copy()
    noisy_obs[["u", "v"]] = obs[["u", "v"]].to_numpy() + rng.normal(size=(len(obs), 2)) * sigma_px
    noisy_features = {}
    for fid, group in noisy_obs.groupby("feature_id", sort=True):
        poses = [(noisy_kfs[k].R_GKF, noisy_kfs[k].p_GKF) for k in group["kf_id"]]
        try:
            noisy_features[int(fid)] = triangulate(camera, poses, list(group[["u", "v"]].to_numpy()))
        except TriangulationError as e:
            logger.debug("map feature %s dropped: %s", fid, e)
    noisy_obs = noisy_obs[noisy_obs["feature_id"].isin(set(noisy_features))]
    dropped = len(features) - len(noisy_features)
    if dropped:
        logger.info("%d of %d map features failed triangulation", dropped, len(features))
    noisy_bundle = MapBundle(noisy_kfs, np.tile([sigma_o, sigma_p], (len(keyframes), 1)),
                             noisy_features, noisy_obs)
    return true_bundle, noisy_bundle


# --- measurements ---

@dataclass(frozen=True)
class MatchSchedule:
    """Map matches every `interval` frames, none inside a dropout window [t0, t1)."""
    interval: int = 1
    dropouts: tuple = ()

    def __post_init__(self):
        if self.interval < 1:
            raise SimulationError("match interval must be >= 1")
        for window in self.dropouts:
            if len(window) != 2 or window[1] <= window[0]:
                raise SimulationError(f"invalid dropout window {window}")

    def allows(self, frame_index, t):
        if frame_index % self.interval:
            return False
        return not any(t0 <= t < t1 for t0, t1 in self.dropouts)


@dataclass(frozen=True, eq=False)
class Frame:
    """One camera frame: noisy local feature pixels by id and the map matches."""
    t: float
    imu_index: int
    local_obs: dict
    matches: tuple = ()


@dataclass(frozen=True)
class SimConfig:
    imu_rate: float = 200.0
    cam_rate: float = 10.0
    duration_scale: float = 1.0
    saddle_radius: float = 49.5
    saddle_height: float = 5.0
    speed: float = 3.0
    map_offset: tuple = (1.0, -1.0, 0.5)
    yaw_deg: float = 30.0
    roll_deg: float = 3.0
    pitch_deg: float = -2.0
    translation: tuple = (5.0, -3.0, 1.0)
    n_local_features: int = 12
    station_spacing: float = 2.0
    max_tracks: int = 40
    depth_range: tuple = (3.0, 30.0)
    noise: NoiseParams = field(default_factory=NoiseParams)
    camera: PinholeCamera = field(default_factory=PinholeCamera)
    map_mode: str = "imperfect"
    sigma_p: float = 0.1
    sigma_o_deg: float = 0.9
    perfect_sigma_p: float = 1e-4
    perfect_sigma_o_deg: float = 0.01
    keyframe_spacing: float = 5.0
    features_per_keyframe: int = 8
    max_matches: int = 15
    max_keyframes_per_match: int = 3
    match_interval: int = 1
    dropouts: tuple = ()

    def __post_init__(self):
        if self.map_mode not in ("perfect", "imperfect"):
            raise SimulationError(f"unknown map mode '{self.map_mode}'")
        for name in ("sigma_p", "sigma_o_deg", "perfect_sigma_p", "perfect_sigma_o_deg"):
            if getattr(self, name) < 0:
                raise SimulationError(f"{name} must be >= 0")
        if self.depth_range[0] <= 0 or self.depth_range[1] <= self.depth_range[0]:
            raise SimulationError(f"invalid depth range {self.depth_range}")

    @property
    def R_LG(self):
        return Rotation.from_euler("ZYX", [self.yaw_deg, self.pitch_deg, self.roll_deg],
                                   degrees=True).as_matrix()

    @property
    def p_LG(self):
        return np.asarray(self.translation, dtype=float)

    @property
    def schedule(self):
        return MatchSchedule(self.match_interval, tuple(tuple(w) for w in self.dropouts))

    def spec(self, offset=(0.0, 0.0, 0.0)):
        return saddle_spec(self.saddle_radius, self.saddle_height, self.speed, offset=offset,
                           duration_scale=self.duration_scale, imu_rate=self.imu_rate,
                           cam_rate=self.cam_rate)


def _local_landmarks(rng, truth, config, extrinsic):
    idx = _keyframe_indices(truth, config.station_spacing)
    R_WC, p_WC = truth.camera_poses(extrinsic, idx)
    return np.vstack([_sample_in_frustum(rng, config.camera, R_WC[j], p_WC[j],
                                         config.n_local_features, config.depth_range)
                      for j in range(len(idx))])


def gen_measurements(truth, map_true, map_used, R_LG, p_LG, schedule, seed=0,
                     config=None, extrinsic=DEFAULT_EXTRINSIC):
    """
    Per-frame local feature pixels and map matches for a run given in L.

    Local features are scattered in the camera frustum at stations along
    the run and tracked while visible, previously tracked ones first, up
    to max_tracks. Map matches use the true map for visibility and the
    pixel of the current frame, and map_used for the feature position and
    keyframe observations.
    """
    config = SimConfig() if config is None else config
    camera = config.camera
    rng = np.random.default_rng(seed)
    step = int(round(config.imu_rate / config.cam_rate))
    max_depth = config.depth_range[1] * MAX_DEPTH_FACTOR

    landmarks = _local_landmarks(rng, truth, config, extrinsic)
    map_ids = np.array(sorted(map_used.features), dtype=int)
    map_L = (np.array([map_true.features[i] for i in map_ids]).reshape(-1, 3) @ np.asarray(R_LG).T
             + p_LG)

    frames, tracked = [], []
    for frame_index, k in enumerate(range(0, len(truth), step)):
        t = float(truth.t[k])
        R_WC, p_WC = truth.camera_poses(extrinsic, [k])
        uv, visible = _project_many(camera, R_WC[0], p_WC[0], landmarks, max_depth)
        vis = set(np.flatnonzero(visible).tolist())
        kept = [fid for fid in tracked if fid in vis]
        fresh = sorted(vis.difference(kept))
        tracked = (kept + fresh)[:config.max_tracks]
        noisy = uv[tracked] + rng.normal(size=(len(tracked), 2)) * camera.sigma_px
        local_obs = {int(fid): noisy[i] for i, fid in enumerate(tracked)}

        matches = ()
        if len(map_ids) and schedule.allows(frame_index, t):
            uv_m, vis_m = _project_many(camera, R_WC[0], p_WC[0], map_L, max_depth)
            candidates = rng.permutation(np.flatnonzero(vis_m))[:config.max_matches]
            matches = tuple(
                MapMatch(int(map_ids[i]), map_used.features[int(map_ids[i])],
                         uv_m[i] + rng.normal(size=2) * camera.sigma_px,
                         tuple(map_used.observations_of(int(map_ids[i]))[:config.max_keyframes_per_match]))
                for i in sorted(candidates))
        frames.append(Frame(t, k, local_obs, matches))
    return frames


@dataclass(frozen=True, eq=False)
class Simulation:
    """Everything one Monte Carlo run consumes, plus the truth to score it."""
    config: SimConfig
    seed: int
    truth: GroundTruth
    map_truth: GroundTruth
    imu: tuple
    frames: tuple
    map_true: MapBundle
    map_noisy: MapBundle
    extrinsic: Extrinsic = DEFAULT_EXTRINSIC

    @property
    def R_LG(self):
        return self.config.R_LG

    @property
    def p_LG(self):
        return self.config.p_LG

    @property
    def map_used(self):
        return self.map_true if self.config.map_mode == "perfect" else self.map_noisy

    @property
    def truth_in_map(self):
        """Query run expressed in G."""
        R_GL = self.R_LG.T
        return self.truth.transformed(R_GL, -R_GL @ self.p_LG)


def simulate(config=None, seed=0, gravity=GRAVITY, extrinsic=DEFAULT_EXTRINSIC):
    """Generates one complete run; the same (config, seed) gives identical data."""
    config = SimConfig() if config is None else config
    imu_seed, map_seed, meas_seed = np.random.SeedSequence(seed).spawn(3)

    query_G = gen_trajectory(config.spec())
    map_truth = gen_trajectory(config.spec(offset=config.map_offset))
    truth = query_G.transformed(config.R_LG, config.p_LG)

    imu = gen_imu(truth, config.noise, imu_seed, gravity)
    sigma_px = config.camera.sigma_px if config.map_mode == "imperfect" else 0.0
    map_true, map_noisy = gen_map(
        map_truth, config.features_per_keyframe,
        (config.sigma_p, math.radians(config.sigma_o_deg)), map_seed,
        camera=config.camera, extrinsic=extrinsic, keyframe_spacing=config.keyframe_spacing,
        depth_range=config.depth_range, sigma_px=sigma_px,
        perfect_sigmas=(math.radians(config.perfect_sigma_o_deg), config.perfect_sigma_p))
    map_used = map_true if config.map_mode == "perfect" else map_noisy
    frames = gen_measurements(truth, map_true, map_used, config.R_LG, config.p_LG,
                              config.schedule, meas_seed, config, extrinsic)
    logger.info("simulated seed %s: %.0f m, %d IMU samples, %d frames, %s",
                seed, truth.path_length(), len(imu), len(frames), map_used)
    return Simulation(config, seed, truth, map_truth, tuple(imu), tuple(frames),
                      map_true, map_noisy, extrinsic)
