"""
The five filter variants and the frame loop that drives them over a
simulated run: propagate to the frame, clone, update with finished local
tracks, initialize the relative transformation and update with map
matches, then record estimate, truth and covariance.
"""

import logging
import math
import time
from dataclasses import dataclass, replace

import numpy as np

from event_logger import FilterEvents
from liegroup import compose, group_exp, group_log, inverse, so3_exp
from measurement import FeatureTrack
from metrics import RunRecord, Trajectory
from propagation import propagate_interval
from state import (INVARIANT, STANDARD, AugmentedState, NavState, StateLayout, augment_clone,
                   init_augmented_variable, insert_keyframes, marginalize_oldest, retract)
from updates import CHI2_CONFIDENCE, MapUpdatePolicy, map_update, msckf_local_update

logger = logging.getLogger(__name__)

VIO = "vio"
MSC_EKF = "msc-ekf"
MSC_S_EKF = "msc-s-ekf"
MSC_IKF = "msc-ikf"
MSOC_S_IKF = "msoc-s-ikf"

PERFECT_KEYFRAME_SIGMA_PX = 0.01

RECORD_INDEX = np.concatenate([np.arange(s.start, s.stop) for s in (
    StateLayout.THETA_LI, StateLayout.P_LI, StateLayout.THETA_LG, StateLayout.P_LG)])


@dataclass(frozen=True)
class Variant:
    name: str
    error_param: str
    policy: MapUpdatePolicy = None

    @property
    def uses_map(self):
        return self.policy is not None

    @property
    def schmidt(self):
        return self.uses_map and self.policy.schmidt


VARIANTS = {v.name: v for v in (
    Variant(VIO, INVARIANT),
    Variant(MSC_EKF, STANDARD, MapUpdatePolicy(use_keyframes=False, schmidt=False, oc=False)),
    Variant(MSC_S_EKF, STANDARD, MapUpdatePolicy(use_keyframes=True, schmidt=True, oc=False)),
    Variant(MSC_IKF, INVARIANT, MapUpdatePolicy(use_keyframes=False, schmidt=False, oc=False)),
    Variant(MSOC_S_IKF, INVARIANT, MapUpdatePolicy(use_keyframes=True, schmidt=True, oc=True)),
)}
VARIANT_NAMES = tuple(VARIANTS)


@dataclass(frozen=True)
class FilterSettings:
    max_clones: int = 11
    chi2_confidence: float = CHI2_CONFIDENCE
    min_track_length: int = 3
    init_delay: float = 1.0
    init_sigma_p: float = 0.3
    init_sigma_o_deg: float = 1.0
    sigma_theta_deg: float = 0.1
    sigma_v: float = 0.05
    sigma_p: float = 0.02
    sigma_bg: float = 1e-4
    sigma_ba: float = 1e-3
    perturb_initial: bool = True
    keyframe_sigma_px: float = None
    gravity: tuple = (0.0, 0.0, -9.8)

    def initial_covariance(self):
        """Prior over the 27 core slots; relative and extrinsic slots start at zero."""
        diag = np.r_[np.full(3, math.radians(self.sigma_theta_deg) ** 2),
                     np.full(3, self.sigma_v ** 2), np.full(3, self.sigma_p ** 2),
                     np.zeros(6),
                     np.full(3, self.sigma_bg ** 2), np.full(3, self.sigma_ba ** 2),
                     np.zeros(6)]
        return np.diag(diag)

    def relative_covariance(self):
        """Over [p_LG, theta_LG]."""
        return np.diag(np.r_[np.full(3, self.init_sigma_p ** 2),
                             np.full(3, math.radians(self.init_sigma_o_deg) ** 2)])


@dataclass(frozen=True, eq=False)
class FilterResult:
    record: RunRecord
    events: FilterEvents
    wall_time: float
    state: AugmentedState


class MapLocalizer:
    """One filter instance; owns its state, track buffer and event buffer."""

    def __init__(self, variant, settings=None, camera=None, noise=None):
        if isinstance(variant, str):
            if variant not in VARIANTS:
                raise ValueError(f"unknown variant '{variant}'")
            variant = VARIANTS[variant]
        self.variant = variant
        self.settings = FilterSettings() if settings is None else settings
        self.camera = camera
        self.noise = noise
        self.gravity = np.asarray(self.settings.gravity, dtype=float)
        self.events = FilterEvents()
        self.tracks = {}

    def initial_state(self, sim):
        """Truth at the first sample, perturbed by a draw from the prior in this variant's chart."""
        truth = sim.truth
        nav = NavState(truth.R[0], truth.v[0], truth.p[0])
        P0 = self.settings.initial_covariance()
        state = AugmentedState(nav=nav, extrinsic=sim.extrinsic, P_aa=P0,
                               error_param=self.variant.error_param,
                               max_clones=self.settings.max_clones, timestamp=float(truth.t[0]))
        if self.settings.perturb_initial:
            rng = np.random.default_rng([sim.seed, 1])
            state = retract(state, rng.multivariate_normal(np.zeros(len(P0)), P0))
        return state

    def _relative_guess(self, state, sim, k):
        """
        Stand-in for a map-based initializer: the true relative
        transformation with an error drawn in this variant's chart,
        independent of the rest of the state.
        """
        R_LG, p_LG = sim.R_LG, sim.p_LG
        cov = self.settings.relative_covariance()
        delta = np.zeros(6)
        if self.settings.perturb_initial:
            delta = np.random.default_rng([sim.seed, 2]).multivariate_normal(np.zeros(6), cov)
        if self.variant.error_param == STANDARD:
            return so3_exp(delta[3:]) @ R_LG, p_LG + delta[:3]
        true_nav = NavState(sim.truth.R[k], sim.truth.v[k], sim.truth.p[k], p_LG, R_LG)
        est_nav = replace(state.nav, p_LG=p_LG, R_LG=R_LG)
        xi = group_log(compose(est_nav.group(), inverse(true_nav.group())))
        xi[StateLayout.P_LG] = delta[:3]
        xi[StateLayout.THETA_LG] = delta[3:]
        X = compose(group_exp(xi), true_nav.group())
        return X.extra_rotations[0], X.vectors[2]

    def _keyframe_sigma_px(self, sim):
        if self.settings.keyframe_sigma_px is not None:
            return self.settings.keyframe_sigma_px
        return PERFECT_KEYFRAME_SIGMA_PX if sim.config.map_mode == "perfect" else self.camera.sigma_px

    def _local_update(self, state, frame):
        t = frame.t
        for fid, uv in frame.local_obs.items():
            self.tracks.setdefault(fid, []).append((t, uv))
        finished = [fid for fid, obs in self.tracks.items()
                    if fid not in frame.local_obs or len(obs) >= self.settings.max_clones]
        tracks = [FeatureTrack(fid, tuple(self.tracks.pop(fid))) for fid in finished]
        if not tracks:
            return state
        return msckf_local_update(state, self.camera, tracks, schmidt=self.variant.schmidt,
                                  min_track_length=self.settings.min_track_length,
                                  confidence=self.settings.chi2_confidence, events=self.events)

    def _insert_keyframes(self, state, matches, bundle):
        known = set(state.keyframe_ids())
        needed = sorted({kf_id for m in matches for kf_id, _ in m.keyframe_obs} - known)
        if not needed:
            return state
        priors = np.array([bundle.keyframe_prior(kf_id, state.error_param) for kf_id in needed])
        return insert_keyframes(state, [bundle.keyframe(kf_id) for kf_id in needed], priors)

    def _map_update(self, state, frame, sim, t0):
        if not (self.variant.uses_map and frame.matches):
            return state
        if frame.t - t0 < self.settings.init_delay:
            return state
        if not state.is_initialized:
            R_LG, p_LG = self._relative_guess(state, sim, frame.imu_index)
            state = init_augmented_variable(state, R_LG, p_LG, self.settings.relative_covariance())
            self.events.record("augmented_initialized", t=frame.t)
            logger.debug("%s: relative transformation initialized at t=%.2f", self.variant.name, frame.t)
        if self.variant.policy.use_keyframes:
            state = self._insert_keyframes(state, frame.matches, sim.map_used)
        return map_update(state, self.camera, frame.matches, self.variant.policy,
                          confidence=self.settings.chi2_confidence,
                          kf_sigma_px=self._keyframe_sigma_px(sim), gravity=self.gravity,
                          events=self.events)

    def run(self, sim):
        """Processes every frame of a simulated run and returns its RunRecord."""
        self.camera = sim.config.camera if self.camera is None else self.camera
        self.noise = sim.config.noise if self.noise is None else self.noise
        self.events = FilterEvents()
        self.tracks = {}
        started = time.perf_counter()

        state = self.initial_state(sim)
        t0 = state.timestamp
        prev = 0
        rows = []
        for frame in sim.frames:
            k = frame.imu_index
            if k > prev:
                state = propagate_interval(state, sim.imu[prev:k], frame.t, self.noise, self.gravity)
                prev = k
            state = augment_clone(state, frame.t)
            state = self._local_update(state, frame)
            state = self._map_update(state, frame, sim, t0)
            if len(state.clones) >= state.max_clones:
                state = marginalize_oldest(state)
            rows.append((state.nav.R_LI, state.nav.p_LI, state.nav.R_LG, state.nav.p_LG,
                         state.is_initialized, state.P_aa[np.ix_(RECORD_INDEX, RECORD_INDEX)]))

        record = self._record(sim, rows)
        wall = time.perf_counter() - started
        logger.info("%s seed %s: %d frames in %.1f s, events %s", self.variant.name, sim.seed,
                    len(rows), wall, self.events.counts())
        return FilterResult(record, self.events, wall, state)

    def _record(self, sim, rows):
        idx = [f.imu_index for f in sim.frames]
        t = sim.truth.t[idx]
        n = len(idx)
        R_LI, p_LI, R_LG, p_LG, has_relative, P = zip(*rows)
        return RunRecord(self.variant.name, sim.seed, self.variant.error_param,
                         Trajectory(t, R_LI, p_LI),
                         Trajectory(t, sim.truth.R[idx], sim.truth.p[idx]),
                         Trajectory(t, R_LG, p_LG),
                         Trajectory(t, np.tile(sim.R_LG, (n, 1, 1)), np.tile(sim.p_LG, (n, 1))),
                         np.array(has_relative), np.array(P))


def run_variant(sim, variant, settings=None, camera=None, noise=None):
    """One variant over one simulated run."""
    return MapLocalizer(variant, settings, camera, noise).run(sim)

