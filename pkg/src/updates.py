"""
Kalman updates over the augmented state: the Schmidt update (nuisance
block considered but never corrected), the full update, and the two
measurement pipelines built on them (local MSCKF tracks and map matches).
"""

import logging
from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.stats import chi2

from measurement import (MeasurementError, StackedResidual, local_obs_jacobian,
                         map_obs_jacobian_current, map_obs_jacobian_keyframe,
                         oc_null_space, oc_project, stack_and_project_feature)
from propagation import GRAVITY
from state import retract, symmetrize
from triangulation import TriangulationError, triangulate

logger = logging.getLogger(__name__)

MAX_CONDITION = 1e12
CHI2_CONFIDENCE = 0.95


@dataclass(frozen=True)
class MapUpdatePolicy:
    """How a variant consumes map matches."""
    use_keyframes: bool
    schmidt: bool
    oc: bool


def chi2_threshold(dof, confidence=CHI2_CONFIDENCE):
    return chi2.ppf(confidence, dof)


def _factor(S):
    """Cholesky factor of S or None when S is ill-conditioned or not PD."""
    if not np.all(np.isfinite(S)):
        return None
    cond = np.linalg.cond(S)
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        return None
    try:
        return cho_factor(S)
    except LinAlgError:
        return None


def _record(events, kind, t, **details):
    if events is not None:
        events.record(kind, t=t, **details)


def passes_gate(r, S, confidence=CHI2_CONFIDENCE, events=None, t=None):
    """Chi-square test of r^T S^-1 r against the confidence quantile."""
    factor = _factor(S)
    if factor is None:
        _record(events, "update_skipped", t, reason="ill-conditioned S", rows=len(r))
        return False
    return _gate(r, factor, confidence, events, t)


def _gate(r, factor, confidence, events, t):
    stat = float(r @ cho_solve(factor, r))
    threshold = chi2_threshold(len(r), confidence)
    if stat > threshold:
        _record(events, "gated", t, statistic=round(stat, 3), threshold=round(threshold, 3))
        return False
    return True


def innovation_covariance(state, H, V):
    """H P H^T + V using only the nuisance columns H touches."""
    a = state.layout.active_dim
    H_a, H_n = H[:, :a], H[:, a:]
    cols = np.flatnonzero(np.any(H_n != 0.0, axis=0))
    H_k = H_n[:, cols]
    PHt = state.P_aa @ H_a.T + state.P_an[:, cols] @ H_k.T
    S = H_a @ PHt + H_k @ (state.P_an[:, cols].T @ H_a.T + state.P_nn[np.ix_(cols, cols)] @ H_k.T) + V
    return symmetrize(S), PHt, cols


def schmidt_update(state, sr, gate=True, confidence=CHI2_CONFIDENCE, events=None):
    """
    Updates the active mean and P_aa, P_an; P_nn and the keyframe means are
    left untouched. Cost is linear in the number of keyframes.
    """
    if sr.rows == 0:
        return state
    a = state.layout.active_dim
    S, PHt_a, cols = innovation_covariance(state, sr.H, sr.V)
    factor = _factor(S)
    if factor is None:
        _record(events, "update_skipped", state.timestamp, reason="ill-conditioned S", rows=sr.rows)
        return state
    if gate and not _gate(sr.r, factor, confidence, events, state.timestamp):
        return state

    K_a = cho_solve(factor, PHt_a.T).T
    H_a, H_k = sr.H[:, :a], sr.H[:, a:][:, cols]
    HP_n = H_a @ state.P_an + H_k @ state.P_nn[cols, :]
    P_aa = symmetrize(state.P_aa - K_a @ S @ K_a.T)
    P_an = state.P_an - K_a @ HP_n
    updated = retract(state, K_a @ sr.r)
    return replace(updated, P_aa=P_aa, P_an=P_an)


def full_update(state, sr, gate=True, confidence=CHI2_CONFIDENCE, events=None):
    """Kalman update of the whole state, Joseph-form covariance."""
    if sr.rows == 0:
        return state
    P = state.covariance
    PHt = P @ sr.H.T
    S = symmetrize(sr.H @ PHt + sr.V)
    factor = _factor(S)
    if factor is None:
        _record(events, "update_skipped", state.timestamp, reason="ill-conditioned S", rows=sr.rows)
        return state
    if gate and not _gate(sr.r, factor, confidence, events, state.timestamp):
        return state

    K = cho_solve(factor, PHt.T).T
    I_KH = np.eye(len(P)) - K @ sr.H
    P_new = symmetrize(I_KH @ P @ I_KH.T + K @ sr.V @ K.T)
    updated = retract(state, K @ sr.r, update_nuisance=True)
    return updated.with_covariance(P_new)


def _apply(state, sr, schmidt, events):
    if schmidt:
        return schmidt_update(state, sr, gate=False, events=events)
    return full_update(state, sr, gate=False, events=events)


def _feature_gate(state, sr, confidence, events):
    S, _, _ = innovation_covariance(state, sr.H, sr.V)
    return passes_gate(sr.r, S, confidence, events, state.timestamp)


def local_track_residual(state, camera, track):
    """
    Triangulates a track from the clone window and returns its projected
    residual, or raises TriangulationError / MeasurementError.
    """
    index = {c.timestamp: i for i, c in enumerate(state.clones)}
    obs = [(index[t], np.asarray(uv, dtype=float)) for t, uv in track.observations if t in index]
    if len(obs) < 2:
        raise MeasurementError(f"track {track.feature_id} has fewer than two views in the window")
    ext = state.extrinsic
    poses = [(state.clones[i].R_LI @ ext.R_IC, state.clones[i].R_LI @ ext.p_IC + state.clones[i].p_LI)
             for i, _ in obs]
    p_f = triangulate(camera, poses, [uv for _, uv in obs])

    H_x, H_f, r = [], [], []
    for i, uv in obs:
        pred, H, A = local_obs_jacobian(state, p_f, camera, i)
        H_x.append(H)
        H_f.append(A)
        r.append(uv - pred)
    r = np.concatenate(r)
    return stack_and_project_feature(np.vstack(H_x), np.vstack(H_f), r, camera.noise_cov(len(r)))


def msckf_local_update(state, camera, tracks, schmidt=False, min_track_length=3,
                       confidence=CHI2_CONFIDENCE, events=None):
    """
    One stacked update from every finished track: triangulate, build the
    per-view rows, project the feature out, gate per feature.
    """
    residuals = []
    for track in tracks:
        if len(track) < min_track_length:
            continue
        try:
            sr = local_track_residual(state, camera, track)
        except (TriangulationError, MeasurementError) as e:
            _record(events, "track_dropped", state.timestamp, feature=track.feature_id, reason=str(e))
            continue
        if _feature_gate(state, sr, confidence, events):
            residuals.append(sr)
    if not residuals:
        return state
    logger.debug("local update with %d tracks", len(residuals))
    return _apply(state, StackedResidual.stack(residuals, state.layout.dim), schmidt, events)


def map_match_residual(state, camera, match, policy, kf_sigma_px=None, gravity=GRAVITY):
    """
    Rows of one map match. With keyframes, the current and keyframe rows
    are stacked and the map feature is projected out; without, the map
    feature is treated as exact.
    """
    pred, H_c, HF_c = map_obs_jacobian_current(state, camera, match.p_GF)
    r_c = np.asarray(match.current_uv, dtype=float) - pred
    if not policy.use_keyframes:
        return StackedResidual(r_c, H_c, camera.noise_cov(2))

    kf_ids, H_k, HF_k, r_k = [], [], [], []
    for kf_id, uv in match.keyframe_obs:
        try:
            pred_k, H, HF = map_obs_jacobian_keyframe(state, camera, match.p_GF, kf_id)
        except MeasurementError:
            continue
        kf_ids.append(kf_id)
        H_k.append(H)
        HF_k.append(HF)
        r_k.append(np.asarray(uv, dtype=float) - pred_k)
    if not kf_ids:
        raise MeasurementError(f"map match {match.feature_id} sees no keyframe in the state")

    if policy.oc:
        H_c, HF_c = _oc_current_rows(state, match, kf_ids, H_c, HF_c, gravity)

    H_x = np.vstack([H_c] + H_k)
    H_f = np.vstack([HF_c] + HF_k)
    r = np.concatenate([r_c] + r_k)
    V = np.diag(np.r_[np.full(2, camera.sigma_px ** 2),
                      np.full(2 * len(kf_ids), (camera.sigma_px if kf_sigma_px is None else kf_sigma_px) ** 2)])
    return stack_and_project_feature(H_x, H_f, r, V)


def _oc_current_rows(state, match, kf_ids, H_c, HF_c, gravity):
    """Projects current-frame rows onto the complement of the unobservable directions."""
    layout = state.layout
    a = layout.active_dim
    cols = list(range(a))
    for kf_id in kf_ids:
        s = layout.keyframe(state.keyframe_index(kf_id))
        cols += list(range(s.start, s.stop))
    compact = np.hstack([H_c[:, cols], HF_c])
    N3 = oc_null_space(state.oc_anchor, gravity, [match.p_GF], a, len(kf_ids))
    projected = oc_project(compact, N3)
    H_out = np.zeros_like(H_c)
    H_out[:, cols] = projected[:, :len(cols)]
    return H_out, projected[:, len(cols):]


def map_update(state, camera, matches, policy, confidence=CHI2_CONFIDENCE,
               kf_sigma_px=None, gravity=GRAVITY, events=None):
    """Stacks every usable map match and applies one Schmidt or full update."""
    if not state.is_initialized:
        raise MeasurementError("augmented variable is not initialized")
    residuals = []
    for match in matches:
        try:
            sr = map_match_residual(state, camera, match, policy, kf_sigma_px, gravity)
        except MeasurementError as e:
            logger.debug("map match %s dropped: %s", match.feature_id, e)
            continue
        if _feature_gate(state, sr, confidence, events):
            residuals.append(sr)
    if not residuals:
        return state
    return _apply(state, StackedResidual.stack(residuals, state.layout.dim), policy.schmidt, events)
