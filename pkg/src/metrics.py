"""
Accuracy and consistency metrics over Monte Carlo runs.

Each RunRecord holds, per camera frame, the estimate and truth of the
local pose (L<-I) and the relative transformation (L<-G), plus the
12x12 covariance over [theta_LI, p_LI, theta_LG, p_LG] in the chart of
the variant that produced it. The map pose (G<-I) is derived from both.
"""

import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.spatial.transform import Rotation
from scipy.stats import chi2

from liegroup import compose, group_log, inverse, so3_log
from state import ERROR_PARAMS, INVARIANT, NavState, StateLayout

logger = logging.getLogger(__name__)

LOCAL_POSE = "local_pose"
RELATIVE_TRANS = "relative_trans"
MAP_POSE = "map_pose"
VARIABLES = (LOCAL_POSE, RELATIVE_TRANS, MAP_POSE)

ORIENTATION = "orientation"
POSITION = "position"
POSE = "pose"
PARTS = {ORIENTATION: slice(0, 3), POSITION: slice(3, 6), POSE: slice(0, 6)}

NONE = "none"
FIRST_POSE = "first_pose"
UMEYAMA = "se3_umeyama"
ALIGN_MODES = (NONE, FIRST_POSE, UMEYAMA)

DEFAULT_RPE_LENGTHS = (100.0, 200.0, 500.0)
REGULARIZATION = 1e-12
RECORD_COV_DIM = 12
TUM_COLUMNS = ["timestamp", "tx", "ty", "tz", "qx", "qy", "qz", "qw"]


class MetricsError(ValueError):
    """Empty input, mismatched runs or too few poses."""


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Poses of frame B in frame A: R (n, 3, 3), p (n, 3)."""
    t: np.ndarray
    R: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float).reshape(-1)
        R = np.asarray(self.R, dtype=float).reshape(-1, 3, 3)
        p = np.asarray(self.p, dtype=float).reshape(-1, 3)
        if not len(t) == len(R) == len(p):
            raise MetricsError(f"trajectory lengths differ: {len(t)}, {len(R)}, {len(p)}")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "p", p)

    def __len__(self):
        return len(self.t)

    def __getitem__(self, idx):
        return Trajectory(self.t[idx], self.R[idx], self.p[idx])

    def inverse(self):
        Rt = np.transpose(self.R, (0, 2, 1))
        return Trajectory(self.t, Rt, -np.einsum("nij,nj->ni", Rt, self.p))

    def compose(self, other):
        """Per-step self * other."""
        return Trajectory(self.t, self.R @ other.R,
                          np.einsum("nij,nj->ni", self.R, other.p) + self.p)

    def transformed(self, R, p):
        """Left-multiplies every pose by (R, p)."""
        return Trajectory(self.t, R @ self.R, self.p @ np.asarray(R).T + p)

    def distances(self):
        return np.r_[0.0, np.cumsum(np.linalg.norm(np.diff(self.p, axis=0), axis=1))]


def rotation_angles(R_a, R_b):
    """|log(R_a R_b^T)| per step, radians."""
    return np.array([np.linalg.norm(so3_log(a @ b.T)) for a, b in zip(R_a, R_b)])


@dataclass(frozen=True, eq=False)
class RunRecord:
    variant: str
    seed: int
    error_param: str
    local_est: Trajectory
    local_true: Trajectory
    relative_est: Trajectory
    relative_true: Trajectory
    has_relative: np.ndarray
    P: np.ndarray

    def __post_init__(self):
        if self.error_param not in ERROR_PARAMS:
            raise MetricsError(f"unknown error parameterization '{self.error_param}'")
        n = len(self.local_est)
        lengths = {n, len(self.local_true), len(self.relative_est), len(self.relative_true),
                   len(self.has_relative), len(self.P)}
        if len(lengths) != 1:
            raise MetricsError(f"run {self.variant}/{self.seed}: per-step arrays differ in length")
        if self.P.shape[1:] != (RECORD_COV_DIM, RECORD_COV_DIM):
            raise MetricsError(f"covariance must be {RECORD_COV_DIM}x{RECORD_COV_DIM} per step")
        object.__setattr__(self, "has_relative", np.asarray(self.has_relative, dtype=bool))

    def __len__(self):
        return len(self.local_est)

    @property
    def t(self):
        return self.local_est.t

    def estimate(self, variable):
        if variable == LOCAL_POSE:
            return self.local_est
        if variable == RELATIVE_TRANS:
            return self.relative_est
        if variable == MAP_POSE:
            return self.relative_est.inverse().compose(self.local_est)
        raise MetricsError(f"unknown variable '{variable}'")

    def truth(self, variable):
        if variable == LOCAL_POSE:
            return self.local_true
        if variable == RELATIVE_TRANS:
            return self.relative_true
        if variable == MAP_POSE:
            return self.relative_true.inverse().compose(self.local_true)
        raise MetricsError(f"unknown variable '{variable}'")

    def mask(self, variable):
        if variable == LOCAL_POSE:
            return np.ones(len(self), dtype=bool)
        return self.has_relative

    def covariance(self, variable):
        if variable == LOCAL_POSE:
            return self.P[:, :6, :6]
        if variable == RELATIVE_TRANS:
            return self.P[:, 6:, 6:]
        raise MetricsError(f"no covariance is recorded for '{variable}'")

    def plain_errors(self, variable):
        """[log(R_est R^T), p_est - p] per step."""
        est, true = self.estimate(variable), self.truth(variable)
        theta = np.array([so3_log(a @ b.T) for a, b in zip(est.R, true.R)])
        return np.hstack([theta, est.p - true.p])

    def chart_errors(self, variable):
        """
        Errors in the chart the covariance lives in, ordered [theta, p].
        The invariant chart uses the group log of X_hat X^-1 over the
        navigation group, so local and relative parts share the attitude
        error of the body.
        """
        if variable == MAP_POSE or self.error_param != INVARIANT:
            return self.plain_errors(variable)
        L = StateLayout
        rows = []
        for k in range(len(self)):
            eta = group_log(compose(self._group(self.local_est, self.relative_est, k),
                                    inverse(self._group(self.local_true, self.relative_true, k))))
            if variable == LOCAL_POSE:
                rows.append(np.r_[eta[L.THETA_LI], eta[L.P_LI]])
            else:
                rows.append(np.r_[eta[L.THETA_LG], eta[L.P_LG]])
        return np.array(rows).reshape(-1, 6)

    @staticmethod
    def _group(local, relative, k):
        return NavState(local.R[k], np.zeros(3), local.p[k], relative.p[k], relative.R[k]).group()

    def to_frame(self):
        cols = {"t": self.t, "has_relative": self.has_relative.astype(int),
                "error_param": self.error_param}
        for name, est, true in (("LI", self.local_est, self.local_true),
                                ("LG", self.relative_est, self.relative_true)):
            for tag, traj in (("est", est), ("true", true)):
                q = Rotation.from_matrix(traj.R).as_quat()
                for i, axis in enumerate("xyzw"):
                    cols[f"{tag}_R_{name}_q{axis}"] = q[:, i]
            for tag, traj in (("est", est), ("true", true)):
                for i, axis in enumerate("xyz"):
                    cols[f"{tag}_p_{name}_{axis}"] = traj.p[:, i]
        iu = np.triu_indices(RECORD_COV_DIM)
        for i, j in zip(*iu):
            cols[f"P_{i}_{j}"] = self.P[:, i, j]
        return pd.DataFrame(cols)

    @classmethod
    def from_frame(cls, df, variant="", seed=0):
        if df.empty:
            raise MetricsError("run record has no rows")
        t = df["t"].to_numpy(dtype=float)

        def traj(tag, name):
            R = Rotation.from_quat(df[[f"{tag}_R_{name}_q{a}" for a in "xyzw"]].to_numpy()).as_matrix()
            return Trajectory(t, R, df[[f"{tag}_p_{name}_{a}" for a in "xyz"]].to_numpy())

        P = np.zeros((len(df), RECORD_COV_DIM, RECORD_COV_DIM))
        for i, j in zip(*np.triu_indices(RECORD_COV_DIM)):
            P[:, i, j] = P[:, j, i] = df[f"P_{i}_{j}"].to_numpy()
        return cls(variant, seed, str(df["error_param"].iloc[0]), traj("est", "LI"),
                   traj("true", "LI"), traj("est", "LG"), traj("true", "LG"),
                   df["has_relative"].to_numpy().astype(bool), P)


@dataclass(frozen=True, eq=False)
class MetricSummary:
    """Per-step table (column t plus one column per quantity) and time averages."""
    per_step: pd.DataFrame
    values: dict
    skipped: int = 0


def _check_records(records):
    records = list(records)
    if not records:
        raise MetricsError("no run records")
    n = len(records[0])
    if any(len(r) != n for r in records):
        raise MetricsError("runs have different numbers of steps")
    return records


def rmse(records, variable=LOCAL_POSE):
    """
    Per step: sqrt of the mean over runs of the squared orientation error
    (deg) and position error (m). Aggregate: mean over steps.
    """
    records = _check_records(records)
    mask = np.array([r.mask(variable) for r in records])
    ori, pos = [], []
    for rec in records:
        e = rec.plain_errors(variable)
        ori.append(np.degrees(np.linalg.norm(e[:, :3], axis=1)))
        pos.append(np.linalg.norm(e[:, 3:], axis=1))
    ori = np.where(mask, np.square(ori), np.nan)
    pos = np.where(mask, np.square(pos), np.nan)
    valid = mask.any(axis=0)
    per_step = pd.DataFrame({
        "t": records[0].t[valid],
        "orientation_deg": np.sqrt(np.nanmean(ori[:, valid], axis=0)),
        "position_m": np.sqrt(np.nanmean(pos[:, valid], axis=0)),
    })
    values = {c: float(per_step[c].mean()) if len(per_step) else float("nan")
              for c in ("orientation_deg", "position_m")}
    # standard error of the per-run position RMSE, the sampling noise across runs
    runs = mask.any(axis=1)
    per_run = np.sqrt(np.nanmean(pos[runs], axis=1)) if runs.any() else np.zeros(0)
    values["position_m_se"] = (float(np.std(per_run, ddof=1) / np.sqrt(len(per_run)))
                               if len(per_run) > 1 else float("nan"))
    return MetricSummary(per_step, values)


def umeyama(source, target):
    """(R, t) minimizing sum |target - (R source + t)|^2, no scale."""
    source = np.asarray(source, dtype=float)
    target = np.asarray(target, dtype=float)
    if len(source) < 2:
        raise MetricsError("alignment needs at least two poses")
    mu_s, mu_t = source.mean(axis=0), target.mean(axis=0)
    Sigma = (target - mu_t).T @ (source - mu_s) / len(source)
    U, _, Vt = np.linalg.svd(Sigma)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    return R, mu_t - R @ mu_s


def align(traj_est, traj_truth, mode=UMEYAMA):
    """Returns (aligned estimate, (R, t)) with aligned = (R, t) * estimate."""
    if mode == NONE:
        return traj_est, (np.eye(3), np.zeros(3))
    if not len(traj_est):
        raise MetricsError("cannot align an empty trajectory")
    if mode == FIRST_POSE:
        R = traj_truth.R[0] @ traj_est.R[0].T
        t = traj_truth.p[0] - R @ traj_est.p[0]
    elif mode == UMEYAMA:
        R, t = umeyama(traj_est.p, traj_truth.p)
    else:
        raise MetricsError(f"unknown alignment mode '{mode}'")
    return traj_est.transformed(R, t), (R, t)


def ate(records, variable=LOCAL_POSE, align_mode=UMEYAMA, eval_2d=False):
    """
    Root-mean-square error over time per run, averaged over runs. Map-frame
    poses are compared without alignment.
    """
    records = _check_records(records)
    if variable == MAP_POSE:
        align_mode = NONE
    ori, pos = [], []
    for rec in records:
        mask = rec.mask(variable)
        if not mask.any():
            continue
        est, true = rec.estimate(variable)[mask], rec.truth(variable)[mask]
        est, _ = align(est, true, align_mode)
        dp = est.p - true.p
        if eval_2d:
            dp = dp[:, :2]
        pos.append(np.sqrt(np.mean(np.sum(dp ** 2, axis=1))))
        ori.append(np.degrees(np.sqrt(np.mean(rotation_angles(est.R, true.R) ** 2))))
    if not pos:
        return {"orientation_deg": float("nan"), "position_m": float("nan")}
    return {"orientation_deg": float(np.mean(ori)), "position_m": float(np.mean(pos))}


def _segments(distances, length):
    start, out = 0, []
    while True:
        end = int(np.searchsorted(distances, distances[start] + length))
        if end >= len(distances):
            return out
        out.append((start, end))
        start = end


def rpe(records, lengths=DEFAULT_RPE_LENGTHS, variable=LOCAL_POSE, eval_2d=False):
    """
    Relative pose error over consecutive segments of each length (m,
    measured along the true path). One row per (length, run, segment).
    """
    records = _check_records(records)
    rows = []
    for length in lengths:
        used = 0
        for run, rec in enumerate(records):
            mask = rec.mask(variable)
            est, true = rec.estimate(variable)[mask], rec.truth(variable)[mask]
            if not len(true) or true.distances()[-1] < length:
                continue
            for seg, (i, j) in enumerate(_segments(true.distances(), length)):
                dR_t = true.R[i].T @ true.R[j]
                dR_e = est.R[i].T @ est.R[j]
                dp = est.R[i].T @ (est.p[j] - est.p[i]) - true.R[i].T @ (true.p[j] - true.p[i])
                if eval_2d:
                    dp = dp[:2]
                rows.append({"length": length, "run": run, "segment": seg,
                             "orientation_deg": float(np.degrees(np.linalg.norm(so3_log(dR_e @ dR_t.T)))),
                             "position_m": float(np.linalg.norm(dp))})
                used += 1
        if not used:
            logger.info("RPE length %.0f m skipped: trajectory is shorter", length)
    return pd.DataFrame(rows, columns=["length", "run", "segment", "orientation_deg", "position_m"])


def rpe_summary(rpe_df):
    """Mean and quartiles per segment length."""
    if rpe_df.empty:
        return pd.DataFrame(columns=["length", "n", "position_mean", "position_q25",
                                     "position_median", "position_q75", "orientation_mean"])
    g = rpe_df.groupby("length")
    return pd.DataFrame({
        "n": g["position_m"].count(),
        "position_mean": g["position_m"].mean(),
        "position_q25": g["position_m"].quantile(0.25),
        "position_median": g["position_m"].median(),
        "position_q75": g["position_m"].quantile(0.75),
        "orientation_mean": g["orientation_deg"].mean(),
    }).reset_index()


def _normalized_square(e, P, events=None, t=None):
    """e^T P^-1 e, regularizing once; None when P stays singular."""
    try:
        return float(e @ cho_solve(cho_factor(P), e))
    except (LinAlgError, ValueError):
        pass
    logger.info("NEES covariance regularized at t=%s", t)
    if events is not None:
        events.record("nees_regularized", t=t)
    try:
        return float(e @ cho_solve(cho_factor(P + REGULARIZATION * np.eye(len(P))), e))
    except (LinAlgError, ValueError):
        return None


def nees(records, variable=LOCAL_POSE, part=POSE, events=None):
    """
    Normalized estimation error squared per step, averaged over runs and
    divided by the dimension; aggregate is the mean over steps. Errors are
    taken in each run's own chart.
    """
    records = _check_records(records)
    if part not in PARTS:
        raise MetricsError(f"unknown NEES part '{part}'")
    sl = PARTS[part]
    d = sl.stop - sl.start
    n = len(records[0])
    total = np.zeros(n)
    count = np.zeros(n)
    skipped = 0
    for rec in records:
        mask = rec.mask(variable)
        errors = rec.chart_errors(variable)
        covs = rec.covariance(variable)
        for k in np.flatnonzero(mask):
            value = _normalized_square(errors[k, sl], covs[k][sl, sl], events, rec.t[k])
            if value is None:
                skipped += 1
                continue
            total[k] += value
            count[k] += 1
    if skipped:
        logger.warning("%d singular covariance steps skipped in NEES of %s", skipped, variable)
    valid = count > 0
    per_step = pd.DataFrame({"t": records[0].t[valid], "nees": total[valid] / (count[valid] * d)})
    value = float(per_step["nees"].mean()) if len(per_step) else float("nan")
    return MetricSummary(per_step, {"nees": value}, skipped)


def nees_bounds(n_runs, dim, confidence=0.95):
    """Two-sided chi-square band of the run-averaged NEES divided by dim."""
    dof = n_runs * dim
    tail = (1.0 - confidence) / 2.0
    return chi2.ppf(tail, dof) / dof, chi2.ppf(1.0 - tail, dof) / dof


def three_sigma(records, variable=LOCAL_POSE, run=0):
    """Per-step chart error and 3-sigma bounds of one run."""
    rec = _check_records(records)[run]
    mask = rec.mask(variable)
    e = rec.chart_errors(variable)[mask]
    sigma = np.sqrt(np.clip(np.diagonal(rec.covariance(variable)[mask], axis1=1, axis2=2), 0.0, None))
    cols = {"t": rec.t[mask]}
    for i, name in enumerate(["theta_x", "theta_y", "theta_z", "p_x", "p_y", "p_z"]):
        cols[f"err_{name}"] = e[:, i]
        cols[f"bound_{name}"] = 3 * sigma[:, i]
    return pd.DataFrame(cols)


def summary_row(records, variable, align_mode=UMEYAMA, eval_2d=False, events=None):
    """RMSE, NEES and ATE of one variable as a flat dict."""
    r = rmse(records, variable)
    a = ate(records, variable, align_mode, eval_2d)
    row = {"variable": variable,
           "rmse_orientation_deg": r.values["orientation_deg"],
           "rmse_position_m": r.values["position_m"],
           "rmse_position_se_m": r.values["position_m_se"],
           "ate_orientation_deg": a["orientation_deg"],
           "ate_position_m": a["position_m"]}
    for part in (ORIENTATION, POSITION, POSE):
        if variable == MAP_POSE:
            row[f"nees_{part}"] = float("nan")
        else:
            row[f"nees_{part}"] = nees(records, variable, part, events).values["nees"]
    return row


# --- TUM trajectory tables ---

def tum_frame(traj):
    q = Rotation.from_matrix(traj.R).as_quat() if len(traj) else np.zeros((0, 4))
    return pd.DataFrame(np.c_[traj.t, traj.p, q], columns=TUM_COLUMNS)


def trajectory_from_tum(df):
    if df.empty:
        raise MetricsError("empty trajectory table")
    R = Rotation.from_quat(df[["qx", "qy", "qz", "qw"]].to_numpy(dtype=float)).as_matrix()
    return Trajectory(df["timestamp"].to_numpy(dtype=float), R,
                      df[["tx", "ty", "tz"]].to_numpy(dtype=float))
