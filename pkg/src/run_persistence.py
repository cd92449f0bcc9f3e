"""
On-disk layout of an experiment output directory.

    <out>/config.json                 resolved config
    <out>/metadata.json               variants, seeds, map mode, config hash, wall-clock per run
    <out>/map/                        MapBundle (true and used) and ground truth trajectories
    <out>/runs/<variant>/seed_<n>/    record.csv plus TUM trajectories

Every file goes to a temporary sibling first and is moved into place with
os.replace, so a crashed run never leaves a half-written file behind.
"""

import glob
import json
import logging
import os
import tempfile

import numpy as np
import pandas as pd
from scipy.spatial.transform import Rotation

from metrics import (LOCAL_POSE, MAP_POSE, RELATIVE_TRANS, TUM_COLUMNS, RunRecord, Trajectory,
                     trajectory_from_tum, tum_frame)
from simulator import MapBundle
from state import MapKeyframePose

logger = logging.getLogger(__name__)

TRAJECTORY_FILES = {
    LOCAL_POSE: "local_pose.txt",
    RELATIVE_TRANS: "relative_trans.txt",
    MAP_POSE: "map_pose.txt",
}
KEYFRAME_COLUMNS = ["id", "tx", "ty", "tz", "qx", "qy", "qz", "qw", "s_theta", "s_p"]
FEATURE_COLUMNS = ["id", "x", "y", "z"]
OBSERVATION_COLUMNS = ["kf_id", "feature_id", "u", "v"]


def write_atomic(path, write):
    """Calls write(file) on a temporary sibling of path, then replaces path with it."""
    directory = os.path.dirname(path) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp_", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", newline="") as f:
            write(f)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise
    return path


def write_csv(df, path):
    return write_atomic(path, lambda f: df.to_csv(f, index=False))


def write_json(data, path):
    return write_atomic(path, lambda f: json.dump(data, f, indent=2, default=str))


def write_table(df, path, columns):
    """Space-separated text with a '#' header naming the columns."""
    def write(f):
        f.write("# " + " ".join(columns) + "\n")
        df[columns].to_csv(f, sep=" ", header=False, index=False, float_format="%.9f")
    return write_atomic(path, write)


def read_table(path, columns):
    return pd.read_csv(path, sep=r"\s+", comment="#", header=None, names=columns)


def write_tum(traj, path):
    return write_table(tum_frame(traj), path, TUM_COLUMNS)


def read_tum(path):
    return trajectory_from_tum(read_table(path, TUM_COLUMNS))


def write_map_bundle(bundle, directory):
    """keyframes.txt, features.txt and observations.txt under directory."""
    kfs = bundle.keyframes
    keyframes = pd.DataFrame({"id": [kf.kf_id for kf in kfs]}, dtype=int)
    p = np.array([kf.p_GKF for kf in kfs]).reshape(-1, 3)
    q = Rotation.from_matrix(np.array([kf.R_GKF for kf in kfs])).as_quat() if kfs else np.zeros((0, 4))
    for i, axis in enumerate("xyz"):
        keyframes[f"t{axis}"] = p[:, i]
    for i, axis in enumerate("xyzw"):
        keyframes[f"q{axis}"] = q[:, i]
    keyframes["s_theta"] = bundle.sigmas[:, 0]
    keyframes["s_p"] = bundle.sigmas[:, 1]
    ids = sorted(bundle.features)
    features = pd.DataFrame({"id": ids}, dtype=int)
    for i, axis in enumerate("xyz"):
        features[axis] = [bundle.features[fid][i] for fid in ids]
    obs = bundle.observations[OBSERVATION_COLUMNS].copy()
    obs[["kf_id", "feature_id"]] = obs[["kf_id", "feature_id"]].astype(int)
    write_table(keyframes, os.path.join(directory, "keyframes.txt"), KEYFRAME_COLUMNS)
    write_table(features, os.path.join(directory, "features.txt"), FEATURE_COLUMNS)
    write_table(obs, os.path.join(directory, "observations.txt"), OBSERVATION_COLUMNS)
    return directory


def read_map_bundle(directory):
    kf = read_table(os.path.join(directory, "keyframes.txt"), KEYFRAME_COLUMNS)
    features = read_table(os.path.join(directory, "features.txt"), FEATURE_COLUMNS)
    obs = read_table(os.path.join(directory, "observations.txt"), OBSERVATION_COLUMNS)
    R = Rotation.from_quat(kf[["qx", "qy", "qz", "qw"]].to_numpy(dtype=float)).as_matrix() \
        if len(kf) else np.zeros((0, 3, 3))
    keyframes = [MapKeyframePose(R[j], kf[["tx", "ty", "tz"]].to_numpy(dtype=float)[j], int(kf["id"].iloc[j]))
                 for j in range(len(kf))]
    points = {int(row.id): np.array([row.x, row.y, row.z]) for row in features.itertuples()}
    obs[["kf_id", "feature_id"]] = obs[["kf_id", "feature_id"]].astype(int)
    return MapBundle(keyframes, kf[["s_theta", "s_p"]].to_numpy(dtype=float), points, obs)


class RunPersistence:
    """Reads and writes everything under one experiment output directory."""

    def __init__(self, out_dir="output"):
        self.out_dir = out_dir
        self.map_dir = os.path.join(out_dir, "map")
        self.runs_dir = os.path.join(out_dir, "runs")
        self.metadata_file = os.path.join(out_dir, "metadata.json")
        self.config_file = os.path.join(out_dir, "config.json")
        os.makedirs(out_dir, exist_ok=True)

    def path(self, name):
        return os.path.join(self.out_dir, name)

    def run_dir(self, variant, seed):
        return os.path.join(self.runs_dir, variant, f"seed_{seed}")

    def save_record(self, record):
        """record.csv and the three TUM trajectories of one (variant, seed)."""
        directory = self.run_dir(record.variant, record.seed)
        write_csv(record.to_frame(), os.path.join(directory, "record.csv"))
        for variable, name in TRAJECTORY_FILES.items():
            traj = record.estimate(variable)
            keep = np.flatnonzero(record.mask(variable))
            write_tum(traj[keep], os.path.join(directory, name))
        logger.debug("Saved %s seed %s to %s", record.variant, record.seed, directory)
        return directory

    def load_record(self, variant, seed):
        df = pd.read_csv(os.path.join(self.run_dir(variant, seed), "record.csv"))
        return RunRecord.from_frame(df, variant, seed)

    def seeds(self, variant):
        found = []
        for d in glob.glob(os.path.join(self.runs_dir, variant, "seed_*")):
            if os.path.exists(os.path.join(d, "record.csv")):
                found.append(int(os.path.basename(d)[len("seed_"):]))
        return sorted(found)

    def variants(self):
        if not os.path.isdir(self.runs_dir):
            return []
        return sorted(v for v in os.listdir(self.runs_dir) if self.seeds(v))

    def load_records(self, variant):
        return [self.load_record(variant, seed) for seed in self.seeds(variant)]

    def map_seed_dir(self, seed):
        return os.path.join(self.map_dir, f"seed_{seed}")

    def save_simulation(self, sim):
        """The map the filters used, the true map and the ground-truth trajectories of one seed."""
        directory = self.map_seed_dir(sim.seed)
        write_map_bundle(sim.map_used, directory)
        write_map_bundle(sim.map_true, os.path.join(directory, "true"))
        n = len(sim.truth.t)
        local = Trajectory(sim.truth.t, sim.truth.R, sim.truth.p)
        relative = Trajectory(sim.truth.t, np.tile(sim.R_LG, (n, 1, 1)), np.tile(sim.p_LG, (n, 1)))
        write_tum(local, os.path.join(directory, "truth_local_pose.txt"))
        write_tum(relative, os.path.join(directory, "truth_relative_trans.txt"))
        write_tum(relative.inverse().compose(local), os.path.join(directory, "truth_map_pose.txt"))
        return directory

    def load_map(self, seed, true_map=False):
        directory = self.map_seed_dir(seed)
        return read_map_bundle(os.path.join(directory, "true") if true_map else directory)

    def load_truth(self, seed, variable=LOCAL_POSE):
        return read_tum(os.path.join(self.map_seed_dir(seed), "truth_" + TRAJECTORY_FILES[variable]))

    def save_config(self, resolved):
        return write_json(resolved, self.config_file)

    def load_config(self):
        with open(self.config_file, "r") as f:
            return json.load(f)

    def save_metadata(self, metadata, key="experiment"):
        """Merges metadata under key into metadata.json."""
        all_metadata = self.load_metadata()
        all_metadata[key] = metadata
        write_json(all_metadata, self.metadata_file)
        return all_metadata

    def load_metadata(self):
        if not os.path.exists(self.metadata_file):
            return {}
        with open(self.metadata_file, "r") as f:
            return json.load(f)

    def save_table(self, df, name):
        return write_csv(df, self.path(name))

    def load_table(self, name):
        path = self.path(name)
        return pd.read_csv(path) if os.path.exists(path) else None
