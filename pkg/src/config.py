"""
Experiment configuration.

A JSON file with one object per section. Each section is merged over the
built-in defaults (`{**defaults, **loaded}`), so a config only needs the
keys it changes. Validation errors name the offending key and the line of
the file it appears on.
"""

import copy
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field

from estimator import VARIANT_NAMES, FilterSettings
from measurement import MeasurementError, PinholeCamera
from metrics import ALIGN_MODES
from propagation import NoiseParams, PropagationError
from simulator import SimConfig, SimulationError

logger = logging.getLogger(__name__)

DEFAULT_CONFIG_PATH = "data/experiment.json"
MAP_MODES = ("perfect", "imperfect")

DEFAULTS = {
    "simulation": {
        "imu_rate": 200.0,
        "cam_rate": 10.0,
        "duration_scale": 1.0,
        "saddle_radius": 49.5,
        "saddle_height": 5.0,
        "speed": 3.0,
        "map_offset": [1.0, -1.0, 0.5],
        "T_LG": {"yaw_deg": 30.0, "roll_deg": 3.0, "pitch_deg": -2.0, "translation": [5.0, -3.0, 1.0]},
        "n_local_features": 12,
        "station_spacing": 2.0,
        "max_tracks": 40,
        "depth_range": [3.0, 30.0],
    },
    "imu_noise": {
        "sigma_g": 1.6968e-4,
        "sigma_a": 2.0e-3,
        "sigma_bg": 1.9393e-5,
        "sigma_ba": 3.0e-3,
    },
    "camera": {
        "fx": 400.0, "fy": 400.0, "cx": 376.0, "cy": 240.0,
        "width": 752, "height": 480, "sigma_px": 1.0, "z_min": 0.05,
    },
    "map": {
        "mode": "imperfect",
        "sigma_p": 0.1,
        "sigma_o_deg": 0.9,
        "perfect_sigma_p": 1e-4,
        "perfect_sigma_o_deg": 0.01,
        "keyframe_spacing": 5.0,
        "features_per_keyframe": 8,
        "max_matches": 15,
        "max_keyframes_per_match": 3,
        "match_interval": 1,
        "dropouts": [],
        "init_delay": 1.0,
        "init_sigma_p": 0.3,
        "init_sigma_o_deg": 1.0,
    },
    "filter": {
        "max_clones": 11,
        "chi2_confidence": 0.95,
        "min_track_length": 3,
        "sigma_theta_deg": 0.1,
        "sigma_v": 0.05,
        "sigma_p": 0.02,
        "sigma_bg": 1e-4,
        "sigma_ba": 1e-3,
        "perturb_initial": True,
        "keyframe_sigma_px": None,
        "gravity": [0.0, 0.0, -9.8],
    },
    "experiment": {
        "runs": 10,
        "seed": 0,
        "variants": list(VARIANT_NAMES),
        "out_dir": "output",
        "rpe_lengths": [100.0, 200.0, 500.0],
        "align_mode": "se3_umeyama",
        "eval_2d": False,
        "n_jobs": -1,
        "report_pdf": False,
    },
    "observability": {
        "steps": 50,
        "rate": 10.0,
        "perturbation": 1e-3,
        "tol": 1e-8,
        "trajectories": 3,
        "seed": 7,
        "local_features": 3,
        "map_features": 3,
        "keyframes": 2,
    },
    "timing": {
        "m_values": [5, 10, 20, 40, 80],
        "repeats": 30,
        "rows": 40,
    },
}

POSITIVE = {
    "simulation": ("imu_rate", "cam_rate", "duration_scale", "saddle_radius", "speed",
                   "station_spacing", "max_tracks"),
    "camera": ("fx", "fy", "width", "height"),
    "map": ("keyframe_spacing", "features_per_keyframe", "max_keyframes_per_match", "match_interval"),
    "filter": ("max_clones", "min_track_length"),
    "experiment": ("runs",),
    "observability": ("steps", "rate", "trajectories"),
    "timing": ("repeats", "rows"),
}
NON_NEGATIVE = {
    "imu_noise": ("sigma_g", "sigma_a", "sigma_bg", "sigma_ba"),
    "camera": ("sigma_px",),
    "map": ("sigma_p", "sigma_o_deg", "perfect_sigma_p", "perfect_sigma_o_deg", "init_delay",
            "init_sigma_p", "init_sigma_o_deg", "max_matches"),
    "filter": ("sigma_theta_deg", "sigma_v", "sigma_p", "sigma_bg", "sigma_ba"),
}


class ConfigError(ValueError):
    """Unreadable config or invalid value; carries the file, line and key."""

    def __init__(self, message, path=None, line=None, key=None):
        self.path = path
        self.line = line
        self.key = key
        where = ""
        if path:
            where = f"{path}:{line}: " if line else f"{path}: "
        super().__init__(f"{where}{key + ': ' if key else ''}{message}")


def _key_line(text, section, key):
    """First line where `key` appears after its section header; None if absent."""
    if not text:
        return None
    lines = text.splitlines()
    start = 0
    for n, line in enumerate(lines):
        if f'"{section}"' in line:
            start = n
            break
    for n in range(start, len(lines)):
        if f'"{key}"' in lines[n]:
            return n + 1
    return None


@dataclass(frozen=True)
class ExperimentConfig:
    simulation: SimConfig
    settings: FilterSettings
    variants: tuple
    runs: int = 10
    seed: int = 0
    out_dir: str = "output"
    rpe_lengths: tuple = (100.0, 200.0, 500.0)
    align_mode: str = "se3_umeyama"
    eval_2d: bool = False
    n_jobs: int = -1
    report_pdf: bool = False
    observability: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)
    resolved: dict = field(default_factory=dict)
    source: str = None

    @property
    def seeds(self):
        return [self.seed + n for n in range(self.runs)]

    @property
    def map_mode(self):
        return self.simulation.map_mode

    def config_hash(self):
        payload = json.dumps(self.resolved, sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:16]


def merge_defaults(loaded):
    """Per-section `{**defaults, **loaded}`; unknown sections are kept so validation can name them."""
    merged = copy.deepcopy(DEFAULTS)
    for section, values in (loaded or {}).items():
        if section in merged and isinstance(values, dict):
            if section == "simulation" and isinstance(values.get("T_LG"), dict):
                values = {**values, "T_LG": {**merged[section]["T_LG"], **values["T_LG"]}}
            merged[section] = {**merged[section], **values}
        else:
            merged[section] = values
    return merged


def apply_overrides(raw, seed=None, runs=None, out=None, variants=None, map_mode=None):
    """Command-line flags win over the file."""
    raw = copy.deepcopy(raw)
    exp = raw["experiment"]
    if seed is not None:
        exp["seed"] = seed
    if runs is not None:
        exp["runs"] = runs
    if out is not None:
        exp["out_dir"] = out
    if variants:
        exp["variants"] = list(variants)
    if map_mode is not None:
        raw["map"]["mode"] = map_mode
    return raw


def validate(raw, path=None, text=None):
    def fail(section, key, message):
        raise ConfigError(message, path, _key_line(text, section, key), f"{section}.{key}")

    for section in raw:
        if section not in DEFAULTS:
            raise ConfigError("unknown section", path, _key_line(text, section, section), section)
        if not isinstance(raw[section], dict):
            fail(section, section, "section must be an object")
        for key in raw[section]:
            if key not in DEFAULTS[section]:
                fail(section, key, "unknown key")

    for section, keys in POSITIVE.items():
        for key in keys:
            value = raw[section][key]
            if not isinstance(value, (int, float)) or isinstance(value, bool) or value <= 0:
                fail(section, key, f"must be a positive number, got {value!r}")
    for section, keys in NON_NEGATIVE.items():
        for key in keys:
            value = raw[section][key]
            if not isinstance(value, (int, float)) or isinstance(value, bool) or value < 0:
                fail(section, key, f"must be a non-negative number, got {value!r}")

    exp = raw["experiment"]
    variants = exp["variants"]
    if not isinstance(variants, list) or not variants:
        fail("experiment", "variants", "needs at least one variant")
    unknown = [v for v in variants if v not in VARIANT_NAMES]
    if unknown:
        fail("experiment", "variants", f"unknown variant(s) {unknown}; choose from {list(VARIANT_NAMES)}")
    if raw["map"]["mode"] not in MAP_MODES:
        fail("map", "mode", f"unknown map mode {raw['map']['mode']!r}")
    if exp["align_mode"] not in ALIGN_MODES:
        fail("experiment", "align_mode", f"unknown alignment {exp['align_mode']!r}")
    if not 0.0 < raw["filter"]["chi2_confidence"] < 1.0:
        fail("filter", "chi2_confidence", "must lie in (0, 1)")
    for start, end in (tuple(w) for w in raw["map"]["dropouts"]):
        if end <= start:
            fail("map", "dropouts", f"empty window [{start}, {end}]")
    if any(m < 0 for m in raw["timing"]["m_values"]):
        fail("timing", "m_values", "keyframe counts must be >= 0")


def build(raw, path=None, text=None):
    """Resolved dict -> ExperimentConfig."""
    validate(raw, path, text)
    sim, cam, mp, flt, exp = (raw[s] for s in ("simulation", "camera", "map", "filter", "experiment"))
    t_lg = sim["T_LG"]
    try:
        camera = PinholeCamera(**cam)
        noise = NoiseParams(**raw["imu_noise"])
        simulation = SimConfig(
            imu_rate=float(sim["imu_rate"]), cam_rate=float(sim["cam_rate"]),
            duration_scale=float(sim["duration_scale"]), saddle_radius=float(sim["saddle_radius"]),
            saddle_height=float(sim["saddle_height"]), speed=float(sim["speed"]),
            map_offset=tuple(sim["map_offset"]), yaw_deg=float(t_lg["yaw_deg"]),
            roll_deg=float(t_lg["roll_deg"]), pitch_deg=float(t_lg["pitch_deg"]),
            translation=tuple(t_lg["translation"]), n_local_features=int(sim["n_local_features"]),
            station_spacing=float(sim["station_spacing"]), max_tracks=int(sim["max_tracks"]),
            depth_range=tuple(sim["depth_range"]), noise=noise, camera=camera,
            map_mode=mp["mode"], sigma_p=mp["sigma_p"], sigma_o_deg=mp["sigma_o_deg"],
            perfect_sigma_p=mp["perfect_sigma_p"], perfect_sigma_o_deg=mp["perfect_sigma_o_deg"],
            keyframe_spacing=float(mp["keyframe_spacing"]),
            features_per_keyframe=int(mp["features_per_keyframe"]),
            max_matches=int(mp["max_matches"]), max_keyframes_per_match=int(mp["max_keyframes_per_match"]),
            match_interval=int(mp["match_interval"]),
            dropouts=tuple(tuple(w) for w in mp["dropouts"]))
        settings = FilterSettings(
            init_delay=mp["init_delay"], init_sigma_p=mp["init_sigma_p"],
            init_sigma_o_deg=mp["init_sigma_o_deg"], gravity=tuple(flt["gravity"]),
            **{k: v for k, v in flt.items() if k != "gravity"})
    except (MeasurementError, PropagationError, SimulationError, TypeError) as e:
        raise ConfigError(str(e), path) from e
    return ExperimentConfig(
        simulation=simulation, settings=settings, variants=tuple(exp["variants"]),
        runs=int(exp["runs"]), seed=int(exp["seed"]), out_dir=exp["out_dir"],
        rpe_lengths=tuple(exp["rpe_lengths"]), align_mode=exp["align_mode"],
        eval_2d=bool(exp["eval_2d"]), n_jobs=int(exp["n_jobs"]), report_pdf=bool(exp["report_pdf"]),
        observability=dict(raw["observability"]), timing=dict(raw["timing"]),
        resolved=raw, source=path)


def read_config_file(path):
    """(parsed dict, raw text); JSON syntax errors keep the decoder's line and column."""
    try:
        with open(path, "r") as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read config ({e.strerror})", path) from e
    try:
        loaded = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON: {e.msg} (column {e.colno})", path, e.lineno) from e
    if not isinstance(loaded, dict):
        raise ConfigError("top level must be an object", path, 1)
    return loaded, text


def load_config(path=None, **overrides):
    """
    Loads `path` (or the built-in defaults when None), applies CLI
    overrides and returns a validated ExperimentConfig.
    """
    loaded, text = {}, None
    if path is not None:
        loaded, text = read_config_file(path)
        logger.info("Loaded config from %s", path)
    raw = apply_overrides(merge_defaults(loaded), **overrides)
    return build(raw, path, text)


def write_default_config(path=DEFAULT_CONFIG_PATH):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as f:
        json.dump(DEFAULTS, f, indent=4)
        f.write("\n")
