import json
import os
import tempfile

from config import (DEFAULTS, ConfigError, load_config, merge_defaults, read_config_file)
from estimator import VARIANT_NAMES

HERE = os.path.dirname(os.path.abspath(__file__))
COMMITTED = os.path.join(HERE, "..", "data", "experiment.json")


def write_tmp(text):
    fd, path = tempfile.mkstemp(suffix=".json")
    with os.fdopen(fd, "w") as f:
        f.write(text)
    return path


def expect_config_error(fn):
    try:
        fn()
    except ConfigError as e:
        return e
    raise AssertionError("expected ConfigError")


def test_defaults_without_file():
    cfg = load_config()
    assert cfg.runs == 10 and cfg.seed == 0
    assert cfg.variants == VARIANT_NAMES
    assert cfg.simulation.imu_rate == 200.0
    assert cfg.simulation.camera.fx == 400.0
    assert cfg.settings.max_clones == 11
    assert cfg.settings.init_delay == 1.0
    assert cfg.seeds == list(range(10))


def test_committed_config_documents_every_default():
    loaded, _ = read_config_file(COMMITTED)
    assert set(loaded) == set(DEFAULTS)
    for section, values in DEFAULTS.items():
        assert set(loaded[section]) == set(values), section
    assert load_config(COMMITTED).config_hash() == load_config().config_hash()


def test_partial_section_merges_over_defaults():
    path = write_tmp(json.dumps({"map": {"mode": "perfect"}, "simulation": {"T_LG": {"yaw_deg": 10}}}))
    cfg = load_config(path)
    assert cfg.map_mode == "perfect"
    assert cfg.simulation.sigma_p == DEFAULTS["map"]["sigma_p"]
    assert cfg.simulation.yaw_deg == 10
    assert cfg.simulation.translation == tuple(DEFAULTS["simulation"]["T_LG"]["translation"])


def test_merge_keeps_unrelated_sections():
    raw = merge_defaults({"timing": {"repeats": 3}})
    assert raw["timing"]["repeats"] == 3
    assert raw["timing"]["rows"] == 40
    assert raw["experiment"] == DEFAULTS["experiment"]


def test_cli_overrides_win():
    path = write_tmp(json.dumps({"experiment": {"runs": 4, "seed": 1}}))
    cfg = load_config(path, seed=9, runs=2, out="elsewhere", variants=["vio"], map_mode="perfect")
    assert (cfg.seed, cfg.runs, cfg.out_dir, cfg.variants, cfg.map_mode) == \
        (9, 2, "elsewhere", ("vio",), "perfect")


def test_unknown_variant_names_key_and_line():
    text = '{\n  "experiment": {\n    "runs": 2,\n    "variants": ["vio", "ekf-slam"]\n  }\n}\n'
    path = write_tmp(text)
    e = expect_config_error(lambda: load_config(path))
    assert e.key == "experiment.variants"
    assert e.line == 4
    assert "ekf-slam" in str(e)


def test_invalid_values_rejected():
    cases = [
        {"experiment": {"runs": 0}},
        {"experiment": {"variants": []}},
        {"simulation": {"imu_rate": -1}},
        {"imu_noise": {"sigma_a": -0.1}},
        {"map": {"mode": "blurry"}},
        {"map": {"dropouts": [[5.0, 2.0]]}},
        {"filter": {"chi2_confidence": 1.5}},
        {"filter": {"max_clone": 3}},
        {"plots": {}},
    ]
    for loaded in cases:
        path = write_tmp(json.dumps(loaded, indent=2))
        expect_config_error(lambda: load_config(path))


def test_json_syntax_error_reports_line():
    path = write_tmp('{\n  "experiment": {\n    "runs": 2,\n  }\n}\n')
    e = expect_config_error(lambda: load_config(path))
    assert e.line == 4
    assert path in str(e)


def test_missing_file():
    e = expect_config_error(lambda: load_config("/nonexistent/experiment.json"))
    assert e.line is None


def test_hash_tracks_content():
    a = load_config()
    b = load_config(seed=1)
    assert a.config_hash() == load_config().config_hash()
    assert a.config_hash() != b.config_hash()


if __name__ == "__main__":
    print("=== CONFIG TESTS ===")
    failures = 0
    for name, fn in sorted(globals().items()):
        if name.startswith("test_") and callable(fn):
            try:
                fn()
                print(f"✅ PASS: {name}")
            except AssertionError as e:
                failures += 1
                print(f"❌ FAIL: {name} {e}")
    print(f"\n{failures} failure(s)")
