import filecmp
import json
import os
import tempfile

import numpy as np
import pandas as pd

from config import load_config
from experiment import ExperimentManager, acceptance_checks, loglog_slope, timing_checks
from main import EXIT_ACCEPTANCE, EXIT_CONFIG, EXIT_OK, main

SHORT = {
    "simulation": {"duration_scale": 0.05},
    "experiment": {"runs": 2, "n_jobs": 1, "rpe_lengths": [5.0, 10.0]},
    "observability": {"trajectories": 2},
    "timing": {"m_values": [2, 4], "repeats": 2, "rows": 10},
}


def short_config(out_dir, extra=None, **overrides):
    loaded = json.loads(json.dumps(SHORT))
    for section, values in (extra or {}).items():
        loaded.setdefault(section, {}).update(values)
    path = os.path.join(out_dir, "experiment.json")
    with open(path, "w") as f:
        json.dump(loaded, f, indent=2)
    return path, load_config(path, out=os.path.join(out_dir, "output"), **overrides)


def test_loglog_slope():
    m = np.array([5, 10, 20, 40, 80])
    assert abs(loglog_slope(m, 3.0 * m) - 1.0) < 1e-12
    assert abs(loglog_slope(m, 0.5 * m ** 2) - 2.0) < 1e-12
    assert abs(loglog_slope(np.r_[0, m], np.r_[0.0, m ** 2]) - 2.0) < 1e-12
    assert np.isnan(loglog_slope([0, 5], [1.0, 2.0]))


def test_campaign_writes_every_artifact():
    with tempfile.TemporaryDirectory() as d:
        _, cfg = short_config(d, variants=["vio", "msc-ikf", "msoc-s-ikf"])
        summary = ExperimentManager(cfg).run_experiment()
        out = cfg.out_dir
        for name in ("summary.csv", "summary.xlsx", "rpe.csv", "rpe_segments.csv", "config.json",
                     "metadata.json", "nees_trace_vio.csv", "nees_trace_msoc-s-ikf.csv",
                     os.path.join("logs", "event_counts.json"), os.path.join("figures", "rpe.png")):
            assert os.path.exists(os.path.join(out, name)), name
        for seed in cfg.seeds:
            assert os.path.exists(os.path.join(out, "map", f"seed_{seed}", "keyframes.txt"))
            for variant in cfg.variants:
                run_dir = os.path.join(out, "runs", variant, f"seed_{seed}")
                assert os.path.exists(os.path.join(run_dir, "record.csv"))
                assert os.path.exists(os.path.join(run_dir, "local_pose.txt"))
        with open(os.path.join(out, "metadata.json")) as f:
            meta = json.load(f)["experiment"]
        trace = pd.read_csv(os.path.join(out, "nees_trace_msoc-s-ikf.csv"))
    assert meta["seeds"] == [0, 1] and meta["config_hash"] == cfg.config_hash()
    assert set(meta["wall_clock_s"]) == {"vio", "msc-ikf", "msoc-s-ikf"}
    # vio has no relative transformation to score
    assert list(summary.loc[summary["variant"] == "vio", "variable"]) == ["local_pose"]
    assert len(summary[summary["variant"] == "msoc-s-ikf"]) == 3
    assert (summary["runs"] == 2).all()
    for column in ("nees_local_pose", "nees_relative_pose", "local_err_p_x", "local_bound_p_x"):
        assert column in trace
    local = summary[summary["variable"] == "local_pose"]
    assert (local["rmse_position_m"] < 1.0).all()


def test_noiseless_vio_campaign_is_exact():
    with tempfile.TemporaryDirectory() as d:
        extra = {"imu_noise": {"sigma_g": 0.0, "sigma_a": 0.0, "sigma_bg": 0.0, "sigma_ba": 0.0},
                 "camera": {"sigma_px": 0.0}, "filter": {"perturb_initial": False}}
        _, cfg = short_config(d, extra, runs=1, variants=["vio"])
        summary = ExperimentManager(cfg).run_experiment()
    assert summary["rmse_position_m"].iloc[0] <= 1e-3


def test_rerun_gives_identical_records():
    with tempfile.TemporaryDirectory() as d:
        path, cfg_a = short_config(d, runs=1, variants=["msc-s-ekf"])
        cfg_b = load_config(path, out=os.path.join(d, "again"), runs=1, variants=["msc-s-ekf"])
        ExperimentManager(cfg_a).run_experiment()
        ExperimentManager(cfg_b).run_experiment()
        for name in ("record.csv", "local_pose.txt", "relative_trans.txt"):
            a = os.path.join(cfg_a.out_dir, "runs", "msc-s-ekf", "seed_0", name)
            b = os.path.join(cfg_b.out_dir, "runs", "msc-s-ekf", "seed_0", name)
            assert filecmp.cmp(a, b, shallow=False), name
        assert filecmp.cmp(os.path.join(cfg_a.out_dir, "summary.csv"),
                           os.path.join(cfg_b.out_dir, "summary.csv"), shallow=False)


def test_evaluate_from_stored_records():
    with tempfile.TemporaryDirectory() as d:
        _, cfg = short_config(d, runs=1, variants=["msc-ekf"])
        first = ExperimentManager(cfg).run_experiment()
        again = ExperimentManager(cfg).evaluate()
    pd.testing.assert_frame_equal(first, again)


def test_observability_suite_passes():
    with tempfile.TemporaryDirectory() as d:
        _, cfg = short_config(d)
        table, passed = ExperimentManager(cfg).run_observability_suite()
        assert os.path.exists(os.path.join(cfg.out_dir, "observability.txt"))
    assert passed
    # eight cases and two gauge checks per trajectory
    assert len(table) == 2 * (8 + 2)
    assert set(table.loc[table["label"] == "invariant/imperfect/estimated", "null_dim"]) == {4}
    assert set(table.loc[table["label"] == "invariant/imperfect/estimated+oc", "null_dim"]) == {10}


def test_timing_report_includes_empty_nuisance():
    with tempfile.TemporaryDirectory() as d:
        _, cfg = short_config(d)
        table, slopes = ExperimentManager(cfg).timing_report()
    assert sorted(table["m"].unique()) == [0, 2, 4]
    assert set(table["update"]) == {"schmidt", "full"}
    assert (table["median_ms"] > 0).all()
    assert (table["min_ms"] <= table["median_ms"]).all()
    assert (table["calls"] >= 1).all()
    assert (table.loc[table["m"] == 0, "excess_ms"] == 0.0).all()
    assert set(slopes) == {"schmidt", "full"}


def test_timing_slopes_fall_in_bands():
    timing = {"m_values": [5, 10, 20, 40, 80], "repeats": 15, "rows": 40}
    with tempfile.TemporaryDirectory() as d:
        path, cfg = short_config(d, extra={"timing": timing})
        assert main(["timing", "--config", path, "--out", cfg.out_dir, "--check"]) == EXIT_OK
        with open(os.path.join(cfg.out_dir, "metadata.json")) as f:
            slopes = json.load(f)["timing"]["slopes"]
    assert 0.7 <= slopes["schmidt"] <= 1.3, slopes
    assert 1.6 <= slopes["full"] <= 2.4, slopes


def test_timing_checks_flag_slopes_outside_bands():
    assert all(passed for _, passed, _ in timing_checks({"schmidt": 1.0, "full": 2.0}))
    checks = dict((name.split()[0], passed) for name, passed, _ in timing_checks({"schmidt": 1.6, "full": 1.2}))
    assert checks == {"schmidt": False, "full": False}
    assert not all(passed for _, passed, _ in timing_checks({"schmidt": float("nan"), "full": 2.0}))


def test_acceptance_checks_read_summary():
    rows = []
    for variant, nees_o, nees_p, rmse in (("msoc-s-ikf", 1.0, 1.1, 0.1), ("msc-s-ekf", 7.0, 5.0, 0.5),
                                          ("msc-ekf", 9.0, 9.0, 0.4), ("msc-ikf", 2.0, 5.5, 0.2)):
        rows.append({"variant": variant, "variable": "local_pose", "nees_orientation": nees_o,
                     "nees_position": nees_p, "nees_pose": (nees_o + nees_p) / 2, "rmse_position_m": rmse})
    checks = acceptance_checks(pd.DataFrame(rows), "imperfect")
    assert all(passed for _, passed, _ in checks)
    rows[0]["nees_position"] = 4.0
    checks = acceptance_checks(pd.DataFrame(rows), "imperfect")
    assert not all(passed for _, passed, _ in checks)


def test_acceptance_checks_order_relative_trans_within_noise():
    rows = []
    for variant, nees_o, nees_p, rmse, rel, se in (("msoc-s-ikf", 1.0, 1.1, 0.1, 0.30, 0.02),
                                                   ("msc-s-ekf", 7.0, 5.0, 0.5, 0.60, 0.05),
                                                   ("msc-ekf", 9.0, 9.0, 0.4, 0.50, 0.05),
                                                   ("msc-ikf", 2.0, 5.5, 0.2, 0.28, 0.02)):
        rows.append({"variant": variant, "variable": "local_pose", "nees_orientation": nees_o,
                     "nees_position": nees_p, "nees_pose": (nees_o + nees_p) / 2, "rmse_position_m": rmse})
        rows.append({"variant": variant, "variable": "relative_trans", "rmse_position_m": rel,
                     "rmse_position_se_m": se})
    checks = {name: passed for name, passed, _ in acceptance_checks(pd.DataFrame(rows), "imperfect")}
    relative = {name: passed for name, passed in checks.items() if "relative_trans" in name}
    assert len(relative) == 3
    # 0.30 against 0.28 is inside two standard errors of the difference
    assert all(relative.values())
    rows[-1]["rmse_position_m"] = 0.1
    checks = {name: passed for name, passed, _ in acceptance_checks(pd.DataFrame(rows), "imperfect")}
    assert not checks["msoc-s-ikf relative_trans RMSE not above msc-ikf"]
    assert checks["msoc-s-ikf relative_trans RMSE not above msc-ekf"]


def test_reduced_campaign_meets_imperfect_map_nees_bands():
    extra = {"simulation": {"duration_scale": 0.2}, "experiment": {"runs": 3, "n_jobs": -1}}
    with tempfile.TemporaryDirectory() as d:
        _, cfg = short_config(d, extra, variants=["msc-s-ekf", "msc-ikf", "msoc-s-ikf"], map_mode="imperfect")
        summary = ExperimentManager(cfg).run_experiment()
    local = summary[summary["variable"] == "local_pose"].set_index("variant")
    assert 0.5 <= local.loc["msoc-s-ikf", "nees_orientation"] <= 2.0, local
    assert 0.5 <= local.loc["msoc-s-ikf", "nees_position"] <= 2.0, local
    # treating the map as exact makes the position overconfident
    assert local.loc["msc-ikf", "nees_position"] >= 3.0, local
    assert np.isfinite(local.loc["msc-s-ekf", ["nees_orientation", "nees_position"]]).all()


def test_reduced_campaign_meets_perfect_map_nees_bands():
    extra = {"simulation": {"duration_scale": 0.2}, "experiment": {"runs": 3, "n_jobs": -1}}
    with tempfile.TemporaryDirectory() as d:
        _, cfg = short_config(d, extra, variants=["msc-ikf", "msoc-s-ikf"], map_mode="perfect")
        summary = ExperimentManager(cfg).run_experiment()
    checks = acceptance_checks(summary, "perfect")
    assert all(passed for _, passed, _ in checks), checks


def test_cli_exit_codes():
    with tempfile.TemporaryDirectory() as d:
        path, _ = short_config(d)
        out = os.path.join(d, "cli")
        assert main(["simulate", "--config", path, "--runs", "1", "--out", out]) == EXIT_OK
        assert os.path.exists(os.path.join(out, "map", "seed_0", "truth_local_pose.txt"))
        assert main(["run", "--config", path, "--variants", "nope", "--out", out]) == EXIT_CONFIG
        bad = os.path.join(d, "bad.json")
        with open(bad, "w") as f:
            f.write("{\n  \"experiment\": {\"runs\": 0}\n}\n")
        assert main(["run", "--config", bad, "--out", out]) == EXIT_CONFIG
        assert main(["observability", "--config", path, "--out", out]) == EXIT_OK
        code = main(["run", "--config", path, "--runs", "1", "--variants", "vio", "--out", out, "--check"])
        # the imperfect-map bands need the map-aided variants
        assert code == EXIT_ACCEPTANCE
        assert main(["metrics", "--config", path, "--out", out]) == EXIT_OK


if __name__ == "__main__":
    print("=== EXPERIMENT TESTS ===")
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
