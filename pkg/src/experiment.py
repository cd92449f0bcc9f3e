"""
Monte Carlo campaigns over the filter variants, the observability suite
and the update-cost timing table.

One worker per seed simulates the run once, feeds the same data to every
selected variant and writes its records; the manager then aggregates the
records into the summary tables, NEES traces, figures and event logs.
"""

import logging
import os
import time
from functools import partial

import numpy as np
import pandas as pd
from joblib import Parallel, delayed, parallel_config

from config import load_config
from estimator import VIO, run_variant
from event_logger import EventLogger, FilterEvents
from liegroup import so3_exp
from measurement import StackedResidual
from metrics import (LOCAL_POSE, MAP_POSE, ORIENTATION, POSE, POSITION, RELATIVE_TRANS,
                     nees, nees_bounds, rpe, rpe_summary, summary_row, three_sigma)
from observability import SUITE, gauge_invariance, random_motion, random_scene, verify_suite
from report import (build_pdf_report, nees_figure, rpe_figure, save_figure, three_sigma_figure,
                    write_excel)
from run_persistence import RunPersistence, write_atomic
from simulator import DEFAULT_EXTRINSIC, simulate
from state import (INVARIANT, AugmentedState, MapKeyframePose, NavState, init_augmented_variable,
                   insert_keyframes)
from updates import full_update, schmidt_update

logger = logging.getLogger(__name__)

EVALUATED = {VIO: (LOCAL_POSE,)}
ALL_VARIABLES = (LOCAL_POSE, RELATIVE_TRANS, MAP_POSE)
TRACE_VARIABLES = {LOCAL_POSE: "local", RELATIVE_TRANS: "relative"}
TIMING_MIN_SAMPLE_S = 0.002
TIMED_UPDATES = {"schmidt": schmidt_update, "full": full_update}


def run_seed(config, seed):
    """Worker: one simulation, every variant, records written atomically."""
    gravity = np.asarray(config.settings.gravity, dtype=float)
    sim = simulate(config.simulation, seed, gravity=gravity)
    store = RunPersistence(config.out_dir)
    store.save_simulation(sim)
    out = []
    for variant in config.variants:
        result = run_variant(sim, variant, config.settings)
        store.save_record(result.record)
        out.append((variant, result.events.to_frame(), result.wall_time))
    return seed, out


def loglog_slope(m, cost):
    """Least-squares slope of log(cost) against log(m), positive entries only."""
    m, cost = np.asarray(m, dtype=float), np.asarray(cost, dtype=float)
    keep = (m > 0) & (cost > 0)
    if keep.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(m[keep]), np.log(cost[keep]), 1)[0])


def _timing_state(m, rng):
    """Invariant state with the relative transformation set and m keyframes in the nuisance part."""
    nav = NavState(so3_exp(rng.normal(size=3)), rng.normal(size=3), rng.normal(size=3))
    A = rng.normal(size=(27, 27))
    state = AugmentedState(nav=nav, extrinsic=DEFAULT_EXTRINSIC, P_aa=A @ A.T / 27 + np.eye(27),
                           error_param=INVARIANT)
    state = init_augmented_variable(state, so3_exp(rng.normal(size=3)), rng.normal(size=3), 0.01 * np.eye(6))
    kfs = [MapKeyframePose(so3_exp(rng.normal(size=3)), rng.normal(scale=10.0, size=3), j) for j in range(m)]
    return insert_keyframes(state, kfs, 0.01 * np.eye(6))


def _timing_residual(state, rows, rng):
    """
    Dense rows over the active part, zero over the keyframes, as a local
    feature update. Whatever the update spends above the m = 0 case is
    then the price of carrying the nuisance part.
    """
    a, n = state.layout.active_dim, state.layout.nuisance_dim
    H = np.zeros((rows, a + n))
    H[:, :a] = rng.normal(size=(rows, a))
    return StackedResidual(rng.normal(scale=0.1, size=rows), H, np.eye(rows))


def time_updates(timing, seed):
    """
    Per-call wall time samples of both updates for every keyframe count.

    Cases are interleaved within each repeat and every sample runs enough
    calls to last TIMING_MIN_SAMPLE_S.
    """
    rng = np.random.default_rng(seed)
    cases = []
    for m in sorted(set([0, *timing["m_values"]])):
        state = _timing_state(m, rng)
        sr = _timing_residual(state, timing["rows"], rng)
        for name, update in TIMED_UPDATES.items():
            cases.append((name, m, partial(update, state, sr, gate=False)))

    calls = []
    for _, _, call in cases:
        call()  # warm-up
        started = time.perf_counter()
        call()
        elapsed = time.perf_counter() - started
        calls.append(max(1, int(np.ceil(TIMING_MIN_SAMPLE_S / max(elapsed, 1e-9)))))

    samples = [[] for _ in cases]
    for _ in range(timing["repeats"]):
        for k, (_, _, call) in enumerate(cases):
            started = time.perf_counter()
            for _ in range(calls[k]):
                call()
            samples[k].append((time.perf_counter() - started) / calls[k])
    return [{"update": name, "m": m, "calls": calls[k],
             "median_ms": 1e3 * float(np.median(samples[k])),
             "mean_ms": 1e3 * float(np.mean(samples[k])),
             "min_ms": 1e3 * float(np.min(samples[k]))}
            for k, (name, m, _) in enumerate(cases)]


class ExperimentManager:
    """Runs a campaign described by an ExperimentConfig into its output directory."""

    def __init__(self, config=None):
        self.config = load_config() if config is None else config
        self.store = RunPersistence(self.config.out_dir)
        self.event_logger = EventLogger(os.path.join(self.config.out_dir, "logs"))

    # --- Monte Carlo campaign ---

    def run_experiment(self):
        cfg = self.config
        self.store.save_config(cfg.resolved)
        logger.info("Running %s over %d seed(s), %s map", ", ".join(cfg.variants), cfg.runs, cfg.map_mode)
        started = time.perf_counter()
        results = Parallel(n_jobs=cfg.n_jobs)(delayed(run_seed)(cfg, seed) for seed in cfg.seeds)

        wall = {variant: {} for variant in cfg.variants}
        for seed, outputs in sorted(results, key=lambda r: r[0]):
            for variant, events, seconds in outputs:
                self.event_logger.log_events(f"{variant}/seed_{seed}", events)
                wall[variant][str(seed)] = round(seconds, 3)
        self.store.save_metadata({
            "variants": list(cfg.variants),
            "seeds": cfg.seeds,
            "runs": cfg.runs,
            "map_mode": cfg.map_mode,
            "config_hash": cfg.config_hash(),
            "wall_clock_s": wall,
            "total_s": round(time.perf_counter() - started, 1),
        })
        return self.evaluate()

    def evaluate(self, variants=None):
        """Aggregates stored records into summary, RPE and NEES trace tables plus figures."""
        cfg = self.config
        variants = variants or [v for v in cfg.variants if self.store.seeds(v)]
        if not variants:
            raise FileNotFoundError(f"no run records under {self.store.runs_dir}")
        rows, rpe_tables, traces = [], [], {}
        n_runs = 0
        for variant in variants:
            records = self.store.load_records(variant)
            n_runs = max(n_runs, len(records))
            events = FilterEvents()
            for variable in EVALUATED.get(variant, ALL_VARIABLES):
                rows.append({"variant": variant, "runs": len(records),
                             **summary_row(records, variable, cfg.align_mode, cfg.eval_2d, events)})
            segments = rpe(records, cfg.rpe_lengths, LOCAL_POSE, cfg.eval_2d)
            segments.insert(0, "variant", variant)
            rpe_tables.append(segments)
            traces[variant] = self.nees_trace(records, variant)
            self.store.save_table(traces[variant], f"nees_trace_{variant}.csv")
            if len(events):
                self.event_logger.log_events(f"{variant}/metrics", events)

        summary = pd.DataFrame(rows)
        segments = pd.concat(rpe_tables, ignore_index=True)
        rpe_table = pd.concat([rpe_summary(s).assign(variant=v) for v, s in segments.groupby("variant", sort=False)],
                              ignore_index=True) if not segments.empty else rpe_summary(segments)
        self.store.save_table(summary, "summary.csv")
        self.store.save_table(rpe_table, "rpe.csv")
        self.store.save_table(segments, "rpe_segments.csv")
        write_excel(summary, rpe_table, self.store.path("summary.xlsx"))
        figures = self.write_figures(traces, segments, n_runs)
        if cfg.report_pdf:
            build_pdf_report(summary, figures, self.store.path("report.pdf"),
                             {**self.store.load_metadata().get("experiment", {}), "runs": n_runs})
        logger.info("Summary written to %s", self.store.path("summary.csv"))
        return summary

    @staticmethod
    def nees_trace(records, variant):
        """Per-step NEES of each part and the error/3-sigma table of the first run."""
        t = records[0].t
        trace = pd.DataFrame({"t": t})
        for variable in EVALUATED.get(variant, (LOCAL_POSE, RELATIVE_TRANS)):
            prefix = TRACE_VARIABLES[variable]
            for part in (ORIENTATION, POSITION, POSE):
                per_step = nees(records, variable, part).per_step.set_index("t")["nees"]
                trace[f"nees_{prefix}_{part}"] = per_step.reindex(t).to_numpy()
            bounds = three_sigma(records, variable).set_index("t")
            for column in bounds.columns:
                trace[f"{prefix}_{column}"] = bounds[column].reindex(t).to_numpy()
        return trace

    def write_figures(self, traces, segments, n_runs):
        fig_dir = self.store.path("figures")
        figures = {}
        for column, dim in (("nees_local_orientation", 3), ("nees_local_position", 3),
                            ("nees_relative_pose", 6)):
            path = os.path.join(fig_dir, f"{column}.png")
            figures[f"NEES {column[5:].replace('_', ' ')}"] = save_figure(
                nees_figure(traces, column, nees_bounds(max(n_runs, 1), dim)), path)
        for variant, trace in traces.items():
            path = os.path.join(fig_dir, f"three_sigma_{variant}.png")
            figures[f"3-sigma local pose: {variant}"] = save_figure(
                three_sigma_figure(trace, "local", f"{variant}: local pose error, run 0"), path)
        figures["Relative pose error"] = save_figure(rpe_figure(segments), os.path.join(fig_dir, "rpe.png"))
        return figures

    # --- observability ---

    def observability_scenes(self):
        """Random generic motions, each with its own random features and keyframes."""
        obs = self.config.observability
        rng = np.random.default_rng(obs["seed"])
        scenes = []
        for _ in range(obs["trajectories"]):
            motion = random_motion(rng, obs["steps"], obs["rate"])
            scenes.append((motion, random_scene(rng, motion, obs["local_features"], obs["map_features"],
                                                obs["keyframes"])))
        return scenes

    def run_observability_suite(self):
        """Every case on every scene plus the gauge checks; returns (report table, all passed)."""
        obs = self.config.observability
        scenes = self.observability_scenes()
        table = verify_suite(scenes, SUITE, T=obs["steps"], tol=obs["tol"],
                             perturbation=obs["perturbation"], seed=obs["seed"])
        rng = np.random.default_rng(obs["seed"] + 1)
        gauge_rows = [{"trajectory": n, **r.as_dict()}
                      for n, (motion, scene) in enumerate(scenes)
                      for r in gauge_invariance(motion, scene, rng)]
        table = pd.concat([table, pd.DataFrame(gauge_rows)], ignore_index=True)
        passed = bool(table["passed"].all())

        self.store.save_table(table, "observability.csv")
        lines = ["Observability suite", "=" * 60]
        for row in table.itertuples():
            mark = "PASS" if row.passed else "FAIL"
            lines.append(f"[{mark}] trajectory {row.trajectory} {row.label:<34} "
                         f"dim {row.null_dim} (claimed {row.claimed_dim})  residual {row.basis_residual:.1e}")
        lines.append(f"{int(table['passed'].sum())}/{len(table)} checks passed")
        write_atomic(self.store.path("observability.txt"), lambda f: f.write("\n".join(lines) + "\n"))
        self.store.save_metadata({"checks": len(table), "passed": int(table["passed"].sum()),
                                  "cases": len(SUITE), "scenes": len(scenes)}, key="observability")
        log = logger.info if passed else logger.error
        log("Observability suite: %d/%d checks passed", int(table["passed"].sum()), len(table))
        return table, passed

    # --- update cost ---

    def timing_report(self):
        """
        Wall time of schmidt_update and full_update against the number of
        keyframes m. Slopes are fitted on the median cost above the m = 0
        baseline, which is the part the nuisance size drives.
        """
        timing = self.config.timing
        # loky worker with BLAS limited to one thread
        with parallel_config(backend="loky", inner_max_num_threads=1):
            (rows,) = Parallel(n_jobs=2)(delayed(time_updates)(timing, self.config.seed) for _ in range(1))
        table = pd.DataFrame(rows)
        base = table[table["m"] == 0].set_index("update")["median_ms"]
        table["excess_ms"] = table["median_ms"] - table["update"].map(base)
        slopes = {name: loglog_slope(group["m"], group["excess_ms"]) for name, group in table.groupby("update")}
        self.store.save_table(table, "timing.csv")
        self.store.save_metadata({"slopes": slopes, "rows": timing["rows"], "repeats": timing["repeats"]},
                                 key="timing")
        logger.info("Update cost slopes: schmidt %.2f, full %.2f", slopes["schmidt"], slopes["full"])
        return table, slopes


ACCEPTANCE_BANDS = {
    "imperfect": [
        ("msoc-s-ikf", LOCAL_POSE, "nees_orientation", 0.5, 2.0),
        ("msoc-s-ikf", LOCAL_POSE, "nees_position", 0.5, 2.0),
        ("msc-ikf", LOCAL_POSE, "nees_position", 3.0, np.inf),
    ],
    "perfect": [
        ("msc-ikf", LOCAL_POSE, "nees_pose", 0.4, 2.0),
        ("msoc-s-ikf", LOCAL_POSE, "nees_pose", 0.4, 2.0),
    ],
}
TIMING_BANDS = {"schmidt": (0.7, 1.3), "full": (1.6, 2.4)}
RMSE_NOISE_SIGMAS = 2.0


def _se(summary, variant):
    """Standard error of the relative_trans position RMSE, 0 when unknown."""
    sel = summary[(summary["variant"] == variant) & (summary["variable"] == RELATIVE_TRANS)]
    if "rmse_position_se_m" not in sel or not len(sel):
        return 0.0
    se = float(sel["rmse_position_se_m"].iloc[0])
    return se if np.isfinite(se) else 0.0


def acceptance_checks(summary, map_mode):
    """(name, passed, value) for the consistency bands of the campaign's map mode."""
    checks = []

    def value(variant, variable, column):
        sel = summary[(summary["variant"] == variant) & (summary["variable"] == variable)]
        return float(sel[column].iloc[0]) if len(sel) else float("nan")

    for variant, variable, column, low, high in ACCEPTANCE_BANDS[map_mode]:
        v = value(variant, variable, column)
        checks.append((f"{variant} {variable} {column} in [{low}, {high}]", bool(low <= v <= high), v))
    if map_mode == "imperfect":
        worst = max(value("msc-s-ekf", LOCAL_POSE, "nees_orientation"),
                    value("msc-s-ekf", LOCAL_POSE, "nees_position"))
        checks.append(("msc-s-ekf local_pose NEES >= 3 on orientation or position", bool(worst >= 3.0), worst))
        ours = value("msoc-s-ikf", LOCAL_POSE, "rmse_position_m")
        for other in ("msc-s-ekf", "msc-ekf"):
            theirs = value(other, LOCAL_POSE, "rmse_position_m")
            checks.append((f"msoc-s-ikf position RMSE below {other}", bool(ours < theirs), ours))
        relative = summary[summary["variable"] == RELATIVE_TRANS]
        ours = value("msoc-s-ikf", RELATIVE_TRANS, "rmse_position_m")
        for other in relative["variant"]:
            if other == "msoc-s-ikf":
                continue
            theirs = value(other, RELATIVE_TRANS, "rmse_position_m")
            noise = RMSE_NOISE_SIGMAS * np.hypot(_se(summary, "msoc-s-ikf"), _se(summary, other))
            checks.append((f"msoc-s-ikf relative_trans RMSE not above {other}", bool(ours <= theirs + noise),
                           ours))
    else:
        a = value("msc-ikf", LOCAL_POSE, "rmse_position_m")
        b = value("msoc-s-ikf", LOCAL_POSE, "rmse_position_m")
        checks.append(("msc-ikf and msoc-s-ikf position RMSE within 2x", bool(max(a, b) <= 2 * min(a, b)),
                       max(a, b) / min(a, b) if min(a, b) > 0 else float("nan")))
    return checks


def timing_checks(slopes):
    """(name, passed, value) for the fitted cost slopes."""
    checks = []
    for name, (low, high) in TIMING_BANDS.items():
        v = float(slopes.get(name, float("nan")))
        checks.append((f"{name} update log-log slope in [{low}, {high}]", bool(low <= v <= high), v))
    return checks

