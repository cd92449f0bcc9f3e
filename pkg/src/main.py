import argparse
import logging
import sys

import pandas as pd

from config import DEFAULT_CONFIG_PATH, ConfigError, load_config
from estimator import VARIANT_NAMES
from experiment import ExperimentManager, acceptance_checks, timing_checks
from run_persistence import RunPersistence
from simulator import simulate

logger = logging.getLogger("mapvil")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_ACCEPTANCE = 4


def build_parser():
    parser = argparse.ArgumentParser(prog="mapvil", description="Map-based visual-inertial localization experiments")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help=f"experiment JSON (e.g. {DEFAULT_CONFIG_PATH})")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--runs", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--variants", nargs="+", default=None, metavar="VARIANT",
                       help=f"subset of {', '.join(VARIANT_NAMES)}")
        p.add_argument("--map-mode", choices=["perfect", "imperfect"], default=None)
        return p

    common(sub.add_parser("simulate", help="generate trajectories, IMU, map and ground truth"))
    run = common(sub.add_parser("run", help="Monte Carlo campaign over the selected variants"))
    run.add_argument("--check", action="store_true", help="exit 4 when the consistency bands fail")
    common(sub.add_parser("metrics", help="recompute summaries from stored run records"))
    common(sub.add_parser("observability", help="numerical observability suite"))
    timing = common(sub.add_parser("timing", help="Schmidt vs full update cost against keyframe count"))
    timing.add_argument("--check", action="store_true", help="exit 4 when a cost slope is outside its band")
    return parser


def cmd_simulate(cfg):
    store = RunPersistence(cfg.out_dir)
    store.save_config(cfg.resolved)
    for seed in cfg.seeds:
        sim = simulate(cfg.simulation, seed)
        directory = store.save_simulation(sim)
        print(f"seed {seed}: {len(sim.frames)} frames, {sim.map_used!r} -> {directory}")
    return EXIT_OK


def cmd_run(cfg, check=False):
    summary = ExperimentManager(cfg).run_experiment()
    print(summary.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
    if not check:
        return EXIT_OK
    failed = 0
    for name, passed, value in acceptance_checks(summary, cfg.map_mode):
        print(f"{'✅' if passed else '❌'} {name}: {value:.3f}")
        failed += not passed
    return EXIT_ACCEPTANCE if failed else EXIT_OK


def cmd_metrics(cfg):
    store = RunPersistence(cfg.out_dir)
    variants = [v for v in cfg.variants if v in store.variants()]
    summary = ExperimentManager(cfg).evaluate(variants)
    print(summary.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
    return EXIT_OK


def cmd_observability(cfg):
    table, passed = ExperimentManager(cfg).run_observability_suite()
    with pd.option_context("display.width", 160):
        print(table[["trajectory", "label", "claimed_dim", "null_dim", "basis_residual", "passed"]]
              .to_string(index=False))
    return EXIT_OK if passed else EXIT_ACCEPTANCE


def cmd_timing(cfg, check=False):
    table, slopes = ExperimentManager(cfg).timing_report()
    print(table.to_string(index=False, float_format=lambda v: f"{v:.3f}"))
    print(f"log-log slope: schmidt {slopes['schmidt']:.2f}, full {slopes['full']:.2f}")
    if not check:
        return EXIT_OK
    failed = 0
    for name, passed, value in timing_checks(slopes):
        print(f"{'✅' if passed else '❌'} {name}: {value:.2f}")
        failed += not passed
    return EXIT_ACCEPTANCE if failed else EXIT_OK


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, seed=args.seed, runs=args.runs, out=args.out,
                          variants=args.variants, map_mode=args.map_mode)
        if args.command == "simulate":
            return cmd_simulate(cfg)
        if args.command == "run":
            return cmd_run(cfg, args.check)
        if args.command == "metrics":
            return cmd_metrics(cfg)
        if args.command == "observability":
            return cmd_observability(cfg)
        return cmd_timing(cfg, args.check)
    except ConfigError as e:
        logger.error("%s", e)
        return EXIT_CONFIG
    except Exception as e:
        logger.exception("%s failed: %s", args.command, e)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
