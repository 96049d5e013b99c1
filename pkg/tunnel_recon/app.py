"""
app.py
----------------
Command-line entry point.

    python app.py run --config tunnel.ini --set trajectory.forward_step=0.2
    python app.py plan --offset 0.5 -0.7
    python app.py ablate --configs SBA P1+P2+P3

Exit status is 0 on success, 2 on a configuration error and the failing
stage's own code otherwise (see config.STAGE_EXIT_CODES).
"""
import argparse
import logging
import os
import sys
from typing import List, Optional

import config
from pipeline import ConfigError, PipelineConfig, StageError, TunnelReconPipeline
from utils.bundle_adjustment import ABLATION_CONFIGS
from utils.flight_planner import RangeReadings

logger = logging.getLogger(__name__)

COMMANDS = ("simulate", "plan", "synth-matches", "pose", "ba", "reconstruct", "stitch", "run", "ablate", "coverage")


def _reading(text: str) -> Optional[float]:
    return None if text.lower() in ("none", "-", "nan") else float(text)


def parse_args(argv: Optional[List[str]] = None) -> argparse.Namespace:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file with [camera] [prior] [trajectory] ... sections")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    common.add_argument("--output-dir", help="shortcut for --set run.output_dir=...")
    common.add_argument("--input-dir", help="ingest frames and matches.txt from this directory")
    common.add_argument("--threads", type=int, help="worker threads (0 = all cores)")
    common.add_argument("--seed", type=int, help="shortcut for --set run.seed=...")
    common.add_argument("--log-level", default=config.LOG_LEVEL, help="DEBUG, INFO, WARNING or ERROR")

    parser = argparse.ArgumentParser(description="Dense tunnel reconstruction from spiral image sequences")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="render a synthetic spiral capture with groundtruth")
    plan = sub.add_parser("plan", parents=[common], help="locate the UAV and plan its forward speed")
    plan.add_argument("--readings", nargs=3, type=_reading, metavar=("D1", "D2", "D3"),
                      help="range readings in meters; 'none' for a failed sensor")
    plan.add_argument("--offset", nargs=2, type=float, metavar=("TX", "TZ"),
                      help="known offset from the tunnel centre instead of readings")
    plan.add_argument("--sweep", action="store_true", help="also write speed_sweep.csv")
    sub.add_parser("synth-matches", parents=[common], help="groundtruth correspondences over the match graph")
    sub.add_parser("pose", parents=[common], help="relative poses, chaining and metric scale")
    sub.add_parser("ba", parents=[common], help="pruned bundle adjustment")
    for name, text in (("reconstruct", "dense pointcloud (cloud.ply)"), ("stitch", "texture atlas and hole masks")):
        stage = sub.add_parser(name, parents=[common], help=text)
        stage.add_argument("--poses", help="pose CSV to use instead of poses.csv")
    sub.add_parser("run", parents=[common], help="the whole pipeline with summary.json")
    ablate = sub.add_parser("ablate", parents=[common], help="bundle adjustment under each pruning configuration")
    ablate.add_argument("--configs", nargs="+", default=list(ABLATION_CONFIGS), choices=list(ABLATION_CONFIGS))
    coverage = sub.add_parser("coverage", parents=[common], help="two-view hole count at multiples of the speed bound")
    coverage.add_argument("--speed-factors", nargs="+", type=float, default=list(config.COVERAGE_SPEED_FACTORS))
    return parser.parse_args(argv)


def load_config(args: argparse.Namespace) -> PipelineConfig:
    overrides = list(args.overrides)
    for key, value in (("run.output_dir", args.output_dir), ("run.input_dir", args.input_dir),
                       ("run.threads", args.threads), ("run.seed", args.seed)):
        if value is not None:
            overrides.append(f"{key}={value}")
    return PipelineConfig.load(args.config, overrides)


def setup_logging(level: str, output_dir: Optional[str] = None) -> None:
    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    if output_dir:
        os.makedirs(output_dir, exist_ok=True)
        handlers.insert(0, logging.FileHandler(os.path.join(output_dir, config.LOG_FILE_NAME)))
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format='%(asctime)s - %(levelname)s - %(message)s',
        handlers=handlers,
        force=True,
    )


def dispatch(pipeline: TunnelReconPipeline, args: argparse.Namespace) -> None:
    command = args.command
    if command == "simulate":
        pipeline.simulate()
    elif command == "plan":
        readings = RangeReadings(*args.readings) if args.readings else None
        pipeline.plan(readings=readings, offset=tuple(args.offset) if args.offset else None,
                      sweep_path=pipeline.path("speed_sweep.csv") if args.sweep else None)
    elif command == "synth-matches":
        pipeline.synth_matches()
    elif command == "pose":
        pipeline.estimate_poses()
    elif command == "ba":
        pipeline.bundle_adjust()
    elif command == "reconstruct":
        pipeline.reconstruct(args.poses)
    elif command == "stitch":
        pipeline.stitch(args.poses)
    elif command == "run":
        pipeline.run()
    elif command == "ablate":
        pipeline.ablate(args.configs)
    elif command == "coverage":
        pipeline.coverage(args.speed_factors)


def main(argv: Optional[List[str]] = None) -> int:
    args = parse_args(argv)
    setup_logging(args.log_level)
    try:
        cfg = load_config(args)
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        return config.EXIT_CONFIG_ERROR
    setup_logging(args.log_level, cfg.run.output_dir)
    try:
        dispatch(TunnelReconPipeline(cfg), args)
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        return config.EXIT_CONFIG_ERROR
    except StageError as e:
        logger.error(f"{e} (exit code {e.exit_code})")
        return e.exit_code
    logger.info(f"{args.command} finished; outputs in {cfg.run.output_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
