"""Command-line interface: simulate, run, eval, and plot-data subcommands.

On success the exit code is 0; on failure a machine-readable error object
is printed to stderr as JSON and the exit code is nonzero. The only
environment variable honoured is ``TLTRACK_LOG_LEVEL`` (log level name).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import harness, simulator
from .detection import read_detections
from .geometry import load_calibration_dir, read_poses
from .hdmap import load_map

logger = logging.getLogger("tltrack")


def _setup_logging() -> None:
    level = os.environ.get("TLTRACK_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s",
    )


def _cmd_simulate(args) -> None:
    scenario = simulator.load_scenario(args.scenario)
    paths = simulator.generate(scenario, args.output)
    logger.info("wrote %s", paths)
    print(str(Path(args.output).resolve()))


def _cmd_run(args) -> None:
    config = (
        harness.load_config(args.config) if args.config else harness.PipelineConfig()
    )
    reports, fps = harness.run_pipeline(
        hd_map=load_map(args.map),
        cameras=load_calibration_dir(args.calib),
        detections=read_detections(args.detections),
        poses=read_poses(args.poses),
        mode=harness.AblationMode(args.mode),
        config=config,
    )
    harness.write_reports(args.output, reports)
    # Throughput goes to stderr so the report artifact stays deterministic.
    print(f"processed {len(reports)} frames at {fps:.0f} fps", file=sys.stderr)


def _cmd_eval(args) -> None:
    config = (
        harness.load_config(args.config) if args.config else harness.PipelineConfig()
    )
    report = harness.evaluate(
        reports=harness.read_reports(args.reports),
        ground_truth=harness.read_ground_truth(args.ground_truth),
        match_radius_m=config.match_radius_m,
    )
    Path(args.output).write_text(report.to_json() + "\n")
    print(
        f"accuracy={report.class_accuracy:.4f} ape={report.ape_m:.3f} m",
        file=sys.stderr,
    )


def _cmd_plot_data(args) -> None:
    csv_text = harness.emit_sequence_csv(
        reports=harness.read_reports(args.reports),
        ground_truth=harness.read_ground_truth(args.ground_truth),
        light_id=args.light,
        od_reports=harness.read_reports(args.od_reports) if args.od_reports else None,
    )
    Path(args.output).write_text(csv_text)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tltrack",
        description="Multi-camera traffic light fusion and tracking pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate streams from a scenario file")
    p.add_argument("scenario", help="scenario JSON file")
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("run", help="run the pipeline over recorded streams")
    p.add_argument("-m", "--map", required=True, help="HD map JSON file")
    p.add_argument("-c", "--calib", required=True, help="calibration directory")
    p.add_argument("-d", "--detections", required=True, help="detection JSONL")
    p.add_argument("-p", "--poses", required=True, help="pose JSONL")
    p.add_argument(
        "--mode",
        choices=[m.value for m in harness.AblationMode],
        default=harness.AblationMode.OD_FUSION_TRACKING.value,
    )
    p.add_argument("-o", "--output", required=True, help="report JSONL output")
    p.add_argument("--config", help="pipeline config JSON")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("eval", help="score reports against ground truth")
    p.add_argument("-r", "--reports", required=True)
    p.add_argument("-g", "--ground-truth", required=True)
    p.add_argument("-o", "--output", required=True, help="evaluation JSON output")
    p.add_argument("--config", help="pipeline config JSON")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("plot-data", help="per-frame CSV for one light")
    p.add_argument("-r", "--reports", required=True)
    p.add_argument("-g", "--ground-truth", required=True)
    p.add_argument("--light", required=True, help="light_id to extract")
    p.add_argument("--od-reports", help="optional detector-only report JSONL")
    p.add_argument("-o", "--output", required=True, help="CSV output")
    p.set_defaults(func=_cmd_plot_data)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except Exception as exc:  # surface every failure as machine-readable JSON
        print(
            json.dumps({"error": type(exc).__name__, "message": str(exc)}),
            file=sys.stderr,
        )
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
