# lidar-probe-init/src/lidar_probe_init/cli.py
"""
Command-line entry point of the probe pose initialization toolkit.

Usage:
    lidar-probe-init <command> [options]

Commands:
    simulate     Run a simulator scenario and write its dataset.
    calibrate    Solve the scanner extrinsics from a calibration dataset.
    reconstruct  Accumulate sweep recordings into a base-frame cloud.
    preprocess   Clean the raw cloud down to the chest surface.
    match        Register a template and report the probe pose.
    eval         Score clouds, probe placements or repeated trials.
    reproduce    Run the simulator studies and write the report bundle.

Example:
    lidar-probe-init simulate --scenario scenarios/mannequin_male.json --out data/male
    lidar-probe-init reconstruct --recordings data/male --extrinsics data/male/truth.json \\
        --out work/raw.ply

Every stage writes a ``manifest.json`` next to its outputs with the sha256 of
its inputs and of the effective configuration. Exit codes: 0 success,
2 invalid input or configuration, 3 degenerate calibration data,
4 registration failure, 5 internal error.
"""

import argparse
import csv
import hashlib
import logging
import os
import sys
from dataclasses import replace
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import scipy
import skimage
import sklearn
import yaml

import lidar_probe_init
from lidar_probe_init.calibration import (
    load_calibration_dataset,
    read_extrinsics,
    session_initial_params,
    solve_extrinsics,
    write_calibration_outputs,
)
from lidar_probe_init.config import PipelineConfig, build_config
from lidar_probe_init.exceptions import ProbeInitError, RejectedInputError
from lidar_probe_init.formats import read_cloud, read_json, sha256_file, write_json, write_ply
from lidar_probe_init.metrics import (
    evaluate_probe_pose,
    evaluate_reconstruction,
    pick_marker_point,
    read_trials_csv,
    repeatability,
)
from lidar_probe_init.preprocess import preprocess_pipeline
from lidar_probe_init.reconstruction import accumulate_sweeps, mean_sensor_origin, read_recordings
from lidar_probe_init.registration import estimate_probe_pose, probe_pose_report, read_template
from lidar_probe_init.simulation import load_scenario, run_scenario
from lidar_probe_init.studies import quick_config, reproduce

logger = logging.getLogger(__name__)

LOG_LEVELS = ["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"]
RECONSTRUCTION_SIDECAR = "reconstruction.json"
DISTANCE_BIN_WIDTH = 0.0005


def setup_logging(log_level: int) -> None:
    """
    Set up the logger for the application.

    Args:
        log_level: The logging level to use.
    """
    logging.basicConfig(
        level=log_level,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
    )
    logger.info(f"Logging set up with level: {logging.getLevelName(log_level)}")


# --- provenance -------------------------------------------------------------


def _hash_inputs(inputs: Dict[str, Optional[str]]) -> Dict[str, str]:
    hashes: Dict[str, str] = {}
    for role, path in sorted(inputs.items()):
        if path is None:
            continue
        if os.path.isdir(path):
            for root, dirs, files in os.walk(path):
                dirs.sort()
                for name in sorted(files):
                    full = os.path.join(root, name)
                    rel = os.path.relpath(full, path).replace(os.sep, "/")
                    hashes[f"{role}/{rel}"] = sha256_file(full)
        elif os.path.isfile(path):
            hashes[role] = sha256_file(path)
        else:
            logger.error(f"Input '{path}' not found")
            raise RejectedInputError(f"Input not found: {path}")
    return hashes


def build_manifest(
    stage: str, inputs: Dict[str, Optional[str]], cfg: PipelineConfig
) -> Dict[str, Any]:
    """
    Provenance record of one stage run.

    Args:
        stage: Command name.
        inputs: Input files or directories keyed by role; directories are
            hashed file by file.
        cfg: Effective configuration.
    """
    return {
        "stage": stage,
        "inputs": _hash_inputs(inputs),
        "config_sha256": hashlib.sha256(cfg.canonical_json().encode("utf-8")).hexdigest(),
        "seed": cfg.seed,
        "versions": {
            "lidar_probe_init": lidar_probe_init.__version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "scikit-learn": sklearn.__version__,
            "scikit-image": skimage.__version__,
            "pyyaml": yaml.__version__,
        },
    }


def _write_manifest(
    out_dir: str, stage: str, inputs: Dict[str, Optional[str]], cfg: PipelineConfig
) -> None:
    write_json(os.path.join(out_dir, "manifest.json"), build_manifest(stage, inputs, cfg))


def _parent_dir(path: str) -> str:
    return os.path.dirname(os.path.abspath(path))


def _resolve_viewpoint(explicit: Optional[Sequence[float]], cloud_path: str) -> Optional[np.ndarray]:
    """Explicit viewpoint, else the reconstruction sidecar next to the cloud."""
    if explicit is not None:
        return np.asarray(explicit, dtype=float)
    sidecar = os.path.join(_parent_dir(cloud_path), RECONSTRUCTION_SIDECAR)
    if os.path.isfile(sidecar):
        return np.asarray(read_json(sidecar)["viewpoint_m"], dtype=float)
    logger.warning("No viewpoint given; normals are oriented 1 m above the centroid")
    return None


# --- commands ---------------------------------------------------------------


def cmd_simulate(args: argparse.Namespace, cfg: PipelineConfig) -> None:
    scenario = load_scenario(args.scenario, seed=args.seed)
    truth = run_scenario(scenario, args.out, cfg.threads)
    _write_manifest(args.out, "simulate", {"scenario": args.scenario}, cfg)
    print(f"Scenario '{scenario.name}' ({scenario.session}) written to {args.out}")
    print(f"Seed: {truth['seed']}")


def cmd_calibrate(args: argparse.Namespace, cfg: PipelineConfig) -> None:
    data, session = load_calibration_dataset(args.dataset)
    solver = cfg.solver
    if "sector" in session:
        solver = replace(solver, sector=tuple(session["sector"]))
    init = session_initial_params(data, session, solver)
    result = solve_extrinsics(data, init, solver, cfg.threads)
    write_calibration_outputs(result, args.out)
    _write_manifest(_parent_dir(args.out), "calibrate", {"dataset": args.dataset}, cfg)
    stats = result.stats.per_pose_summary()
    print(f"Overall RMS: {result.overall_rms * 1000:.3f} mm")
    print(f"Mean per-pose RMS: {stats['mean'] * 1000:.3f} mm")
    print(f"Translation (m): {np.round(result.extrinsics.translation, 6).tolist()}")
    print(f"Converged: {result.converged}")


def cmd_reconstruct(args: argparse.Namespace, cfg: PipelineConfig) -> None:
    recordings = read_recordings(args.recordings)
    extrinsics = read_extrinsics(args.extrinsics)
    raw = accumulate_sweeps(recordings, extrinsics, cfg.reconstruction, cfg.threads)
    viewpoint = mean_sensor_origin(recordings, extrinsics)
    write_ply(args.out, raw)
    out_dir = _parent_dir(args.out)
    write_json(
        os.path.join(out_dir, RECONSTRUCTION_SIDECAR),
        {"points": len(raw), "sweeps": len(recordings), "viewpoint_m": viewpoint},
    )
    _write_manifest(
        out_dir,
        "reconstruct",
        {"recordings": args.recordings, "extrinsics": args.extrinsics},
        cfg,
    )
    print(f"Accumulated {len(raw)} points from {len(recordings)} sweeps into {args.out}")


def cmd_preprocess(args: argparse.Namespace, cfg: PipelineConfig) -> None:
    raw = read_cloud(args.input)
    viewpoint = _resolve_viewpoint(args.viewpoint, args.input)
    if cfg.debug_dir:
        os.makedirs(cfg.debug_dir, exist_ok=True)
    surface = preprocess_pipeline(raw, cfg.preprocess, viewpoint, cfg.debug_dir)
    write_ply(args.out, surface)
    _write_manifest(_parent_dir(args.out), "preprocess", {"input": args.input}, cfg)
    print(f"Surface of {len(surface)} points written to {args.out}")


def cmd_match(args: argparse.Namespace, cfg: PipelineConfig) -> None:
    template = read_template(args.template)
    target = read_cloud(args.target)
    viewpoint = _resolve_viewpoint(args.viewpoint, args.target)
    if viewpoint is None:
        viewpoint = target.centroid() + np.array([0.0, 0.0, 1.0])
    pose = estimate_probe_pose(template, target, viewpoint, cfg.registration, cfg.threads)
    os.makedirs(_parent_dir(args.out), exist_ok=True)
    with open(args.out, "w", newline="\n") as f:
        f.write(probe_pose_report(pose))
    _write_manifest(
        _parent_dir(args.out), "match", {"template": args.template, "target": args.target}, cfg
    )
    print(f"Probe point (m): {np.round(pose.position, 6).tolist()}")
    print(f"Scale: {pose.outcome.scale_used:.2f}, fitness: {pose.outcome.fitness:.4f}")
    print(f"Converged: {pose.outcome.converged}")


def _write_distance_histogram(path: str, distances: np.ndarray) -> None:
    top = max(float(np.max(distances)), DISTANCE_BIN_WIDTH)
    edges = np.arange(0.0, top + DISTANCE_BIN_WIDTH, DISTANCE_BIN_WIDTH)
    counts, edges = np.histogram(distances, bins=edges)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["bin_lo_mm", "bin_hi_mm", "count"])
        for lo, hi, count in zip(edges[:-1], edges[1:], counts):
            writer.writerow([f"{lo * 1000:.2f}", f"{hi * 1000:.2f}", int(count)])


def _write_subject_scatter(path: str, subjects: List[str], trials: np.ndarray) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["subject", "trial", "e_parallel_mm", "subject_mean_mm"])
        for name, row in zip(subjects, trials):
            for t, value in enumerate(row):
                writer.writerow(
                    [name, t + 1, f"{value * 1000:.4f}", f"{np.mean(row) * 1000:.4f}"]
                )


def cmd_eval(args: argparse.Namespace, cfg: PipelineConfig) -> None:
    os.makedirs(args.out, exist_ok=True)
    report: Dict[str, Any] = {}
    inputs: Dict[str, Optional[str]] = {}
    if args.source or args.reference:
        if not (args.source and args.reference):
            raise RejectedInputError("--source and --reference must be given together")
        evaluation = evaluate_reconstruction(
            read_cloud(args.source),
            read_cloud(args.reference),
            cfg.registration,
            cfg.metrics.coverage_tolerance,
            cfg.metrics.error_bands,
        )
        report["surface"] = evaluation.summary()
        _write_distance_histogram(
            os.path.join(args.out, "surface_error_histogram.csv"),
            evaluation.surface.per_point_distances,
        )
        inputs.update(source=args.source, reference=args.reference)
    if args.trials:
        subjects, trials = read_trials_csv(args.trials)
        report["repeatability"] = repeatability(trials, cfg.metrics.icc_form).summary()
        _write_subject_scatter(os.path.join(args.out, "per_subject.csv"), subjects, trials)
        inputs["trials"] = args.trials
    if args.probe_pose:
        if not (args.truth and args.cloud):
            raise RejectedInputError("--probe-pose needs --truth and --cloud")
        pose = read_json(args.probe_pose)
        truth = read_json(args.truth)
        if "marker_apex_m" not in truth:
            raise RejectedInputError(f"{args.truth} has no marker_apex_m")
        marker = pick_marker_point(
            read_cloud(args.cloud), truth["marker_apex_m"], cfg.metrics.marker_pick_distance
        )
        report["probe_pose"] = evaluate_probe_pose(marker, pose["position_m"], pose["normal"])
        inputs.update(probe_pose=args.probe_pose, truth=args.truth, cloud=args.cloud)
    if not report:
        raise RejectedInputError("eval needs --source/--reference, --trials or --probe-pose")
    write_json(os.path.join(args.out, "evaluation.json"), report)
    _write_manifest(args.out, "eval", inputs, cfg)
    for section, payload in report.items():
        print(f"{section}:")
        for key, value in payload.items():
            if np.isscalar(value):
                print(f"  {key}: {value}")


def cmd_reproduce(args: argparse.Namespace, cfg: PipelineConfig) -> None:
    if args.quick:
        cfg = quick_config(cfg)
    written = reproduce(cfg, args.out)
    _write_manifest(args.out, "reproduce", {}, cfg)
    print(f"Report bundle: {os.path.join(args.out, 'report.md')} ({len(written)} files)")


# --- argument parsing -------------------------------------------------------


def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON or YAML pipeline configuration")
    common.add_argument("--seed", type=int, help="Root seed, overrides the configuration")
    common.add_argument("--threads", type=int, help="Worker cap of parallel stages")
    common.add_argument("--debug-dir", help="Directory for intermediate clouds")
    common.add_argument(
        "--log-level",
        default="INFO",
        choices=LOG_LEVELS,
        help="Set the logging level",
    )
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = argparse.ArgumentParser(
        prog="lidar-probe-init",
        description="Probe pose initialization from a robot-mounted 2D LiDAR.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="Run a simulator scenario")
    p.add_argument("--scenario", required=True, help="Scenario JSON file")
    p.add_argument("--out", required=True, help="Dataset output directory")
    p.set_defaults(handler=cmd_simulate)

    p = sub.add_parser("calibrate", parents=[common], help="Solve the scanner extrinsics")
    p.add_argument("--dataset", required=True, help="Calibration dataset directory")
    p.add_argument("--out", required=True, help="Path of calibration.json")
    p.set_defaults(handler=cmd_calibrate)

    p = sub.add_parser("reconstruct", parents=[common], help="Accumulate sweeps")
    p.add_argument("--recordings", required=True, help="Directory holding sweep_* folders")
    p.add_argument(
        "--extrinsics", required=True, help="calibration.json or simulator truth.json"
    )
    p.add_argument("--out", required=True, help="Output PLY path")
    p.set_defaults(handler=cmd_reconstruct)

    p = sub.add_parser("preprocess", parents=[common], help="Clean the raw cloud")
    p.add_argument("--input", required=True, help="Raw PLY or CSV cloud")
    p.add_argument("--out", required=True, help="Output PLY path")
    p.add_argument("--viewpoint", type=float, nargs=3, metavar=("X", "Y", "Z"))
    p.set_defaults(handler=cmd_preprocess)

    p = sub.add_parser("match", parents=[common], help="Estimate the probe pose")
    p.add_argument("--template", required=True, help="Template directory")
    p.add_argument("--target", required=True, help="Preprocessed chest surface")
    p.add_argument("--out", required=True, help="Path of probe_pose.json")
    p.add_argument("--viewpoint", type=float, nargs=3, metavar=("X", "Y", "Z"))
    p.set_defaults(handler=cmd_match)

    p = sub.add_parser("eval", parents=[common], help="Score results")
    p.add_argument("--source", help="Evaluated cloud")
    p.add_argument("--reference", help="Ground-truth cloud")
    p.add_argument("--trials", help="Trials CSV: subject,trial,e_parallel_mm")
    p.add_argument("--probe-pose", help="probe_pose.json to score")
    p.add_argument("--truth", help="Simulator truth.json with the marker apex")
    p.add_argument("--cloud", help="Raw cloud the marker is picked from")
    p.add_argument("--out", required=True, help="Output directory")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("reproduce", parents=[common], help="Run the simulator studies")
    p.add_argument("--out", required=True, help="Report bundle directory")
    p.add_argument("--quick", action="store_true", help="Reduced smoke run")
    p.set_defaults(handler=cmd_reproduce)
    return parser


def _effective_config(args: argparse.Namespace) -> PipelineConfig:
    cfg = build_config(args.config)
    if args.seed is not None:
        cfg.apply_seed(args.seed)
    if args.threads is not None:
        if args.threads < 1:
            raise RejectedInputError("--threads must be at least 1")
        cfg.threads = args.threads
    if args.debug_dir is not None:
        cfg.debug_dir = args.debug_dir
    return cfg


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Parse ``argv`` and run one command.

    Returns:
        The process exit code.
    """
    args = build_parser().parse_args(argv)
    setup_logging(getattr(logging, args.log_level.upper()))
    logger.info(f"Running command '{args.command}'")
    try:
        args.handler(args, _effective_config(args))
    except ProbeInitError as e:
        logger.error(f"{type(e).__name__}: {e}")
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except Exception as e:
        logger.exception(f"Unexpected error occurred: {str(e)}")
        print(f"internal error: {e}", file=sys.stderr)
        return 5
    return 0


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
