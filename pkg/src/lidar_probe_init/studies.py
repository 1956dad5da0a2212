# lidar-probe-init/src/lidar_probe_init/studies.py
"""
Simulator studies behind the ``reproduce`` command.

Three studies are run on simulated data and written as a markdown report
plus CSV tables:

    - calibration recovery: 20-pose sessions over a range-noise sweep,
      comparing the solved extrinsics with the truth;
    - surface error: five sensor configurations on the male and female
      mannequins, comparing the preprocessed surface with the labeled
      ground truth;
    - repeatability: phantom subjects scanned in re-seeded trials, scoring
      the tangential offset between the placed probe and the marker.

Tables carry a ``hardware_reference`` column with the values measured on
the physical rig. Nothing time-dependent is written, so equal seeds give
byte-identical bundles.
"""

import csv
import logging
import math
import os
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from lidar_probe_init.calibration import session_initial_params, solve_extrinsics
from lidar_probe_init.config import PipelineConfig
from lidar_probe_init.formats import write_json
from lidar_probe_init.geometry import PointCloud, RigidTransform, RotationVector
from lidar_probe_init.metrics import (
    error_bands,
    evaluate_probe_pose,
    evaluate_reconstruction,
    pick_marker_point,
    repeatability,
    summarize,
    write_trials_csv,
)
from lidar_probe_init.phantoms import PhantomParams, build_template
from lidar_probe_init.preprocess import preprocess_pipeline
from lidar_probe_init.random_generator import RandomNumberGenerator
from lidar_probe_init.reconstruction import accumulate_sweeps, mean_sensor_origin
from lidar_probe_init.registration import estimate_probe_pose
from lidar_probe_init.simulation import (
    CalibrationPlan,
    PhantomSpec,
    SensorModel,
    SimScenario,
    SweepPlan,
    SweepSession,
    run_calibration_session,
    run_sweep_session,
)

logger = logging.getLogger(__name__)

CALIBRATION_REFERENCE = "overall RMS 1.82 mm; mean per-pose RMS 1.77 mm"
CALIBRATION_REFERENCE_NOISE_MM = 1.5
SURFACE_REFERENCE = "e_RMSE 2.78 ± 0.21 mm; e_95 4.86 ± 0.36 mm; coverage 96.8% at 8 mm"
REPEATABILITY_REFERENCES = (
    "26.32 ± 3.93 mm",
    "24.48 ± 2.81 mm",
    "28.00 ± 0.30 mm",
    "23.75 ± 3.15 mm",
    "26.14 ± 1.72 mm",
)


@dataclass(frozen=True)
class SensorConfiguration:
    name: str
    range_noise_sigma: float
    angular_step_deg: float
    sweep_speed: float


SENSOR_CONFIGURATIONS = (
    SensorConfiguration("baseline", 0.002, 0.72, 0.02),
    SensorConfiguration("low_noise", 0.001, 0.72, 0.02),
    SensorConfiguration("high_noise", 0.003, 0.72, 0.02),
    SensorConfiguration("fine_step", 0.002, 0.36, 0.02),
    SensorConfiguration("fast_sweep", 0.002, 0.72, 0.04),
)


@dataclass(frozen=True)
class Subject:
    name: str
    sex: str
    overrides: Dict[str, float] = field(default_factory=dict)


SUBJECTS = (
    Subject("subject_1", "male"),
    Subject("subject_2", "male", {"half_width": 0.18, "half_height": 0.13}),
    Subject("subject_3", "female"),
    Subject("subject_4", "male", {"half_width": 0.16, "half_height": 0.11, "pectoral_height": 0.014}),
    Subject("subject_5", "female", {"half_width": 0.165, "breast_height": 0.03}),
)


def _fmt(value: float, digits: int = 4) -> str:
    return f"{value:.{digits}f}"


def _write_csv(path: str, header: Sequence[str], rows: Sequence[Sequence[Any]]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _markdown_table(header: Sequence[str], rows: Sequence[Sequence[Any]]) -> List[str]:
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(str(c) for c in row) + " |" for row in rows]
    return lines


def _trial_seed(cfg: PipelineConfig, offset: int) -> int:
    return RandomNumberGenerator(cfg.seed).spawn(offset).seed


def _reconstruct(
    session: SweepSession, extrinsics: RigidTransform, cfg: PipelineConfig
) -> Tuple[PointCloud, PointCloud, np.ndarray]:
    raw = accumulate_sweeps(session.recordings, extrinsics, cfg.reconstruction, cfg.threads)
    viewpoint = mean_sensor_origin(session.recordings, extrinsics)
    surface = preprocess_pipeline(raw, cfg.preprocess, viewpoint)
    return raw, surface, viewpoint


# --- calibration recovery ---------------------------------------------------


def run_calibration_study(cfg: PipelineConfig, out_dir: str) -> List[str]:
    """Noise sweep of 20-pose calibrations; returns the markdown section."""
    study = cfg.reproduce
    levels = (0.0, CALIBRATION_REFERENCE_NOISE_MM) if study.quick else study.noise_levels_mm
    repetitions = 1 if study.quick else study.calibration_repetitions
    rows: List[List[Any]] = []
    summary_rows: List[List[Any]] = []
    histogram = None
    for level_index, noise_mm in enumerate(levels):
        rms, t_err, r_err = [], [], []
        for r in range(repetitions):
            seed = _trial_seed(cfg, 1000 * level_index + r)
            scenario = SimScenario(
                name=f"calibration_{noise_mm:g}mm_{r}",
                session="calibration",
                seed=seed,
                phantom=PhantomSpec("plate"),
                sensor=SensorModel(range_noise_sigma=noise_mm / 1000.0),
                calibration=CalibrationPlan(),
            )
            session = run_calibration_session(scenario, threads=cfg.threads)
            solver = replace(cfg.solver, seed=seed)
            init = session_initial_params(session.data, session.session, solver)
            result = solve_extrinsics(session.data, init, solver, cfg.threads)
            truth = scenario.true_extrinsics
            translation_error = (result.extrinsics.translation - truth.translation) * 1000.0
            rotation_error = math.degrees(
                RotationVector.from_matrix(truth.rotation.T @ result.extrinsics.rotation).angle
            )
            rms.append(result.overall_rms * 1000.0)
            t_err.append(float(np.max(np.abs(translation_error))))
            r_err.append(rotation_error)
            rows.append(
                [_fmt(noise_mm, 2), r, seed, _fmt(result.overall_rms * 1000.0)]
                + [_fmt(e) for e in translation_error]
                + [_fmt(rotation_error)]
                + [_fmt(s * 1000.0) for s in result.translation_sigma]
                + [_fmt(math.degrees(s)) for s in result.rotation_sigma]
                + [result.converged]
            )
            if noise_mm == CALIBRATION_REFERENCE_NOISE_MM and histogram is None:
                histogram = result.stats
        mean_rms, sd_rms = summarize(rms)
        reference = CALIBRATION_REFERENCE if noise_mm == CALIBRATION_REFERENCE_NOISE_MM else ""
        summary_rows.append(
            [
                _fmt(noise_mm, 2),
                repetitions,
                f"{_fmt(mean_rms)} ± {_fmt(sd_rms)}",
                _fmt(max(t_err)),
                _fmt(max(r_err)),
                reference,
            ]
        )

    _write_csv(
        os.path.join(out_dir, "calibration_recovery.csv"),
        [
            "noise_mm", "repetition", "seed", "overall_rms_mm",
            "t_err_x_mm", "t_err_y_mm", "t_err_z_mm", "rot_err_deg",
            "sigma_tx_mm", "sigma_ty_mm", "sigma_tz_mm",
            "sigma_wx_deg", "sigma_wy_deg", "sigma_wz_deg", "converged",
        ],
        rows,
    )  # fmt: skip
    header = [
        "noise_mm",
        "repetitions",
        "overall_rms_mm",
        "max_t_err_mm",
        "max_rot_err_deg",
        "hardware_reference",
    ]
    _write_csv(os.path.join(out_dir, "calibration_summary.csv"), header, summary_rows)
    if histogram is not None:
        edges = histogram.bin_edges * 1000.0
        _write_csv(
            os.path.join(out_dir, "calibration_histogram.csv"),
            ["bin_lo_mm", "bin_hi_mm", "count"],
            [
                [_fmt(lo), _fmt(hi), int(c)]
                for lo, hi, c in zip(edges[:-1], edges[1:], histogram.histogram)
            ],
        )
    return ["## Calibration recovery", ""] + _markdown_table(header, summary_rows) + [""]


# --- surface error ----------------------------------------------------------


def _surface_scenario(
    configuration: SensorConfiguration, sex: str, seed: int, quick: bool
) -> SimScenario:
    return SimScenario(
        name=f"{sex}_{configuration.name}",
        session="sweep",
        seed=seed,
        phantom=PhantomSpec(sex, PhantomParams(marker=False)),
        sensor=SensorModel(
            angular_step=math.radians(configuration.angular_step_deg),
            range_noise_sigma=configuration.range_noise_sigma,
        ),
        sweep=SweepPlan(speed=configuration.sweep_speed * (2.0 if quick else 1.0)),
        ground_truth_spacing=0.005 if quick else 0.003,
        templates=False,
    )


def run_surface_study(cfg: PipelineConfig, out_dir: str) -> List[str]:
    """Surface error per sensor configuration and mannequin."""
    quick = cfg.reproduce.quick
    configurations = SENSOR_CONFIGURATIONS[:1] if quick else SENSOR_CONFIGURATIONS
    rows: List[List[Any]] = []
    per_sex: Dict[str, Dict[str, List[float]]] = {}
    for c_index, configuration in enumerate(configurations):
        for s_index, sex in enumerate(("male", "female")):
            seed = _trial_seed(cfg, 2000 + 10 * c_index + s_index)
            scenario = _surface_scenario(configuration, sex, seed, quick)
            session = run_sweep_session(scenario, threads=cfg.threads)
            _, surface, _ = _reconstruct(session, scenario.true_extrinsics, cfg)
            evaluation = evaluate_reconstruction(
                surface,
                session.ground_truth,
                cfg.registration,
                cfg.metrics.coverage_tolerance,
                cfg.metrics.error_bands,
            )
            report = evaluation.surface
            stats = per_sex.setdefault(sex, {"rmse": [], "e95": [], "coverage": []})
            stats["rmse"].append(report.e_rmse * 1000.0)
            stats["e95"].append(report.e_95 * 1000.0)
            stats["coverage"].append(report.coverage * 100.0)
            rows.append(
                [
                    sex,
                    configuration.name,
                    _fmt(report.e_rmse * 1000.0),
                    _fmt(report.e_95 * 1000.0),
                    _fmt(report.coverage * 100.0, 2),
                    _fmt(evaluation.fitness),
                    _fmt(evaluation.inlier_rmse * 1000.0),
                ]
                + [_fmt(v, 4) for v in report.bands.values()]
                + [len(surface), SURFACE_REFERENCE]
            )
    band_names = [f"band_{label}" for label in error_bands(np.zeros(1), cfg.metrics.error_bands)]
    header = [
        "phantom", "configuration", "e_rmse_mm", "e_95_mm", "coverage_pct",
        "f_icp", "e_icp_mm", *band_names, "points", "hardware_reference",
    ]  # fmt: skip
    _write_csv(os.path.join(out_dir, "surface_error.csv"), header, rows)

    summary_header = ["phantom", "e_rmse_mm", "e_95_mm", "coverage_pct", "hardware_reference"]
    summary_rows = []
    for sex, stats in per_sex.items():
        cells = [sex]
        for key in ("rmse", "e95", "coverage"):
            mean, sd = summarize(stats[key])
            cells.append(f"{_fmt(mean, 2)} ± {_fmt(sd, 2)}")
        summary_rows.append(cells + [SURFACE_REFERENCE])
    _write_csv(os.path.join(out_dir, "surface_summary.csv"), summary_header, summary_rows)
    return (
        ["## Surface error", ""]
        + _markdown_table(summary_header, summary_rows)
        + [""]
    )


# --- repeatability ----------------------------------------------------------


def _subject_scenario(subject: Subject, seed: int, quick: bool) -> SimScenario:
    return SimScenario(
        name=subject.name,
        session="sweep",
        seed=seed,
        phantom=PhantomSpec(subject.sex, PhantomParams(**subject.overrides)),
        sensor=SensorModel(range_noise_sigma=0.002),
        sweep=SweepPlan(speed=0.04 if quick else 0.02),
        ground_truth_spacing=0.01,
        templates=False,
    )


def run_repeatability_study(cfg: PipelineConfig, out_dir: str) -> List[str]:
    """Probe placement trials per phantom subject."""
    study = cfg.reproduce
    subjects = SUBJECTS[: 2 if study.quick else study.subjects]
    trials = 2 if study.quick else study.trials
    templates = {sex: build_template(sex) for sex in ("male", "female")}
    matrix = np.zeros((len(subjects), trials))
    detail_rows: List[List[Any]] = []
    for s, subject in enumerate(subjects):
        for trial in range(trials):
            seed = _trial_seed(cfg, 3000 + 100 * s + trial)
            scenario = _subject_scenario(subject, seed, study.quick)
            session = run_sweep_session(scenario, threads=cfg.threads)
            raw, surface, viewpoint = _reconstruct(session, scenario.true_extrinsics, cfg)
            pose = estimate_probe_pose(
                templates[subject.sex], surface, viewpoint, cfg.registration, cfg.threads
            )
            marker = pick_marker_point(
                raw, session.truth["marker_apex_m"], cfg.metrics.marker_pick_distance
            )
            placement = evaluate_probe_pose(marker, pose.position, pose.normal)
            matrix[s, trial] = placement["e_parallel_m"]
            mesh_surface = scenario.mesh.surface
            analytic = mesh_surface.normal(pose.position[0], pose.position[1])
            tilt = math.degrees(math.acos(float(np.clip(analytic @ pose.normal, -1.0, 1.0))))
            detail_rows.append(
                [
                    subject.name,
                    trial + 1,
                    seed,
                    _fmt(placement["e_parallel_m"] * 1000.0),
                    _fmt(pose.outcome.scale_used, 2),
                    _fmt(pose.outcome.fitness),
                    pose.outcome.converged,
                    _fmt(tilt),
                ]
            )
    names = [s.name for s in subjects]
    write_trials_csv(os.path.join(out_dir, "repeatability_trials.csv"), names, matrix)
    _write_csv(
        os.path.join(out_dir, "repeatability_detail.csv"),
        [
            "subject", "trial", "seed", "e_parallel_mm", "scale", "fitness",
            "converged", "normal_error_deg",
        ],
        detail_rows,
    )  # fmt: skip
    report = repeatability(matrix, cfg.metrics.icc_form)
    header = ["subject", "mean_mm", "sd_mm", "hardware_reference"]
    rows = [
        [
            name,
            _fmt(mean * 1000.0, 2),
            _fmt(sd * 1000.0, 2),
            REPEATABILITY_REFERENCES[i] if i < len(REPEATABILITY_REFERENCES) else "",
        ]
        for i, (name, mean, sd) in enumerate(
            zip(names, report.per_subject_mean, report.per_subject_sd)
        )
    ]
    _write_csv(os.path.join(out_dir, "repeatability_summary.csv"), header, rows)
    return (
        ["## Probe placement repeatability", ""]
        + _markdown_table(header, rows)
        + ["", f"{report.icc_form} = {_fmt(report.icc)}", ""]
    )


def reproduce(cfg: PipelineConfig, out_dir: str) -> List[str]:
    """
    Run the enabled studies and write the report bundle.

    Returns:
        Names of the files written, sorted.
    """
    os.makedirs(out_dir, exist_ok=True)
    study = cfg.reproduce
    lines = [
        "# Probe initialization study report",
        "",
        f"Seed {cfg.seed}{' (quick run)' if study.quick else ''}.",
        "",
    ]
    if study.calibration_study:
        logger.info("Running calibration recovery study")
        lines += run_calibration_study(cfg, out_dir)
    if study.surface_study:
        logger.info("Running surface error study")
        lines += run_surface_study(cfg, out_dir)
    if study.repeatability_study:
        logger.info("Running repeatability study")
        lines += run_repeatability_study(cfg, out_dir)
    with open(os.path.join(out_dir, "report.md"), "w", newline="\n") as f:
        f.write("\n".join(lines) + "\n")
    write_json(os.path.join(out_dir, "config.json"), cfg.provenance())
    written = sorted(os.listdir(out_dir))
    logger.info(f"Report bundle written to {out_dir}: {written}")
    return written


def quick_config(cfg: Optional[PipelineConfig] = None) -> PipelineConfig:
    """Copy of ``cfg`` with a coarser Poisson grid and the quick study flag."""
    cfg = cfg or PipelineConfig()
    return replace(
        cfg,
        preprocess=replace(cfg.preprocess, poisson_grid_resolution=64),
        reproduce=replace(cfg.reproduce, quick=True),
    )
