# lidar-probe-init/src/lidar_probe_init/metrics.py
"""
Quantitative metrics for calibration, reconstruction and probe placement.

Key components:
    - calibration_stats: per-pose and pooled RMS plus a fixed-bin histogram.
    - surface_error / evaluate_reconstruction: nearest-neighbor error,
      95th percentile, coverage and error bands, optionally after a rigid
      alignment whose fitness and inlier RMSE are reported too.
    - pick_marker_point / project_marker / tangential_error /
      evaluate_probe_pose: marker offset measured in the tangent plane of
      the estimated probe pose.
    - repeatability: within-subject spread and intraclass correlation.
"""

import csv
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from lidar_probe_init.exceptions import RejectedInputError
from lidar_probe_init.geometry import NeighborIndex, PointCloud, RigidTransform
from lidar_probe_init.registration import RegistrationConfig, align_clouds

logger = logging.getLogger(__name__)

HISTOGRAM_BIN_WIDTH = 0.0005
HISTOGRAM_HALF_RANGE = 0.006
ERROR_BANDS = (0.002, 0.008)
ICC_FORMS = ("ICC(1,1)", "ICC(2,1)")


@dataclass
class CalibrationStats:
    """
    Residual statistics of a calibration.

    Attributes:
        per_pose_rms: RMS residual of each pose, meters.
        overall_rms: RMS over all residuals, meters.
        histogram: Counts per bin.
        bin_edges: Bin edges in meters; bins are centered on multiples of
            the bin width so zero sits in the middle of the central bin.
        underflow: Residuals below the first edge.
        overflow: Residuals above the last edge.
    """

    per_pose_rms: np.ndarray
    overall_rms: float
    histogram: np.ndarray
    bin_edges: np.ndarray
    underflow: int
    overflow: int

    def per_pose_summary(self) -> Dict[str, float]:
        rms = self.per_pose_rms
        return {
            "mean": float(np.mean(rms)),
            "min": float(np.min(rms)),
            "max": float(np.max(rms)),
            "std": float(np.std(rms, ddof=1)) if rms.size > 1 else 0.0,
        }


def calibration_stats(
    residual_groups: Sequence[np.ndarray],
    bin_width: float = HISTOGRAM_BIN_WIDTH,
    half_range: float = HISTOGRAM_HALF_RANGE,
) -> CalibrationStats:
    """
    Summarize residuals grouped by pose.

    Args:
        residual_groups: One residual array per pose, meters.
        bin_width: Histogram bin width.
        half_range: Bin centers run from -half_range to +half_range.

    Raises:
        RejectedInputError: If there are no groups or a group is empty.
    """
    if len(residual_groups) == 0:
        raise RejectedInputError("No residual groups given")
    groups = [np.asarray(g, dtype=float).reshape(-1) for g in residual_groups]
    for k, group in enumerate(groups):
        if group.size == 0:
            logger.error(f"Residual group {k} is empty")
            raise RejectedInputError(f"Residual group {k} is empty")
    per_pose = np.array([math.sqrt(float(np.mean(g**2))) for g in groups])
    pooled = np.concatenate(groups)
    overall = math.sqrt(float(np.mean(pooled**2)))

    bins = int(round(2 * half_range / bin_width)) + 1
    edges = (np.arange(bins + 1) - bins / 2.0) * bin_width
    counts, _ = np.histogram(pooled, bins=edges)
    return CalibrationStats(
        per_pose_rms=per_pose,
        overall_rms=overall,
        histogram=counts,
        bin_edges=edges,
        underflow=int(np.count_nonzero(pooled < edges[0])),
        overflow=int(np.count_nonzero(pooled > edges[-1])),
    )


@dataclass
class SurfaceErrorReport:
    """
    Nearest-neighbor error of one cloud against a reference.

    Attributes:
        e_rmse: RMS distance, meters.
        e_95: 95th percentile distance (linear interpolation), meters.
        coverage: Fraction of source points within ``tolerance``.
        tolerance: Coverage tolerance, meters.
        per_point_distances: Distance of every source point.
        bands: Fraction of points per error band, keyed by a readable label.
    """

    e_rmse: float
    e_95: float
    coverage: float
    tolerance: float
    per_point_distances: np.ndarray = field(repr=False)
    bands: Dict[str, float] = field(default_factory=dict)

    @property
    def median(self) -> float:
        return float(np.median(self.per_point_distances))

    def summary(self) -> Dict[str, object]:
        return {
            "e_rmse_m": self.e_rmse,
            "e_95_m": self.e_95,
            "median_m": self.median,
            "coverage": self.coverage,
            "coverage_tolerance_m": self.tolerance,
            "bands": self.bands,
            "points": int(self.per_point_distances.size),
        }


def error_bands(
    distances: np.ndarray, edges: Sequence[float] = ERROR_BANDS
) -> Dict[str, float]:
    """Fraction of distances in each band, e.g. '<2mm', '2-8mm', '>8mm'."""
    distances = np.asarray(distances, dtype=float)
    mm = [f"{e * 1000:g}" for e in edges]
    labels = [f"<{mm[0]}mm"]
    labels += [f"{lo}-{hi}mm" for lo, hi in zip(mm[:-1], mm[1:])]
    labels.append(f">{mm[-1]}mm")
    index = np.searchsorted(np.asarray(edges, dtype=float), distances, side="right")
    counts = np.bincount(index, minlength=len(edges) + 1)
    return {
        label: float(count) / distances.size for label, count in zip(labels, counts)
    }


def surface_error(
    source: PointCloud,
    reference: PointCloud,
    tolerance: float = 0.008,
    bands: Sequence[float] = ERROR_BANDS,
) -> SurfaceErrorReport:
    """
    Distance from every source point to its nearest reference point.

    Args:
        source: Evaluated cloud.
        reference: Ground-truth cloud.
        tolerance: Coverage threshold in meters.
        bands: Band edges for the error breakdown.

    Raises:
        RejectedInputError: If either cloud is empty.
    """
    if len(source) == 0 or len(reference) == 0:
        logger.error("surface_error called with an empty cloud")
        raise RejectedInputError("Both clouds must be non-empty")
    distances, _ = NeighborIndex(reference.points).nearest(source.points)
    report = SurfaceErrorReport(
        e_rmse=math.sqrt(float(np.mean(distances**2))),
        e_95=float(np.percentile(distances, 95, method="linear")),
        coverage=float(np.count_nonzero(distances <= tolerance)) / distances.size,
        tolerance=tolerance,
        per_point_distances=distances,
        bands=error_bands(distances, bands),
    )
    logger.info(
        f"Surface error: RMSE {report.e_rmse * 1000:.3f} mm, "
        f"e95 {report.e_95 * 1000:.3f} mm, coverage {report.coverage:.4f}"
    )
    return report


@dataclass
class ReconstructionEvaluation:
    """
    Surface error after rigidly aligning a reconstruction to ground truth.

    Attributes:
        fitness: Inlier fraction of the aligned reconstruction (f_ICP).
        inlier_rmse: RMSE over inlier pairs (e_ICP), meters.
        surface: Error report of the aligned reconstruction.
        transform: The alignment as a 4x4 matrix.
    """

    fitness: float
    inlier_rmse: float
    surface: SurfaceErrorReport
    transform: np.ndarray

    def summary(self) -> Dict[str, object]:
        payload = {"f_icp": self.fitness, "e_icp_m": self.inlier_rmse}
        payload.update(self.surface.summary())
        payload["transform"] = self.transform
        return payload


def evaluate_reconstruction(
    reconstruction: PointCloud,
    ground_truth: PointCloud,
    registration_cfg: Optional[RegistrationConfig] = None,
    tolerance: float = 0.008,
    bands: Sequence[float] = ERROR_BANDS,
) -> ReconstructionEvaluation:
    """
    Align ``reconstruction`` to ``ground_truth`` and measure the residual error.

    Clouds sharing a frame start ICP from identity; clouds in different
    frames are first aligned globally with feature matching.
    """
    cfg = registration_cfg or RegistrationConfig()
    outcome = align_clouds(
        reconstruction,
        ground_truth,
        cfg,
        global_alignment=reconstruction.frame != ground_truth.frame,
        init=(
            RigidTransform.identity(reconstruction.frame, ground_truth.frame)
            if reconstruction.frame == ground_truth.frame
            else None
        ),
    )
    aligned = PointCloud(
        outcome.transform.apply(reconstruction.points), ground_truth.frame
    )
    return ReconstructionEvaluation(
        fitness=outcome.fitness,
        inlier_rmse=outcome.inlier_rmse,
        surface=surface_error(aligned, ground_truth, tolerance, bands),
        transform=outcome.transform.as_matrix(),
    )


def _unit_normal(normal: np.ndarray) -> np.ndarray:
    normal = np.asarray(normal, dtype=float).reshape(3)
    if abs(np.linalg.norm(normal) - 1.0) > 1e-9:
        logger.error(f"Normal {normal} is not unit length")
        raise RejectedInputError("Surface normal must have unit length")
    return normal


def project_marker(
    p_sphere: np.ndarray, p_s: np.ndarray, n_s: np.ndarray
) -> np.ndarray:
    """
    Project a marker position onto the tangent plane at the probe point.

    Returns:
        ``p_s + (I - n nᵀ)(p_sphere - p_s)``.

    Raises:
        RejectedInputError: If ``n_s`` is not unit length.
    """
    n = _unit_normal(n_s)
    p_s = np.asarray(p_s, dtype=float)
    offset = np.asarray(p_sphere, dtype=float) - p_s
    return p_s + offset - n * (offset @ n)


def pick_marker_point(
    cloud: PointCloud, apex: np.ndarray, max_distance: float = 0.005
) -> np.ndarray:
    """
    Observed marker apex: the cloud point nearest the nominal apex.

    Raises:
        RejectedInputError: If the cloud is empty or no point lies within
            ``max_distance``.
    """
    if len(cloud) == 0:
        raise RejectedInputError("Cannot pick a marker in an empty cloud")
    distance, index = NeighborIndex(cloud.points).nearest(np.asarray(apex, dtype=float))
    if distance[0] > max_distance:
        logger.error(f"Nearest point is {distance[0] * 1000:.2f} mm from the marker apex")
        raise RejectedInputError("Marker apex not observed in the cloud")
    return cloud.points[index[0]].copy()


def tangential_error(p_parallel: np.ndarray, p_s: np.ndarray) -> float:
    return float(np.linalg.norm(np.asarray(p_parallel) - np.asarray(p_s)))


def evaluate_probe_pose(
    p_sphere: np.ndarray, p_s: np.ndarray, n_s: np.ndarray
) -> Dict[str, object]:
    """Projected marker and tangential error of one probe placement."""
    p_parallel = project_marker(p_sphere, p_s, n_s)
    return {
        "marker_m": np.asarray(p_sphere, dtype=float),
        "probe_point_m": np.asarray(p_s, dtype=float),
        "projected_marker_m": p_parallel,
        "e_parallel_m": tangential_error(p_parallel, p_s),
    }


@dataclass
class RepeatabilityReport:
    """
    Within-subject spread and agreement of repeated trials.

    Attributes:
        per_subject_mean: Mean of each subject's trials.
        per_subject_sd: Sample standard deviation (n-1) of each subject.
        icc: Intraclass correlation coefficient.
        icc_form: Which ICC was computed.
        trials: Subjects × trials matrix.
    """

    per_subject_mean: np.ndarray
    per_subject_sd: np.ndarray
    icc: float
    icc_form: str
    trials: np.ndarray

    def summary(self) -> Dict[str, object]:
        return {
            "per_subject_mean": self.per_subject_mean,
            "per_subject_sd": self.per_subject_sd,
            "icc": self.icc,
            "icc_form": self.icc_form,
            "trials": self.trials,
        }


def _as_matrix(trials) -> np.ndarray:
    rows = [list(r) for r in trials]
    if len(rows) < 2:
        raise RejectedInputError("Repeatability needs at least two subjects")
    lengths = {len(r) for r in rows}
    if len(lengths) != 1:
        logger.error(f"Ragged trial matrix with row lengths {sorted(lengths)}")
        raise RejectedInputError("Every subject must have the same number of trials")
    matrix = np.array(rows, dtype=float)
    if matrix.shape[1] < 2:
        raise RejectedInputError("Repeatability needs at least two trials per subject")
    if not np.all(np.isfinite(matrix)):
        raise RejectedInputError("Trial values must be finite")
    return matrix


def icc(trials, form: str = "ICC(1,1)") -> float:
    """
    Intraclass correlation of a subjects × trials matrix.

    ICC(1,1) is the one-way random-effects form; ICC(2,1) is the two-way
    random-effects, absolute-agreement form. When the within-subject mean
    square is zero the coefficient is reported as 1.0.
    """
    x = _as_matrix(trials)
    n, k = x.shape
    grand = x.mean()
    row_means = x.mean(axis=1)
    col_means = x.mean(axis=0)
    ss_rows = k * float(np.sum((row_means - grand) ** 2))
    ss_total = float(np.sum((x - grand) ** 2))
    ms_rows = ss_rows / (n - 1)
    if form == "ICC(1,1)":
        ms_within = (ss_total - ss_rows) / (n * (k - 1))
        if ms_within <= 0.0:
            return 1.0
        return (ms_rows - ms_within) / (ms_rows + (k - 1) * ms_within)
    if form == "ICC(2,1)":
        ss_cols = n * float(np.sum((col_means - grand) ** 2))
        ms_cols = ss_cols / (k - 1)
        ms_error = (ss_total - ss_rows - ss_cols) / ((n - 1) * (k - 1))
        if ss_total - ss_rows <= 0.0:
            return 1.0
        denominator = ms_rows + (k - 1) * ms_error + k * (ms_cols - ms_error) / n
        if denominator == 0.0:
            return 1.0
        return (ms_rows - ms_error) / denominator
    raise RejectedInputError(f"Unknown ICC form '{form}', expected one of {ICC_FORMS}")


def repeatability(trials, form: str = "ICC(1,1)") -> RepeatabilityReport:
    """
    Per-subject mean and sample SD plus the ICC of repeated measurements.

    Args:
        trials: Subjects × trials values (rows must have equal length).
        form: "ICC(1,1)" or "ICC(2,1)".

    Raises:
        RejectedInputError: On ragged or too small input.
    """
    matrix = _as_matrix(trials)
    report = RepeatabilityReport(
        per_subject_mean=matrix.mean(axis=1),
        per_subject_sd=matrix.std(axis=1, ddof=1),
        icc=icc(matrix, form),
        icc_form=form,
        trials=matrix,
    )
    logger.info(f"Repeatability over {matrix.shape}: {form} = {report.icc:.4f}")
    return report


def summarize(values: Sequence[float]) -> Tuple[float, float]:
    """Mean and sample standard deviation (0 for a single value)."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise RejectedInputError("Nothing to summarize")
    sd = float(np.std(values, ddof=1)) if values.size > 1 else 0.0
    return float(np.mean(values)), sd


def read_trials_csv(path: str) -> Tuple[List[str], np.ndarray]:
    """
    Read ``subject,trial,e_parallel_mm`` rows into a subjects × trials matrix.

    Subjects keep their first-appearance order and trials are sorted by the
    ``trial`` column. Values are returned in meters.
    """
    if not os.path.isfile(path):
        logger.error(f"Trials file '{path}' not found")
        raise RejectedInputError(f"Input file not found: {path}")
    table: Dict[str, Dict[int, float]] = {}
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != ["subject", "trial", "e_parallel_mm"]:
            raise RejectedInputError(
                f"{path}: expected header subject,trial,e_parallel_mm"
            )
        for line, row in enumerate(reader, start=2):
            try:
                trial = int(row["trial"])
                value = float(row["e_parallel_mm"]) / 1000.0
            except (TypeError, ValueError) as e:
                logger.error(f"{path}:{line}: malformed trial row {row}")
                raise RejectedInputError(f"{path}:{line}: {e}") from e
            table.setdefault(row["subject"], {})[trial] = value
    subjects = list(table)
    rows = [[table[s][t] for t in sorted(table[s])] for s in subjects]
    return subjects, _as_matrix(rows)


def write_trials_csv(
    path: str, subjects: Sequence[str], trials: np.ndarray
) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["subject", "trial", "e_parallel_mm"])
        for subject, row in zip(subjects, np.asarray(trials)):
            for trial, value in enumerate(row, start=1):
                writer.writerow([subject, trial, f"{value * 1000:.17g}"])

