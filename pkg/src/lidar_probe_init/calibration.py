# lidar-probe-init/src/lidar_probe_init/calibration.py
"""
Plane-based extrinsic calibration of the 2D scanner to the robot tool frame.

The robot holds the scanner at K poses above one flat board. At every pose
the scans are pooled, the board's trace is extracted as a 2D line with
RANSAC, and the inlier points become point-to-plane constraints:

    r = n·(R_k (R p + t) + t_k) + d

where (R_k, t_k) is the tool pose in the base frame, (R, t) the unknown
scanner-to-tool transform and (n, d) the unknown board plane in the base
frame. The parameter vector is [omega, t, v, d] with n = v/|v|, solved by
robust least squares with a Cauchy loss.

Key components:
    - SolverConfig, PoseScanSet, LineFitResult, CalibrationParams,
      CalibrationResult, DegeneracyReport: data types.
    - fit_scan_line, residual_stack, residual_jacobian, degeneracy_check,
      solve_extrinsics, estimate_covariance, calibration_report: operations.
    - load_calibration_dataset, write_calibration_dataset: dataset IO.
"""

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import least_squares

from lidar_probe_init.exceptions import (
    DegeneracyError,
    DegenerateScanError,
    DivergenceError,
    InvalidConfigurationError,
    NotEnoughDataError,
    RejectedInputError,
)
from lidar_probe_init.formats import (
    FLOAT_FORMAT,
    dumps_json,
    read_json,
    read_pose_log,
    read_scan_log,
    write_json,
    write_pose_log,
    write_scan_log,
)
from lidar_probe_init.geometry import (
    BASE,
    LIDAR,
    TCP,
    Plane,
    PolarScan,
    RigidTransform,
    RotationVector,
    fit_plane,
    right_jacobian,
    scan_to_points,
    sector_filter,
)
from lidar_probe_init.metrics import CalibrationStats, calibration_stats
from lidar_probe_init.random_generator import RANSAC, RandomNumberGenerator

logger = logging.getLogger(__name__)

DEFAULT_SECTOR = (3.0 * math.pi / 4.0, 5.0 * math.pi / 4.0)
PARAMETER_NAMES = ("wx", "wy", "wz", "tx", "ty", "tz", "vx", "vy", "vz", "d")
MULTISTART_OFFSETS = (-math.pi / 6.0, 0.0, math.pi / 6.0)
RANSAC_REFINEMENTS = 10
FINITE_DIFFERENCE_STEP = 1e-7


@dataclass
class SolverConfig:
    """
    Settings of line extraction and the robust solve.

    Attributes:
        cauchy_scale: Cauchy loss scale s, meters.
        max_iterations: Cap on residual evaluations of the solver.
        gradient_tolerance: Termination tolerance on the gradient.
        parameter_tolerance: Termination tolerance on the step.
        cost_tolerance: Termination tolerance on the relative cost change.
        ransac_threshold: Inlier distance to the line, meters.
        ransac_iterations: Number of two-point hypotheses.
        min_inliers: Smallest acceptable consensus set.
        degeneracy_normal_spread_min: Smallest accepted spread of scan-plane
            normals and of line directions, radians.
        sector: Retained beam sector [lo, hi], radians.
        seed: Root seed of the RANSAC streams.
    """

    cauchy_scale: float = 0.0025
    max_iterations: int = 200
    gradient_tolerance: float = 1e-10
    parameter_tolerance: float = 1e-10
    cost_tolerance: float = 1e-12
    ransac_threshold: float = 0.005
    ransac_iterations: int = 500
    min_inliers: int = 15
    degeneracy_normal_spread_min: float = math.radians(10.0)
    sector: Tuple[float, float] = DEFAULT_SECTOR
    seed: int = 69

    def __post_init__(self):
        self.sector = (float(self.sector[0]), float(self.sector[1]))
        positive = {
            "cauchy_scale": self.cauchy_scale,
            "max_iterations": self.max_iterations,
            "gradient_tolerance": self.gradient_tolerance,
            "parameter_tolerance": self.parameter_tolerance,
            "cost_tolerance": self.cost_tolerance,
            "ransac_threshold": self.ransac_threshold,
            "ransac_iterations": self.ransac_iterations,
            "min_inliers": self.min_inliers,
            "degeneracy_normal_spread_min": self.degeneracy_normal_spread_min,
        }
        for name, value in positive.items():
            if not value > 0:
                logger.error(f"Invalid solver setting {name}={value}")
                raise InvalidConfigurationError(f"{name} must be positive, got {value}")
        if self.min_inliers < 2:
            raise InvalidConfigurationError("min_inliers must be at least 2")


@dataclass(frozen=True, eq=False)
class LineFitResult:
    """
    Dominant line of one pose's pooled sector samples.

    Attributes:
        inlier_indices: Indices into the pooled sector-filtered samples.
        direction: Unit 2-vector along the line.
        point_on_line: Centroid of the inliers.
        inlier_rms: RMS perpendicular distance of the inliers, meters.
        inlier_points: Inlier points in the scanner frame (z = 0).
    """

    inlier_indices: np.ndarray
    direction: np.ndarray
    point_on_line: np.ndarray
    inlier_rms: float
    inlier_points: np.ndarray = field(repr=False)


@dataclass(frozen=True, eq=False)
class PoseScanSet:
    """
    Scans captured while the robot held one pose.

    Attributes:
        pose_index: Index k of the pose.
        tcp_pose: Tool-to-base transform at this pose.
        scans: Raw scans (all angles).
        line_fit: Extracted board line, once computed.
    """

    pose_index: int
    tcp_pose: RigidTransform
    scans: Tuple[PolarScan, ...]
    line_fit: Optional[LineFitResult] = None

    def __post_init__(self):
        if self.tcp_pose.from_frame != TCP or self.tcp_pose.to_frame != BASE:
            logger.error(f"Pose {self.pose_index} does not map tcp to base")
            raise RejectedInputError("tcp_pose must map tcp -> base")
        object.__setattr__(self, "scans", tuple(self.scans))


@dataclass(frozen=True, eq=False)
class CalibrationParams:
    """
    Solver state [omega, t, v, d].

    Attributes:
        omega: Rotation vector of the scanner-to-tool rotation.
        t: Scanner origin in the tool frame, meters.
        v: Unnormalized board normal in the base frame.
        d: Board offset, meters.
    """

    omega: np.ndarray
    t: np.ndarray
    v: np.ndarray
    d: float

    def __post_init__(self):
        for name in ("omega", "t", "v"):
            object.__setattr__(
                self, name, np.array(getattr(self, name), dtype=float).reshape(3)
            )
        object.__setattr__(self, "d", float(self.d))
        if np.linalg.norm(self.v) <= 1e-8:
            raise RejectedInputError("Plane direction v must not vanish")

    @classmethod
    def from_vector(cls, x: np.ndarray) -> "CalibrationParams":
        x = np.asarray(x, dtype=float)
        return cls(x[0:3], x[3:6], x[6:9], x[9])

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.omega, self.t, self.v, [self.d]])

    @property
    def rotation(self) -> np.ndarray:
        return RotationVector(self.omega).as_matrix()

    def extrinsics(self) -> RigidTransform:
        return RigidTransform(self.rotation, self.t, LIDAR, TCP)

    def plane(self) -> Plane:
        return Plane.from_vector(self.v, self.d / np.linalg.norm(self.v))

    def canonical(self) -> "CalibrationParams":
        """Unit ``v`` whose normal points up the base z axis."""
        norm = np.linalg.norm(self.v)
        v, d = self.v / norm, self.d / norm
        if v[2] < 0:
            v, d = -v, -d
        return CalibrationParams(self.omega, self.t, v, d)


@dataclass
class DegeneracyReport:
    """
    Pose-diversity diagnostics.

    Attributes:
        passed: True when every check passes.
        pose_count: Number of poses.
        normal_spread: Largest angle between scan-plane normals, radians.
        line_spread: Largest angle between fitted lines in the base frame,
            radians, or None when no lines are fitted.
        failures: Names of the failed checks.
    """

    passed: bool
    pose_count: int
    normal_spread: float
    line_spread: Optional[float]
    failures: List[str]

    def summary(self) -> Dict[str, Any]:
        return {
            "passed": self.passed,
            "pose_count": self.pose_count,
            "normal_spread_deg": math.degrees(self.normal_spread),
            "line_spread_deg": (
                None if self.line_spread is None else math.degrees(self.line_spread)
            ),
            "failures": list(self.failures),
        }


@dataclass
class CalibrationResult:
    """
    Output of ``solve_extrinsics``.

    Attributes:
        extrinsics: Scanner-to-tool transform.
        plane: Board plane in the base frame.
        per_pose_rms: RMS residual per pose, meters.
        overall_rms: RMS of all residuals, meters.
        translation_sigma: One-sigma translation uncertainty, meters.
        rotation_sigma: One-sigma rotation-vector uncertainty, radians.
        inlier_counts: Line inliers per pose.
        converged: False when the solver hit its iteration cap.
        params: Final solver state.
        residuals: Residuals per pose, meters.
        stats: Residual statistics including the histogram.
        cost: Final robust cost.
        evaluations: Residual evaluations spent by the winning start.
        start_costs: Final cost of every start that was tried.
        condition_number: Condition number of the minimal Jacobian.
        degeneracy: Diversity diagnostics of the pose set.
    """

    extrinsics: RigidTransform
    plane: Plane
    per_pose_rms: np.ndarray
    overall_rms: float
    translation_sigma: np.ndarray
    rotation_sigma: np.ndarray
    inlier_counts: List[int]
    converged: bool
    params: CalibrationParams
    residuals: List[np.ndarray] = field(repr=False)
    stats: CalibrationStats = field(repr=False)
    cost: float = 0.0
    evaluations: int = 0
    start_costs: List[float] = field(default_factory=list)
    condition_number: float = 0.0
    degeneracy: Optional[DegeneracyReport] = None


# --- line extraction --------------------------------------------------------


def _line_distances(
    points: np.ndarray, anchor: np.ndarray, direction: np.ndarray
) -> np.ndarray:
    normal = np.array([-direction[1], direction[0]])
    return np.abs((points - anchor) @ normal)


def _total_least_squares_line(points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    centroid = points.mean(axis=0)
    _, _, vt = np.linalg.svd(points - centroid, full_matrices=False)
    direction = vt[0] / np.linalg.norm(vt[0])
    if direction[0] < 0 or (direction[0] == 0 and direction[1] < 0):
        direction = -direction
    return centroid, direction


def _ransac_line(
    points: np.ndarray, cfg: SolverConfig, generator: np.random.Generator
) -> LineFitResult:
    n = points.shape[0]
    if n < max(2, cfg.min_inliers):
        logger.error(f"Line fit needs {cfg.min_inliers} samples, got {n}")
        raise NotEnoughDataError(
            f"{n} valid samples in sector, at least {cfg.min_inliers} required"
        )
    first = generator.integers(0, n, size=cfg.ransac_iterations)
    second = generator.integers(0, n - 1, size=cfg.ransac_iterations)
    second = second + (second >= first)

    delta = points[second] - points[first]
    length = np.linalg.norm(delta, axis=1)
    usable = length > 1e-12
    normals = np.column_stack([-delta[:, 1], delta[:, 0]])
    normals[usable] /= length[usable, None]
    offsets = np.einsum("ij,ij->i", normals, points[first])
    distances = np.abs(normals @ points.T - offsets[:, None])
    counts = np.where(usable, np.count_nonzero(distances <= cfg.ransac_threshold, axis=1), 0)
    best = int(np.argmax(counts))
    if counts[best] < cfg.min_inliers:
        logger.error(f"Best line has {counts[best]} inliers, need {cfg.min_inliers}")
        raise DegenerateScanError(
            f"No line with at least {cfg.min_inliers} inliers (best {counts[best]})"
        )

    inliers = distances[best] <= cfg.ransac_threshold
    for _ in range(RANSAC_REFINEMENTS):
        anchor, direction = _total_least_squares_line(points[inliers])
        refit = _line_distances(points, anchor, direction) <= cfg.ransac_threshold
        if np.count_nonzero(refit) < cfg.min_inliers:
            break
        if np.array_equal(refit, inliers):
            break
        inliers = refit
    anchor, direction = _total_least_squares_line(points[inliers])
    inliers = _line_distances(points, anchor, direction) <= cfg.ransac_threshold
    if np.count_nonzero(inliers) < cfg.min_inliers:
        raise DegenerateScanError("Refined line lost its consensus set")
    anchor, direction = _total_least_squares_line(points[inliers])
    residuals = _line_distances(points[inliers], anchor, direction)
    index = np.flatnonzero(inliers)
    return LineFitResult(
        inlier_indices=index,
        direction=direction,
        point_on_line=anchor,
        inlier_rms=float(np.sqrt(np.mean(residuals**2))),
        inlier_points=np.column_stack([points[index], np.zeros(index.size)]),
    )


def fit_scan_line(
    scan: PolarScan,
    cfg: SolverConfig,
    rng: Optional[RandomNumberGenerator] = None,
    counter: int = 0,
) -> LineFitResult:
    """
    Extract the dominant line of a sector-filtered scan.

    Args:
        scan: Scan already reduced to the calibration sector.
        cfg: Solver configuration (threshold, iterations, min inliers).
        rng: Stream factory; defaults to one seeded with ``cfg.seed``.
        counter: Stream counter, e.g. the pose index.

    Returns:
        The line with inliers indexed over the scan's valid samples.

    Raises:
        NotEnoughDataError: Fewer than ``min_inliers`` valid samples.
        DegenerateScanError: No hypothesis reaches ``min_inliers``.
    """
    rng = rng or RandomNumberGenerator(cfg.seed)
    points, _ = scan_to_points(scan)
    return _ransac_line(points[:, :2], cfg, rng.stream(RANSAC, counter))


def pooled_sector_points(pose_set: PoseScanSet, sector: Tuple[float, float]) -> np.ndarray:
    """Union of the valid sector samples of every scan at a pose, scan-major."""
    blocks = [scan_to_points(sector_filter(s, *sector))[0] for s in pose_set.scans]
    return np.concatenate(blocks) if blocks else np.zeros((0, 3))


def fit_pose_line(
    pose_set: PoseScanSet, cfg: SolverConfig, rng: Optional[RandomNumberGenerator] = None
) -> PoseScanSet:
    """Pool the scans of one pose, fit the board line and attach it."""
    rng = rng or RandomNumberGenerator(cfg.seed)
    points = pooled_sector_points(pose_set, cfg.sector)
    try:
        line = _ransac_line(points[:, :2], cfg, rng.stream(RANSAC, pose_set.pose_index))
    except (NotEnoughDataError, DegenerateScanError) as e:
        logger.error(f"Line extraction failed at pose {pose_set.pose_index}: {e}")
        raise
    logger.debug(
        f"Pose {pose_set.pose_index}: {line.inlier_indices.size}/{points.shape[0]} "
        f"inliers, rms {line.inlier_rms * 1000:.3f} mm"
    )
    return replace(pose_set, line_fit=line)


def fit_pose_lines(
    data: Sequence[PoseScanSet], cfg: SolverConfig, threads: int = 1
) -> List[PoseScanSet]:
    """Fit every pose's line; each pose uses its own RANSAC stream."""
    rng = RandomNumberGenerator(cfg.seed)
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        return list(pool.map(lambda p: fit_pose_line(p, cfg, rng), data))


# --- residuals --------------------------------------------------------------


class _Stack:
    """Inlier points of all poses flattened pose-major, with their tool poses."""

    def __init__(self, data: Sequence[PoseScanSet]):
        if not data:
            raise NotEnoughDataError("No poses given")
        for pose in data:
            if pose.line_fit is None:
                logger.error(f"Pose {pose.pose_index} has no line fit")
                raise RejectedInputError(f"Pose {pose.pose_index} has no line fit")
        self.points = np.concatenate([p.line_fit.inlier_points for p in data])
        self.counts = [p.line_fit.inlier_points.shape[0] for p in data]
        self.pose_ids = np.repeat(np.arange(len(data)), self.counts)
        self.rotations = np.stack([p.tcp_pose.rotation for p in data])
        self.translations = np.stack([p.tcp_pose.translation for p in data])

    def base_points(self, rotation: np.ndarray, translation: np.ndarray) -> np.ndarray:
        tool = self.points @ rotation.T + translation
        return (
            np.einsum("mij,mj->mi", self.rotations[self.pose_ids], tool)
            + self.translations[self.pose_ids]
        )

    def split(self, values: np.ndarray) -> List[np.ndarray]:
        return np.split(values, np.cumsum(self.counts)[:-1])


def residual_stack(
    params: CalibrationParams, data: Sequence[PoseScanSet]
) -> np.ndarray:
    """
    Point-to-plane residual of every inlier, pose-major then index order.

    Args:
        params: Solver state.
        data: Poses with line fits.

    Returns:
        Residuals in meters.
    """
    stack = data if isinstance(data, _Stack) else _Stack(data)
    n = params.v / np.linalg.norm(params.v)
    return stack.base_points(params.rotation, params.t) @ n + params.d


def point_to_plane_residuals(
    extrinsics: RigidTransform, plane: Plane, data: Sequence[PoseScanSet]
) -> List[np.ndarray]:
    """Residuals per pose of a finished calibration."""
    stack = _Stack(data)
    base = stack.base_points(extrinsics.rotation, extrinsics.translation)
    return stack.split(base @ plane.normal + plane.offset)


def _analytic_jacobian(params: CalibrationParams, stack: _Stack) -> np.ndarray:
    norm_v = np.linalg.norm(params.v)
    n = params.v / norm_v
    rotation = params.rotation
    base = stack.base_points(rotation, params.t)
    tool_normals = np.einsum("kji,j->ki", stack.rotations, n)[stack.pose_ids]
    lidar_normals = tool_normals @ rotation
    jac = np.empty((stack.points.shape[0], 10))
    jac[:, 0:3] = -np.cross(lidar_normals, stack.points) @ right_jacobian(params.omega)
    jac[:, 3:6] = tool_normals
    jac[:, 6:9] = (base - np.outer(base @ n, n)) / norm_v
    jac[:, 9] = 1.0
    return jac


def _numeric_jacobian(params: CalibrationParams, stack: _Stack) -> np.ndarray:
    x = params.to_vector()
    columns = []
    for j in range(x.size):
        step = np.zeros_like(x)
        step[j] = FINITE_DIFFERENCE_STEP
        plus = residual_stack(CalibrationParams.from_vector(x + step), stack)
        minus = residual_stack(CalibrationParams.from_vector(x - step), stack)
        columns.append((plus - minus) / (2.0 * FINITE_DIFFERENCE_STEP))
    return np.column_stack(columns)


def residual_jacobian(
    params: CalibrationParams, data: Sequence[PoseScanSet], method: str = "analytic"
) -> np.ndarray:
    """
    Jacobian of ``residual_stack`` with respect to [omega, t, v, d].

    Args:
        params: Linearization point.
        data: Poses with line fits.
        method: "analytic" or "numeric" (central differences, step 1e-7).
    """
    stack = data if isinstance(data, _Stack) else _Stack(data)
    if method == "analytic":
        return _analytic_jacobian(params, stack)
    if method == "numeric":
        return _numeric_jacobian(params, stack)
    raise RejectedInputError(f"Unknown Jacobian method '{method}'")


# --- diagnostics ------------------------------------------------------------


def _max_pairwise_angle(vectors: np.ndarray, unoriented: bool) -> float:
    cosines = np.clip(vectors @ vectors.T, -1.0, 1.0)
    if unoriented:
        cosines = np.abs(cosines)
    return float(np.arccos(np.min(cosines)))


def degeneracy_check(
    data: Sequence[PoseScanSet],
    cfg: Optional[SolverConfig] = None,
    nominal_rotation: Optional[np.ndarray] = None,
) -> DegeneracyReport:
    """
    Check that the pose set can constrain all six extrinsic parameters.

    Checks:
        normal_spread: scan-plane normals in the base frame span at least
            ``degeneracy_normal_spread_min``.
        line_spread: fitted line directions in the base frame are not all
            parallel within the same angle (skipped without line fits).
        pose_count: at least three poses.

    Args:
        data: Poses, optionally with line fits.
        cfg: Supplies the spread threshold.
        nominal_rotation: Scanner-to-tool rotation used to place the scan
            planes; identity when omitted.
    """
    cfg = cfg or SolverConfig()
    rotation = np.eye(3) if nominal_rotation is None else np.asarray(nominal_rotation)
    failures = []
    if len(data) < 3:
        failures.append("pose_count")
    if not data:
        return DegeneracyReport(False, 0, 0.0, None, failures)

    tool_rotations = np.stack([p.tcp_pose.rotation for p in data])
    normals = tool_rotations @ rotation[:, 2]
    normal_spread = _max_pairwise_angle(normals, unoriented=False)
    if normal_spread < cfg.degeneracy_normal_spread_min:
        failures.append("normal_spread")

    line_spread = None
    if all(p.line_fit is not None for p in data):
        directions = np.stack(
            [
                p.tcp_pose.rotation @ rotation @ np.append(p.line_fit.direction, 0.0)
                for p in data
            ]
        )
        line_spread = _max_pairwise_angle(directions, unoriented=True)
        if line_spread < cfg.degeneracy_normal_spread_min:
            failures.append("line_spread")

    report = DegeneracyReport(
        passed=not failures,
        pose_count=len(data),
        normal_spread=normal_spread,
        line_spread=line_spread,
        failures=failures,
    )
    logger.info(
        f"Degeneracy check over {len(data)} poses: normal spread "
        f"{math.degrees(normal_spread):.2f} deg, failures {failures or 'none'}"
    )
    return report


# --- solve ------------------------------------------------------------------


def initial_params(
    data: Sequence[PoseScanSet],
    omega: Sequence[float] = (0.0, 0.0, 0.0),
    t: Sequence[float] = (0.0, 0.0, 0.0),
) -> CalibrationParams:
    """Mount guess plus the plane fitted through the points it places in {B}."""
    stack = _Stack(data)
    rotation = RotationVector(np.asarray(omega)).as_matrix()
    plane = fit_plane(stack.base_points(rotation, np.asarray(t, dtype=float)))
    normal, offset = plane.normal, plane.offset
    if normal[2] < 0:
        normal, offset = -normal, -offset
    return CalibrationParams(omega, t, normal, offset)


def _multistart_omegas(center: np.ndarray) -> List[np.ndarray]:
    base = RotationVector(center).as_matrix()
    omegas = []
    for a in MULTISTART_OFFSETS:
        for b in MULTISTART_OFFSETS:
            for c in MULTISTART_OFFSETS:
                offset = RotationVector(np.array([a, b, c])).as_matrix()
                omegas.append(RotationVector.from_matrix(base @ offset).omega)
    return omegas


def _robust_solve(stack: _Stack, init: CalibrationParams, cfg: SolverConfig):
    def fun(x: np.ndarray) -> np.ndarray:
        params = CalibrationParams.from_vector(x)
        gauge = np.linalg.norm(params.v) - 1.0
        return np.append(residual_stack(params, stack), gauge)

    def jac(x: np.ndarray) -> np.ndarray:
        params = CalibrationParams.from_vector(x)
        gauge_row = np.zeros(10)
        gauge_row[6:9] = params.v / np.linalg.norm(params.v)
        return np.vstack([_analytic_jacobian(params, stack), gauge_row])

    return least_squares(
        fun,
        init.to_vector(),
        jac=jac,
        method="trf",
        loss="cauchy",
        f_scale=cfg.cauchy_scale,
        x_scale="jac",
        max_nfev=cfg.max_iterations,
        gtol=cfg.gradient_tolerance,
        xtol=cfg.parameter_tolerance,
        ftol=cfg.cost_tolerance,
    )


def _cauchy_cost(residuals: np.ndarray, scale: float) -> float:
    return float(np.sum(0.5 * scale**2 * np.log1p((residuals / scale) ** 2)))


def estimate_covariance(
    params: CalibrationParams, data: Sequence[PoseScanSet]
) -> Tuple[np.ndarray, np.ndarray]:
    """
    One-sigma uncertainties of the extrinsics.

    The Jacobian is reduced to the nine identifiable directions (v is
    moved only tangentially to the unit sphere), the covariance is
    ``sigma² · pinv(JᵀJ)`` with ``sigma² = Σr²/(m-9)``, and the rotation and
    translation blocks are read off its diagonal.

    Returns:
        (translation_sigma in meters, rotation_sigma in radians).

    Raises:
        DegeneracyError: When JᵀJ is rank deficient.
    """
    sigmas, _ = _covariance(params, _Stack(data))
    return sigmas[3:6], sigmas[0:3]


def _covariance(params: CalibrationParams, stack: _Stack) -> Tuple[np.ndarray, float]:
    params = params.canonical()
    jac = _analytic_jacobian(params, stack)
    n = params.v
    helper = np.eye(3)[int(np.argmin(np.abs(n)))]
    e1 = np.cross(n, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(n, e1)
    tangent = np.column_stack([e1, e2])
    minimal = np.hstack([jac[:, 0:6], jac[:, 6:9] @ tangent, jac[:, 9:10]])
    m, dof = minimal.shape
    if m <= dof:
        raise DegeneracyError(f"{m} residuals cannot constrain {dof} parameters")
    singular = np.linalg.svd(minimal, compute_uv=False)
    condition = float(singular[0] / singular[-1]) if singular[-1] > 0 else math.inf
    if not condition < 1e10:
        logger.error(f"Calibration Jacobian is rank deficient (condition {condition:.3e})")
        raise DegeneracyError(
            f"JᵀJ is rank deficient (condition number {condition:.3e})"
        )
    residuals = residual_stack(params, stack)
    variance = float(residuals @ residuals) / (m - dof)
    covariance = variance * np.linalg.pinv(minimal.T @ minimal)
    return np.sqrt(np.clip(np.diag(covariance)[:6], 0.0, None)), condition


def solve_extrinsics(
    data: Sequence[PoseScanSet],
    init: Optional[CalibrationParams] = None,
    cfg: Optional[SolverConfig] = None,
    threads: int = 1,
) -> CalibrationResult:
    """
    Estimate the scanner-to-tool transform and the board plane.

    Args:
        data: Poses; lines are fitted here when missing.
        init: Starting state. Without one, a 3×3×3 grid of rotations
            (±30° per axis around identity) is tried and the lowest-cost
            basin kept.
        cfg: Solver configuration.
        threads: Worker cap for line extraction.

    Returns:
        The calibration with statistics and uncertainties.

    Raises:
        DegeneracyError: If the pose set fails a diversity check or the
            solution is not identifiable.
        DivergenceError: If the solver ends with a higher or non-finite cost.
    """
    cfg = cfg or SolverConfig()
    logger.info(f"Calibrating from {len(data)} poses")
    if any(p.line_fit is None for p in data):
        data = fit_pose_lines(data, cfg, threads)

    nominal = None if init is None else init.rotation
    report = degeneracy_check(data, cfg, nominal)
    if not report.passed:
        logger.error(f"Pose set is degenerate: {report.failures}")
        raise DegeneracyError(
            f"Calibration poses failed degeneracy checks: {', '.join(report.failures)}"
        )

    stack = _Stack(data)
    if init is not None:
        starts = [init]
    else:
        starts = [initial_params(data, omega) for omega in _multistart_omegas(np.zeros(3))]

    best = None
    start_costs = []
    for index, start in enumerate(starts):
        initial_cost = _cauchy_cost(residual_stack(start, stack), cfg.cauchy_scale)
        solution = _robust_solve(stack, start, cfg)
        if not np.isfinite(solution.cost) or solution.cost > initial_cost * (1 + 1e-9) + 1e-300:
            logger.error(
                f"Start {index}: cost rose from {initial_cost:.6e} to {solution.cost:.6e}"
            )
            raise DivergenceError(f"Solver diverged from start {index}")
        start_costs.append(float(solution.cost))
        logger.debug(f"Start {index}: cost {solution.cost:.6e}, status {solution.status}")
        if best is None or solution.cost < best.cost:
            best = solution

    params = CalibrationParams.from_vector(best.x).canonical()
    extrinsics = params.extrinsics()
    plane = params.plane()
    residuals = point_to_plane_residuals(extrinsics, plane, data)
    stats = calibration_stats(residuals)
    sigmas, condition = _covariance(params, stack)
    converged = bool(best.status > 0)
    if not converged:
        logger.warning("Calibration solver stopped at its iteration cap")

    result = CalibrationResult(
        extrinsics=extrinsics,
        plane=plane,
        per_pose_rms=stats.per_pose_rms,
        overall_rms=stats.overall_rms,
        translation_sigma=sigmas[3:6],
        rotation_sigma=sigmas[0:3],
        inlier_counts=[p.line_fit.inlier_indices.size for p in data],
        converged=converged,
        params=params,
        residuals=residuals,
        stats=stats,
        cost=float(best.cost),
        evaluations=int(best.nfev),
        start_costs=start_costs,
        condition_number=condition,
        degeneracy=report,
    )
    logger.info(
        f"Calibration done: overall RMS {result.overall_rms * 1000:.3f} mm, "
        f"converged={converged}"
    )
    return result


# --- reporting and IO -------------------------------------------------------


def transform_payload(transform: RigidTransform) -> Dict[str, Any]:
    return {
        "from_frame": transform.from_frame.name,
        "to_frame": transform.to_frame.name,
        "rotation": transform.rotation,
        "translation_m": transform.translation,
        "rotation_vector": transform.rotation_vector().omega,
        "quaternion_xyzw": transform.as_quaternion(),
    }


def calibration_report(result: CalibrationResult) -> str:
    """
    Serialize a calibration as canonical JSON.

    The text parses back to the same payload and re-serializes to the
    same bytes.
    """
    stats = result.stats
    payload = {
        "extrinsics": transform_payload(result.extrinsics),
        "plane": {"normal": result.plane.normal, "offset_m": result.plane.offset},
        "per_pose_rms_mm": result.per_pose_rms * 1000.0,
        "per_pose_rms_summary_mm": {
            k: v * 1000.0 for k, v in stats.per_pose_summary().items()
        },
        "overall_rms_mm": result.overall_rms * 1000.0,
        "histogram": {
            "bin_edges_mm": stats.bin_edges * 1000.0,
            "counts": stats.histogram,
            "underflow": stats.underflow,
            "overflow": stats.overflow,
        },
        "translation_sigma_mm": result.translation_sigma * 1000.0,
        "rotation_sigma_deg": np.degrees(result.rotation_sigma),
        "inlier_counts": result.inlier_counts,
        "converged": result.converged,
        "solver": {
            "cost": result.cost,
            "evaluations": result.evaluations,
            "start_costs": result.start_costs,
            "condition_number": result.condition_number,
        },
        "degeneracy": None if result.degeneracy is None else result.degeneracy.summary(),
    }
    return dumps_json(payload)


def write_calibration_outputs(result: CalibrationResult, out_path: str) -> str:
    """Write ``calibration.json`` and ``residuals.csv`` next to it."""
    text = calibration_report(result)
    os.makedirs(os.path.dirname(os.path.abspath(out_path)), exist_ok=True)
    with open(out_path, "w", newline="\n") as f:
        f.write(text)
    residual_path = os.path.join(os.path.dirname(os.path.abspath(out_path)), "residuals.csv")
    with open(residual_path, "w", newline="\n") as f:
        f.write("pose_index,point_index,residual_m\n")
        for k, residuals in enumerate(result.residuals):
            for i, r in enumerate(residuals):
                f.write(f"{k},{i},{FLOAT_FORMAT % r}\n")
    logger.info(f"Calibration report written to {out_path}")
    return text


def read_extrinsics(path: str) -> RigidTransform:
    """Load the extrinsics from a ``calibration.json`` or ``truth.json``."""
    payload = read_json(path)
    node = payload.get("extrinsics", payload)
    try:
        return RigidTransform(node["rotation"], node["translation_m"], LIDAR, TCP)
    except KeyError as e:
        raise RejectedInputError(f"{path}: missing extrinsics field {e}") from e


def write_calibration_dataset(
    directory: str, data: Sequence[PoseScanSet], session: Dict[str, Any]
) -> None:
    """Write ``poses.csv``, ``scans/pose_XXX.csv`` and ``session.json``."""
    os.makedirs(os.path.join(directory, "scans"), exist_ok=True)
    write_pose_log(
        os.path.join(directory, "poses.csv"),
        [(p.scans[0].scan_timestamp if p.scans else 0.0, p.tcp_pose) for p in data],
    )
    for p in data:
        write_scan_log(
            os.path.join(directory, "scans", f"pose_{p.pose_index:03d}.csv"), p.scans
        )
    write_json(os.path.join(directory, "session.json"), session)


def load_calibration_dataset(
    directory: str,
) -> Tuple[List[PoseScanSet], Dict[str, Any]]:
    """
    Read a calibration dataset directory.

    Returns:
        (pose sets in pose-log order, session dictionary).
    """
    poses = read_pose_log(os.path.join(directory, "poses.csv"))
    session_path = os.path.join(directory, "session.json")
    session = read_json(session_path) if os.path.isfile(session_path) else {}
    data = []
    for k, (_, pose) in enumerate(poses):
        scans = read_scan_log(os.path.join(directory, "scans", f"pose_{k:03d}.csv"))
        data.append(PoseScanSet(k, pose, tuple(scans)))
    logger.info(f"Loaded {len(data)} calibration poses from {directory}")
    return data, session


def session_initial_params(
    data: Sequence[PoseScanSet], session: Dict[str, Any], cfg: SolverConfig
) -> Optional[CalibrationParams]:
    """Initial state from ``session['initial_guess']``, or None for multistart."""
    guess = session.get("initial_guess")
    if guess is None:
        return None
    fitted = [p if p.line_fit else fit_pose_line(p, cfg) for p in data]
    return initial_params(fitted, guess.get("omega", (0, 0, 0)), guess.get("t", (0, 0, 0)))
