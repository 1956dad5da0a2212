# lidar-probe-init/src/lidar_probe_init/registration.py
"""
Template matching that locates the initial probe pose on the chest surface.

A chest template annotated with an ideal probe point is registered to the
preprocessed surface: FPFH descriptors feed a fast global registration,
point-to-plane ICP refines it, and the whole alignment is repeated on
uniformly scaled copies of the template (1.0, 1.1, 0.9, then 10% steps)
until one fits well enough. The annotated point is carried through the
winning alignment, snapped to the nearest surface point, and the local
surface normal there is estimated by PCA.

Key components:
    - TemplateModel, ScaleVariant, RegistrationOutcome, ProbePose,
      RegistrationConfig: data types.
    - scale_template, compute_spfh, compute_fpfh, fast_global_registration,
      icp_refine, evaluate_fitness, align_clouds, match_with_scale_loop,
      transfer_probe_point, probe_orientation, estimate_probe_pose.
"""

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from lidar_probe_init.exceptions import (
    InvalidConfigurationError,
    MissingNormalsError,
    NoMatchError,
    RegistrationFailureError,
    RejectedInputError,
    TooFewPointsError,
)
from lidar_probe_init.formats import dumps_json, read_json, read_ply, write_json, write_ply
from lidar_probe_init.geometry import (
    TEMPLATE,
    NeighborIndex,
    PointCloud,
    RigidTransform,
    skew,
)
from lidar_probe_init.preprocess import voxel_downsample
from lidar_probe_init.random_generator import TUPLES, RandomNumberGenerator

logger = logging.getLogger(__name__)

FPFH_BINS = 11
SEX_VARIANTS = ("male", "female")


@dataclass
class RegistrationConfig:
    """
    Attributes:
        feature_voxel_size: Downsampling voxel for descriptors, meters.
        fpfh_radius: Descriptor neighborhood radius, meters.
        fpfh_max_nn: Neighbor cap inside the descriptor radius.
        tuple_scale: Edge-length similarity required by the tuple test.
        max_tuples: Tuples kept by the tuple test.
        fgr_iterations: Graduated non-convexity iterations.
        fgr_division_factor: Shrink factor of the robust scale every four
            iterations.
        fgr_max_correspondence_distance: Final robust scale, meters.
        min_correspondences: Fewest tuple-tested matches accepted.
        fitness_distance: Inlier distance for fitness and ICP, meters.
        icp_max_iterations: Iterations per ICP stage.
        icp_delta: Stop when the update twist norm drops below this.
        icp_schedule: Correspondence distances of the coarse-to-fine ICP
            stages, as multiples of ``fitness_distance``.
        fitness_threshold: Fitness a scale variant needs to be accepted.
        initial_scales: Scales evaluated first.
        scale_step: Increment of the enlarge/shrink loop.
        scale_bounds: Smallest and largest scale tried.
        max_variants: Cap on evaluated scales.
        centroid_prior: Also start ICP from an axis-aligned centroid match.
        probe_k: Neighbors of the orientation PCA.
        seed: Root seed of the tuple sampling.
    """

    feature_voxel_size: float = 0.006
    fpfh_radius: float = 0.025
    fpfh_max_nn: int = 100
    tuple_scale: float = 0.9
    max_tuples: int = 1000
    fgr_iterations: int = 64
    fgr_division_factor: float = 1.4
    fgr_max_correspondence_distance: float = 0.009
    min_correspondences: int = 10
    fitness_distance: float = 0.010
    icp_max_iterations: int = 50
    icp_delta: float = 1e-8
    icp_schedule: Tuple[float, ...] = (4.0, 2.0, 1.0)
    fitness_threshold: float = 0.9
    initial_scales: Tuple[float, ...] = (1.0, 1.1, 0.9)
    scale_step: float = 0.1
    scale_bounds: Tuple[float, float] = (0.6, 1.4)
    max_variants: int = 8
    centroid_prior: bool = True
    probe_k: int = 30
    seed: int = 69

    def __post_init__(self):
        self.icp_schedule = tuple(float(s) for s in self.icp_schedule)
        self.initial_scales = tuple(float(s) for s in self.initial_scales)
        self.scale_bounds = (float(self.scale_bounds[0]), float(self.scale_bounds[1]))
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool) or f.name == "seed":
                continue
            values = value if isinstance(value, tuple) else (value,)
            if not values or any(not v > 0 for v in values):
                logger.error(f"Invalid registration setting {f.name}={value}")
                raise InvalidConfigurationError(f"{f.name} must be positive, got {value}")
        if not 0 < self.tuple_scale < 1:
            raise InvalidConfigurationError("tuple_scale must lie in (0, 1)")
        if not 0 < self.fitness_threshold <= 1:
            raise InvalidConfigurationError("fitness_threshold must lie in (0, 1]")
        lo, hi = self.scale_bounds
        if lo > hi or any(not lo <= s <= hi for s in self.initial_scales):
            raise InvalidConfigurationError("initial_scales must lie inside scale_bounds")


@dataclass(eq=False)
class TemplateModel:
    """
    Chest template annotated with the ideal probe point.

    Attributes:
        cloud: Template surface with normals, in the template frame.
        probe_point: Annotated point p_T.
        sex_variant: "male" or "female".
        name: Identifier.
    """

    cloud: PointCloud
    probe_point: np.ndarray
    sex_variant: str
    name: str
    max_probe_offset: float = 0.012

    def __post_init__(self):
        self.probe_point = np.array(self.probe_point, dtype=float).reshape(3)
        if self.sex_variant not in SEX_VARIANTS:
            raise RejectedInputError(f"sex_variant must be one of {SEX_VARIANTS}")
        if self.cloud.normals is None:
            raise MissingNormalsError("Template clouds must carry normals")
        distance, _ = NeighborIndex(self.cloud.points).nearest(self.probe_point)
        if distance[0] > self.max_probe_offset:
            logger.error(
                f"Template {self.name}: probe point {distance[0] * 1000:.2f} mm "
                "from the surface"
            )
            raise RejectedInputError("Probe point must lie on the template surface")


@dataclass(eq=False)
class ScaleVariant:
    """
    Attributes:
        scale: Uniform factor about the template centroid.
        cloud: Scaled template.
        probe_point: Scaled probe point.
    """

    scale: float
    cloud: PointCloud
    probe_point: np.ndarray


@dataclass(eq=False)
class RegistrationOutcome:
    """
    Result of aligning a source cloud to a target.

    Attributes:
        transform: Source-to-target transform.
        fitness: Fraction of source points within the fitness distance.
        inlier_rmse: RMSE of those inlier distances, meters.
        scale_used: Scale of the template variant, 1.0 for plain alignment.
        iterations_used: ICP iterations across all stages.
        converged: False when no scale variant reached the fitness threshold.
        variant_scores: (scale, fitness, inlier_rmse, score) of every variant
            in evaluation order.
    """

    transform: RigidTransform
    fitness: float
    inlier_rmse: float
    scale_used: float = 1.0
    iterations_used: int = 0
    converged: bool = True
    variant_scores: List[Tuple[float, float, float, float]] = field(default_factory=list)

    def score(self, distance: float) -> float:
        return self.fitness * (1.0 - self.inlier_rmse / distance)


@dataclass(eq=False)
class ProbePose:
    """
    Initial probe placement.

    Attributes:
        position: p_S, a member point of the target cloud.
        normal: Unit surface normal n_S, facing the sensor.
        approach_direction: -n_S.
        outcome: The registration the position came from.
        degenerate_normal: True when the PCA spectrum could not single out
            a normal direction.
    """

    position: np.ndarray
    normal: np.ndarray
    outcome: RegistrationOutcome
    degenerate_normal: bool = False

    @property
    def approach_direction(self) -> np.ndarray:
        return -self.normal

    def summary(self) -> Dict[str, Any]:
        return {
            "position_m": self.position,
            "normal": self.normal,
            "approach_direction": self.approach_direction,
            "fitness": self.outcome.fitness,
            "inlier_rmse_m": self.outcome.inlier_rmse,
            "scale": self.outcome.scale_used,
            "converged": self.outcome.converged,
            "degenerate_normal": self.degenerate_normal,
            "transform": self.outcome.transform.as_matrix(),
            "variant_scores": [
                {"scale": s, "fitness": f, "inlier_rmse_m": r, "score": c}
                for s, f, r, c in self.outcome.variant_scores
            ],
        }


def scale_template(template: TemplateModel, factor: float) -> ScaleVariant:
    """Scale points and probe point about the template centroid."""
    if not factor > 0:
        raise RejectedInputError(f"Scale factor must be positive, got {factor}")
    center = template.cloud.centroid()
    points = center + factor * (template.cloud.points - center)
    cloud = PointCloud(points, template.cloud.frame, template.cloud.normals)
    return ScaleVariant(
        float(factor), cloud, center + factor * (template.probe_point - center)
    )


# --- descriptors ------------------------------------------------------------


def _neighborhoods(
    points: np.ndarray, radius: float, max_nn: int
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Hybrid search: up to ``max_nn`` nearest within ``radius``, self removed."""
    distances, index = NeighborIndex(points).knn(points, max_nn + 1)
    rows = np.repeat(np.arange(points.shape[0])[:, None], index.shape[1], axis=1)
    mask = (distances <= radius) & (distances > 0)
    return rows[mask], index[mask], distances[mask]


def _pair_features(
    p1: np.ndarray, n1: np.ndarray, p2: np.ndarray, n2: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Darboux-frame angle triplet (f1 = alpha-like, f2, f3) of point pairs."""
    dp = p2 - p1
    length = np.linalg.norm(dp, axis=1)
    dp = dp / length[:, None]
    angle1 = np.einsum("ij,ij->i", n1, dp)
    angle2 = np.einsum("ij,ij->i", n2, dp)
    swap = np.arccos(np.clip(np.abs(angle1), 0, 1)) > np.arccos(
        np.clip(np.abs(angle2), 0, 1)
    )
    src_n = np.where(swap[:, None], n2, n1)
    tgt_n = np.where(swap[:, None], n1, n2)
    dp = np.where(swap[:, None], -dp, dp)
    f3 = np.where(swap, -angle2, angle1)

    v = np.cross(dp, src_n)
    v_norm = np.linalg.norm(v, axis=1)
    valid = v_norm > 0
    v[valid] /= v_norm[valid, None]
    w = np.cross(src_n, v)
    f2 = np.einsum("ij,ij->i", v, tgt_n)
    f1 = np.arctan2(np.einsum("ij,ij->i", w, tgt_n), np.einsum("ij,ij->i", src_n, tgt_n))
    f1 = np.where(valid, f1, 0.0)
    f2 = np.where(valid, f2, 0.0)
    f3 = np.where(valid, f3, 0.0)
    return f1, f2, f3


def _bin(values: np.ndarray, lo: float, hi: float) -> np.ndarray:
    index = np.floor(FPFH_BINS * (values - lo) / (hi - lo)).astype(np.int64)
    return np.clip(index, 0, FPFH_BINS - 1)


def compute_spfh(
    cloud: PointCloud, radius: float, max_nn: int = 100
) -> Tuple[np.ndarray, Tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """
    Simplified point-feature histograms as raw counts.

    Returns:
        (N×33 counts whose three 11-bin blocks each sum to the point's
        neighbor count, the (rows, cols, distances) neighbor pairs).

    Raises:
        MissingNormalsError: If the cloud has no normals.
    """
    if cloud.normals is None:
        logger.error("FPFH requires normals")
        raise MissingNormalsError("FPFH needs per-point normals")
    rows, cols, distances = _neighborhoods(cloud.points, radius, max_nn)
    p, n = cloud.points, cloud.normals
    f1, f2, f3 = _pair_features(p[rows], n[rows], p[cols], n[cols])
    counts = np.zeros((len(cloud), 3 * FPFH_BINS))
    for block, index in enumerate(
        (_bin(f1, -math.pi, math.pi), _bin(f2, -1.0, 1.0), _bin(f3, -1.0, 1.0))
    ):
        np.add.at(counts, (rows, block * FPFH_BINS + index), 1.0)
    return counts, (rows, cols, distances)


def _normalize_blocks(histograms: np.ndarray) -> np.ndarray:
    blocks = histograms.reshape(-1, 3, FPFH_BINS)
    sums = blocks.sum(axis=2, keepdims=True)
    scale = np.divide(100.0, sums, out=np.zeros_like(sums), where=sums > 0)
    return (blocks * scale).reshape(-1, 3 * FPFH_BINS)


def compute_fpfh(cloud: PointCloud, radius: float, max_nn: int = 100) -> np.ndarray:
    """
    Fast point-feature histograms (N×33).

    Each point's SPFH (blocks normalized to 100) is added to the
    inverse-squared-distance weighted sum of its neighbors' SPFH, the sum
    being normalized block-wise to 100 first.
    """
    counts, (rows, cols, distances) = compute_spfh(cloud, radius, max_nn)
    spfh = _normalize_blocks(counts)
    weights = sparse.csr_matrix(
        (1.0 / distances**2, (rows, cols)), shape=(len(cloud), len(cloud))
    )
    return spfh + _normalize_blocks(weights @ spfh)


@dataclass(eq=False)
class FeatureCloud:
    """Downsampled cloud with its descriptors."""

    cloud: PointCloud
    features: np.ndarray


def prepare_features(cloud: PointCloud, cfg: RegistrationConfig) -> FeatureCloud:
    if cloud.normals is None:
        raise MissingNormalsError("Registration needs clouds with normals")
    reduced = voxel_downsample(cloud, cfg.feature_voxel_size)
    return FeatureCloud(reduced, compute_fpfh(reduced, cfg.fpfh_radius, cfg.fpfh_max_nn))


# --- global registration ----------------------------------------------------


def _mutual_matches(source: np.ndarray, target: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    _, forward = cKDTree(target).query(source, k=1)
    _, backward = cKDTree(source).query(target, k=1)
    src = np.arange(source.shape[0])
    mutual = backward[forward] == src
    return src[mutual], forward[mutual]


def _tuple_test(
    source: np.ndarray,
    target: np.ndarray,
    ci: np.ndarray,
    cj: np.ndarray,
    cfg: RegistrationConfig,
    generator: np.random.Generator,
) -> Tuple[np.ndarray, np.ndarray]:
    count = ci.size
    if count < 3:
        return ci[:0], cj[:0]
    trials = generator.integers(0, count, size=(100 * count, 3))
    distinct = (
        (trials[:, 0] != trials[:, 1])
        & (trials[:, 1] != trials[:, 2])
        & (trials[:, 0] != trials[:, 2])
    )
    trials = trials[distinct]
    passed = np.ones(trials.shape[0], dtype=bool)
    for a, b in ((0, 1), (1, 2), (2, 0)):
        ls = np.linalg.norm(source[ci[trials[:, a]]] - source[ci[trials[:, b]]], axis=1)
        lt = np.linalg.norm(target[cj[trials[:, a]]] - target[cj[trials[:, b]]], axis=1)
        passed &= (ls * cfg.tuple_scale < lt) & (lt < ls / cfg.tuple_scale)
    kept = trials[passed][: cfg.max_tuples].reshape(-1)
    return ci[kept], cj[kept]


def fast_global_registration(
    source: FeatureCloud,
    target: FeatureCloud,
    cfg: RegistrationConfig,
    rng: Optional[RandomNumberGenerator] = None,
    counter: int = 0,
) -> RigidTransform:
    """
    Coarse source-to-target alignment from descriptor correspondences.

    Mutual nearest neighbors in descriptor space are filtered by the tuple
    test, both clouds are centered and scaled into the unit ball, and the
    transform is found by Gauss-Newton with line-process weights of a
    scaled Geman-McClure penalty whose scale shrinks every four iterations.

    Raises:
        TooFewPointsError: If either cloud has fewer than 100 points.
        RegistrationFailureError: If fewer than ``min_correspondences``
            correspondences survive.
    """
    if len(source.cloud) < 100 or len(target.cloud) < 100:
        logger.error(
            f"FGR needs 100 points per cloud, got {len(source.cloud)} and "
            f"{len(target.cloud)}"
        )
        raise TooFewPointsError("Global registration needs at least 100 points per cloud")
    rng = rng or RandomNumberGenerator(cfg.seed)
    src_pts, tgt_pts = source.cloud.points, target.cloud.points
    ci, cj = _mutual_matches(source.features, target.features)
    ci, cj = _tuple_test(src_pts, tgt_pts, ci, cj, cfg, rng.stream(TUPLES, counter))
    if ci.size < cfg.min_correspondences:
        logger.error(f"Only {ci.size} correspondences survived the tuple test")
        raise RegistrationFailureError(
            f"{ci.size} correspondences, at least {cfg.min_correspondences} required"
        )

    src_center, tgt_center = src_pts.mean(axis=0), tgt_pts.mean(axis=0)
    scale = max(
        np.linalg.norm(src_pts - src_center, axis=1).max(),
        np.linalg.norm(tgt_pts - tgt_center, axis=1).max(),
    )
    p = (src_pts[ci] - src_center) / scale
    q = (tgt_pts[cj] - tgt_center) / scale
    mu_min = (cfg.fgr_max_correspondence_distance / scale) ** 2

    rotation, translation = np.eye(3), np.zeros(3)
    mu = 1.0
    jac = np.zeros((p.shape[0], 3, 6))
    jac[:, :, 3:] = np.eye(3)
    for iteration in range(cfg.fgr_iterations):
        if iteration % 4 == 0 and mu > mu_min:
            mu /= cfg.fgr_division_factor
        moved = p @ rotation.T + translation
        residual = moved - q
        weight = (mu / (mu + np.einsum("ij,ij->i", residual, residual))) ** 2
        jac[:, :, :3] = -np.stack([skew(x) for x in moved])
        jtj = np.einsum("c,cki,ckj->ij", weight, jac, jac)
        jtr = np.einsum("c,cki,ck->i", weight, jac, residual)
        delta = np.linalg.lstsq(jtj, -jtr, rcond=None)[0]
        step = Rotation.from_rotvec(delta[:3]).as_matrix()
        rotation = step @ rotation
        translation = step @ translation + delta[3:]

    translation = scale * translation + tgt_center - rotation @ src_center
    logger.debug(f"FGR used {ci.size} correspondences")
    return RigidTransform(rotation, translation, source.cloud.frame, target.cloud.frame)


# --- local refinement -------------------------------------------------------


def evaluate_fitness(
    source: PointCloud,
    target: PointCloud,
    transform: RigidTransform,
    distance: float,
    target_index: Optional[NeighborIndex] = None,
) -> Tuple[float, float]:
    """
    Fitness and inlier RMSE of ``transform`` applied to ``source``.

    Returns:
        (fraction of source points within ``distance`` of the target, RMSE
        over those points).
    """
    index = target_index or NeighborIndex(target.points)
    distances, _ = index.nearest(transform.apply(source.points))
    inliers = distances <= distance
    count = int(np.count_nonzero(inliers))
    if count == 0:
        return 0.0, 0.0
    return count / len(source), math.sqrt(float(np.mean(distances[inliers] ** 2)))


def _icp_stage(
    source: np.ndarray,
    target: PointCloud,
    index: NeighborIndex,
    transform: RigidTransform,
    max_distance: float,
    cfg: RegistrationConfig,
) -> Tuple[RigidTransform, int]:
    rotation, translation = transform.rotation.copy(), transform.translation.copy()
    iterations = 0
    for iterations in range(1, cfg.icp_max_iterations + 1):
        moved = source @ rotation.T + translation
        distances, nearest = index.nearest(moved)
        mask = distances <= max_distance
        if not np.any(mask):
            if iterations == 1:
                raise RegistrationFailureError("ICP found no correspondences")
            break
        p = moved[mask]
        q = target.points[nearest[mask]]
        n = target.normals[nearest[mask]]
        a = np.hstack([np.cross(p, n), n])
        b = np.einsum("ij,ij->i", q - p, n)
        delta = np.linalg.lstsq(a, b, rcond=None)[0]
        step = Rotation.from_rotvec(delta[:3]).as_matrix()
        rotation = step @ rotation
        translation = step @ translation + delta[3:]
        if np.linalg.norm(delta) < cfg.icp_delta:
            break
    # re-orthonormalize accumulated products
    u, _, vt = np.linalg.svd(rotation)
    rotation = u @ vt
    return (
        RigidTransform(rotation, translation, transform.from_frame, transform.to_frame),
        iterations,
    )


def icp_refine(
    source: PointCloud,
    target: PointCloud,
    init: RigidTransform,
    cfg: RegistrationConfig,
    target_index: Optional[NeighborIndex] = None,
    schedule: Optional[Sequence[float]] = None,
) -> RegistrationOutcome:
    """
    Point-to-plane ICP using the target normals.

    Args:
        source: Moving cloud.
        target: Fixed cloud with normals.
        init: Starting source-to-target transform.
        cfg: Iteration cap, delta and fitness distance.
        target_index: Reusable index over the target.
        schedule: Correspondence distances as multiples of the fitness
            distance; ``(1.0,)`` runs a single plain stage.

    Raises:
        MissingNormalsError: If the target has no normals.
        RegistrationFailureError: If the first iteration finds no pairs.
    """
    if target.normals is None:
        raise MissingNormalsError("Point-to-plane ICP needs target normals")
    index = target_index or NeighborIndex(target.points)
    transform = init
    total = 0
    for multiple in schedule or (1.0,):
        transform, used = _icp_stage(
            source.points, target, index, transform, multiple * cfg.fitness_distance, cfg
        )
        total += used
    fitness, rmse = evaluate_fitness(source, target, transform, cfg.fitness_distance, index)
    return RegistrationOutcome(transform, fitness, rmse, iterations_used=total)


def align_clouds(
    source: PointCloud,
    target: PointCloud,
    cfg: RegistrationConfig,
    global_alignment: bool = True,
    init: Optional[RigidTransform] = None,
    target_features: Optional[FeatureCloud] = None,
    counter: int = 0,
) -> RegistrationOutcome:
    """
    Best ICP result over the available starting transforms.

    Starts are ``init``, then with ``global_alignment`` the FGR estimate
    and the axis-aligned centroid prior (when enabled), or identity when
    nothing else is available. The start with the highest
    ``fitness·(1 - rmse/τ)`` wins, earlier starts winning ties.

    Raises:
        RegistrationFailureError: If no start yields an alignment.
    """
    index = NeighborIndex(target.points)
    starts: List[RigidTransform] = []
    if init is not None:
        starts.append(init)
    if global_alignment:
        try:
            source_features = prepare_features(source, cfg)
            target_features = target_features or prepare_features(target, cfg)
            starts.append(
                fast_global_registration(
                    source_features, target_features, cfg, counter=counter
                )
            )
        except RegistrationFailureError as e:
            logger.warning(f"Global registration failed: {e}")
        if cfg.centroid_prior:
            starts.append(
                RigidTransform(
                    np.eye(3),
                    target.centroid() - source.centroid(),
                    source.frame,
                    target.frame,
                )
            )
    if not starts:
        starts.append(RigidTransform.identity(source.frame, target.frame))

    best: Optional[RegistrationOutcome] = None
    for start in starts:
        try:
            outcome = icp_refine(source, target, start, cfg, index, cfg.icp_schedule)
        except RegistrationFailureError as e:
            logger.debug(f"ICP start rejected: {e}")
            continue
        if best is None or outcome.score(cfg.fitness_distance) > best.score(
            cfg.fitness_distance
        ):
            best = outcome
    if best is None:
        logger.error("No starting transform led to an alignment")
        raise RegistrationFailureError("All registration starts failed")
    return best


# --- scale loop -------------------------------------------------------------


def _round_scale(scale: float) -> float:
    return round(scale, 6)


def _preferred(
    scales: Sequence[float], scores: Dict[float, RegistrationOutcome], distance: float
) -> Optional[float]:
    ranked = [s for s in scales if scores[s] is not None]
    if not ranked:
        return None
    return max(ranked, key=lambda s: (scores[s].score(distance), -abs(s - 1.0)))


def match_with_scale_loop(
    template: TemplateModel,
    target: PointCloud,
    cfg: Optional[RegistrationConfig] = None,
    threads: int = 1,
) -> Tuple[RegistrationOutcome, ScaleVariant]:
    """
    Register scaled template variants until one fits.

    The initial scales are evaluated first. When some variant reaches the
    fitness threshold the best qualifying one is kept, and if it is the
    largest or smallest scale explored the search keeps stepping outward
    while the score improves. Otherwise the search steps from the
    best-scoring side in ``scale_step`` increments. Scale bounds and the
    variant cap end the search. Ties go to the scale nearest 1.0.

    Returns:
        (best outcome, the variant it used). The outcome's ``converged`` is
        False when no variant reached the threshold.

    Raises:
        MissingNormalsError: If the target lacks normals.
        NoMatchError: If every variant failed to register.
    """
    cfg = cfg or RegistrationConfig()
    if target.normals is None:
        raise MissingNormalsError("Targets must be preprocessed with normals")
    target_features = prepare_features(target, cfg)
    tau = cfg.fitness_distance
    lo, hi = cfg.scale_bounds
    outcomes: Dict[float, Optional[RegistrationOutcome]] = {}
    variants: Dict[float, ScaleVariant] = {}
    order: List[float] = []

    def evaluate(scale: float) -> Tuple[float, ScaleVariant, Optional[RegistrationOutcome]]:
        variant = scale_template(template, scale)
        try:
            outcome = align_clouds(
                variant.cloud,
                target,
                cfg,
                target_features=target_features,
                counter=int(round(scale * 1000)),
            )
            outcome.scale_used = scale
        except RegistrationFailureError as e:
            logger.warning(f"Scale {scale}: {e}")
            outcome = None
        return scale, variant, outcome

    def record(results) -> None:
        for scale, variant, outcome in results:
            order.append(scale)
            variants[scale] = variant
            outcomes[scale] = outcome
            if outcome is not None:
                logger.info(
                    f"Scale {scale:.2f}: fitness {outcome.fitness:.4f}, "
                    f"rmse {outcome.inlier_rmse * 1000:.3f} mm"
                )

    initial = list(dict.fromkeys(_round_scale(s) for s in cfg.initial_scales))
    initial = initial[: cfg.max_variants]
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        record(list(pool.map(evaluate, initial)))

    def qualifying() -> List[float]:
        return [
            s
            for s in order
            if outcomes[s] is not None and outcomes[s].fitness >= cfg.fitness_threshold
        ]

    while len(order) < cfg.max_variants:
        passing = qualifying()
        if passing:
            best = _preferred(passing, outcomes, tau)
            if best == max(order):
                candidate = _round_scale(best + cfg.scale_step)
            elif best == min(order):
                candidate = _round_scale(best - cfg.scale_step)
            else:
                break
        else:
            best = _preferred(order, outcomes, tau)
            above = [s for s in order if s > 1.0]
            below = [s for s in order if s < 1.0]
            upward = best is not None and best > 1.0
            if best is None or best == 1.0:
                up = _preferred(above, outcomes, tau) if above else None
                down = _preferred(below, outcomes, tau) if below else None
                upward = down is None or (
                    up is not None
                    and outcomes[up].score(tau) >= outcomes[down].score(tau)
                )
            candidate = _round_scale(
                max(order) + cfg.scale_step if upward else min(order) - cfg.scale_step
            )
        if not lo - 1e-9 <= candidate <= hi + 1e-9 or candidate in outcomes:
            break
        record([evaluate(candidate)])
        if passing:
            new = outcomes[candidate]
            if new is None or new.score(tau) <= outcomes[best].score(tau):
                break

    scores = [
        (s, o.fitness, o.inlier_rmse, o.score(tau))
        for s, o in ((s, outcomes[s]) for s in order)
        if o is not None
    ]
    passing = qualifying()
    chosen = _preferred(passing or order, outcomes, tau)
    if chosen is None:
        logger.error(f"All {len(order)} template variants failed to register")
        raise NoMatchError(f"No template variant registered ({len(order)} tried)")
    outcome = outcomes[chosen]
    outcome.converged = bool(passing)
    outcome.variant_scores = scores
    if not passing:
        logger.warning(
            f"No variant reached fitness {cfg.fitness_threshold}; best was "
            f"{outcome.fitness:.4f} at scale {chosen}"
        )
    logger.info(f"Selected scale {chosen} with fitness {outcome.fitness:.4f}")
    return outcome, variants[chosen]


# --- probe pose -------------------------------------------------------------


def transfer_probe_point(
    outcome: RegistrationOutcome, variant: ScaleVariant, target: PointCloud
) -> np.ndarray:
    """
    Map the variant's probe point into the target and snap it to the surface.

    Returns:
        A copy of the nearest target point.

    Raises:
        RejectedInputError: If the target is empty.
    """
    if len(target) == 0:
        raise RejectedInputError("Cannot transfer a probe point to an empty cloud")
    mapped = outcome.transform.apply(variant.probe_point)
    _, index = NeighborIndex(target.points).nearest(mapped)
    return target.points[index[0]].copy()


def probe_orientation(
    target: PointCloud, p_s: np.ndarray, k: int, viewpoint: np.ndarray
) -> Tuple[np.ndarray, bool]:
    """
    Surface normal at ``p_s`` from PCA over its k nearest neighbors.

    Returns:
        (unit normal facing ``viewpoint``, True when the two smallest
        eigenvalues are within 1% of each other).

    Raises:
        TooFewPointsError: If the target has fewer than ``k`` points.
    """
    if len(target) < k:
        logger.error(f"Orientation needs {k} points, target has {len(target)}")
        raise TooFewPointsError(f"Target has {len(target)} points, need {k}")
    p_s = np.asarray(p_s, dtype=float)
    _, neighbors = NeighborIndex(target.points).query(p_s, k)
    patch = target.points[neighbors]
    centered = patch - patch.mean(axis=0)
    values, vectors = np.linalg.eigh(centered.T @ centered / k)
    normal = vectors[:, 0] / np.linalg.norm(vectors[:, 0])
    if (np.asarray(viewpoint) - p_s) @ normal < 0:
        normal = -normal
    degenerate = bool(values[1] - values[0] <= 0.01 * abs(values[1]))
    if degenerate:
        logger.warning(f"Near-degenerate PCA spectrum at probe point: {values}")
    return normal, degenerate


def estimate_probe_pose(
    template: TemplateModel,
    target: PointCloud,
    viewpoint: np.ndarray,
    cfg: Optional[RegistrationConfig] = None,
    threads: int = 1,
) -> ProbePose:
    """Scale-loop matching, probe point transfer and orientation in one call."""
    cfg = cfg or RegistrationConfig()
    outcome, variant = match_with_scale_loop(template, target, cfg, threads)
    position = transfer_probe_point(outcome, variant, target)
    normal, degenerate = probe_orientation(target, position, cfg.probe_k, viewpoint)
    return ProbePose(position, normal, outcome, degenerate)


def read_template(directory: str) -> TemplateModel:
    """Read ``template.ply`` and ``template.json`` from a template directory."""
    meta = read_json(os.path.join(directory, "template.json"))
    cloud = read_ply(os.path.join(directory, "template.ply"), TEMPLATE)
    try:
        return TemplateModel(
            cloud,
            meta["probe_point_m"],
            meta["sex_variant"],
            meta.get("name", os.path.basename(os.path.normpath(directory))),
        )
    except KeyError as e:
        raise RejectedInputError(f"template.json is missing {e}") from e


def write_template(directory: str, template: TemplateModel) -> None:
    write_ply(os.path.join(directory, "template.ply"), template.cloud)
    write_json(
        os.path.join(directory, "template.json"),
        {
            "name": template.name,
            "sex_variant": template.sex_variant,
            "probe_point_m": template.probe_point,
        },
    )


def probe_pose_report(pose: ProbePose) -> str:
    return dumps_json(pose.summary())
