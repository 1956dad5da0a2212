# lidar-probe-init/src/lidar_probe_init/preprocess.py
"""
Point-cloud cleanup from the raw sweep union to a chest-only surface.

Stages, in pipeline order:
    1. voxel_downsample
    2. statistical_outlier_removal
    3. radius_outlier_removal
    4. density_cluster, keeping the largest cluster
    5. estimate_normals, oriented toward the mean sensor position
    6. poisson_reconstruct_and_trim
    7. estimate_normals on the resampled surface

The implicit surface is a screened Poisson solve on a uniform grid over
the cluster's bounding box; the isosurface is extracted with marching
cubes, trimmed to the neighborhood of the input points and resampled on a
voxel grid.
"""

import logging
import os
from dataclasses import dataclass, fields
from typing import List, Optional

import numpy as np
from scipy import sparse
from scipy.ndimage import map_coordinates
from scipy.sparse.linalg import cg
from skimage.measure import marching_cubes
from sklearn.cluster import DBSCAN

from lidar_probe_init.exceptions import (
    EmptyReconstructionError,
    InvalidConfigurationError,
    MissingNormalsError,
    RejectedInputError,
    SolverError,
    TooFewPointsError,
)
from lidar_probe_init.formats import write_ply
from lidar_probe_init.geometry import NeighborIndex, PointCloud

logger = logging.getLogger(__name__)


@dataclass
class PreprocessConfig:
    """
    Attributes:
        voxel_size: Downsampling voxel edge, meters.
        sor_k: Neighbors for statistical outlier removal.
        sor_std_ratio: Standard deviations above the mean that are kept.
        ror_radius: Radius of radius outlier removal, meters.
        ror_min_neighbors: Neighbors required within ``ror_radius``.
        cluster_eps: DBSCAN neighborhood radius, meters.
        cluster_min_points: DBSCAN core-point threshold (the point included).
        poisson_grid_resolution: Grid nodes along the longest box axis.
        trim_distance: Largest allowed distance of a surface sample to the
            input cloud, meters.
        normal_k: Neighbors used for PCA normals.
        poisson_screening: Screening weight, in grid units.
        poisson_margin: Box margin as a fraction of the longest extent.
        poisson_tolerance: Relative residual tolerance of the CG solve.
        poisson_max_iterations: CG iteration cap.
    """

    voxel_size: float = 0.003
    sor_k: int = 20
    sor_std_ratio: float = 2.0
    ror_radius: float = 0.010
    ror_min_neighbors: int = 5
    cluster_eps: float = 0.015
    cluster_min_points: int = 10
    poisson_grid_resolution: int = 128
    trim_distance: float = 0.010
    normal_k: int = 30
    poisson_screening: float = 0.01
    poisson_margin: float = 0.1
    poisson_tolerance: float = 1e-6
    poisson_max_iterations: int = 2000

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not value > 0:
                logger.error(f"Invalid preprocess setting {f.name}={value}")
                raise InvalidConfigurationError(f"{f.name} must be positive, got {value}")
        if self.poisson_grid_resolution < 4:
            raise InvalidConfigurationError("poisson_grid_resolution must be at least 4")


@dataclass
class ImplicitSurface:
    """
    Indicator function sampled on a regular grid.

    Attributes:
        values: Grid values indexed [i, j, k] along x, y, z.
        origin: World position of node (0, 0, 0).
        spacing: Node spacing, meters.
        iso_value: Level of the reconstructed surface.
    """

    values: np.ndarray
    origin: np.ndarray
    spacing: float
    iso_value: float

    def __post_init__(self):
        if not self.spacing > 0:
            raise RejectedInputError("Grid spacing must be positive")
        if not np.all(np.isfinite(self.values)):
            raise SolverError("Indicator grid contains non-finite values")

    def sample(self, points: np.ndarray) -> np.ndarray:
        """Trilinear interpolation at world positions."""
        grid = ((np.asarray(points) - self.origin) / self.spacing).T
        return map_coordinates(self.values, grid, order=1, mode="nearest")


def voxel_downsample(cloud: PointCloud, voxel_size: float) -> PointCloud:
    """
    One centroid per occupied voxel, ordered by voxel key.

    Normals are averaged and renormalized; labels take the majority vote
    with ties going to the smaller label.
    """
    if not voxel_size > 0:
        raise RejectedInputError("voxel_size must be positive")
    if len(cloud) == 0:
        return cloud
    keys = np.floor(cloud.points / voxel_size).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    voxels = counts.size
    centroids = np.column_stack(
        [np.bincount(inverse, cloud.points[:, i], voxels) for i in range(3)]
    ) / counts[:, None]

    normals = None
    if cloud.normals is not None:
        sums = np.column_stack(
            [np.bincount(inverse, cloud.normals[:, i], voxels) for i in range(3)]
        )
        lengths = np.linalg.norm(sums, axis=1)
        first = np.full(voxels, -1, dtype=np.int64)
        first[inverse[::-1]] = np.arange(len(cloud))[::-1]
        cancelled = lengths < 1e-12
        sums[cancelled] = cloud.normals[first[cancelled]]
        normals = sums / np.linalg.norm(sums, axis=1, keepdims=True)

    labels = None
    if cloud.labels is not None:
        pairs, votes = np.unique(
            np.column_stack([inverse, cloud.labels]), axis=0, return_counts=True
        )
        order = np.lexsort((pairs[:, 1], -votes, pairs[:, 0]))
        pairs = pairs[order]
        winners = np.concatenate([[True], pairs[1:, 0] != pairs[:-1, 0]])
        labels = pairs[winners, 1]

    logger.debug(f"Voxel downsample {len(cloud)} -> {voxels} at {voxel_size} m")
    return PointCloud(centroids, cloud.frame, normals, labels)


def statistical_outlier_removal(
    cloud: PointCloud, k: int, std_ratio: float
) -> PointCloud:
    """
    Drop points whose mean distance to their k neighbors is unusually large.

    A point survives when its mean k-NN distance is at most the global mean
    plus ``std_ratio`` population standard deviations.

    Raises:
        TooFewPointsError: If the cloud has no more than ``k`` points.
    """
    if len(cloud) <= k:
        logger.error(f"SOR needs more than {k} points, got {len(cloud)}")
        raise TooFewPointsError(f"Cloud has {len(cloud)} points, need more than {k}")
    distances, _ = NeighborIndex(cloud.points).knn(cloud.points, k + 1)
    mean_distance = distances[:, 1:].mean(axis=1)
    threshold = mean_distance.mean() + std_ratio * mean_distance.std()
    keep = mean_distance <= threshold
    logger.debug(f"SOR kept {np.count_nonzero(keep)}/{len(cloud)}")
    return cloud.select(keep)


def radius_outlier_removal(
    cloud: PointCloud, radius: float, min_neighbors: int
) -> PointCloud:
    """Drop points with fewer than ``min_neighbors`` others within ``radius``."""
    if len(cloud) == 0:
        return cloud
    counts = NeighborIndex(cloud.points).count_within(cloud.points, radius) - 1
    keep = counts >= min_neighbors
    logger.debug(f"ROR kept {np.count_nonzero(keep)}/{len(cloud)}")
    return cloud.select(keep)


def cluster_labels(points: np.ndarray, eps: float, min_points: int) -> np.ndarray:
    """DBSCAN labels, -1 for noise; ``min_points`` counts the point itself."""
    if not eps > 0:
        raise RejectedInputError("eps must be positive")
    if points.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    model = DBSCAN(eps=eps, min_samples=min_points, metric="euclidean", n_jobs=1)
    return model.fit_predict(points).astype(np.int64)


def density_cluster(cloud: PointCloud, eps: float, min_points: int) -> List[PointCloud]:
    """
    Density clusters, noise discarded, largest first.

    Ties in size are ordered by the smallest point index of the cluster.
    """
    labels = cluster_labels(cloud.points, eps, min_points)
    groups = [np.flatnonzero(labels == c) for c in np.unique(labels[labels >= 0])]
    groups.sort(key=lambda idx: (-idx.size, int(idx[0])))
    logger.debug(f"DBSCAN found {len(groups)} clusters: {[g.size for g in groups]}")
    return [cloud.select(idx) for idx in groups]


def estimate_normals(cloud: PointCloud, k: int, viewpoint: np.ndarray) -> PointCloud:
    """
    PCA normals over each point's k nearest neighbors (itself included).

    The normal is the eigenvector of the smallest eigenvalue, flipped so it
    faces ``viewpoint``.

    Raises:
        TooFewPointsError: If the cloud has no more than ``k`` points.
    """
    if len(cloud) <= k:
        logger.error(f"Normal estimation needs more than {k} points, got {len(cloud)}")
        raise TooFewPointsError(f"Cloud has {len(cloud)} points, need more than {k}")
    _, neighbors = NeighborIndex(cloud.points).knn(cloud.points, k)
    normals = pca_normals(cloud.points, neighbors)
    facing = np.einsum("ij,ij->i", np.asarray(viewpoint) - cloud.points, normals)
    normals[facing < 0] *= -1.0
    return cloud.with_normals(normals)


def pca_normals(points: np.ndarray, neighbors: np.ndarray) -> np.ndarray:
    """Smallest-eigenvalue eigenvector of each neighborhood's covariance."""
    patches = points[neighbors]
    centered = patches - patches.mean(axis=1, keepdims=True)
    covariance = np.einsum("nki,nkj->nij", centered, centered) / neighbors.shape[1]
    _, vectors = np.linalg.eigh(covariance)
    normals = vectors[:, :, 0]
    return normals / np.linalg.norm(normals, axis=1, keepdims=True)


def _neumann_laplacian(n: int) -> sparse.csr_matrix:
    main = np.full(n, -2.0)
    main[0] = main[-1] = -1.0
    off = np.ones(n - 1)
    return sparse.diags([off, main, off], [-1, 0, 1], format="csr")


def _grid_laplacian(shape) -> sparse.csr_matrix:
    nx, ny, nz = shape
    ix, iy, iz = (sparse.identity(n, format="csr") for n in shape)
    return (
        sparse.kron(_neumann_laplacian(nx), sparse.kron(iy, iz))
        + sparse.kron(ix, sparse.kron(_neumann_laplacian(ny), iz))
        + sparse.kron(ix, sparse.kron(iy, _neumann_laplacian(nz)))
    ).tocsr()


def _splat(coords: np.ndarray, values: np.ndarray, shape) -> np.ndarray:
    base = np.floor(coords).astype(np.int64)
    base = np.clip(base, 0, np.array(shape) - 2)
    frac = coords - base
    grid = np.zeros((int(np.prod(shape)), values.shape[1]))
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                weight = (
                    (frac[:, 0] if dx else 1 - frac[:, 0])
                    * (frac[:, 1] if dy else 1 - frac[:, 1])
                    * (frac[:, 2] if dz else 1 - frac[:, 2])
                )
                flat = np.ravel_multi_index(
                    (base[:, 0] + dx, base[:, 1] + dy, base[:, 2] + dz), shape
                )
                for c in range(values.shape[1]):
                    grid[:, c] += np.bincount(
                        flat, weight * values[:, c], minlength=grid.shape[0]
                    )
    return grid.reshape(*shape, values.shape[1])


def solve_indicator(cloud: PointCloud, cfg: PreprocessConfig) -> ImplicitSurface:
    """
    Screened Poisson solve for the indicator of an oriented cloud.

    Solves ``(-L + αI) χ = -div V`` on a grid with Neumann boundaries,
    where V is the trilinear splat of the normals, by conjugate gradient.

    Raises:
        MissingNormalsError: If the cloud has no normals.
        SolverError: If CG does not reach the tolerance.
    """
    if cloud.normals is None:
        logger.error("Poisson reconstruction requires normals")
        raise MissingNormalsError("Poisson reconstruction needs oriented normals")
    if len(cloud) == 0:
        raise EmptyReconstructionError("Nothing to reconstruct")
    lower = cloud.points.min(axis=0)
    extent = cloud.points.max(axis=0) - lower
    longest = max(float(extent.max()), 1e-6)
    margin = cfg.poisson_margin * longest
    spacing = (longest + 2 * margin) / (cfg.poisson_grid_resolution - 1)
    origin = lower - margin
    shape = tuple(
        int(np.floor((extent[i] + 2 * margin) / spacing + 1e-9)) + 2 for i in range(3)
    )
    shape = tuple(min(s, cfg.poisson_grid_resolution + 1) for s in shape)

    coords = (cloud.points - origin) / spacing
    field = _splat(coords, cloud.normals, shape)
    divergence = sum(np.gradient(field[..., c], axis=c) for c in range(3))
    system = -_grid_laplacian(shape) + cfg.poisson_screening * sparse.identity(
        int(np.prod(shape)), format="csr"
    )
    solution, info = cg(
        system,
        -divergence.ravel(),
        rtol=cfg.poisson_tolerance,
        maxiter=cfg.poisson_max_iterations,
    )
    if info != 0:
        logger.error(f"Poisson CG stopped with info={info} on grid {shape}")
        raise SolverError(f"Conjugate gradient did not converge (info={info})")
    values = solution.reshape(shape)
    surface = ImplicitSurface(values, origin, spacing, 0.0)
    surface.iso_value = float(np.median(surface.sample(cloud.points)))
    logger.debug(
        f"Poisson grid {shape}, spacing {spacing * 1000:.3f} mm, "
        f"iso {surface.iso_value:.6f}"
    )
    return surface


def extract_isosurface(surface: ImplicitSurface) -> np.ndarray:
    """Marching-cubes vertices of the iso level, in world coordinates."""
    try:
        vertices, _, _, _ = marching_cubes(
            surface.values, level=surface.iso_value, allow_degenerate=False
        )
    except (ValueError, RuntimeError) as e:
        logger.error(f"Isosurface extraction failed: {e}")
        raise SolverError(f"Isosurface extraction failed: {e}") from e
    return surface.origin + vertices * surface.spacing


def poisson_reconstruct_and_trim(cloud: PointCloud, cfg: PreprocessConfig) -> PointCloud:
    """
    Smoothed, resampled surface of an oriented cloud.

    The isosurface is trimmed to points within ``trim_distance`` of the
    input, then resampled to one centroid per grid cell. Labels are copied
    from the nearest input point.

    Raises:
        MissingNormalsError: If the cloud has no normals.
        SolverError: If the grid solve fails.
    """
    surface = solve_indicator(cloud, cfg)
    vertices = extract_isosurface(surface)
    index = NeighborIndex(cloud.points)
    distances, _ = index.nearest(vertices)
    trimmed = vertices[distances <= cfg.trim_distance]
    if trimmed.shape[0] == 0:
        raise EmptyReconstructionError("Trimming removed the whole surface")

    budget = 3 * cfg.poisson_grid_resolution**2
    voxel = surface.spacing
    resampled = voxel_downsample(PointCloud(trimmed, cloud.frame), voxel)
    while len(resampled) > budget:
        voxel *= 1.25
        resampled = voxel_downsample(PointCloud(trimmed, cloud.frame), voxel)
    # centroids may drift off the trimming band
    distances, nearest = index.nearest(resampled.points)
    keep = distances <= cfg.trim_distance
    labels = None if cloud.labels is None else cloud.labels[nearest[keep]]
    logger.info(
        f"Poisson surface: {vertices.shape[0]} vertices, {trimmed.shape[0]} after "
        f"trimming, {np.count_nonzero(keep)} resampled"
    )
    return PointCloud(resampled.points[keep], cloud.frame, labels=labels)


def _dump(debug_dir: Optional[str], name: str, cloud: PointCloud) -> None:
    if debug_dir:
        write_ply(os.path.join(debug_dir, f"{name}.ply"), cloud)


def preprocess_pipeline(
    raw: PointCloud,
    cfg: Optional[PreprocessConfig] = None,
    viewpoint: Optional[np.ndarray] = None,
    debug_dir: Optional[str] = None,
) -> PointCloud:
    """
    Full cleanup chain from the raw sweep union to the chest surface.

    Args:
        raw: Accumulated cloud in the base frame.
        cfg: Stage parameters.
        viewpoint: Normal orientation target, normally the mean sensor
            position; defaults to 1 m above the cloud centroid.
        debug_dir: When set, every intermediate cloud is written there.

    Raises:
        EmptyReconstructionError: If the input or any stage output is empty.
    """
    cfg = cfg or PreprocessConfig()
    if len(raw) == 0:
        logger.error("Preprocessing called with an empty cloud")
        raise EmptyReconstructionError("Input cloud is empty")
    if viewpoint is None:
        viewpoint = raw.centroid() + np.array([0.0, 0.0, 1.0])
    viewpoint = np.asarray(viewpoint, dtype=float)
    logger.info(f"Preprocessing {len(raw)} points")
    _dump(debug_dir, "a_raw", raw)

    cloud = voxel_downsample(raw, cfg.voxel_size)
    _dump(debug_dir, "b_downsampled", cloud)
    cloud = statistical_outlier_removal(cloud, cfg.sor_k, cfg.sor_std_ratio)
    _dump(debug_dir, "c_statistical_outliers_removed", cloud)
    cloud = radius_outlier_removal(cloud, cfg.ror_radius, cfg.ror_min_neighbors)
    _dump(debug_dir, "d_radius_outliers_removed", cloud)

    clusters = density_cluster(cloud, cfg.cluster_eps, cfg.cluster_min_points)
    if not clusters:
        logger.error("Density clustering left no cluster")
        raise EmptyReconstructionError("No density cluster found")
    cloud = clusters[0]
    _dump(debug_dir, "e_largest_cluster", cloud)

    cloud = estimate_normals(cloud, cfg.normal_k, viewpoint)
    surface = poisson_reconstruct_and_trim(cloud, cfg)
    _dump(debug_dir, "f_poisson_trimmed", surface)
    result = estimate_normals(surface, cfg.normal_k, viewpoint)
    _dump(debug_dir, "g_final", result)
    logger.info(f"Preprocessing kept {len(result)} surface points")
    return result
