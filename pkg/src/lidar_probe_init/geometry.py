# lidar-probe-init/src/lidar_probe_init/geometry.py
"""
Geometry core shared by every stage of the pipeline.

This module holds the frame bookkeeping, rigid transforms, plane geometry,
polar scan containers, point clouds and the exact nearest-neighbor index.
All containers are immutable after construction: their arrays are copied
and flagged read-only, so they can be shared between worker threads.

Key components:
    - FrameId, RigidTransform, RotationVector, Plane: pose and plane types.
    - PolarSample, PolarScan: one revolution of the 2D scanner.
    - PointCloud: points with optional normals and semantic labels.
    - NeighborIndex: KD-tree queries with deterministic tie-breaking.

Units are meters and radians everywhere.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from lidar_probe_init.exceptions import (
    FrameError,
    RejectedInputError,
    TooFewPointsError,
)

logger = logging.getLogger(__name__)

TWO_PI = 2.0 * math.pi
ORTHONORMAL_TOLERANCE = 1e-9
PLANE_NORMAL_TOLERANCE = 1e-12
CLOUD_NORMAL_TOLERANCE = 1e-6


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


def normalize_angles(theta: Union[float, np.ndarray]) -> np.ndarray:
    """Wrap angles into [0, 2π)."""
    wrapped = np.mod(np.asarray(theta, dtype=float), TWO_PI)
    return np.where(wrapped >= TWO_PI, 0.0, wrapped)


def squared_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """
    Squared Euclidean distance along the last axis.

    Every exact neighbor decision in the package goes through this formula,
    so brute-force checks that use it reproduce the same floating-point values.
    """
    diff = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    return np.einsum("...i,...i->...", diff, diff)


@dataclass(frozen=True)
class FrameId:
    """
    Symbolic name of a coordinate frame.

    Attributes:
        name: Frame identifier, compared exactly.
    """

    name: str

    def __post_init__(self):
        if not isinstance(self.name, str) or not self.name:
            logger.error(f"Invalid frame name: {self.name!r}")
            raise RejectedInputError("Frame name must be a non-empty string")

    def __str__(self) -> str:
        return self.name


BASE = FrameId("base")
TCP = FrameId("tcp")
LIDAR = FrameId("lidar")
TEMPLATE = FrameId("template")


@dataclass(frozen=True)
class RotationVector:
    """
    Axis-angle rotation whose magnitude is the angle in radians.

    Attributes:
        omega: 3-vector.
    """

    omega: np.ndarray

    def __post_init__(self):
        omega = np.array(self.omega, dtype=float).reshape(3)
        if not np.all(np.isfinite(omega)):
            raise RejectedInputError("Rotation vector must be finite")
        object.__setattr__(self, "omega", _frozen(omega))

    @property
    def angle(self) -> float:
        return float(np.linalg.norm(self.omega))

    def as_matrix(self) -> np.ndarray:
        """Exponential map to an orthonormal matrix."""
        return Rotation.from_rotvec(np.array(self.omega)).as_matrix()

    @classmethod
    def from_matrix(cls, rotation: np.ndarray) -> "RotationVector":
        """Logarithm map of an orthonormal matrix."""
        return cls(Rotation.from_matrix(rotation).as_rotvec())


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """
    A proper rigid motion mapping coordinates in ``from_frame`` to ``to_frame``.

    Attributes:
        rotation: 3x3 orthonormal matrix with determinant +1.
        translation: 3-vector in meters.
        from_frame: Frame of the points the transform consumes.
        to_frame: Frame of the points it produces.
    """

    rotation: np.ndarray
    translation: np.ndarray
    from_frame: FrameId
    to_frame: FrameId

    def __post_init__(self):
        rotation = np.array(self.rotation, dtype=float)
        translation = np.array(self.translation, dtype=float).reshape(-1)
        if rotation.shape != (3, 3) or translation.shape != (3,):
            logger.error(
                f"Bad transform shapes: rotation {rotation.shape}, "
                f"translation {translation.shape}"
            )
            raise RejectedInputError("Transform needs a 3x3 rotation and a 3-vector")
        if not (np.all(np.isfinite(rotation)) and np.all(np.isfinite(translation))):
            raise RejectedInputError("Transform contains non-finite values")
        error = np.max(np.abs(rotation @ rotation.T - np.eye(3)))
        if error > ORTHONORMAL_TOLERANCE or np.linalg.det(rotation) <= 0.0:
            logger.error(f"Rotation is not proper orthonormal (error {error:.3e})")
            raise RejectedInputError("Rotation must be orthonormal with det +1")
        object.__setattr__(self, "rotation", _frozen(rotation))
        object.__setattr__(self, "translation", _frozen(translation))

    @classmethod
    def identity(cls, from_frame: FrameId, to_frame: FrameId) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3), from_frame, to_frame)

    @classmethod
    def from_rotvec(
        cls,
        omega: Sequence[float],
        translation: Sequence[float],
        from_frame: FrameId,
        to_frame: FrameId,
    ) -> "RigidTransform":
        return cls(
            RotationVector(np.asarray(omega)).as_matrix(),
            translation,
            from_frame,
            to_frame,
        )

    @classmethod
    def from_quaternion(
        cls,
        quaternion: Sequence[float],
        translation: Sequence[float],
        from_frame: FrameId,
        to_frame: FrameId,
    ) -> "RigidTransform":
        """Build from a scalar-last unit quaternion (qx, qy, qz, qw)."""
        return cls(
            Rotation.from_quat(np.asarray(quaternion, dtype=float)).as_matrix(),
            translation,
            from_frame,
            to_frame,
        )

    @classmethod
    def from_matrix(
        cls, matrix: np.ndarray, from_frame: FrameId, to_frame: FrameId
    ) -> "RigidTransform":
        matrix = np.asarray(matrix, dtype=float)
        return cls(matrix[:3, :3], matrix[:3, 3], from_frame, to_frame)

    def as_matrix(self) -> np.ndarray:
        """4x4 homogeneous matrix."""
        matrix = np.eye(4)
        matrix[:3, :3] = self.rotation
        matrix[:3, 3] = self.translation
        return matrix

    def as_quaternion(self) -> np.ndarray:
        """Scalar-last unit quaternion with non-negative w."""
        quaternion = Rotation.from_matrix(np.array(self.rotation)).as_quat()
        return quaternion if quaternion[3] >= 0 else -quaternion

    def rotation_vector(self) -> RotationVector:
        return RotationVector.from_matrix(self.rotation)

    def inverse(self) -> "RigidTransform":
        rotation_t = self.rotation.T
        return RigidTransform(
            rotation_t, -rotation_t @ self.translation, self.to_frame, self.from_frame
        )

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map a 3-vector or an N×3 array without frame checks."""
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return compose(self, other)


@dataclass(frozen=True)
class Plane:
    """
    Oriented plane ``{p : normal·p + offset = 0}``.

    Attributes:
        normal: Unit 3-vector.
        offset: Signed offset in meters.
    """

    normal: np.ndarray
    offset: float

    def __post_init__(self):
        normal = np.array(self.normal, dtype=float).reshape(3)
        if abs(np.linalg.norm(normal) - 1.0) > PLANE_NORMAL_TOLERANCE:
            logger.error(f"Plane normal is not unit length: {normal}")
            raise RejectedInputError("Plane normal must have unit length")
        object.__setattr__(self, "normal", _frozen(normal))
        object.__setattr__(self, "offset", float(self.offset))

    @classmethod
    def from_vector(cls, v: Sequence[float], offset: float) -> "Plane":
        """Build from an unnormalized direction, as the solver parameterizes it."""
        v = np.asarray(v, dtype=float)
        norm = np.linalg.norm(v)
        if norm <= 1e-8:
            raise RejectedInputError("Plane direction vector is too short")
        return cls(v / norm, offset)

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        return plane_signed_distance(self, points)


@dataclass(frozen=True)
class PolarSample:
    """
    One range return of the 2D scanner.

    Attributes:
        range: Distance in meters, 0 for invalid returns.
        angle: Beam angle in [0, 2π).
        timestamp: Acquisition time in seconds.
        valid: False for dropouts and misses.
    """

    range: float
    angle: float
    timestamp: float = 0.0
    valid: bool = True

    def __post_init__(self):
        if self.range < 0 or not math.isfinite(self.range):
            raise RejectedInputError(f"Range must be finite and >= 0, got {self.range}")
        object.__setattr__(self, "angle", float(normalize_angles(self.angle)))
        if not self.valid:
            object.__setattr__(self, "range", 0.0)


class PolarScan:
    """
    One revolution of samples, stored column-wise.

    Angles must be strictly increasing. Invalid samples have their range
    forced to 0 and are ignored by every geometric operation.

    Attributes:
        angles: Beam angles in [0, 2π).
        ranges: Ranges in meters.
        timestamps: Per-sample acquisition times in seconds.
        valid: Boolean validity mask.
        scan_timestamp: Start time of the revolution.
    """

    def __init__(
        self,
        angles: Iterable[float],
        ranges: Iterable[float],
        valid: Optional[Iterable[bool]] = None,
        timestamps: Optional[Iterable[float]] = None,
        scan_timestamp: float = 0.0,
    ):
        angles_arr = normalize_angles(np.array(list(angles), dtype=float))
        ranges_arr = np.array(list(ranges), dtype=float)
        count = angles_arr.shape[0]
        valid_arr = (
            np.ones(count, dtype=bool)
            if valid is None
            else np.array(list(valid), dtype=bool)
        )
        times_arr = (
            np.full(count, float(scan_timestamp))
            if timestamps is None
            else np.array(list(timestamps), dtype=float)
        )
        if not (ranges_arr.shape == valid_arr.shape == times_arr.shape == (count,)):
            logger.error("Scan columns have mismatched lengths")
            raise RejectedInputError("Scan columns must have equal lengths")
        if count > 1 and np.any(np.diff(angles_arr) <= 0):
            logger.error("Scan angles are not strictly increasing")
            raise RejectedInputError("Scan angles must be strictly increasing")
        if np.any(~np.isfinite(ranges_arr[valid_arr])) or np.any(
            ranges_arr[valid_arr] < 0
        ):
            raise RejectedInputError("Valid ranges must be finite and non-negative")
        ranges_arr = np.where(valid_arr, ranges_arr, 0.0)
        self.angles = _frozen(angles_arr)
        self.ranges = _frozen(ranges_arr)
        self.valid = _frozen(valid_arr)
        self.timestamps = _frozen(times_arr)
        self.scan_timestamp = float(scan_timestamp)

    @classmethod
    def from_samples(
        cls, samples: Sequence[PolarSample], scan_timestamp: float = 0.0
    ) -> "PolarScan":
        return cls(
            [s.angle for s in samples],
            [s.range for s in samples],
            [s.valid for s in samples],
            [s.timestamp for s in samples],
            scan_timestamp,
        )

    @classmethod
    def from_revolution(
        cls,
        scan_timestamp: float,
        angles: np.ndarray,
        ranges: np.ndarray,
        valid: np.ndarray,
        revolution_period: float,
    ) -> "PolarScan":
        """Assign each sample the time the beam passed its angle."""
        angles = normalize_angles(angles)
        timestamps = scan_timestamp + angles / TWO_PI * revolution_period
        return cls(angles, ranges, valid, timestamps, scan_timestamp)

    @property
    def samples(self) -> List[PolarSample]:
        return [
            PolarSample(float(r), float(a), float(t), bool(v))
            for r, a, t, v in zip(self.ranges, self.angles, self.timestamps, self.valid)
        ]

    def select(self, mask: np.ndarray) -> "PolarScan":
        return PolarScan(
            self.angles[mask],
            self.ranges[mask],
            self.valid[mask],
            self.timestamps[mask],
            self.scan_timestamp,
        )

    @property
    def valid_count(self) -> int:
        return int(np.count_nonzero(self.valid))

    def __len__(self) -> int:
        return int(self.angles.shape[0])


class PointCloud:
    """
    Unordered 3D points in a named frame.

    Attributes:
        points: N×3 coordinates in meters.
        normals: Optional N×3 unit normals.
        labels: Optional per-point integer labels (see ``phantoms.LABELS``).
        frame: Frame the coordinates are expressed in.
    """

    def __init__(
        self,
        points: np.ndarray,
        frame: FrameId = BASE,
        normals: Optional[np.ndarray] = None,
        labels: Optional[np.ndarray] = None,
    ):
        points_arr = np.array(points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(points_arr)):
            logger.error("Point cloud contains NaN or Inf coordinates")
            raise RejectedInputError("Point coordinates must be finite")
        count = points_arr.shape[0]
        normals_arr = None
        if normals is not None:
            normals_arr = np.array(normals, dtype=float).reshape(-1, 3)
            if normals_arr.shape[0] != count:
                raise RejectedInputError("Normal count must equal point count")
            lengths = np.linalg.norm(normals_arr, axis=1)
            if count and np.max(np.abs(lengths - 1.0)) > CLOUD_NORMAL_TOLERANCE:
                logger.error("Point cloud normals are not unit length")
                raise RejectedInputError("Normals must have unit length")
            normals_arr = _frozen(normals_arr)
        labels_arr = None
        if labels is not None:
            labels_arr = np.array(labels, dtype=np.int64).reshape(-1)
            if labels_arr.shape[0] != count:
                raise RejectedInputError("Label count must equal point count")
            labels_arr = _frozen(labels_arr)
        self.points = _frozen(points_arr)
        self.normals = normals_arr
        self.labels = labels_arr
        self.frame = frame

    def __len__(self) -> int:
        return int(self.points.shape[0])

    @property
    def has_normals(self) -> bool:
        return self.normals is not None

    def centroid(self) -> np.ndarray:
        return self.points.mean(axis=0)

    def select(self, index: np.ndarray) -> "PointCloud":
        """Subset by boolean mask or index array, keeping order."""
        return PointCloud(
            self.points[index],
            self.frame,
            None if self.normals is None else self.normals[index],
            None if self.labels is None else self.labels[index],
        )

    def with_normals(self, normals: Optional[np.ndarray]) -> "PointCloud":
        return PointCloud(self.points, self.frame, normals, self.labels)

    def with_labels(self, labels: Optional[np.ndarray]) -> "PointCloud":
        return PointCloud(self.points, self.frame, self.normals, labels)

    def transformed(self, transform: RigidTransform) -> "PointCloud":
        if transform.from_frame != self.frame:
            logger.error(
                f"Cannot apply {transform.from_frame}->{transform.to_frame} "
                f"to a cloud in {self.frame}"
            )
            raise FrameError(
                f"Transform expects frame {transform.from_frame}, cloud is in {self.frame}"
            )
        normals = None
        if self.normals is not None:
            normals = self.normals @ transform.rotation.T
            normals /= np.linalg.norm(normals, axis=1, keepdims=True)
        return PointCloud(
            transform.apply(self.points), transform.to_frame, normals, self.labels
        )

    @classmethod
    def empty(cls, frame: FrameId = BASE) -> "PointCloud":
        return cls(np.zeros((0, 3)), frame)

    @classmethod
    def concatenate(cls, clouds: Sequence["PointCloud"]) -> "PointCloud":
        if not clouds:
            raise RejectedInputError("Nothing to concatenate")
        frames = {c.frame for c in clouds}
        if len(frames) != 1:
            raise FrameError(f"Cannot concatenate clouds in frames {frames}")
        with_normals = all(c.normals is not None for c in clouds)
        with_labels = all(c.labels is not None for c in clouds)
        return cls(
            np.concatenate([c.points for c in clouds]),
            clouds[0].frame,
            np.concatenate([c.normals for c in clouds]) if with_normals else None,
            np.concatenate([c.labels for c in clouds]) if with_labels else None,
        )


@dataclass(eq=False)
class NeighborIndex:
    """
    Exact nearest-neighbor queries over a fixed point set.

    A cKDTree narrows the candidates, then distances are recomputed with
    ``squared_distances`` and ordered by (distance, point index). Queries
    never mutate the index, so concurrent readers are safe.

    Attributes:
        points: Indexed N×3 array.
    """

    points: np.ndarray
    _tree: cKDTree = field(init=False, repr=False)

    def __post_init__(self):
        if isinstance(self.points, PointCloud):
            self.points = self.points.points
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        self._tree = cKDTree(self.points)

    def __len__(self) -> int:
        return int(self.points.shape[0])

    def query(self, point: np.ndarray, k: int) -> Tuple[np.ndarray, np.ndarray]:
        """
        Return (distances, indices) of the min(k, N) nearest points.

        Args:
            point: Query 3-vector.
            k: Requested neighbor count.
        """
        distances, indices = self.knn(np.asarray(point, dtype=float).reshape(1, 3), k)
        return distances[0], indices[0]

    def knn(self, queries: np.ndarray, k: int) -> Tuple[np.ndarray, np.ndarray]:
        """Batched ``query`` over an M×3 array; returns M×min(k, N) arrays."""
        if k < 1:
            raise RejectedInputError("k must be at least 1")
        queries = np.asarray(queries, dtype=float).reshape(-1, 3)
        n = len(self)
        k_eff = min(k, n)
        if n == 0:
            empty = np.zeros((queries.shape[0], 0))
            return empty, empty.astype(np.int64)
        k_probe = min(k_eff + 1, n)
        _, candidates = self._tree.query(queries, k=k_probe)
        candidates = np.asarray(candidates, dtype=np.int64).reshape(
            queries.shape[0], k_probe
        )
        d2 = squared_distances(self.points[candidates], queries[:, None, :])
        order = np.lexsort((candidates, d2), axis=-1)
        candidates = np.take_along_axis(candidates, order, axis=-1)
        d2 = np.take_along_axis(d2, order, axis=-1)

        if k_probe > k_eff:
            kth = d2[:, k_eff - 1]
            gap = d2[:, k_eff] - kth
            ambiguous = np.flatnonzero(gap <= 1e-9 * np.maximum(kth, 1e-30))
            for row in ambiguous:
                d2[row, :k_eff], candidates[row, :k_eff] = self._resolve_boundary(
                    queries[row], k_eff, kth[row]
                )
        return np.sqrt(d2[:, :k_eff]), candidates[:, :k_eff]

    def _resolve_boundary(
        self, query: np.ndarray, k: int, kth_d2: float
    ) -> Tuple[np.ndarray, np.ndarray]:
        radius = math.sqrt(kth_d2) * (1.0 + 1e-6) + 1e-12
        members = np.asarray(self._tree.query_ball_point(query, radius), dtype=np.int64)
        d2 = squared_distances(self.points[members], query)
        order = np.lexsort((members, d2))[:k]
        return d2[order], members[order]

    def nearest(self, queries: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Distance to and index of the single nearest point for each query."""
        distances, indices = self.knn(queries, 1)
        return distances[:, 0], indices[:, 0]

    def radius(self, query: np.ndarray, radius: float) -> np.ndarray:
        """Indices within ``radius`` (inclusive), ordered by distance then index."""
        query = np.asarray(query, dtype=float).reshape(3)
        members = np.asarray(
            self._tree.query_ball_point(query, radius * (1.0 + 1e-6) + 1e-12),
            dtype=np.int64,
        )
        d2 = squared_distances(self.points[members], query)
        keep = d2 <= radius * radius
        members, d2 = members[keep], d2[keep]
        return members[np.lexsort((members, d2))]

    def radius_batch(self, queries: np.ndarray, radius: float) -> List[np.ndarray]:
        """``radius`` for each row of an M×3 array."""
        queries = np.asarray(queries, dtype=float).reshape(-1, 3)
        candidate_lists = self._tree.query_ball_point(
            queries, radius * (1.0 + 1e-6) + 1e-12
        )
        result = []
        for query, members in zip(queries, candidate_lists):
            members = np.asarray(members, dtype=np.int64)
            d2 = squared_distances(self.points[members], query)
            keep = d2 <= radius * radius
            members, d2 = members[keep], d2[keep]
            result.append(members[np.lexsort((members, d2))])
        return result

    def count_within(self, queries: np.ndarray, radius: float) -> np.ndarray:
        return np.array(
            [len(m) for m in self.radius_batch(queries, radius)], dtype=np.int64
        )


def polar_to_cartesian(sample: PolarSample) -> np.ndarray:
    """
    Convert a valid return to a point in the scanner frame.

    Args:
        sample: The polar sample.

    Returns:
        (r cosθ, r sinθ, 0).

    Raises:
        RejectedInputError: If the sample is invalid.
    """
    if not sample.valid:
        logger.error(f"Refusing to convert invalid sample at angle {sample.angle}")
        raise RejectedInputError("Invalid samples carry no geometry")
    return np.array(
        [sample.range * math.cos(sample.angle), sample.range * math.sin(sample.angle), 0.0]
    )


def scan_to_points(scan: PolarScan) -> Tuple[np.ndarray, np.ndarray]:
    """
    Vectorized ``polar_to_cartesian`` over the valid samples of a scan.

    Returns:
        (points in {L}, indices of the valid samples they came from).
    """
    index = np.flatnonzero(scan.valid)
    r = scan.ranges[index]
    theta = scan.angles[index]
    points = np.column_stack([r * np.cos(theta), r * np.sin(theta), np.zeros_like(r)])
    return points, index


def sector_filter(scan: PolarScan, lo: float, hi: float) -> PolarScan:
    """
    Keep the samples whose angle lies in [lo, hi], in order.

    Raises:
        RejectedInputError: Unless 0 <= lo < hi < 2π.
    """
    if not (0.0 <= lo < hi < TWO_PI):
        logger.error(f"Invalid sector bounds [{lo}, {hi}]")
        raise RejectedInputError("Sector bounds must satisfy 0 <= lo < hi < 2π")
    mask = (scan.angles >= lo) & (scan.angles <= hi)
    return scan.select(mask)


def transform_point(
    transform: RigidTransform,
    point: Union[np.ndarray, PointCloud],
    frame: Optional[FrameId] = None,
) -> Union[np.ndarray, PointCloud]:
    """
    Apply ``R·p + t``.

    Args:
        transform: The transform.
        point: A 3-vector (frame given by ``frame``) or a PointCloud.
        frame: Frame of a raw vector; when given it must match
            ``transform.from_frame``.

    Returns:
        The mapped vector, or a cloud relabelled to ``transform.to_frame``.

    Raises:
        FrameError: On a frame mismatch.
    """
    if isinstance(point, PointCloud):
        return point.transformed(transform)
    if frame is not None and frame != transform.from_frame:
        logger.error(f"Point in {frame} given to transform from {transform.from_frame}")
        raise FrameError(f"Expected a point in {transform.from_frame}, got {frame}")
    return transform.apply(point)


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """
    Chain two transforms: the result applies ``b`` first, then ``a``.

    Raises:
        FrameError: If ``a.from_frame`` differs from ``b.to_frame``.
    """
    if a.from_frame != b.to_frame:
        logger.error(f"Frame chain broken: {b.to_frame} then {a.from_frame}")
        raise FrameError(
            f"Cannot compose {a.from_frame}->{a.to_frame} after "
            f"{b.from_frame}->{b.to_frame}"
        )
    return RigidTransform(
        a.rotation @ b.rotation,
        a.rotation @ b.translation + a.translation,
        b.from_frame,
        a.to_frame,
    )


def plane_signed_distance(plane: Plane, point: np.ndarray) -> np.ndarray:
    """``n·p + d`` for a 3-vector or each row of an N×3 array."""
    return np.asarray(point, dtype=float) @ plane.normal + plane.offset


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix: ``skew(a) @ b == np.cross(a, b)``."""
    x, y, z = np.asarray(v, dtype=float).reshape(3)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def right_jacobian(omega: np.ndarray) -> np.ndarray:
    """
    Right Jacobian of the rotation-vector exponential.

    ``exp(omega + delta) ≈ exp(omega) · exp(right_jacobian(omega) @ delta)``.
    """
    omega = np.asarray(omega, dtype=float).reshape(3)
    theta = float(np.linalg.norm(omega))
    k = skew(omega)
    if theta < 1e-5:
        a = 0.5 - theta**2 / 24.0
        b = 1.0 / 6.0 - theta**2 / 120.0
    else:
        a = (1.0 - math.cos(theta)) / theta**2
        b = (theta - math.sin(theta)) / theta**3
    return np.eye(3) - a * k + b * (k @ k)


def fit_plane(points: np.ndarray) -> Plane:
    """Total least-squares plane through at least three points."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if points.shape[0] < 3:
        raise TooFewPointsError("A plane fit needs at least three points")
    centroid = points.mean(axis=0)
    _, _, vt = np.linalg.svd(points - centroid, full_matrices=False)
    normal = vt[-1] / np.linalg.norm(vt[-1])
    return Plane(normal, -float(normal @ centroid))
