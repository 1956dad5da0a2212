# lidar-probe-init/src/lidar_probe_init/reconstruction.py
"""
Sweep accumulation: time-stamped 2D scans to a base-frame point cloud.

Each valid sample is converted to a point in the scanner frame, mapped
through the calibrated scanner-to-tool transform and then through the
tool pose interpolated at the sample's own timestamp (linear in
translation, spherical-linear in rotation).
"""

import glob
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.transform import Rotation, Slerp

from lidar_probe_init.exceptions import (
    EmptyReconstructionError,
    FrameError,
    InvalidConfigurationError,
    OutOfRangeError,
    RejectedInputError,
)
from lidar_probe_init.formats import (
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
    PointCloud,
    PolarScan,
    RigidTransform,
    scan_to_points,
    sector_filter,
)

logger = logging.getLogger(__name__)

DEFAULT_SECTOR = (3.0 * math.pi / 4.0, 5.0 * math.pi / 4.0)


@dataclass
class ReconstructionConfig:
    """
    Attributes:
        sector: Beam sector overriding the one stored with each sweep.
    """

    sector: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        if self.sector is not None:
            lo, hi = float(self.sector[0]), float(self.sector[1])
            if not (0.0 <= lo < hi < 2.0 * math.pi):
                logger.error(f"Invalid reconstruction sector {self.sector}")
                raise InvalidConfigurationError("sector must satisfy 0 <= lo < hi < 2π")
            self.sector = (lo, hi)


class SweepTrajectory:
    """
    Tool poses along one sweep.

    Attributes:
        times: Strictly increasing waypoint timestamps, seconds.
        poses: Tool-to-base transform at each waypoint.
        clearance: Safety clearance d_safe above the surface, meters.
        sector: Beam sector reported during the sweep.
    """

    def __init__(
        self,
        waypoints: Sequence[Tuple[float, RigidTransform]],
        clearance: float,
        sector: Tuple[float, float] = DEFAULT_SECTOR,
    ):
        if len(waypoints) < 1:
            raise RejectedInputError("A trajectory needs at least one waypoint")
        times = np.array([t for t, _ in waypoints], dtype=float)
        if np.any(np.diff(times) <= 0):
            logger.error("Trajectory timestamps are not strictly increasing")
            raise RejectedInputError("Waypoint timestamps must be strictly increasing")
        if not clearance > 0:
            raise RejectedInputError(f"Clearance must be positive, got {clearance}")
        for _, pose in waypoints:
            if pose.from_frame != TCP or pose.to_frame != BASE:
                raise FrameError("Waypoints must map tcp -> base")
        self.times = times
        self.poses = [pose for _, pose in waypoints]
        self.clearance = float(clearance)
        self.sector = (float(sector[0]), float(sector[1]))
        self._rotations = np.stack([p.rotation for p in self.poses])
        self._translations = np.stack([p.translation for p in self.poses])
        self._slerp = (
            Slerp(times, Rotation.from_matrix(self._rotations))
            if len(times) > 1
            else None
        )

    @property
    def waypoints(self) -> List[Tuple[float, RigidTransform]]:
        return list(zip(self.times.tolist(), self.poses))

    @property
    def span(self) -> Tuple[float, float]:
        return float(self.times[0]), float(self.times[-1])

    def poses_at(self, times: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """
        Vectorized interpolation.

        Returns:
            (rotations M×3×3, translations M×3).

        Raises:
            OutOfRangeError: If any time lies outside the waypoint span.
        """
        times = np.asarray(times, dtype=float).reshape(-1)
        lo, hi = self.span
        if times.size and (times.min() < lo or times.max() > hi):
            logger.error(
                f"Requested times [{times.min()}, {times.max()}] outside [{lo}, {hi}]"
            )
            raise OutOfRangeError(f"Time outside trajectory span [{lo}, {hi}]")
        if self._slerp is None:
            return (
                np.repeat(self._rotations, times.size, axis=0),
                np.repeat(self._translations, times.size, axis=0),
            )
        rotations = self._slerp(times).as_matrix()
        translations = np.column_stack(
            [np.interp(times, self.times, self._translations[:, i]) for i in range(3)]
        )
        exact = np.searchsorted(self.times, times)
        exact = np.minimum(exact, self.times.size - 1)
        hit = self.times[exact] == times
        rotations[hit] = self._rotations[exact[hit]]
        translations[hit] = self._translations[exact[hit]]
        return rotations, translations


@dataclass
class SweepRecording:
    """
    Attributes:
        trajectory: Tool poses during the sweep.
        scans: Time-ordered scans.
    """

    trajectory: SweepTrajectory
    scans: List[PolarScan]

    def __post_init__(self):
        lo, hi = self.trajectory.span
        for scan in self.scans:
            if scan.scan_timestamp < lo or scan.scan_timestamp > hi:
                logger.error(f"Scan at {scan.scan_timestamp} outside [{lo}, {hi}]")
                raise OutOfRangeError("Scan timestamp outside trajectory span")
            kept = sector_filter(scan, *self.trajectory.sector)
            stamps = kept.timestamps[kept.valid]
            if stamps.size and (stamps.min() < lo or stamps.max() > hi):
                logger.error(
                    f"Scan at {scan.scan_timestamp} has samples in "
                    f"[{stamps.min()}, {stamps.max()}], outside [{lo}, {hi}]"
                )
                raise OutOfRangeError("Sample timestamps outside trajectory span")


def interpolate_pose(trajectory: SweepTrajectory, t: float) -> RigidTransform:
    """
    Tool pose at time ``t``.

    A waypoint time returns that waypoint's pose object unchanged.

    Raises:
        OutOfRangeError: If ``t`` lies outside the trajectory.
    """
    index = int(np.searchsorted(trajectory.times, t))
    if index < trajectory.times.size and trajectory.times[index] == t:
        return trajectory.poses[index]
    rotations, translations = trajectory.poses_at(np.array([t]))
    return RigidTransform(rotations[0], translations[0], TCP, BASE)


def _recording_points(
    recording: SweepRecording, extrinsics: RigidTransform, sector: Tuple[float, float]
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    points, times, angles = [], [], []
    for scan in recording.scans:
        kept = sector_filter(scan, *sector)
        xyz, index = scan_to_points(kept)
        points.append(xyz)
        times.append(kept.timestamps[index])
        angles.append(kept.angles[index])
    if not points:
        return np.zeros((0, 3)), np.zeros(0), np.zeros(0)
    lidar = np.concatenate(points)
    stamps = np.concatenate(times)
    tool = extrinsics.apply(lidar)
    rotations, translations = recording.trajectory.poses_at(stamps)
    base = np.einsum("mij,mj->mi", rotations, tool) + translations
    return base, stamps, np.concatenate(angles)


def accumulate_sweeps(
    recordings: Sequence[SweepRecording],
    extrinsics: RigidTransform,
    cfg: Optional[ReconstructionConfig] = None,
    threads: int = 1,
) -> PointCloud:
    """
    Union of all sweeps in the base frame.

    Points are sorted by (timestamp, beam angle, x, y, z) so the result does
    not depend on sweep order or worker count.

    Args:
        recordings: Sweeps to accumulate.
        extrinsics: Scanner-to-tool transform.
        cfg: Optional sector override.
        threads: Worker cap, one sweep per task.

    Raises:
        FrameError: If ``extrinsics`` does not map lidar -> tcp.
        EmptyReconstructionError: If no valid sample survives.
    """
    cfg = cfg or ReconstructionConfig()
    if extrinsics.from_frame != LIDAR or extrinsics.to_frame != TCP:
        logger.error(f"Extrinsics map {extrinsics.from_frame}->{extrinsics.to_frame}")
        raise FrameError("Extrinsics must map lidar -> tcp")
    if not recordings:
        raise EmptyReconstructionError("No recordings given")

    def work(recording: SweepRecording):
        return _recording_points(
            recording, extrinsics, cfg.sector or recording.trajectory.sector
        )

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        parts = list(pool.map(work, recordings))
    points = np.concatenate([p for p, _, _ in parts])
    if points.shape[0] == 0:
        logger.error("Sweeps produced no valid samples")
        raise EmptyReconstructionError("No valid samples in any sweep")
    stamps = np.concatenate([s for _, s, _ in parts])
    angles = np.concatenate([a for _, _, a in parts])
    order = np.lexsort((points[:, 2], points[:, 1], points[:, 0], angles, stamps))
    logger.info(f"Accumulated {points.shape[0]} points from {len(recordings)} sweeps")
    return PointCloud(points[order], BASE)


def mean_sensor_origin(
    recordings: Sequence[SweepRecording], extrinsics: RigidTransform
) -> np.ndarray:
    """Average scanner position in the base frame over all scan start times."""
    origins = []
    for recording in recordings:
        stamps = np.array([s.scan_timestamp for s in recording.scans], dtype=float)
        if stamps.size == 0:
            stamps = recording.trajectory.times
        rotations, translations = recording.trajectory.poses_at(stamps)
        origins.append(rotations @ extrinsics.translation + translations)
    if not origins:
        raise EmptyReconstructionError("No recordings given")
    return np.concatenate(origins).mean(axis=0)


def write_recording(directory: str, recording: SweepRecording) -> None:
    """Write ``trajectory.csv``, ``scans.csv`` and ``sweep.json``."""
    os.makedirs(directory, exist_ok=True)
    write_pose_log(os.path.join(directory, "trajectory.csv"), recording.trajectory.waypoints)
    write_scan_log(os.path.join(directory, "scans.csv"), recording.scans)
    write_json(
        os.path.join(directory, "sweep.json"),
        {
            "clearance_m": recording.trajectory.clearance,
            "sector": list(recording.trajectory.sector),
        },
    )


def read_recording(directory: str) -> SweepRecording:
    meta_path = os.path.join(directory, "sweep.json")
    meta: Dict = read_json(meta_path) if os.path.isfile(meta_path) else {}
    trajectory = SweepTrajectory(
        read_pose_log(os.path.join(directory, "trajectory.csv")),
        clearance=float(meta.get("clearance_m", 0.15)),
        sector=tuple(meta.get("sector", DEFAULT_SECTOR)),
    )
    return SweepRecording(trajectory, read_scan_log(os.path.join(directory, "scans.csv")))


def read_recordings(directory: str) -> List[SweepRecording]:
    """Read every ``sweep_*`` subdirectory in name order."""
    folders = sorted(glob.glob(os.path.join(directory, "sweep_*")))
    if not folders:
        logger.error(f"No sweep_* directories under {directory}")
        raise RejectedInputError(f"No sweep recordings found in {directory}")
    return [read_recording(folder) for folder in folders]
