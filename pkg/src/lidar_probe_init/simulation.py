# lidar-probe-init/src/lidar_probe_init/simulation.py
"""
Synthetic scanner, robot and mannequin.

The simulator casts the beams of a 2D scanner rigidly mounted on a robot
tool against a phantom mesh and writes the same datasets the real rig
produces, plus the ground truth they are evaluated against.

Beams are intersected with the Möller-Trumbore test. Every beam lies in
its scan plane, so only triangles straddling that plane can be hit; the
culling is exact and the nearest hit (lowest face index on ties) matches
an all-triangle search.

Noise is drawn from counter-based streams addressed by (seed, stream,
scan index) with one draw per beam of the full revolution, so results do
not depend on casting order or worker count.

Key components:
    - SensorModel, CalibrationPlan, SweepPlan, SimScenario: scenario types.
    - cast_rays, cast_scan, cast_moving_scan: ray casting.
    - run_calibration_session, run_sweep_session: dataset generation.
    - load_scenario: bundled scenario files.
"""

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from lidar_probe_init import __version__
from lidar_probe_init.calibration import (
    PoseScanSet,
    transform_payload,
    write_calibration_dataset,
)
from lidar_probe_init.config import from_mapping
from lidar_probe_init.exceptions import InvalidConfigurationError
from lidar_probe_init.formats import read_json, write_json, write_ply
from lidar_probe_init.geometry import (
    BASE,
    LIDAR,
    TCP,
    TWO_PI,
    PointCloud,
    PolarScan,
    RigidTransform,
)
from lidar_probe_init.phantoms import (
    Phantom,
    PhantomParams,
    build_template,
    generate_phantom,
    sample_surface,
)
from lidar_probe_init.random_generator import DROPOUT, NOISE, RandomNumberGenerator
from lidar_probe_init.reconstruction import (
    SweepRecording,
    SweepTrajectory,
    write_recording,
)
from lidar_probe_init.registration import write_template

logger = logging.getLogger(__name__)

NOMINAL_MOUNT_ROTATION_VECTOR = (0.0, math.pi / 2.0, 0.0)
NOMINAL_MOUNT_TRANSLATION = (0.04, -0.01, -0.09)
MOUNT_ERROR_ROTATION_VECTOR = (0.02, -0.015, 0.01)
MOUNT_ERROR_TRANSLATION = (0.003, -0.002, 0.004)
# Tool orientation of the sweeps: tool x along base y, tool z pointing down.
SWEEP_TOOL_ROTATION = np.array([[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, -1.0]])
SESSIONS = ("calibration", "sweep")
SLAB_EPSILON = 1e-12


def nominal_mount() -> RigidTransform:
    """Scanner-to-tool transform of the holder drawing."""
    return RigidTransform.from_rotvec(
        NOMINAL_MOUNT_ROTATION_VECTOR, NOMINAL_MOUNT_TRANSLATION, LIDAR, TCP
    )


def default_true_extrinsics() -> RigidTransform:
    """Nominal mount with a small assembly error."""
    nominal = nominal_mount()
    error = Rotation.from_rotvec(MOUNT_ERROR_ROTATION_VECTOR).as_matrix()
    return RigidTransform(
        nominal.rotation @ error,
        nominal.translation + np.array(MOUNT_ERROR_TRANSLATION),
        LIDAR,
        TCP,
    )


@dataclass
class SensorModel:
    """
    Attributes:
        angular_step: Beam spacing, radians.
        range_noise_sigma: Additive Gaussian range noise, meters.
        dropout_probability: Chance that a sample is reported invalid.
        revolution_period: Duration of one revolution, seconds.
        max_range: Hits beyond this are invalid, meters.
        sector: Reported beam sector [lo, hi], radians.
    """

    angular_step: float = math.radians(0.72)
    range_noise_sigma: float = 0.0
    dropout_probability: float = 0.0
    revolution_period: float = 0.1
    max_range: float = 10.0
    sector: Tuple[float, float] = (3.0 * math.pi / 4.0, 5.0 * math.pi / 4.0)

    def __post_init__(self):
        self.sector = (float(self.sector[0]), float(self.sector[1]))
        if not self.angular_step > 0 or not self.revolution_period > 0:
            logger.error("Sensor step and period must be positive")
            raise InvalidConfigurationError("angular_step and revolution_period must be positive")
        if self.range_noise_sigma < 0:
            raise InvalidConfigurationError("range_noise_sigma must be >= 0")
        if not 0.0 <= self.dropout_probability < 1.0:
            raise InvalidConfigurationError("dropout_probability must lie in [0, 1)")
        if not self.max_range > 0:
            raise InvalidConfigurationError("max_range must be positive")
        if not 0.0 <= self.sector[0] < self.sector[1] < TWO_PI:
            raise InvalidConfigurationError("sector must satisfy 0 <= lo < hi < 2π")

    @property
    def beams_per_revolution(self) -> int:
        return int(math.floor(TWO_PI / self.angular_step + 1e-9))

    def beams(self) -> Tuple[np.ndarray, np.ndarray]:
        """(beam indices, beam angles) inside the reported sector."""
        index = np.arange(self.beams_per_revolution)
        angles = index * self.angular_step
        mask = (angles >= self.sector[0]) & (angles <= self.sector[1])
        return index[mask], angles[mask]


def _axis_rotation(axis: str, degrees: float) -> np.ndarray:
    return Rotation.from_euler(axis, degrees, degrees=True).as_matrix()


@dataclass
class CalibrationPlan:
    """
    Static poses above the calibration board.

    Attributes:
        pose_count: Number of poses.
        tcp_height: Tool height above the board, meters.
        scans_per_pose: Revolutions recorded at each pose.
        pose_interval: Time between poses, seconds.
        diversity: Vary the orientation; False gives one orientation only.
        yaw_deg: Largest rotation about the viewing axis.
        in_plane_deg: Largest tilt within the scan plane.
        out_of_plane_deg: Largest tilt of the scan plane.
        lateral_offset: Radius of the circle the tool positions lie on.
    """

    pose_count: int = 20
    tcp_height: float = 0.2
    scans_per_pose: int = 5
    pose_interval: float = 2.0
    diversity: bool = True
    yaw_deg: float = 30.0
    in_plane_deg: float = 15.0
    out_of_plane_deg: float = 20.0
    lateral_offset: float = 0.08

    def __post_init__(self):
        if self.pose_count < 1 or self.scans_per_pose < 1:
            raise InvalidConfigurationError("pose_count and scans_per_pose must be positive")
        if not self.tcp_height > 0 or not self.pose_interval > 0:
            raise InvalidConfigurationError("tcp_height and pose_interval must be positive")

    def tcp_poses(self) -> List[RigidTransform]:
        """Tool-to-base poses looking down at the board."""
        yaw = (-1.0, -0.5, 0.0, 0.5, 1.0)
        in_plane = (-1.0, 1.0, -0.5, 0.5)
        out_of_plane = (1.0, -1.0, 0.5, -0.5)
        down = _axis_rotation("x", 180.0)
        poses = []
        for k in range(self.pose_count):
            rotation = down
            if self.diversity:
                rotation = (
                    down
                    @ _axis_rotation("z", self.yaw_deg * yaw[k % 5])
                    @ _axis_rotation("x", self.in_plane_deg * in_plane[(k // 5) % 4])
                    @ _axis_rotation("y", self.out_of_plane_deg * out_of_plane[(k + k // 5) % 4])
                )
            phase = TWO_PI * k / self.pose_count
            position = [
                self.lateral_offset * math.cos(phase),
                self.lateral_offset * math.sin(phase),
                self.tcp_height,
            ]
            poses.append(RigidTransform(rotation, position, TCP, BASE))
        return poses


@dataclass
class SweepPlan:
    """
    Linear sweeps along the base y axis.

    Attributes:
        speed: Tool speed, m/s.
        y_start: Sweep start, meters.
        y_end: Sweep end, meters.
        clearance: Tool height above the highest phantom point, meters.
        rolls_deg: Roll about the base y axis of each sweep.
        x_offsets: Lateral tool position of each sweep, meters.
        waypoint_interval: Spacing of logged waypoints, seconds.
        sweep_gap: Pause between sweeps, seconds.
    """

    speed: float = 0.02
    y_start: float = -0.2
    y_end: float = 0.2
    clearance: float = 0.15
    rolls_deg: Tuple[float, ...] = (10.0, -10.0)
    x_offsets: Tuple[float, ...] = (0.03, 0.03)
    waypoint_interval: float = 1.0
    sweep_gap: float = 5.0

    def __post_init__(self):
        self.rolls_deg = tuple(float(r) for r in self.rolls_deg)
        self.x_offsets = tuple(float(x) for x in self.x_offsets)
        if len(self.rolls_deg) != len(self.x_offsets) or not self.rolls_deg:
            raise InvalidConfigurationError("rolls_deg and x_offsets need one entry per sweep")
        if not self.speed > 0 or not self.clearance > 0 or self.y_end <= self.y_start:
            logger.error("Sweep speed, clearance and extent must be positive")
            raise InvalidConfigurationError("Invalid sweep geometry")
        if not self.waypoint_interval > 0 or self.sweep_gap < 0:
            raise InvalidConfigurationError("Invalid sweep timing")

    @property
    def duration(self) -> float:
        return (self.y_end - self.y_start) / self.speed


@dataclass
class PhantomSpec:
    kind: str = "male"
    params: PhantomParams = field(default_factory=PhantomParams)


@dataclass
class ExtrinsicsSpec:
    """Scanner-to-tool transform as a rotation vector and translation."""

    rotation_vector: Tuple[float, float, float] = tuple(  # type: ignore[assignment]
        default_true_extrinsics().rotation_vector().omega.tolist()
    )
    translation_m: Tuple[float, float, float] = tuple(  # type: ignore[assignment]
        default_true_extrinsics().translation.tolist()
    )

    def transform(self) -> RigidTransform:
        return RigidTransform.from_rotvec(self.rotation_vector, self.translation_m, LIDAR, TCP)


@dataclass
class SimScenario:
    """
    Everything that determines a simulated session.

    Attributes:
        name: Scenario identifier.
        session: "calibration" or "sweep".
        seed: Root seed of every stochastic draw.
        phantom: Phantom kind and dimensions.
        sensor: Scanner model.
        extrinsics: True scanner-to-tool transform.
        calibration: Poses of a calibration session.
        sweep: Trajectories of a sweep session.
        ground_truth_spacing: Sample spacing of the ground-truth cloud.
        templates: Also write the male and female templates.
    """

    name: str = "scenario"
    session: str = "sweep"
    seed: int = 69
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    sensor: SensorModel = field(default_factory=SensorModel)
    extrinsics: ExtrinsicsSpec = field(default_factory=ExtrinsicsSpec)
    calibration: CalibrationPlan = field(default_factory=CalibrationPlan)
    sweep: SweepPlan = field(default_factory=SweepPlan)
    ground_truth_spacing: float = 0.003
    templates: bool = True

    def __post_init__(self):
        if self.session not in SESSIONS:
            logger.error(f"Unknown session type {self.session}")
            raise InvalidConfigurationError(f"session must be one of {SESSIONS}")
        if int(self.seed) < 0:
            raise InvalidConfigurationError("seed must be non-negative")
        self._mesh: Optional[Phantom] = None

    @property
    def true_extrinsics(self) -> RigidTransform:
        return self.extrinsics.transform()

    @property
    def mesh(self) -> Phantom:
        if self._mesh is None:
            self._mesh = generate_phantom(self.phantom.kind, self.phantom.params)
        return self._mesh

    @property
    def rng(self) -> RandomNumberGenerator:
        return RandomNumberGenerator(self.seed)


def load_scenario(path: str, seed: Optional[int] = None) -> SimScenario:
    """
    Read a scenario JSON file.

    Args:
        path: Scenario file.
        seed: Replaces the file's seed when given.

    Raises:
        RejectedInputError: If the file is missing or malformed.
        InvalidConfigurationError: On unknown keys or invalid values.
    """
    mapping = read_json(path)
    if seed is not None:
        mapping = dict(mapping, seed=seed)
    scenario = from_mapping(SimScenario, mapping)
    logger.info(f"Loaded scenario {scenario.name} ({scenario.session}, seed {scenario.seed})")
    return scenario


# --- ray casting ------------------------------------------------------------


def _moller_trumbore(
    origins: np.ndarray, directions: np.ndarray, triangles: np.ndarray
) -> np.ndarray:
    """Hit distance per (ray, triangle) row, inf on a miss."""
    v0 = triangles[:, 0]
    e1 = triangles[:, 1] - v0
    e2 = triangles[:, 2] - v0
    pvec = np.cross(directions, e2)
    det = np.einsum("ij,ij->i", e1, pvec)
    ok = np.abs(det) > 1e-15
    inv = np.divide(1.0, det, out=np.zeros_like(det), where=ok)
    tvec = origins - v0
    u = np.einsum("ij,ij->i", tvec, pvec) * inv
    qvec = np.cross(tvec, e1)
    v = np.einsum("ij,ij->i", directions, qvec) * inv
    t = np.einsum("ij,ij->i", e2, qvec) * inv
    hit = ok & (u >= 0.0) & (u <= 1.0) & (v >= 0.0) & (u + v <= 1.0) & (t > 1e-9)
    return np.where(hit, t, np.inf)


def cast_rays(
    phantom: Phantom,
    origins: np.ndarray,
    directions: np.ndarray,
    plane_normals: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Nearest mesh hit of each ray.

    Args:
        phantom: Mesh.
        origins: M×3 ray origins.
        directions: M×3 unit directions.
        plane_normals: M×3 normals of planes containing each ray. Only
            triangles straddling a ray's plane are tested against it; without
            them every triangle is tested.

    Returns:
        (hit distances, inf for misses; face indices, -1 for misses).
    """
    origins = np.asarray(origins, dtype=float).reshape(-1, 3)
    directions = np.asarray(directions, dtype=float).reshape(-1, 3)
    count = origins.shape[0]
    if plane_normals is None:
        rays, faces = np.divmod(np.arange(count * phantom.face_count), phantom.face_count)
    else:
        normals = np.asarray(plane_normals, dtype=float).reshape(-1, 3)
        side = phantom.vertices @ normals.T - np.einsum("ij,ij->i", origins, normals)
        positive, negative = side > SLAB_EPSILON, side < -SLAB_EPSILON
        a, b, c = phantom.faces.T
        above = positive[a] & positive[b] & positive[c]
        below = negative[a] & negative[b] & negative[c]
        faces, rays = np.nonzero(~(above | below))
    distances = np.full(count, np.inf)
    hit_faces = np.full(count, -1, dtype=np.int64)
    if rays.size == 0:
        return distances, hit_faces
    t = _moller_trumbore(origins[rays], directions[rays], phantom.triangles()[faces])
    finite = np.isfinite(t)
    rays, faces, t = rays[finite], faces[finite], t[finite]
    order = np.lexsort((faces, t, rays))
    rays, faces, t = rays[order], faces[order], t[order]
    first = np.ones(rays.size, dtype=bool)
    first[1:] = rays[1:] != rays[:-1]
    distances[rays[first]] = t[first]
    hit_faces[rays[first]] = faces[first]
    return distances, hit_faces


def _cast_beams(
    scenario: SimScenario,
    rotations: np.ndarray,
    translations: np.ndarray,
    scan_timestamp: float,
    scan_index: int,
) -> PolarScan:
    sensor = scenario.sensor
    extrinsics = scenario.true_extrinsics
    beam_index, angles = sensor.beams()
    lidar_to_base = rotations @ extrinsics.rotation
    origins = rotations @ extrinsics.translation + translations
    local = np.column_stack([np.cos(angles), np.sin(angles), np.zeros_like(angles)])
    directions = np.einsum("mij,mj->mi", lidar_to_base, local)
    distances, _ = cast_rays(scenario.mesh, origins, directions, lidar_to_base[:, :, 2])

    valid = distances <= sensor.max_range
    ranges = np.where(valid, distances, 0.0)
    rng = scenario.rng
    full = sensor.beams_per_revolution
    if sensor.range_noise_sigma > 0:
        noise = rng.normal(NOISE, (scan_index,), full)[beam_index]
        ranges = ranges + sensor.range_noise_sigma * noise
    if sensor.dropout_probability > 0:
        valid &= rng.uniform(DROPOUT, (scan_index,), full)[beam_index] >= (
            sensor.dropout_probability
        )
    valid &= ranges > 0
    return PolarScan.from_revolution(
        scan_timestamp,
        angles,
        np.where(valid, ranges, 0.0),
        valid,
        sensor.revolution_period,
    )


def cast_scan(
    scenario: SimScenario, tcp_pose: RigidTransform, t: float, scan_index: int = 0
) -> PolarScan:
    """
    One revolution from a static tool pose.

    Args:
        scenario: Mesh, sensor and true extrinsics.
        tcp_pose: Tool-to-base pose.
        t: Revolution start time, seconds.
        scan_index: Counter of the noise streams.
    """
    count = scenario.sensor.beams()[0].size
    return _cast_beams(
        scenario,
        np.repeat(tcp_pose.rotation[None], count, axis=0),
        np.repeat(tcp_pose.translation[None], count, axis=0),
        t,
        scan_index,
    )


def cast_moving_scan(
    scenario: SimScenario, trajectory: SweepTrajectory, t: float, scan_index: int
) -> PolarScan:
    """One revolution with every beam cast from the tool pose at its own time."""
    sensor = scenario.sensor
    _, angles = sensor.beams()
    stamps = t + angles / TWO_PI * sensor.revolution_period
    rotations, translations = trajectory.poses_at(stamps)
    return _cast_beams(scenario, rotations, translations, t, scan_index)


# --- sessions ---------------------------------------------------------------


def _truth_payload(scenario: SimScenario) -> Dict[str, Any]:
    return {
        "scenario": scenario.name,
        "seed": scenario.seed,
        "extrinsics": transform_payload(scenario.true_extrinsics),
        "phantom": {"kind": scenario.phantom.kind, "params": asdict(scenario.phantom.params)},
        "sensor": asdict(scenario.sensor),
        "version": __version__,
    }


@dataclass(eq=False)
class CalibrationSession:
    data: List[PoseScanSet]
    session: Dict[str, Any]
    truth: Dict[str, Any]


def run_calibration_session(
    scenario: SimScenario, out_dir: Optional[str] = None, threads: int = 1
) -> CalibrationSession:
    """
    Static scans of the board from every planned pose.

    Writes ``poses.csv``, ``scans/pose_XXX.csv``, ``session.json`` and
    ``truth.json`` to ``out_dir`` when given.
    """
    plan = scenario.calibration
    period = scenario.sensor.revolution_period
    poses = plan.tcp_poses()
    logger.info(f"Simulating calibration session with {len(poses)} poses")

    def capture(k: int) -> PoseScanSet:
        scans = [
            cast_scan(
                scenario, poses[k], k * plan.pose_interval + j * period, k * 1000 + j
            )
            for j in range(plan.scans_per_pose)
        ]
        return PoseScanSet(k, poses[k], tuple(scans))

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        data = list(pool.map(capture, range(len(poses))))

    nominal = nominal_mount()
    session = {
        "scenario": scenario.name,
        "seed": scenario.seed,
        "sector": list(scenario.sensor.sector),
        "initial_guess": {
            "omega": nominal.rotation_vector().omega,
            "t": nominal.translation,
        },
        "range_noise_sigma_m": scenario.sensor.range_noise_sigma,
    }
    truth = _truth_payload(scenario)
    truth["plane"] = {"normal": [0.0, 0.0, 1.0], "offset_m": 0.0}
    if out_dir:
        write_calibration_dataset(out_dir, data, session)
        write_json(os.path.join(out_dir, "truth.json"), truth)
        logger.info(f"Calibration dataset written to {out_dir}")
    return CalibrationSession(data, session, truth)


def sweep_trajectories(scenario: SimScenario) -> List[SweepTrajectory]:
    """Tool trajectories of every planned sweep."""
    plan = scenario.sweep
    top = float(scenario.mesh.vertices[:, 2].max())
    height = top + plan.clearance
    duration = plan.duration
    steps = int(math.floor(duration / plan.waypoint_interval + 1e-9))
    offsets = [i * plan.waypoint_interval for i in range(steps + 1)]
    if duration - offsets[-1] > 1e-9:
        offsets.append(duration)
    trajectories = []
    for s, (roll, x) in enumerate(zip(plan.rolls_deg, plan.x_offsets)):
        start = s * (duration + plan.sweep_gap)
        rotation = _axis_rotation("y", roll) @ SWEEP_TOOL_ROTATION
        waypoints = [
            (
                start + dt,
                RigidTransform(
                    rotation, [x, plan.y_start + plan.speed * dt, height], TCP, BASE
                ),
            )
            for dt in offsets
        ]
        trajectories.append(SweepTrajectory(waypoints, plan.clearance, scenario.sensor.sector))
    return trajectories


@dataclass(eq=False)
class SweepSession:
    recordings: List[SweepRecording]
    ground_truth: PointCloud
    truth: Dict[str, Any]


def run_sweep_session(
    scenario: SimScenario, out_dir: Optional[str] = None, threads: int = 1
) -> SweepSession:
    """
    Linear sweeps over the phantom plus its labeled ground truth.

    Writes ``sweep_XX/`` recordings, ``ground_truth.ply``, ``truth.json``
    and, for scenarios with templates, ``templates/<sex>/`` to ``out_dir``
    when given.
    """
    period = scenario.sensor.revolution_period
    recordings = []
    for s, trajectory in enumerate(sweep_trajectories(scenario)):
        first, last = trajectory.span
        count = int(math.floor((last - first) / period + 1e-9))
        starts = [first + j * period for j in range(count)]
        logger.info(f"Sweep {s}: casting {len(starts)} scans")

        def capture(j: int, trajectory=trajectory, s=s, starts=starts) -> PolarScan:
            return cast_moving_scan(scenario, trajectory, starts[j], 10000 * (s + 1) + j)

        with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
            scans = list(pool.map(capture, range(len(starts))))
        recordings.append(SweepRecording(trajectory, scans))

    mesh = scenario.mesh
    ground_truth = sample_surface(mesh, scenario.ground_truth_spacing, scenario.rng)
    truth = _truth_payload(scenario)
    if mesh.marker_apex is not None:
        truth["marker_apex_m"] = mesh.marker_apex
        truth["marker_center_m"] = mesh.marker_center
    if mesh.surface is not None:
        params = scenario.phantom.params
        truth["probe_point_m"] = mesh.surface.point(params.marker_u, params.marker_v)

    if out_dir:
        for s, recording in enumerate(recordings):
            write_recording(os.path.join(out_dir, f"sweep_{s:02d}"), recording)
        write_ply(os.path.join(out_dir, "ground_truth.ply"), ground_truth)
        write_json(os.path.join(out_dir, "truth.json"), truth)
        if scenario.templates:
            for sex in ("male", "female"):
                write_template(
                    os.path.join(out_dir, "templates", sex), build_template(sex)
                )
        logger.info(f"Sweep dataset written to {out_dir}")
    return SweepSession(recordings, ground_truth, truth)


def run_scenario(scenario: SimScenario, out_dir: str, threads: int = 1) -> Dict[str, Any]:
    """Run the scenario's session and return its truth record."""
    if scenario.session == "calibration":
        return run_calibration_session(scenario, out_dir, threads).truth
    return run_sweep_session(scenario, out_dir, threads).truth

