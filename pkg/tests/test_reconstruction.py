# lidar-probe-init/tests/test_reconstruction.py
import math
import os
import tempfile
import unittest

import numpy as np
from scipy.spatial.transform import Rotation

from lidar_probe_init.exceptions import (
    EmptyReconstructionError,
    FrameError,
    InvalidConfigurationError,
    OutOfRangeError,
    RejectedInputError,
)
from lidar_probe_init.geometry import BASE, TCP, PolarScan, RigidTransform
from lidar_probe_init.reconstruction import (
    ReconstructionConfig,
    SweepRecording,
    SweepTrajectory,
    accumulate_sweeps,
    interpolate_pose,
    mean_sensor_origin,
    read_recordings,
    write_recording,
)
from lidar_probe_init.simulation import default_true_extrinsics

PERIOD = 0.1
DOWN = Rotation.from_euler("x", 180, degrees=True).as_matrix()


def linear_trajectory(y0, y1, x=0.0, height=0.3):
    return SweepTrajectory(
        [
            (0.0, RigidTransform(DOWN, [x, y0, height], TCP, BASE)),
            (1.0, RigidTransform(DOWN, [x, y1, height], TCP, BASE)),
        ],
        clearance=0.15,
    )


def floor_recording(trajectory, extrinsics, invalid=False):
    """Scans of the floor z = 0, each beam timed at its own angle."""
    angles = np.arange(3 * math.pi / 4, 5 * math.pi / 4, math.radians(0.72))
    beams = np.column_stack([np.cos(angles), np.sin(angles), np.zeros_like(angles)])
    scans = []
    for t_scan in np.arange(0.0, 0.95, 0.1):
        stamps = t_scan + angles / (2 * math.pi) * PERIOD
        rotations, translations = trajectory.poses_at(stamps)
        origins = np.einsum("mij,j->mi", rotations, extrinsics.translation) + translations
        directions = np.einsum("mij,mj->mi", rotations @ extrinsics.rotation, beams)
        ranges = -origins[:, 2] / directions[:, 2]
        valid = np.zeros(angles.size, bool) if invalid else np.ones(angles.size, bool)
        scans.append(PolarScan.from_revolution(t_scan, angles, ranges, valid, PERIOD))
    return SweepRecording(trajectory, scans)


class TestTrajectory(unittest.TestCase):
    def setUp(self):
        self.start = RigidTransform(np.eye(3), [0, 0, 0], TCP, BASE)
        self.end = RigidTransform(
            Rotation.from_euler("z", 90, degrees=True).as_matrix(), [1, 2, 3], TCP, BASE
        )
        self.trajectory = SweepTrajectory([(0.0, self.start), (2.0, self.end)], 0.15)

    def test_waypoint_returns_same_pose(self):
        self.assertIs(interpolate_pose(self.trajectory, 0.0), self.start)
        self.assertIs(interpolate_pose(self.trajectory, 2.0), self.end)

    def test_midpoint_is_linear_and_slerped(self):
        pose = interpolate_pose(self.trajectory, 1.0)
        np.testing.assert_allclose(pose.translation, [0.5, 1.0, 1.5])
        expected = Rotation.from_euler("z", 45, degrees=True).as_matrix()
        np.testing.assert_allclose(pose.rotation, expected, atol=1e-12)

    def test_outside_span(self):
        for t in (-0.01, 2.01):
            with self.subTest(t=t):
                with self.assertRaises(OutOfRangeError):
                    interpolate_pose(self.trajectory, t)

    def test_rejects_bad_waypoints(self):
        with self.assertRaises(RejectedInputError):
            SweepTrajectory([(1.0, self.start), (1.0, self.end)], 0.15)
        with self.assertRaises(RejectedInputError):
            SweepTrajectory([(0.0, self.start)], 0.0)
        with self.assertRaises(FrameError):
            SweepTrajectory([(0.0, self.start.inverse())], 0.15)

    def test_scan_outside_span_is_rejected(self):
        scan = PolarScan([3.0], [1.0], scan_timestamp=5.0)
        with self.assertRaises(OutOfRangeError):
            SweepRecording(self.trajectory, [scan])

    def test_samples_past_the_last_waypoint_are_rejected(self):
        angles = np.arange(3 * math.pi / 4, 5 * math.pi / 4, math.radians(0.72))
        late = PolarScan.from_revolution(1.96, angles, np.ones(angles.size), None, PERIOD)
        with self.assertRaises(OutOfRangeError):
            SweepRecording(self.trajectory, [late])
        outside = PolarScan.from_revolution(1.96, [6.0, 6.2], [1.0, 1.0], None, PERIOD)
        self.assertEqual(len(SweepRecording(self.trajectory, [outside]).scans), 1)


class TestAccumulation(unittest.TestCase):
    def setUp(self):
        self.extrinsics = default_true_extrinsics()
        self.first = floor_recording(linear_trajectory(-0.1, 0.1), self.extrinsics)
        self.second = floor_recording(linear_trajectory(0.1, -0.1, x=0.05), self.extrinsics)

    def test_points_land_on_the_floor(self):
        cloud = accumulate_sweeps([self.first], self.extrinsics)
        self.assertEqual(cloud.frame, BASE)
        self.assertEqual(len(cloud), sum(s.valid_count for s in self.first.scans))
        np.testing.assert_allclose(cloud.points[:, 2], 0.0, atol=1e-12)

    def test_order_and_threads_do_not_matter(self):
        a = accumulate_sweeps([self.first, self.second], self.extrinsics, threads=1)
        b = accumulate_sweeps([self.second, self.first], self.extrinsics, threads=2)
        np.testing.assert_array_equal(a.points, b.points)

    def test_base_frame_change_moves_the_cloud_rigidly(self):
        change = RigidTransform(
            Rotation.from_euler("zyx", [35, -10, 20], degrees=True).as_matrix(),
            [0.4, -0.2, 0.1],
            BASE,
            BASE,
        )
        trajectory = self.first.trajectory
        moved = SweepTrajectory(
            [(t, change @ pose) for t, pose in trajectory.waypoints],
            trajectory.clearance,
            trajectory.sector,
        )
        original = accumulate_sweeps([self.first], self.extrinsics)
        shifted = accumulate_sweeps([SweepRecording(moved, self.first.scans)], self.extrinsics)
        np.testing.assert_allclose(shifted.points, change.apply(original.points), atol=1e-9)

    def test_distance_to_sensor_equals_range(self):
        cloud = accumulate_sweeps([self.first], self.extrinsics)
        stamps = np.concatenate([s.timestamps[s.valid] for s in self.first.scans])
        ranges = np.concatenate([s.ranges[s.valid] for s in self.first.scans])
        order = np.argsort(stamps, kind="stable")
        rotations, translations = self.first.trajectory.poses_at(stamps[order])
        origins = rotations @ self.extrinsics.translation + translations
        distances = np.linalg.norm(cloud.points - origins, axis=1)
        np.testing.assert_allclose(distances, ranges[order], atol=1e-9)

    def test_wrong_extrinsics_frames(self):
        with self.assertRaises(FrameError):
            accumulate_sweeps([self.first], self.extrinsics.inverse())

    def test_no_valid_samples(self):
        empty = floor_recording(linear_trajectory(-0.1, 0.1), self.extrinsics, invalid=True)
        with self.assertRaises(EmptyReconstructionError):
            accumulate_sweeps([empty], self.extrinsics)
        with self.assertRaises(EmptyReconstructionError):
            accumulate_sweeps([], self.extrinsics)

    def test_sector_override(self):
        narrow = ReconstructionConfig(sector=(math.pi - 0.1, math.pi + 0.1))
        full = accumulate_sweeps([self.first], self.extrinsics)
        kept = accumulate_sweeps([self.first], self.extrinsics, narrow)
        self.assertLess(len(kept), len(full))
        with self.assertRaises(InvalidConfigurationError):
            ReconstructionConfig(sector=(1.0, 0.5))

    def test_mean_sensor_origin(self):
        origin = mean_sensor_origin([self.first], self.extrinsics)
        expected_z = 0.3 + (DOWN @ self.extrinsics.translation)[2]
        self.assertAlmostEqual(origin[2], expected_z, places=12)
        self.assertAlmostEqual(origin[0], (DOWN @ self.extrinsics.translation)[0], places=12)

    def test_recordings_round_trip(self):
        with tempfile.TemporaryDirectory() as tmp:
            write_recording(os.path.join(tmp, "sweep_00"), self.first)
            write_recording(os.path.join(tmp, "sweep_01"), self.second)
            loaded = read_recordings(tmp)
            self.assertEqual(len(loaded), 2)
            a = accumulate_sweeps([self.first, self.second], self.extrinsics)
            b = accumulate_sweeps(loaded, self.extrinsics)
            np.testing.assert_allclose(a.points, b.points, atol=1e-12)
            with self.assertRaises(RejectedInputError):
                read_recordings(os.path.join(tmp, "sweep_00"))


if __name__ == "__main__":
    unittest.main()
