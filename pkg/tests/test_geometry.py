# lidar-probe-init/tests/test_geometry.py
import math
import unittest

import numpy as np

from lidar_probe_init.exceptions import FrameError, RejectedInputError, TooFewPointsError
from lidar_probe_init.geometry import (
    BASE,
    LIDAR,
    TCP,
    FrameId,
    NeighborIndex,
    Plane,
    PointCloud,
    PolarSample,
    PolarScan,
    RigidTransform,
    RotationVector,
    compose,
    fit_plane,
    normalize_angles,
    plane_signed_distance,
    polar_to_cartesian,
    right_jacobian,
    scan_to_points,
    sector_filter,
    skew,
    squared_distances,
    transform_point,
)


def brute_force_knn(points, query, k):
    d2 = squared_distances(points, query)
    order = np.lexsort((np.arange(len(points)), d2))[:k]
    return np.sqrt(d2[order]), order


class TestTransforms(unittest.TestCase):
    def setUp(self):
        self.a = RigidTransform.from_rotvec([0.1, -0.2, 0.3], [1.0, 2.0, 3.0], TCP, BASE)
        self.b = RigidTransform.from_rotvec([-0.4, 0.0, 0.25], [0.04, -0.01, -0.09], LIDAR, TCP)

    def test_translation_only(self):
        t = RigidTransform(np.eye(3), [1, 2, 3], LIDAR, TCP)
        np.testing.assert_allclose(t.apply([0, 0, 0]), [1, 2, 3])

    def test_rotation_about_z(self):
        rz = RigidTransform.from_rotvec([0, 0, math.pi / 2], [0, 0, 0], LIDAR, TCP)
        np.testing.assert_allclose(rz.apply([1, 0, 0]), [0, 1, 0], atol=1e-12)

    def test_compose_applies_right_first(self):
        chained = compose(self.a, self.b)
        self.assertEqual(chained.from_frame, LIDAR)
        self.assertEqual(chained.to_frame, BASE)
        p = np.array([0.3, -0.7, 0.2])
        np.testing.assert_allclose(chained.apply(p), self.a.apply(self.b.apply(p)), atol=1e-12)
        np.testing.assert_allclose((self.a @ self.b).as_matrix(), chained.as_matrix())

    def test_compose_rejects_broken_chain(self):
        with self.assertRaises(FrameError):
            compose(self.b, self.a)

    def test_inverse_round_trip(self):
        p = np.array([0.5, 0.1, -0.2])
        np.testing.assert_allclose(self.a.inverse().apply(self.a.apply(p)), p, atol=1e-12)
        identity = compose(self.a.inverse(), self.a)
        np.testing.assert_allclose(identity.as_matrix(), np.eye(4), atol=1e-12)

    def test_rejects_non_orthonormal_rotation(self):
        with self.assertRaises(RejectedInputError):
            RigidTransform(np.diag([1.0, 1.0, 1.01]), np.zeros(3), LIDAR, TCP)
        with self.assertRaises(RejectedInputError):
            RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3), LIDAR, TCP)

    def test_quaternion_is_scalar_last_with_positive_w(self):
        q = self.a.as_quaternion()
        self.assertGreaterEqual(q[3], 0.0)
        rebuilt = RigidTransform.from_quaternion(-q, self.a.translation, TCP, BASE)
        np.testing.assert_allclose(rebuilt.rotation, self.a.rotation, atol=1e-12)

    def test_rotation_vector_round_trip(self):
        omega = np.array([0.2, -0.1, 0.05])
        r = RotationVector(omega)
        np.testing.assert_allclose(RotationVector.from_matrix(r.as_matrix()).omega, omega)
        self.assertAlmostEqual(r.angle, float(np.linalg.norm(omega)))

    def test_transform_point_checks_frame(self):
        cloud = PointCloud(np.zeros((2, 3)), LIDAR)
        moved = transform_point(self.b, cloud)
        self.assertEqual(moved.frame, TCP)
        with self.assertRaises(FrameError):
            transform_point(self.a, cloud)
        with self.assertRaises(FrameError):
            transform_point(self.a, np.zeros(3), LIDAR)

    def test_frame_name_must_be_non_empty(self):
        with self.assertRaises(RejectedInputError):
            FrameId("")


class TestRightJacobian(unittest.TestCase):
    def test_matches_finite_difference(self):
        omega = np.array([0.3, -0.5, 0.2])
        base = RotationVector(omega).as_matrix()
        jr = right_jacobian(omega)
        for axis in range(3):
            with self.subTest(axis=axis):
                delta = np.zeros(3)
                delta[axis] = 1e-6
                perturbed = RotationVector(omega + delta).as_matrix()
                local = RotationVector.from_matrix(base.T @ perturbed).omega / 1e-6
                np.testing.assert_allclose(local, jr[:, axis], atol=1e-5)

    def test_identity_near_zero(self):
        np.testing.assert_allclose(right_jacobian(np.zeros(3)), np.eye(3))

    def test_skew_is_cross_product(self):
        a, b = np.array([1.0, 2.0, 3.0]), np.array([-2.0, 0.5, 4.0])
        np.testing.assert_allclose(skew(a) @ b, np.cross(a, b))


class TestPlane(unittest.TestCase):
    def test_signed_distance(self):
        plane = Plane([0, 0, 1], -0.5)
        self.assertAlmostEqual(float(plane_signed_distance(plane, np.array([0, 0, 1.0]))), 0.5)
        self.assertAlmostEqual(float(plane.signed_distance(np.array([3, 4, 0.5]))), 0.0)

    def test_normal_must_be_unit(self):
        with self.assertRaises(RejectedInputError):
            Plane([0, 0, 2], 0.0)
        self.assertAlmostEqual(float(np.linalg.norm(Plane.from_vector([0, 0, 2], 0).normal)), 1.0)

    def test_fit_plane(self):
        rng = np.random.default_rng(3)
        xy = rng.uniform(-1, 1, (50, 2))
        points = np.column_stack([xy, 0.2 * xy[:, 0] - 0.1 * xy[:, 1] + 0.3])
        plane = fit_plane(points)
        np.testing.assert_allclose(plane.signed_distance(points), 0.0, atol=1e-12)
        with self.assertRaises(TooFewPointsError):
            fit_plane(points[:2])


class TestPolarScan(unittest.TestCase):
    def test_cartesian_conversion(self):
        np.testing.assert_allclose(
            polar_to_cartesian(PolarSample(2.0, math.pi / 2)), [0.0, 2.0, 0.0], atol=1e-12
        )
        with self.assertRaises(RejectedInputError):
            polar_to_cartesian(PolarSample(1.0, 0.0, valid=False))

    def test_angles_wrap_into_range(self):
        self.assertAlmostEqual(float(normalize_angles(-math.pi / 2)), 3 * math.pi / 2)
        self.assertEqual(float(normalize_angles(2 * math.pi)), 0.0)

    def test_invalid_samples_have_zero_range(self):
        scan = PolarScan([0.1, 0.2, 0.3], [1.0, 2.0, 3.0], [True, False, True])
        self.assertEqual(scan.ranges[1], 0.0)
        self.assertEqual(scan.valid_count, 2)
        points, index = scan_to_points(scan)
        self.assertEqual(points.shape, (2, 3))
        np.testing.assert_array_equal(index, [0, 2])

    def test_angles_must_increase(self):
        with self.assertRaises(RejectedInputError):
            PolarScan([0.2, 0.1], [1.0, 1.0])

    def test_sector_filter(self):
        angles = np.linspace(0.0, 6.0, 61)
        scan = PolarScan(angles, np.ones_like(angles))
        kept = sector_filter(scan, 3 * math.pi / 4, 5 * math.pi / 4)
        self.assertTrue(np.all(kept.angles >= 3 * math.pi / 4))
        self.assertTrue(np.all(kept.angles <= 5 * math.pi / 4))
        self.assertTrue(np.all(np.diff(kept.angles) > 0))
        for lo, hi in ((1.0, 1.0), (-0.1, 1.0), (1.0, 2 * math.pi)):
            with self.subTest(lo=lo, hi=hi):
                with self.assertRaises(RejectedInputError):
                    sector_filter(scan, lo, hi)

    def test_revolution_timestamps(self):
        scan = PolarScan.from_revolution(
            1.0, np.array([0.0, math.pi]), np.ones(2), np.ones(2, bool), 0.1
        )
        np.testing.assert_allclose(scan.timestamps, [1.0, 1.05])


class TestPointCloud(unittest.TestCase):
    def test_rejects_non_finite_points(self):
        with self.assertRaises(RejectedInputError):
            PointCloud(np.array([[0.0, np.nan, 0.0]]))

    def test_rejects_non_unit_normals(self):
        with self.assertRaises(RejectedInputError):
            PointCloud(np.zeros((1, 3)), BASE, np.array([[0.0, 0.0, 2.0]]))

    def test_transformed_rotates_normals(self):
        t = RigidTransform.from_rotvec([0, 0, math.pi / 2], [1, 0, 0], LIDAR, TCP)
        cloud = PointCloud([[1, 0, 0]], LIDAR, [[1, 0, 0]], [3])
        moved = cloud.transformed(t)
        np.testing.assert_allclose(moved.points, [[1, 1, 0]], atol=1e-12)
        np.testing.assert_allclose(moved.normals, [[0, 1, 0]], atol=1e-12)
        np.testing.assert_array_equal(moved.labels, [3])

    def test_concatenate_requires_one_frame(self):
        a = PointCloud(np.zeros((1, 3)), BASE)
        b = PointCloud(np.ones((1, 3)), TCP)
        self.assertEqual(len(PointCloud.concatenate([a, a])), 2)
        with self.assertRaises(FrameError):
            PointCloud.concatenate([a, b])

    def test_arrays_are_read_only(self):
        cloud = PointCloud(np.zeros((2, 3)))
        with self.assertRaises(ValueError):
            cloud.points[0, 0] = 1.0


class TestNeighborIndex(unittest.TestCase):
    def setUp(self):
        rng = np.random.default_rng(11)
        self.points = rng.uniform(-1.0, 1.0, (400, 3))
        self.index = NeighborIndex(self.points)

    def test_knn_matches_brute_force(self):
        rng = np.random.default_rng(12)
        for query in rng.uniform(-1.0, 1.0, (20, 3)):
            for k in (1, 7, 30):
                with self.subTest(k=k):
                    distances, indices = self.index.query(query, k)
                    expected_d, expected_i = brute_force_knn(self.points, query, k)
                    np.testing.assert_array_equal(indices, expected_i)
                    np.testing.assert_allclose(distances, expected_d)

    def test_k_larger_than_cloud(self):
        distances, indices = NeighborIndex(self.points[:5]).query(np.zeros(3), 10)
        self.assertEqual(len(indices), 5)
        self.assertTrue(np.all(np.diff(distances) >= 0))

    def test_ties_break_by_index(self):
        grid = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1]], float)
        _, indices = NeighborIndex(grid).query(np.zeros(3), 3)
        np.testing.assert_array_equal(indices, [0, 1, 2])

    def test_radius_matches_brute_force(self):
        query = np.array([0.1, -0.2, 0.3])
        found = self.index.radius(query, 0.4)
        d2 = squared_distances(self.points, query)
        expected = np.flatnonzero(d2 <= 0.16)
        self.assertEqual(sorted(found.tolist()), expected.tolist())
        self.assertTrue(np.all(np.diff(d2[found]) >= 0))
        batch = self.index.radius_batch(query[None, :], 0.4)
        np.testing.assert_array_equal(batch[0], found)
        self.assertEqual(int(self.index.count_within(query[None, :], 0.4)[0]), len(found))

    def test_rejects_non_positive_k(self):
        with self.assertRaises(RejectedInputError):
            self.index.query(np.zeros(3), 0)


if __name__ == "__main__":
    unittest.main()
