# lidar-probe-init/tests/test_registration.py
import json
import math
import tempfile
import unittest

import numpy as np
from scipy.spatial.transform import Rotation

from lidar_probe_init.exceptions import (
    InvalidConfigurationError,
    MissingNormalsError,
    RejectedInputError,
    TooFewPointsError,
)
from lidar_probe_init.formats import dumps_json
from lidar_probe_init.geometry import (
    BASE,
    TEMPLATE,
    PointCloud,
    RigidTransform,
    RotationVector,
    squared_distances,
)
from lidar_probe_init.phantoms import build_template
from lidar_probe_init.registration import (
    FPFH_BINS,
    ProbePose,
    RegistrationConfig,
    RegistrationOutcome,
    TemplateModel,
    align_clouds,
    compute_fpfh,
    estimate_probe_pose,
    evaluate_fitness,
    fast_global_registration,
    icp_refine,
    match_with_scale_loop,
    prepare_features,
    probe_orientation,
    probe_pose_report,
    read_template,
    scale_template,
    transfer_probe_point,
    write_template,
)


def moved(cloud, transform):
    return PointCloud(
        transform.apply(cloud.points), BASE, cloud.normals @ transform.rotation.T
    )


def rotation_error_deg(a, b):
    return np.degrees(RotationVector.from_matrix(a.T @ b).angle)


class TestTemplate(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.template = build_template("male", spacing=0.008)

    def test_probe_point_must_touch_the_surface(self):
        with self.assertRaises(RejectedInputError):
            TemplateModel(self.template.cloud, self.template.probe_point + [0, 0, 0.05], "male", "t")

    def test_template_needs_normals_and_known_sex(self):
        with self.assertRaises(MissingNormalsError):
            TemplateModel(
                PointCloud(self.template.cloud.points, TEMPLATE), self.template.probe_point, "male", "t"
            )
        with self.assertRaises(RejectedInputError):
            TemplateModel(self.template.cloud, self.template.probe_point, "other", "t")

    def test_scale_about_centroid(self):
        variant = scale_template(self.template, 1.2)
        center = self.template.cloud.centroid()
        np.testing.assert_allclose(variant.cloud.centroid(), center, atol=1e-12)
        np.testing.assert_allclose(
            variant.probe_point - center, 1.2 * (self.template.probe_point - center)
        )
        np.testing.assert_array_equal(variant.cloud.normals, self.template.cloud.normals)
        with self.assertRaises(RejectedInputError):
            scale_template(self.template, 0.0)

    def test_template_round_trip(self):
        with tempfile.TemporaryDirectory() as tmp:
            write_template(tmp, self.template)
            back = read_template(tmp)
        self.assertEqual(back.sex_variant, "male")
        self.assertEqual(back.name, self.template.name)
        np.testing.assert_array_equal(back.probe_point, self.template.probe_point)
        np.testing.assert_array_equal(back.cloud.points, self.template.cloud.points)


class TestDescriptors(unittest.TestCase):
    def setUp(self):
        self.cloud = build_template("female", spacing=0.008).cloud

    def test_blocks_are_normalized(self):
        features = compute_fpfh(self.cloud, 0.025)
        self.assertEqual(features.shape, (len(self.cloud), 3 * FPFH_BINS))
        sums = features.reshape(-1, 3, FPFH_BINS).sum(axis=2)
        np.testing.assert_allclose(sums, 200.0)

    def test_rigid_motion_invariance(self):
        motion = RigidTransform.from_rotvec([0.3, -0.2, 0.9], [0.1, 0.2, -0.3], TEMPLATE, BASE)
        a = compute_fpfh(self.cloud, 0.025)
        b = compute_fpfh(moved(self.cloud, motion), 0.025)
        same = np.all(np.abs(a - b) < 1e-6, axis=1)
        self.assertGreater(np.mean(same), 0.98)

    def test_needs_normals(self):
        with self.assertRaises(MissingNormalsError):
            compute_fpfh(PointCloud(self.cloud.points), 0.025)


class TestAlignment(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.cfg = RegistrationConfig()
        cls.source = build_template("male", spacing=0.008).cloud
        cls.motion = RigidTransform(
            Rotation.from_euler("zx", [10, 3], degrees=True).as_matrix(),
            [0.02, -0.015, 0.01],
            TEMPLATE,
            BASE,
        )
        cls.target = moved(cls.source, cls.motion)

    def test_fitness_of_exact_and_far_alignment(self):
        fitness, rmse = evaluate_fitness(self.source, self.target, self.motion, 0.01)
        self.assertEqual(fitness, 1.0)
        self.assertLess(rmse, 1e-9)
        far = RigidTransform(np.eye(3), [1.0, 0, 0], TEMPLATE, BASE)
        self.assertEqual(evaluate_fitness(self.source, self.target, far, 0.01), (0.0, 0.0))

    def test_icp_from_nearby_start(self):
        start = RigidTransform(
            self.motion.rotation @ Rotation.from_euler("z", 2, degrees=True).as_matrix(),
            self.motion.translation + [0.004, -0.003, 0.002],
            TEMPLATE,
            BASE,
        )
        outcome = icp_refine(self.source, self.target, start, self.cfg, schedule=(2.0, 1.0))
        self.assertGreater(outcome.fitness, 0.99)
        np.testing.assert_allclose(outcome.transform.translation, self.motion.translation, atol=5e-4)
        self.assertLess(rotation_error_deg(outcome.transform.rotation, self.motion.rotation), 0.1)
        with self.assertRaises(MissingNormalsError):
            icp_refine(self.source, PointCloud(self.target.points), start, self.cfg)

    def test_global_alignment(self):
        outcome = align_clouds(self.source, self.target, self.cfg)
        self.assertGreater(outcome.fitness, 0.99)
        np.testing.assert_allclose(outcome.transform.translation, self.motion.translation, atol=1e-3)
        self.assertLess(rotation_error_deg(outcome.transform.rotation, self.motion.rotation), 0.2)

    def test_fitness_against_double_loop(self):
        source = self.source.select(np.arange(0, len(self.source), 13))
        target = self.target.select(np.arange(0, len(self.target), 2)[:1000])
        offset = RigidTransform(
            self.motion.rotation, self.motion.translation + [0.006, 0.0, -0.004], TEMPLATE, BASE
        )
        for transform in (self.motion, offset):
            moved_points = transform.apply(source.points)
            inliers = []
            for p in moved_points:
                best = math.inf
                for q in target.points:
                    best = min(best, float(squared_distances(p, q)))
                if math.sqrt(best) <= 0.01:
                    inliers.append(best)
            fitness, rmse = evaluate_fitness(source, target, transform, 0.01)
            self.assertEqual(fitness, len(inliers) / len(source))
            self.assertAlmostEqual(rmse, math.sqrt(sum(inliers) / len(inliers)), places=12)

    def test_moving_the_target_moves_the_alignment(self):
        change = RigidTransform(
            Rotation.from_euler("zyx", [40, 15, -10], degrees=True).as_matrix(),
            [0.3, -0.1, 0.2],
            BASE,
            BASE,
        )
        start = RigidTransform(
            self.motion.rotation @ Rotation.from_euler("z", 2, degrees=True).as_matrix(),
            self.motion.translation + [0.004, -0.003, 0.002],
            TEMPLATE,
            BASE,
        )
        outcome = align_clouds(self.source, self.target, self.cfg, False, start)
        shifted = align_clouds(
            self.source, moved(self.target, change), self.cfg, False, change @ start
        )
        expected = change @ outcome.transform
        np.testing.assert_allclose(shifted.transform.translation, expected.translation, atol=1e-3)
        self.assertLess(rotation_error_deg(shifted.transform.rotation, expected.rotation), 0.1)
        self.assertAlmostEqual(shifted.fitness, outcome.fitness, delta=1e-6)
        fitness, _ = evaluate_fitness(
            self.source, moved(self.target, change), change @ self.motion, 0.01
        )
        self.assertAlmostEqual(fitness, 1.0, delta=1e-6)

    def test_alignment_is_repeatable(self):
        a = align_clouds(self.source, self.target, self.cfg)
        b = align_clouds(self.source, self.target, self.cfg)
        np.testing.assert_array_equal(a.transform.as_matrix(), b.transform.as_matrix())


class TestGlobalRegistration(unittest.TestCase):
    def setUp(self):
        self.cfg = RegistrationConfig()
        cloud = build_template("male", spacing=0.008).cloud
        # one side only, so the surface has no mirror symmetry
        self.source = cloud.select(cloud.points[:, 0] > -0.03)
        self.motion = RigidTransform.from_rotvec(
            [0, 0, np.radians(30)], [0.05, 0.0, 0.0], TEMPLATE, BASE
        )

    def test_coarse_alignment_from_features(self):
        source = prepare_features(self.source, self.cfg)
        target = prepare_features(moved(self.source, self.motion), self.cfg)
        estimate = fast_global_registration(source, target, self.cfg)
        self.assertLess(np.linalg.norm(estimate.translation - self.motion.translation), 0.005)
        self.assertLess(rotation_error_deg(estimate.rotation, self.motion.rotation), 3.0)

    def test_needs_enough_points(self):
        tiny = prepare_features(self.source.select(np.arange(50)), self.cfg)
        with self.assertRaises(TooFewPointsError):
            fast_global_registration(tiny, tiny, self.cfg)


class TestScaleLoop(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.template = build_template("male", spacing=0.008)
        cls.motion = RigidTransform(
            Rotation.from_euler("z", 4, degrees=True).as_matrix(),
            [0.01, 0.02, 0.0],
            TEMPLATE,
            BASE,
        )
        bigger = scale_template(cls.template, 1.1)
        cls.target = moved(bigger.cloud, cls.motion)
        cls.expected_probe = cls.motion.apply(bigger.probe_point)

    def test_picks_the_matching_scale(self):
        outcome, variant = match_with_scale_loop(self.template, self.target)
        self.assertAlmostEqual(outcome.scale_used, 1.1)
        self.assertAlmostEqual(variant.scale, 1.1)
        self.assertTrue(outcome.converged)
        self.assertEqual([s for s, *_ in outcome.variant_scores][:3], [1.0, 1.1, 0.9])
        best = max(outcome.variant_scores, key=lambda row: row[3])
        self.assertAlmostEqual(best[0], 1.1)

    def test_threads_give_same_choice(self):
        a, _ = match_with_scale_loop(self.template, self.target, threads=1)
        b, _ = match_with_scale_loop(self.template, self.target, threads=3)
        self.assertEqual(a.scale_used, b.scale_used)
        np.testing.assert_array_equal(a.transform.as_matrix(), b.transform.as_matrix())

    def test_probe_pose(self):
        viewpoint = self.target.centroid() + [0, 0, 1.0]
        pose = estimate_probe_pose(self.template, self.target, viewpoint)
        self.assertLess(np.linalg.norm(pose.position - self.expected_probe), 0.01)
        self.assertTrue(np.any(np.all(self.target.points == pose.position, axis=1)))
        self.assertGreater(pose.normal[2], 0.5)
        np.testing.assert_allclose(pose.approach_direction, -pose.normal)
        payload = json.loads(probe_pose_report(pose))
        self.assertEqual(dumps_json(payload), probe_pose_report(pose))
        self.assertAlmostEqual(payload["scale"], 1.1)

    def test_target_without_normals(self):
        with self.assertRaises(MissingNormalsError):
            match_with_scale_loop(self.template, PointCloud(self.target.points))


class TestProbePlacement(unittest.TestCase):
    def setUp(self):
        g = np.arange(-0.05, 0.0501, 0.005)
        x, y = np.meshgrid(g, g)
        self.plane = PointCloud(np.column_stack([x.ravel(), y.ravel(), np.zeros(x.size)]))

    def test_transfer_snaps_to_a_member_point(self):
        outcome = RegistrationOutcome(RigidTransform.identity(TEMPLATE, BASE), 1.0, 0.0)
        variant = scale_template(build_template("male", spacing=0.01), 1.0)
        variant.probe_point = np.array([0.0112, -0.0031, 0.004])
        position = transfer_probe_point(outcome, variant, self.plane)
        np.testing.assert_allclose(position, [0.01, -0.005, 0.0], atol=1e-12)
        with self.assertRaises(RejectedInputError):
            transfer_probe_point(outcome, variant, PointCloud.empty())

    def test_orientation_faces_the_viewpoint(self):
        for viewpoint, sign in (([0, 0, 2.0], 1.0), ([0, 0, -2.0], -1.0)):
            with self.subTest(sign=sign):
                normal, degenerate = probe_orientation(self.plane, np.zeros(3), 30, np.array(viewpoint))
                np.testing.assert_allclose(normal, [0, 0, sign], atol=1e-9)
                self.assertFalse(degenerate)

    def test_collinear_neighbors_are_degenerate(self):
        line = PointCloud(np.column_stack([np.linspace(0, 0.1, 40), np.zeros(40), np.zeros(40)]))
        _, degenerate = probe_orientation(line, line.points[20], 30, np.array([0, 0, 1.0]))
        self.assertTrue(degenerate)

    def test_pose_summary_fields(self):
        outcome = RegistrationOutcome(RigidTransform.identity(TEMPLATE, BASE), 0.95, 0.002)
        pose = ProbePose(np.zeros(3), np.array([0, 0, 1.0]), outcome)
        summary = pose.summary()
        self.assertEqual(summary["fitness"], 0.95)
        np.testing.assert_array_equal(summary["approach_direction"], [0, 0, -1.0])


class TestRegistrationConfig(unittest.TestCase):
    def test_invalid_settings(self):
        for kwargs in (
            {"tuple_scale": 1.0},
            {"fitness_threshold": 1.5},
            {"initial_scales": (1.0, 1.6)},
            {"fitness_distance": 0.0},
            {"icp_schedule": ()},
        ):
            with self.subTest(**{k: str(v) for k, v in kwargs.items()}):
                with self.assertRaises(InvalidConfigurationError):
                    RegistrationConfig(**kwargs)


if __name__ == "__main__":
    unittest.main()
