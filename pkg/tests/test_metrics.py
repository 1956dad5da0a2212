# lidar-probe-init/tests/test_metrics.py
import math
import os
import tempfile
import unittest

import numpy as np

from lidar_probe_init.exceptions import RejectedInputError
from lidar_probe_init.geometry import BASE, PointCloud, squared_distances
from lidar_probe_init.metrics import (
    calibration_stats,
    error_bands,
    evaluate_probe_pose,
    evaluate_reconstruction,
    icc,
    pick_marker_point,
    project_marker,
    read_trials_csv,
    repeatability,
    summarize,
    surface_error,
    tangential_error,
    write_trials_csv,
)
from lidar_probe_init.phantoms import build_template

# Six targets rated by four judges, with published ICC(1,1) = 0.17 and
# ICC(2,1) = 0.29.
RATINGS = [
    [9, 2, 5, 8],
    [6, 1, 3, 2],
    [8, 4, 6, 8],
    [7, 1, 2, 6],
    [10, 5, 6, 9],
    [6, 2, 4, 7],
]


def anova_icc(x, form):
    """Mean squares accumulated cell by cell."""
    n, k = len(x), len(x[0])
    grand = sum(sum(row) for row in x) / (n * k)
    row_means = [sum(row) / k for row in x]
    col_means = [sum(x[i][j] for i in range(n)) / n for j in range(k)]
    ss_rows = ss_cols = ss_total = 0.0
    for i in range(n):
        ss_rows += k * (row_means[i] - grand) ** 2
        for j in range(k):
            ss_total += (x[i][j] - grand) ** 2
    for j in range(k):
        ss_cols += n * (col_means[j] - grand) ** 2
    msr = ss_rows / (n - 1)
    if form == "ICC(1,1)":
        msw = (ss_total - ss_rows) / (n * (k - 1))
        return (msr - msw) / (msr + (k - 1) * msw)
    msc = ss_cols / (k - 1)
    mse = (ss_total - ss_rows - ss_cols) / ((n - 1) * (k - 1))
    return (msr - mse) / (msr + (k - 1) * mse + k * (msc - mse) / n)


class TestCalibrationStats(unittest.TestCase):
    def setUp(self):
        rng = np.random.default_rng(2)
        self.groups = [rng.normal(0, 0.0015, size) for size in (40, 55, 70)]
        self.groups[1][0] = 0.05
        self.groups[2][0] = -0.05

    def test_against_loops(self):
        stats = calibration_stats(self.groups)
        for k, group in enumerate(self.groups):
            expected = math.sqrt(sum(r * r for r in group) / len(group))
            self.assertAlmostEqual(stats.per_pose_rms[k], expected, places=12)
        pooled = [r for g in self.groups for r in g]
        self.assertAlmostEqual(
            stats.overall_rms, math.sqrt(sum(r * r for r in pooled) / len(pooled)), places=12
        )
        self.assertEqual(stats.histogram.size, 25)
        self.assertAlmostEqual(stats.bin_edges[0], -0.00625)
        self.assertAlmostEqual(stats.bin_edges[-1], 0.00625)
        self.assertEqual(stats.underflow, 1)
        self.assertEqual(stats.overflow, 1)
        self.assertEqual(int(stats.histogram.sum()) + 2, len(pooled))

    def test_zero_sits_in_the_central_bin(self):
        stats = calibration_stats([np.zeros(5)])
        self.assertEqual(int(stats.histogram[12]), 5)
        summary = stats.per_pose_summary()
        self.assertEqual(summary["std"], 0.0)

    def test_empty_groups(self):
        with self.assertRaises(RejectedInputError):
            calibration_stats([])
        with self.assertRaises(RejectedInputError):
            calibration_stats([np.ones(3), np.zeros(0)])


class TestSurfaceError(unittest.TestCase):
    def setUp(self):
        rng = np.random.default_rng(6)
        self.reference = PointCloud(rng.uniform(-0.1, 0.1, (400, 3)))
        self.source = PointCloud(
            self.reference.points[:150] + rng.normal(0, 0.004, (150, 3))
        )

    def test_against_brute_force(self):
        report = surface_error(self.source, self.reference, tolerance=0.005)
        d2 = squared_distances(self.source.points[:, None], self.reference.points[None])
        distances = np.sqrt(d2.min(axis=1))
        np.testing.assert_allclose(report.per_point_distances, distances, rtol=1e-12)
        self.assertAlmostEqual(report.e_rmse, math.sqrt(np.mean(distances**2)), places=12)
        self.assertAlmostEqual(report.e_95, np.percentile(distances, 95), places=12)
        self.assertAlmostEqual(report.coverage, np.mean(distances <= 0.005), places=12)
        self.assertAlmostEqual(sum(report.bands.values()), 1.0, places=12)

    def test_band_labels_and_edges(self):
        bands = error_bands(np.array([0.0, 0.002, 0.005, 0.008, 0.02]))
        self.assertEqual(list(bands), ["<2mm", "2-8mm", ">8mm"])
        self.assertEqual(bands["<2mm"], 0.2)
        self.assertEqual(bands["2-8mm"], 0.4)
        self.assertEqual(bands[">8mm"], 0.4)
        custom = error_bands(np.array([0.0005]), (0.001, 0.0025, 0.005))
        self.assertEqual(list(custom), ["<1mm", "1-2.5mm", "2.5-5mm", ">5mm"])

    def test_e95_grows_with_a_far_point(self):
        report = surface_error(self.source, self.reference)
        farthest = self.reference.points.max(axis=0) + 3 * report.per_point_distances.max()
        extended = PointCloud(np.vstack([self.source.points, farthest]))
        grown = surface_error(extended, self.reference)
        self.assertGreater(grown.per_point_distances[-1], report.per_point_distances.max())
        self.assertGreaterEqual(grown.e_95, report.e_95)
        self.assertGreaterEqual(report.e_95, float(np.median(report.per_point_distances)))

    def test_empty_cloud(self):
        with self.assertRaises(RejectedInputError):
            surface_error(PointCloud.empty(), self.reference)


class TestReconstructionEvaluation(unittest.TestCase):
    def test_shift_is_removed_before_measuring(self):
        template = build_template("male", spacing=0.006).cloud
        truth = PointCloud(template.points, BASE, template.normals)
        shifted = PointCloud(template.points[::2] + [0.002, -0.001, 0.003], BASE)
        evaluation = evaluate_reconstruction(shifted, truth)
        self.assertGreater(evaluation.fitness, 0.99)
        self.assertLess(evaluation.surface.e_rmse, 0.0005)
        np.testing.assert_allclose(evaluation.transform[:3, 3], [-0.002, 0.001, -0.003], atol=5e-4)
        summary = evaluation.summary()
        self.assertIn("f_icp", summary)
        self.assertIn("coverage", summary)


class TestProbePoseMetric(unittest.TestCase):
    def test_projection_into_the_tangent_plane(self):
        p_s = np.array([0.1, 0.2, 0.3])
        normal = np.array([0.0, 0.0, 1.0])
        marker = p_s + [0.003, -0.004, 0.02]
        projected = project_marker(marker, p_s, normal)
        np.testing.assert_allclose(projected, p_s + [0.003, -0.004, 0.0])
        result = evaluate_probe_pose(marker, p_s, normal)
        self.assertAlmostEqual(result["e_parallel_m"], 0.005, places=12)
        self.assertEqual(tangential_error(projected, p_s), result["e_parallel_m"])
        self.assertEqual(tangential_error(p_s, p_s), 0.0)

    def test_tilted_normal(self):
        normal = np.array([0.0, math.sqrt(0.5), math.sqrt(0.5)])
        projected = project_marker([0.0, 0.0, 1.0], np.zeros(3), normal)
        self.assertAlmostEqual(float(projected @ normal), 0.0, places=12)
        np.testing.assert_allclose(projected, [0.0, -0.5, 0.5], atol=1e-12)

    def test_non_unit_normal(self):
        with self.assertRaises(RejectedInputError):
            project_marker(np.ones(3), np.zeros(3), np.array([0, 0, 2.0]))

    def test_marker_pick(self):
        cloud = PointCloud([[0, 0, 0], [0.01, 0, 0], [0.0, 0.0, 0.0301]])
        np.testing.assert_array_equal(pick_marker_point(cloud, [0, 0, 0.03]), [0, 0, 0.0301])
        with self.assertRaises(RejectedInputError):
            pick_marker_point(cloud, [0, 0, 0.1])


class TestRepeatability(unittest.TestCase):
    def test_published_values(self):
        self.assertAlmostEqual(icc(RATINGS, "ICC(1,1)"), 0.17, places=2)
        self.assertAlmostEqual(icc(RATINGS, "ICC(2,1)"), 0.29, places=2)

    def test_against_cell_loops(self):
        rng = np.random.default_rng(8)
        trials = (rng.normal(0.004, 0.002, (5, 1)) + rng.normal(0, 0.001, (5, 3))).tolist()
        for form in ("ICC(1,1)", "ICC(2,1)"):
            with self.subTest(form=form):
                self.assertAlmostEqual(icc(trials, form), anova_icc(trials, form), places=12)

    def test_shift_and_scale_leave_icc_unchanged(self):
        rng = np.random.default_rng(9)
        trials = rng.normal(0.02, 0.004, (6, 1)) + rng.normal(0, 0.0015, (6, 3))
        for form in ("ICC(1,1)", "ICC(2,1)"):
            reference = icc(trials, form)
            for label, changed in (("shift", trials + 0.013), ("scale", trials * 2.5)):
                with self.subTest(form=form, change=label):
                    self.assertAlmostEqual(icc(changed, form), reference, places=10)

    def test_identical_trials(self):
        self.assertEqual(icc([[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]]), 1.0)
        self.assertEqual(icc([[1.0, 1.0], [2.0, 2.0]], "ICC(2,1)"), 1.0)

    def test_report(self):
        report = repeatability([[1.0, 3.0], [2.0, 2.0], [5.0, 7.0]])
        np.testing.assert_allclose(report.per_subject_mean, [2.0, 2.0, 6.0])
        np.testing.assert_allclose(report.per_subject_sd, [math.sqrt(2), 0.0, math.sqrt(2)])
        self.assertEqual(report.icc_form, "ICC(1,1)")

    def test_bad_shapes(self):
        for trials in ([[1.0, 2.0]], [[1.0], [2.0]], [[1.0, 2.0], [3.0]]):
            with self.subTest(trials=trials):
                with self.assertRaises(RejectedInputError):
                    repeatability(trials)
        with self.assertRaises(RejectedInputError):
            icc(RATINGS, "ICC(3,1)")

    def test_summarize(self):
        self.assertEqual(summarize([2.0]), (2.0, 0.0))
        mean, sd = summarize([1.0, 2.0, 3.0])
        self.assertEqual(mean, 2.0)
        self.assertAlmostEqual(sd, 1.0)
        with self.assertRaises(RejectedInputError):
            summarize([])

    def test_trials_file(self):
        matrix = np.array([[0.001, 0.002, 0.0015], [0.003, 0.0025, 0.004]])
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "trials.csv")
            write_trials_csv(path, ["s2", "s1"], matrix)
            subjects, back = read_trials_csv(path)
            self.assertEqual(subjects, ["s2", "s1"])
            np.testing.assert_allclose(back, matrix, rtol=1e-15)
            with open(path, "w") as f:
                f.write("subject,trial,error\ns1,1,2.0\n")
            with self.assertRaises(RejectedInputError):
                read_trials_csv(path)
            for row in ("s1,first,2.0", "s1,1,n/a", "s1,1"):
                with self.subTest(row=row):
                    with open(path, "w") as f:
                        f.write(f"subject,trial,e_parallel_mm\ns1,2,1.0\n{row}\n")
                    with self.assertRaises(RejectedInputError):
                        read_trials_csv(path)


if __name__ == "__main__":
    unittest.main()
