# lidar-probe-init/tests/test_preprocess.py
import os
import tempfile
import unittest

import numpy as np

from lidar_probe_init.exceptions import (
    EmptyReconstructionError,
    InvalidConfigurationError,
    MissingNormalsError,
    TooFewPointsError,
)
from lidar_probe_init.geometry import NeighborIndex, PointCloud, squared_distances
from lidar_probe_init.preprocess import (
    PreprocessConfig,
    density_cluster,
    estimate_normals,
    poisson_reconstruct_and_trim,
    preprocess_pipeline,
    radius_outlier_removal,
    statistical_outlier_removal,
    voxel_downsample,
)


def brute_force_dbscan(points, eps, min_points):
    """Clusters as sets of point indices, by breadth-first expansion."""
    d2 = squared_distances(points[:, None, :], points[None, :, :])
    neighbors = d2 <= eps * eps
    core = neighbors.sum(axis=1) >= min_points
    seen = np.zeros(len(points), bool)
    clusters = []
    for start in np.flatnonzero(core):
        if seen[start]:
            continue
        members, frontier = set(), [start]
        seen[start] = True
        while frontier:
            i = frontier.pop()
            members.add(int(i))
            if not core[i]:
                continue
            for j in np.flatnonzero(neighbors[i]):
                if not seen[j]:
                    seen[j] = True
                    frontier.append(j)
        clusters.append(frozenset(members))
    return clusters


def flat_patch(spacing=0.003, half=0.1, sigma=0.0, seed=0):
    g = np.arange(-half, half + 1e-9, spacing)
    x, y = np.meshgrid(g, g, indexing="ij")
    rng = np.random.default_rng(seed)
    z = sigma * rng.standard_normal(x.size)
    return np.column_stack([x.ravel(), y.ravel(), z])


class TestFilters(unittest.TestCase):
    def test_voxel_centroids_and_labels(self):
        cloud = PointCloud(
            [[0.001, 0.001, 0.001], [0.002, 0.002, 0.002], [0.0025, 0.001, 0.001], [0.011, 0, 0]],
            labels=[4, 2, 2, 1],
        )
        down = voxel_downsample(cloud, 0.01)
        self.assertEqual(len(down), 2)
        np.testing.assert_allclose(down.points[0], [0.0055 / 3, 0.004 / 3, 0.004 / 3])
        np.testing.assert_array_equal(down.labels, [2, 1])

    def test_voxel_label_tie_goes_to_smaller(self):
        cloud = PointCloud([[0.001, 0, 0], [0.002, 0, 0]], labels=[3, 1])
        self.assertEqual(int(voxel_downsample(cloud, 0.01).labels[0]), 1)

    def test_voxel_normals_are_unit(self):
        normals = np.array([[0, 0, 1.0], [0, 1.0, 0]])
        cloud = PointCloud([[0.001, 0, 0], [0.002, 0, 0]], normals=normals)
        down = voxel_downsample(cloud, 0.01)
        np.testing.assert_allclose(down.normals[0], [0, np.sqrt(0.5), np.sqrt(0.5)])

    def test_statistical_outliers(self):
        points = np.vstack([flat_patch(half=0.03), [[0.0, 0.0, 0.2]]])
        cloud = PointCloud(points)
        kept = statistical_outlier_removal(cloud, 20, 2.0)
        self.assertEqual(len(kept), len(cloud) - 1)
        self.assertLess(kept.points[:, 2].max(), 0.1)

        distances = np.sqrt(np.sort(squared_distances(points[:, None], points[None]), axis=1))
        mean = distances[:, 1:21].mean(axis=1)
        expected = mean <= mean.mean() + 2.0 * mean.std()
        self.assertEqual(len(kept), int(expected.sum()))

    def test_statistical_needs_more_than_k(self):
        with self.assertRaises(TooFewPointsError):
            statistical_outlier_removal(PointCloud(np.zeros((5, 3))), 5, 2.0)

    def test_radius_outliers(self):
        points = np.vstack([flat_patch(half=0.02), [[0.5, 0.5, 0.5]]])
        kept = radius_outlier_removal(PointCloud(points), 0.01, 5)
        self.assertEqual(len(kept), len(points) - 1)


class TestClustering(unittest.TestCase):
    def setUp(self):
        rng = np.random.default_rng(4)
        big = rng.normal([0, 0, 0], 0.004, (150, 3))
        small = rng.normal([0.3, 0, 0], 0.004, (60, 3))
        noise = rng.uniform(1.0, 2.0, (10, 3))
        self.points = np.vstack([small, noise, big])

    def test_matches_brute_force(self):
        clusters = density_cluster(PointCloud(self.points), 0.015, 10)
        index = NeighborIndex(self.points)
        found = []
        for cluster in clusters:
            _, rows = index.nearest(cluster.points)
            found.append(frozenset(rows.tolist()))
        self.assertEqual(set(found), set(brute_force_dbscan(self.points, 0.015, 10)))

    def test_largest_first(self):
        clusters = density_cluster(PointCloud(self.points), 0.015, 10)
        sizes = [len(c) for c in clusters]
        self.assertEqual(sizes, sorted(sizes, reverse=True))
        self.assertLess(abs(clusters[0].centroid()[0]), 0.05)


class TestNormals(unittest.TestCase):
    def test_plane_normals_face_viewpoint(self):
        cloud = PointCloud(flat_patch(half=0.03))
        for viewpoint, sign in (([0, 0, 1.0], 1.0), ([0, 0, -1.0], -1.0)):
            with self.subTest(sign=sign):
                normals = estimate_normals(cloud, 30, np.array(viewpoint)).normals
                np.testing.assert_allclose(normals[:, 2], sign, atol=1e-9)

    def test_needs_more_than_k(self):
        with self.assertRaises(TooFewPointsError):
            estimate_normals(PointCloud(np.zeros((10, 3))), 30, np.zeros(3))


class TestPoisson(unittest.TestCase):
    def setUp(self):
        self.cfg = PreprocessConfig(poisson_grid_resolution=48)

    def test_flat_patch_surface(self):
        cloud = estimate_normals(PointCloud(flat_patch(sigma=0.001)), 30, np.array([0, 0, 1.0]))
        surface = poisson_reconstruct_and_trim(cloud, self.cfg)
        self.assertGreater(len(surface), 100)
        self.assertLess(np.abs(surface.points[:, 2]).mean(), 0.002)
        distances, _ = NeighborIndex(cloud.points).nearest(surface.points)
        self.assertTrue(np.all(distances <= self.cfg.trim_distance))

    def test_needs_normals(self):
        with self.assertRaises(MissingNormalsError):
            poisson_reconstruct_and_trim(PointCloud(flat_patch(half=0.02)), self.cfg)


class TestPipeline(unittest.TestCase):
    def setUp(self):
        rng = np.random.default_rng(9)
        patch = flat_patch(spacing=0.002, sigma=0.001, seed=1)
        distant = rng.normal([0.6, 0.6, 0.1], 0.01, (200, 3))
        strays = rng.uniform([-0.3, -0.3, 0.05], [0.3, 0.3, 0.3], (30, 3))
        self.raw = PointCloud(np.vstack([patch, distant, strays]))
        self.cfg = PreprocessConfig(poisson_grid_resolution=48)

    def test_pipeline_keeps_the_patch(self):
        with tempfile.TemporaryDirectory() as tmp:
            surface = preprocess_pipeline(self.raw, self.cfg, np.array([0, 0, 0.5]), tmp)
            for stage in (
                "a_raw",
                "b_downsampled",
                "c_statistical_outliers_removed",
                "d_radius_outliers_removed",
                "e_largest_cluster",
                "f_poisson_trimmed",
                "g_final",
            ):
                self.assertTrue(os.path.isfile(os.path.join(tmp, f"{stage}.ply")), stage)
        self.assertTrue(surface.has_normals)
        self.assertLess(np.abs(surface.points[:, :2]).max(), 0.12)
        self.assertLess(np.abs(surface.points[:, 2]).mean(), 0.002)
        self.assertGreater(np.mean(surface.normals[:, 2] > 0.8), 0.9)

    def test_pipeline_is_deterministic(self):
        a = preprocess_pipeline(self.raw, self.cfg, np.array([0, 0, 0.5]))
        b = preprocess_pipeline(self.raw, self.cfg, np.array([0, 0, 0.5]))
        np.testing.assert_array_equal(a.points, b.points)

    def test_empty_input(self):
        with self.assertRaises(EmptyReconstructionError):
            preprocess_pipeline(PointCloud.empty(), self.cfg)

    def test_invalid_settings(self):
        with self.assertRaises(InvalidConfigurationError):
            PreprocessConfig(voxel_size=0.0)
        with self.assertRaises(InvalidConfigurationError):
            PreprocessConfig(poisson_grid_resolution=3)


if __name__ == "__main__":
    unittest.main()
