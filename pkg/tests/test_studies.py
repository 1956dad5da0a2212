# lidar-probe-init/tests/test_studies.py
import csv
import os
import tempfile
import unittest
from dataclasses import replace

from lidar_probe_init.config import PipelineConfig, ReproduceConfig
from lidar_probe_init.studies import SUBJECTS, quick_config, reproduce


def calibration_only(seed=69):
    cfg = quick_config(PipelineConfig(seed=seed))
    return replace(
        cfg,
        reproduce=replace(cfg.reproduce, surface_study=False, repeatability_study=False),
    )


class TestQuickConfig(unittest.TestCase):
    def test_coarser_grid_and_flag(self):
        base = PipelineConfig()
        cfg = quick_config(base)
        self.assertTrue(cfg.reproduce.quick)
        self.assertEqual(cfg.preprocess.poisson_grid_resolution, 64)
        self.assertFalse(base.reproduce.quick)
        self.assertEqual(cfg.preprocess.voxel_size, base.preprocess.voxel_size)

    def test_subjects_are_distinct(self):
        self.assertEqual(len({s.name for s in SUBJECTS}), len(SUBJECTS))
        self.assertGreaterEqual(len(SUBJECTS), ReproduceConfig().subjects)


class TestCalibrationStudy(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.tmp = tempfile.TemporaryDirectory()
        cls.first = os.path.join(cls.tmp.name, "first")
        cls.second = os.path.join(cls.tmp.name, "second")
        cls.written = reproduce(calibration_only(), cls.first)
        reproduce(calibration_only(), cls.second)

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()

    def test_bundle_contents(self):
        self.assertEqual(
            self.written,
            [
                "calibration_histogram.csv",
                "calibration_recovery.csv",
                "calibration_summary.csv",
                "config.json",
                "report.md",
            ],
        )
        with open(os.path.join(self.first, "report.md")) as f:
            report = f.read()
        self.assertIn("## Calibration recovery", report)
        self.assertIn("(quick run)", report)
        self.assertNotIn("## Surface error", report)

    def test_noise_free_sessions_recover_the_mount(self):
        with open(os.path.join(self.first, "calibration_recovery.csv")) as f:
            rows = list(csv.DictReader(f))
        self.assertEqual([r["noise_mm"] for r in rows], ["0.00", "1.50"])
        noise_free, noisy = rows
        self.assertLess(float(noise_free["overall_rms_mm"]), 1e-3)
        for axis in "xyz":
            self.assertLess(abs(float(noise_free[f"t_err_{axis}_mm"])), 0.01)
            self.assertLess(abs(float(noisy[f"t_err_{axis}_mm"])), 2.0)
        self.assertLess(float(noisy["rot_err_deg"]), 0.5)
        self.assertGreater(float(noisy["overall_rms_mm"]), 0.8)
        self.assertLess(float(noisy["overall_rms_mm"]), 2.0)

    def test_equal_seeds_give_identical_bundles(self):
        for name in self.written:
            with self.subTest(name=name):
                with open(os.path.join(self.first, name), "rb") as a:
                    with open(os.path.join(self.second, name), "rb") as b:
                        self.assertEqual(a.read(), b.read())


if __name__ == "__main__":
    unittest.main()
