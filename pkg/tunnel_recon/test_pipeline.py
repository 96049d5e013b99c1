"""
Test script for run configuration, the pipeline stages and the command line.

This script covers:
- INI loading, overrides and validation errors
- A small simulated run end to end, and its determinism per seed
- Stage failures, exit codes and partial-output markers
- The plan, coverage and ingest entry points
"""
import json
import logging
import os
import shutil
import sys
import tempfile
import unittest
from unittest.mock import patch

import numpy as np
import pandas as pd

# Add parent directory to path if running directly
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import config
from app import main
from pipeline import ConfigError, PipelineConfig, StageError, TunnelReconPipeline, run_pipeline
from utils.file_manager import partial_marker, read_json
from utils.simulator import generate_trajectory
from utils.surface_mapping import camera_matched_resolution

SMALL_RUN = [
    "camera.width=48",
    "camera.height=64",
    "trajectory.rotation_count=2",
    "matching.matches_per_pair=60",
    "matching.pixel_noise_sd=0",
    "run.threads=2",
    "atlas.resolution=camera",
]


def small_config(output_dir, *extra):
    return PipelineConfig.load(overrides=SMALL_RUN + [f"run.output_dir={output_dir}", *extra])


class TestPipelineConfig(unittest.TestCase):
    """Test suite for PipelineConfig."""

    def setUp(self):
        """Create a temporary directory for config files."""
        self.temp_dir = tempfile.mkdtemp()

    def tearDown(self):
        """Remove the temporary directory."""
        if os.path.exists(self.temp_dir):
            shutil.rmtree(self.temp_dir)

    def test_defaults(self):
        """Test that an empty load gives the documented defaults."""
        cfg = PipelineConfig.load()
        self.assertEqual(cfg.camera.width, config.IMAGE_WIDTH)
        self.assertEqual(cfg.trajectory.images_per_rotation, config.IMAGES_PER_ROTATION)
        self.assertEqual(cfg.prior.kind, "cylinder")
        self.assertTrue(cfg.simulated)

    def test_ini_and_overrides(self):
        """Test that --set overrides win over the INI file."""
        path = os.path.join(self.temp_dir, "tunnel.ini")
        with open(path, "w", encoding="utf-8") as f:
            f.write("[trajectory]\nforward_step = 0.2\nstart_offset = 0.5, -0.7\n\n[atlas]\naverage = yes\n")
        cfg = PipelineConfig.load(path, ["trajectory.forward_step=0.1", "camera.omega_h_deg=70"])
        self.assertEqual(cfg.trajectory.forward_step, 0.1)
        self.assertEqual(cfg.trajectory.start_offset, (0.5, -0.7))
        self.assertTrue(cfg.atlas.average)
        self.assertEqual(cfg.camera.omega_h_deg, 70.0)

    def test_unknown_names(self):
        """Test that unknown sections and keys are refused."""
        with self.assertRaises(ConfigError):
            PipelineConfig.load(overrides=["lighting.ambient=0.5"])
        with self.assertRaises(ConfigError):
            PipelineConfig.load(overrides=["camera.zoom=2"])
        with self.assertRaises(ConfigError):
            PipelineConfig.load(overrides=["camera_width=2"])
        with self.assertRaises(ConfigError):
            PipelineConfig.load(os.path.join(self.temp_dir, "missing.ini"))

    def test_bad_values(self):
        """Test malformed and out-of-range values."""
        with self.assertRaisesRegex(ConfigError, r"\[camera\] width"):
            PipelineConfig.load(overrides=["camera.width=wide"])
        with self.assertRaisesRegex(ConfigError, "start_offset"):
            PipelineConfig.load(overrides=["trajectory.start_offset=1.0"])
        with self.assertRaisesRegex(ConfigError, "start_offset"):
            PipelineConfig.load(overrides=["trajectory.start_offset=3.5, 0"])
        with self.assertRaisesRegex(ConfigError, "omega_h_deg"):
            PipelineConfig.load(overrides=["camera.omega_h_deg=180"])
        with self.assertRaisesRegex(ConfigError, "outlier_fraction"):
            PipelineConfig.load(overrides=["matching.outlier_fraction=1.0"])
        with self.assertRaisesRegex(ConfigError, "radius"):
            PipelineConfig.load(overrides=["prior.radius=-1"])
        with self.assertRaisesRegex(ConfigError, "layout"):
            PipelineConfig.load(overrides=["atlas.layout=planes"])

    def test_missing_input_dir(self):
        """Test that ingest mode names the missing directory."""
        missing = os.path.join(self.temp_dir, "no_such_frames")
        with self.assertRaises(ConfigError) as ctx:
            PipelineConfig.load(overrides=[f"run.input_dir={missing}"])
        self.assertIn(missing, str(ctx.exception))

    def test_write_and_reload(self):
        """Test that a written config loads back equal."""
        cfg = PipelineConfig.load(overrides=["prior.kind=box", "atlas.layout=planes",
                                             "trajectory.start_offset=0.25, 0.5",
                                             "trajectory.translation_noise_cm=2, 1, 2",
                                             f"run.output_dir={self.temp_dir}"])
        path = os.path.join(self.temp_dir, "echo.ini")
        cfg.write(path)
        self.assertEqual(PipelineConfig.load(path), cfg)

    def test_jittered_capture(self):
        """Test the hand-flown jitter preset."""
        jittered = PipelineConfig().trajectory.jittered()
        self.assertEqual(jittered.translation_noise_cm, config.JITTER_TRANSLATION_CM)
        self.assertEqual(jittered.rotation_noise_deg, config.JITTER_ROTATION_DEG)
        self.assertAlmostEqual(jittered.spec().translation_noise_sd[0], 0.02)


class TestEndToEnd(unittest.TestCase):
    """Test suite for a small simulated run."""

    @classmethod
    def setUpClass(cls):
        """Run the same small configuration on one thread and on three."""
        cls.temp_dir = tempfile.mkdtemp()
        cls.dirs = [os.path.join(cls.temp_dir, name) for name in ("a", "b")]
        cls.summaries = [run_pipeline(small_config(d, f"run.threads={threads}"))
                         for d, threads in zip(cls.dirs, (1, 3))]

    @classmethod
    def tearDownClass(cls):
        """Remove both run directories."""
        shutil.rmtree(cls.temp_dir, ignore_errors=True)

    def test_outputs_written(self):
        """Test that every stage left its artifacts and no partial markers."""
        out = self.dirs[0]
        for name in ("config.ini", "matches.txt", "poses_initial.csv", "loop_edges.csv", "poses.csv",
                     "ba-report.csv", "pose_errors.csv", "cloud.ply", "summary.json", "atlas_cylinder.png",
                     "holes_cylinder.png", os.path.join("frames", "frame_0019.png"),
                     os.path.join("frames", "groundtruth.csv")):
            self.assertTrue(os.path.exists(os.path.join(out, name)), name)
        self.assertFalse([f for f in os.listdir(out) if f.endswith(".partial")])

    def test_summary(self):
        """Test the summary contents."""
        summary = read_json(os.path.join(self.dirs[0], "summary.json"))
        for key in ("seed", "mode", "matches", "frames", "ba", "pose_rms_before_ba_m", "pose_rms_m",
                    "rotation_rms_deg", "points", "atlas_holes", "coverage_holes", "atlas_shape"):
            self.assertIn(key, summary)
        self.assertEqual(summary["mode"], "simulate")
        self.assertEqual(summary["frames"], 20)
        self.assertEqual(summary["points"], 20 * 48 * 64)
        self.assertLess(summary["pose_rms_m"], 0.05)
        self.assertLessEqual(summary["ba"]["after_px"], summary["ba"]["before_px"])
        self.assertEqual(list(summary["atlas_shape"]), ["cylinder"])

    def test_deterministic_per_seed(self):
        """Test that the thread count does not change a single output byte."""
        a, b = self.summaries
        self.assertEqual(json.dumps(a, sort_keys=True), json.dumps(b, sort_keys=True))
        for name in ("poses.csv", "atlas_cylinder.png", "holes_cylinder.png", "summary.json", "ba-report.csv"):
            with open(os.path.join(self.dirs[0], name), "rb") as f:
                one_thread = f.read()
            with open(os.path.join(self.dirs[1], name), "rb") as f:
                three_threads = f.read()
            self.assertEqual(one_thread, three_threads, name)

    def test_config_echo(self):
        """Test that the effective config is echoed into the output directory."""
        echoed = PipelineConfig.load(os.path.join(self.dirs[0], "config.ini"))
        self.assertEqual(echoed, small_config(self.dirs[0], "run.threads=1"))


class TestStages(unittest.TestCase):
    """Test suite for individual stages and their failures."""

    def setUp(self):
        """Create a temporary output directory."""
        self.temp_dir = tempfile.mkdtemp()

    def tearDown(self):
        """Remove the temporary directory."""
        if os.path.exists(self.temp_dir):
            shutil.rmtree(self.temp_dir)

    def test_stage_error_carries_exit_code(self):
        """Test that a failing pose stage reports its own exit code."""
        pipeline = TunnelReconPipeline(small_config(self.temp_dir))
        pipeline.synth_matches()
        with patch("pipeline.estimate_edges", side_effect=ValueError("boom")):
            with self.assertRaises(StageError) as ctx:
                pipeline.estimate_poses()
        self.assertEqual(ctx.exception.stage, "pose")
        self.assertEqual(ctx.exception.exit_code, config.STAGE_EXIT_CODES["pose"])

    def test_failed_stage_marks_outputs_partial(self):
        """Test that an existing output of a failed stage gets a .partial marker."""
        pipeline = TunnelReconPipeline(small_config(self.temp_dir))
        stale = pipeline.path("poses.csv")
        with open(stale, "w", encoding="utf-8") as f:
            f.write("frame_index\n")
        with self.assertRaises(StageError) as ctx:
            pipeline.bundle_adjust()
        self.assertEqual(ctx.exception.exit_code, config.STAGE_EXIT_CODES["ba"])
        self.assertIsInstance(ctx.exception.cause, FileNotFoundError)
        self.assertTrue(os.path.exists(partial_marker(stale)))

    def test_plan_from_offset(self):
        """Test that plan.json recovers the offset and carries the speed bounds."""
        pipeline = TunnelReconPipeline(small_config(self.temp_dir))
        report = pipeline.plan(offset=(0.5, -0.7), sweep_path=pipeline.path("speed_sweep.csv"))
        np.testing.assert_allclose(report["offset_m"], [0.5, -0.7], atol=1e-6)
        self.assertFalse(report["ambiguous"])
        self.assertGreater(report["d_max_image_m"], 0.0)
        self.assertAlmostEqual(report["d_max_image_m"] * 10, report["d_max_rotation_m"])
        self.assertEqual(read_json(pipeline.path("plan.json"))["offset_m"], report["offset_m"])
        self.assertEqual(len(pd.read_csv(pipeline.path("speed_sweep.csv"))), config.SPEED_SWEEP_STEPS)

    def test_plan_needs_cylinder(self):
        """Test that the speed planner refuses a box prior."""
        pipeline = TunnelReconPipeline(small_config(self.temp_dir, "prior.kind=box"))
        with self.assertRaises(ConfigError):
            pipeline.plan()

    def test_default_atlas_resolution(self):
        """Test that the default atlas is 7500 texels per turn at 1.7 mm, with camera matching opt-in."""
        cfg = PipelineConfig.load(overrides=[f"run.output_dir={self.temp_dir}"])
        self.assertEqual(cfg.atlas.resolution, "fixed")
        pipeline = TunnelReconPipeline(cfg)
        poses = generate_trajectory(cfg.trajectory.spec())
        spec = pipeline.atlas_spec(poses)
        self.assertEqual(spec.width, 7500)
        self.assertAlmostEqual(1.0 / spec.texels_per_meter, 0.0017)

        small = small_config(self.temp_dir)
        matched = TunnelReconPipeline(small).atlas_spec(poses)
        expected = camera_matched_resolution(small.camera.intrinsics(), small.prior.build(), small.atlas.margin)
        self.assertEqual((matched.width, matched.texels_per_meter), expected)
        self.assertLess(matched.width, 7500)

    def test_coverage_at_the_speed_bound(self):
        """Test that two views leave no holes at the bound and some just above it."""
        pipeline = TunnelReconPipeline(small_config(self.temp_dir))
        table = pipeline.coverage((1.0, 1.11))
        self.assertEqual(list(table["speed_factor"]), [1.0, 1.11])
        self.assertEqual(int(table["holes"].iloc[0]), 0)
        self.assertGreater(int(table["holes"].iloc[1]), 0)
        self.assertTrue(os.path.exists(pipeline.path("coverage.csv")))
        self.assertTrue(os.path.exists(os.path.join(self.temp_dir, "coverage_1.11", "holes_cylinder.png")))

    def test_ingest_mode(self):
        """Test that ingest mode reads frames and matches from input_dir."""
        produced = os.path.join(self.temp_dir, "produced")
        source = TunnelReconPipeline(small_config(produced))
        source.simulate()
        source.synth_matches()
        shutil.copy(source.matches_path, os.path.join(source.frames_dir, "matches.txt"))

        ingest = TunnelReconPipeline(small_config(os.path.join(self.temp_dir, "ingested"),
                                                  f"run.input_dir={source.frames_dir}"))
        self.assertFalse(ingest.config.simulated)
        with self.assertRaises(ConfigError):
            ingest.simulate()
        poses = ingest.estimate_poses()
        self.assertEqual(len(poses), 20)
        self.assertEqual(len(ingest.frame_paths()), 20)


class TestCommandLine(unittest.TestCase):
    """Test suite for app.main exit codes."""

    def setUp(self):
        """Create a temporary output directory."""
        self.temp_dir = tempfile.mkdtemp()

    def tearDown(self):
        """Detach the run log and remove the temporary directory."""
        root = logging.getLogger()
        for handler in list(root.handlers):
            if isinstance(handler, logging.FileHandler):
                root.removeHandler(handler)
                handler.close()
        if os.path.exists(self.temp_dir):
            shutil.rmtree(self.temp_dir)

    def test_plan_command(self):
        """Test that the plan command succeeds and writes plan.json and its log."""
        code = main(["plan", "--output-dir", self.temp_dir, "--offset", "0.5", "-0.7", "--log-level", "WARNING"])
        self.assertEqual(code, 0)
        self.assertTrue(os.path.exists(os.path.join(self.temp_dir, "plan.json")))
        self.assertTrue(os.path.exists(os.path.join(self.temp_dir, config.LOG_FILE_NAME)))

    def test_plan_with_failed_sensor(self):
        """Test that a 'none' reading still plans from the two remaining sensors."""
        code = main(["plan", "--output-dir", self.temp_dir, "--readings", "2.4284271247", "3.2284271247", "none",
                     "--log-level", "WARNING"])
        self.assertEqual(code, 0)
        report = read_json(os.path.join(self.temp_dir, "plan.json"))
        self.assertTrue(report["ambiguous"])
        self.assertEqual(report["dropped_sensors"], ["d3"])
        self.assertAlmostEqual(abs(report["offset_m"][1]), 1.0, delta=1e-4)

    def test_config_error_exit_code(self):
        """Test that a bad override exits with the config error code."""
        code = main(["run", "--output-dir", self.temp_dir, "--set", "camera.zoom=2", "--log-level", "CRITICAL"])
        self.assertEqual(code, config.EXIT_CONFIG_ERROR)

    def test_stage_exit_code(self):
        """Test that ba without initial poses exits with the ba stage code."""
        code = main(["ba", "--output-dir", self.temp_dir, "--log-level", "CRITICAL"])
        self.assertEqual(code, config.STAGE_EXIT_CODES["ba"])


if __name__ == "__main__":
    unittest.main()
