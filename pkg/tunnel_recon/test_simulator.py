"""
Tests for the synthetic capture simulator.
"""
import math
import os
import shutil
import sys
import tempfile
import unittest

import numpy as np
import pandas as pd

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from utils.file_manager import list_frames, load_image, load_mask, read_pose_table
from utils.geometry import (BoxSection, CameraIntrinsics, Cylinder, OutsidePriorError, PoseSE3, rotation_angle,
                            rotation_about_axis)
from utils.simulator import (ProceduralTexture, TrajectorySpec, generate_trajectory, light_factor, load_groundtruth,
                             make_texture, occluder_mask, render_view, simulate_dataset)


class TestTrajectory(unittest.TestCase):

    def test_closure_after_full_rotation(self):
        poses = generate_trajectory(TrajectorySpec(images_per_rotation=10, rotation_count=2))
        np.testing.assert_allclose(poses[10].translation - poses[0].translation, [0.0, 1.5, 0.0], atol=1e-12)
        np.testing.assert_allclose(poses[10].rotation, poses[0].rotation, atol=1e-9)

    def test_consecutive_rotation_is_36_degrees(self):
        poses = generate_trajectory(TrajectorySpec(images_per_rotation=10, rotation_count=1))
        for a, b in zip(poses, poses[1:]):
            self.assertAlmostEqual(rotation_angle(a.rotation.T @ b.rotation), math.radians(36), delta=1e-9)
            axis = PoseSE3(a.rotation.T @ b.rotation, np.zeros(3)).as_rotvec()
            np.testing.assert_allclose(axis / np.linalg.norm(axis), [0.0, 1.0, 0.0], atol=1e-9)

    def test_seeded_noise_is_reproducible(self):
        spec = TrajectorySpec(translation_noise_sd=(0.02, 0.01, 0.02), rotation_noise_sd=math.radians(2))
        first, second = generate_trajectory(spec, seed=9), generate_trajectory(spec, seed=9)
        other = generate_trajectory(spec, seed=10)
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a.rotation, b.rotation)
            np.testing.assert_array_equal(a.translation, b.translation)
        self.assertFalse(np.allclose(first[5].translation, other[5].translation))
        self.assertEqual(len(first), spec.frame_count)

    def test_cylindrical_mode_rotates_in_place(self):
        poses = generate_trajectory(TrajectorySpec(images_per_rotation=4, rotation_count=2, mode="cylindrical"))
        for k in range(1, 4):
            np.testing.assert_allclose(poses[k].translation, poses[0].translation)
        np.testing.assert_allclose(poses[4].translation - poses[3].translation, [0.0, 0.6, 0.0], atol=1e-12)

    def test_invalid_specs(self):
        with self.assertRaises(ValueError):
            TrajectorySpec(images_per_rotation=0)
        with self.assertRaises(ValueError):
            TrajectorySpec(mode="zigzag")
        self.assertTrue(TrajectorySpec(images_per_rotation=10).is_full_coverage)


class TestRenderView(unittest.TestCase):

    def setUp(self):
        self.K = CameraIntrinsics.from_fov(48, 64, math.radians(60))
        self.prior = Cylinder(3.0)
        self.texture = ProceduralTexture("waves", period=0.5)

    def test_deterministic_and_thread_independent(self):
        pose = PoseSE3(rotation_about_axis(0.3), [0.2, 0.5, -0.1])
        single = render_view(self.prior, self.texture, pose, self.K)
        again = render_view(self.prior, self.texture, pose, self.K)
        threaded = render_view(self.prior, self.texture, pose, self.K, threads=4)
        self.assertEqual(single.shape, (64, 48, 3))
        self.assertEqual(single.dtype, np.uint8)
        np.testing.assert_array_equal(single, again)
        np.testing.assert_array_equal(single, threaded)

    def test_axial_motion_shifts_rows(self):
        shift_px = 4
        delta = shift_px * self.prior.radius / self.K.f
        before = render_view(self.prior, self.texture, PoseSE3.identity(), self.K)
        after = render_view(self.prior, self.texture, PoseSE3(np.eye(3), [0.0, delta, 0.0]), self.K)
        column = int(self.K.cx)
        diff = np.abs(after[:-shift_px, column].astype(int) - before[shift_px:, column].astype(int))
        self.assertLessEqual(int(diff.max()), 1)

    def test_centred_checkerboard_matches_analytic_pattern(self):
        texture = ProceduralTexture("checker", period=0.5)
        image = render_view(self.prior, texture, PoseSE3.identity(), self.K)
        column = int(self.K.cx)
        # Down the centre column the wall point is (0, (v - cy) r / f, r).
        t = (np.arange(self.K.height) - self.K.cy) * self.prior.radius / self.K.f
        expected = np.round(texture.sample(np.zeros_like(t), t) * 255.0).astype(np.uint8)
        # Rows within a pixel of a checker edge may land on either side.
        edge = np.abs(t / 0.5 - np.round(t / 0.5)) * 0.5 * self.K.f / self.prior.radius < 1.0
        np.testing.assert_array_equal(image[~edge, column], expected[~edge])

    def test_camera_outside_prior(self):
        with self.assertRaises(OutsidePriorError):
            render_view(self.prior, self.texture, PoseSE3(np.eye(3), [3.5, 0.0, 0.0]), self.K)

    def test_box_section(self):
        box = BoxSection.from_extents(left=-2.0, right=2.0, floor=-1.5, ceiling=2.5)
        image = render_view(box, ProceduralTexture("brick"), PoseSE3(rotation_about_axis(1.0), [0.0, 0.0, 0.5]),
                            self.K)
        self.assertEqual(image.shape, (64, 48, 3))
        self.assertGreater(len(np.unique(image.reshape(-1, 3), axis=0)), 2)

    def test_light_model_darkens_downward_views(self):
        up = PoseSE3.identity()
        down = PoseSE3(rotation_about_axis(math.pi), np.zeros(3))
        side = PoseSE3(rotation_about_axis(math.pi / 2), np.zeros(3))
        self.assertAlmostEqual(light_factor(up, 0.3), 1.0)
        self.assertAlmostEqual(light_factor(down, 0.3), 0.3)
        self.assertGreater(light_factor(side, 0.3), light_factor(down, 0.3))
        lit = render_view(self.prior, self.texture, down, self.K, light_ambient=0.3)
        plain = render_view(self.prior, self.texture, down, self.K)
        self.assertLess(lit.mean(), plain.mean())

    def test_occluder_band(self):
        image = render_view(self.prior, self.texture, PoseSE3.identity(), self.K, occluder_rows=10)
        mask = occluder_mask(self.K, 10)
        self.assertEqual(int(mask.sum()), 10 * self.K.width)
        self.assertTrue(np.all(image[mask] < 50))

    def test_make_texture(self):
        self.assertIsInstance(make_texture("brick"), ProceduralTexture)
        with self.assertRaises(FileNotFoundError):
            make_texture("/nonexistent/skyline.png")


class TestSimulateDataset(unittest.TestCase):

    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()
        self.K = CameraIntrinsics.from_fov(24, 32, math.radians(60))

    def tearDown(self):
        if os.path.exists(self.temp_dir):
            shutil.rmtree(self.temp_dir)

    def test_writes_frames_and_manifest(self):
        spec = TrajectorySpec(images_per_rotation=4, rotation_count=2, translation_noise_sd=(0.02, 0.01, 0.02))
        frames, manifest = simulate_dataset(spec, Cylinder(3.0), self.K, seed=3, output_dir=self.temp_dir,
                                            occluder_rows=4)
        self.assertEqual(len(frames), 8)
        self.assertEqual(len(manifest), 8)
        self.assertEqual([index for index, _ in list_frames(self.temp_dir)], list(range(8)))
        np.testing.assert_array_equal(load_image(os.path.join(self.temp_dir, "frame_0003.png")), frames[3].image)
        pd.testing.assert_frame_equal(read_pose_table(os.path.join(self.temp_dir, "groundtruth.csv")), manifest)
        indices, poses = load_groundtruth(os.path.join(self.temp_dir, "groundtruth.csv"))
        self.assertEqual(indices, list(range(8)))
        np.testing.assert_array_equal(poses[5].translation, frames[5].pose_gt.translation)
        np.testing.assert_array_equal(load_mask(os.path.join(self.temp_dir, "mask.png")), occluder_mask(self.K, 4))

    def test_without_output_dir(self):
        frames, manifest = simulate_dataset(TrajectorySpec(images_per_rotation=2, rotation_count=1), Cylinder(3.0),
                                            self.K)
        self.assertEqual(len(frames), 2)
        self.assertEqual(list(manifest.columns[:4]), ["frame_index", "tx", "ty", "tz"])
        self.assertEqual(os.listdir(self.temp_dir), [])


if __name__ == "__main__":
    unittest.main()
