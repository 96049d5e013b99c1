"""
Tests for triangulation, the three pruning stages and the Levenberg-Marquardt
bundle adjustment.
"""
import math
import os
import shutil
import sys
import tempfile
import unittest
from unittest.mock import patch

import numpy as np
import pandas as pd

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import config
from utils.bundle_adjustment import (ABLATION_CONFIGS, ACTIVE, PRUNED_GEOMETRY, PRUNED_MASK, PRUNED_REPROJECTION,
                                     REPORT_COLUMNS, UNTRIANGULATED, BAProblem, PruningConfig, SolverConfig, Track,
                                     TriangulationError, ablation_report, apply_increment, count_status,
                                     _LevenbergMarquardt, optimize, prepare_tracks, prune_geometry, prune_mask,
                                     prune_reprojection, reprojection_jacobian, track_reprojection_errors,
                                     triangulate, triangulate_tracks, tracks_from_match_table)
from utils.correspondence import build_match_graph, synthesize_matches
from utils.geometry import CameraIntrinsics, Cylinder, PoseSE3, project, rotation_about_axis, rotation_angle
from utils.simulator import TrajectorySpec, generate_trajectory


def observe(pose, point, K):
    return project(K, pose.to_camera(point))


def spiral_matches(poses, prior, K, count, pixel_noise_sd=0.0, outlier_fraction=0.0, seed=0):
    edges = build_match_graph(len(poses), 10)
    return pd.concat([synthesize_matches(poses[i], poses[j], prior, K, count, pixel_noise_sd, outlier_fraction,
                                         seed=[seed, i, j], frame_i=i, frame_j=j) for i, j in edges],
                     ignore_index=True)


def perturb(poses, rng, degrees=2.0, meters=0.02):
    out = [poses[0], poses[1]]
    for pose in poses[2:]:
        axis = rng.normal(size=3)
        rotation = pose.rotation @ rotation_about_axis(math.radians(degrees) * rng.uniform(0.5, 1.0), axis)
        offset = rng.normal(size=3)
        out.append(PoseSE3(rotation, pose.translation + meters * offset / np.linalg.norm(offset)))
    return out


class TestTriangulate(unittest.TestCase):

    def setUp(self):
        self.K = CameraIntrinsics.from_fov(480, 640, math.radians(60))
        self.pose_i = PoseSE3(np.eye(3), [0.2, 0.0, -0.3])
        self.pose_j = PoseSE3(rotation_about_axis(math.radians(36)), [0.2, 0.15, -0.3])

    def test_noiseless_two_views(self):
        point = np.array([0.3, 0.1, 2.6])
        track = Track(frames=[0, 1], pixels=[observe(self.pose_i, point, self.K), observe(self.pose_j, point, self.K)])
        np.testing.assert_allclose(triangulate(track, [self.pose_i, self.pose_j], self.K), point, atol=1e-6)

    def test_pixel_noise(self):
        K = CameraIntrinsics(f=3800.0, cx=2000.0, cy=1500.0, width=4000, height=3000)
        poses = [PoseSE3.identity(), PoseSE3(np.eye(3), [0.15, 0.0, 0.0])]
        point = np.array([0.07, 0.05, 3.0])
        clean = np.array([observe(p, point, K) for p in poses])
        rng = np.random.default_rng(config.SEED)
        errors = [np.linalg.norm(triangulate(Track([0, 1], clean + rng.normal(0.0, 0.5, (2, 2))), poses, K) - point)
                  for _ in range(200)]
        self.assertLess(float(np.median(errors)), 0.02)

    def test_identical_poses(self):
        point = np.array([0.3, 0.1, 2.6])
        pixel = observe(self.pose_i, point, self.K)
        with self.assertRaises(TriangulationError):
            triangulate(Track([0, 1], [pixel, pixel]), [self.pose_i, self.pose_i], self.K)

    def test_batch_marks_untriangulated(self):
        point = np.array([0.3, 0.1, 2.6])
        good = Track([0, 1], [observe(self.pose_i, point, self.K), observe(self.pose_j, point, self.K)])
        parallel = Track([0, 2], [observe(self.pose_i, point, self.K)] * 2)
        tracks = triangulate_tracks([good, parallel], [self.pose_i, self.pose_j, self.pose_i], self.K)
        self.assertEqual(tracks[0].status, ACTIVE)
        np.testing.assert_allclose(tracks[0].point3d, point, atol=1e-6)
        self.assertEqual(tracks[1].status, UNTRIANGULATED)
        self.assertIsNone(tracks[1].point3d)

    def test_track_validation(self):
        with self.assertRaises(ValueError):
            Track([0], [[1.0, 2.0]])
        with self.assertRaises(ValueError):
            Track([0, 1], [[1.0, 2.0], [3.0, 4.0]], status="lost")


class TestJacobian(unittest.TestCase):

    def test_matches_central_differences(self):
        K = CameraIntrinsics.from_fov(480, 640, math.radians(60), k1=0.01, k2=-0.002)
        rng = np.random.default_rng(config.SEED)
        h = 1e-6
        for _ in range(20):
            pose = PoseSE3.from_rotvec(rng.normal(scale=0.5, size=3), rng.normal(size=3))
            point = pose.apply(np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(2, 5)]))
            J_cam, J_pt = reprojection_jacobian(pose, point, K)
            numeric_cam = np.column_stack([
                (observe(apply_increment(pose, h * e), point, K) - observe(apply_increment(pose, -h * e), point, K))
                / (2 * h) for e in np.eye(6)])
            numeric_pt = np.column_stack([
                (observe(pose, point + h * e, K) - observe(pose, point - h * e, K)) / (2 * h) for e in np.eye(3)])
            scale = max(np.abs(numeric_cam).max(), np.abs(numeric_pt).max())
            np.testing.assert_allclose(J_cam, numeric_cam, atol=1e-5 * scale)
            np.testing.assert_allclose(J_pt, numeric_pt, atol=1e-5 * scale)


class TestPruning(unittest.TestCase):

    def setUp(self):
        self.K = CameraIntrinsics.from_fov(480, 640, math.radians(60))
        self.prior = Cylinder(3.0)
        self.poses = [PoseSE3(np.eye(3), [0.2, 0.0, -0.3]),
                      PoseSE3(rotation_about_axis(math.radians(36)), [0.2, 0.15, -0.3])]

    def make_track(self, point, corruption=0.0):
        pixels = np.array([observe(p, point, self.K) for p in self.poses])
        pixels[1, 0] += corruption
        return Track([0, 1], pixels, point3d=np.asarray(point, float))

    def test_geometry(self):
        on_wall = self.make_track([0.0, 0.1, 3.0])
        inside = self.make_track([0.0, 0.1, 1.5])
        already = Track([0, 1], [[1.0, 1.0], [2.0, 2.0]], point3d=np.array([0.0, 0.0, 1.0]), status=PRUNED_MASK)
        tracks = prune_geometry([on_wall, inside, already], self.prior, 0.3)
        self.assertEqual([t.status for t in tracks], [ACTIVE, PRUNED_GEOMETRY, PRUNED_MASK])
        self.assertIs(tracks[0], on_wall)

    def test_reprojection(self):
        clean = self.make_track([0.3, 0.1, 2.6])
        corrupted = self.make_track([0.3, 0.1, 2.6], corruption=50.0)
        tracks = prune_reprojection([clean, corrupted], self.poses, self.K, 3.0)
        self.assertEqual([t.status for t in tracks], [ACTIVE, PRUNED_REPROJECTION])
        self.assertEqual(prune_reprojection([clean], self.poses, self.K, 1e-6)[0].status, ACTIVE)
        errors = track_reprojection_errors([clean, corrupted], self.poses, self.K)
        self.assertAlmostEqual(errors[1], 50.0, delta=1e-6)

    def test_reprojection_fraction_is_monotone(self):
        rng = np.random.default_rng(config.SEED)
        tracks = []
        for _ in range(300):
            point = np.array([rng.uniform(-0.5, 0.8), rng.uniform(-0.5, 0.5), rng.uniform(2.0, 3.0)])
            tracks.append(self.make_track(point, corruption=abs(rng.normal(0.0, 4.0))))
        fractions = [count_status(prune_reprojection(tracks, self.poses, self.K, t), PRUNED_REPROJECTION)
                     for t in np.linspace(0.5, 10.0, 20)]
        self.assertTrue(np.all(np.diff(fractions) <= 0))
        self.assertGreater(fractions[0], fractions[-1])

    def test_mask(self):
        mask = np.zeros((640, 480), bool)
        mask[600:, :] = True
        low = Track([0, 1], [[10.0, 620.0], [12.0, 100.0]])
        high = Track([0, 1], [[10.0, 20.0], [12.0, 100.0]])
        tracks = prune_mask([low, high], mask)
        self.assertEqual([t.status for t in tracks], [PRUNED_MASK, ACTIVE])
        self.assertEqual(prune_mask([low], None)[0].status, ACTIVE)

    def test_stages_compose(self):
        tracks = [self.make_track([0.0, 0.1, 3.0]), self.make_track([0.0, 0.1, 1.5]),
                  self.make_track([0.3, 0.1, 2.95], corruption=20.0), self.make_track([0.0, 0.1, 1.5], 20.0)]
        staged = prune_reprojection(prune_geometry(tracks, self.prior, 0.3), self.poses, self.K, 3.0)
        distances = self.prior.surface_distance(np.stack([t.point3d for t in tracks]))
        errors = track_reprojection_errors(tracks, self.poses, self.K)
        self.assertEqual([t.status == ACTIVE for t in staged], list((distances <= 0.3) & (errors <= 3.0)))


class SpiralTestCase(unittest.TestCase):

    def setUp(self):
        self.K = CameraIntrinsics.from_fov(240, 320, math.radians(60))
        self.prior = Cylinder(3.0)
        self.gt = generate_trajectory(TrajectorySpec(images_per_rotation=10, rotation_count=2))


class TestOptimize(SpiralTestCase):

    def test_groundtruth_is_a_fixed_point(self):
        matches = spiral_matches(self.gt, self.prior, self.K, 40, seed=1)
        tracks = prepare_tracks(matches, self.gt, self.K, self.prior, PruningConfig())
        poses, tracks, report = optimize(BAProblem(self.gt, tracks, self.K, self.prior))
        self.assertLess(report.before_px, 1e-6)
        self.assertLess(report.after_px, 1e-6)
        self.assertTrue(report.converged)
        for estimate, truth in zip(poses, self.gt):
            np.testing.assert_allclose(estimate.translation, truth.translation, atol=1e-8)

    def test_recovers_perturbed_poses(self):
        matches = spiral_matches(self.gt, self.prior, self.K, 40, seed=2)
        initial = perturb(self.gt, np.random.default_rng(config.SEED))
        tracks = prepare_tracks(matches, initial, self.K, self.prior, PruningConfig(use_geometry=False))
        pruning = PruningConfig(use_reprojection=False)
        poses, _, report = optimize(BAProblem(initial, tracks, self.K, self.prior, pruning))
        self.assertGreater(report.before_px, 0.1)
        self.assertLess(report.after_px, 1e-4)
        self.assertLessEqual(report.after_px, report.before_px)
        for estimate, truth in zip(poses, self.gt):
            self.assertLess(math.degrees(rotation_angle(estimate.rotation.T @ truth.rotation)), 1e-3)
            np.testing.assert_allclose(estimate.translation, truth.translation, atol=1e-4)

    def test_noisy_observations(self):
        matches = spiral_matches(self.gt, self.prior, self.K, 40, pixel_noise_sd=0.5, seed=3)
        tracks = prepare_tracks(matches, self.gt, self.K, self.prior, PruningConfig())
        _, tracks, report = optimize(BAProblem(self.gt, tracks, self.K, self.prior,
                                               solver=SolverConfig(max_iterations=50)))
        self.assertLessEqual(report.after_px, 1.0)
        self.assertLessEqual(report.after_px, report.before_px)
        self.assertEqual(report.reprojection_threshold, 3.0)
        self.assertTrue(math.isfinite(report.mid_px))

    def test_gauge_invariance(self):
        matches = spiral_matches(self.gt, self.prior, self.K, 30, pixel_noise_sd=0.5, seed=4)
        motion = PoseSE3(rotation_about_axis(0.7), [0.0, 2.0, 0.0])
        moved = [PoseSE3(motion.rotation @ p.rotation, motion.apply(p.translation)) for p in self.gt]
        pruning = PruningConfig(use_reprojection=False)
        solver = SolverConfig(max_iterations=30)
        reports = []
        for poses in (self.gt, moved):
            tracks = prepare_tracks(matches, poses, self.K, self.prior, pruning)
            reports.append(optimize(BAProblem(poses, tracks, self.K, self.prior, pruning, solver))[2])
        self.assertAlmostEqual(reports[0].after_px, reports[1].after_px, delta=1e-6)
        self.assertEqual(reports[0].pruned_geometry, reports[1].pruned_geometry)

    def test_iteration_cap_is_not_convergence(self):
        matches = spiral_matches(self.gt, self.prior, self.K, 40, seed=6)
        initial = perturb(self.gt, np.random.default_rng(7))
        pruning = PruningConfig(use_geometry=False, use_reprojection=False)
        tracks = prepare_tracks(matches, initial, self.K, self.prior, pruning)
        with self.assertLogs("utils.bundle_adjustment", level="WARNING"):
            _, _, report = optimize(BAProblem(initial, tracks, self.K, self.prior, pruning,
                                              SolverConfig(max_iterations=1)))
        self.assertEqual(report.iterations, 1)
        self.assertFalse(report.converged)

    def test_stalled_descent_is_not_convergence(self):
        matches = spiral_matches(self.gt, self.prior, self.K, 40, seed=8)
        initial = perturb(self.gt, np.random.default_rng(9))
        pruning = PruningConfig(use_geometry=False, use_reprojection=False)
        tracks = prepare_tracks(matches, initial, self.K, self.prior, pruning)
        real_cost = _LevenbergMarquardt._cost
        calls = []

        def every_step_is_worse(solver, rotations, centers, points):
            calls.append(1)
            if len(calls) == 1:
                return real_cost(solver, rotations, centers, points)
            return float("inf"), True

        with patch.object(_LevenbergMarquardt, "_cost", autospec=True, side_effect=every_step_is_worse):
            with self.assertLogs("utils.bundle_adjustment", level="WARNING") as logs:
                poses, _, report = optimize(BAProblem(initial, tracks, self.K, self.prior, pruning))
        self.assertFalse(report.converged)
        self.assertTrue(any("stalled" in line for line in logs.output))
        for estimate, start in zip(poses, initial):
            np.testing.assert_array_equal(estimate.translation, start.translation)

    def test_tracks_from_match_table(self):
        matches = spiral_matches(self.gt[:3], self.prior, self.K, 5, outlier_fraction=0.4, seed=5)
        tracks = tracks_from_match_table(matches)
        self.assertEqual(len(tracks), 10)
        self.assertEqual(sum(not t.inlier for t in tracks), int((~matches["inlier"]).sum()))


class TestAblation(SpiralTestCase):

    def setUp(self):
        super().setUp()
        self.temp_dir = tempfile.mkdtemp()

    def tearDown(self):
        if os.path.exists(self.temp_dir):
            shutil.rmtree(self.temp_dir)

    def test_noiseless_configs_are_exact(self):
        matches = spiral_matches(self.gt, self.prior, self.K, 20, seed=6)
        table = ablation_report(matches, self.gt, self.K, self.prior, solver=SolverConfig(max_iterations=10))
        self.assertEqual(list(table["config"]), list(ABLATION_CONFIGS))
        self.assertTrue(np.all(table["after_px"] < 1e-6))

    def test_pruning_beats_plain_adjustment(self):
        if config.SLOW_TESTS:
            self.gt = generate_trajectory(TrajectorySpec(images_per_rotation=10, rotation_count=10))
        matches = spiral_matches(self.gt, self.prior, self.K, 40, pixel_noise_sd=0.5, outlier_fraction=0.15, seed=7)
        path = os.path.join(self.temp_dir, "ba-report.csv")
        table = ablation_report(matches, self.gt, self.K, self.prior, configs=["SBA", "P1+P2", "P1+P2+P3"],
                                pruning=PruningConfig(geometry_tolerance=0.3), solver=SolverConfig(max_iterations=30),
                                path=path)
        self.assertEqual(len(table), 3)
        after = dict(zip(table["config"], table["after_px"]))
        self.assertLess(after["P1+P2"], after["SBA"])
        self.assertLessEqual(after["P1+P2+P3"], 1.0)
        self.assertGreaterEqual(after["SBA"], 5 * after["P1+P2+P3"])
        written = pd.read_csv(path)
        self.assertEqual(list(written.columns), REPORT_COLUMNS)
        self.assertEqual(int(written.loc[0, "pruned_p2"]), 0)
        self.assertGreater(int(written.loc[1, "pruned_p2"]), 0)

    def test_unknown_config(self):
        with self.assertRaises(ValueError):
            ablation_report(pd.DataFrame(columns=["frame_i", "frame_j", "x_i", "y_i", "x_j", "y_j", "weight"]),
                            self.gt, self.K, self.prior, configs=["P4"])


if __name__ == "__main__":
    unittest.main()
