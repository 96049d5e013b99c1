"""
Tests for match synthesis, static masking, the match graph and tracks.
"""
import math
import os
import sys
import unittest

import numpy as np
import pandas as pd

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from utils.correspondence import (MatchGraph, NoOverlapError, apply_static_mask, build_match_graph, empty_matches,
                                  epipolar_distances, mask_lookup, synthesize_matches, synthesize_static_matches,
                                  tracks_from_matches)
from utils.geometry import CameraIntrinsics, Cylinder, PoseSE3, rotation_about_axis
from utils.simulator import occluder_mask


def match_table(rows):
    return pd.DataFrame(rows, columns=["frame_i", "frame_j", "x_i", "y_i", "x_j", "y_j", "weight"])


class TestSynthesizeMatches(unittest.TestCase):

    def setUp(self):
        self.K = CameraIntrinsics.from_fov(480, 640, math.radians(60))
        self.prior = Cylinder(3.0)
        self.pose_i = PoseSE3(np.eye(3), [0.2, 0.0, -0.3])
        self.pose_j = PoseSE3(rotation_about_axis(math.radians(36)), [0.2, 0.15, -0.3])

    def test_identical_poses(self):
        matches = synthesize_matches(self.pose_i, self.pose_i, self.prior, self.K, 200, seed=1)
        self.assertEqual(len(matches), 200)
        np.testing.assert_allclose(matches[["x_i", "y_i"]].to_numpy(), matches[["x_j", "y_j"]].to_numpy(), atol=1e-6)

    def test_rotated_pair_satisfies_epipolar_constraint(self):
        matches = synthesize_matches(self.pose_i, self.pose_j, self.prior, self.K, 500, seed=2)
        self.assertTrue(matches["inlier"].all())
        self.assertLess(float(epipolar_distances(matches, self.pose_i, self.pose_j, self.K).max()), 1e-6)
        self.assertTrue(self.K.in_bounds(matches[["x_j", "y_j"]].to_numpy()).all())

    def test_pixel_noise_bound(self):
        matches = synthesize_matches(self.pose_i, self.pose_j, self.prior, self.K, 2000, pixel_noise_sd=0.5, seed=3)
        distances = epipolar_distances(matches, self.pose_i, self.pose_j, self.K)
        # Both endpoints carry noise, so the residual spread is about sqrt(2) * 0.5 px.
        self.assertGreaterEqual(float(np.mean(distances <= 3 * math.sqrt(2) * 0.5)), 0.98)

    def test_outlier_fraction(self):
        matches = synthesize_matches(self.pose_i, self.pose_j, self.prior, self.K, 10000, outlier_fraction=0.3,
                                     seed=4)
        self.assertEqual(int((~matches["inlier"]).sum()), 3000)
        violating = float(np.mean(epipolar_distances(matches, self.pose_i, self.pose_j, self.K) > 5.0))
        self.assertGreaterEqual(violating, 0.29)
        self.assertLessEqual(violating, 0.31)

    def test_deterministic_per_seed(self):
        a = synthesize_matches(self.pose_i, self.pose_j, self.prior, self.K, 300, 0.5, 0.2, seed=[7, 0, 1])
        b = synthesize_matches(self.pose_i, self.pose_j, self.prior, self.K, 300, 0.5, 0.2, seed=[7, 0, 1])
        c = synthesize_matches(self.pose_i, self.pose_j, self.prior, self.K, 300, 0.5, 0.2, seed=[7, 0, 2])
        pd.testing.assert_frame_equal(a, b)
        self.assertFalse(a.equals(c))

    def test_occluded_pixels_get_no_inliers(self):
        mask = occluder_mask(self.K, 100)
        matches = synthesize_matches(self.pose_i, self.pose_j, self.prior, self.K, 500, seed=5, occluded=mask)
        self.assertFalse(mask_lookup(mask, matches[["x_i", "y_i"]].to_numpy()).any())
        self.assertFalse(mask_lookup(mask, matches[["x_j", "y_j"]].to_numpy()).any())

    def test_no_overlap(self):
        opposite = PoseSE3(rotation_about_axis(math.pi), [0.2, 0.0, -0.3])
        with self.assertRaises(NoOverlapError):
            synthesize_matches(self.pose_i, opposite, self.prior, self.K, 50, seed=6)

    def test_static_matches_stay_put(self):
        mask = occluder_mask(self.K, 40)
        matches = synthesize_static_matches(mask, 100, seed=8, frame_i=3, frame_j=4)
        self.assertEqual(len(matches), 100)
        np.testing.assert_array_equal(matches[["x_i", "y_i"]].to_numpy(), matches[["x_j", "y_j"]].to_numpy())
        self.assertTrue(mask_lookup(mask, matches[["x_i", "y_i"]].to_numpy()).all())
        self.assertFalse(matches["inlier"].any())


class TestStaticMask(unittest.TestCase):

    def setUp(self):
        rng = np.random.default_rng(0)
        count = 400
        self.matches = match_table({
            "frame_i": np.zeros(count, int), "frame_j": np.ones(count, int),
            "x_i": rng.uniform(0, 48, count), "y_i": rng.uniform(0, 64, count),
            "x_j": rng.uniform(0, 48, count), "y_j": rng.uniform(0, 64, count),
            "weight": np.ones(count),
        })

    def test_empty_mask_is_identity(self):
        kept, removed = apply_static_mask(self.matches, np.zeros((64, 48), bool))
        self.assertEqual(removed, 0)
        pd.testing.assert_frame_equal(kept, self.matches)
        kept, removed = apply_static_mask(self.matches, None)
        self.assertEqual(removed, 0)

    def test_full_mask_removes_everything(self):
        kept, removed = apply_static_mask(self.matches, np.ones((64, 48), bool))
        self.assertEqual(len(kept), 0)
        self.assertEqual(removed, len(self.matches))

    def test_bottom_quarter(self):
        mask = np.zeros((64, 48), bool)
        mask[48:, :] = True
        kept, removed = apply_static_mask(self.matches, mask)
        expected = self.matches[(self.matches["y_i"] < 48) & (self.matches["y_j"] < 48)].reset_index(drop=True)
        pd.testing.assert_frame_equal(kept, expected)
        self.assertEqual(removed, len(self.matches) - len(expected))

    def test_idempotent(self):
        mask = np.zeros((64, 48), bool)
        mask[:10, :20] = True
        once, _ = apply_static_mask(self.matches, mask)
        twice, removed = apply_static_mask(once, mask)
        self.assertEqual(removed, 0)
        pd.testing.assert_frame_equal(once, twice)

    def test_per_frame_masks(self):
        mask = np.ones((64, 48), bool)
        kept, removed = apply_static_mask(self.matches, {5: mask})
        self.assertEqual(removed, 0)
        kept, removed = apply_static_mask(self.matches, {1: mask})
        self.assertEqual(len(kept), 0)


class TestMatchGraph(unittest.TestCase):

    def test_short_sequence(self):
        self.assertEqual(build_match_graph(3, 10), [(0, 1), (1, 2)])

    def test_same_azimuth_edges(self):
        edges = build_match_graph(12, 10)
        self.assertIn((0, 10), edges)
        self.assertIn((1, 11), edges)

    def test_edge_count(self):
        for frame_count, n in ((2, 1), (12, 10), (100, 10), (7, 3)):
            edges = build_match_graph(frame_count, n)
            self.assertEqual(len(edges), len(set(edges)))
            expected = (frame_count - 1) + max(0, frame_count - n) - (frame_count - 1 if n == 1 else 0)
            self.assertEqual(len(edges), expected)
            self.assertTrue(all(0 <= i < j < frame_count for i, j in edges))

    def test_rejects_single_frame(self):
        with self.assertRaises(ValueError):
            build_match_graph(1, 10)

    def test_graph_helpers(self):
        matches = match_table([[0, 1, 1.0, 2.0, 3.0, 4.0, 1.0], [1, 2, 1.0, 2.0, 3.0, 4.0, 1.0]])
        graph = MatchGraph.build(4, 2, matches)
        self.assertEqual(len(graph.edge_matches(0, 1)), 1)
        self.assertEqual(graph.loop_edges(), [(0, 2), (1, 3)])
        self.assertTrue(graph.is_connected())
        self.assertFalse(MatchGraph(3, [(0, 1)]).is_connected())
        self.assertEqual(len(empty_matches()), 0)


class TestTracks(unittest.TestCase):

    def test_shared_observation_joins_tracks(self):
        matches = match_table([
            [0, 1, 10.0, 20.0, 11.0, 21.0, 1.0],
            [1, 2, 11.0, 21.0, 12.0, 22.0, 1.0],
            [0, 1, 30.0, 30.0, 31.0, 31.0, 1.0],
        ])
        tracks, inliers = tracks_from_matches(matches)
        self.assertEqual(len(tracks), 2)
        self.assertEqual(tracks[0], [(0, 10.0, 20.0), (1, 11.0, 21.0), (2, 12.0, 22.0)])
        self.assertEqual(tracks[1], [(0, 30.0, 30.0), (1, 31.0, 31.0)])
        self.assertTrue(inliers.all())

    def test_outlier_label_taints_track(self):
        matches = match_table([
            [0, 1, 10.0, 20.0, 11.0, 21.0, 1.0],
            [1, 2, 11.0, 21.0, 12.0, 22.0, 1.0],
        ])
        matches["inlier"] = [True, False]
        _, inliers = tracks_from_matches(matches)
        np.testing.assert_array_equal(inliers, [False])


if __name__ == "__main__":
    unittest.main()
