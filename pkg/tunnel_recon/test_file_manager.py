"""
Test script for the on-disk artifacts of a run.

This script covers:
- PNG frames and masks
- Pose manifests and correspondence files
- PLY pointclouds (binary and ascii)
- JSON summaries and partial-output markers
"""
import os
import shutil
import sys
import tempfile
import unittest

import numpy as np
import pandas as pd

# Add parent directory to path if running directly
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from utils.file_manager import (MATCH_COLUMNS, POSE_COLUMNS, PlyWriter, clear_partial, frame_path, list_frames,
                                load_image, load_mask, mark_partial, partial_marker, read_json, read_matches,
                                read_ply, read_pose_table, read_poses, remove_stale_outputs, save_image, save_mask,
                                write_json, write_matches, write_ply, write_poses)
from utils.geometry import PoseSE3, rotation_about_axis


class TestFileManager(unittest.TestCase):
    """Test suite for run artifact I/O."""

    def setUp(self):
        """Create a temporary directory for file operations."""
        self.temp_dir = tempfile.mkdtemp()

    def tearDown(self):
        """Remove the temporary directory."""
        if os.path.exists(self.temp_dir):
            shutil.rmtree(self.temp_dir)

    def path(self, name):
        return os.path.join(self.temp_dir, name)

    def test_image_round_trip(self):
        """Test that frames survive PNG encoding unchanged."""
        image = np.random.default_rng(0).integers(0, 256, size=(12, 9, 3), dtype=np.uint8)
        save_image(self.path("frame_0000.png"), image)
        np.testing.assert_array_equal(load_image(self.path("frame_0000.png")), image)

    def test_mask_round_trip(self):
        """Test that masks load back as booleans."""
        mask = np.zeros((8, 6), bool)
        mask[5:, :] = True
        save_mask(self.path("mask.png"), mask)
        loaded = load_mask(self.path("mask.png"))
        self.assertEqual(loaded.dtype, bool)
        np.testing.assert_array_equal(loaded, mask)

    def test_list_frames_sorted_by_index(self):
        """Test that frames are listed by index and stray files are skipped."""
        image = np.zeros((2, 2, 3), np.uint8)
        for index in (10, 2, 0):
            save_image(frame_path(self.temp_dir, index), image)
        save_image(self.path("frame_extra.png"), image)
        with self.assertLogs("utils.file_manager", level="WARNING"):
            frames = list_frames(self.temp_dir)
        self.assertEqual([index for index, _ in frames], [0, 2, 10])
        self.assertTrue(frames[0][1].endswith("frame_0000.png"))

    def test_pose_manifest_round_trip(self):
        """Test that poses are written with full precision."""
        poses = [PoseSE3(rotation_about_axis(0.1 * k), [0.01 * k, 0.15 * k, -0.3]) for k in range(5)]
        written = write_poses(self.path("poses.csv"), poses, frame_indices=[3, 4, 5, 6, 7])
        self.assertEqual(list(written.columns), POSE_COLUMNS)
        indices, loaded = read_poses(self.path("poses.csv"))
        self.assertEqual(indices, [3, 4, 5, 6, 7])
        for a, b in zip(poses, loaded):
            np.testing.assert_array_equal(a.translation, b.translation)
            np.testing.assert_allclose(a.rotation, b.rotation, atol=1e-15)

    def test_pose_manifest_errors(self):
        """Test missing files and missing columns."""
        with self.assertRaises(FileNotFoundError):
            read_pose_table(self.path("missing.csv"))
        pd.DataFrame({"frame_index": [0], "tx": [0.0]}).to_csv(self.path("bad.csv"), index=False)
        with self.assertRaises(ValueError):
            read_pose_table(self.path("bad.csv"))

    def test_matches_round_trip(self):
        """Test the whitespace-separated correspondence format."""
        matches = pd.DataFrame([[0, 1, 10.25, 20.5, 11.125, 21.0, 1.0], [3, 13, 0.1, 0.2, 0.3, 0.4, 0.5]],
                               columns=MATCH_COLUMNS)
        matches["inlier"] = [True, False]
        write_matches(self.path("matches.txt"), matches)
        with open(self.path("matches.txt"), encoding="utf-8") as handle:
            self.assertTrue(handle.readline().startswith("# frame_i"))
        pd.testing.assert_frame_equal(read_matches(self.path("matches.txt")), matches[MATCH_COLUMNS])
        with self.assertRaises(FileNotFoundError):
            read_matches(self.path("none.txt"))

    def test_ply_round_trip(self):
        """Test both PLY encodings with three known points."""
        positions = np.array([[0.0, 1.0, 2.0], [-1.5, 1e-9, 3.0], [1.0 / 3.0, 2.0, -3.0]])
        colors = np.array([[255, 0, 0], [0, 255, 0], [1, 2, 3]], np.uint8)
        for binary in (True, False):
            path = self.path(f"points_{binary}.ply")
            write_ply(path, positions, colors, binary=binary)
            loaded_positions, loaded_colors = read_ply(path)
            np.testing.assert_array_equal(loaded_positions, positions)
            np.testing.assert_array_equal(loaded_colors, colors)

    def test_ply_writer_streams_batches(self):
        """Test that the header count is patched after streaming."""
        rng = np.random.default_rng(1)
        with PlyWriter(self.path("stream.ply")) as writer:
            for _ in range(3):
                writer.write(rng.normal(size=(100, 3)), rng.integers(0, 256, (100, 3)))
        self.assertEqual(writer.count, 300)
        positions, _ = read_ply(self.path("stream.ply"))
        self.assertEqual(len(positions), 300)

    def test_read_ply_rejects_other_files(self):
        """Test that non-PLY input is refused."""
        with open(self.path("notes.ply"), "w", encoding="utf-8") as handle:
            handle.write("hello\n")
        with self.assertRaises(ValueError):
            read_ply(self.path("notes.ply"))

    def test_json_round_trip(self):
        """Test summary JSON with non-ASCII text."""
        payload = {"seed": 0, "atlas_shape": [10, 20], "note": "tunnel é"}
        write_json(self.path("summary.json"), payload)
        self.assertEqual(read_json(self.path("summary.json")), payload)

    def test_partial_markers(self):
        """Test marking, clearing and removing stale outputs."""
        output = self.path("cloud.ply")
        write_ply(output, np.zeros((1, 3)), np.zeros((1, 3), np.uint8))
        mark_partial([output, self.path("never_written.csv")])
        self.assertTrue(os.path.exists(partial_marker(output)))
        self.assertFalse(os.path.exists(partial_marker(self.path("never_written.csv"))))
        clear_partial(output)
        self.assertFalse(os.path.exists(partial_marker(output)))

        directory = self.path("frames")
        os.makedirs(directory)
        mark_partial([output])
        remove_stale_outputs([output, directory])
        self.assertFalse(os.path.exists(output))
        self.assertFalse(os.path.exists(partial_marker(output)))
        self.assertFalse(os.path.exists(directory))


if __name__ == "__main__":
    unittest.main()
