#!/usr/bin/env python3
"""
file_manager.py
----------------
Reading and writing every on-disk artifact of a run: PNG frames and masks,
pose manifests, correspondence files, PLY pointclouds, JSON summaries and
`.partial` markers.
"""
import glob
import json
import logging
import os
import shutil
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from PIL import Image

from utils.geometry import PoseSE3

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"
POSE_COLUMNS = ["frame_index", "tx", "ty", "tz", "rx", "ry", "rz"]
MATCH_COLUMNS = ["frame_i", "frame_j", "x_i", "y_i", "x_j", "y_j", "weight"]
FRAME_PATTERN = "frame_%04d.png"
PARTIAL_SUFFIX = ".partial"

PLY_PROPERTIES = [("x", "<f8", "double"), ("y", "<f8", "double"), ("z", "<f8", "double"),
                  ("red", "u1", "uchar"), ("green", "u1", "uchar"), ("blue", "u1", "uchar")]
PLY_DTYPE = np.dtype([(name, dtype) for name, dtype, _ in PLY_PROPERTIES])


# --------------------------------------------------------------------------
# Images
# --------------------------------------------------------------------------

def save_image(path: str, image: np.ndarray) -> None:
    """Write an 8-bit RGB (H, W, 3) or grayscale (H, W) array as PNG."""
    Image.fromarray(np.ascontiguousarray(image, dtype=np.uint8)).save(path, format="PNG")


def load_image(path: str) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8).copy()


def save_mask(path: str, mask: np.ndarray) -> None:
    save_image(path, np.where(mask, 255, 0).astype(np.uint8))


def load_mask(path: str) -> np.ndarray:
    """Load a mask PNG; any nonzero pixel is masked."""
    with Image.open(path) as img:
        return np.asarray(img.convert("L")) > 0


def frame_path(directory: str, index: int) -> str:
    return os.path.join(directory, FRAME_PATTERN % index)


def list_frames(directory: str) -> List[Tuple[int, str]]:
    """Return (frame_index, path) for every frame_%04d.png in `directory`, sorted by index."""
    found = []
    for path in glob.glob(os.path.join(directory, "frame_*.png")):
        stem = os.path.splitext(os.path.basename(path))[0]
        try:
            found.append((int(stem.split("_", 1)[1]), path))
        except ValueError:
            logger.warning(f"Skipping unrecognised frame file {path}")
    return sorted(found)


# --------------------------------------------------------------------------
# Poses
# --------------------------------------------------------------------------

def poses_to_frame(poses: Sequence[PoseSE3], frame_indices: Optional[Sequence[int]] = None) -> pd.DataFrame:
    if frame_indices is None:
        frame_indices = range(len(poses))
    rows = []
    for index, pose in zip(frame_indices, poses):
        rv = pose.as_rotvec()
        t = pose.translation
        rows.append([int(index), t[0], t[1], t[2], rv[0], rv[1], rv[2]])
    df = pd.DataFrame(rows, columns=POSE_COLUMNS)
    return df.astype({"frame_index": int})


def frame_to_poses(df: pd.DataFrame) -> Tuple[List[int], List[PoseSE3]]:
    df = df.sort_values("frame_index", kind="stable")
    poses = [PoseSE3.from_rotvec(row[["rx", "ry", "rz"]].to_numpy(float), row[["tx", "ty", "tz"]].to_numpy(float))
             for _, row in df.iterrows()]
    return df["frame_index"].astype(int).tolist(), poses


def write_poses(path: str, poses: Sequence[PoseSE3], frame_indices: Optional[Sequence[int]] = None) -> pd.DataFrame:
    """Write a pose manifest (frame_index, translation, axis-angle rotation) and return it."""
    df = poses_to_frame(poses, frame_indices)
    df.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    logger.info(f"Wrote {len(df)} poses to {path}")
    return df


def read_pose_table(path: str) -> pd.DataFrame:
    if not os.path.exists(path):
        raise FileNotFoundError(f"pose manifest not found: {path}")
    df = pd.read_csv(path, float_precision="round_trip")
    missing = set(POSE_COLUMNS) - set(df.columns)
    if missing:
        raise ValueError(f"{path} lacks column(s) {sorted(missing)}")
    return df


def read_poses(path: str) -> Tuple[List[int], List[PoseSE3]]:
    return frame_to_poses(read_pose_table(path))


# --------------------------------------------------------------------------
# Correspondences
# --------------------------------------------------------------------------

def write_matches(path: str, matches: pd.DataFrame) -> None:
    """Write `frame_i frame_j x_i y_i x_j y_j weight`, one match per line."""
    with open(path, "w", encoding="utf-8") as handle:
        handle.write("# " + " ".join(MATCH_COLUMNS) + "\n")
        matches[MATCH_COLUMNS].to_csv(handle, sep=" ", header=False, index=False, float_format=FLOAT_FORMAT)
    logger.info(f"Wrote {len(matches)} matches to {path}")


def read_matches(path: str) -> pd.DataFrame:
    if not os.path.exists(path):
        raise FileNotFoundError(f"correspondence file not found: {path}")
    df = pd.read_csv(path, sep=r"\s+", comment="#", header=None, names=MATCH_COLUMNS,
                     float_precision="round_trip")
    return df.astype({"frame_i": int, "frame_j": int})


# --------------------------------------------------------------------------
# Pointclouds
# --------------------------------------------------------------------------

def _ply_header(count: int, fmt: str) -> bytes:
    lines = ["ply", f"format {fmt} 1.0", f"element vertex {count}"]
    lines += [f"property {ply_type} {name}" for name, _, ply_type in PLY_PROPERTIES]
    lines.append("end_header")
    return ("\n".join(lines) + "\n").encode("ascii")


class PlyWriter:
    """
    Streams colored points into a PLY file.

    The vertex count is unknown until the stream ends, so a fixed-width count
    is reserved in the header and patched on close.
    """

    COUNT_WIDTH = 12

    def __init__(self, path: str, binary: bool = True):
        self.path = path
        self.binary = binary
        self.count = 0
        self._fmt = "binary_little_endian" if binary else "ascii"
        self._handle = open(path, "wb")
        self._handle.write(_ply_header(0, self._fmt).replace(
            b"element vertex 0", b"element vertex " + b"0".rjust(self.COUNT_WIDTH)))

    def write(self, positions: np.ndarray, colors: np.ndarray) -> None:
        data = np.empty(len(positions), dtype=PLY_DTYPE)
        for axis, name in enumerate(("x", "y", "z")):
            data[name] = positions[:, axis]
        for axis, name in enumerate(("red", "green", "blue")):
            data[name] = colors[:, axis]
        if self.binary:
            self._handle.write(data.tobytes())
        else:
            for row in data:
                self._handle.write(("%.17g %.17g %.17g %d %d %d\n" % tuple(row)).encode("ascii"))
        self.count += len(data)

    def close(self) -> None:
        self._handle.seek(0)
        self._handle.write(_ply_header(0, self._fmt).replace(
            b"element vertex 0", b"element vertex " + str(self.count).encode("ascii").rjust(self.COUNT_WIDTH)))
        self._handle.close()
        logger.info(f"Wrote {self.count} points to {self.path}")

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        self.close()


def write_ply(path: str, positions: np.ndarray, colors: np.ndarray, binary: bool = True) -> None:
    with PlyWriter(path, binary=binary) as writer:
        writer.write(np.asarray(positions, dtype=float).reshape(-1, 3), np.asarray(colors).reshape(-1, 3))


def read_ply(path: str) -> Tuple[np.ndarray, np.ndarray]:
    """Parse a PLY written by `write_ply`; returns (positions (N, 3), colors (N, 3) uint8)."""
    with open(path, "rb") as handle:
        if handle.readline().strip() != b"ply":
            raise ValueError(f"{path} is not a PLY file")
        fmt, count = None, None
        while True:
            line = handle.readline()
            if not line:
                raise ValueError(f"{path}: header has no end_header")
            words = line.split()
            if words[0] == b"format":
                fmt = words[1].decode("ascii")
            elif words[0] == b"element" and words[1] == b"vertex":
                count = int(words[2])
            elif words[0] == b"end_header":
                break
        if fmt == "binary_little_endian":
            data = np.frombuffer(handle.read(count * PLY_DTYPE.itemsize), dtype=PLY_DTYPE, count=count)
        elif fmt == "ascii":
            text = np.loadtxt(handle, ndmin=2, max_rows=count) if count else np.zeros((0, 6))
            data = np.empty(count, dtype=PLY_DTYPE)
            for column, name in enumerate(PLY_DTYPE.names):
                data[name] = text[:, column]
        else:
            raise ValueError(f"{path}: unsupported PLY format {fmt}")
    positions = np.column_stack([data["x"], data["y"], data["z"]]).astype(float).reshape(-1, 3)
    colors = np.column_stack([data["red"], data["green"], data["blue"]]).astype(np.uint8).reshape(-1, 3)
    return positions, colors


# --------------------------------------------------------------------------
# Run bookkeeping
# --------------------------------------------------------------------------

def write_json(path: str, payload: Dict) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, ensure_ascii=False)


def read_json(path: str) -> Dict:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def partial_marker(path: str) -> str:
    return path + PARTIAL_SUFFIX


def mark_partial(paths: Iterable[str]) -> None:
    """Flag artifacts of a failed stage so they are not mistaken for finished outputs."""
    for path in paths:
        if os.path.exists(path):
            with open(partial_marker(path), "w", encoding="utf-8") as f:
                f.write("incomplete: the stage producing this file failed\n")
            logger.warning(f"Marked {path} as partial")


def clear_partial(path: str) -> None:
    marker = partial_marker(path)
    if os.path.exists(marker):
        os.remove(marker)


def remove_stale_outputs(paths: Iterable[str]) -> None:
    """Remove outputs (and their partial markers) left behind by an earlier run."""
    for path in paths:
        if os.path.isdir(path):
            shutil.rmtree(path)
            logger.info(f"Removed existing directory {path}")
        elif os.path.exists(path):
            os.remove(path)
            logger.info(f"Removed existing file {path}")
        clear_partial(path)
