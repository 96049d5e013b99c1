#!/usr/bin/env python3
"""
correspondence.py
----------------
Feature correspondences between frames: synthesis from groundtruth, static
object masking, the match graph and multi-view tracks.

Matches are pandas DataFrames with columns
`frame_i frame_j x_i y_i x_j y_j weight` and, for synthesized data, a boolean
`inlier` label used only for evaluation.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from utils.file_manager import MATCH_COLUMNS
from utils.geometry import (CameraIntrinsics, PoseSE3, ScenePrior, TunnelReconError, cast_pixels,
                            project_points)
from utils.pose_estimation import essential_from_poses

logger = logging.getLogger(__name__)

SYNTHESIS_ROUNDS = 50
MIN_SYNTHESIS_BATCH = 1000

StaticMask = Union[np.ndarray, Dict[int, np.ndarray]]


class NoOverlapError(TunnelReconError):
    pass


def empty_matches() -> pd.DataFrame:
    df = pd.DataFrame({c: pd.Series(dtype=float) for c in MATCH_COLUMNS})
    return df.astype({"frame_i": int, "frame_j": int})


def _match_frame(frame_i: int, frame_j: int, pix_i: np.ndarray, pix_j: np.ndarray,
                 inlier: np.ndarray, weight: Optional[np.ndarray] = None) -> pd.DataFrame:
    count = len(pix_i)
    return pd.DataFrame({
        "frame_i": np.full(count, frame_i, dtype=int),
        "frame_j": np.full(count, frame_j, dtype=int),
        "x_i": pix_i[:, 0], "y_i": pix_i[:, 1],
        "x_j": pix_j[:, 0], "y_j": pix_j[:, 1],
        "weight": np.ones(count) if weight is None else weight,
        "inlier": inlier,
    })


def _clip_pixels(pixels: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    return np.column_stack((np.clip(pixels[:, 0], 0.0, K.width), np.clip(pixels[:, 1], 0.0, K.height)))


def mask_lookup(mask: np.ndarray, pixels: np.ndarray) -> np.ndarray:
    h, w = mask.shape
    cols = np.clip(np.floor(pixels[:, 0]).astype(int), 0, w - 1)
    rows = np.clip(np.floor(pixels[:, 1]).astype(int), 0, h - 1)
    return mask[rows, cols]


def frame_mask_for(mask: StaticMask, frame: int) -> Optional[np.ndarray]:
    if isinstance(mask, dict):
        return mask.get(frame)
    return mask


def synthesize_matches(pose_i: PoseSE3, pose_j: PoseSE3, prior: ScenePrior, K: CameraIntrinsics,
                       count: int, pixel_noise_sd: float = 0.0, outlier_fraction: float = 0.0,
                       seed: int = 0, frame_i: int = 0, frame_j: int = 1,
                       occluded: Optional[np.ndarray] = None) -> pd.DataFrame:
    """
    Groundtruth correspondences between two frames.

    Inliers are wall points seen by both cameras, projected into both frames
    and perturbed by Gaussian pixel noise. A fraction of the matches are
    replaced by uniformly random pixel pairs (labelled inlier=False).

    Args:
        pose_i, pose_j: groundtruth camera poses.
        prior: scene geometry both cameras sit inside.
        K: intrinsics shared by both frames.
        count: total number of matches.
        pixel_noise_sd: standard deviation of the pixel noise.
        outlier_fraction: share of random pairs among the matches.
        seed: random seed; the output is a pure function of the arguments.
        occluded: optional (H, W) mask of pixels hidden by the rig; no inlier lands there.

    Returns:
        Match DataFrame with an `inlier` column.
    """
    if not 0.0 <= outlier_fraction <= 1.0:
        raise ValueError(f"outlier_fraction must lie in [0, 1], got {outlier_fraction}")
    rng = np.random.default_rng(seed)
    n_out = int(round(outlier_fraction * count))
    n_in = count - n_out

    found_i, found_j = [], []
    have = 0
    batch = max(4 * n_in, MIN_SYNTHESIS_BATCH)
    for _ in range(SYNTHESIS_ROUNDS):
        if have >= n_in:
            break
        pix_i = rng.uniform((0.0, 0.0), (K.width, K.height), size=(batch, 2))
        _, points, _, _, _ = cast_pixels(prior, pose_i, K, pix_i)
        cam_j = pose_j.to_camera(points)
        front = cam_j[:, 2] > 1e-9
        pix_i, cam_j = pix_i[front], cam_j[front]
        pix_j = project_points(K, cam_j) if len(cam_j) else np.zeros((0, 2))
        keep = K.in_bounds(pix_j) if len(pix_j) else np.zeros(0, dtype=bool)
        if occluded is not None and len(pix_j):
            keep &= ~mask_lookup(occluded, pix_i) & ~mask_lookup(occluded, pix_j)
        found_i.append(pix_i[keep])
        found_j.append(pix_j[keep])
        have += int(np.sum(keep))
    pix_i = np.concatenate(found_i)[:n_in] if found_i else np.zeros((0, 2))
    pix_j = np.concatenate(found_j)[:n_in] if found_j else np.zeros((0, 2))
    if n_in > 0 and len(pix_i) == 0:
        raise NoOverlapError(f"frames {frame_i} and {frame_j} share no visible wall")
    if len(pix_i) < n_in:
        logger.warning(f"frames {frame_i}-{frame_j}: only {len(pix_i)} of {n_in} inlier matches found")

    if pixel_noise_sd > 0:
        pix_i = _clip_pixels(pix_i + rng.normal(0.0, pixel_noise_sd, pix_i.shape), K)
        pix_j = _clip_pixels(pix_j + rng.normal(0.0, pixel_noise_sd, pix_j.shape), K)
    out_i = rng.uniform((0.0, 0.0), (K.width, K.height), size=(n_out, 2))
    out_j = rng.uniform((0.0, 0.0), (K.width, K.height), size=(n_out, 2))

    matches = _match_frame(frame_i, frame_j, np.vstack((pix_i, out_i)), np.vstack((pix_j, out_j)),
                           np.concatenate((np.ones(len(pix_i), bool), np.zeros(n_out, bool))))
    order = rng.permutation(len(matches))
    return matches.iloc[order].reset_index(drop=True)


def synthesize_static_matches(mask: np.ndarray, count: int, pixel_noise_sd: float = 0.0,
                              seed: int = 0, frame_i: int = 0, frame_j: int = 1) -> pd.DataFrame:
    """
    Matches on a rig-fixed object: the same pixel in both frames, since the
    object moves with the camera. These are what static masking removes.
    """
    rng = np.random.default_rng(seed)
    rows, cols = np.nonzero(mask)
    if count == 0 or len(rows) == 0:
        return _match_frame(frame_i, frame_j, np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0, bool))
    pick = rng.integers(0, len(rows), size=count)
    pixels = np.column_stack((cols[pick], rows[pick])).astype(float) + rng.uniform(0.0, 1.0, (count, 2))
    noisy_j = pixels + rng.normal(0.0, pixel_noise_sd, pixels.shape) if pixel_noise_sd > 0 else pixels.copy()
    return _match_frame(frame_i, frame_j, pixels, noisy_j, np.zeros(count, bool))


def apply_static_mask(matches: pd.DataFrame, mask: Optional[StaticMask]) -> Tuple[pd.DataFrame, int]:
    """
    Drop every match with an endpoint on a masked pixel.

    Args:
        matches: match DataFrame.
        mask: one (H, W) boolean mask for every frame, or {frame_index: mask}.

    Returns:
        (surviving matches, number removed)
    """
    if mask is None or matches.empty:
        return matches, 0
    hit = np.zeros(len(matches), dtype=bool)
    for side in ("i", "j"):
        frames = matches[f"frame_{side}"].to_numpy()
        pixels = matches[[f"x_{side}", f"y_{side}"]].to_numpy(float)
        for frame in np.unique(frames):
            frame_mask = frame_mask_for(mask, int(frame))
            if frame_mask is None:
                continue
            rows = frames == frame
            hit[rows] |= mask_lookup(frame_mask, pixels[rows])
    removed = int(np.sum(hit))
    if removed:
        logger.info(f"Static mask removed {removed} of {len(matches)} matches")
    return matches.loc[~hit].reset_index(drop=True), removed


def build_match_graph(frame_count: int, n: int) -> List[Tuple[int, int]]:
    """Consecutive pairs (k, k+1) plus same-azimuth pairs (k, k+n), sorted and deduplicated."""
    if frame_count < 2:
        raise ValueError(f"a match graph needs at least two frames, got {frame_count}")
    if n < 1:
        raise ValueError(f"images per rotation must be at least 1, got {n}")
    edges = {(k, k + 1) for k in range(frame_count - 1)}
    edges |= {(k, k + n) for k in range(frame_count - n)}
    return sorted(edges)


@dataclass
class MatchGraph:
    frame_count: int
    edges: List[Tuple[int, int]]
    matches: pd.DataFrame = field(default_factory=empty_matches)

    @classmethod
    def build(cls, frame_count: int, n: int, matches: Optional[pd.DataFrame] = None) -> "MatchGraph":
        return cls(frame_count, build_match_graph(frame_count, n),
                   empty_matches() if matches is None else matches)

    def edge_matches(self, i: int, j: int) -> pd.DataFrame:
        m = self.matches
        return m[(m["frame_i"] == i) & (m["frame_j"] == j)]

    def loop_edges(self) -> List[Tuple[int, int]]:
        return [(i, j) for i, j in self.edges if j - i > 1]

    def is_connected(self) -> bool:
        reached = {0}
        changed = True
        while changed:
            changed = False
            for i, j in self.edges:
                if (i in reached) != (j in reached):
                    reached |= {i, j}
                    changed = True
        return len(reached) == self.frame_count


class UnionFind:
    def __init__(self):
        self.parent: List[int] = []

    def make_set(self) -> int:
        self.parent.append(len(self.parent))
        return len(self.parent) - 1

    def find(self, x: int) -> int:
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def tracks_from_matches(matches: pd.DataFrame) -> Tuple[List[List[Tuple[int, float, float]]], np.ndarray]:
    """
    Join pairwise matches sharing an observation (same frame, same pixel) into tracks.

    A track keeps one observation per frame (the first seen). Returns the
    tracks as [(frame, x, y), ...] lists and, per track, whether every match
    that formed it was labelled an inlier (True when no labels exist).
    """
    uf = UnionFind()
    node_index: Dict[Tuple[int, float, float], int] = {}
    node_inlier: List[bool] = []

    def node(key, inlier):
        if key not in node_index:
            node_index[key] = uf.make_set()
            node_inlier.append(inlier)
        else:
            node_inlier[node_index[key]] &= inlier
        return node_index[key]

    labels = matches["inlier"].to_numpy(bool) if "inlier" in matches else np.ones(len(matches), bool)
    columns = matches[["frame_i", "x_i", "y_i", "frame_j", "x_j", "y_j"]].to_numpy(float)
    for (fi, xi, yi, fj, xj, yj), inlier in zip(columns, labels):
        a = node((int(fi), xi, yi), bool(inlier))
        b = node((int(fj), xj, yj), bool(inlier))
        uf.union(a, b)

    clusters: Dict[int, List[Tuple[int, float, float]]] = {}
    cluster_inlier: Dict[int, bool] = {}
    for key, nid in node_index.items():
        root = uf.find(nid)
        clusters.setdefault(root, []).append(key)
        cluster_inlier[root] = cluster_inlier.get(root, True) and node_inlier[nid]

    tracks, inlier_flags = [], []
    for root in sorted(clusters):
        per_frame: Dict[int, Tuple[int, float, float]] = {}
        for obs in clusters[root]:
            per_frame.setdefault(obs[0], obs)
        if len(per_frame) >= 2:
            tracks.append(sorted(per_frame.values()))
            inlier_flags.append(cluster_inlier[root])
    logger.info(f"Built {len(tracks)} tracks from {len(matches)} matches")
    return tracks, np.array(inlier_flags, dtype=bool)


def epipolar_distances(matches: pd.DataFrame, pose_i: PoseSE3, pose_j: PoseSE3, K: CameraIntrinsics) -> np.ndarray:
    """Distance in pixels of each x_j from the epipolar line of x_i (distortion-free cameras)."""
    E = essential_from_poses(pose_i, pose_j)
    Kinv = np.linalg.inv(K.matrix)
    F = Kinv.T @ E @ Kinv
    xi = np.column_stack((matches[["x_i", "y_i"]].to_numpy(float), np.ones(len(matches))))
    xj = np.column_stack((matches[["x_j", "y_j"]].to_numpy(float), np.ones(len(matches))))
    lines = xi @ F.T
    return np.abs(np.sum(xj * lines, axis=1)) / np.hypot(lines[:, 0], lines[:, 1])
