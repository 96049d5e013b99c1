#!/usr/bin/env python3
"""
pose_estimation.py
----------------
Two-view relative pose from correspondences (essential matrix RANSAC with the
normalized eight-point solver), pose chaining along the match graph and
metric scale from the scene prior.

A relative pose (R, t) maps camera-i coordinates to camera-j coordinates,
X_j = R X_i + t, and satisfies x_j^T E x_i = 0 with E = [t]x R.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.optimize import minimize_scalar
from scipy.spatial.transform import Rotation

from utils.geometry import (CameraIntrinsics, PoseSE3, ScenePrior, TunnelReconError, angle_between,
                            dlt_triangulate, normalized_coordinates, rotation_angle, skew)

logger = logging.getLogger(__name__)

MIN_MATCHES = 8
SCALE_GRID_POINTS = 61
# Scale search range, as multiples of the prior's characteristic size.
SCALE_RANGE = (1e-3, 10.0)
PURE_ROTATION_REFITS = 3


class InsufficientMatchesError(TunnelReconError):
    pass


class DegeneratePairError(TunnelReconError):
    pass


class DisconnectedGraphError(TunnelReconError):
    pass


class ScaleBracketError(TunnelReconError):
    pass


@dataclass
class EssentialEstimate:
    E: np.ndarray
    inlier_mask: np.ndarray
    threshold_px: float
    iterations: int = 0

    @property
    def inlier_indices(self) -> np.ndarray:
        return np.flatnonzero(self.inlier_mask)

    @property
    def inlier_ratio(self) -> float:
        return float(np.mean(self.inlier_mask)) if len(self.inlier_mask) else 0.0


@dataclass
class RelativePose:
    """Scale-free relative motion; a pure rotation carries a zero translation direction."""
    rotation: np.ndarray
    translation_direction: np.ndarray
    cheirality_support: int
    mean_reprojection_px: float = 0.0
    median_parallax: float = 0.0
    pure_rotation: bool = False


@dataclass
class EdgeEstimate:
    frame_i: int
    frame_j: int
    essential: Optional[EssentialEstimate]
    relative: RelativePose
    x_i: np.ndarray
    x_j: np.ndarray


def relative_pose_from_world(pose_i: PoseSE3, pose_j: PoseSE3) -> Tuple[np.ndarray, np.ndarray]:
    """Groundtruth (R, t) taking camera-i coordinates to camera-j coordinates."""
    rotation = pose_j.rotation.T @ pose_i.rotation
    translation = pose_j.rotation.T @ (pose_i.translation - pose_j.translation)
    return rotation, translation


def essential_from_poses(pose_i: PoseSE3, pose_j: PoseSE3) -> np.ndarray:
    rotation, translation = relative_pose_from_world(pose_i, pose_j)
    return skew(translation) @ rotation


def _homogeneous(x: np.ndarray) -> np.ndarray:
    return np.column_stack((x, np.ones(len(x))))


def _hartley_transform(x: np.ndarray) -> np.ndarray:
    centroid = x.mean(axis=0)
    mean_dist = np.mean(np.linalg.norm(x - centroid, axis=1))
    scale = math.sqrt(2.0) / mean_dist if mean_dist > 0 else 1.0
    return np.array([[scale, 0.0, -scale * centroid[0]],
                     [0.0, scale, -scale * centroid[1]],
                     [0.0, 0.0, 1.0]])


def project_to_essential(E: np.ndarray) -> np.ndarray:
    """Closest matrix with singular values (1, 1, 0)."""
    u, _, vt = np.linalg.svd(E)
    return u @ np.diag([1.0, 1.0, 0.0]) @ vt


def eight_point(x_i: np.ndarray, x_j: np.ndarray) -> np.ndarray:
    """
    Normalized eight-point essential matrix from >= 8 normalized correspondences.

    Each pair contributes one row of x_j^T E x_i = 0; the coordinates are
    first conditioned to zero mean and sqrt(2) mean distance.
    """
    Ti = _hartley_transform(x_i)
    Tj = _hartley_transform(x_j)
    a = _homogeneous(x_i) @ Ti.T
    b = _homogeneous(x_j) @ Tj.T
    C = np.column_stack((b[:, 0] * a[:, 0], b[:, 0] * a[:, 1], b[:, 0],
                         b[:, 1] * a[:, 0], b[:, 1] * a[:, 1], b[:, 1],
                         a[:, 0], a[:, 1], np.ones(len(a))))
    _, _, vt = np.linalg.svd(C)
    E = Tj.T @ vt[-1].reshape(3, 3) @ Ti
    return project_to_essential(E)


def sampson_distance(E: np.ndarray, x_i: np.ndarray, x_j: np.ndarray) -> np.ndarray:
    """First-order geometric epipolar error in normalized units (multiply by f for pixels)."""
    a = _homogeneous(x_i)
    b = _homogeneous(x_j)
    Ea = a @ E.T
    Etb = b @ E
    numer = np.sum(b * Ea, axis=1)
    denom = Ea[:, 0] ** 2 + Ea[:, 1] ** 2 + Etb[:, 0] ** 2 + Etb[:, 1] ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        d = np.abs(numer) / np.sqrt(denom)
    return np.where(denom > 0, d, np.inf)


def _match_coordinates(matches: pd.DataFrame, K_i: CameraIntrinsics, K_j: CameraIntrinsics):
    x_i = normalized_coordinates(K_i, matches[["x_i", "y_i"]].to_numpy(float))
    x_j = normalized_coordinates(K_j, matches[["x_j", "y_j"]].to_numpy(float))
    return x_i, x_j


def _required_iterations(inlier_ratio: float, confidence: float, max_iterations: int) -> int:
    w8 = inlier_ratio ** MIN_MATCHES
    if w8 <= 0:
        return max_iterations
    if w8 >= 1:
        return 1
    return min(max_iterations, int(math.ceil(math.log(1.0 - confidence) / math.log(1.0 - w8))))


def estimate_essential_ransac(matches: pd.DataFrame, K_i: CameraIntrinsics, K_j: Optional[CameraIntrinsics] = None,
                              threshold_px: float = 1.0, seed=0, confidence: float = 0.999,
                              max_iterations: int = 10000, min_inlier_ratio: float = 0.3) -> EssentialEstimate:
    """
    Robust essential matrix between two frames.

    Args:
        matches: correspondences of one frame pair.
        K_i, K_j: intrinsics of the two frames (K_j defaults to K_i).
        threshold_px: Sampson distance, in pixels, below which a match is an inlier.
        seed: seed (or seed sequence) of the sampler.
        confidence: stop once an all-inlier sample was drawn with this probability.
        max_iterations: hard cap on samples.
        min_inlier_ratio: below this the pair is reported as degenerate.

    Returns:
        EssentialEstimate re-fit on all inliers and projected to the essential manifold.
    """
    K_j = K_j or K_i
    if len(matches) < MIN_MATCHES:
        raise InsufficientMatchesError(f"{len(matches)} matches; the eight-point solver needs {MIN_MATCHES}")
    x_i, x_j = _match_coordinates(matches, K_i, K_j)
    threshold = threshold_px / ((K_i.f + K_j.f) / 2.0)
    rng = np.random.default_rng(seed)

    best_mask = np.zeros(len(x_i), dtype=bool)
    best_E = None
    needed = max_iterations
    iteration = 0
    while iteration < needed:
        iteration += 1
        sample = rng.choice(len(x_i), MIN_MATCHES, replace=False)
        E = eight_point(x_i[sample], x_j[sample])
        mask = sampson_distance(E, x_i, x_j) <= threshold
        if mask.sum() > best_mask.sum():
            best_mask, best_E = mask, E
            needed = min(needed, _required_iterations(mask.mean(), confidence, max_iterations))

    if best_E is None or best_mask.sum() < MIN_MATCHES:
        raise DegeneratePairError(f"no essential matrix supported by {MIN_MATCHES} matches")
    E = eight_point(x_i[best_mask], x_j[best_mask])
    mask = sampson_distance(E, x_i, x_j) <= threshold
    if mask.sum() < best_mask.sum():
        E, mask = best_E, best_mask
    estimate = EssentialEstimate(E=E, inlier_mask=mask, threshold_px=threshold_px, iterations=iteration)
    logger.debug(f"RANSAC: {mask.sum()}/{len(mask)} inliers after {iteration} samples")
    if estimate.inlier_ratio < min_inlier_ratio:
        raise DegeneratePairError(f"inlier ratio {estimate.inlier_ratio:.3f} below {min_inlier_ratio}")
    return estimate


def _two_view_points(rotation: np.ndarray, translation: np.ndarray, x_i: np.ndarray, x_j: np.ndarray) -> np.ndarray:
    """Points in camera-i coordinates triangulated from normalized observations."""
    P_i = np.hstack((np.eye(3), np.zeros((3, 1))))
    P_j = np.hstack((rotation, translation[:, None]))
    return dlt_triangulate(np.stack((x_i, x_j), axis=1), np.stack((P_i, P_j)))


def _reprojection_normalized(points_i: np.ndarray, rotation, translation, x_i, x_j) -> np.ndarray:
    points_j = points_i @ rotation.T + translation
    with np.errstate(divide="ignore", invalid="ignore"):
        ri = np.linalg.norm(points_i[:, :2] / points_i[:, 2:3] - x_i, axis=1)
        rj = np.linalg.norm(points_j[:, :2] / points_j[:, 2:3] - x_j, axis=1)
    return (ri + rj) / 2.0


def _parallax(points_i: np.ndarray, rotation: np.ndarray, translation: np.ndarray) -> np.ndarray:
    center_j = -rotation.T @ translation
    to_i = points_i
    to_j = points_i - center_j
    cos = np.sum(to_i * to_j, axis=1) / (np.linalg.norm(to_i, axis=1) * np.linalg.norm(to_j, axis=1))
    return np.arccos(np.clip(cos, -1.0, 1.0))


def decompose_essential(E: np.ndarray, x_i: np.ndarray, x_j: np.ndarray, f: float = 1.0,
                        min_parallax: float = 1e-3) -> RelativePose:
    """
    Pick the (R, t) of the four decompositions of E that puts the most
    inliers in front of both cameras; ties go to the smaller mean
    reprojection error.

    Raises:
        DegeneratePairError: when fewer than half the points pass the cheirality
            test or the median parallax is below `min_parallax` radians.
    """
    u, _, vt = np.linalg.svd(E)
    if np.linalg.det(u) < 0:
        u = -u
    if np.linalg.det(vt) < 0:
        vt = -vt
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    best = None
    for rotation in (u @ W @ vt, u @ W.T @ vt):
        for translation in (u[:, 2], -u[:, 2]):
            points_i = _two_view_points(rotation, translation, x_i, x_j)
            points_j = points_i @ rotation.T + translation
            front = np.isfinite(points_i[:, 2]) & (points_i[:, 2] > 0) & (points_j[:, 2] > 0)
            support = int(np.sum(front))
            error = float(np.mean(_reprojection_normalized(points_i[front], rotation, translation,
                                                           x_i[front], x_j[front]))) if support else np.inf
            key = (-support, error)
            if best is None or key < best[0]:
                best = (key, rotation, translation, points_i, front)
    (neg_support, error), rotation, translation, points_i, front = best
    support = -neg_support
    if support < len(x_i) / 2.0:
        raise DegeneratePairError(f"only {support} of {len(x_i)} points pass the cheirality test")
    parallax = float(np.median(_parallax(points_i[front], rotation, translation)))
    if parallax < min_parallax:
        raise DegeneratePairError(f"median parallax {parallax:.2e} rad is below {min_parallax:.1e}")
    return RelativePose(rotation=Rotation.from_matrix(rotation).as_matrix(),
                        translation_direction=translation / np.linalg.norm(translation),
                        cheirality_support=support, mean_reprojection_px=error * f, median_parallax=parallax)


def recover_relative_pose(estimate: EssentialEstimate, matches: pd.DataFrame, K_i: CameraIntrinsics,
                          K_j: Optional[CameraIntrinsics] = None, min_parallax: float = 1e-3) -> RelativePose:
    """Decompose a RANSAC estimate using only its inlier matches."""
    K_j = K_j or K_i
    x_i, x_j = _match_coordinates(matches, K_i, K_j)
    mask = estimate.inlier_mask
    return decompose_essential(estimate.E, x_i[mask], x_j[mask], (K_i.f + K_j.f) / 2.0, min_parallax)


def _bearings(x: np.ndarray) -> np.ndarray:
    b = _homogeneous(x)
    return b / np.linalg.norm(b, axis=1, keepdims=True)


def estimate_pure_rotation(x_i: np.ndarray, x_j: np.ndarray, threshold: float) -> Tuple[RelativePose, np.ndarray]:
    """
    Rotation-only relative pose for pairs with no baseline.

    Args:
        x_i, x_j: normalized correspondences.
        threshold: inlier angle in radians.

    Returns:
        (RelativePose with zero translation, inlier mask)
    """
    b_i, b_j = _bearings(x_i), _bearings(x_j)
    rotation, _ = Rotation.align_vectors(b_j, b_i)
    for _ in range(PURE_ROTATION_REFITS):
        residual = np.arccos(np.clip(np.sum(rotation.apply(b_i) * b_j, axis=1), -1.0, 1.0))
        mask = residual <= threshold
        if mask.sum() < 3:
            raise DegeneratePairError("pure-rotation fit left fewer than three inliers")
        rotation, _ = Rotation.align_vectors(b_j[mask], b_i[mask])
    return RelativePose(rotation=rotation.as_matrix(), translation_direction=np.zeros(3),
                        cheirality_support=int(mask.sum()), pure_rotation=True), mask


def estimate_relative_pose(matches: pd.DataFrame, K: CameraIntrinsics, threshold_px: float = 1.0, seed=0,
                           confidence: float = 0.999, max_iterations: int = 10000,
                           min_inlier_ratio: float = 0.3, min_parallax: float = 1e-3) -> EdgeEstimate:
    """RANSAC + decomposition for one frame pair, falling back to a pure rotation when parallax vanishes."""
    frame_i, frame_j = int(matches["frame_i"].iloc[0]), int(matches["frame_j"].iloc[0])
    x_all_i, x_all_j = _match_coordinates(matches, K, K)
    try:
        estimate = estimate_essential_ransac(matches, K, K, threshold_px, seed, confidence,
                                             max_iterations, min_inlier_ratio)
        relative = recover_relative_pose(estimate, matches, K, K, min_parallax)
        return EdgeEstimate(frame_i, frame_j, estimate, relative,
                            x_all_i[estimate.inlier_mask], x_all_j[estimate.inlier_mask])
    except DegeneratePairError as exc:
        logger.info(f"edge {frame_i}-{frame_j}: {exc}; trying a pure rotation")
    relative, mask = estimate_pure_rotation(x_all_i, x_all_j, threshold_px / K.f)
    if mask.mean() < min_inlier_ratio:
        raise DegeneratePairError(f"edge {frame_i}-{frame_j}: neither a two-view motion nor a rotation fits")
    return EdgeEstimate(frame_i, frame_j, None, relative, x_all_i[mask], x_all_j[mask])


def estimate_edges(matches: pd.DataFrame, edges: Sequence[Tuple[int, int]], K: CameraIntrinsics,
                   threshold_px: float = 1.0, seed: int = 0, confidence: float = 0.999,
                   max_iterations: int = 10000, min_inlier_ratio: float = 0.3,
                   min_parallax: float = 1e-3, threads: int = 1) -> Dict[Tuple[int, int], EdgeEstimate]:
    """
    Estimate every edge of the match graph. Each edge draws from its own
    seed sequence (seed, i, j), so results do not depend on the thread count.
    Edges that fail are logged and left out.
    """
    grouped = {key: group for key, group in matches.groupby(["frame_i", "frame_j"], sort=True)}

    def work(edge):
        i, j = edge
        group = grouped.get((i, j))
        if group is None or len(group) < MIN_MATCHES:
            return edge, None, f"{0 if group is None else len(group)} matches"
        try:
            return edge, estimate_relative_pose(group, K, threshold_px, [seed, i, j], confidence,
                                                max_iterations, min_inlier_ratio, min_parallax), None
        except TunnelReconError as exc:
            return edge, None, str(exc)

    results: Dict[Tuple[int, int], EdgeEstimate] = {}
    ordered = sorted((int(i), int(j)) for i, j in edges)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            outcomes = list(ex.map(work, ordered))
    else:
        outcomes = [work(edge) for edge in ordered]
    for edge, estimate, reason in outcomes:
        if estimate is None:
            logger.warning(f"edge {edge[0]}-{edge[1]} skipped: {reason}")
        else:
            results[edge] = estimate
    logger.info(f"Estimated {len(results)} of {len(ordered)} edges")
    return results


def _prior_size(prior: ScenePrior) -> float:
    if hasattr(prior, "radius"):
        return prior.radius
    return max(abs(p.offset) for p in prior.planes) + 1e-9


def _median_surface_distance(scale: float, prior: ScenePrior, pose_i: PoseSE3, unit_points: np.ndarray) -> float:
    world = (scale * unit_points) @ pose_i.rotation.T + pose_i.translation
    return float(np.median(prior.surface_distance(world)))


def resolve_scale(edge: EdgeEstimate, pose_i: PoseSE3, prior: ScenePrior) -> float:
    """
    Baseline length that makes the edge's triangulated points fit the prior:
    a log-spaced grid scan followed by a golden-section refinement of the
    median point-to-surface distance.
    """
    rel = edge.relative
    unit_points = _two_view_points(rel.rotation, rel.translation_direction, edge.x_i, edge.x_j)
    points_j = unit_points @ rel.rotation.T + rel.translation_direction
    usable = np.isfinite(unit_points).all(axis=1) & (unit_points[:, 2] > 0) & (points_j[:, 2] > 0)
    unit_points = unit_points[usable]
    if len(unit_points) == 0:
        raise ScaleBracketError(f"edge {edge.frame_i}-{edge.frame_j} has no point in front of both cameras")

    size = _prior_size(prior)
    grid = np.linspace(math.log(SCALE_RANGE[0] * size), math.log(SCALE_RANGE[1] * size), SCALE_GRID_POINTS)
    costs = np.array([_median_surface_distance(math.exp(g), prior, pose_i, unit_points) for g in grid])
    k = int(np.argmin(costs))
    if k == 0 or k == len(grid) - 1:
        raise ScaleBracketError(f"edge {edge.frame_i}-{edge.frame_j}: scale minimum lies on the search boundary")
    objective = lambda g: _median_surface_distance(math.exp(g), prior, pose_i, unit_points)
    try:
        result = minimize_scalar(objective, bracket=(grid[k - 1], grid[k], grid[k + 1]), method="golden",
                                 options={"xtol": 1e-10})
        log_scale = result.x if result.fun <= costs[k] else grid[k]
    except ValueError:
        log_scale = grid[k]
    return math.exp(log_scale)


def chain_and_scale(edges: Dict[Tuple[int, int], EdgeEstimate], frame_count: int, prior: ScenePrior,
                    origin_pose: Optional[PoseSE3] = None) -> Tuple[List[PoseSE3], Dict[Tuple[int, int], float], pd.DataFrame]:
    """
    Compose relative poses into global poses with metric scale.

    Frames are placed in index order; frame j uses edge (j-1, j) when it was
    estimated, otherwise any edge from an already placed frame. Edges not
    used for chaining are reported as consistency checks.

    Returns:
        (poses, scale per chaining edge, loop-consistency DataFrame)
    """
    poses: List[Optional[PoseSE3]] = [None] * frame_count
    poses[0] = origin_pose or PoseSE3.identity()
    scales: Dict[Tuple[int, int], float] = {}
    for j in range(1, frame_count):
        candidates = [(j - 1, j)] if (j - 1, j) in edges else []
        candidates += sorted((i, jj) for i, jj in edges if jj == j and i != j - 1 and poses[i] is not None)
        if not candidates:
            raise DisconnectedGraphError(f"frame {j} is not connected to any earlier frame")
        i = candidates[0][0]
        edge = edges[(i, j)]
        pose_i = poses[i]
        rotation_j = pose_i.rotation @ edge.relative.rotation.T
        if edge.relative.pure_rotation:
            scale = 0.0
        else:
            scale = resolve_scale(edge, pose_i, prior)
        center_j = pose_i.translation - scale * (rotation_j @ edge.relative.translation_direction)
        poses[j] = PoseSE3.from_matrix(rotation_j, center_j)
        scales[(i, j)] = scale
        logger.debug(f"placed frame {j} from {i}: baseline {scale:.4f} m")

    rows = []
    for (i, j), edge in sorted(edges.items()):
        if (i, j) in scales:
            continue
        rotation, translation = relative_pose_from_world(poses[i], poses[j])
        direction_error = (math.degrees(angle_between(translation, edge.relative.translation_direction))
                           if not edge.relative.pure_rotation and np.linalg.norm(translation) > 0 else float("nan"))
        rows.append({
            "frame_i": i,
            "frame_j": j,
            "rotation_error_deg": math.degrees(rotation_angle(rotation.T @ edge.relative.rotation)),
            "direction_error_deg": direction_error,
        })
    report = pd.DataFrame(rows, columns=["frame_i", "frame_j", "rotation_error_deg", "direction_error_deg"])
    if len(report):
        logger.info(f"loop edges: median rotation disagreement {report['rotation_error_deg'].median():.3f} deg")
    return poses, scales, report


def rotation_error_deg(a: np.ndarray, b: np.ndarray) -> float:
    return math.degrees(rotation_angle(a.T @ b))


def direction_error_deg(a: np.ndarray, b: np.ndarray) -> float:
    return math.degrees(angle_between(a, b))


def pose_errors(estimated: Sequence[PoseSE3], groundtruth: Sequence[PoseSE3]) -> pd.DataFrame:
    """Per-frame position and orientation error against groundtruth."""
    rows = []
    for k, (est, gt) in enumerate(zip(estimated, groundtruth)):
        rows.append({
            "frame_index": k,
            "position_error_m": float(np.linalg.norm(est.translation - gt.translation)),
            "rotation_error_deg": rotation_error_deg(est.rotation, gt.rotation),
        })
    return pd.DataFrame(rows, columns=["frame_index", "position_error_m", "rotation_error_deg"])
