#!/usr/bin/env python3
"""
bundle_adjustment.py
----------------
Joint refinement of camera poses and triangulated points by minimizing the
pixel reprojection error, with three pruning stages around it:

    P1  tracks touching a rig-static mask are dropped,
    P2  tracks whose point violates the scene prior are dropped,
    P3  tracks with a large reprojection error are dropped (mid-optimization).

Camera updates are body-frame increments, R <- R Exp(w) and C <- C + R v.
The first camera is fixed and the next camera with a baseline may only move
perpendicular to it, which pins the similarity gauge. The normal equations
are reduced onto the cameras by the Schur complement over point blocks.
"""
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.spatial.transform import Rotation

from utils.correspondence import StaticMask, frame_mask_for, mask_lookup, tracks_from_matches
from utils.geometry import (CameraIntrinsics, PoseSE3, ScenePrior, TunnelReconError, dlt_triangulate,
                            normalized_coordinates, projection_matrix)

logger = logging.getLogger(__name__)

ACTIVE = "active"
PRUNED_MASK = "pruned_mask"
PRUNED_GEOMETRY = "pruned_geometry"
PRUNED_REPROJECTION = "pruned_reprojection"
UNTRIANGULATED = "untriangulated"
TRACK_STATUSES = (ACTIVE, PRUNED_MASK, PRUNED_GEOMETRY, PRUNED_REPROJECTION, UNTRIANGULATED)

MIN_DEPTH = 1e-9
# Cost per observation (px^2) below which a problem is already solved.
COST_FLOOR = 1e-20
MAX_DAMPING = 1e16

ABLATION_CONFIGS = {
    "SBA": dict(mask=False, geometry=False, reprojection=False),
    "P1": dict(mask=True, geometry=False, reprojection=False),
    "P2": dict(mask=False, geometry=True, reprojection=False),
    "P1+P2": dict(mask=True, geometry=True, reprojection=False),
    "P1+P2+P3": dict(mask=True, geometry=True, reprojection=True),
}
REPORT_COLUMNS = ["config", "before_px", "after_px", "pruned_p1", "pruned_p2", "pruned_p3",
                  "untriangulated", "iterations", "converged"]


class TriangulationError(TunnelReconError):
    pass


class BundleAdjustmentError(TunnelReconError):
    pass


@dataclass
class Track:
    """One scene point seen in several frames: frames (k,) and pixels (k, 2)."""
    frames: np.ndarray
    pixels: np.ndarray
    point3d: Optional[np.ndarray] = None
    status: str = ACTIVE
    # Evaluation label carried over from synthesized matches.
    inlier: bool = True

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=int)
        self.pixels = np.asarray(self.pixels, dtype=float).reshape(-1, 2)
        if len(self.frames) < 2 or len(self.frames) != len(self.pixels):
            raise ValueError("a track needs at least two observations with one pixel each")
        if self.status not in TRACK_STATUSES:
            raise ValueError(f"unknown track status {self.status!r}")

    @property
    def observations(self) -> List[Tuple[int, np.ndarray]]:
        return list(zip(self.frames.tolist(), self.pixels))


@dataclass
class PruningConfig:
    geometry_tolerance: float = 0.3
    reprojection_threshold: float = 3.0
    use_mask: bool = True
    use_geometry: bool = True
    use_reprojection: bool = True
    prune_after: int = 10


@dataclass
class SolverConfig:
    max_iterations: int = 200
    relative_decrease: float = 1e-10
    gradient_tolerance: float = 1e-12
    initial_damping: float = 1e-4


@dataclass
class BAProblem:
    poses: List[PoseSE3]
    tracks: List[Track]
    K: CameraIntrinsics
    prior: Optional[ScenePrior] = None
    pruning: PruningConfig = field(default_factory=PruningConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)


@dataclass
class BAReport:
    before_px: float
    after_px: float
    pruned_mask: int = 0
    pruned_geometry: int = 0
    pruned_reprojection: int = 0
    untriangulated: int = 0
    iterations: int = 0
    converged: bool = True
    mid_px: float = float("nan")
    geometry_tolerance: float = float("nan")
    reprojection_threshold: float = float("nan")


def tracks_from_match_table(matches: pd.DataFrame) -> List[Track]:
    observations, inlier_flags = tracks_from_matches(matches)
    return [Track(frames=[o[0] for o in obs], pixels=[(o[1], o[2]) for o in obs], inlier=bool(flag))
            for obs, flag in zip(observations, inlier_flags)]


def count_status(tracks: Sequence[Track], status: str) -> int:
    return sum(1 for t in tracks if t.status == status)


# --------------------------------------------------------------------------
# Projection and Jacobians
# --------------------------------------------------------------------------

def _skew_batch(v: np.ndarray) -> np.ndarray:
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1], out[..., 0, 2] = -v[..., 2], v[..., 1]
    out[..., 1, 0], out[..., 1, 2] = v[..., 2], -v[..., 0]
    out[..., 2, 0], out[..., 2, 1] = -v[..., 1], v[..., 0]
    return out


def _to_camera(rotations: np.ndarray, centers: np.ndarray, points: np.ndarray,
               obs_cam: np.ndarray, obs_pt: np.ndarray) -> np.ndarray:
    diff = points[obs_pt] - centers[obs_cam]
    return np.einsum("nji,nj->ni", rotations[obs_cam], diff)


def _project(K: CameraIntrinsics, Xc: np.ndarray) -> np.ndarray:
    x = Xc[:, 0] / Xc[:, 2]
    y = Xc[:, 1] / Xc[:, 2]
    D = K.distortion_factor(x * x + y * y)
    return np.column_stack((K.f * x * D + K.cx, K.f * y * D + K.cy))


def _pixel_jacobian(K: CameraIntrinsics, Xc: np.ndarray) -> np.ndarray:
    """d(pixel)/d(camera point), shape (N, 2, 3)."""
    Z = Xc[:, 2]
    x = Xc[:, 0] / Z
    y = Xc[:, 1] / Z
    r2 = x * x + y * y
    D = K.distortion_factor(r2)
    dD = K.k1 + 2.0 * K.k2 * r2
    Jd = np.empty((len(Xc), 2, 2))
    Jd[:, 0, 0] = K.f * (D + 2.0 * x * x * dD)
    Jd[:, 0, 1] = K.f * 2.0 * x * y * dD
    Jd[:, 1, 0] = Jd[:, 0, 1]
    Jd[:, 1, 1] = K.f * (D + 2.0 * y * y * dD)
    Jn = np.zeros((len(Xc), 2, 3))
    Jn[:, 0, 0] = 1.0 / Z
    Jn[:, 0, 2] = -x / Z
    Jn[:, 1, 1] = 1.0 / Z
    Jn[:, 1, 2] = -y / Z
    return Jd @ Jn


def _observation_jacobians(K: CameraIntrinsics, rotations: np.ndarray, Xc: np.ndarray, obs_cam: np.ndarray):
    J_pix = _pixel_jacobian(K, Xc)
    J_cam = np.concatenate((J_pix @ _skew_batch(Xc), -J_pix), axis=2)
    J_pt = J_pix @ np.transpose(rotations[obs_cam], (0, 2, 1))
    return J_cam, J_pt


def reprojection_jacobian(pose: PoseSE3, point: np.ndarray, K: CameraIntrinsics) -> Tuple[np.ndarray, np.ndarray]:
    """
    Analytic Jacobian of the projected pixel of `point`.

    Returns:
        (2x6 w.r.t. the body increment (w, v), 2x3 w.r.t. the world point)
    """
    rotations = pose.rotation[None]
    Xc = _to_camera(rotations, pose.translation[None], np.asarray(point, float)[None], np.zeros(1, int),
                    np.zeros(1, int))
    J_cam, J_pt = _observation_jacobians(K, rotations, Xc, np.zeros(1, int))
    return J_cam[0], J_pt[0]


def apply_increment(pose: PoseSE3, increment: np.ndarray) -> PoseSE3:
    """Body-frame update R <- R Exp(w), C <- C + R v of a 6-vector (w, v)."""
    rotation = pose.rotation @ Rotation.from_rotvec(increment[:3]).as_matrix()
    return PoseSE3(rotation, pose.translation + pose.rotation @ increment[3:])


# --------------------------------------------------------------------------
# Triangulation and pruning
# --------------------------------------------------------------------------

def _max_ray_angle(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Largest angle between viewing rays per point; points (T, 3), centers (T, V, 3)."""
    rays = points[:, None, :] - centers
    rays /= np.linalg.norm(rays, axis=2, keepdims=True)
    cos = np.einsum("tad,tbd->tab", rays, rays)
    return np.arccos(np.clip(np.min(cos, axis=(1, 2)), -1.0, 1.0))


def _triangulate_group(frames: np.ndarray, pixels: np.ndarray, poses: Sequence[PoseSE3], K: CameraIntrinsics):
    """Triangulate T tracks of V observations each; returns (points, max ray angle, min depth)."""
    T, V = frames.shape
    normalized = normalized_coordinates(K, pixels.reshape(-1, 2)).reshape(T, V, 2)
    matrices = np.stack([projection_matrix(p) for p in poses])
    points = dlt_triangulate(normalized, matrices[frames])

    rotations = np.stack([p.rotation for p in poses])[frames]
    centers = np.stack([p.translation for p in poses])[frames]
    ok = np.isfinite(points).all(axis=1)
    safe = np.where(ok[:, None], points, 0.0)

    # One Gauss-Newton step on the normalized reprojection error.
    Xc = np.einsum("tvji,tvj->tvi", rotations, safe[:, None, :] - centers)
    depth = Xc[..., 2]
    good = ok & np.all(depth > MIN_DEPTH, axis=1)
    if np.any(good):
        Z = np.where(depth > MIN_DEPTH, depth, 1.0)
        residual = (Xc[..., :2] / Z[..., None] - normalized).reshape(T, 2 * V)
        Jn = np.zeros((T, V, 2, 3))
        Jn[..., 0, 0] = 1.0 / Z
        Jn[..., 0, 2] = -Xc[..., 0] / Z ** 2
        Jn[..., 1, 1] = 1.0 / Z
        Jn[..., 1, 2] = -Xc[..., 1] / Z ** 2
        J = np.einsum("tvab,tvcb->tvac", Jn, rotations).reshape(T, 2 * V, 3)
        JtJ = np.einsum("tka,tkb->tab", J, J)
        Jtr = np.einsum("tka,tk->ta", J, residual)
        step = -np.einsum("tab,tb->ta", np.linalg.pinv(JtJ), Jtr)
        safe = np.where(good[:, None], safe + step, safe)
        Xc = np.einsum("tvji,tvj->tvi", rotations, safe[:, None, :] - centers)
        depth = Xc[..., 2]
    angles = _max_ray_angle(safe, centers)
    points = np.where(ok[:, None], safe, np.nan)
    return points, angles, np.where(ok, np.min(depth, axis=1), -np.inf)


def triangulate(track: Track, poses: Sequence[PoseSE3], K: CameraIntrinsics,
                min_angle_deg: float = 0.5) -> np.ndarray:
    """
    Multi-view DLT triangulation followed by one Gauss-Newton polish.

    Raises:
        TriangulationError: if the viewing rays are within `min_angle_deg` of
            parallel or the point is not in front of every camera.
    """
    points, angles, depth = _triangulate_group(track.frames[None], track.pixels[None], poses, K)
    if not np.isfinite(points[0]).all() or angles[0] < math.radians(min_angle_deg):
        raise TriangulationError(
            f"rays are near-parallel ({math.degrees(angles[0]) if np.isfinite(angles[0]) else 0.0:.3f} deg)")
    if depth[0] <= MIN_DEPTH:
        raise TriangulationError("triangulated point lies behind a camera")
    return points[0]


def triangulate_tracks(tracks: Sequence[Track], poses: Sequence[PoseSE3], K: CameraIntrinsics,
                       min_angle_deg: float = 0.5) -> List[Track]:
    """
    Triangulate every active track in batches of equal length; tracks that
    cannot be triangulated are marked UNTRIANGULATED.
    """
    tracks = list(tracks)
    by_length: Dict[int, List[int]] = {}
    for index, track in enumerate(tracks):
        if track.status == ACTIVE:
            by_length.setdefault(len(track.frames), []).append(index)
    failed = 0
    for length, indices in sorted(by_length.items()):
        frames = np.stack([tracks[i].frames for i in indices])
        pixels = np.stack([tracks[i].pixels for i in indices])
        points, angles, depth = _triangulate_group(frames, pixels, poses, K)
        usable = np.isfinite(points).all(axis=1) & (angles >= math.radians(min_angle_deg)) & (depth > MIN_DEPTH)
        for k, i in enumerate(indices):
            if usable[k]:
                tracks[i] = replace(tracks[i], point3d=points[k])
            else:
                tracks[i] = replace(tracks[i], point3d=None, status=UNTRIANGULATED)
                failed += 1
    logger.info(f"Triangulated {sum(len(v) for v in by_length.values()) - failed} tracks, {failed} untriangulated")
    return tracks


def prune_mask(tracks: Sequence[Track], mask: Optional[StaticMask]) -> List[Track]:
    """Mark tracks with any observation on a masked (rig-static) pixel as PRUNED_MASK."""
    out = list(tracks)
    active = [i for i, t in enumerate(out) if t.status == ACTIVE]
    if mask is None or not active:
        return out
    lengths = np.array([len(out[i].frames) for i in active])
    frames = np.concatenate([out[i].frames for i in active])
    pixels = np.concatenate([out[i].pixels for i in active])
    owner = np.repeat(np.arange(len(active)), lengths)
    hit = np.zeros(len(frames), dtype=bool)
    for frame in np.unique(frames):
        frame_mask = frame_mask_for(mask, int(frame))
        if frame_mask is not None:
            rows = frames == frame
            hit[rows] = mask_lookup(frame_mask, pixels[rows])
    pruned = np.unique(owner[hit])
    for k in pruned:
        out[active[k]] = replace(out[active[k]], status=PRUNED_MASK)
    logger.info(f"Static mask pruning removed {len(pruned)} of {len(active)} tracks")
    return out


def prune_geometry(tracks: Sequence[Track], prior: ScenePrior, tolerance_m: float) -> List[Track]:
    """Mark active tracks whose point lies farther than `tolerance_m` from the prior surface."""
    out = list(tracks)
    active = [i for i, t in enumerate(out) if t.status == ACTIVE and t.point3d is not None]
    if not active:
        return out
    distances = prior.surface_distance(np.stack([out[i].point3d for i in active]))
    pruned = 0
    for i, distance in zip(active, distances):
        if distance > tolerance_m:
            out[i] = replace(out[i], status=PRUNED_GEOMETRY)
            pruned += 1
    logger.info(f"Geometry pruning removed {pruned} of {len(active)} tracks (tolerance {tolerance_m:.3f} m)")
    return out


def track_reprojection_errors(tracks: Sequence[Track], poses: Sequence[PoseSE3], K: CameraIntrinsics) -> np.ndarray:
    """Largest observation reprojection error (px) per track; inf for points behind a camera, nan if untriangulated."""
    errors = np.full(len(tracks), np.nan)
    have = [i for i, t in enumerate(tracks) if t.point3d is not None]
    if not have:
        return errors
    lengths = np.array([len(tracks[i].frames) for i in have])
    obs_cam = np.concatenate([tracks[i].frames for i in have])
    obs_pt = np.repeat(np.arange(len(have)), lengths)
    Xc = _to_camera(np.stack([p.rotation for p in poses]), np.stack([p.translation for p in poses]),
                    np.stack([tracks[i].point3d for i in have]), obs_cam, obs_pt)
    behind = Xc[:, 2] <= MIN_DEPTH
    Xc[behind, 2] = 1.0
    per_observation = np.linalg.norm(_project(K, Xc) - np.concatenate([tracks[i].pixels for i in have]), axis=1)
    per_observation[behind] = np.inf
    starts = np.concatenate(([0], np.cumsum(lengths)[:-1]))
    errors[have] = np.maximum.reduceat(per_observation, starts)
    return errors


def prune_reprojection(tracks: Sequence[Track], poses: Sequence[PoseSE3], K: CameraIntrinsics,
                       threshold_px: float) -> List[Track]:
    """Mark active tracks whose worst observation reprojects farther than `threshold_px` as PRUNED_REPROJECTION."""
    out = list(tracks)
    errors = track_reprojection_errors(out, poses, K)
    pruned = 0
    for i, track in enumerate(out):
        if track.status == ACTIVE and track.point3d is not None and errors[i] > threshold_px:
            out[i] = replace(track, status=PRUNED_REPROJECTION)
            pruned += 1
    logger.info(f"Reprojection pruning removed {pruned} tracks (threshold {threshold_px:.2f} px)")
    return out


def reprojection_errors(tracks: Sequence[Track], poses: Sequence[PoseSE3], K: CameraIntrinsics) -> np.ndarray:
    """Per-observation reprojection errors (px) of all active triangulated tracks."""
    problem = _FlatProblem.build(poses, tracks)
    if problem.observation_count == 0:
        return np.zeros(0)
    residual, _ = problem.residuals(K, problem.rotations, problem.centers, problem.points)
    return np.linalg.norm(residual, axis=1)


def mean_reprojection_error(tracks: Sequence[Track], poses: Sequence[PoseSE3], K: CameraIntrinsics) -> float:
    errors = reprojection_errors(tracks, poses, K)
    return float(np.mean(errors)) if len(errors) else 0.0


# --------------------------------------------------------------------------
# Levenberg-Marquardt with Schur complement
# --------------------------------------------------------------------------

def _accumulate(count: int, index: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Sum blocks values[k] into out[index[k]]; out has shape (count,) + block shape."""
    block = values.shape[1:]
    size = int(np.prod(block)) if block else 1
    flat = (index[:, None] * size + np.arange(size)[None, :]).ravel()
    summed = np.bincount(flat, weights=values.reshape(len(values), size).ravel(), minlength=count * size)
    return summed.reshape((count,) + block)


@dataclass
class _FlatProblem:
    """Active tracks flattened into per-observation arrays."""
    rotations: np.ndarray
    centers: np.ndarray
    points: np.ndarray
    track_index: np.ndarray
    obs_cam: np.ndarray
    obs_pt: np.ndarray
    obs_xy: np.ndarray

    @classmethod
    def build(cls, poses: Sequence[PoseSE3], tracks: Sequence[Track]) -> "_FlatProblem":
        active = [i for i, t in enumerate(tracks) if t.status == ACTIVE and t.point3d is not None]
        obs_cam, obs_pt, obs_xy = [], [], []
        for local, i in enumerate(active):
            obs_cam.append(tracks[i].frames)
            obs_pt.append(np.full(len(tracks[i].frames), local))
            obs_xy.append(tracks[i].pixels)
        return cls(
            rotations=np.stack([p.rotation for p in poses]),
            centers=np.stack([p.translation for p in poses]),
            points=np.stack([tracks[i].point3d for i in active]) if active else np.zeros((0, 3)),
            track_index=np.array(active, dtype=int),
            obs_cam=np.concatenate(obs_cam) if obs_cam else np.zeros(0, int),
            obs_pt=np.concatenate(obs_pt) if obs_pt else np.zeros(0, int),
            obs_xy=np.concatenate(obs_xy) if obs_xy else np.zeros((0, 2)),
        )

    @property
    def observation_count(self) -> int:
        return len(self.obs_cam)

    def residuals(self, K, rotations, centers, points):
        Xc = _to_camera(rotations, centers, points, self.obs_cam, self.obs_pt)
        with np.errstate(divide="ignore", invalid="ignore"):
            return _project(K, Xc) - self.obs_xy, Xc

    def observation_pairs(self) -> Tuple[np.ndarray, np.ndarray]:
        """All ordered observation pairs (a, b) that share a point."""
        order = np.argsort(self.obs_pt, kind="stable")
        counts = np.bincount(self.obs_pt, minlength=len(self.points))
        starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
        pairs_a, pairs_b = [], []
        for length in np.unique(counts):
            if length == 0:
                continue
            pts = np.flatnonzero(counts == length)
            members = order[starts[pts][:, None] + np.arange(length)[None, :]]
            pairs_a.append(np.repeat(members, length, axis=1).ravel())
            pairs_b.append(np.tile(members, (1, length)).ravel())
        return np.concatenate(pairs_a), np.concatenate(pairs_b)


def _gauge_bases(rotations: np.ndarray, centers: np.ndarray, scale_camera: Optional[int],
                 baseline: Optional[np.ndarray]) -> np.ndarray:
    """Per-camera 6x6 bases of the allowed increments; zero columns are frozen directions."""
    bases = np.tile(np.eye(6), (len(rotations), 1, 1))
    bases[0] = 0.0
    if scale_camera is not None:
        # Translation increments R v must stay orthogonal to the initial baseline.
        u, _, _ = np.linalg.svd(baseline[:, None])
        perpendicular = u[:, 1:3]
        basis = np.zeros((6, 6))
        basis[:3, :3] = np.eye(3)
        basis[3:, 3:5] = rotations[scale_camera].T @ perpendicular
        bases[scale_camera] = basis
    return bases


class _LevenbergMarquardt:
    def __init__(self, flat: _FlatProblem, K: CameraIntrinsics, solver: SolverConfig):
        self.flat = flat
        self.K = K
        self.solver = solver
        self.camera_count = len(flat.rotations)
        self.pairs = flat.observation_pairs()
        seen = np.bincount(flat.obs_cam, minlength=self.camera_count)
        if np.any(seen[1:] == 0):
            raise BundleAdjustmentError(f"camera(s) {np.flatnonzero(seen == 0).tolist()} have no observations")
        offsets = np.linalg.norm(flat.centers - flat.centers[0], axis=1)
        moved = np.flatnonzero(offsets > 1e-9)
        self.scale_camera = int(moved[0]) if len(moved) else None
        self.baseline = flat.centers[self.scale_camera] - flat.centers[0] if len(moved) else None
        if self.scale_camera is None:
            logger.warning("all cameras share one centre: scale is left unconstrained")

    def _cost(self, rotations, centers, points) -> Tuple[float, bool]:
        residual, Xc = self.flat.residuals(self.K, rotations, centers, points)
        if np.any(Xc[:, 2] <= MIN_DEPTH):
            return np.inf, False
        return float(np.sum(residual * residual)), True

    def _normal_equations(self, rotations, centers, points, bases):
        flat = self.flat
        residual, Xc = flat.residuals(self.K, rotations, centers, points)
        J_cam, J_pt = _observation_jacobians(self.K, rotations, Xc, flat.obs_cam)
        J_cam = J_cam @ bases[flat.obs_cam]
        U = _accumulate(self.camera_count, flat.obs_cam, np.einsum("nki,nkj->nij", J_cam, J_cam))
        V = _accumulate(len(points), flat.obs_pt, np.einsum("nki,nkj->nij", J_pt, J_pt))
        W = np.einsum("nki,nkj->nij", J_cam, J_pt)
        g_cam = _accumulate(self.camera_count, flat.obs_cam, np.einsum("nki,nk->ni", J_cam, residual))
        g_pt = _accumulate(len(points), flat.obs_pt, np.einsum("nki,nk->ni", J_pt, residual))
        return U, V, W, g_cam, g_pt

    def _solve(self, U, V, W, g_cam, g_pt, active, lam):
        flat = self.flat
        m = self.camera_count
        V_inv = np.linalg.inv(V + lam * np.eye(3))
        Y = np.einsum("nij,njk->nik", W, V_inv[flat.obs_pt])
        a, b = self.pairs
        blocks = np.einsum("nij,nkj->nik", Y[a], W[b])
        S = np.zeros((m, m, 6, 6))
        S[np.arange(m), np.arange(m)] = U + lam * np.eye(6)
        S -= _accumulate(m * m, flat.obs_cam[a] * m + flat.obs_cam[b], blocks).reshape(m, m, 6, 6)
        rhs = -g_cam + _accumulate(m, flat.obs_cam, np.einsum("nij,nj->ni", Y, g_pt[flat.obs_pt]))
        S = S.transpose(0, 2, 1, 3).reshape(6 * m, 6 * m)
        rhs = rhs.reshape(6 * m)
        try:
            factor = cho_factor(S[np.ix_(active, active)])
        except LinAlgError as exc:
            raise BundleAdjustmentError(f"reduced camera system is not positive definite: {exc}") from exc
        delta_cam = np.zeros(6 * m)
        delta_cam[active] = cho_solve(factor, rhs[active])
        delta_cam = delta_cam.reshape(m, 6)
        back = _accumulate(len(V), flat.obs_pt, np.einsum("nji,nj->ni", W, delta_cam[flat.obs_cam]))
        delta_pt = np.einsum("pij,pj->pi", V_inv, -g_pt - back)
        return delta_cam, delta_pt

    def run(self, max_iterations: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray, int, bool]:
        flat = self.flat
        rotations, centers, points = flat.rotations.copy(), flat.centers.copy(), flat.points.copy()
        cost, _ = self._cost(rotations, centers, points)
        floor = COST_FLOOR * max(flat.observation_count, 1)
        lam = None
        iteration = 0
        while iteration < max_iterations:
            if cost <= floor:
                return rotations, centers, points, iteration, True
            bases = _gauge_bases(rotations, centers, self.scale_camera, self.baseline)
            active = np.flatnonzero(np.abs(bases).sum(axis=1).ravel() > 0)
            U, V, W, g_cam, g_pt = self._normal_equations(rotations, centers, points, bases)
            gradient = max(np.max(np.abs(g_cam.ravel()[active]), initial=0.0), np.max(np.abs(g_pt), initial=0.0))
            if gradient < self.solver.gradient_tolerance:
                return rotations, centers, points, iteration, True
            if lam is None:
                diagonal = np.concatenate((np.einsum("cii->ci", U).ravel()[active], np.einsum("pii->pi", V).ravel()))
                lam = self.solver.initial_damping * float(np.mean(diagonal))
            iteration += 1
            first_change = None
            while True:
                delta_cam, delta_pt = self._solve(U, V, W, g_cam, g_pt, active, lam)
                steps = np.einsum("cij,cj->ci", bases, delta_cam)
                new_rotations = rotations @ Rotation.from_rotvec(steps[:, :3]).as_matrix()
                new_centers = centers + np.einsum("cij,cj->ci", rotations, steps[:, 3:])
                new_points = points + delta_pt
                new_cost, valid = self._cost(new_rotations, new_centers, new_points)
                if valid and new_cost < cost:
                    break
                if first_change is None:
                    first_change = (new_cost - cost) / cost if valid else float("inf")
                lam *= 10.0
                if lam > MAX_DAMPING:
                    # Only a change within rounding of the cost counts as a minimum.
                    at_minimum = abs(first_change) < self.solver.relative_decrease
                    if not at_minimum:
                        logger.warning(f"LM stalled: no step lowers the cost {cost:.6e} "
                                       f"(gradient {gradient:.3e})")
                    return rotations, centers, points, iteration, at_minimum
            decrease = (cost - new_cost) / cost
            rotations, centers, points, cost = new_rotations, new_centers, new_points, new_cost
            lam = max(lam * 0.3, 1e-15)
            logger.debug(f"LM iteration {iteration}: cost {cost:.6e}, lambda {lam:.2e}")
            if decrease < self.solver.relative_decrease:
                return rotations, centers, points, iteration, True
        return rotations, centers, points, iteration, False


def _write_back(flat: _FlatProblem, tracks: List[Track], rotations, centers, points) -> List[PoseSE3]:
    for local, i in enumerate(flat.track_index):
        tracks[i] = replace(tracks[i], point3d=points[local].copy())
    return [PoseSE3.from_matrix(R, C) for R, C in zip(rotations, centers)]


def _run_lm(poses: List[PoseSE3], tracks: List[Track], K: CameraIntrinsics, solver: SolverConfig,
            max_iterations: int) -> Tuple[List[PoseSE3], List[Track], int, bool]:
    flat = _FlatProblem.build(poses, tracks)
    if flat.observation_count == 0:
        logger.warning("bundle adjustment has no active observations")
        return poses, tracks, 0, True
    rotations, centers, points, iterations, converged = _LevenbergMarquardt(flat, K, solver).run(max_iterations)
    tracks = list(tracks)
    return _write_back(flat, tracks, rotations, centers, points), tracks, iterations, converged


def optimize(problem: BAProblem) -> Tuple[List[PoseSE3], List[Track], BAReport]:
    """
    Refine poses and points of all active tracks.

    Reprojection pruning, when enabled, runs once after
    `pruning.prune_after` iterations and the optimization then restarts on
    the surviving tracks.

    Returns:
        (refined poses, tracks with refined points and statuses, BAReport)
    """
    pruning, solver = problem.pruning, problem.solver
    poses, tracks = list(problem.poses), list(problem.tracks)
    before = mean_reprojection_error(tracks, poses, problem.K)
    logger.info(f"BA start: {count_status(tracks, ACTIVE)} active tracks, {len(poses)} cameras, "
                f"mean reprojection {before:.4f} px")

    iterations = 0
    mid = float("nan")
    pruned_p3 = 0
    converged = True
    if pruning.use_reprojection:
        poses, tracks, done, converged = _run_lm(poses, tracks, problem.K, solver,
                                                 min(pruning.prune_after, solver.max_iterations))
        iterations += done
        mid = mean_reprojection_error(tracks, poses, problem.K)
        already = count_status(tracks, PRUNED_REPROJECTION)
        tracks = prune_reprojection(tracks, poses, problem.K, pruning.reprojection_threshold)
        pruned_p3 = count_status(tracks, PRUNED_REPROJECTION) - already
    remaining = solver.max_iterations - iterations
    if remaining > 0:
        poses, tracks, done, converged = _run_lm(poses, tracks, problem.K, solver, remaining)
        iterations += done
    after = mean_reprojection_error(tracks, poses, problem.K)

    report = BAReport(before_px=before, after_px=after,
                      pruned_mask=count_status(tracks, PRUNED_MASK),
                      pruned_geometry=count_status(tracks, PRUNED_GEOMETRY),
                      pruned_reprojection=pruned_p3,
                      untriangulated=count_status(tracks, UNTRIANGULATED),
                      iterations=iterations, converged=converged, mid_px=mid,
                      geometry_tolerance=pruning.geometry_tolerance if pruning.use_geometry else float("nan"),
                      reprojection_threshold=pruning.reprojection_threshold)
    if not converged:
        logger.warning(f"BA stopped after {iterations} iterations without converging")
    logger.info(f"BA done: {before:.4f} px -> {after:.4f} px in {iterations} iteration(s)")
    return poses, tracks, report


def prepare_tracks(matches: pd.DataFrame, poses: Sequence[PoseSE3], K: CameraIntrinsics,
                   prior: Optional[ScenePrior], pruning: PruningConfig, mask: Optional[StaticMask] = None,
                   min_angle_deg: float = 0.5) -> List[Track]:
    """Tracks from matches with P1 (mask) and P2 (geometry) applied as configured."""
    tracks = tracks_from_match_table(matches)
    if pruning.use_mask:
        tracks = prune_mask(tracks, mask)
    tracks = triangulate_tracks(tracks, poses, K, min_angle_deg)
    if pruning.use_geometry and prior is not None:
        tracks = prune_geometry(tracks, prior, pruning.geometry_tolerance)
    return tracks


def ablation_report(matches: pd.DataFrame, poses: Sequence[PoseSE3], K: CameraIntrinsics, prior: ScenePrior,
                    mask: Optional[StaticMask] = None, configs: Sequence[str] = tuple(ABLATION_CONFIGS),
                    pruning: Optional[PruningConfig] = None, solver: Optional[SolverConfig] = None,
                    min_angle_deg: float = 0.5, path: Optional[str] = None) -> pd.DataFrame:
    """
    Run bundle adjustment once per pruning configuration from the same
    initial poses and tabulate mean reprojection error before and after.

    Args:
        matches: all correspondences (not RANSAC-filtered).
        poses: initial poses shared by every configuration.
        configs: names out of SBA, P1, P2, P1+P2, P1+P2+P3.
        path: optional CSV destination (ba-report.csv).
    """
    base = pruning or PruningConfig()
    solver = solver or SolverConfig()
    rows = []
    for name in configs:
        if name not in ABLATION_CONFIGS:
            raise ValueError(f"unknown ablation config {name!r}; expected one of {list(ABLATION_CONFIGS)}")
        flags = ABLATION_CONFIGS[name]
        config = replace(base, use_mask=flags["mask"], use_geometry=flags["geometry"],
                         use_reprojection=flags["reprojection"])
        tracks = prepare_tracks(matches, poses, K, prior, config, mask, min_angle_deg)
        try:
            _, _, report = optimize(BAProblem(list(poses), tracks, K, prior, config, solver))
        except BundleAdjustmentError as exc:
            logger.error(f"ablation {name}: {exc}")
            report = BAReport(before_px=float("nan"), after_px=float("nan"), converged=False)
        rows.append({
            "config": name,
            "before_px": report.before_px,
            "after_px": report.after_px,
            "pruned_p1": report.pruned_mask,
            "pruned_p2": report.pruned_geometry,
            "pruned_p3": report.pruned_reprojection,
            "untriangulated": report.untriangulated,
            "iterations": report.iterations,
            "converged": report.converged,
        })
    table = pd.DataFrame(rows, columns=REPORT_COLUMNS)
    logger.info("Pruning ablation:\n" + table.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
    if path is not None:
        table.to_csv(path, index=False, float_format="%.17g")
    return table
