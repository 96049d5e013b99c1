#!/usr/bin/env python3
"""
geometry.py
----------------
Camera, pose, ray and scene-prior math shared by every stage of the
reconstruction pipeline.

Conventions:
    - Camera frame: +z optical axis, +x right, +y down (image rows).
    - World frame: +y runs along the tunnel axis, +z points up, +x completes a
      right-handed frame. A tunnel cross-section is the xz-plane.
    - PoseSE3 maps camera coordinates to world coordinates:
      p_world = rotation @ p_cam + translation, so `translation` is the camera
      centre in the world frame.
    - Pixel coordinates are continuous; pixel index (u, v) sits at (u, v).

All types here are immutable values and every function is pure.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Tuple, Union

import numpy as np
from scipy.spatial.transform import Rotation

logger = logging.getLogger(__name__)

DISTORTION_MAX_ITERATIONS = 20
DISTORTION_TOLERANCE_PX = 1e-10
# Largest pixel residual accepted when the fixed-point loop runs out of iterations.
DISTORTION_ACCEPT_PX = 1e-6
ORTHONORMAL_TOLERANCE = 1e-9


class TunnelReconError(Exception):
    """Base class of every error raised by the reconstruction library."""


class PointBehindCameraError(TunnelReconError):
    pass


class DistortionInversionError(TunnelReconError):
    pass


class InvalidPriorError(TunnelReconError):
    pass


class RayMissError(TunnelReconError):
    """A ray started inside a closed prior and hit nothing: a geometry bug."""


class OutsidePriorError(TunnelReconError):
    pass


def skew(v: np.ndarray) -> np.ndarray:
    """Return the cross-product matrix [v]x."""
    return np.array([[0.0, -v[2], v[1]],
                     [v[2], 0.0, -v[0]],
                     [-v[1], v[0], 0.0]])


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole camera with two-coefficient Brown radial distortion."""
    f: float
    cx: float
    cy: float
    width: int
    height: int
    k1: float = 0.0
    k2: float = 0.0

    def __post_init__(self):
        if not self.f > 0:
            raise ValueError(f"focal length must be positive, got {self.f}")
        if not 0 <= self.cx < self.width:
            raise ValueError(f"cx={self.cx} outside [0, {self.width})")
        if not 0 <= self.cy < self.height:
            raise ValueError(f"cy={self.cy} outside [0, {self.height})")

    @classmethod
    def from_fov(cls, width: int, height: int, omega_h: float,
                 k1: float = 0.0, k2: float = 0.0) -> "CameraIntrinsics":
        """Build a centred camera whose horizontal field of view is `omega_h` radians."""
        f = width / (2.0 * math.tan(omega_h / 2.0))
        return cls(f=f, cx=width / 2.0, cy=height / 2.0, width=width, height=height, k1=k1, k2=k2)

    @property
    def omega_h(self) -> float:
        return 2.0 * math.atan(self.width / (2.0 * self.f))

    @property
    def omega_v(self) -> float:
        return 2.0 * math.atan(self.height / (2.0 * self.f))

    @property
    def has_distortion(self) -> bool:
        return self.k1 != 0.0 or self.k2 != 0.0

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.f, 0.0, self.cx], [0.0, self.f, self.cy], [0.0, 0.0, 1.0]])

    def distortion_factor(self, r2: np.ndarray) -> np.ndarray:
        return 1.0 + self.k1 * r2 + self.k2 * r2 * r2

    def in_bounds(self, pixels: np.ndarray) -> np.ndarray:
        pixels = np.atleast_2d(pixels)
        return ((pixels[:, 0] >= 0) & (pixels[:, 0] <= self.width)
                & (pixels[:, 1] >= 0) & (pixels[:, 1] <= self.height))


def project_points(K: CameraIntrinsics, points_cam: np.ndarray) -> np.ndarray:
    """
    Project camera-frame points (N, 3) to pixels (N, 2).

    Raises:
        PointBehindCameraError: if any point has Z <= 0.
    """
    points_cam = np.atleast_2d(np.asarray(points_cam, dtype=float))
    z = points_cam[:, 2]
    if np.any(z <= 0):
        raise PointBehindCameraError(f"{int(np.sum(z <= 0))} point(s) with Z <= 0")
    xn = points_cam[:, 0] / z
    yn = points_cam[:, 1] / z
    if K.has_distortion:
        factor = K.distortion_factor(xn * xn + yn * yn)
        xn = xn * factor
        yn = yn * factor
    return np.column_stack((K.f * xn + K.cx, K.f * yn + K.cy))


def project(K: CameraIntrinsics, p_cam) -> np.ndarray:
    """Project a single camera-frame point to a pixel."""
    return project_points(K, np.asarray(p_cam, dtype=float).reshape(1, 3))[0]


def undistort_normalized(K: CameraIntrinsics, xd: np.ndarray, yd: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Invert the radial distortion by fixed-point iteration.

    Args:
        xd, yd: distorted normalized coordinates ((u - cx) / f, (v - cy) / f).

    Returns:
        Undistorted normalized coordinates.
    """
    if not K.has_distortion:
        return xd, yd
    xu, yu = xd.copy(), yd.copy()
    residual_px = np.inf
    for _ in range(DISTORTION_MAX_ITERATIONS):
        factor = K.distortion_factor(xu * xu + yu * yu)
        xu, yu = xd / factor, yd / factor
        factor = K.distortion_factor(xu * xu + yu * yu)
        residual_px = K.f * float(np.max(np.hypot(xu * factor - xd, yu * factor - yd), initial=0.0))
        if residual_px <= DISTORTION_TOLERANCE_PX:
            break
    if residual_px > DISTORTION_ACCEPT_PX:
        raise DistortionInversionError(
            f"distortion inversion did not converge: residual {residual_px:.3g} px "
            f"after {DISTORTION_MAX_ITERATIONS} iterations")
    return xu, yu


def pixel_rays(K: CameraIntrinsics, pixels: np.ndarray) -> np.ndarray:
    """Return unit camera-frame ray directions (N, 3) through the given pixels (N, 2)."""
    pixels = np.atleast_2d(np.asarray(pixels, dtype=float))
    xd = (pixels[:, 0] - K.cx) / K.f
    yd = (pixels[:, 1] - K.cy) / K.f
    xu, yu = undistort_normalized(K, xd, yd)
    dirs = np.column_stack((xu, yu, np.ones_like(xu)))
    return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


def image_grid(K: CameraIntrinsics) -> np.ndarray:
    """Pixel coordinates of every pixel index, row-major, shape (height * width, 2)."""
    us, vs = np.meshgrid(np.arange(K.width, dtype=float), np.arange(K.height, dtype=float))
    return np.column_stack((us.ravel(), vs.ravel()))


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        origin = np.asarray(self.origin, dtype=float).reshape(3)
        direction = np.asarray(self.direction, dtype=float).reshape(3)
        norm = np.linalg.norm(direction)
        if norm == 0:
            raise ValueError("ray direction must be non-zero")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "direction", direction / norm)

    def transported(self, pose: "PoseSE3") -> "Ray":
        """Express a camera-frame ray in the world frame of `pose`."""
        return Ray(pose.apply(self.origin), pose.rotation @ self.direction)


def pixel_ray(K: CameraIntrinsics, pixel) -> Ray:
    """Back-project a pixel to a camera-frame ray from the optical centre."""
    pixel = np.asarray(pixel, dtype=float).reshape(1, 2)
    if not K.in_bounds(pixel)[0]:
        raise ValueError(f"pixel {pixel[0]} outside the {K.width}x{K.height} image")
    return Ray(np.zeros(3), pixel_rays(K, pixel)[0])


@dataclass(frozen=True)
class PoseSE3:
    """Rigid camera-to-world transform."""
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rotation = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        translation = np.asarray(self.translation, dtype=float).reshape(3)
        if not np.allclose(rotation.T @ rotation, np.eye(3), atol=ORTHONORMAL_TOLERANCE):
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(rotation) - 1.0) > ORTHONORMAL_TOLERANCE:
            raise ValueError("rotation determinant is not +1")
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_rotvec(cls, rotvec, translation) -> "PoseSE3":
        return cls(Rotation.from_rotvec(np.asarray(rotvec, dtype=float)).as_matrix(), translation)

    @classmethod
    def from_matrix(cls, rotation: np.ndarray, translation) -> "PoseSE3":
        """Build a pose from a nearly-orthonormal matrix, re-orthonormalising it first."""
        return cls(Rotation.from_matrix(rotation).as_matrix(), translation)

    def as_rotvec(self) -> np.ndarray:
        return Rotation.from_matrix(self.rotation).as_rotvec()

    @property
    def center(self) -> np.ndarray:
        return self.translation

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map camera-frame points (3,) or (N, 3) into the world frame."""
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        """Map world-frame points (3,) or (N, 3) into the camera frame."""
        points = np.asarray(points, dtype=float)
        return (points - self.translation) @ self.rotation

    def inverse(self) -> "PoseSE3":
        return invert(self)


def compose(a: PoseSE3, b: PoseSE3) -> PoseSE3:
    """Return the pose that applies `b` first, then `a`."""
    return PoseSE3(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(pose: PoseSE3) -> PoseSE3:
    rt = pose.rotation.T
    return PoseSE3(rt, -rt @ pose.translation)


def rotation_about_axis(angle: float, axis=(0.0, 1.0, 0.0)) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    return Rotation.from_rotvec(angle * axis / np.linalg.norm(axis)).as_matrix()


def rotation_angle(rotation: np.ndarray) -> float:
    """Angle in radians of a rotation matrix."""
    cos = (np.trace(rotation) - 1.0) / 2.0
    return float(np.arccos(np.clip(cos, -1.0, 1.0)))


def angle_between(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    cos = a @ b / (np.linalg.norm(a) * np.linalg.norm(b))
    return float(np.arccos(np.clip(cos, -1.0, 1.0)))


# --------------------------------------------------------------------------
# Scene priors
# --------------------------------------------------------------------------

CYLINDER_SURFACE = "cylinder"
BOX_SURFACES = ("floor", "left", "right", "ceiling")
SURFACE_IDS = (CYLINDER_SURFACE,) + BOX_SURFACES
TUNNEL_AXIS = np.array([0.0, 1.0, 0.0])


@dataclass(frozen=True)
class Cylinder:
    """Tunnel of radius `radius` whose axis is the world +y axis through the origin."""
    radius: float
    axis: Tuple[float, float, float] = (0.0, 1.0, 0.0)

    def __post_init__(self):
        if not self.radius > 0:
            raise InvalidPriorError(f"cylinder radius must be positive, got {self.radius}")
        if not np.allclose(np.asarray(self.axis, dtype=float), TUNNEL_AXIS):
            raise InvalidPriorError("only the canonical +y tunnel axis is supported")

    surface_ids = (CYLINDER_SURFACE,)

    def radial_distance(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(points)
        return np.hypot(points[:, 0], points[:, 2])

    def surface_distance(self, points: np.ndarray) -> np.ndarray:
        return np.abs(self.radial_distance(points) - self.radius)

    def contains(self, points: np.ndarray) -> np.ndarray:
        return self.radial_distance(points) < self.radius

    def scaled(self, factor: float) -> "Cylinder":
        return Cylinder(self.radius * factor, self.axis)

    def intersect(self, origins: np.ndarray, directions: np.ndarray):
        """
        Nearest positive intersection of rays starting inside the cylinder.

        Returns:
            (t, positions, surface_index, normals) with inward unit normals.
        """
        ox, oz = origins[:, 0], origins[:, 2]
        dx, dz = directions[:, 0], directions[:, 2]
        a = dx * dx + dz * dz
        b = 2.0 * (ox * dx + oz * dz)
        c = ox * ox + oz * oz - self.radius ** 2
        disc = b * b - 4.0 * a * c
        if np.any(a <= 0) or np.any(disc < 0):
            raise RayMissError(f"{int(np.sum((a <= 0) | (disc < 0)))} ray(s) miss the cylinder wall")
        # c < 0 strictly inside, so exactly one root is positive.
        sq = np.sqrt(disc)
        q = -0.5 * (b + np.where(b >= 0, sq, -sq))
        t = np.where(b >= 0, c / q, q / a)
        if np.any(~(t > 0)):
            raise RayMissError("ray origin is not strictly inside the cylinder")
        positions = origins + t[:, None] * directions
        rho = np.hypot(positions[:, 0], positions[:, 2])
        positions[:, 0] *= self.radius / rho
        positions[:, 2] *= self.radius / rho
        normals = np.column_stack((-positions[:, 0], np.zeros_like(rho), -positions[:, 2])) / self.radius
        return t, positions, np.zeros(len(t), dtype=np.int8), normals


@dataclass(frozen=True)
class Plane:
    """Plane {p : normal . p = offset}; the normal points into the free space."""
    normal: Tuple[float, float, float]
    offset: float

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        return np.atleast_2d(points) @ np.asarray(self.normal, dtype=float) - self.offset


@dataclass(frozen=True)
class BoxSection:
    """Rectangular underpass section bounded by four planes parallel to the tunnel axis."""
    floor: Plane
    ceiling: Plane
    left: Plane
    right: Plane
    surface_ids: Tuple[str, ...] = field(default=BOX_SURFACES, init=False)

    def __post_init__(self):
        for name in BOX_SURFACES:
            normal = np.asarray(getattr(self, name).normal, dtype=float)
            if abs(np.linalg.norm(normal) - 1.0) > 1e-9:
                raise InvalidPriorError(f"{name} normal is not unit length")
            if abs(normal @ TUNNEL_AXIS) > 1e-9:
                raise InvalidPriorError(f"{name} plane is not parallel to the tunnel axis")
        for a, b in (("floor", "ceiling"), ("left", "right")):
            pa, pb = getattr(self, a), getattr(self, b)
            if not np.allclose(np.asarray(pa.normal), -np.asarray(pb.normal), atol=1e-9):
                raise InvalidPriorError(f"{a} and {b} normals are not antiparallel")
            if pa.offset + pb.offset >= 0:
                raise InvalidPriorError(f"{a} and {b} planes bound an empty section")

    @classmethod
    def from_extents(cls, left: float, right: float, floor: float, ceiling: float) -> "BoxSection":
        """Axis-aligned section with walls at x=left/right and floor/ceiling at z=floor/ceiling."""
        return cls(floor=Plane((0.0, 0.0, 1.0), floor),
                   ceiling=Plane((0.0, 0.0, -1.0), -ceiling),
                   left=Plane((1.0, 0.0, 0.0), left),
                   right=Plane((-1.0, 0.0, 0.0), -right))

    @property
    def planes(self) -> Tuple[Plane, ...]:
        return tuple(getattr(self, name) for name in BOX_SURFACES)

    def signed_distances(self, points: np.ndarray) -> np.ndarray:
        return np.column_stack([p.signed_distance(points) for p in self.planes])

    def surface_distance(self, points: np.ndarray) -> np.ndarray:
        s = self.signed_distances(points)
        inside = np.all(s >= 0, axis=1)
        outside = np.sqrt(np.sum(np.minimum(s, 0.0) ** 2, axis=1))
        return np.where(inside, np.min(s, axis=1), outside)

    def contains(self, points: np.ndarray) -> np.ndarray:
        return np.all(self.signed_distances(points) > 0, axis=1)

    def scaled(self, factor: float) -> "BoxSection":
        return BoxSection(**{name: Plane(getattr(self, name).normal, getattr(self, name).offset * factor)
                             for name in BOX_SURFACES})

    def intersect(self, origins: np.ndarray, directions: np.ndarray):
        """Nearest positive intersection; exact ties go to floor, left, right, ceiling in that order."""
        n = len(origins)
        ts = np.full((n, 4), np.inf)
        normals = np.array([p.normal for p in self.planes], dtype=float)
        offsets = np.array([p.offset for p in self.planes], dtype=float)
        denom = directions @ normals.T
        numer = offsets[None, :] - origins @ normals.T
        with np.errstate(divide="ignore", invalid="ignore"):
            candidate = numer / denom
        hit = (denom < 0) & (candidate > 0)
        ts[hit] = candidate[hit]
        index = np.argmin(ts, axis=1).astype(np.int8)
        t = ts[np.arange(n), index]
        if np.any(~np.isfinite(t)):
            raise RayMissError(f"{int(np.sum(~np.isfinite(t)))} ray(s) miss the box section")
        positions = origins + t[:, None] * directions
        # Snap onto the hit plane.
        hit_normals = normals[index]
        positions += (offsets[index] - np.sum(positions * hit_normals, axis=1))[:, None] * hit_normals
        return t, positions, index, hit_normals


ScenePrior = Union[Cylinder, BoxSection]


def prior_surface_name(prior: ScenePrior, index: int) -> str:
    return prior.surface_ids[int(index)]


def require_inside(prior: ScenePrior, point: np.ndarray, what: str = "camera") -> None:
    if not bool(prior.contains(np.asarray(point, dtype=float).reshape(1, 3))[0]):
        raise OutsidePriorError(f"{what} at {np.round(point, 4).tolist()} is not strictly inside the prior")


def surface_coordinates(prior: ScenePrior, positions: np.ndarray, surface_index: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Unrolled (s, t) wall coordinates in meters of points on the prior.

    t is always the axial coordinate y. On the cylinder s is the arc length
    r * atan2(x, z); on the floor and ceiling s = x, on the side walls s = z.
    """
    positions = np.atleast_2d(positions)
    t = positions[:, 1].copy()
    if isinstance(prior, Cylinder):
        return prior.radius * np.arctan2(positions[:, 0], positions[:, 2]), t
    surface_index = np.asarray(surface_index)
    horizontal = (surface_index == BOX_SURFACES.index("floor")) | (surface_index == BOX_SURFACES.index("ceiling"))
    return np.where(horizontal, positions[:, 0], positions[:, 2]), t


def cast_pixels(prior: ScenePrior, pose: PoseSE3, K: CameraIntrinsics, pixels: np.ndarray):
    """
    Intersect the world rays through `pixels` of a camera at `pose` with the prior.

    Returns:
        (t, positions, surface_index, normals, directions), all per pixel.
    """
    require_inside(prior, pose.center)
    directions = pixel_rays(K, pixels) @ pose.rotation.T
    origins = np.broadcast_to(pose.center, directions.shape)
    t, positions, surface_index, normals = prior.intersect(origins, directions)
    return t, positions, surface_index, normals, directions


def dlt_triangulate(normalized: np.ndarray, projections: np.ndarray) -> np.ndarray:
    """
    Linear multi-view triangulation of a batch of points.

    Args:
        normalized: (N, V, 2) undistorted normalized observations.
        projections: (N, V, 3, 4) or (V, 3, 4) world-to-camera matrices [R^T | -R^T C].

    Returns:
        (N, 3) points; rows whose homogeneous scale vanishes are NaN.
    """
    normalized = np.asarray(normalized, dtype=float)
    projections = np.broadcast_to(projections, normalized.shape[:2] + (3, 4))
    rows_x = normalized[..., 0, None] * projections[..., 2, :] - projections[..., 0, :]
    rows_y = normalized[..., 1, None] * projections[..., 2, :] - projections[..., 1, :]
    A = np.concatenate((rows_x, rows_y), axis=1)
    _, _, vt = np.linalg.svd(A)
    homogeneous = vt[:, -1, :]
    w = homogeneous[:, 3]
    with np.errstate(divide="ignore", invalid="ignore"):
        points = homogeneous[:, :3] / w[:, None]
    points[np.abs(w) < 1e-12] = np.nan
    return points


def projection_matrix(pose: PoseSE3) -> np.ndarray:
    """World-to-camera 3x4 matrix of a camera-to-world pose."""
    rt = pose.rotation.T
    return np.hstack((rt, (-rt @ pose.translation)[:, None]))


def normalized_coordinates(K: CameraIntrinsics, pixels: np.ndarray) -> np.ndarray:
    """Undistorted normalized image coordinates (N, 2) of pixels (N, 2)."""
    pixels = np.atleast_2d(np.asarray(pixels, dtype=float))
    xu, yu = undistort_normalized(K, (pixels[:, 0] - K.cx) / K.f, (pixels[:, 1] - K.cy) / K.f)
    return np.column_stack((xu, yu))
