#!/usr/bin/env python3
"""
surface_mapping.py
----------------
Dense reconstruction against the scene prior and texture-atlas stitching.

Every pixel of a posed frame is cast onto the prior, giving one colored
surface point per pixel. Points are streamed frame by frame into a
TextureAtlas: one unwrapped raster for a cylinder (or for a box section seen
as a cylinder), or one raster per box plane. A texel keeps the point seen
most head-on; ties go to the nearer camera, then the lower frame and pixel
index, so the atlas does not depend on the order points arrive in.
"""
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from utils.correspondence import StaticMask, frame_mask_for
from utils.file_manager import PlyWriter, load_image, save_image, save_mask
from utils.geometry import (BOX_SURFACES, CYLINDER_SURFACE, BoxSection, CameraIntrinsics, Cylinder, PoseSE3, Ray,
                            ScenePrior, TunnelReconError, cast_pixels, image_grid, prior_surface_name,
                            require_inside, surface_coordinates)

logger = logging.getLogger(__name__)

LAYOUTS = ("cylinder", "planes")
SURFACE_TOLERANCE = 1e-6
NO_FRAME = np.iinfo(np.int64).max


class OffSurfaceError(TunnelReconError):
    pass


@dataclass(frozen=True)
class DensePoint:
    position: np.ndarray
    color: np.ndarray
    source_frame: int
    source_pixel: Tuple[int, int]
    incidence_cos: float


@dataclass
class DensePoints:
    """All surface points reconstructed from one frame, one row per unmasked pixel."""
    frame: int
    positions: np.ndarray
    colors: np.ndarray
    pixels: np.ndarray
    pixel_index: np.ndarray
    incidence_cos: np.ndarray
    distance: np.ndarray
    surface_index: np.ndarray

    def __len__(self) -> int:
        return len(self.positions)

    def __iter__(self) -> Iterator[DensePoint]:
        for k in range(len(self)):
            yield DensePoint(self.positions[k], self.colors[k], self.frame,
                             (int(self.pixels[k, 0]), int(self.pixels[k, 1])), float(self.incidence_cos[k]))


# --------------------------------------------------------------------------
# Ray casting
# --------------------------------------------------------------------------

def intersect_ray_prior(ray: Ray, prior: ScenePrior) -> Tuple[np.ndarray, str, float]:
    """
    Nearest positive intersection of a world ray with the prior.

    Returns:
        (position, surface id, |cos| of the angle between ray and surface normal)

    Raises:
        OutsidePriorError: if the ray origin is not strictly inside the prior.
    """
    require_inside(prior, ray.origin, what="ray origin")
    _, positions, surface_index, normals = prior.intersect(ray.origin[None], ray.direction[None])
    incidence = abs(float(ray.direction @ normals[0]))
    return positions[0], prior_surface_name(prior, surface_index[0]), incidence


def classify_surface(position: np.ndarray, prior: ScenePrior, tolerance: float = SURFACE_TOLERANCE) -> str:
    """
    Name of the prior surface a point lies on; points on an edge of a box
    section go to floor, then left, right and ceiling.

    Raises:
        OffSurfaceError: if the point is farther than `tolerance` from every surface.
    """
    position = np.asarray(position, dtype=float).reshape(1, 3)
    if isinstance(prior, Cylinder):
        if prior.surface_distance(position)[0] > tolerance:
            raise OffSurfaceError(f"point {position[0].tolist()} is not on the cylinder wall")
        return CYLINDER_SURFACE
    distances = prior.signed_distances(position)[0]
    if np.all(distances >= -tolerance):
        for name, distance in zip(BOX_SURFACES, distances):
            if abs(distance) <= tolerance:
                return name
    raise OffSurfaceError(f"point {position[0].tolist()} is not on any surface of the box section")


def reconstruct_frame(image: np.ndarray, pose: PoseSE3, K: CameraIntrinsics, prior: ScenePrior,
                      frame_index: int = 0, mask: Optional[np.ndarray] = None) -> DensePoints:
    """Cast every unmasked pixel of one frame onto the prior and color it from the image."""
    image = np.asarray(image)
    if image.shape[:2] != (K.height, K.width):
        raise ValueError(f"frame {frame_index} is {image.shape[1]}x{image.shape[0]}, camera is {K.width}x{K.height}")
    grid = image_grid(K)
    index = np.arange(len(grid))
    if mask is not None:
        index = np.flatnonzero(~np.asarray(mask, dtype=bool).ravel())
    pixels = grid[index]
    t, positions, surface_index, normals, directions = cast_pixels(prior, pose, K, pixels)
    colors = image.reshape(-1, image.shape[2] if image.ndim == 3 else 1)[index]
    if colors.shape[1] == 1:
        colors = np.repeat(colors, 3, axis=1)
    return DensePoints(frame=int(frame_index), positions=positions, colors=colors[:, :3].astype(np.uint8),
                       pixels=pixels.astype(int), pixel_index=index,
                       incidence_cos=np.abs(np.sum(directions * normals, axis=1)),
                       distance=t, surface_index=np.asarray(surface_index, dtype=np.int8))


def reconstruct_dense(frames: Sequence, poses: Sequence[PoseSE3], K: CameraIntrinsics, prior: ScenePrior,
                      mask: Optional[StaticMask] = None, frame_indices: Optional[Sequence[int]] = None,
                      threads: int = 1) -> Iterator[DensePoints]:
    """
    Stream the dense reconstruction of a sequence, one DensePoints per frame
    in input order.

    Args:
        frames: image arrays, or paths loaded on demand.
        poses: metric camera-to-world poses, one per frame.
        mask: static mask (one array, or per-frame arrays keyed by frame index).
        frame_indices: frame numbers to report; defaults to 0..len(frames)-1.
        threads: frames reconstructed concurrently; at most that many are held in memory.
    """
    if len(frames) != len(poses):
        raise ValueError(f"{len(frames)} frames but {len(poses)} poses")
    frame_indices = list(range(len(frames))) if frame_indices is None else list(frame_indices)
    threads = max(int(threads), 1)

    def work(k):
        image = load_image(frames[k]) if isinstance(frames[k], str) else frames[k]
        frame_mask = frame_mask_for(mask, frame_indices[k]) if mask is not None else None
        return reconstruct_frame(image, poses[k], K, prior, frame_indices[k], frame_mask)

    if threads == 1:
        for k in range(len(frames)):
            yield work(k)
        return
    with ThreadPoolExecutor(max_workers=threads) as ex:
        for start in range(0, len(frames), threads):
            yield from ex.map(work, range(start, min(start + threads, len(frames))))


# --------------------------------------------------------------------------
# Atlas coordinates
# --------------------------------------------------------------------------

def cylindrical_uv(positions: np.ndarray, prior: ScenePrior, width: int, texels_per_meter: float,
                   y_min: float = 0.0, tolerance: float = SURFACE_TOLERANCE) -> Tuple[np.ndarray, np.ndarray]:
    """
    Unwrapped atlas coordinates: u = (atan2(x, z) / 2pi mod 1) * width,
    v = (y - y_min) * texels_per_meter.

    Raises:
        OffSurfaceError: if a position is not on the prior surface.
    """
    positions = np.atleast_2d(np.asarray(positions, dtype=float))
    off = prior.surface_distance(positions) > tolerance
    if np.any(off):
        raise OffSurfaceError(f"{int(np.sum(off))} position(s) are not on the prior surface")
    u = np.mod(np.arctan2(positions[:, 0], positions[:, 2]) / (2.0 * math.pi), 1.0) * width
    v = (positions[:, 1] - y_min) * texels_per_meter
    return u, v


def _box_corners(prior: BoxSection) -> Dict[Tuple[str, str], np.ndarray]:
    """(x, z) of the four edges where a horizontal plane meets a wall."""
    corners = {}
    for horizontal in ("floor", "ceiling"):
        for wall in ("left", "right"):
            a, b = getattr(prior, horizontal), getattr(prior, wall)
            A = np.array([[a.normal[0], a.normal[2]], [b.normal[0], b.normal[2]]])
            corners[(horizontal, wall)] = np.linalg.solve(A, [a.offset, b.offset])
    return corners


def _plane_extent(prior: BoxSection, name: str) -> Tuple[float, float]:
    """Range of the in-plane coordinate s of a box surface (x for floor/ceiling, z for walls)."""
    corners = _box_corners(prior)
    if name in ("floor", "ceiling"):
        values = [corners[(name, wall)][0] for wall in ("left", "right")]
    else:
        values = [corners[(horizontal, name)][1] for horizontal in ("floor", "ceiling")]
    return min(values), max(values)


def _prior_reach(prior: ScenePrior) -> float:
    if isinstance(prior, Cylinder):
        return prior.radius
    return max(float(np.linalg.norm(c)) for c in _box_corners(prior).values())


def camera_matched_resolution(K: CameraIntrinsics, prior: ScenePrior, margin: float = 0.9) -> Tuple[int, float]:
    """
    Atlas width (texels per 360 degrees) and texels per meter no finer than
    the pixel footprint of a centred camera, so that every texel inside a
    view's footprint receives at least one pixel.
    """
    if not 0 < margin <= 1:
        raise ValueError("margin must be in (0, 1]")
    width = int(math.floor(margin * 2.0 * math.pi * K.f))
    return width, margin * K.f / _prior_reach(prior)


def visible_axial_extent(poses: Sequence[PoseSE3], K: CameraIntrinsics, prior: ScenePrior) -> Tuple[float, float]:
    """Smallest and largest y on the prior seen by any of the poses."""
    us = np.arange(K.width, dtype=float)
    vs = np.arange(K.height, dtype=float)
    border = np.vstack((np.column_stack((us, np.zeros_like(us))),
                        np.column_stack((us, np.full_like(us, K.height - 1))),
                        np.column_stack((np.zeros_like(vs), vs)),
                        np.column_stack((np.full_like(vs, K.width - 1), vs))))
    low, high = np.inf, -np.inf
    for pose in poses:
        _, positions, _, _, _ = cast_pixels(prior, pose, K, border)
        low = min(low, float(np.min(positions[:, 1])))
        high = max(high, float(np.max(positions[:, 1])))
    return low, high


# --------------------------------------------------------------------------
# Texture atlas
# --------------------------------------------------------------------------

@dataclass
class AtlasSpec:
    """
    Raster layout of an atlas.

    `width` is the number of texels per 360 degrees of the cylinder unwrap;
    `texels_per_meter` sets the axial resolution (and the in-plane one for
    the planes layout). `frames`, when given, limits which frames stitch.
    """
    y_min: float
    y_max: float
    width: int = 7500
    texels_per_meter: float = 1.0 / 0.0017
    layout: str = "cylinder"
    average: bool = False
    frames: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        if self.layout not in LAYOUTS:
            raise ValueError(f"unknown atlas layout {self.layout!r}; expected one of {LAYOUTS}")
        if self.width < 1 or not self.texels_per_meter > 0:
            raise ValueError("atlas width and texels_per_meter must be positive")
        if not self.y_max > self.y_min:
            raise ValueError(f"empty axial range [{self.y_min}, {self.y_max}]")

    @property
    def rows(self) -> int:
        return int(math.ceil((self.y_max - self.y_min) * self.texels_per_meter)) + 1

    @property
    def texels_per_degree(self) -> float:
        return self.width / 360.0


def _wins(cos, dist, frame, pixel, best_cos, best_dist, best_frame, best_pixel) -> np.ndarray:
    """Contribution key order: larger cos, then smaller distance, frame and pixel index."""
    return ((cos > best_cos)
            | ((cos == best_cos) & ((dist < best_dist)
                                    | ((dist == best_dist) & ((frame < best_frame)
                                                              | ((frame == best_frame) & (pixel < best_pixel)))))))


@dataclass
class AtlasSurface:
    """One raster of an atlas together with its per-texel contention state."""
    name: str
    shape: Tuple[int, int]
    s_min: float = 0.0
    best_cos: np.ndarray = field(init=False)
    best_dist: np.ndarray = field(init=False)
    best_frame: np.ndarray = field(init=False)
    best_pixel: np.ndarray = field(init=False)
    best_color: np.ndarray = field(init=False)
    sums: np.ndarray = field(init=False)
    counts: np.ndarray = field(init=False)

    def __post_init__(self):
        size = self.shape[0] * self.shape[1]
        self.best_cos = np.full(size, -np.inf)
        self.best_dist = np.full(size, np.inf)
        self.best_frame = np.full(size, NO_FRAME, dtype=np.int64)
        self.best_pixel = np.full(size, NO_FRAME, dtype=np.int64)
        self.best_color = np.zeros((size, 3), dtype=np.uint8)
        self.sums = np.zeros((size, 3))
        self.counts = np.zeros(size, dtype=np.int64)

    def add(self, flat: np.ndarray, cos: np.ndarray, dist: np.ndarray, frame: np.ndarray, pixel: np.ndarray,
            colors: np.ndarray) -> None:
        if len(flat) == 0:
            return
        size = len(self.counts)
        self.counts += np.bincount(flat, minlength=size)
        for channel in range(3):
            self.sums[:, channel] += np.bincount(flat, weights=colors[:, channel].astype(float), minlength=size)
        # Best contribution per texel inside the batch first, then against the raster.
        order = np.lexsort((pixel, frame, dist, -cos, flat))
        flat, cos, dist, frame, pixel, colors = flat[order], cos[order], dist[order], frame[order], pixel[order], \
            colors[order]
        _, first = np.unique(flat, return_index=True)
        flat, cos, dist, frame, pixel, colors = flat[first], cos[first], dist[first], frame[first], pixel[first], \
            colors[first]
        better = _wins(cos, dist, frame, pixel, self.best_cos[flat], self.best_dist[flat], self.best_frame[flat],
                       self.best_pixel[flat])
        target = flat[better]
        self.best_cos[target] = cos[better]
        self.best_dist[target] = dist[better]
        self.best_frame[target] = frame[better]
        self.best_pixel[target] = pixel[better]
        self.best_color[target] = colors[better]

    def merge(self, other: "AtlasSurface") -> None:
        if other.shape != self.shape:
            raise ValueError(f"cannot merge {other.shape} raster into {self.shape}")
        self.counts += other.counts
        self.sums += other.sums
        better = _wins(other.best_cos, other.best_dist, other.best_frame, other.best_pixel,
                       self.best_cos, self.best_dist, self.best_frame, self.best_pixel)
        for name in ("best_cos", "best_dist", "best_frame", "best_pixel", "best_color"):
            getattr(self, name)[better] = getattr(other, name)[better]

    @property
    def hole_mask(self) -> np.ndarray:
        return (self.counts == 0).reshape(self.shape)

    @property
    def provenance(self) -> np.ndarray:
        """Source frame per texel, -1 for holes."""
        return np.where(self.counts > 0, self.best_frame, -1).reshape(self.shape)

    def image(self, average: bool = False) -> np.ndarray:
        if average:
            with np.errstate(invalid="ignore", divide="ignore"):
                mean = self.sums / self.counts[:, None]
            colors = np.where(self.counts[:, None] > 0, np.round(mean), 0.0).astype(np.uint8)
        else:
            colors = self.best_color
        return colors.reshape(self.shape + (3,))


class TextureAtlas:
    """Named rasters of the unwrapped prior surface with hole masks and per-texel provenance."""

    def __init__(self, prior: ScenePrior, spec: AtlasSpec):
        self.prior = prior
        self.spec = spec
        self.surfaces: Dict[str, AtlasSurface] = {}
        rows = spec.rows
        if spec.layout == "cylinder":
            self.surfaces[CYLINDER_SURFACE] = AtlasSurface(CYLINDER_SURFACE, (rows, spec.width))
        elif isinstance(prior, Cylinder):
            raise ValueError("the planes layout needs a box section prior")
        else:
            for name in BOX_SURFACES:
                s_min, s_max = _plane_extent(prior, name)
                cols = int(math.ceil((s_max - s_min) * spec.texels_per_meter)) + 1
                self.surfaces[name] = AtlasSurface(name, (rows, cols), s_min=s_min)

    @property
    def texels_per_meter(self) -> float:
        return self.spec.texels_per_meter

    def texel_index(self, name: str, positions: np.ndarray,
                    surface_index: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
        """Flat texel index of each position on raster `name`, and which positions land inside it."""
        surface = self.surfaces[name]
        rows, cols = surface.shape
        if name == CYLINDER_SURFACE:
            u, v = cylindrical_uv(positions, self.prior, self.spec.width, self.spec.texels_per_meter,
                                  self.spec.y_min, tolerance=np.inf)
            col = np.floor(u).astype(np.int64) % cols
        else:
            s, t = surface_coordinates(self.prior, positions, surface_index)
            col = np.floor((s - surface.s_min) * self.spec.texels_per_meter).astype(np.int64)
            v = (t - self.spec.y_min) * self.spec.texels_per_meter
        row = np.floor(v).astype(np.int64)
        inside = (row >= 0) & (row < rows) & (col >= 0) & (col < cols)
        return row[inside] * cols + col[inside], inside

    def add(self, points: DensePoints) -> None:
        for name, surface in self.surfaces.items():
            if name == CYLINDER_SURFACE:
                select = np.ones(len(points), dtype=bool)
            else:
                select = points.surface_index == BOX_SURFACES.index(name)
            if not np.any(select):
                continue
            flat, inside = self.texel_index(name, points.positions[select], points.surface_index[select])
            keep = np.flatnonzero(select)[inside]
            surface.add(flat, points.incidence_cos[keep], points.distance[keep],
                        np.full(len(keep), points.frame, dtype=np.int64), points.pixel_index[keep].astype(np.int64),
                        points.colors[keep])

    def merge(self, other: "TextureAtlas") -> "TextureAtlas":
        """Fold another atlas over the same layout into this one."""
        if set(other.surfaces) != set(self.surfaces):
            raise ValueError("atlases have different surfaces")
        for name, surface in self.surfaces.items():
            surface.merge(other.surfaces[name])
        return self

    def image(self, name: str) -> np.ndarray:
        return self.surfaces[name].image(self.spec.average)

    @property
    def hole_mask(self) -> Dict[str, np.ndarray]:
        return {name: surface.hole_mask for name, surface in self.surfaces.items()}

    @property
    def provenance(self) -> Dict[str, np.ndarray]:
        return {name: surface.provenance for name, surface in self.surfaces.items()}


def stitch(points: Iterable[DensePoints], prior: ScenePrior, spec: AtlasSpec) -> TextureAtlas:
    """Accumulate a stream of per-frame dense points into a new TextureAtlas."""
    atlas = TextureAtlas(prior, spec)
    wanted = None if spec.frames is None else set(spec.frames)
    used = 0
    for batch in points:
        if wanted is not None and batch.frame not in wanted:
            continue
        atlas.add(batch)
        used += 1
    holes = sum(int(np.sum(mask)) for mask in atlas.hole_mask.values())
    logger.info(f"Stitched {used} frame(s) into {len(atlas.surfaces)} raster(s), {holes} empty texels")
    return atlas


def coverage_region(atlas: TextureAtlas) -> Dict[str, np.ndarray]:
    """
    Texels the stitched views enclose: in every raster column, the rows
    between the first and the last filled texel.
    """
    regions = {}
    for name, holes in atlas.hole_mask.items():
        filled = ~holes
        rows = np.arange(holes.shape[0])[:, None]
        any_filled = filled.any(axis=0)
        first = np.where(any_filled, np.argmax(filled, axis=0), holes.shape[0])
        last = np.where(any_filled, holes.shape[0] - 1 - np.argmax(filled[::-1], axis=0), -1)
        regions[name] = (rows >= first[None, :]) & (rows <= last[None, :])
    return regions


def hole_count(atlas: TextureAtlas, within_coverage: bool = True) -> int:
    """Empty texels over all rasters; by default only those inside the coverage region."""
    masks = atlas.hole_mask
    if not within_coverage:
        return int(sum(np.sum(mask) for mask in masks.values()))
    regions = coverage_region(atlas)
    return int(sum(np.sum(masks[name] & regions[name]) for name in masks))


def write_atlas(atlas: TextureAtlas, output_dir: str) -> List[str]:
    """Write atlas_<surface>.png and holes_<surface>.png for every raster."""
    os.makedirs(output_dir, exist_ok=True)
    written = []
    for name in atlas.surfaces:
        image_path = os.path.join(output_dir, f"atlas_{name}.png")
        holes_path = os.path.join(output_dir, f"holes_{name}.png")
        save_image(image_path, atlas.image(name))
        save_mask(holes_path, atlas.surfaces[name].hole_mask)
        written += [image_path, holes_path]
    logger.info(f"Wrote {len(atlas.surfaces)} atlas raster(s) to {output_dir}")
    return written


def export_pointcloud(points: Iterable[DensePoints], path: str, binary: bool = True) -> int:
    """Stream dense points into a PLY file; returns the number of points written."""
    with PlyWriter(path, binary=binary) as writer:
        for batch in points:
            writer.write(batch.positions, batch.colors)
        return writer.count
