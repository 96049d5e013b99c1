#!/usr/bin/env python3
"""
simulator.py
----------------
Synthetic spiral captures: a camera rotating about and advancing along the
tunnel axis, rendered by analytic ray casting against the scene prior and a
wall texture, with the groundtruth pose of every frame.
"""
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd
from scipy.ndimage import map_coordinates

from utils.file_manager import (frame_path, load_image, poses_to_frame, read_poses, save_image, save_mask,
                                write_poses)
from utils.geometry import (CameraIntrinsics, PoseSE3, ScenePrior, cast_pixels, image_grid,
                            rotation_about_axis, surface_coordinates)

logger = logging.getLogger(__name__)

CAPTURE_MODES = ("spiral", "cylindrical")
PROCEDURAL_TEXTURES = ("checker", "brick", "waves")
ROW_BLOCK = 64
OCCLUDER_SHADES = (0.08, 0.16)


@dataclass(frozen=True)
class TrajectorySpec:
    """
    Camera path of a spiral (or cylindrical) capture.

    Frame k of a spiral is rotated k * base_rotation about the tunnel axis and
    advanced by k * base_translation. A cylindrical capture completes a full
    turn in place, then advances one pitch (n * base_translation).
    """
    images_per_rotation: int = 10
    rotation_count: int = 10
    base_translation: Tuple[float, float, float] = (0.0, 0.15, 0.0)
    base_rotation: Optional[float] = None
    translation_noise_sd: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    rotation_noise_sd: float = 0.0
    start_offset: Tuple[float, float] = (0.0, 0.0)
    mode: str = "spiral"

    def __post_init__(self):
        if self.images_per_rotation < 1 or self.rotation_count < 1:
            raise ValueError("images_per_rotation and rotation_count must be at least 1")
        if self.mode not in CAPTURE_MODES:
            raise ValueError(f"unknown capture mode {self.mode!r}; expected one of {CAPTURE_MODES}")
        if self.base_rotation is None:
            object.__setattr__(self, "base_rotation", 2.0 * math.pi / self.images_per_rotation)
        if min(self.translation_noise_sd) < 0 or self.rotation_noise_sd < 0:
            raise ValueError("noise standard deviations must be non-negative")

    @property
    def frame_count(self) -> int:
        return self.images_per_rotation * self.rotation_count

    @property
    def forward_step(self) -> float:
        return float(np.linalg.norm(self.base_translation))

    @property
    def is_full_coverage(self) -> bool:
        return abs(self.images_per_rotation * self.base_rotation - 2.0 * math.pi) <= 1e-9


@dataclass
class SyntheticFrame:
    image: np.ndarray
    pose_gt: PoseSE3
    frame_index: int


def generate_trajectory(spec: TrajectorySpec, seed: int = 0) -> List[PoseSE3]:
    """Spiral poses with Gaussian jitter; the same seed always gives the same list."""
    rng = np.random.default_rng(seed)
    n = spec.images_per_rotation
    step = np.asarray(spec.base_translation, dtype=float)
    start = np.array([spec.start_offset[0], 0.0, spec.start_offset[1]])
    poses = []
    for k in range(spec.frame_count):
        if spec.mode == "spiral":
            azimuth = k * spec.base_rotation
            advance = k * step
        else:
            azimuth = (k % n) * spec.base_rotation
            advance = (k // n) * n * step
        # Both draws happen for every frame so a zero-noise axis keeps the stream aligned.
        dt = rng.normal(0.0, 1.0, 3) * np.asarray(spec.translation_noise_sd, dtype=float)
        dw = rng.normal(0.0, 1.0, 3) * spec.rotation_noise_sd
        rotation = rotation_about_axis(np.linalg.norm(dw), dw) if np.any(dw) else np.eye(3)
        poses.append(PoseSE3.from_matrix(rotation @ rotation_about_axis(azimuth), start + advance + dt))
    logger.debug(f"generated {len(poses)} {spec.mode} poses (seed {seed})")
    return poses


class ProceduralTexture:
    """Analytic wall pattern sampled at unrolled wall coordinates (meters)."""

    def __init__(self, kind: str = "brick", period: float = 0.25):
        if kind not in PROCEDURAL_TEXTURES:
            raise ValueError(f"unknown texture {kind!r}; expected one of {PROCEDURAL_TEXTURES}")
        if period <= 0:
            raise ValueError("texture period must be positive")
        self.kind = kind
        self.period = period

    def sample(self, s: np.ndarray, t: np.ndarray, surface_index: Optional[np.ndarray] = None) -> np.ndarray:
        """Return RGB colors in [0, 1], shape (N, 3)."""
        if surface_index is not None:
            # Distinct surfaces get a shifted pattern so corners stay visible.
            s = s + 0.37 * self.period * np.asarray(surface_index, dtype=float)
        return getattr(self, f"_{self.kind}")(s / self.period, t / self.period)

    @staticmethod
    def _checker(u: np.ndarray, v: np.ndarray) -> np.ndarray:
        odd = (np.floor(u) + np.floor(v)) % 2 == 1
        light = np.array([0.85, 0.85, 0.8])
        dark = np.array([0.15, 0.15, 0.2])
        return np.where(odd[:, None], dark, light)

    @staticmethod
    def _brick(u: np.ndarray, v: np.ndarray) -> np.ndarray:
        row = np.floor(2.0 * v)
        shifted = u + 0.5 * (row % 2)
        col = np.floor(shifted)
        mortar = ((2.0 * v - row) < 0.08) | ((shifted - col) < 0.04)
        # Per-brick shade from a hash of the brick index.
        shade = np.modf(np.abs(np.sin(col * 12.9898 + row * 78.233)) * 43758.5453)[0]
        brick = np.array([0.62, 0.32, 0.22])[None, :] * (0.7 + 0.3 * shade)[:, None]
        return np.where(mortar[:, None], np.array([0.8, 0.78, 0.72]), brick)

    @staticmethod
    def _waves(u: np.ndarray, v: np.ndarray) -> np.ndarray:
        two_pi = 2.0 * math.pi
        r = 0.5 + 0.25 * np.sin(two_pi * u) + 0.2 * np.sin(two_pi * 0.7 * v + 1.0)
        g = 0.5 + 0.3 * np.sin(two_pi * 0.8 * (u + v))
        b = 0.5 + 0.3 * np.cos(two_pi * 0.6 * (u - 0.5 * v))
        return np.column_stack((r, g, b))


class RasterTexture:
    """An image tiled over the wall, bilinearly sampled with wrap-around."""

    def __init__(self, image: np.ndarray, meters_per_texel: float = 0.0017):
        self.image = np.asarray(image, dtype=float) / 255.0
        self.meters_per_texel = meters_per_texel

    def sample(self, s: np.ndarray, t: np.ndarray, surface_index: Optional[np.ndarray] = None) -> np.ndarray:
        coords = np.vstack((t / self.meters_per_texel, s / self.meters_per_texel))
        return np.column_stack([map_coordinates(self.image[:, :, c], coords, order=1, mode="grid-wrap")
                                for c in range(3)])


def make_texture(name: str, period: float = 0.25, meters_per_texel: float = 0.0017):
    """A procedural texture by name, or a raster texture loaded from an image path."""
    if name in PROCEDURAL_TEXTURES:
        return ProceduralTexture(name, period)
    if not os.path.exists(name):
        raise FileNotFoundError(f"texture {name!r} is neither a procedural pattern nor an image file")
    return RasterTexture(load_image(name), meters_per_texel)


def light_factor(pose: PoseSE3, ambient: float) -> float:
    """Brightness of a view lit by the rig light: full looking up, `ambient` looking down."""
    up = pose.rotation[2, 2]
    return ambient + (1.0 - ambient) * (1.0 + up) / 2.0


def occluder_mask(K: CameraIntrinsics, rows: int) -> np.ndarray:
    """Pixels covered by a rig-fixed occluder occupying the bottom `rows` image rows."""
    mask = np.zeros((K.height, K.width), dtype=bool)
    if rows > 0:
        mask[K.height - rows:, :] = True
    return mask


def _render_rows(prior, texture, pose, K, grid, start, stop) -> np.ndarray:
    pixels = grid[start * K.width:stop * K.width]
    _, positions, surface_index, _, _ = cast_pixels(prior, pose, K, pixels)
    s, t = surface_coordinates(prior, positions, surface_index)
    return texture.sample(s, t, surface_index)


def render_view(prior: ScenePrior, texture, pose: PoseSE3, K: CameraIntrinsics,
                light_ambient: Optional[float] = None, occluder_rows: int = 0,
                threads: int = 1) -> np.ndarray:
    """
    Ray-cast one 8-bit RGB frame.

    Args:
        prior: scene geometry; the camera must be strictly inside it.
        texture: object with sample(s, t, surface_index) -> RGB in [0, 1].
        pose: camera-to-world pose.
        K: intrinsics.
        light_ambient: enable the rig light model with this ambient level.
        occluder_rows: paint a rig-fixed occluder over the bottom rows.
        threads: worker threads; the output does not depend on it.
    """
    grid = image_grid(K)
    blocks = [(start, min(start + ROW_BLOCK, K.height)) for start in range(0, K.height, ROW_BLOCK)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(lambda b: _render_rows(prior, texture, pose, K, grid, *b), blocks))
    else:
        parts = [_render_rows(prior, texture, pose, K, grid, *b) for b in blocks]
    colors = np.concatenate(parts).reshape(K.height, K.width, 3)
    if light_ambient is not None:
        colors = colors * light_factor(pose, light_ambient)
    if occluder_rows > 0:
        stripes = np.where((np.arange(K.width) // 8) % 2 == 0, *OCCLUDER_SHADES)
        colors[K.height - occluder_rows:, :, :] = stripes[None, :, None]
    return np.round(np.clip(colors, 0.0, 1.0) * 255.0).astype(np.uint8)


def simulate_dataset(spec: TrajectorySpec, prior: ScenePrior, K: CameraIntrinsics, seed: int = 0,
                     texture=None, output_dir: Optional[str] = None,
                     light_ambient: Optional[float] = None, occluder_rows: int = 0,
                     threads: int = 1) -> Tuple[List[SyntheticFrame], pd.DataFrame]:
    """
    Render a whole capture and, if `output_dir` is given, write frame_%04d.png,
    groundtruth.csv and (with an occluder) mask.png into it.

    Returns:
        The frames and the groundtruth manifest.
    """
    texture = texture or ProceduralTexture()
    poses = generate_trajectory(spec, seed)
    logger.info(f"Rendering {len(poses)} frames at {K.width}x{K.height} with {threads} thread(s)")

    def render(pose):
        return render_view(prior, texture, pose, K, light_ambient=light_ambient, occluder_rows=occluder_rows)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            images = list(ex.map(render, poses))
    else:
        images = [render(pose) for pose in poses]
    frames = [SyntheticFrame(image, pose, k) for k, (image, pose) in enumerate(zip(images, poses))]

    if output_dir is not None:
        os.makedirs(output_dir, exist_ok=True)
        for frame in frames:
            save_image(frame_path(output_dir, frame.frame_index), frame.image)
        manifest = write_poses(os.path.join(output_dir, "groundtruth.csv"), poses)
        if occluder_rows > 0:
            save_mask(os.path.join(output_dir, "mask.png"), occluder_mask(K, occluder_rows))
    else:
        manifest = poses_to_frame(poses)
    return frames, manifest


def load_groundtruth(path: str) -> Tuple[List[int], List[PoseSE3]]:
    """Load a groundtruth manifest written by `simulate_dataset`."""
    return read_poses(path)
