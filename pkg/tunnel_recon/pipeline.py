"""
pipeline.py
----------------
Run configuration and the stages of a reconstruction run:

    simulate -> synth-matches -> pose -> ba -> reconstruct/stitch

Every stage reads what the previous one wrote into the output directory, so
each can be re-run on its own. A stage that fails leaves a `.partial` marker
next to each output it had started.
"""
import configparser
import logging
import math
import os
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

import config
from utils.bundle_adjustment import (ABLATION_CONFIGS, ACTIVE, REPORT_COLUMNS, BAProblem, PruningConfig,
                                     SolverConfig, ablation_report, count_status, optimize, prepare_tracks)
from utils.correspondence import (apply_static_mask, build_match_graph, empty_matches, synthesize_matches,
                                  synthesize_static_matches)
from utils.file_manager import (PlyWriter, clear_partial, list_frames, load_mask, mark_partial, read_matches,
                                read_poses, remove_stale_outputs, write_json, write_matches, write_poses)
from utils.flight_planner import (RangeReadings, plan_speed, simulate_range_readings, solve_uav_offset,
                                  speed_sweep)
from utils.geometry import (BoxSection, CameraIntrinsics, Cylinder, InvalidPriorError, PoseSE3, ScenePrior,
                            TunnelReconError)
from utils.pose_estimation import chain_and_scale, estimate_edges, pose_errors
from utils.simulator import (TrajectorySpec, generate_trajectory, make_texture, occluder_mask, render_view,
                             simulate_dataset)
from utils.surface_mapping import (LAYOUTS, AtlasSpec, TextureAtlas, camera_matched_resolution, hole_count,
                                   reconstruct_dense, visible_axial_extent, write_atlas)

logger = logging.getLogger(__name__)

RESOLUTIONS = ("camera", "fixed")


class ConfigError(TunnelReconError):
    pass


class StageError(TunnelReconError):
    """A pipeline stage failed; carries the stage name and its exit code."""

    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        self.exit_code = config.STAGE_EXIT_CODES.get(stage, 1)
        super().__init__(f"stage '{stage}' failed: {cause}")


# --------------------------------------------------------------------------
# Configuration
# --------------------------------------------------------------------------

@dataclass
class CameraSettings:
    width: int = config.IMAGE_WIDTH
    height: int = config.IMAGE_HEIGHT
    omega_h_deg: float = config.OMEGA_H_DEG
    k1: float = config.DISTORTION_K1
    k2: float = config.DISTORTION_K2

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics.from_fov(self.width, self.height, math.radians(self.omega_h_deg), self.k1, self.k2)


@dataclass
class PriorSettings:
    kind: str = config.PRIOR_KIND
    radius: float = config.TUNNEL_RADIUS
    left: float = config.BOX_LEFT
    right: float = config.BOX_RIGHT
    floor: float = config.BOX_FLOOR
    ceiling: float = config.BOX_CEILING

    def build(self) -> ScenePrior:
        if self.kind == "cylinder":
            return Cylinder(self.radius)
        if self.kind == "box":
            return BoxSection.from_extents(self.left, self.right, self.floor, self.ceiling)
        raise ConfigError(f"[prior] kind: expected 'cylinder' or 'box', got {self.kind!r}")


@dataclass
class TrajectorySettings:
    mode: str = config.CAPTURE_MODE
    images_per_rotation: int = config.IMAGES_PER_ROTATION
    rotation_count: int = config.ROTATION_COUNT
    forward_step: float = config.FORWARD_STEP
    start_offset: Tuple[float, float] = config.START_OFFSET
    translation_noise_cm: Tuple[float, float, float] = config.TRANSLATION_NOISE_CM
    rotation_noise_deg: float = config.ROTATION_NOISE_DEG
    texture: str = config.TEXTURE
    texture_scale: float = config.TEXTURE_SCALE
    light_model: bool = config.LIGHT_MODEL
    light_ambient: float = config.LIGHT_AMBIENT
    occluder_rows: int = config.OCCLUDER_ROWS

    def spec(self) -> TrajectorySpec:
        return TrajectorySpec(images_per_rotation=self.images_per_rotation,
                              rotation_count=self.rotation_count,
                              base_translation=(0.0, self.forward_step, 0.0),
                              translation_noise_sd=tuple(v / 100.0 for v in self.translation_noise_cm),
                              rotation_noise_sd=math.radians(self.rotation_noise_deg),
                              start_offset=tuple(self.start_offset), mode=self.mode)

    def jittered(self) -> "TrajectorySettings":
        """The same capture with the jitter of a hand-flown UAV."""
        return replace(self, translation_noise_cm=config.JITTER_TRANSLATION_CM,
                       rotation_noise_deg=config.JITTER_ROTATION_DEG)


@dataclass
class MatchingSettings:
    matches_per_pair: int = config.MATCHES_PER_PAIR
    pixel_noise_sd: float = config.PIXEL_NOISE_SD
    outlier_fraction: float = config.OUTLIER_FRACTION
    static_matches_per_pair: int = config.STATIC_MATCHES_PER_PAIR


@dataclass
class RansacSettings:
    threshold_px: float = config.RANSAC_THRESHOLD_PX
    confidence: float = config.RANSAC_CONFIDENCE
    max_iterations: int = config.RANSAC_MAX_ITERATIONS
    min_inlier_ratio: float = config.RANSAC_MIN_INLIER_RATIO
    min_parallax_rad: float = config.MIN_PARALLAX_RAD


@dataclass
class PruningSettings:
    geometry_tolerance_fraction: float = config.GEOMETRY_TOLERANCE_FRACTION
    reprojection_threshold_px: float = config.REPROJECTION_THRESHOLD_PX
    min_triangulation_angle_deg: float = config.MIN_TRIANGULATION_ANGLE_DEG
    use_mask: bool = True
    use_geometry: bool = True
    use_reprojection: bool = True


@dataclass
class BundleAdjustmentSettings:
    max_iterations: int = config.BA_MAX_ITERATIONS
    relative_decrease: float = config.BA_RELATIVE_DECREASE
    gradient_tolerance: float = config.BA_GRADIENT_TOLERANCE
    prune_after: int = config.BA_PRUNE_AFTER
    initial_damping: float = config.BA_INITIAL_DAMPING


@dataclass
class AtlasSettings:
    layout: str = config.ATLAS_LAYOUT
    resolution: str = config.ATLAS_RESOLUTION
    width: int = config.ATLAS_WIDTH
    texels_per_meter: float = config.TEXELS_PER_METER
    margin: float = config.ATLAS_MARGIN
    average: bool = config.ATLAS_AVERAGE
    binary_ply: bool = config.PLY_BINARY


@dataclass
class RunSettings:
    seed: int = config.SEED
    output_dir: str = config.OUTPUT_DIR
    input_dir: str = ""
    threads: int = config.THREADS


SECTIONS = {
    "camera": CameraSettings,
    "prior": PriorSettings,
    "trajectory": TrajectorySettings,
    "matching": MatchingSettings,
    "ransac": RansacSettings,
    "pruning": PruningSettings,
    "bundle_adjustment": BundleAdjustmentSettings,
    "atlas": AtlasSettings,
    "run": RunSettings,
}


def _format_value(value) -> str:
    if isinstance(value, (tuple, list)):
        return ", ".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(section: str, key: str, text: str, default):
    where = f"[{section}] {key}"
    text = text.strip()
    try:
        if isinstance(default, bool):
            if text.lower() not in configparser.ConfigParser.BOOLEAN_STATES:
                raise ValueError(f"not a boolean: {text!r}")
            return configparser.ConfigParser.BOOLEAN_STATES[text.lower()]
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            values = tuple(float(v) for v in text.replace(",", " ").split())
            if len(values) != len(default):
                raise ValueError(f"expected {len(default)} values, got {len(values)}")
            return values
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc
    return text


@dataclass
class PipelineConfig:
    """Every setting of a run, grouped by INI section."""
    camera: CameraSettings = field(default_factory=CameraSettings)
    prior: PriorSettings = field(default_factory=PriorSettings)
    trajectory: TrajectorySettings = field(default_factory=TrajectorySettings)
    matching: MatchingSettings = field(default_factory=MatchingSettings)
    ransac: RansacSettings = field(default_factory=RansacSettings)
    pruning: PruningSettings = field(default_factory=PruningSettings)
    bundle_adjustment: BundleAdjustmentSettings = field(default_factory=BundleAdjustmentSettings)
    atlas: AtlasSettings = field(default_factory=AtlasSettings)
    run: RunSettings = field(default_factory=RunSettings)

    @classmethod
    def load(cls, path: Optional[str] = None, overrides: Sequence[str] = ()) -> "PipelineConfig":
        """
        Load an INI file (optional) and apply `section.key=value` overrides.

        Raises:
            ConfigError: unknown section or key, malformed value, or a value out of range.
        """
        parser = configparser.ConfigParser()
        if path is not None:
            if not os.path.exists(path):
                raise ConfigError(f"config file not found: {path}")
            parser.read(path, encoding="utf-8")
        for item in overrides:
            if "=" not in item or "." not in item.split("=", 1)[0]:
                raise ConfigError(f"override {item!r} is not of the form section.key=value")
            dotted, value = item.split("=", 1)
            section, key = dotted.strip().split(".", 1)
            if not parser.has_section(section):
                parser.add_section(section)
            parser.set(section, key.strip(), value)
        cfg = cls.from_parser(parser)
        cfg.validate()
        return cfg

    @classmethod
    def from_parser(cls, parser: configparser.ConfigParser) -> "PipelineConfig":
        cfg = cls()
        for section in parser.sections():
            if section not in SECTIONS:
                raise ConfigError(f"unknown config section [{section}]")
            settings = getattr(cfg, section)
            known = {f.name for f in fields(settings)}
            for key, text in parser.items(section):
                if key not in known:
                    raise ConfigError(f"unknown key {key!r} in [{section}]")
                setattr(settings, key, _parse_value(section, key, text, getattr(settings, key)))
        return cfg

    def to_parser(self) -> configparser.ConfigParser:
        parser = configparser.ConfigParser()
        for section in SECTIONS:
            parser[section] = {key: _format_value(value) for key, value in asdict(getattr(self, section)).items()}
        return parser

    def write(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            self.to_parser().write(f)

    @property
    def simulated(self) -> bool:
        return not self.run.input_dir

    def validate(self) -> None:
        def check(ok: bool, where: str, message: str):
            if not ok:
                raise ConfigError(f"{where}: {message}")

        cam, traj, match, ransac = self.camera, self.trajectory, self.matching, self.ransac
        check(cam.width >= 2 and cam.height >= 2, "[camera] width/height", "must be at least 2 pixels")
        check(0 < cam.omega_h_deg < 180, "[camera] omega_h_deg", "must lie in (0, 180)")
        try:
            prior = self.prior.build()
        except InvalidPriorError as exc:
            raise ConfigError(f"[prior]: {exc}") from exc
        check(traj.mode in ("spiral", "cylindrical"), "[trajectory] mode", "must be 'spiral' or 'cylindrical'")
        check(traj.images_per_rotation >= 1, "[trajectory] images_per_rotation", "must be at least 1")
        check(traj.rotation_count >= 1, "[trajectory] rotation_count", "must be at least 1")
        check(traj.forward_step >= 0, "[trajectory] forward_step", "must be non-negative")
        check(min(traj.translation_noise_cm) >= 0 and traj.rotation_noise_deg >= 0, "[trajectory] noise",
              "must be non-negative")
        check(0 <= traj.light_ambient <= 1, "[trajectory] light_ambient", "must lie in [0, 1]")
        check(0 <= traj.occluder_rows < cam.height, "[trajectory] occluder_rows", "must lie in [0, height)")
        start = np.array([traj.start_offset[0], 0.0, traj.start_offset[1]])
        check(bool(prior.contains(start[None])[0]), "[trajectory] start_offset", "must lie inside the prior")
        check(match.matches_per_pair >= 8, "[matching] matches_per_pair", "must be at least 8")
        check(match.pixel_noise_sd >= 0, "[matching] pixel_noise_sd", "must be non-negative")
        check(0 <= match.outlier_fraction < 1, "[matching] outlier_fraction", "must lie in [0, 1)")
        check(match.static_matches_per_pair >= 0, "[matching] static_matches_per_pair", "must be non-negative")
        check(ransac.threshold_px > 0, "[ransac] threshold_px", "must be positive")
        check(0 < ransac.confidence < 1, "[ransac] confidence", "must lie in (0, 1)")
        check(ransac.max_iterations >= 1, "[ransac] max_iterations", "must be at least 1")
        check(0 <= ransac.min_inlier_ratio <= 1, "[ransac] min_inlier_ratio", "must lie in [0, 1]")
        check(self.pruning.geometry_tolerance_fraction > 0, "[pruning] geometry_tolerance_fraction",
              "must be positive")
        check(self.pruning.reprojection_threshold_px > 0, "[pruning] reprojection_threshold_px", "must be positive")
        check(self.bundle_adjustment.max_iterations >= 1, "[bundle_adjustment] max_iterations", "must be at least 1")
        check(self.bundle_adjustment.prune_after >= 0, "[bundle_adjustment] prune_after", "must be non-negative")
        check(self.atlas.layout in LAYOUTS, "[atlas] layout", f"must be one of {LAYOUTS}")
        check(self.atlas.layout == "cylinder" or self.prior.kind == "box", "[atlas] layout",
              "the planes layout needs a box prior")
        check(self.atlas.resolution in RESOLUTIONS, "[atlas] resolution", f"must be one of {RESOLUTIONS}")
        check(self.atlas.width >= 1 and self.atlas.texels_per_meter > 0, "[atlas] width/texels_per_meter",
              "must be positive")
        check(0 < self.atlas.margin <= 1, "[atlas] margin", "must lie in (0, 1]")
        check(self.run.threads >= 0, "[run] threads", "must be non-negative (0 = all cores)")
        if self.run.input_dir:
            check(os.path.isdir(self.run.input_dir), "[run] input_dir",
                  f"input directory does not exist: {self.run.input_dir}")


# --------------------------------------------------------------------------
# Stages
# --------------------------------------------------------------------------

def _rms(values: Iterable[float]) -> float:
    values = np.asarray(list(values), dtype=float)
    return float(np.sqrt(np.mean(values ** 2))) if len(values) else float("nan")


class TunnelReconPipeline:
    """Runs the stages of one reconstruction against a single output directory."""

    def __init__(self, cfg: PipelineConfig):
        self.config = cfg
        self.output_dir = cfg.run.output_dir
        self.threads = cfg.run.threads or config.THREADS
        self.K = cfg.camera.intrinsics()
        self.prior = cfg.prior.build()
        os.makedirs(self.output_dir, exist_ok=True)
        cfg.write(self.path("config.ini"))
        self.timings: Dict[str, float] = {}

    def path(self, name: str) -> str:
        return os.path.join(self.output_dir, name)

    @property
    def frames_dir(self) -> str:
        return self.config.run.input_dir or self.path("frames")

    @property
    def groundtruth_path(self) -> str:
        return os.path.join(self.frames_dir, "groundtruth.csv")

    @property
    def mask_path(self) -> str:
        return os.path.join(self.frames_dir, "mask.png")

    @property
    def matches_path(self) -> str:
        if self.config.simulated:
            return self.path("matches.txt")
        return os.path.join(self.config.run.input_dir, "matches.txt")

    @contextmanager
    def stage(self, name: str, outputs: Sequence[str] = ()) -> Iterator[None]:
        """Time a stage and turn its failure into a StageError, marking started outputs as partial."""
        start = time.perf_counter()
        logger.info(f"[{name}] started")
        try:
            yield
        except (ConfigError, StageError):
            raise
        except (TunnelReconError, OSError, ValueError) as exc:
            mark_partial(outputs)
            logger.error(f"[{name}] failed: {exc}")
            raise StageError(name, exc) from exc
        for output in outputs:
            clear_partial(output)
        self.timings[name] = time.perf_counter() - start
        logger.info(f"[{name}] finished in {self.timings[name]:.2f} s")

    # Inputs shared by several stages -----------------------------------

    def mask(self) -> Optional[np.ndarray]:
        return load_mask(self.mask_path) if os.path.exists(self.mask_path) else None

    def groundtruth(self) -> Optional[List[PoseSE3]]:
        if not os.path.exists(self.groundtruth_path):
            return None
        return read_poses(self.groundtruth_path)[1]

    def frame_paths(self) -> List[str]:
        frames = list_frames(self.frames_dir)
        if not frames:
            raise FileNotFoundError(f"no frame_%04d.png images in {self.frames_dir}")
        indices = [index for index, _ in frames]
        if indices != list(range(len(indices))):
            raise ValueError(f"frames in {self.frames_dir} are not numbered 0..{len(indices) - 1}")
        return [p for _, p in frames]

    def origin_pose(self) -> PoseSE3:
        """Pose of frame 0: groundtruth when known, otherwise the configured start offset looking up."""
        groundtruth = self.groundtruth()
        if groundtruth:
            return groundtruth[0]
        tx, tz = self.config.trajectory.start_offset
        return PoseSE3(np.eye(3), np.array([tx, 0.0, tz]))

    def load_poses(self, path: Optional[str] = None) -> List[PoseSE3]:
        path = path or self.path("poses.csv")
        if not os.path.exists(path):
            raise FileNotFoundError(f"pose file not found: {path} (run the earlier stages first)")
        return read_poses(path)[1]

    # Stages -------------------------------------------------------------

    def simulate(self) -> pd.DataFrame:
        """Render the configured capture into frames/ with its groundtruth."""
        if not self.config.simulated:
            raise ConfigError("simulate writes synthetic frames; unset [run] input_dir")
        traj = self.config.trajectory
        outputs = [self.frames_dir]
        with self.stage("simulate", outputs):
            remove_stale_outputs(outputs)
            texture = make_texture(traj.texture, traj.texture_scale)
            _, manifest = simulate_dataset(traj.spec(), self.prior, self.K, seed=self.config.run.seed,
                                           texture=texture, output_dir=self.frames_dir,
                                           light_ambient=traj.light_ambient if traj.light_model else None,
                                           occluder_rows=traj.occluder_rows, threads=self.threads)
        return manifest

    def plan(self, readings: Optional[RangeReadings] = None, offset: Optional[Tuple[float, float]] = None,
             sweep_path: Optional[str] = None) -> Dict:
        """Locate the UAV from range readings (or a known offset) and plan its forward speed."""
        if not isinstance(self.prior, Cylinder):
            raise ConfigError("the speed planner needs a cylinder prior")
        r = self.prior.radius
        outputs = [self.path("plan.json")] + ([sweep_path] if sweep_path else [])
        with self.stage("plan", outputs):
            report: Dict = {"radius_m": r, "images_per_rotation": self.config.trajectory.images_per_rotation}
            if readings is None and offset is not None:
                readings = simulate_range_readings(offset, r)
            if readings is not None:
                state = solve_uav_offset(readings, r)
                report["readings_m"] = readings.as_list()
                report["offset_m"] = [state.tx, state.tz]
                report["residual_norm"] = state.residual_norm
                report["ambiguous"] = state.ambiguous
                report["dropped_sensors"] = list(state.dropped)
                r1 = state.r1
            else:
                r1 = math.hypot(*self.config.trajectory.start_offset)
            plan = plan_speed(self.K, r, r1, self.config.trajectory.images_per_rotation)
            report.update({
                "r1_m": r1,
                "theta_view_deg": math.degrees(plan.theta_view),
                "d_max_rotation_m": plan.d_max_rotation,
                "d_max_image_m": plan.d_max_image,
                "d_max_pixel_form_m": plan.d_max_pixel_form,
                "forward_step_m": self.config.trajectory.forward_step,
                "within_bound": self.config.trajectory.forward_step <= plan.d_max_image,
            })
            write_json(self.path("plan.json"), report)
            if sweep_path:
                sweep = speed_sweep(self.K.omega_h, self.K.omega_v, r, plan.n, config.SPEED_SWEEP_STEPS)
                sweep.to_csv(sweep_path, index=False, float_format="%.17g")
        if self.config.trajectory.forward_step > plan.d_max_image:
            logger.warning(f"forward step {self.config.trajectory.forward_step:.4f} m exceeds the gap-free bound "
                           f"{plan.d_max_image:.4f} m per image")
        return report

    def synth_matches(self) -> pd.DataFrame:
        """Groundtruth correspondences over the match graph, plus rig-static matches when an occluder is set."""
        if not self.config.simulated:
            raise ConfigError("synth-matches needs simulate mode; ingest mode reads matches.txt from input_dir")
        match, traj, seed = self.config.matching, self.config.trajectory, self.config.run.seed
        outputs = [self.matches_path]
        with self.stage("synth-matches", outputs):
            groundtruth = self.groundtruth()
            if groundtruth is None:
                os.makedirs(self.frames_dir, exist_ok=True)
                groundtruth = generate_trajectory(traj.spec(), seed)
                write_poses(self.groundtruth_path, groundtruth)
            occluded = occluder_mask(self.K, traj.occluder_rows) if traj.occluder_rows > 0 else None
            parts = []
            for i, j in build_match_graph(len(groundtruth), traj.images_per_rotation):
                parts.append(synthesize_matches(groundtruth[i], groundtruth[j], self.prior, self.K,
                                                match.matches_per_pair, match.pixel_noise_sd,
                                                match.outlier_fraction, seed=[seed, i, j], frame_i=i, frame_j=j,
                                                occluded=occluded))
                if occluded is not None and match.static_matches_per_pair > 0:
                    parts.append(synthesize_static_matches(occluded, match.static_matches_per_pair,
                                                           match.pixel_noise_sd, seed=[seed, i, j, 1],
                                                           frame_i=i, frame_j=j))
            matches = pd.concat(parts, ignore_index=True) if parts else empty_matches()
            write_matches(self.matches_path, matches)
        return matches

    def estimate_poses(self) -> List[PoseSE3]:
        """Relative poses over the match graph, chained and scaled against the prior."""
        ransac, n = self.config.ransac, self.config.trajectory.images_per_rotation
        outputs = [self.path("poses_initial.csv"), self.path("loop_edges.csv")]
        with self.stage("pose", outputs):
            matches = read_matches(self.matches_path)
            frame_count = int(max(matches["frame_i"].max(), matches["frame_j"].max())) + 1 if len(matches) else 0
            matches, _ = apply_static_mask(matches, self.mask())
            edges = estimate_edges(matches, build_match_graph(frame_count, n), self.K, ransac.threshold_px,
                                   self.config.run.seed, ransac.confidence, ransac.max_iterations,
                                   ransac.min_inlier_ratio, ransac.min_parallax_rad, threads=self.threads)
            poses, _, loops = chain_and_scale(edges, frame_count, self.prior, self.origin_pose())
            write_poses(outputs[0], poses)
            loops.to_csv(outputs[1], index=False, float_format="%.17g")
            groundtruth = self.groundtruth()
            if groundtruth is not None and len(groundtruth) == len(poses):
                errors = pose_errors(poses, groundtruth)
                logger.info(f"initial poses: position RMS {_rms(errors['position_error_m']):.4f} m, "
                            f"rotation RMS {_rms(errors['rotation_error_deg']):.4f} deg")
        return poses

    def _pruning(self) -> PruningConfig:
        p = self.config.pruning
        return PruningConfig(geometry_tolerance=p.geometry_tolerance_fraction * _prior_size(self.prior),
                             reprojection_threshold=p.reprojection_threshold_px, use_mask=p.use_mask,
                             use_geometry=p.use_geometry, use_reprojection=p.use_reprojection,
                             prune_after=self.config.bundle_adjustment.prune_after)

    def _solver(self) -> SolverConfig:
        ba = self.config.bundle_adjustment
        return SolverConfig(max_iterations=ba.max_iterations, relative_decrease=ba.relative_decrease,
                            gradient_tolerance=ba.gradient_tolerance, initial_damping=ba.initial_damping)

    def bundle_adjust(self) -> Tuple[List[PoseSE3], Dict]:
        """Prune, triangulate and refine; writes poses.csv and a one-row ba-report.csv."""
        pruning = self._pruning()
        outputs = [self.path("poses.csv"), self.path("ba-report.csv")]
        with self.stage("ba", outputs):
            initial = self.load_poses(self.path("poses_initial.csv"))
            matches = read_matches(self.matches_path)
            tracks = prepare_tracks(matches, initial, self.K, self.prior, pruning, self.mask(),
                                    self.config.pruning.min_triangulation_angle_deg)
            poses, tracks, report = optimize(BAProblem(initial, tracks, self.K, self.prior, pruning, self._solver()))
            write_poses(outputs[0], poses)
            name = "+".join(label for label, on in (("P1", pruning.use_mask), ("P2", pruning.use_geometry),
                                                    ("P3", pruning.use_reprojection)) if on) or "SBA"
            row = {"config": name, "before_px": report.before_px, "after_px": report.after_px,
                   "pruned_p1": report.pruned_mask, "pruned_p2": report.pruned_geometry,
                   "pruned_p3": report.pruned_reprojection, "untriangulated": report.untriangulated,
                   "iterations": report.iterations, "converged": report.converged}
            pd.DataFrame([row], columns=REPORT_COLUMNS).to_csv(outputs[1], index=False, float_format="%.17g")
            row["active_tracks"] = count_status(tracks, ACTIVE)
        return poses, row

    def ablate(self, configs: Sequence[str] = tuple(ABLATION_CONFIGS)) -> pd.DataFrame:
        """Bundle adjustment once per pruning configuration from the same initial poses."""
        if not os.path.exists(self.matches_path):
            self.synth_matches()
        if not os.path.exists(self.path("poses_initial.csv")):
            self.estimate_poses()
        outputs = [self.path("ba-report.csv")]
        with self.stage("ablate", outputs):
            table = ablation_report(read_matches(self.matches_path), self.load_poses(self.path("poses_initial.csv")),
                                    self.K, self.prior, self.mask(), configs, self._pruning(), self._solver(),
                                    self.config.pruning.min_triangulation_angle_deg, path=outputs[0])
        return table

    def atlas_spec(self, poses: Sequence[PoseSE3], frames: Optional[Sequence[int]] = None,
                   resolution: Optional[str] = None) -> AtlasSpec:
        """
        Atlas extent and texel size for the given poses. `resolution`
        overrides the configured mode; the two-view hole checks use "camera".
        """
        atlas = self.config.atlas
        if (resolution or atlas.resolution) == "camera":
            width, texels_per_meter = camera_matched_resolution(self.K, self.prior, atlas.margin)
        else:
            width, texels_per_meter = atlas.width, atlas.texels_per_meter
        y_min, y_max = visible_axial_extent(poses, self.K, self.prior)
        return AtlasSpec(y_min=y_min, y_max=y_max, width=width, texels_per_meter=texels_per_meter,
                         layout=atlas.layout, average=atlas.average,
                         frames=None if frames is None else tuple(frames))

    def two_view_frames(self, frame_count: int) -> List[int]:
        """Frames facing straight up or straight down: the views of the coverage check."""
        n = self.config.trajectory.images_per_rotation
        keep = {0, n // 2} if n > 1 else {0}
        return [k for k in range(frame_count) if k % n in keep]

    def dense(self, poses: Optional[Sequence[PoseSE3]] = None, write_cloud: bool = True,
              write_images: bool = True, stage_name: str = "reconstruct") -> Dict:
        """
        One streamed pass of dense reconstruction feeding the pointcloud, the
        atlas and the two-view coverage atlas.
        """
        poses = list(poses) if poses is not None else self.load_poses()
        cloud_path = self.path("cloud.ply")
        outputs = [cloud_path] if write_cloud else []
        with self.stage(stage_name, outputs):
            paths = self.frame_paths()
            if len(paths) != len(poses):
                raise ValueError(f"{len(paths)} frames but {len(poses)} poses")
            atlas = TextureAtlas(self.prior, self.atlas_spec(poses))
            coverage = TextureAtlas(self.prior, self.atlas_spec(poses, self.two_view_frames(len(poses)), "camera"))
            wanted = set(coverage.spec.frames)
            writer = PlyWriter(cloud_path, binary=self.config.atlas.binary_ply) if write_cloud else None
            try:
                for batch in reconstruct_dense(paths, poses, self.K, self.prior, mask=self.mask(),
                                               threads=self.threads):
                    if writer is not None:
                        writer.write(batch.positions, batch.colors)
                    atlas.add(batch)
                    if batch.frame in wanted:
                        coverage.add(batch)
            finally:
                if writer is not None:
                    writer.close()
            written = write_atlas(atlas, self.output_dir) if write_images else []
        result = {
            "points": writer.count if writer is not None else None,
            "atlas_holes": hole_count(atlas),
            "coverage_holes": hole_count(coverage),
            "atlas_shape": {name: list(s.shape) for name, s in atlas.surfaces.items()},
            "files": [os.path.basename(p) for p in written],
        }
        logger.info(f"dense pass: {result['atlas_holes']} atlas holes, {result['coverage_holes']} two-view holes")
        return result

    def reconstruct(self, poses_path: Optional[str] = None) -> Dict:
        return self.dense(self.load_poses(poses_path), write_cloud=True, write_images=False)

    def stitch(self, poses_path: Optional[str] = None) -> Dict:
        return self.dense(self.load_poses(poses_path), write_cloud=False, write_images=True, stage_name="stitch")

    def coverage(self, speed_factors: Sequence[float] = config.COVERAGE_SPEED_FACTORS) -> pd.DataFrame:
        """
        Two-view hole experiment: a zero-noise spiral flown at multiples of
        the planned per-image bound, stitched from the up and down views only.
        """
        if not isinstance(self.prior, Cylinder):
            raise ConfigError("the coverage experiment needs a cylinder prior")
        traj = self.config.trajectory
        outputs = [self.path("coverage.csv")]
        rows = []
        with self.stage("coverage", outputs):
            r1 = math.hypot(*traj.start_offset)
            plan = plan_speed(self.K, self.prior.radius, r1, traj.images_per_rotation)
            texture = make_texture(traj.texture, traj.texture_scale)
            for factor in speed_factors:
                settings = replace(traj, forward_step=factor * plan.d_max_image, translation_noise_cm=(0.0, 0.0, 0.0),
                                   rotation_noise_deg=0.0, occluder_rows=0, light_model=False)
                poses = generate_trajectory(settings.spec(), self.config.run.seed)
                frames = self.two_view_frames(len(poses))
                atlas = TextureAtlas(self.prior, self.atlas_spec([poses[k] for k in frames], frames, "camera"))
                images = [render_view(self.prior, texture, poses[k], self.K, threads=self.threads) for k in frames]
                for batch in reconstruct_dense(images, [poses[k] for k in frames], self.K, self.prior,
                                               frame_indices=frames, threads=self.threads):
                    atlas.add(batch)
                directory = self.path(f"coverage_{factor:.2f}")
                write_atlas(atlas, directory)
                rows.append({"speed_factor": factor, "forward_step_m": settings.forward_step,
                             "d_max_image_m": plan.d_max_image, "views": len(frames),
                             "holes": hole_count(atlas), "holes_total": hole_count(atlas, within_coverage=False)})
                logger.info(f"coverage at {factor:.2f} x bound: {rows[-1]['holes']} holes")
            table = pd.DataFrame(rows, columns=["speed_factor", "forward_step_m", "d_max_image_m", "views", "holes",
                                                "holes_total"])
            table.to_csv(outputs[0], index=False, float_format="%.17g")
        return table

    def run(self) -> Dict:
        """The full pipeline; returns (and writes) summary.json."""
        summary: Dict = {"seed": self.config.run.seed, "mode": "simulate" if self.config.simulated else "ingest"}
        if self.config.simulated:
            self.simulate()
            matches = self.synth_matches()
        else:
            matches = read_matches(self.matches_path)
        summary["matches"] = int(len(matches))
        initial = self.estimate_poses()
        poses, ba = self.bundle_adjust()
        summary["frames"] = len(poses)
        summary["ba"] = ba
        groundtruth = self.groundtruth()
        if groundtruth is not None and len(groundtruth) == len(poses):
            before = pose_errors(initial, groundtruth)
            after = pose_errors(poses, groundtruth)
            summary["pose_rms_before_ba_m"] = _rms(before["position_error_m"])
            summary["pose_rms_m"] = _rms(after["position_error_m"])
            summary["rotation_rms_deg"] = _rms(after["rotation_error_deg"])
            after.to_csv(self.path("pose_errors.csv"), index=False, float_format="%.17g")
        dense = self.dense(poses, stage_name="reconstruct")
        summary.update({"points": dense["points"], "atlas_holes": dense["atlas_holes"],
                        "coverage_holes": dense["coverage_holes"], "atlas_shape": dense["atlas_shape"]})
        write_json(self.path("summary.json"), summary)
        logger.info("stage timings: " + ", ".join(f"{k} {v:.1f} s" for k, v in self.timings.items()))
        return summary


def _prior_size(prior: ScenePrior) -> float:
    if isinstance(prior, Cylinder):
        return prior.radius
    return min(abs(p.offset) for p in prior.planes)


def run_pipeline(cfg: PipelineConfig) -> Dict:
    """Run every stage for `cfg`; raises StageError naming the failed stage."""
    return TunnelReconPipeline(cfg).run()
