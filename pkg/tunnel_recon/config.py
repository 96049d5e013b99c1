"""
Configuration file for the tunnel reconstruction application.

Values here are the defaults of every pipeline knob; a run's INI file and
`--set section.key=value` flags override them (see pipeline.py).
"""
import os

from dotenv import load_dotenv

load_dotenv()

# Environment
THREADS = int(os.getenv("TUNNEL_RECON_THREADS", "0")) or (os.cpu_count() or 1)
LOG_LEVEL = os.getenv("TUNNEL_RECON_LOG_LEVEL", "INFO")
OUTPUT_DIR = os.getenv("TUNNEL_RECON_OUTPUT_DIR", "./output")
LOG_FILE_NAME = "tunnel_recon.log"
SLOW_TESTS = os.getenv("TUNNEL_RECON_SLOW_TESTS", "0") == "1"

# Camera (portrait frames: the short side runs around the tunnel)
IMAGE_WIDTH = 480
IMAGE_HEIGHT = 640
OMEGA_H_DEG = 60.0
DISTORTION_K1 = 0.0
DISTORTION_K2 = 0.0

# Scene prior
PRIOR_KIND = "cylinder"  # "cylinder" or "box"
TUNNEL_RADIUS = 3.0
BOX_LEFT = -2.0
BOX_RIGHT = 2.0
BOX_FLOOR = -1.5
BOX_CEILING = 1.5

# Trajectory
CAPTURE_MODE = "spiral"  # "spiral" or "cylindrical"
IMAGES_PER_ROTATION = 10
ROTATION_COUNT = 10
FORWARD_STEP = 0.15  # meters per image
START_OFFSET = (0.0, 0.0)  # (tx, tz) in meters
TRANSLATION_NOISE_CM = (0.0, 0.0, 0.0)
ROTATION_NOISE_DEG = 0.0
JITTER_TRANSLATION_CM = (2.0, 1.0, 2.0)
JITTER_ROTATION_DEG = 2.0
TEXTURE = "brick"  # checker, brick, waves or a raster image path
TEXTURE_SCALE = 0.25  # meters per texture period
LIGHT_MODEL = False
LIGHT_AMBIENT = 0.25
OCCLUDER_ROWS = 0  # rows of the rig-fixed occluder at the bottom of each frame

# Range sensors
SENSOR_NOISE_M = 0.01

# Matching
MATCHES_PER_PAIR = 250
PIXEL_NOISE_SD = 0.5
OUTLIER_FRACTION = 0.0
STATIC_MATCHES_PER_PAIR = 0

# RANSAC
RANSAC_THRESHOLD_PX = 1.0
RANSAC_CONFIDENCE = 0.999
RANSAC_MAX_ITERATIONS = 10000
RANSAC_MIN_INLIER_RATIO = 0.3
MIN_PARALLAX_RAD = 1e-3

# Pruning
GEOMETRY_TOLERANCE_FRACTION = 0.1  # of the tunnel radius
REPROJECTION_THRESHOLD_PX = 3.0
MIN_TRIANGULATION_ANGLE_DEG = 0.5

# Bundle adjustment
BA_MAX_ITERATIONS = 200
BA_RELATIVE_DECREASE = 1e-10
BA_GRADIENT_TOLERANCE = 1e-12
BA_PRUNE_AFTER = 10
BA_INITIAL_DAMPING = 1e-4

# Texture atlas
ATLAS_WIDTH = 7500  # texels per 360 degrees
TEXELS_PER_METER = 1.0 / 0.0017
ATLAS_LAYOUT = "cylinder"  # "cylinder" or "planes"
ATLAS_AVERAGE = False
ATLAS_RESOLUTION = "fixed"  # "fixed" uses the two values above, "camera" matches the pixel footprint
ATLAS_MARGIN = 0.9
PLY_BINARY = True
COVERAGE_SPEED_FACTORS = (1.0, 1.11)

# Run
SEED = 0

# Flight planner
PLANNER_MAX_ITERATIONS = 100
PLANNER_TOLERANCE = 1e-10
SPEED_SWEEP_STEPS = 50

# Exit codes
EXIT_CONFIG_ERROR = 2
STAGE_EXIT_CODES = {
    "simulate": 10,
    "plan": 11,
    "synth-matches": 12,
    "pose": 13,
    "ba": 14,
    "reconstruct": 15,
    "stitch": 16,
    "ablate": 17,
    "coverage": 18,
}