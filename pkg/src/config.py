import os
from dataclasses import dataclass, fields, replace
from dotenv import dotenv_values, load_dotenv
from src.utils.exceptions import ConfigError

# Load environment variables from .env file
load_dotenv()

# Application Configuration
APP_TITLE = "CrowdCam Dynamic Region Detector"
APP_DESCRIPTION = (
    "Detects moving regions in unordered, wide-baseline still-image sets by "
    "scoring epipolar-consistent matches against every support image and "
    "fusing the evidence into one dynamic probability map per image."
)

# Input Validation Configuration
ALLOWED_IMAGE_EXTENSIONS = [".png", ".jpg", ".jpeg"]
MIN_IMAGE_SIDE = 64
MIN_SET_SIZE = 2
GROUND_TRUTH_DIRNAME = "gt"
# Single-channel ground-truth codes
GT_STATIC_CODE = 0
GT_DONT_CARE_CODE = 128
GT_DYNAMIC_CODE = 255

# Feature Matching Configuration
HARRIS_MAX_CORNERS = 2000
HARRIS_K = 0.04
HARRIS_NMS_RADIUS = 3
HARRIS_RELATIVE_THRESHOLD = 0.01
NCC_WINDOW = 11
NCC_RATIO = 0.8

# RANSAC Configuration (Sampson distance in pixels)
RANSAC_THRESHOLD = 1.5
RANSAC_MAX_ITERATIONS = 2000
RANSAC_CONFIDENCE = 0.99
MIN_INLIERS = 30
MIN_INLIER_RATIO = 0.2

# Epipolar Patch Configuration
TARGET_HEIGHT = 16
CANDIDATE_WIDTHS = (0.5, 1.0, 2.0)
EXCLUSION_FACTOR = 2.0
CANONICAL_SIZE = 16

# Descriptor Configuration
DESCRIPTORS = ("hog", "hs_hist")
HOG_WEIGHT = 2.0
HS_WEIGHT = 1.0
HS_BINS = 10
HOG_BINS = 9
HOG_CELLS = 2  # cells per side of the canonical grid
HOG_EPSILON = 1e-6

# Fusion and Evaluation Configuration
REMAP_LOW = 0.3
REMAP_HIGH = 0.7
NEUTRAL_PROBABILITY = 0.5
THRESHOLD = 0.5
THRESHOLD_STEP = 0.01
THRESHOLD_PROTOCOLS = ("per_image", "per_set", "fixed")
THRESHOLD_PROTOCOL = "per_image"

# Run Configuration
SEED = 0
THREADS = 1
MAX_SUPPORT = 0  # 0 keeps every accepted support image

# Logging Configuration
LOG_FILE_PATH = os.getenv("DYNMAP_LOG_FILE", "logs/app.log")
LOG_LEVEL = os.getenv("DYNMAP_LOG_LEVEL", "INFO") # Can be "DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"
CONSOLE_LOG_LEVEL = os.getenv("DYNMAP_CONSOLE_LOG_LEVEL", "INFO")


@dataclass(frozen=True)
class RunConfig:
    """
    Every knob of a detection run. Defaults reproduce the module constants;
    a flat key-value file and command-line flags of the same names override them.
    """
    input_dir: str = ""
    output_dir: str = ""
    gt_dir: str = ""
    fmatrices: str = ""
    seed: int = SEED
    threads: int = THREADS
    target_height: float = float(TARGET_HEIGHT)
    candidate_widths: tuple = CANDIDATE_WIDTHS
    exclusion_factor: float = EXCLUSION_FACTOR
    canonical_size: int = CANONICAL_SIZE
    descriptors: tuple = DESCRIPTORS
    hog_weight: float = HOG_WEIGHT
    hs_weight: float = HS_WEIGHT
    hs_bins: int = HS_BINS
    ransac_threshold: float = RANSAC_THRESHOLD
    ransac_max_iterations: int = RANSAC_MAX_ITERATIONS
    ransac_confidence: float = RANSAC_CONFIDENCE
    min_inliers: int = MIN_INLIERS
    min_inlier_ratio: float = MIN_INLIER_RATIO
    harris_max_corners: int = HARRIS_MAX_CORNERS
    ncc_window: int = NCC_WINDOW
    ncc_ratio: float = NCC_RATIO
    estimate_fundamental: bool = True
    max_support: int = MAX_SUPPORT
    threshold_protocol: str = THRESHOLD_PROTOCOL
    threshold: float = THRESHOLD
    debug_patches: bool = False

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def from_sources(cls, config_file: str | None = None, overrides: dict | None = None) -> "RunConfig":
        """
        Builds a config from defaults, then the key-value file, then overrides.

        Raises:
            ConfigError: On unknown keys or values that cannot be parsed.
        """
        values: dict = {}
        if config_file:
            if not os.path.exists(config_file):
                raise ConfigError(f"Config file not found at path: {config_file}")
            for key, raw in dotenv_values(config_file).items():
                values[key.strip().lower()] = raw
        for key, raw in (overrides or {}).items():
            if raw is not None:
                values[key] = raw

        unknown = sorted(set(values) - set(cls.keys()))
        if unknown:
            raise ConfigError(f"Unknown configuration keys: {', '.join(unknown)}")

        base = cls()
        parsed = {name: _coerce(name, values[name], getattr(base, name)) for name in values}
        return replace(base, **parsed)

    @property
    def descriptor_weights(self) -> dict[str, float]:
        weights = {"hog": self.hog_weight, "hs_hist": self.hs_weight}
        return {name: weights[name] for name in self.descriptors}


def _coerce(name: str, raw, default):
    """Converts a raw string (or already typed value) to the type of the default."""
    if not isinstance(raw, str):
        return tuple(raw) if isinstance(default, tuple) else raw
    text = raw.strip()
    try:
        if isinstance(default, bool):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [item.strip() for item in text.split(",") if item.strip()]
            if default and isinstance(default[0], float):
                return tuple(float(item) for item in items)
            return tuple(items)
    except ValueError:
        raise ConfigError(f"Invalid value '{raw}' for configuration key '{name}'.")
    return text
