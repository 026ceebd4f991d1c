"""
Application Configuration
Environment settings plus the JSON pipeline configuration
"""
import copy
import json
import logging
import os
from pathlib import Path

from dotenv import load_dotenv

from app.errors import RejectedInputError

load_dotenv()

logger = logging.getLogger(__name__)


class Config:
    """Base configuration"""

    # Flask
    SECRET_KEY = os.getenv("FLASK_SECRET", "change_this_in_production")
    DEBUG = os.getenv("DEBUG", "False").lower() == "true"

    # URLs
    BACKEND_URL = os.getenv("BASE_URL", "http://localhost:5000")
    FRONTEND_URL = os.getenv("FRONTEND_URL", "http://localhost:3000")

    # Logging
    LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO").upper()

    # Artifacts
    OUTPUT_DIR = os.getenv("OUTPUT_DIR", "output")
    DEFAULT_SEED = int(os.getenv("DEFAULT_SEED", "0"))

    @staticmethod
    def validate():
        """Validate required configuration"""
        problems = []
        if not Config.OUTPUT_DIR:
            problems.append("OUTPUT_DIR")
        if Config.LOG_LEVEL not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
            problems.append(f"LOG_LEVEL={Config.LOG_LEVEL}")
        if problems:
            raise ValueError(f"Missing or invalid configuration: {', '.join(problems)}")

        logger.info("✅ Configuration validated")


# ============== PIPELINE CONFIGURATION ==============

DEFAULTS = {
    "io": {
        "mode": "synthetic",          # 'synthetic' or 'files'
        "output_dir": "output",
        "calibration": None,          # calibration JSON (files mode)
        "sweeps": [],                 # [{path, timestamp, ego_pose}] (files mode)
        "keyframe_index": -1,
        "field_count": 5,
        "masks": [],                  # [{raster, sidecar}] per camera (files mode)
        "gt": None,                   # GT sidecar prefix, optional
        "min_distance": 0.0,
        "seed": 0,
    },
    "rig": {
        "cameras": 6,
        "fov_deg": 70.0,
        "width": 320,
        "height": 180,
        "camera_radius": 0.8,
        "camera_height": 1.6,
        "lidar_height": 1.8,
    },
    "painter": {
        "z_min": 0.1,
        "merge_gap": 0.5,
        "emit_centers": True,
    },
    "refiner": {
        "enabled": True,
        "min_pts": 4,
        "eps_scale": 0.25,
        "eps_min": 0.3,
        "eps_max": 1.5,
    },
    "fusion": {
        "enabled": False,
        "hidden": 16,
        "stages": 2,
        "weight_scale": 0.1,
        "grid": "pointpillars",
        "seed": 0,
    },
    "fpa": {
        "iou_threshold": 0.1,
        "paste_count": 0,
        "random_translation": 0.0,
        "database": None,
    },
    "synth": {
        "boxes": 10,
        "density": 6000.0,
        "ground_points": 30000,
        "ground_radius": 50.0,
        "range": [6.0, 45.0],
        "label_mix": None,            # None = every label in the table
        "sweeps": 10,
        "sweep_interval": 0.05,
        "ego_speed": 10.0,
        "rotation_deg": 0.0,
        "translation_m": 0.0,
        "sync_offset_s": 0.0,
        "occluders": 0,
        "mask_erosion_px": 0,
        "parallax": False,            # keep camera-inconsistent points (frustum contamination)
    },
    "dispatch": {
        "levels": 3,
        "growth": 10.0,
    },
}


def default_pipeline_config():
    """Fresh deep copy of the defaults"""
    return copy.deepcopy(DEFAULTS)


def merge_pipeline_config(overrides):
    """Merge a (possibly partial) config dict over the defaults"""
    config = default_pipeline_config()
    for section, values in (overrides or {}).items():
        if section not in config:
            raise RejectedInputError(f"Unknown config section: {section}")
        if not isinstance(values, dict):
            raise RejectedInputError(f"Config section '{section}' must be an object")
        for key, value in values.items():
            if key not in config[section]:
                raise RejectedInputError(f"Unknown config key: {section}.{key}")
            config[section][key] = value
    return config


def load_pipeline_config(path=None):
    """Load a pipeline config file and merge it over the defaults"""
    if path is None:
        logger.info("ℹ️ No config file given, using defaults")
        return default_pipeline_config()

    path = Path(path)
    logger.info(f"🔍 Loading pipeline config from {path}")
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise RejectedInputError(f"Config file not found: {path}")
    except json.JSONDecodeError as e:
        raise RejectedInputError(f"Config file is not valid JSON: {path}: {e}")

    config = merge_pipeline_config(raw)
    # relative io paths resolve against the config file's directory
    base = path.parent
    io = config["io"]
    for key in ("calibration", "gt"):
        if io[key] and not Path(io[key]).is_absolute():
            io[key] = str(base / io[key])
    for sweep in io["sweeps"]:
        if not Path(sweep["path"]).is_absolute():
            sweep["path"] = str(base / sweep["path"])
    for mask in io["masks"]:
        for key in ("raster", "sidecar"):
            if mask.get(key) and not Path(mask[key]).is_absolute():
                mask[key] = str(base / mask[key])

    logger.info("✅ Pipeline config loaded")
    return config


def apply_overrides(config, overrides):
    """Apply 'section.key=value' overrides; values parse as JSON, else string"""
    config = copy.deepcopy(config)
    for item in overrides or ():
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise RejectedInputError(f"Override must look like section.key=value: {item}")
        dotted, raw_value = item.split("=", 1)
        section, key = dotted.split(".", 1)
        if section not in config or key not in config[section]:
            raise RejectedInputError(f"Unknown config key: {dotted}")
        try:
            value = json.loads(raw_value)
        except json.JSONDecodeError:
            value = raw_value
        config[section][key] = value
        logger.debug(f"✏️ Override {dotted} = {value!r}")
    return config
