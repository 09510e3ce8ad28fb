import copy
import json
import logging
import os
from typing import Any, Dict, Optional

logger = logging.getLogger(__name__)

DEFAULTS_PATH = os.path.join(os.path.dirname(__file__), "config", "defaults.json")

_FALLBACK_DEFAULTS: Dict[str, Any] = {
    "analysis": {
        "alpha": 0.05,
        "p_threshold": 0.10,
        "policy": "iut-uit",
        "vcov": "hc3",
        "dose_contrast": "williams",
        "alternative": "two-sided",
        "transform": "none",
    },
    "mvt": {
        "samples": 100_000,
        "randomizations": 12,
        "target_abs_error": 1e-4,
        "seed": 20210,
        "workers": 1,
    },
    "columns": {"lab": "lab", "dose": "conc", "response": "response"},
}


def load_defaults(path: Optional[str] = None) -> Dict[str, Any]:
    """Load analysis defaults, falling back to the built-in values"""
    defaults_path = path or DEFAULTS_PATH
    try:
        with open(defaults_path, "r", encoding="utf-8") as f:
            loaded = json.load(f)
    except (FileNotFoundError, json.JSONDecodeError) as e:
        logger.warning(f"Could not read defaults from {defaults_path}: {e}; using built-in defaults")
        return copy.deepcopy(_FALLBACK_DEFAULTS)

    merged = copy.deepcopy(_FALLBACK_DEFAULTS)
    for section, values in loaded.items():
        if isinstance(values, dict) and section in merged:
            merged[section].update(values)
        else:
            merged[section] = values
    return merged


def env_int(name: str, default: Optional[int] = None) -> Optional[int]:
    raw = os.getenv(name)
    if raw is None or not raw.strip():
        return default
    try:
        return int(raw)
    except ValueError:
        logger.warning(f"Ignoring non-integer {name}={raw!r}")
        return default


def resolve_seed(cli_seed: Optional[int], defaults: Dict[str, Any]) -> int:
    """CLI flag > TRENDSIM_SEED > defaults.json"""
    if cli_seed is not None:
        return cli_seed
    return env_int("TRENDSIM_SEED", defaults["mvt"]["seed"])


def resolve_mvt(defaults: Dict[str, Any], samples: Optional[int], randomizations: Optional[int]) -> Dict[str, int]:
    return {
        "samples": samples if samples is not None else env_int("TRENDSIM_MVT_SAMPLES", defaults["mvt"]["samples"]),
        "randomizations": randomizations
        if randomizations is not None
        else env_int("TRENDSIM_MVT_RANDOMIZATIONS", defaults["mvt"]["randomizations"]),
        "workers": env_int("TRENDSIM_WORKERS", defaults["mvt"]["workers"]),
    }
