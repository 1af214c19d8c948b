# src/config.py

"""
Run configuration.

Precedence, lowest to highest: dataclass defaults, a key=value config file,
HIRES_STEREO_<SECTION>_<FIELD> environment variables (a local .env is loaded
first), explicit overrides from the command line.
"""

from __future__ import annotations

import dataclasses
import logging
import os
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

from dotenv import load_dotenv

from core.errors import ConfigError
from core.models import (
    InferenceConfig,
    LossWeights,
    ModelConfig,
    RunConfig,
    SceneSpec,
    TrainConfig,
)

logger = logging.getLogger(__name__)

ENV_PREFIX = "HIRES_STEREO_"

SECTIONS = {
    "model": ModelConfig,
    "loss": LossWeights,
    "train": TrainConfig,
    "infer": InferenceConfig,
    "scene": SceneSpec,
}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def log_level() -> str:
    return os.getenv(f"{ENV_PREFIX}LOG_LEVEL", "INFO").strip().upper() or "INFO"


def device() -> str:
    return os.getenv(f"{ENV_PREFIX}DEVICE", "cpu").strip() or "cpu"


# -----------------------------------------------------------------------------
# Coercion
# -----------------------------------------------------------------------------

def coerce_value(default: Any, raw: Any, key: str) -> Any:
    """Convert `raw` to the type of `default`; tuples are comma-separated lists."""
    if not isinstance(raw, str):
        if isinstance(default, tuple) and isinstance(raw, (list, tuple)):
            return tuple(raw)
        return raw
    text = raw.strip()
    try:
        if isinstance(default, bool):
            lowered = text.lower()
            if lowered in _TRUE:
                return True
            if lowered in _FALSE:
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            parts = [p.strip() for p in text.split(",") if p.strip()]
            kind = type(default[0]) if default else float
            return tuple(kind(p) for p in parts)
        return text
    except ValueError as e:
        raise ConfigError(f"Invalid value for {key}: {raw!r} ({e})") from e


def _field_defaults(cls) -> Dict[str, Any]:
    instance = cls()
    return {f.name: getattr(instance, f.name) for f in dataclasses.fields(cls)}


def build_section(cls, values: Mapping[str, Any], section: str = ""):
    defaults = _field_defaults(cls)
    kwargs = {}
    for name, raw in values.items():
        key = f"{section}.{name}" if section else name
        if name not in defaults:
            raise ConfigError(f"Unknown configuration key: {key}")
        kwargs[name] = coerce_value(defaults[name], raw, key)
    return cls(**kwargs)


# -----------------------------------------------------------------------------
# Sources
# -----------------------------------------------------------------------------

def read_config_file(path: Union[str, Path]) -> Dict[str, str]:
    """key=value lines; '#' starts a comment; blank lines ignored."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Config file not found: {path}")
    values: Dict[str, str] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def _env_values() -> Dict[str, str]:
    values = {}
    for section, cls in SECTIONS.items():
        for f in dataclasses.fields(cls):
            raw = os.getenv(f"{ENV_PREFIX}{section.upper()}_{f.name.upper()}")
            if raw is not None:
                values[f"{section}.{f.name}"] = raw
    return values


def _split_key(key: str):
    if "." not in key:
        raise ConfigError(f"Configuration key needs a section prefix: {key}")
    section, name = key.split(".", 1)
    if section not in SECTIONS:
        raise ConfigError(
            f"Unknown configuration section {section!r} in {key}; "
            f"expected one of {sorted(SECTIONS)}")
    return section, name


def load_run_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> RunConfig:
    load_dotenv()

    merged: Dict[str, Any] = {}
    if path is not None:
        merged.update(read_config_file(path))
    merged.update(_env_values())
    merged.update({k: v for k, v in (overrides or {}).items() if v is not None})

    per_section: Dict[str, Dict[str, Any]] = {name: {} for name in SECTIONS}
    for key, value in merged.items():
        section, name = _split_key(key)
        per_section[section][name] = value

    built = {name: build_section(SECTIONS[name], per_section[name], name) for name in SECTIONS}
    logger.debug("Loaded configuration from %s with %d explicit keys", path, len(merged))
    return RunConfig(
        model=built["model"],
        loss=built["loss"],
        train=built["train"],
        infer=built["infer"],
        scene=built["scene"],
    )
