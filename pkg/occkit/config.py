"""Run configuration: flags > JSON config file > environment > defaults."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .errors import UsageError
from .grid import FOREGROUND_CLASSES, GridSpec
from .metrics import DEFAULT_THRESHOLDS, MAVE_THRESHOLD
from .raycast import RayPattern
from .splat import DEFAULT_DT
from .synth import SynthConfig

logger = logging.getLogger(__name__)

LOG_LEVEL_ENV = "OCCKIT_LOG_LEVEL"


@dataclass(frozen=True)
class RunConfig:
    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS
    foreground: tuple[int, ...] = FOREGROUND_CLASSES
    dt: float = DEFAULT_DT
    dilate: float | None = None
    mave_threshold: float = MAVE_THRESHOLD
    pooled_mave: bool = False
    threads: int | None = None
    seed: int | None = None
    log_level: str = "WARNING"
    n_bins: int = 32
    fmin: float = -25.0
    fmax: float = 25.0
    hard_fraction: float | None = None
    pattern: RayPattern | None = None
    synth: SynthConfig = field(default_factory=SynthConfig)


_SCALAR_KEYS = {f.name for f in fields(RunConfig)} - {"pattern", "synth"}


def _coerce(key: str, value):
    if key in ("thresholds",):
        return tuple(float(v) for v in value)
    if key == "foreground":
        return tuple(int(v) for v in value)
    if key in ("dt", "dilate", "mave_threshold", "fmin", "fmax", "hard_fraction"):
        return None if value is None else float(value)
    if key in ("threads", "seed", "n_bins"):
        return None if value is None else int(value)
    if key == "pooled_mave":
        return bool(value)
    if key == "log_level":
        return str(value).upper()
    return value


def _synth_from_dict(d: dict) -> SynthConfig:
    known = {f.name for f in fields(SynthConfig)}
    unknown = set(d) - known
    if unknown:
        raise UsageError(f"unknown synth config keys: {sorted(unknown)}")
    d = dict(d)
    if "spec" in d:
        d["spec"] = GridSpec.from_dict(d["spec"])
    for key in ("class_pool", "velocity_range", "box_size", "box_height"):
        if key in d:
            d[key] = tuple(d[key])
    return SynthConfig(**d)


def from_dict(doc: dict, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    unknown = set(doc) - _SCALAR_KEYS - {"pattern", "synth"}
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    try:
        updates = {k: _coerce(k, v) for k, v in doc.items() if k in _SCALAR_KEYS}
        if "pattern" in doc:
            updates["pattern"] = RayPattern.from_dict(doc["pattern"])
        if "synth" in doc:
            updates["synth"] = _synth_from_dict(doc["synth"])
        if "dt" in updates and "dt" not in doc.get("synth", {}):
            updates["synth"] = replace(updates.get("synth", cfg.synth), dt=updates["dt"])
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid config: {e}") from e
    return replace(cfg, **updates)


def from_env(base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    level = os.environ.get(LOG_LEVEL_ENV, "").strip()
    if level:
        cfg = replace(cfg, log_level=level.upper())
    # OCCKIT_THREADS is resolved late by occkit.parallel so that a config file wins.
    return cfg


def load(path: str | Path | None) -> RunConfig:
    """Defaults, then environment, then the JSON file at `path` (if any)."""
    cfg = from_env()
    if path is None:
        return cfg
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise UsageError(f"config {path} is not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    logger.debug("loaded config %s", path)
    return from_dict(doc, cfg)


def with_flags(cfg: RunConfig, **flags) -> RunConfig:
    """Override with every flag that was actually given (not None).

    A top-level `dt` also sets the synthetic scene time step.
    """
    given = {k: _coerce(k, v) for k, v in flags.items() if v is not None}
    if "dt" in given:
        given["synth"] = replace(cfg.synth, dt=given["dt"])
    return replace(cfg, **given)
