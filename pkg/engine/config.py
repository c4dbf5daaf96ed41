"""RunConfig loader for flat "key = value" files."""

from __future__ import annotations
import dataclasses
import datetime as _dt
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

from .errors import ConfigError
from .models import RunConfig

log = logging.getLogger(__name__)

SECTIONS = ("ingest", "cleaning", "decay", "score", "detection", "world")
TOP_LEVEL_KEYS = ("seed", "workers")
# rng_seed is derived from `seed`; it has no key of its own.
DERIVED_KEYS = {"rng_seed"}


def _key_index(config: RunConfig) -> Dict[str, Tuple[Optional[str], Any]]:
    """Flat key -> (section attribute or None, current value)."""
    index: Dict[str, Tuple[Optional[str], Any]] = {}
    for section in SECTIONS:
        obj = getattr(config, section)
        for f in dataclasses.fields(obj):
            if f.name in DERIVED_KEYS:
                continue
            if f.name in index:
                raise RuntimeError(f"duplicate config key {f.name}")
            index[f.name] = (section, getattr(obj, f.name))
    for name in TOP_LEVEL_KEYS:
        index[name] = (None, getattr(config, name))
    return index


def parse_rates(text: str) -> Tuple[float, ...]:
    """Comma-separated infection rates; the whole list is percent when any value is >= 1."""
    try:
        values = tuple(float(p.strip().rstrip("%")) for p in text.split(",") if p.strip())
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated rates, got {text!r}") from exc
    if not values:
        raise ConfigError(f"expected comma-separated rates, got {text!r}")
    if any(v >= 1.0 for v in values):
        values = tuple(v / 100.0 for v in values)
    return values


def coerce_value(key: str, raw: str, default: Any) -> Any:
    """Convert a raw string to the type of the key's default value."""
    text = raw.strip()
    try:
        if isinstance(default, bool):
            lowered = text.lower()
            if lowered in ("true", "yes", "on", "1"):
                return True
            if lowered in ("false", "no", "off", "0"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, _dt.date):
            return _dt.date.fromisoformat(text)
        if isinstance(default, tuple):
            if key == "sweep_rates":
                return parse_rates(text)
            return tuple(float(p.strip()) for p in text.split(",") if p.strip())
        if isinstance(default, dict):
            mapping: Dict[str, int] = {}
            for part in text.split(","):
                if not part.strip():
                    continue
                name, _, days = part.partition(":")
                mapping[name.strip()] = int(days)
            return mapping
        return text
    except ValueError as exc:
        raise ConfigError(f"invalid value for {key}: {raw.strip()!r}") from exc


def parse_config_text(text: str, base: Optional[RunConfig] = None) -> RunConfig:
    config = base if base is not None else RunConfig()
    index = _key_index(config)

    for lineno, line in enumerate(text.splitlines(), start=1):
        content = line.split("#", 1)[0].strip()
        if not content:
            continue
        if "=" not in content:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {content!r}")
        key, _, raw = content.partition("=")
        key = key.strip()
        if key not in index:
            log.warning(f"Unknown config key {key!r} on line {lineno}; ignored")
            continue
        section, default = index[key]
        value = coerce_value(key, raw, default)
        target = config if section is None else getattr(config, section)
        setattr(target, key, value)

    config.world.rng_seed = config.seed
    config.validate()
    return config


def load_config(path: Optional[Union[str, Path]]) -> RunConfig:
    """Load a RunConfig from `path`; defaults when path is None or missing."""
    if path is None:
        config = RunConfig()
        config.validate()
        return config
    path = Path(path)
    if not path.exists():
        log.warning(f"Config file {path} not found; using defaults")
        config = RunConfig()
        config.validate()
        return config
    log.info(f"Loading config from {path}")
    return parse_config_text(path.read_text(encoding="utf-8"))


def dump_config(config: RunConfig) -> str:
    """Render a RunConfig back to the flat key-value format."""
    lines = [f"seed = {config.seed}", f"workers = {config.workers}"]
    for section in SECTIONS:
        obj = getattr(config, section)
        lines.append(f"# {section}")
        for f in dataclasses.fields(obj):
            if f.name in DERIVED_KEYS:
                continue
            value = getattr(obj, f.name)
            if isinstance(value, tuple):
                text = ",".join(repr(v) for v in value)
            elif isinstance(value, dict):
                text = ",".join(f"{k}:{v}" for k, v in sorted(value.items()))
            elif isinstance(value, bool):
                text = "true" if value else "false"
            elif isinstance(value, _dt.date):
                text = value.isoformat()
            else:
                text = str(value)
            lines.append(f"{f.name} = {text}")
    return "\n".join(lines) + "\n"
