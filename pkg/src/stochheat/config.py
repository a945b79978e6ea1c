"""Flat dotted key=value experiment configuration.

Human-diffable text format: one `section.key = value` per line, `#` comments.
Values are parsed as bool, int, float, comma-separated float tuples, or
strings.  A canonical serialization (sorted keys, repr-stable values) feeds
the config hash so reports are reproducible byte for byte.
"""

from __future__ import annotations

import hashlib

from .errors import ConfigurationError

__all__ = ["DEFAULTS", "parse_value", "parse_config", "load_config",
           "merge_config", "canonical_serialization", "config_hash",
           "validate_config"]

# desk-scale defaults: unit interval, tree mode, nested radii around x0
DEFAULTS = {
    "domain.extents": (0.0, 1.0),
    "grid.nodes": 63,
    "time.horizon": 0.5,
    "time.steps": 0,               # 0 -> tree depth decides
    "tree.depth": 10,
    "noise.mode": "tree",
    "mc.paths": 256,
    "coeff.kind": "constant",
    "coeff.a": 0.3,
    "coeff.b": 0.4,
    "coeff.a_bound": 0.5,
    "coeff.b_bound": 0.5,
    "geometry.x0": (0.5,),
    "geometry.r1": 0.08,
    "geometry.r2": 0.12,
    "geometry.r3": 0.18,
    "geometry.r4": 0.24,
    "geometry.g0_center": (0.5,),
    "geometry.g0_radius": 0.1,
    "time_set.e": (0.1, 0.2, 0.3, 0.45),
    "time_set.e1": (0.05, 0.35),
    "ucp.epsilon": 0.1,
    "ucp.kernel_shift": 0.01,
    "constants.variant": "max",
    "initial.kind": "bump",
    "seed": 1234,
    "tol_scale": 1.0,
    # the control experiments run a reduced resolution of their own
    "control.nodes": 15,
    "control.depth": 10,
    "control.horizon": 0.5,
    "control.g0_center": (0.5,),
    "control.g0_radius": 0.15,
    "control.e1": (0.05, 0.45),
    "control.accuracy": 1e-2,
}


def parse_value(text: str):
    text = text.strip()
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if "," in text:
        try:
            return tuple(float(p) for p in text.split(",") if p.strip())
        except ValueError:
            return text
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            continue
    return text


def parse_config(text: str) -> dict:
    cfg = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigurationError(f"line {lineno}: empty key")
        cfg[key] = parse_value(value)
    return cfg


def load_config(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def merge_config(overrides: dict | None = None) -> dict:
    cfg = dict(DEFAULTS)
    if overrides:
        unknown = set(overrides) - set(DEFAULTS)
        if unknown:
            raise ConfigurationError(
                f"unknown configuration keys: {', '.join(sorted(unknown))}")
        cfg.update(overrides)
    return cfg


def _canonical_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(repr(float(v)) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def canonical_serialization(cfg: dict) -> str:
    return "\n".join(f"{k} = {_canonical_value(cfg[k])}" for k in sorted(cfg)) + "\n"


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical_serialization(cfg).encode()).hexdigest()[:16]


def validate_config(cfg: dict) -> None:
    radii = [cfg[f"geometry.r{i}"] for i in (1, 2, 3, 4)]
    if not all(r1 < r2 for r1, r2 in zip(radii, radii[1:])):
        raise ConfigurationError(
            "geometry radii must satisfy r1 < r2 < r3 < r4, got "
            + ", ".join(str(r) for r in radii))
    if cfg["time.horizon"] <= 0:
        raise ConfigurationError("time.horizon must be positive")
    if cfg["tree.depth"] < 1 or cfg["grid.nodes"] < 3:
        raise ConfigurationError("tree.depth >= 1 and grid.nodes >= 3 required")
    if cfg["noise.mode"] not in ("tree", "mc"):
        raise ConfigurationError("noise.mode must be 'tree' or 'mc'")
    e = cfg["time_set.e"]
    if len(e) % 2 != 0 or len(e) == 0:
        raise ConfigurationError("time_set.e needs an even number of endpoints")
    if not 0.0 < 2.0 * cfg["ucp.epsilon"] < cfg["time.horizon"]:
        raise ConfigurationError("ucp.epsilon must satisfy 0 < 2*eps < horizon")
