"""Run configuration, stage seeding, and manifest writing for the CLI."""

from __future__ import annotations

import copy
import hashlib
import json
import os

from . import __version__

DEFAULTS: dict = {
    "seed": 0,
    "out_dir": "out",
    "threads": 1,
    "flight": {"start_epoch": 19675 * 86400, "days": 30},
    "grid": {
        "delta_lat": 0.01,
        "delta_lon": 0.01,
        "origin_lat": -90.0,
        "origin_lon": -180.0,
        "edge_threshold_m": 400.0,
        "keywords": 25,
    },
    "hit": {
        "variant": "radius",
        "radius_m": 50.0,
        "lump_window_s": 3600,
        "lump_threshold": 0.0,
        "stochastic_r_m": 50.0,
        "parcel": None,
    },
    "kernel_m": 7,
    "mode": "unbalanced",
    "matching": {
        "method": "sort",
        "balanced": False,
        "caliper": True,
        "caliper_width": 1e-3,
        "k": "auto",
        "time_features": False,
        "max_iter": 10,
    },
    "bootstrap_b": 1000,
    "propagate": {"steps": 2, "lambda": 0.5, "mu": 0.5, "nu": 0.5},
    "profile": {"rho": 0.5, "gamma_f": 0.5, "gamma_g": 0.5},
    "paths": {},
    "synth": {},
}


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


class DegenerateError(ValueError):
    pass


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = val
    return out


def load_config(path: str | None, overrides: dict | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"config file {path!r} does not exist")
        try:
            with open(path, "r", encoding="utf-8") as fh:
                user = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path!r} is not valid JSON: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError("config root must be a JSON object")
        cfg = _merge(cfg, user)
    if overrides:
        cfg = _merge(cfg, overrides)
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    flight = cfg["flight"]
    if flight["days"] < 1:
        raise ConfigError("flight.days must be >= 1")
    grid = cfg["grid"]
    if grid["delta_lat"] <= 0 or grid["delta_lon"] <= 0:
        raise ConfigError("grid deltas must be positive")
    if grid["edge_threshold_m"] <= 0:
        raise ConfigError("grid.edge_threshold_m must be positive")
    if cfg["kernel_m"] < 1:
        raise ConfigError("kernel_m must be >= 1")
    if cfg["mode"] not in ("balanced", "unbalanced"):
        raise ConfigError("mode must be 'balanced' or 'unbalanced'")
    hit = cfg["hit"]
    if hit["variant"] not in ("radius", "parcel", "stochastic"):
        raise ConfigError("hit.variant must be radius|parcel|stochastic")
    if not 0 < hit["lump_window_s"] <= 86400:
        raise ConfigError("hit.lump_window_s must be in (0, 86400]")
    matching = cfg["matching"]
    if matching["method"] not in ("sort", "kmeans"):
        raise ConfigError("matching.method must be 'sort' or 'kmeans'")
    if matching["k"] != "auto" and (not isinstance(matching["k"], int) or matching["k"] < 1):
        raise ConfigError("matching.k must be 'auto' or a positive integer")
    if cfg["bootstrap_b"] < 0:
        raise ConfigError("bootstrap_b must be >= 0")
    if cfg["threads"] < 1:
        raise ConfigError("threads must be >= 1")


def stage_seed(master_seed: int, stage: str) -> int:
    """Stable per-stage seed derived from the master seed."""
    digest = hashlib.sha256(f"{master_seed}:{stage}".encode()).digest()
    return int.from_bytes(digest[:8], "big") % (2**63)


def artifact_path(cfg: dict, name: str, default_filename: str) -> str:
    """Input/output location for a pipeline artifact: explicit path wins,
    otherwise the file lives in out_dir."""
    explicit = cfg["paths"].get(name)
    if explicit:
        return explicit
    return os.path.join(cfg["out_dir"], default_filename)


def sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(cfg: dict, stage: str, inputs: dict[str, str], parameters: dict) -> str:
    """Record input hashes, parameters, seed and version for one stage."""
    manifest = {
        "stage": stage,
        "version": __version__,
        "master_seed": cfg["seed"],
        "stage_seed": stage_seed(cfg["seed"], stage),
        "threads": cfg["threads"],
        "inputs": {
            name: {"path": path, "sha256": sha256_file(path)} for name, path in inputs.items()
        },
        "parameters": parameters,
    }
    path = os.path.join(cfg["out_dir"], f"{stage}.manifest.json")
    os.makedirs(cfg["out_dir"], exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return path
