"""Pipeline configuration: one JSON document, strict schema, dot-path overrides."""

from __future__ import annotations

import copy
import json
from pathlib import Path

from .dataset import TASKS
from .features import MODES


class ConfigError(ValueError):
    """Invalid pipeline configuration."""


DEFAULT_CONFIG = {
    "dims": [16, 32, 32],
    "grid_n": 2,
    "mode": "path_persona",
    "use_persona": True,
    "use_usage_predictor": True,
    "usage_threshold": 0.4,
    "lambda_u": 1e-4,
    "lambda_beta": 1e-3,
    "tasks": ["abn", "acl", "men"],
    "mask_fractions": [0.5, 0.3, 0.5],
    "extract_processes": 2,
    "phantom": {
        "subjects": 500,
        "val_fraction": 0.2,
        "acl_prob": 0.45,
        "men_prob": 0.45,
        "base_range": [0.35, 0.65],
        "noise_sigma": 0.02,
        "acl_amplitude": 0.35,
        "men_amplitude": 0.7,
    },
    "diffusion": {
        "timesteps": 100,
        "beta_start": 1e-4,
        "beta_end": 2e-2,
        "steps": 2000,
        "lr": 2e-3,
        "momentum": 0.9,
        "batch_size": 8,
        "widths": [8, 16, 32],
        "embed_dim": 16,
        "out_kernel": 1,
        "train_dtype": "float32",
        "val_volumes": 16,
        "val_every": 100,
        "persona_split": "healthy-train",
        "reconstruct_chunk": 8,
        "reconstruct_processes": 2,
        "sample_dtype": "float32",
    },
    "training": {
        "epochs": 40,
        "lr": 0.05,
        "momentum": 0.9,
        "batch_size": 32,
        "seed": 0,
        "runs": 3,
        "usage_widths": [8, 16, 32],
        "use_intercept": False,
        "threshold_every": 10,
    },
    "paths": {
        "data_dir": "data",
        "model_dir": "models",
        "report_dir": "reports",
    },
}


def _merge_strict(defaults: dict, user: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(defaults)
    for key, value in user.items():
        path = f"{prefix}{key}"
        if key not in defaults:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path!r} must be an object")
            out[key] = _merge_strict(defaults[key], value, prefix=f"{path}.")
        else:
            out[key] = value
    return out


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ConfigError(message)


def _check_number(cfg: dict, path: str, lo=None, hi=None, integer=False) -> None:
    node = cfg
    for part in path.split("."):
        node = node[part]
    kind = "an integer" if integer else "a number"
    _require(isinstance(node, (int, float)) and not isinstance(node, bool), f"{path} must be {kind}")
    if integer:
        _require(float(node) == int(node), f"{path} must be an integer, got {node}")
    if lo is not None:
        _require(node >= lo, f"{path} must be >= {lo}, got {node}")
    if hi is not None:
        _require(node <= hi, f"{path} must be <= {hi}, got {node}")


def validate_config(cfg: dict) -> dict:
    dims = cfg["dims"]
    _require(isinstance(dims, (list, tuple)) and len(dims) == 3
             and all(isinstance(d, int) and d >= 4 for d in dims),
             f"dims must be three integers >= 4, got {dims!r}")
    _require(cfg["grid_n"] in (1, 2, 3), f"grid_n must be 1, 2 or 3, got {cfg['grid_n']!r}")
    _require(cfg["mode"] in MODES, f"mode must be one of {MODES}, got {cfg['mode']!r}")
    _require(isinstance(cfg["use_persona"], bool), "use_persona must be a boolean")
    _require(isinstance(cfg["use_usage_predictor"], bool), "use_usage_predictor must be a boolean")
    if not cfg["use_persona"]:
        _require(cfg["mode"] == "path_only",
                 "use_persona=false requires mode=path_only")
    else:
        _require(cfg["mode"] != "path_only",
                 "use_persona=true requires a persona-dependent mode (path_persona or residual)")
    _check_number(cfg, "usage_threshold", 0.0, 1.0)
    _check_number(cfg, "lambda_u", 0.0)
    _check_number(cfg, "lambda_beta", 0.0)
    tasks = cfg["tasks"]
    _require(isinstance(tasks, (list, tuple)) and len(tasks) >= 1
             and all(t in TASKS for t in tasks),
             f"tasks must be a non-empty subset of {TASKS}, got {tasks!r}")
    fractions = cfg["mask_fractions"]
    _require(isinstance(fractions, (list, tuple)) and len(fractions) == 3
             and all(isinstance(f, (int, float)) and 0.0 < f <= 1.0 for f in fractions),
             f"mask_fractions must be three numbers in (0, 1], got {fractions!r}")
    _check_number(cfg, "extract_processes", 1, integer=True)
    _check_number(cfg, "phantom.subjects", 2, integer=True)
    _check_number(cfg, "phantom.val_fraction", 0.0, 0.9)
    _check_number(cfg, "phantom.acl_prob", 0.0, 1.0)
    _check_number(cfg, "phantom.men_prob", 0.0, 1.0)
    _check_number(cfg, "phantom.noise_sigma", 0.0)
    _check_number(cfg, "diffusion.timesteps", 2, integer=True)
    _check_number(cfg, "diffusion.beta_start", 0.0)
    _check_number(cfg, "diffusion.beta_end", 0.0, 1.0)
    _require(cfg["diffusion"]["beta_start"] < cfg["diffusion"]["beta_end"],
             "diffusion.beta_start must be < diffusion.beta_end")
    _check_number(cfg, "diffusion.steps", 0, integer=True)
    _check_number(cfg, "diffusion.lr", 0.0)
    _check_number(cfg, "diffusion.batch_size", 1, integer=True)
    _require(cfg["diffusion"]["persona_split"] in ("healthy-train", "train-all"),
             "diffusion.persona_split must be 'healthy-train' or 'train-all'")
    _require(cfg["diffusion"]["out_kernel"] in (1, 3),
             "diffusion.out_kernel must be 1 or 3")
    for key in ("sample_dtype", "train_dtype"):
        _require(cfg["diffusion"][key] in ("float32", "float64"),
                 f"diffusion.{key} must be 'float32' or 'float64'")
    _check_number(cfg, "diffusion.reconstruct_chunk", 1, integer=True)
    _check_number(cfg, "diffusion.reconstruct_processes", 1, integer=True)
    _check_number(cfg, "training.epochs", 1, integer=True)
    _check_number(cfg, "training.lr", 0.0)
    _check_number(cfg, "training.batch_size", 1, integer=True)
    _check_number(cfg, "training.seed", integer=True)
    _check_number(cfg, "training.runs", 1, integer=True)
    _check_number(cfg, "training.threshold_every", 1, integer=True)
    for key in ("data_dir", "model_dir", "report_dir"):
        _require(isinstance(cfg["paths"][key], str) and cfg["paths"][key],
                 f"paths.{key} must be a non-empty string")
    return cfg


def parse_override(expr: str) -> tuple[str, object]:
    """Parse a --set KEY=VALUE override; the value is JSON when parseable, else a string."""
    if "=" not in expr:
        raise ConfigError(f"override {expr!r} must look like key.path=value")
    key, raw = expr.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def apply_override(cfg: dict, key: str, value) -> None:
    parts = key.split(".")
    node = cfg
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise ConfigError(f"unknown config key {key!r}")
        node = node[part]
    leaf = parts[-1]
    if leaf not in node:
        raise ConfigError(f"unknown config key {key!r}")
    if isinstance(node[leaf], dict):
        raise ConfigError(f"config key {key!r} is a section, not a value")
    node[leaf] = value


def load_config(path=None, overrides=(), seed=None) -> dict:
    """Merged, validated config dict from defaults, optional file, --set overrides, --seed."""
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError("config file must contain a JSON object")
        cfg = _merge_strict(DEFAULT_CONFIG, user)
    else:
        cfg = copy.deepcopy(DEFAULT_CONFIG)
    for expr in overrides:
        key, value = parse_override(expr)
        apply_override(cfg, key, value)
    if seed is not None:
        cfg["training"]["seed"] = int(seed)
    return validate_config(cfg)


def config_snapshot(cfg: dict) -> dict:
    return copy.deepcopy(cfg)
