"""Run configuration: defaults, validation, dot-path overrides and fingerprints.

A run is driven by one JSON document. Every block mirrors a module; keys not
present in :data:`DEFAULTS` are rejected so typos fail loudly instead of being
silently ignored.
"""
from __future__ import annotations

import copy
import hashlib
import json
import os
from pathlib import Path

from .bridge import make_schedule
from .denoiser import DenoiserConfig
from .views import VIEW_AXES
from .vqvae import VQConfig

DEFAULTS = {
    "seed": 0,
    "grid": {"n_pairs": 32, "dims": 16, "truncation": 3.0, "n_cameras": 1, "keep_fraction_bound": 0.85},
    "views": {"patch": 4},
    "vqvae": {"D": 16, "d": 4, "C": 2, "K": 64, "beta_c": 0.25, "widths": [16, 32, 32],
              "dead_code_steps": 2000, "fusion": {"enabled": True}, "views": ["front", "top", "left"]},
    "bridge": {"T": 50, "beta_max": 0.04, "beta_min": 0.004, "noise_scale": 1.0,
               "infer_steps": 3, "deterministic": True},
    "denoiser": {"base": 32, "mults": [1, 2], "time_dim": 64, "attention": True},
    "train": {"vq_stage1_steps": 800, "vq_stage1_lr": 2e-3, "vq_stage2_steps": 600, "vq_stage2_lr": 1e-3,
              "vq_batch": 8, "bridge_steps": 1500, "bridge_lr": 2e-4, "bridge_batch": 16,
              "bridge_weight_decay": 0.01, "checkpoint_every": 100},
    "metrics": {"tau_mc": 1.0, "tau_occ": 1.0, "n_points": 10000, "f1_frac": 0.01},
}

# keys that only affect sampling or scoring; changing them keeps trained artifacts valid
INFERENCE_KEYS = ("bridge.infer_steps", "bridge.deterministic", "metrics")

SEED_ENV = "BRIDGEKIT_SEED"


class ConfigError(ValueError):
    """Invalid, unknown or inconsistent configuration values."""


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in over.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where!r} must be an object")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = _coerce(base[key], value, where)
    return out


def _coerce(default, value, where):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, list):
        ok = isinstance(value, list)
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigError(f"{where!r} expects {type(default).__name__}, got {value!r}")
    return value


def parse_override(text: str) -> tuple[list[str], object]:
    """``"a.b=1"`` -> (["a", "b"], 1); values are JSON, falling back to strings."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def apply_overrides(cfg: dict, overrides) -> dict:
    nested: dict = {}
    for text in overrides or ():
        keys, value = parse_override(text)
        node = nested
        for k in keys[:-1]:
            node = node.setdefault(k, {})
        node[keys[-1]] = value
    return _merge(cfg, nested)


def validate(cfg: dict) -> None:
    """Check cross-block consistency by building every component config."""
    g, q = cfg["grid"], cfg["vqvae"]
    if g["n_pairs"] < 1:
        raise ConfigError("grid.n_pairs must be at least 1")
    if g["dims"] != q["D"]:
        raise ConfigError("grid.dims must equal vqvae.D")
    if not 1 <= g["n_cameras"] <= 6:
        raise ConfigError("grid.n_cameras must be between 1 and 6")
    if cfg["views"]["patch"] < 1:
        raise ConfigError("views.patch must be positive")
    if not 0 < g["keep_fraction_bound"] <= 1 or g["truncation"] <= 0:
        raise ConfigError("grid.keep_fraction_bound must lie in (0, 1] and truncation be positive")
    bad = [n for n in q["views"] if n not in VIEW_AXES]
    if bad or not q["views"]:
        raise ConfigError(f"unknown or missing views: {bad}")
    t = cfg["train"]
    for key in ("vq_stage1_steps", "vq_stage2_steps", "bridge_steps", "vq_batch", "bridge_batch",
                "checkpoint_every"):
        if t[key] < 1:
            raise ConfigError(f"train.{key} must be positive")
    b = cfg["bridge"]
    if b["noise_scale"] < 0 or not 1 <= b["infer_steps"] <= b["T"]:
        raise ConfigError("bridge.noise_scale must be >= 0 and 1 <= infer_steps <= T")
    m = cfg["metrics"]
    if m["tau_occ"] <= 0 or m["n_points"] < 1 or m["f1_frac"] <= 0:
        raise ConfigError("metrics thresholds and point counts must be positive")
    try:
        vq_config(cfg)
        denoiser_config(cfg).validate(q["d"])
        make_schedule(b["T"], b["beta_max"], b["beta_min"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def vq_config(cfg: dict) -> VQConfig:
    q = cfg["vqvae"]
    return VQConfig(D=q["D"], d=q["d"], C=q["C"], K=q["K"], beta_c=q["beta_c"], widths=tuple(q["widths"]),
                    truncation=cfg["grid"]["truncation"], fusion=q["fusion"]["enabled"], views=tuple(q["views"]),
                    patch=cfg["views"]["patch"], dead_code_steps=q["dead_code_steps"])


def denoiser_config(cfg: dict) -> DenoiserConfig:
    d = cfg["denoiser"]
    return DenoiserConfig(in_channels=cfg["vqvae"]["C"], base=d["base"], mults=tuple(d["mults"]),
                          time_dim=d["time_dim"], attention=d["attention"])


def schedule(cfg: dict):
    b = cfg["bridge"]
    return make_schedule(b["T"], b["beta_max"], b["beta_min"])


def load_config(path=None, overrides=(), env=None) -> dict:
    """Defaults <- config file <- ``BRIDGEKIT_SEED`` <- ``--set`` overrides, then validated."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            cfg = _merge(cfg, json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            cfg["seed"] = int(env[SEED_ENV])
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer") from exc
    cfg = apply_overrides(cfg, overrides)
    validate(cfg)
    return cfg


def canonical_json(cfg: dict) -> str:
    return json.dumps(cfg, sort_keys=True, separators=(",", ":"))


def fingerprint(cfg: dict) -> str:
    """sha256 of the canonical config with inference-only keys removed."""
    trimmed = copy.deepcopy(cfg)
    for key in INFERENCE_KEYS:
        *parents, leaf = key.split(".")
        node = trimmed
        for p in parents:
            node = node[p]
        node.pop(leaf, None)
    return hashlib.sha256(canonical_json(trimmed).encode()).hexdigest()
