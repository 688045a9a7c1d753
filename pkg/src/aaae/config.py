"""Run configuration: YAML files merged over preset defaults."""

from __future__ import annotations

import copy
import hashlib
import json
import platform
import sys
from pathlib import Path

import numpy as np
import torch
import yaml

from aaae import __version__
from aaae.data import DatasetSpec, resolve_path
from aaae.errors import ConfigurationError
from aaae.model import ModelSpec, image_spec, vector_spec
from aaae.trainer import TrainConfig

IMAGE_KEYS = {"resolution", "channels", "code_dim", "noise_dim", "base_width", "max_width", "latent_width", "init"}
VECTOR_KEYS = {"data_dim", "code_dim", "noise_dim", "hidden", "depth", "init"}
PRESET_ARGS = {
    "mnist-32": (image_spec, {"resolution": 32, "channels": 3}),
    "generic-64": (image_spec, {"resolution": 64, "channels": 3}),
    "ring-2d": (vector_spec, {}),
}


def defaults() -> dict:
    return {
        "dataset": {"kind": "idx-archive", "path": "mnist", "split": "train"},
        "test_dataset": None,
        "model": {"preset": "mnist-32"},
        "train": TrainConfig().to_dict(),
        "eval": {"n_samples": 10_000, "splits": 10, "grid": 64, "metrics": ["mse"]},
        "out": "runs/default",
        "extractor": None,
    }


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (override or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def set_path(cfg: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        if node.get(k) is None:
            node[k] = {}
        node = node[k]
    node[keys[-1]] = value


def get_path(cfg: dict, dotted: str):
    node = cfg
    for k in dotted.split("."):
        node = node[k]
    return node


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Preset defaults < config file < ``overrides`` (dotted keys)."""
    cfg = defaults()
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                user = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigurationError(f"{path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"{path}: invalid YAML: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigurationError(f"{path}: top level must be a mapping")
        unknown = set(user) - set(cfg)
        if unknown:
            raise ConfigurationError(f"{path}: unknown sections {sorted(unknown)}")
        cfg = deep_merge(cfg, user)
    for k, v in (overrides or {}).items():
        if v is not None:
            set_path(cfg, k, v)
    return cfg


def model_spec(cfg: dict) -> ModelSpec:
    m = cfg["model"]
    if "spec" in m:
        return ModelSpec.from_dict(m["spec"])
    name = m.get("preset", "mnist-32")
    if name not in PRESET_ARGS:
        raise ConfigurationError(f"unknown preset {name!r}")
    fn, base = PRESET_ARGS[name]
    allowed = IMAGE_KEYS if fn is image_spec else VECTOR_KEYS
    extra = {k: v for k, v in m.items() if k != "preset"}
    bad = set(extra) - allowed
    if bad:
        raise ConfigurationError(f"model overrides {sorted(bad)} not valid for preset {name!r}")
    return fn(**{**base, **extra, "name": name})


def train_config(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig.from_dict(cfg["train"])
    except TypeError as exc:
        raise ConfigurationError(f"train section: {exc}") from exc


def dataset_spec(section: dict | None) -> DatasetSpec | None:
    if section is None:
        return None
    try:
        return DatasetSpec(**section)
    except TypeError as exc:
        raise ConfigurationError(f"dataset section: {exc}") from exc


def validate_paths(cfg: dict, sections=("dataset", "test_dataset")) -> None:
    """Check referenced files exist; ``sections`` names the dataset sections in use."""
    for key in ("extractor", "checkpoint"):
        p = cfg.get(key)
        if p is not None and not Path(p).exists():
            raise ConfigurationError(f"{key} path does not exist: {p}")
    for key in sections:
        sec = cfg.get(key)
        if sec and sec.get("kind") != "synthetic-ring" and not resolve_path(sec["path"]).exists():
            raise ConfigurationError(f"{key} path does not exist: {resolve_path(sec['path'])}")


def environment() -> dict:
    env = {
        "python": sys.version.split()[0],
        "platform": platform.platform(),
        "torch": torch.__version__,
        "numpy": np.__version__,
        "aaae": __version__,
        "torch_threads": torch.get_num_threads(),
    }
    env["digest"] = hashlib.sha256(json.dumps(env, sort_keys=True).encode()).hexdigest()[:16]
    return env


def write_run_files(cfg: dict, out: Path, command: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.yaml", "w", encoding="utf-8") as fh:
        yaml.safe_dump(cfg, fh, sort_keys=True)
    meta = {"command": command, "seed": cfg["train"]["seed"], "environment": environment(),
            "resize_filter": "bilinear", "adam_beta2": cfg["train"]["adam_beta2"]}
    with open(out / "run.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
