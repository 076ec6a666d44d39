"""Run configuration documents: a versioned JSON schema that fully specifies
a run, with unknown keys rejected and a content hash recorded in manifests."""

from __future__ import annotations

import hashlib
import json
import platform
import sys
import time
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .model import ModelConfig
from .optim import OptimizerConfig, ScheduleConfig
from .presets import get_preset
from .train import TrainPlan

SCHEMA_VERSION = 1

_MODEL_KEYS = {
    "n_layers", "d_model", "n_heads", "d_head", "d_ff", "vocab_size",
    "context_window", "tie_embeddings",
}
_OPT_KEYS = {"peak_lr", "beta1", "beta2", "eps", "weight_decay", "clip_global_norm"}
_SCHED_KEYS = {"total_tokens", "peak_lr", "warmup_tokens", "final_lr_fraction", "shape"}
_TRAIN_KEYS = {
    "phase", "batch_size", "seed", "token_budget", "epochs", "densify_on_finetune",
    "eval_every", "patience",
}
_SPARSITY_KEYS = {"mode", "level"}
_PATH_KEYS = {"dataset", "vocab", "out_dir", "checkpoint", "task"}
_TOP_KEYS = {
    "schema_version", "preset", "model", "optimizer", "schedule", "train",
    "sparsity", "paths",
}


def _check_keys(d: dict, allowed: set, where: str) -> None:
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def load_run_config(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        cfg = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
    validate_run_config(cfg)
    return cfg


def validate_run_config(cfg: dict) -> None:
    if not isinstance(cfg, dict):
        raise ConfigError("config document must be a JSON object")
    _check_keys(cfg, _TOP_KEYS, "config")
    if cfg.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}")
    for section, keys in (
        ("model", _MODEL_KEYS),
        ("optimizer", _OPT_KEYS),
        ("schedule", _SCHED_KEYS),
        ("train", _TRAIN_KEYS),
        ("paths", _PATH_KEYS),
    ):
        if section in cfg:
            if not isinstance(cfg[section], dict):
                raise ConfigError(f"{section} must be an object")
            _check_keys(cfg[section], keys, section)
    if cfg.get("sparsity") is not None:
        _check_keys(cfg["sparsity"], _SPARSITY_KEYS, "sparsity")


def build_plan(cfg: dict) -> TrainPlan:
    """Materialize a TrainPlan from a validated config document; the optional
    preset provides defaults that explicit sections override."""
    base: dict = {}
    if "preset" in cfg:
        p = get_preset(cfg["preset"])
        base = {
            "model": p.model.to_dict(),
            "optimizer": {"peak_lr": p.peak_lr},
            "schedule": {
                "total_tokens": p.training_tokens,
                "peak_lr": p.peak_lr,
                "warmup_tokens": p.warmup_tokens,
            },
            "train": {"batch_size": p.batch_size, "token_budget": p.training_tokens},
        }
    merged = {}
    for section in ("model", "optimizer", "schedule", "train"):
        merged[section] = {**base.get(section, {}), **cfg.get(section, {})}
    train = merged["train"]
    phase = train.get("phase", "pretrain")
    sparsity = cfg.get("sparsity")
    level = None
    if sparsity is not None:
        if sparsity.get("mode", "uniform") != "uniform":
            raise ConfigError("only uniform sparsity plans are supported in configs")
        level = float(sparsity["level"])
    model = ModelConfig.from_dict(merged["model"])
    optimizer = OptimizerConfig(**merged["optimizer"])
    sched_kwargs = dict(merged["schedule"])
    sched_kwargs.setdefault("peak_lr", optimizer.peak_lr)
    if phase == "finetune":
        sched_kwargs.setdefault("total_tokens", 1.0)
        sched_kwargs.setdefault("warmup_tokens", 0.0)
        sched_kwargs.setdefault("final_lr_fraction", 0.0)
        sched_kwargs.setdefault("shape", "linear")
    schedule = ScheduleConfig(**sched_kwargs)
    return TrainPlan(
        phase=phase,
        model=model,
        optimizer=optimizer,
        schedule=schedule,
        batch_size=int(train.get("batch_size", 16)),
        seed=int(train.get("seed", 0)),
        token_budget=float(train.get("token_budget", 0.0)),
        epochs=int(train.get("epochs", 5)),
        sparsity_level=level,
        densify_on_finetune=bool(train.get("densify_on_finetune", True)),
        eval_every=int(train.get("eval_every", 50)),
        patience=int(train.get("patience", 1)),
    )


def write_manifest(out_dir: str | Path, cfg: dict, argv: list[str] | None = None) -> Path:
    """Record everything needed to re-derive a run's outputs."""
    from . import __version__

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "config": cfg,
        "config_hash": config_hash(cfg),
        "seed": cfg.get("train", {}).get("seed"),
        "argv": argv,
        "versions": {
            "spdflab": __version__,
            "numpy": np.__version__,
            "python": sys.version.split()[0],
            "platform": platform.platform(),
        },
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path
