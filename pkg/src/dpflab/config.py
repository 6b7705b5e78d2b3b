"""Experiment configuration: flat JSON with dotted key namespaces.

Unknown keys are rejected so hyperparameter typos fail loudly.  Epoch-based
knobs (learning-rate milestones, sparsity ramp) are converted to optimizer
steps here; the training core is step-indexed throughout.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from .data import Dataset, load_idx, make_blobs, make_spirals
from .nets import MLPModel, init_model, make_mlp_specs
from .pruning import SparsitySchedule
from .training import ConstantLR, LRSchedule, StepDecayLR, Strategy, TrainConfig, steps_per_epoch


class ConfigError(ValueError):
    """Malformed or inconsistent experiment configuration."""


# key -> (default, type); None default means nullable (required keys listed separately).
_SCHEMA: dict[str, tuple[Any, type]] = {
    "run_id": (None, str),
    "dataset.kind": ("blobs", str),
    "dataset.classes": (4, int),
    "dataset.dim": (20, int),
    "dataset.n": (1000, int),
    "dataset.noise": (0.15, float),
    "dataset.seed": (1, int),
    "dataset.train_images": (None, str),
    "dataset.train_labels": (None, str),
    "dataset.test_images": (None, str),
    "dataset.test_labels": (None, str),
    "model.hidden": ([64, 64], list),
    "train.strategy": ("dpf", str),
    "train.saliency": ("magnitude", str),
    "train.monotone": (False, bool),
    "train.epochs": (40, int),
    "train.batch_size": (64, int),
    "train.momentum": (0.9, float),
    "train.weight_decay": (0.0, float),
    "train.reparam_period": (16, int),
    "train.scope": ("global", str),
    "train.seed": (0, int),
    "train.finetune_epochs": (0, int),
    "train.finetune_lr": (None, float),
    "lr.kind": ("step_decay", str),
    "lr.gamma": (0.1, float),
    "lr.milestones_frac": ([0.5, 0.75], list),
    "lr.factor": (10.0, float),
    "sparsity.initial": (0.0, float),
    "sparsity.final": (0.9, float),
    "sparsity.start_epoch": (0, int),
    "sparsity.ramp_epochs": (None, int),
    "eval_every": (1, int),
    "checkpoint_every": (0, int),
}

_NULLABLE = {
    "run_id",
    "dataset.train_images",
    "dataset.train_labels",
    "dataset.test_images",
    "dataset.test_labels",
    "train.finetune_lr",
    "sparsity.ramp_epochs",
}


@dataclass
class ExperimentConfig:
    values: dict[str, Any]

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def __eq__(self, other: object) -> bool:
        return isinstance(other, ExperimentConfig) and self.values == other.values


def _coerce(key: str, value: Any, expected: type) -> Any:
    if value is None:
        if key in _NULLABLE:
            return None
        raise ConfigError(f"{key}: null is not allowed")
    if expected is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return value
    if expected is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if expected is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if expected is list:
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return list(value)
    if not isinstance(value, expected):
        raise ConfigError(f"{key}: expected {expected.__name__}, got {value!r}")
    return value


def parse_config(raw: dict[str, Any]) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object with flat dotted keys")
    unknown = sorted(set(raw) - set(_SCHEMA))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    values: dict[str, Any] = {}
    for key, (default, expected) in _SCHEMA.items():
        if key in raw:
            values[key] = _coerce(key, raw[key], expected)
        else:
            values[key] = default
    _validate(values)
    return ExperimentConfig(_resolve(values))


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return parse_config(raw)


def _validate(v: dict[str, Any]) -> None:
    if v["dataset.kind"] not in ("blobs", "spirals", "idx"):
        raise ConfigError(f"dataset.kind: unknown kind {v['dataset.kind']!r}")
    if v["dataset.kind"] == "idx" and (v["dataset.train_images"] is None or v["dataset.train_labels"] is None):
        raise ConfigError("idx datasets need dataset.train_images and dataset.train_labels")
    if not all(isinstance(h, int) and h >= 1 for h in v["model.hidden"]):
        raise ConfigError("model.hidden must be a list of positive integers")
    if v["lr.kind"] not in ("constant", "step_decay"):
        raise ConfigError(f"lr.kind: unknown kind {v['lr.kind']!r}")
    if not all(isinstance(m, (int, float)) and 0 < m < 1 for m in v["lr.milestones_frac"]):
        raise ConfigError("lr.milestones_frac entries must lie in (0, 1)")
    if not (0.0 <= v["sparsity.initial"] <= v["sparsity.final"] <= 1.0):
        raise ConfigError("need 0 <= sparsity.initial <= sparsity.final <= 1")
    if v["train.epochs"] < 1 or v["train.batch_size"] < 1:
        raise ConfigError("train.epochs and train.batch_size must be >= 1")
    if v["train.reparam_period"] < 1:
        raise ConfigError("train.reparam_period must be >= 1")
    if v["eval_every"] < 1 or v["checkpoint_every"] < 0:
        raise ConfigError("eval_every must be >= 1 and checkpoint_every >= 0")


def _resolve(v: dict[str, Any]) -> dict[str, Any]:
    out = dict(v)
    if out["run_id"] is None:
        out["run_id"] = f"{out['train.strategy']}-seed{out['train.seed']}"
    if out["sparsity.ramp_epochs"] is None:
        # Default ramp: from the start epoch to the second learning-rate drop.
        fracs = sorted(out["lr.milestones_frac"])
        end_frac = fracs[1] if len(fracs) >= 2 else 0.75
        ramp = max(1, int(round(end_frac * out["train.epochs"])) - out["sparsity.start_epoch"])
        out["sparsity.ramp_epochs"] = ramp
    return out


def canonical_json(cfg: ExperimentConfig) -> str:
    return json.dumps(cfg.values, sort_keys=True, indent=1) + "\n"


def build_dataset(cfg: ExperimentConfig) -> Dataset:
    kind = cfg["dataset.kind"]
    if kind == "blobs":
        return make_blobs(cfg["dataset.classes"], cfg["dataset.dim"], cfg["dataset.n"],
                          cfg["dataset.noise"], cfg["dataset.seed"])
    if kind == "spirals":
        return make_spirals(cfg["dataset.classes"], cfg["dataset.n"], cfg["dataset.noise"],
                            cfg["dataset.seed"])
    return load_idx(cfg["dataset.train_images"], cfg["dataset.train_labels"],
                    cfg["dataset.test_images"], cfg["dataset.test_labels"])


def build_model(cfg: ExperimentConfig, data: Dataset) -> MLPModel:
    dims = [data.dim, *cfg["model.hidden"], data.num_classes]
    return init_model(make_mlp_specs(dims), cfg["train.seed"])


def _lr_schedule(cfg: ExperimentConfig, total_steps: int) -> LRSchedule:
    if cfg["lr.kind"] == "constant":
        return ConstantLR(cfg["lr.gamma"])
    milestones = tuple(int(math.floor(f * total_steps)) for f in cfg["lr.milestones_frac"])
    return StepDecayLR(cfg["lr.gamma"], milestones, cfg["lr.factor"])


def build_train_config(cfg: ExperimentConfig, data: Dataset, seed_override: int | None = None) -> TrainConfig:
    spe = steps_per_epoch(data.n_train, cfg["train.batch_size"])
    total_steps = spe * cfg["train.epochs"]
    schedule = SparsitySchedule(
        s_i=cfg["sparsity.initial"],
        s_f=cfg["sparsity.final"],
        t_0=cfg["sparsity.start_epoch"] * spe,
        ramp_steps=max(1, cfg["sparsity.ramp_epochs"] * spe),
        update_every=cfg["train.reparam_period"],
    )
    strategy = Strategy(cfg["train.strategy"], cfg["train.saliency"], cfg["train.monotone"])
    return TrainConfig(
        strategy=strategy,
        lr=_lr_schedule(cfg, total_steps),
        momentum=cfg["train.momentum"],
        weight_decay=cfg["train.weight_decay"],
        batch_size=cfg["train.batch_size"],
        epochs=cfg["train.epochs"],
        reparam_period=cfg["train.reparam_period"],
        schedule=schedule,
        scope=cfg["train.scope"],
        seed=cfg["train.seed"] if seed_override is None else seed_override,
        finetune_epochs=cfg["train.finetune_epochs"],
        finetune_lr=cfg["train.finetune_lr"],
        eval_every=cfg["eval_every"],
    )
