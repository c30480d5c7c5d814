"""Run configuration: a flat key = value text format, strict per-mode validation.

Every field has one canonical spelling shared by config files and CLI flags.
A mode only accepts its own fields on top of the common ones; anything else
is rejected before any compute, as are malformed values (negative lambda,
budget at or above 100, unknown enums).
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields

MODES = ("single_task", "mtl", "mtl_fixed_sparsity", "meta_baseline",
         "meta_sparsity", "baseline_schedule")
SPARSITY_MODES = ("structured", "unstructured")
SCHEDULES = ("one_shot", "iterative", "progressive", "sparse_training")
MASK_STRATEGIES = ("magnitude_groups", "random_groups", "meta_mask")


class ConfigError(ValueError):
    """The run configuration is malformed for its mode."""


def _int_tuple(text: str) -> tuple[int, ...]:
    return tuple(int(part) for part in str(text).split(",") if part.strip() != "")


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    if str(text).lower() in ("true", "1", "yes"):
        return True
    if str(text).lower() in ("false", "0", "no"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


@dataclass
class RunConfig:
    mode: str = "mtl"
    sparsity_mode: str = "structured"
    seeds: tuple[int, ...] = (0,)
    # dataset
    n_tasks: int = 4
    n_samples: int = 2000
    image_channels: int = 8
    image_size: int = 8
    channel_budget: int = 4
    relatedness: float = 0.5
    noise_std: float = 0.2
    n_classification: int = 1
    data_seed: int = 0
    # model
    backbone_channels: tuple[int, ...] = (8, 8, 8)
    residual: bool = True
    # optimization (appendix defaults)
    epochs: int = 150
    batch_size: int = 16
    head_lr: float = 1e-4
    backbone_lr: float = 1e-5
    patience: int = 15
    # single_task / mtl_fixed_sparsity
    lambda_fixed: float | None = None
    task_index: int | None = None
    # meta modes
    meta_epochs: int | None = None
    inner_steps: int | None = None
    alpha_in: float | None = None
    alpha_out_backbone: float | None = None
    alpha_out_head: float | None = None
    alpha_out_lambda: float | None = None
    sparsity_patience: int | None = None
    regrow_prob: float | None = None
    lambda_init_low: float | None = None
    lambda_init_high: float | None = None
    holdout_tasks: int | None = None
    # baseline_schedule
    schedule: str | None = None
    mask_strategy: str | None = None
    budget: float | None = None
    prune_steps: int | None = None
    dense_checkpoint: str | None = None
    meta_checkpoint: str | None = None


_COMMON = {
    "mode", "sparsity_mode", "seeds", "n_tasks", "n_samples", "image_channels",
    "image_size", "channel_budget", "relatedness", "noise_std", "n_classification",
    "data_seed", "backbone_channels", "residual", "epochs", "batch_size",
    "head_lr", "backbone_lr", "patience",
}

_META_COMMON = {"meta_epochs", "inner_steps", "alpha_in", "alpha_out_backbone",
                "alpha_out_head", "sparsity_patience", "holdout_tasks"}

# fields a mode may set beyond the common block
MODE_FIELDS: dict[str, set[str]] = {
    "single_task": {"lambda_fixed", "task_index"},
    "mtl": set(),
    "mtl_fixed_sparsity": {"lambda_fixed"},
    "meta_baseline": set(_META_COMMON),
    "meta_sparsity": _META_COMMON | {"alpha_out_lambda", "regrow_prob",
                                     "lambda_init_low", "lambda_init_high"},
    "baseline_schedule": {"schedule", "mask_strategy", "budget", "prune_steps",
                          "dense_checkpoint", "meta_checkpoint"},
}

# defaults for mode-specific fields, applied only when the mode allows them
MODE_DEFAULTS: dict[str, object] = {
    "lambda_fixed": 0.0,
    "task_index": 0,
    "meta_epochs": 400,
    "inner_steps": 1,
    "alpha_in": 1e-4,
    "alpha_out_backbone": 5e-3,
    "alpha_out_head": 5e-3,
    "alpha_out_lambda": 2e-4,
    "sparsity_patience": 30,
    "regrow_prob": 0.0,
    "lambda_init_low": 0.1,
    "lambda_init_high": 1.0,
    "holdout_tasks": 0,
    "prune_steps": 1,
}

_PARSERS = {
    "seeds": _int_tuple,
    "backbone_channels": _int_tuple,
    "residual": _bool,
}


def _parse_value(name: str, raw: str):
    if name in _PARSERS:
        return _PARSERS[name](raw)
    kind = {f.name: f.type for f in fields(RunConfig)}[name]
    if kind.startswith("int"):
        return int(raw)
    if kind.startswith("float"):
        return float(raw)
    if kind.startswith("str") or kind == "str | None":
        return str(raw)
    return raw


def parse_config(text: str, overrides: dict[str, str] | None = None) -> RunConfig:
    """Parse the key = value format; overrides (e.g. CLI flags) win over file values."""
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = raw
    if overrides:
        values.update({k: str(v) for k, v in overrides.items()})

    known = {f.name for f in fields(RunConfig)}
    config = RunConfig()
    for key, raw in values.items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            setattr(config, key, _parse_value(key, raw))
        except (TypeError, ValueError) as err:
            raise ConfigError(f"bad value for {key!r}: {err}") from err
    validate(config)
    return config


def serialize(config: RunConfig) -> str:
    """Canonical text form; parse(serialize(c)) == c."""
    lines = []
    for f in sorted(fields(RunConfig), key=lambda f: f.name):
        value = getattr(config, f.name)
        if value is None:
            continue
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


def config_hash(config: RunConfig) -> str:
    return hashlib.sha256(serialize(config).encode()).hexdigest()[:12]


def validate(config: RunConfig) -> None:
    if config.mode not in MODES:
        raise ConfigError(f"unknown mode {config.mode!r}")
    if config.sparsity_mode not in SPARSITY_MODES:
        raise ConfigError(f"unknown sparsity_mode {config.sparsity_mode!r}")
    if not config.seeds:
        raise ConfigError("seeds must list at least one seed")

    allowed = _COMMON | MODE_FIELDS[config.mode]
    for f in fields(RunConfig):
        value = getattr(config, f.name)
        if f.name in _COMMON:
            continue
        if value is not None and f.name not in allowed:
            raise ConfigError(f"field {f.name!r} does not apply to mode {config.mode!r}")
        if value is None and f.name in allowed and f.name in MODE_DEFAULTS:
            setattr(config, f.name, MODE_DEFAULTS[f.name])

    if config.lambda_fixed is not None and config.lambda_fixed < 0:
        raise ConfigError(f"lambda_fixed must be >= 0, got {config.lambda_fixed}")
    if config.mode == "single_task" and not 0 <= config.task_index < config.n_tasks:
        raise ConfigError(f"task_index {config.task_index} outside [0, {config.n_tasks})")
    if config.residual and config.backbone_channels[0] != config.backbone_channels[-1]:
        raise ConfigError(
            f"residual backbone needs matching first/last channels, got {config.backbone_channels}"
        )
    if config.mode in ("meta_baseline", "meta_sparsity"):
        if not 0 <= config.holdout_tasks < config.n_tasks:
            raise ConfigError(f"holdout_tasks {config.holdout_tasks} leaves no meta-training tasks")
        if config.mode == "meta_sparsity":
            if not 0 <= config.regrow_prob < 1:
                raise ConfigError(f"regrow_prob must be in [0, 1), got {config.regrow_prob}")
            if not 0 < config.lambda_init_low <= config.lambda_init_high:
                raise ConfigError("lambda_init bounds must satisfy 0 < low <= high")
    if config.mode == "baseline_schedule":
        if config.schedule not in SCHEDULES:
            raise ConfigError(f"unknown schedule {config.schedule!r}")
        if config.mask_strategy not in MASK_STRATEGIES:
            raise ConfigError(f"unknown mask_strategy {config.mask_strategy!r}")
        if config.mask_strategy == "meta_mask":
            if config.meta_checkpoint is None:
                raise ConfigError("mask_strategy meta_mask needs meta_checkpoint")
            if config.budget is not None:
                raise ConfigError("meta_mask carries its own pattern; budget does not apply")
        else:
            if config.budget is None:
                raise ConfigError(f"schedule {config.schedule} needs a budget")
            if not 0 <= config.budget < 100:
                raise ConfigError(f"budget must be in [0, 100), got {config.budget}")
            if config.meta_checkpoint is not None:
                raise ConfigError("meta_checkpoint only applies to mask_strategy meta_mask")
        if config.schedule in ("one_shot", "sparse_training") and config.prune_steps not in (None, 1):
            raise ConfigError(f"prune_steps does not apply to schedule {config.schedule}")
        if config.prune_steps is not None and config.prune_steps < 1:
            raise ConfigError(f"prune_steps must be >= 1, got {config.prune_steps}")
        if config.schedule in ("one_shot", "iterative") and config.dense_checkpoint is None:
            raise ConfigError(f"schedule {config.schedule} starts from a trained dense checkpoint")
        if config.schedule in ("progressive", "sparse_training") and config.dense_checkpoint is not None:
            raise ConfigError(f"schedule {config.schedule} starts from random init")
