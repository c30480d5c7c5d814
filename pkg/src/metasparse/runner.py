"""Run orchestration: execute a config over its seed list and persist artifacts.

Each run writes to ``<out>/<config-hash>/seed<k>/`` (checkpoint, profile CSV,
record JSON) plus an aggregated ``summary.json`` with mean and standard
deviation across seeds. Output directories are content-addressed by config
hash and seed and never overwritten.
"""
from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, config_hash, serialize
from .meta import (MetaConfig, MetaState, enumerate_episodes, meta_test, meta_train,
                   sample_lambda_raw)
from .models import build_model
from .schedules import (ScheduleResult, schedule_iterative, schedule_one_shot,
                        schedule_progressive, schedule_sparse_training)
from .sparsity import mask_from_current_zeros, measure
from .synth import SplitDataset, generate
from .training import TrainConfig, evaluate, mtl_train

PROFILE_SCHEMA = "# metasparse-profile v1"


@dataclass
class RunRecord:
    config_hash: str
    seed: int
    mode: str
    test_losses: dict[str, float]
    parameter_sparsity: float
    group_sparsity: float
    compression_ratio: float
    speed_up: float
    epochs_run: int
    wall_clock_seconds: float
    achieved_budget: float | None = None
    lambda_final: float | None = None
    history: list[dict] = field(default_factory=list)


def make_dataset(config: RunConfig) -> SplitDataset:
    _, dataset = generate(
        n_tasks=config.n_tasks, n_samples=config.n_samples,
        image_shape=(config.image_channels, config.image_size, config.image_size),
        channel_budget=config.channel_budget, seed=config.data_seed,
        relatedness=config.relatedness, noise_std=config.noise_std,
        n_classification=config.n_classification,
    )
    return dataset


def make_model(config: RunConfig, dataset: SplitDataset, seed: int):
    rng = np.random.default_rng(seed)
    kinds = {tid: dataset.task_specs[tid].kind for tid in dataset.task_ids}
    model = build_model(kinds, in_channels=config.image_channels,
                        channels=list(config.backbone_channels), residual=config.residual,
                        sparsity_mode=config.sparsity_mode, rng=rng)
    return model, rng


def train_config(config: RunConfig) -> TrainConfig:
    return TrainConfig(epochs=config.epochs, batch_size=config.batch_size,
                       head_lr=config.head_lr, backbone_lr=config.backbone_lr,
                       patience=config.patience,
                       lambda_fixed=config.lambda_fixed or 0.0)


def _meta_state(config: RunConfig, model, rng) -> MetaState:
    learnable = config.mode == "meta_sparsity"
    return MetaState(
        model=model,
        lambda_raw=sample_lambda_raw(rng, low=config.lambda_init_low,
                                     high=config.lambda_init_high) if learnable else None,
        inner_steps=config.inner_steps,
        alpha_in=config.alpha_in,
        alpha_out_backbone=config.alpha_out_backbone,
        alpha_out_head=config.alpha_out_head,
        alpha_out_lambda=config.alpha_out_lambda if learnable else 0.0,
        regrow_prob=config.regrow_prob if learnable else 0.0,
    )


def run_one(config: RunConfig, dataset: SplitDataset, seed: int, out_dir: Path) -> RunRecord:
    """Execute one seed of the configured mode and persist its artifacts."""
    started = time.perf_counter()
    chash = config_hash(config)
    model, rng = make_model(config, dataset, seed)
    tc = train_config(config)
    task_ids = dataset.task_ids
    profile_rows: list[dict] = []
    achieved_budget = None
    lambda_final = None
    masks = None

    if config.mode in ("single_task", "mtl", "mtl_fixed_sparsity"):
        if config.mode == "single_task":
            task_ids = [dataset.task_ids[config.task_index]]
        if config.mode == "mtl":
            tc.lambda_fixed = 0.0
        result = mtl_train(model, task_ids, dataset, tc, rng)
        profile_rows = result.history
        test_losses = evaluate(model, task_ids, dataset)
        epochs_run = result.epochs_run

    elif config.mode in ("meta_baseline", "meta_sparsity"):
        meta_ids = task_ids[:len(task_ids) - config.holdout_tasks]
        state = _meta_state(config, model, rng)
        episodes = enumerate_episodes(meta_ids)
        meta_result = meta_train(state, episodes, dataset,
                                 MetaConfig(epochs=config.meta_epochs,
                                            batch_size=config.batch_size,
                                            patience=config.patience,
                                            sparsity_patience=config.sparsity_patience),
                                 rng)
        profile_rows = meta_result.history
        lambda_final = state.lambda_eff if config.mode == "meta_sparsity" else None
        masks = mask_from_current_zeros(model.governed_values())
        save_checkpoint(out_dir / "meta_checkpoint.npz",
                        {pid: p.data for pid, p in model.param_dict().items()},
                        masks=masks, lambda_raw=state.lambda_raw,
                        rng_state=rng.bit_generator.state, config_hash=chash,
                        profile=state.profile)
        _, test_losses, _ = meta_test(state, "same_tasks", dataset, tc, rng, meta_ids)
        task_ids = meta_ids
        epochs_run = meta_result.epochs_run

    elif config.mode == "baseline_schedule":
        if config.dense_checkpoint is not None:
            start = load_checkpoint(config.dense_checkpoint)
            _load_params(model, start.params)
        meta_masks = None
        if config.mask_strategy == "meta_mask":
            meta_masks = load_checkpoint(config.meta_checkpoint).masks
        sched = _run_schedule(config, model, task_ids, dataset, tc, rng, meta_masks)
        profile_rows = sched.train.history
        test_losses = sched.test_losses
        achieved_budget = sched.achieved_budget
        masks = sched.masks
        epochs_run = sched.train.epochs_run
    else:
        raise ConfigError(f"unknown mode {config.mode!r}")

    metrics = measure(model.partitions, model.governed_values(),
                      model.flop_specs((config.image_size, config.image_size)),
                      mode=config.sparsity_mode)
    record = RunRecord(
        config_hash=chash, seed=seed, mode=config.mode, test_losses=test_losses,
        parameter_sparsity=metrics.parameter_sparsity_percent,
        group_sparsity=metrics.group_sparsity_percent,
        compression_ratio=metrics.compression_ratio, speed_up=metrics.speed_up,
        epochs_run=epochs_run, wall_clock_seconds=time.perf_counter() - started,
        achieved_budget=achieved_budget, lambda_final=lambda_final,
        history=profile_rows,
    )
    _persist_record(record, model, masks, rng, out_dir)
    return record


def _run_schedule(config, model, task_ids, dataset, tc, rng, meta_masks) -> ScheduleResult:
    common = dict(strategy=config.mask_strategy, budget=config.budget, rng=rng,
                  meta_masks=meta_masks)
    if config.schedule == "one_shot":
        return schedule_one_shot(model, task_ids, dataset, tc, **common)
    if config.schedule == "iterative":
        return schedule_iterative(model, task_ids, dataset, tc, steps=config.prune_steps, **common)
    if config.schedule == "progressive":
        return schedule_progressive(model, task_ids, dataset, tc, steps=config.prune_steps, **common)
    return schedule_sparse_training(model, task_ids, dataset, tc, **common)


def _load_params(model, params: dict[str, np.ndarray]) -> None:
    own = model.param_dict()
    for pid, tensor in own.items():
        if pid not in params:
            raise ConfigError(f"checkpoint is missing parameter {pid!r}")
        if params[pid].shape != tensor.data.shape:
            raise ConfigError(f"checkpoint parameter {pid!r} has shape {params[pid].shape}, "
                              f"expected {tensor.data.shape}")
        tensor.data[...] = params[pid]


def _persist_record(record: RunRecord, model, masks, rng, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out_dir / "checkpoint.npz",
                    {pid: p.data for pid, p in model.param_dict().items()},
                    masks=masks or {}, rng_state=rng.bit_generator.state,
                    config_hash=record.config_hash)
    with open(out_dir / "profile.csv", "w", newline="") as fh:
        fh.write(PROFILE_SCHEMA + "\n")
        if record.history:
            writer = csv.DictWriter(fh, fieldnames=list(record.history[0]))
            writer.writeheader()
            writer.writerows(record.history)
    payload = {k: v for k, v in record.__dict__.items() if k != "history"}
    (out_dir / "record.json").write_text(json.dumps(payload, indent=1, sort_keys=True))


def _mean_std(values) -> dict[str, float]:
    arr = np.asarray(values, dtype=np.float64)
    return {"mean": float(arr.mean()), "std": float(arr.std(ddof=0))}


def run(config: RunConfig, out_root: str | Path) -> dict:
    """Execute the config for every seed; returns and persists the summary."""
    chash = config_hash(config)
    run_dir = Path(out_root) / chash
    if run_dir.exists():
        raise ConfigError(f"output directory {run_dir} already exists; artifacts are never overwritten")
    started = time.perf_counter()
    dataset = make_dataset(config)
    records = [run_one(config, dataset, seed, run_dir / f"seed{seed}") for seed in config.seeds]

    task_ids = sorted({tid for r in records for tid in r.test_losses})
    summary = {
        "config_hash": chash,
        "mode": config.mode,
        "seeds": list(config.seeds),
        "tasks": task_ids,
        "per_task_test_loss": {
            tid: _mean_std([r.test_losses[tid] for r in records if tid in r.test_losses])
            for tid in task_ids
        },
        "parameter_sparsity": _mean_std([r.parameter_sparsity for r in records]),
        "group_sparsity": _mean_std([r.group_sparsity for r in records]),
        "compression_ratio": _mean_std([r.compression_ratio for r in records]),
        "speed_up": _mean_std([r.speed_up for r in records]),
        "wall_clock_seconds": time.perf_counter() - started,
    }
    if records[0].achieved_budget is not None:
        summary["achieved_budget"] = _mean_std([r.achieved_budget for r in records])
    if records[0].lambda_final is not None:
        summary["lambda_final"] = _mean_std([r.lambda_final for r in records])
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    (run_dir / "config.txt").write_text(serialize(config))
    return summary
