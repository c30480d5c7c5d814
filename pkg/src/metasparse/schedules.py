"""Classical sparsification schedules: one-shot, iterative, progressive, sparse training.

All four produce a mask over the governed backbone weights and train with
that mask enforced; they differ in where the parameters start (trained dense
vs random) and in whether the mask arrives at once or in increments. A stored
meta mask can replace the magnitude/random pattern in any schedule, in which
case the final pattern equals the stored one exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .models import MultiTaskModel
from .sparsity import apply_mask, build_mask, group_norms, sparsity_percent
from .synth import SplitDataset
from .training import TrainConfig, TrainResult, evaluate, finetune_masked


@dataclass
class ScheduleResult:
    train: TrainResult
    masks: dict[str, np.ndarray]
    achieved_budget: float
    test_losses: dict[str, float]


def _enforce(model: MultiTaskModel, masks: dict[str, np.ndarray]) -> None:
    for pid, p in model.backbone_weights().items():
        p.data[...] = apply_mask(p.data, masks[pid])


def _reveal_stages(model: MultiTaskModel, final_masks: dict[str, np.ndarray], steps: int,
                   order: list[tuple[str, int]]) -> list[dict[str, np.ndarray]]:
    """Cumulative masks introducing the final pattern's dead groups in ``order``;
    the last stage is the final pattern itself (entry-exact)."""
    stages = []
    for k in range(1, steps + 1):
        take = len(order) if k == steps else int(round(len(order) * k / steps))
        masks = {pid: np.ones_like(final_masks[pid]) for pid in final_masks}
        for pid, gi in order[:take]:
            masks[pid].ravel()[model.partitions[pid].groups[gi]] = False
        stages.append(masks)
    stages[-1] = {pid: final_masks[pid].copy() for pid in final_masks}
    return stages


def _dead_groups(model: MultiTaskModel, masks: dict[str, np.ndarray]) -> list[tuple[float, str, int]]:
    dead = []
    for pid, partition in model.partitions.items():
        mask_flat = masks[pid].ravel()
        norms = group_norms(model.backbone_weights()[pid].data, partition)
        for gi, idx in enumerate(partition.groups):
            if not mask_flat[idx].any():
                dead.append((norms[gi], pid, gi))
    return dead


def _stage_masks(model: MultiTaskModel, strategy: str, budget: float | None, steps: int,
                 rng: np.random.Generator,
                 meta_masks: dict[str, np.ndarray] | None) -> list[dict[str, np.ndarray]]:
    """Mask sequence for one schedule; every sequence ends at the full pattern.

    Iterated magnitude pruning re-ranks group norms each stage; random and
    meta patterns are fixed up front and revealed in increments so that the
    achieved sparsity does not depend on the number of steps.
    """
    if strategy == "meta_mask":
        if meta_masks is None:
            raise ValueError("meta_mask strategy needs stored meta masks")
        dead = sorted(_dead_groups(model, meta_masks))
        return _reveal_stages(model, meta_masks, steps, [(pid, gi) for _, pid, gi in dead])
    if strategy == "random_groups":
        final, _ = build_mask(model.governed_values(), model.partitions, strategy, budget, rng)
        dead = [(pid, gi) for _, pid, gi in _dead_groups(model, final)]
        order = [dead[i] for i in rng.permutation(len(dead))] if dead else []
        return _reveal_stages(model, final, steps, order)
    stages = []
    for k in range(1, steps + 1):
        masks, _ = build_mask(model.governed_values(), model.partitions, strategy,
                              budget * k / steps, rng)
        stages.append(masks)
    return stages


def schedule_one_shot(model: MultiTaskModel, task_ids, dataset: SplitDataset,
                      config: TrainConfig, strategy: str, budget: float | None,
                      rng: np.random.Generator,
                      meta_masks: dict[str, np.ndarray] | None = None) -> ScheduleResult:
    """Mask a trained dense model at the full budget, then fine-tune under the mask."""
    (masks,) = _stage_masks(model, strategy, budget, 1, rng, meta_masks)
    _enforce(model, masks)
    result = finetune_masked(model, masks, task_ids, dataset, config, rng)
    achieved = sparsity_percent(model.governed_values(), masks)
    return ScheduleResult(result, masks, achieved, evaluate(model, task_ids, dataset))


def schedule_iterative(model: MultiTaskModel, task_ids, dataset: SplitDataset,
                       config: TrainConfig, strategy: str, budget: float | None,
                       steps: int, rng: np.random.Generator,
                       meta_masks: dict[str, np.ndarray] | None = None) -> ScheduleResult:
    """Prune toward the budget in increments, fine-tuning to patience between prunes."""
    if steps < 1:
        raise ValueError(f"iterative schedule needs steps >= 1, got {steps}")
    if steps == 1:
        return schedule_one_shot(model, task_ids, dataset, config, strategy, budget,
                                 rng, meta_masks)
    result = TrainResult()
    masks = None
    for stage in _stage_masks(model, strategy, budget, steps, rng, meta_masks):
        masks = stage if masks is None else {pid: stage[pid] & masks[pid] for pid in stage}
        _enforce(model, masks)
        part = finetune_masked(model, masks, task_ids, dataset, config, rng)
        result.history.extend(part.history)
        result.epochs_run += part.epochs_run
        result.best_val = min(result.best_val, part.best_val)
    achieved = sparsity_percent(model.governed_values(), masks)
    return ScheduleResult(result, masks, achieved, evaluate(model, task_ids, dataset))


def schedule_progressive(model: MultiTaskModel, task_ids, dataset: SplitDataset,
                         config: TrainConfig, strategy: str, budget: float | None,
                         steps: int, rng: np.random.Generator,
                         meta_masks: dict[str, np.ndarray] | None = None) -> ScheduleResult:
    """Interleave pruning with ongoing training from random init: each stage trains a
    fixed slice of the epoch budget with no convergence wait between prune events."""
    if steps < 1:
        raise ValueError(f"progressive schedule needs steps >= 1, got {steps}")
    stage_epochs = max(1, config.epochs // steps)
    stage_config = replace(config, epochs=stage_epochs, patience=stage_epochs)
    result = TrainResult()
    masks = None
    for stage in _stage_masks(model, strategy, budget, steps, rng, meta_masks):
        masks = stage if masks is None else {pid: stage[pid] & masks[pid] for pid in stage}
        _enforce(model, masks)
        part = finetune_masked(model, masks, task_ids, dataset, stage_config, rng)
        result.history.extend(part.history)
        result.epochs_run += part.epochs_run
        result.best_val = min(result.best_val, part.best_val)
    achieved = sparsity_percent(model.governed_values(), masks)
    return ScheduleResult(result, masks, achieved, evaluate(model, task_ids, dataset))


def schedule_sparse_training(model: MultiTaskModel, task_ids, dataset: SplitDataset,
                             config: TrainConfig, strategy: str, budget: float | None,
                             rng: np.random.Generator,
                             meta_masks: dict[str, np.ndarray] | None = None) -> ScheduleResult:
    """Fix the mask at initialization and train with enforcement throughout."""
    (masks,) = _stage_masks(model, strategy, budget, 1, rng, meta_masks)
    _enforce(model, masks)
    result = finetune_masked(model, masks, task_ids, dataset, config, rng)
    achieved = sparsity_percent(model.governed_values(), masks)
    return ScheduleResult(result, masks, achieved, evaluate(model, task_ids, dataset))
