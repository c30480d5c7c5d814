"""Episodic meta-training that jointly learns model parameters and the
group-sparsity strength.

Episodes are the nonempty subsets of the task set. Each outer epoch samples
one episode per support batch, adapts a copy of the meta parameters with a
few plain gradient steps on support data (first-order: no gradient flows back
through the adaptation), and evaluates the query-loss gradient at the adapted
point. The averaged gradients drive one proximal outer step on the meta
parameters, so the group penalty acts through the prox rather than through a
penalty gradient. The sparsity strength itself descends along the penalty
value at the adapted backbone, chained through the softplus that keeps it
positive; optional regrowth reinitializes zeroed groups on the episode copy
before adaptation.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .models import MultiTaskModel, xavier_uniform
from .sparsity import (GroupPartition, mask_from_current_zeros, penalty_value,
                       prox_step, sparsity_levels)
from .synth import SplitDataset
from .tensor import softplus_values
from .training import (DivergenceError, TrainConfig, episode_loss, evaluate,
                       finetune_masked, validation_loss)

log = logging.getLogger(__name__)

LAMBDA_MIN = 1e-8

META_TEST_REGIMES = ("same_tasks", "new_task_only", "all_tasks_plus_new")


@dataclass(frozen=True)
class Episode:
    task_ids: tuple[str, ...]

    def __post_init__(self):
        if not self.task_ids:
            raise ValueError("episode must contain at least one task")


def enumerate_episodes(task_ids) -> list[Episode]:
    """All nonempty task subsets, ordered by ascending subset bitmask."""
    task_ids = list(task_ids)
    n = len(task_ids)
    if not 1 <= n <= 10:
        raise ValueError(f"episode enumeration needs 1 <= N <= 10 tasks, got {n}")
    episodes = []
    for mask in range(1, 2 ** n):
        subset = tuple(task_ids[i] for i in range(n) if mask >> i & 1)
        episodes.append(Episode(subset))
    return episodes


def softplus_inverse(y: float, beta: float = 1.0) -> float:
    if y <= 0:
        raise ValueError(f"softplus inverse needs y > 0, got {y}")
    return float(np.log(np.expm1(beta * y)) / beta)


@dataclass
class MetaState:
    """Meta parameters plus the learnable sparsity strength and loop constants."""

    model: MultiTaskModel
    lambda_raw: float | None  # None disables the penalty entirely (baseline mode)
    beta: float = 1.0
    inner_steps: int = 1
    alpha_in: float = 1e-4
    alpha_out_backbone: float = 5e-3
    alpha_out_head: float = 5e-3
    alpha_out_lambda: float = 2e-4
    regrow_prob: float = 0.0
    profile: list[tuple[int, float, float]] = field(default_factory=list)

    def __post_init__(self):
        if self.inner_steps < 1:
            raise ValueError(f"inner_steps must be >= 1, got {self.inner_steps}")
        if not 0 <= self.regrow_prob < 1:
            raise ValueError(f"regrow_prob must be in [0, 1), got {self.regrow_prob}")

    @property
    def lambda_eff(self) -> float:
        if self.lambda_raw is None:
            return 0.0
        return float(softplus_values(np.float64(self.lambda_raw), self.beta))


def sample_lambda_raw(rng: np.random.Generator, beta: float = 1.0,
                      low: float = 0.1, high: float = 1.0) -> float:
    """Raw value whose softplus lands uniformly in [low, high)."""
    return softplus_inverse(float(rng.uniform(low, high)), beta)


@dataclass
class MetaConfig:
    epochs: int = 400
    batch_size: int = 16
    patience: int = 15
    sparsity_patience: int = 30


@dataclass
class MetaResult:
    history: list[dict] = field(default_factory=list)
    epochs_run: int = 0
    best_val: float = float("inf")

    @property
    def final_sparsity(self) -> float:
        return self.history[-1]["parameter_sparsity"] if self.history else 0.0


def _episode_param_ids(model: MultiTaskModel, episode: Episode) -> list[str]:
    ids = list(model.backbone_weights())
    for tid in episode.task_ids:
        ids.extend(model.head_params(tid))
    return ids


def _draw(rng: np.random.Generator, indices: np.ndarray, batch_size: int) -> np.ndarray:
    take = min(batch_size, len(indices))
    return rng.choice(indices, size=take, replace=False)


def inner_adapt(model: MultiTaskModel, episode: Episode, dataset: SplitDataset,
                kappa: int, alpha_in: float, rng: np.random.Generator,
                batch_size: int = 16, split: str = "support") -> float:
    """Adapt the episode's parameters in place with kappa plain gradient steps.

    No prox is applied inside the loop; the caller owns snapshot and restore.
    Returns the last support loss. Raises DivergenceError on a non-finite loss.
    """
    if kappa < 1:
        raise ValueError(f"inner_adapt needs kappa >= 1, got {kappa}")
    params = [model.param_dict()[pid] for pid in _episode_param_ids(model, episode)]
    value = float("nan")
    for _ in range(kappa):
        sel = _draw(rng, dataset.splits[split], batch_size)
        inputs = dataset.inputs[sel]
        labels = {tid: dataset.labels[tid][sel] for tid in episode.task_ids}
        loss, _ = episode_loss(model, episode.task_ids, inputs, labels)
        value = loss.item()
        if not np.isfinite(value):
            raise DivergenceError(f"non-finite inner loss on episode {episode.task_ids}")
        T.zero_grads(params)
        T.backward(loss)
        for p in params:
            if p.grad is not None:
                p.data -= alpha_in * p.grad
    return value


def regrow(values: dict[str, np.ndarray], partitions: dict[str, GroupPartition],
           r_p: float, rng: np.random.Generator,
           masks: dict[str, np.ndarray] | None = None) -> dict[str, np.ndarray]:
    """Reinitialize each all-zero group independently with probability r_p.

    New values are fan-based uniform (Xavier) draws for the owning tensor;
    matching mask entries, when masks are given, are flipped back to active.
    """
    if not 0 <= r_p < 1:
        raise ValueError(f"regrow probability must be in [0, 1), got {r_p}")
    out = {pid: v.copy() for pid, v in values.items()}
    if r_p == 0.0:
        return out
    for pid, partition in partitions.items():
        flat = out[pid].ravel()
        fresh = None
        for idx in partition.groups:
            if not np.all(flat[idx] == 0.0):
                continue
            if rng.random() >= r_p:
                continue
            if fresh is None:
                fresh = xavier_uniform(out[pid].shape, rng).ravel()
            flat[idx] = fresh[idx]
            if masks is not None:
                masks[pid].ravel()[idx] = True
    return out


def meta_train(state: MetaState, episodes: list[Episode], dataset: SplitDataset,
               config: MetaConfig, rng: np.random.Generator) -> MetaResult:
    """Algorithmic core: per epoch, sample one episode per support batch,
    adapt, accumulate first-order query gradients, then take one averaged
    proximal outer step and one sparsity-strength step.

    Stops on validation-loss patience or on ``sparsity_patience`` epochs
    without a parameter-sparsity increase; the model keeps its stop-time
    parameters (the profile documents the whole trajectory).
    """
    if not episodes:
        raise ValueError("meta_train needs at least one episode")
    model = state.model
    governed = model.backbone_weights()
    task_ids = sorted({tid for ep in episodes for tid in ep.task_ids})
    all_params = model.param_dict()
    raw_floor = softplus_inverse(LAMBDA_MIN, state.beta)

    result = MetaResult()
    non_improving = 0
    best_sparsity = -1.0
    sparsity_stall = 0
    visits_per_epoch = max(1, len(dataset.splits["support"]) // config.batch_size)

    for epoch in range(config.epochs):
        accum = {pid: np.zeros_like(p.data) for pid, p in all_params.items()}
        lambda_grad_sum = 0.0
        meta_loss_sum = 0.0
        visited = 0
        for _ in range(visits_per_epoch):
            episode = episodes[int(rng.integers(len(episodes)))]
            adapted_ids = _episode_param_ids(model, episode)
            snapshot = {pid: all_params[pid].data.copy() for pid in adapted_ids}
            try:
                if state.regrow_prob > 0.0:
                    regrown = regrow(model.governed_values(), model.partitions,
                                     state.regrow_prob, rng)
                    for pid, vals in regrown.items():
                        governed[pid].data[...] = vals
                inner_adapt(model, episode, dataset, state.inner_steps, state.alpha_in,
                            rng, config.batch_size)
                sel = _draw(rng, dataset.splits["query"], config.batch_size)
                labels = {tid: dataset.labels[tid][sel] for tid in episode.task_ids}
                query, _ = episode_loss(model, episode.task_ids, dataset.inputs[sel], labels)
                value = query.item()
                if not np.isfinite(value):
                    raise DivergenceError(f"non-finite query loss on episode {episode.task_ids}")
            except DivergenceError as err:
                log.warning("skipping episode %s: %s", episode.task_ids, err)
                for pid, vals in snapshot.items():
                    all_params[pid].data[...] = vals
                continue

            adapted = [all_params[pid] for pid in adapted_ids]
            T.zero_grads(adapted)
            T.backward(query)
            for pid in adapted_ids:
                g = all_params[pid].grad
                if g is not None:
                    accum[pid] += g
            adapted_penalty = np.sum([
                penalty_value(governed[pid].data, model.partitions[pid], 1.0)
                for pid in governed
            ])
            if state.lambda_raw is not None:
                lambda_grad_sum += adapted_penalty * _sigmoid_scalar(state.beta * state.lambda_raw)
            meta_loss_sum += value + state.lambda_eff * adapted_penalty
            visited += 1
            for pid, vals in snapshot.items():
                all_params[pid].data[...] = vals

        if visited == 0:
            raise DivergenceError(f"every episode diverged at epoch {epoch}")

        lambda_eff = state.lambda_eff
        for pid, p in all_params.items():
            avg = accum[pid] / visited
            if pid in governed:
                p.data[...] = prox_step(p.data, avg, state.alpha_out_backbone,
                                        lambda_eff, model.partitions[pid])
            else:
                p.data -= state.alpha_out_head * avg
        if state.lambda_raw is not None:
            state.lambda_raw = max(raw_floor,
                                   state.lambda_raw - state.alpha_out_lambda * lambda_grad_sum / visited)

        param_sparsity, group_sparsity = sparsity_levels(model.partitions,
                                                         model.governed_values())
        val = validation_loss(model, task_ids, dataset)
        if not np.isfinite(val):
            raise DivergenceError(f"non-finite validation loss at epoch {epoch}")
        state.profile.append((epoch, param_sparsity, group_sparsity))
        result.history.append({
            "epoch": epoch,
            "meta_loss": meta_loss_sum / visited,
            "val": val,
            "lambda": lambda_eff,
            "parameter_sparsity": param_sparsity,
            "group_sparsity": group_sparsity,
        })
        result.epochs_run = epoch + 1

        if val < result.best_val:
            result.best_val = val
            non_improving = 0
        else:
            non_improving += 1
        if param_sparsity > best_sparsity:
            best_sparsity = param_sparsity
            sparsity_stall = 0
        else:
            sparsity_stall += 1
        if non_improving >= config.patience or sparsity_stall >= config.sparsity_patience:
            break
    return result


def _sigmoid_scalar(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + np.exp(-z))
    ez = np.exp(z)
    return float(ez / (1.0 + ez))


def meta_train_baseline(state: MetaState, episodes: list[Episode], dataset: SplitDataset,
                        config: MetaConfig, rng: np.random.Generator) -> MetaResult:
    """Meta-learn the parameter initialization only: penalty off, plain outer steps."""
    state.lambda_raw = None
    return meta_train(state, episodes, dataset, config, rng)


def meta_test(state: MetaState, regime: str, dataset: SplitDataset, config: TrainConfig,
              rng: np.random.Generator, meta_task_ids: list[str],
              new_task: tuple[str, str] | None = None, epoch_callback=None):
    """Fine-tune the meta model under one of the three regimes, masks enforced.

    Masks snapshot the current zero pattern, noise scales restart at one, and
    the sparsity strength stays frozen (the masks carry the learned pattern).
    Returns (train result, per-task test losses, masks).
    """
    if regime not in META_TEST_REGIMES:
        raise ValueError(f"unknown meta-test regime {regime!r}")
    model = state.model
    if regime == "same_tasks":
        if new_task is not None:
            raise ValueError("same_tasks regime does not accept a new task")
        task_ids = list(meta_task_ids)
        freeze: frozenset[str] = frozenset()
    else:
        if new_task is None:
            raise ValueError(f"{regime} regime needs a new task")
        new_id, kind = new_task
        if new_id in meta_task_ids or new_id in model.heads:
            raise ValueError(f"task {new_id!r} was already present in meta-training")
        if new_id not in dataset.labels:
            raise ValueError(f"dataset has no labels for task {new_id!r}")
        model.add_head(new_id, kind)
        if regime == "new_task_only":
            task_ids = [new_id]
            freeze = frozenset(model.backbone_weights())
        else:
            task_ids = list(meta_task_ids) + [new_id]
            freeze = frozenset()

    for tid in task_ids:
        model.log_sigmas[tid].data[...] = 0.0
    masks = mask_from_current_zeros(model.governed_values())
    train_result = finetune_masked(model, masks, task_ids, dataset, config, rng,
                                   freeze=freeze, epoch_callback=epoch_callback)
    return train_result, evaluate(model, task_ids, dataset, "test"), masks
