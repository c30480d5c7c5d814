"""Multi-task training: loss combination, the optimizer, and the train loops.

The combined loss weights each task by a learnable noise scale,
``sum_i [ l_i / (2 sigma_i^2) + log sigma_i ]`` with sigma stored as log sigma,
so positivity is carried by the parametrization. Fixed-sparsity runs compose
the group prox with every realized backbone optimizer step (threshold
alpha = backbone learning rate); masked fine-tuning re-applies its masks after
every step instead.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .models import BINARY_CLASSIFICATION, REGRESSION, MultiTaskModel
from .sparsity import apply_mask, prox_apply, sparsity_levels
from .synth import SplitDataset


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


def task_loss(kind: str, predictions: T.Tensor, labels: T.Tensor) -> T.Tensor:
    if kind == REGRESSION:
        return T.mse(predictions, labels)
    if kind == BINARY_CLASSIFICATION:
        return T.cross_entropy(predictions, labels)
    raise ValueError(f"unknown task kind {kind!r}")


def combine_uncertainty(losses: list[T.Tensor], log_sigmas: list[T.Tensor]) -> T.Tensor:
    """sum_i [ l_i * exp(-2 log sigma_i) / 2 + log sigma_i ]."""
    if len(losses) != len(log_sigmas):
        raise ValueError(f"{len(losses)} losses but {len(log_sigmas)} sigmas")
    total = None
    for loss, log_sigma in zip(losses, log_sigmas):
        inv_var = T.exp(T.mul(log_sigma, T.Tensor(-2.0)))
        term = T.add(T.mul(T.mul(loss, inv_var), T.Tensor(0.5)), log_sigma)
        total = term if total is None else T.add(total, term)
    return total


class Adam:
    def __init__(self, params: list[T.Tensor], lr: float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * p.grad
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * p.grad * p.grad
            m_hat = self.m[i] / (1 - self.b1 ** self.t)
            v_hat = self.v[i] / (1 - self.b2 ** self.t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


@dataclass
class TrainConfig:
    epochs: int = 150
    batch_size: int = 16
    head_lr: float = 1e-4
    backbone_lr: float = 1e-5
    betas: tuple[float, float] = (0.9, 0.999)
    patience: int = 15
    lambda_fixed: float = 0.0


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    best_val: float = float("inf")
    epochs_run: int = 0

    @property
    def final_sparsity(self) -> float:
        return self.history[-1]["parameter_sparsity"] if self.history else 0.0


def episode_loss(model: MultiTaskModel, task_ids, inputs: np.ndarray,
                 labels: dict[str, np.ndarray]) -> tuple[T.Tensor, dict[str, float]]:
    """Per-task losses combined per the episode arity: plain loss for a single
    task, uncertainty-weighted for several."""
    x = T.Tensor(inputs)
    losses, per_task = [], {}
    for tid in task_ids:
        loss = task_loss(model.heads[tid].kind, model.forward(tid, x), T.Tensor(labels[tid]))
        losses.append(loss)
        per_task[tid] = loss.item()
    if len(losses) == 1:
        return losses[0], per_task
    return combine_uncertainty(losses, [model.log_sigmas[t] for t in task_ids]), per_task


def validation_loss(model: MultiTaskModel, task_ids, dataset: SplitDataset,
                    split: str = "val") -> float:
    inputs, labels = dataset.split_batch(split)
    combined, _ = episode_loss(model, task_ids, inputs, labels)
    return combined.item()


def evaluate(model: MultiTaskModel, task_ids, dataset: SplitDataset,
             split: str = "test") -> dict[str, float]:
    inputs, labels = dataset.split_batch(split)
    x = T.Tensor(inputs)
    out = {}
    for tid in task_ids:
        out[tid] = task_loss(model.heads[tid].kind, model.forward(tid, x),
                             T.Tensor(labels[tid])).item()
    return out


def batch_indices(rng: np.random.Generator, n: int, batch_size: int) -> list[np.ndarray]:
    perm = rng.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def mtl_train(model: MultiTaskModel, task_ids, dataset: SplitDataset, config: TrainConfig,
              rng: np.random.Generator, masks: dict[str, np.ndarray] | None = None,
              freeze: frozenset[str] | set[str] = frozenset(),
              train_split: str = "train", epoch_callback=None) -> TrainResult:
    """Epochs of batched multi-task training with early stopping on validation loss.

    ``config.lambda_fixed > 0`` turns on fixed group sparsity: every backbone
    optimizer step is followed by the group prox at the backbone learning
    rate. ``masks`` are re-enforced after every step. ``freeze`` lists
    parameter ids excluded from optimization. The model is left at the best
    validation snapshot.
    """
    task_ids = list(task_ids)
    for tid in task_ids:
        if tid not in model.heads:
            raise KeyError(f"unknown task {tid!r}")
    governed = model.backbone_weights()
    head_params = [p for tid in task_ids for pid, p in model.head_params(tid).items()
                   if pid not in freeze]
    backbone_params = {pid: p for pid, p in governed.items() if pid not in freeze}
    head_opt = Adam(head_params, config.head_lr, config.betas)
    backbone_opt = Adam(list(backbone_params.values()), config.backbone_lr, config.betas)

    result = TrainResult()
    best_state = None
    non_improving = 0
    train_idx = dataset.splits[train_split]

    for epoch in range(config.epochs):
        sums = {tid: 0.0 for tid in task_ids}
        combined_sum = 0.0
        batches = batch_indices(rng, len(train_idx), config.batch_size)
        for idx in batches:
            sel = train_idx[idx]
            inputs = dataset.inputs[sel]
            labels = {tid: dataset.labels[tid][sel] for tid in task_ids}
            combined, per_task = episode_loss(model, task_ids, inputs, labels)
            value = combined.item()
            if not np.isfinite(value):
                raise DivergenceError(f"non-finite loss {value} at epoch {epoch}")
            head_opt.zero_grad()
            backbone_opt.zero_grad()
            T.backward(combined)
            head_opt.step()
            backbone_opt.step()
            if config.lambda_fixed > 0.0:
                for pid, p in backbone_params.items():
                    p.data[...] = prox_apply(p.data, model.partitions[pid],
                                             config.backbone_lr, config.lambda_fixed)
            if masks is not None:
                for pid, p in governed.items():
                    p.data[...] = apply_mask(p.data, masks[pid])
            combined_sum += value
            for tid in task_ids:
                sums[tid] += per_task[tid]

        param_sparsity, group_sparsity = sparsity_levels(model.partitions,
                                                         model.governed_values())
        val = validation_loss(model, task_ids, dataset)
        if not np.isfinite(val):
            raise DivergenceError(f"non-finite validation loss at epoch {epoch}")
        row = {"epoch": epoch, "combined": combined_sum / len(batches), "val": val,
               "parameter_sparsity": param_sparsity,
               "group_sparsity": group_sparsity}
        for tid in task_ids:
            row[f"loss_{tid}"] = sums[tid] / len(batches)
        result.history.append(row)
        result.epochs_run = epoch + 1
        if epoch_callback is not None:
            epoch_callback(model, epoch)

        if val < result.best_val:
            result.best_val = val
            best_state = model.state_copy()
            non_improving = 0
        else:
            non_improving += 1
            if non_improving >= config.patience:
                break

    if best_state is not None:
        model.load_state(best_state)
        if masks is not None:
            for pid, p in governed.items():
                p.data[...] = apply_mask(p.data, masks[pid])
    return result


def finetune_masked(model: MultiTaskModel, masks: dict[str, np.ndarray], task_ids,
                    dataset: SplitDataset, config: TrainConfig, rng: np.random.Generator,
                    freeze: frozenset[str] | set[str] = frozenset(),
                    epoch_callback=None) -> TrainResult:
    """mtl_train with a fixed sparsity pattern re-enforced after every step.

    The masks must snapshot an existing zero pattern of the governed weights.
    """
    for pid, p in model.backbone_weights().items():
        if np.any(p.data.ravel()[~masks[pid].ravel()] != 0.0):
            raise ValueError(f"{pid}: mask hides entries that are not currently zero")
    return mtl_train(model, task_ids, dataset, config, rng, masks=masks, freeze=freeze,
                     epoch_callback=epoch_callback)
