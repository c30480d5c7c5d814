"""Group partitions, the group-lasso penalty, proximal operators, masks, metrics.

The penalty on a governed weight tensor is ``lambda * sum_g sqrt(n_g) * ||theta_g||_2``
over disjoint groups g. Its proximal map has the closed form

    prox(v) = (1 - t / ||v||) * v   if ||v|| >  t,     t = alpha * lambda * sqrt(n_g)
              0                     if ||v|| <= t,

i.e. block soft-thresholding; boundary equality zeroes the group. Structured
mode groups a conv weight [C_out, C_in, kH, kW] by its input-channel slices
theta[:, c, :, :] (and a dense weight [n_in, n_out] by input rows); in
unstructured mode every entry is its own group, which reduces the prox to
scalar soft-thresholding.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, make_node


class PartitionError(ValueError):
    """A group partition is invalid for the tensor it governs."""


@dataclass(frozen=True)
class GroupPartition:
    """Disjoint index groups over a flat view of one parameter tensor."""

    parameter_id: str
    groups: tuple[np.ndarray, ...]
    sizes: tuple[int, ...]

    def __post_init__(self):
        if not self.groups:
            raise PartitionError(f"{self.parameter_id}: partition has no groups")
        flat = np.concatenate([g.ravel() for g in self.groups])
        if len(np.unique(flat)) != len(flat):
            raise PartitionError(f"{self.parameter_id}: groups overlap")
        if tuple(len(g) for g in self.groups) != tuple(self.sizes):
            raise PartitionError(f"{self.parameter_id}: sizes disagree with groups")
        # entrywise partitions in flat order take vectorized code paths
        flat_singletons = (all(s == 1 for s in self.sizes)
                           and np.array_equal(flat, np.arange(len(flat))))
        object.__setattr__(self, "_flat_singletons", flat_singletons)

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    @property
    def covered(self) -> int:
        return int(np.sum(self.sizes))

    @property
    def entrywise(self) -> bool:
        return self._flat_singletons


def channel_partition(parameter_id: str, shape: tuple[int, ...]) -> GroupPartition:
    """One group per input channel c of a conv weight: theta[:, c, :, :]."""
    if len(shape) != 4:
        raise PartitionError(f"{parameter_id}: channel partition needs a 4-d weight, got {shape}")
    idx = np.arange(int(np.prod(shape))).reshape(shape)
    groups = tuple(idx[:, c].ravel().copy() for c in range(shape[1]))
    return GroupPartition(parameter_id, groups, tuple(len(g) for g in groups))


def dense_partition(parameter_id: str, shape: tuple[int, ...]) -> GroupPartition:
    """One group per input feature of a dense weight [n_in, n_out]."""
    if len(shape) != 2:
        raise PartitionError(f"{parameter_id}: dense partition needs a 2-d weight, got {shape}")
    idx = np.arange(int(np.prod(shape))).reshape(shape)
    groups = tuple(idx[i].copy() for i in range(shape[0]))
    return GroupPartition(parameter_id, groups, tuple(len(g) for g in groups))


def singleton_partition(parameter_id: str, shape: tuple[int, ...]) -> GroupPartition:
    """Unstructured mode: every entry is its own group (sqrt(n_g) factor is 1)."""
    n = int(np.prod(shape))
    groups = tuple(np.array([i]) for i in range(n))
    return GroupPartition(parameter_id, groups, (1,) * n)


def build_partition(parameter_id: str, shape: tuple[int, ...], mode: str) -> GroupPartition:
    if mode == "unstructured":
        return singleton_partition(parameter_id, shape)
    if mode == "structured":
        if len(shape) == 4:
            return channel_partition(parameter_id, shape)
        if len(shape) == 2:
            return dense_partition(parameter_id, shape)
        raise PartitionError(f"{parameter_id}: no structured grouping for shape {shape}")
    raise ValueError(f"unknown sparsity mode {mode!r}")


# ---------------------------------------------------------------------------
# penalty and proximal operators
# ---------------------------------------------------------------------------

def group_norms(values: np.ndarray, partition: GroupPartition) -> np.ndarray:
    flat = values.ravel()
    if partition.entrywise:
        return np.abs(flat)
    return np.array([np.linalg.norm(flat[g]) for g in partition.groups])


def penalty_value(values: np.ndarray, partition: GroupPartition, lambda_eff: float) -> float:
    norms = group_norms(values, partition)
    return float(lambda_eff * np.sum(np.sqrt(partition.sizes) * norms))


def penalty(partition: GroupPartition, params: Tensor, lambda_eff: float) -> Tensor:
    """lambda * sum_g sqrt(n_g) ||theta_g||_2 as a graph node.

    The subgradient at an exactly-zero group is taken as 0; elsewhere the
    gradient of each group term is lambda * sqrt(n_g) * theta_g / ||theta_g||.
    """
    if lambda_eff < 0:
        raise ValueError(f"penalty: lambda must be nonnegative, got {lambda_eff}")
    norms = group_norms(params.data, partition)
    value = lambda_eff * np.sum(np.sqrt(partition.sizes) * norms)

    def backprop(g):
        if not params.requires_grad:
            return
        if params.grad is None:
            params.grad = np.zeros_like(params.data)
        flat = params.data.ravel()
        gflat = params.grad.ravel()
        if partition.entrywise:
            gflat += g * lambda_eff * np.sign(flat)
            return
        for gi, idx in enumerate(partition.groups):
            if norms[gi] > 0.0:
                gflat[idx] += g * lambda_eff * np.sqrt(partition.sizes[gi]) * flat[idx] / norms[gi]

    return make_node(np.float64(value), (params,), backprop)


def prox_group(group_values: np.ndarray, alpha: float, lambda_eff: float, n_g: int) -> np.ndarray:
    """Block soft-threshold one group; zero when ||v|| <= alpha*lambda*sqrt(n_g)."""
    if alpha <= 0:
        raise ValueError(f"prox_group: alpha must be positive, got {alpha}")
    if lambda_eff < 0:
        raise ValueError(f"prox_group: lambda must be nonnegative, got {lambda_eff}")
    v = np.asarray(group_values, dtype=np.float64)
    threshold = alpha * lambda_eff * np.sqrt(n_g)
    norm = np.linalg.norm(v)
    if norm <= threshold:
        return np.zeros_like(v)
    return (1.0 - threshold / norm) * v


def prox_apply(values: np.ndarray, partition: GroupPartition, alpha: float,
               lambda_eff: float) -> np.ndarray:
    """Apply the group prox to every group of ``values``; ungrouped entries pass through."""
    if alpha <= 0:
        raise ValueError(f"prox_apply: alpha must be positive, got {alpha}")
    if lambda_eff < 0:
        raise ValueError(f"prox_apply: lambda must be nonnegative, got {lambda_eff}")
    out = values.copy()
    if lambda_eff == 0.0:
        # zero threshold shrinks nothing; keep the step bit-identical to plain descent
        return out
    flat = out.ravel()
    if partition.entrywise:
        flat[...] = np.sign(flat) * np.maximum(np.abs(flat) - alpha * lambda_eff, 0.0)
        return out
    for idx, n_g in zip(partition.groups, partition.sizes):
        flat[idx] = prox_group(flat[idx], alpha, lambda_eff, n_g)
    return out


def prox_step(values: np.ndarray, grad: np.ndarray, alpha: float, lambda_eff: float,
              partition: GroupPartition) -> np.ndarray:
    """One proximal gradient step: shrink each group of (values - alpha*grad)."""
    if values.shape != grad.shape:
        raise ValueError(f"prox_step: grad shape {grad.shape} != params shape {values.shape}")
    return prox_apply(values - alpha * grad, partition, alpha, lambda_eff)


# ---------------------------------------------------------------------------
# masks
# ---------------------------------------------------------------------------

def apply_mask(values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    if values.shape != mask.shape:
        raise ValueError(f"apply_mask: mask shape {mask.shape} != params shape {values.shape}")
    return np.where(mask, values, 0.0)


def mask_from_current_zeros(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Snapshot the existing zero pattern: active exactly where entries are nonzero."""
    return {pid: values != 0.0 for pid, values in params.items()}


def build_mask(params: dict[str, np.ndarray], partitions: dict[str, GroupPartition],
               strategy: str, budget: float,
               rng: np.random.Generator | None = None) -> tuple[dict[str, np.ndarray], float]:
    """Build boolean masks zeroing whole groups until ``budget`` percent is reached.

    ``magnitude_groups`` zeroes groups in ascending L2 norm, ``random_groups``
    in a uniformly shuffled order; both stop once the governed parameter
    sparsity first meets or exceeds the budget. ``from_current_zeros`` ignores
    the budget and snapshots the entry-level zero pattern. Returns the masks
    and the achieved parameter sparsity percent.
    """
    if not 0 <= budget < 100:
        raise ValueError(f"build_mask: budget must be in [0, 100), got {budget}")
    if strategy == "from_current_zeros":
        masks = mask_from_current_zeros(params)
        return masks, sparsity_percent(params, masks)

    governed_total = np.sum([partitions[pid].covered for pid in partitions])
    entries = []
    for pid, partition in partitions.items():
        norms = group_norms(params[pid], partition)
        for gi in range(partition.n_groups):
            entries.append((norms[gi], pid, gi, partition.sizes[gi]))
    if strategy == "magnitude_groups":
        entries.sort(key=lambda e: (e[0], e[1], e[2]))
    elif strategy == "random_groups":
        if rng is None:
            raise ValueError("build_mask: random_groups needs an rng")
        order = rng.permutation(len(entries))
        entries = [entries[i] for i in order]
    else:
        raise ValueError(f"build_mask: unknown strategy {strategy!r}")

    masks = {pid: np.ones(params[pid].shape, dtype=bool) for pid in params}
    zeroed = 0
    for _, pid, gi, n_g in entries:
        if 100.0 * zeroed / governed_total >= budget:
            break
        flat = masks[pid].ravel()
        flat[partitions[pid].groups[gi]] = False
        zeroed += n_g
    return masks, 100.0 * zeroed / governed_total


def sparsity_percent(params: dict[str, np.ndarray], masks: dict[str, np.ndarray]) -> float:
    total = np.sum([m.size for m in masks.values()])
    inactive = np.sum([np.count_nonzero(~m) for m in masks.values()])
    return 100.0 * inactive / total


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LayerFlops:
    """FLOP budget of one governed layer under the multiply-add model.

    conv2d: 2 * C_out * C_in * kH * kW * H_out * W_out; dense: 2 * n_in * n_out.
    """

    kind: str
    shape: tuple[int, ...]
    out_hw: tuple[int, int] | None = None

    @property
    def flops(self) -> float:
        if self.kind == "conv2d":
            c_out, c_in, kh, kw = self.shape
            h, w = self.out_hw
            return 2.0 * c_out * c_in * kh * kw * h * w
        if self.kind == "dense":
            n_in, n_out = self.shape
            return 2.0 * n_in * n_out
        raise ValueError(f"unknown layer kind {self.kind!r}")


@dataclass(frozen=True)
class SparsityMetrics:
    parameter_sparsity_percent: float
    group_sparsity_percent: float
    compression_ratio: float
    speed_up: float


def sparsity_levels(partitions: dict[str, GroupPartition],
                    params: dict[str, np.ndarray]) -> tuple[float, float]:
    """(parameter sparsity %, group sparsity %) of the governed set.

    Unlike ``measure`` this stays defined for an entirely zero model, so
    training loops can log transients without tripping the CR guard.
    """
    governed = zeros = n_groups = zero_groups = 0
    for pid, partition in partitions.items():
        flat = params[pid].ravel()
        if partition.entrywise:
            dead = int(np.count_nonzero(flat == 0.0))
            governed += flat.size
            zeros += dead
            n_groups += flat.size
            zero_groups += dead
            continue
        for idx in partition.groups:
            sub = flat[idx]
            governed += len(idx)
            zeros += int(np.count_nonzero(sub == 0.0))
            n_groups += 1
            zero_groups += int(np.all(sub == 0.0))
    return 100.0 * zeros / governed, 100.0 * zero_groups / n_groups


def measure(partitions: dict[str, GroupPartition], params: dict[str, np.ndarray],
            flop_specs: dict[str, LayerFlops] | None = None,
            mode: str = "structured") -> SparsityMetrics:
    """Compute the sparsity, compression, and speed-up metrics of the governed set.

    Parameter sparsity counts exactly-zero governed entries; group sparsity
    counts all-zero groups. CR is total/nonzero parameters; Sp is total/nonzero
    FLOPs, where a layer's nonzero FLOPs drop in proportion to its zeroed
    groups (structured) or zeroed weights (unstructured).
    """
    governed = 0
    zeros = 0
    n_groups = 0
    zero_groups = 0
    flops_total = 0.0
    flops_nonzero = 0.0
    for pid, partition in partitions.items():
        flat = params[pid].ravel()
        if partition.entrywise:
            dead = int(np.count_nonzero(flat == 0.0))
            governed += flat.size
            zeros += dead
            n_groups += flat.size
            zero_groups += dead
        else:
            dead = 0
            for idx in partition.groups:
                sub = flat[idx]
                governed += len(idx)
                zeros += int(np.count_nonzero(sub == 0.0))
                n_groups += 1
                dead += int(np.all(sub == 0.0))
            zero_groups += dead
        if flop_specs is not None:
            full = flop_specs[pid].flops
            flops_total += full
            if mode == "structured":
                flops_nonzero += full * (1.0 - dead / partition.n_groups)
            else:
                flops_nonzero += full * (np.count_nonzero(flat) / flat.size)

    nonzero = governed - zeros
    if nonzero < 1:
        raise ValueError("measure: no nonzero governed parameters; compression ratio undefined")
    if flop_specs is None:
        cr = governed / nonzero
        return SparsityMetrics(100.0 * zeros / governed, 100.0 * zero_groups / n_groups, cr, 1.0)
    if flops_nonzero <= 0:
        raise ValueError("measure: zero remaining FLOPs; speed-up undefined")
    return SparsityMetrics(
        parameter_sparsity_percent=100.0 * zeros / governed,
        group_sparsity_percent=100.0 * zero_groups / n_groups,
        compression_ratio=governed / nonzero,
        speed_up=flops_total / flops_nonzero,
    )
