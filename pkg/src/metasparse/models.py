"""Desk-scale multi-task architectures: residual conv backbone plus task heads.

The backbone is a stack of bias-free 3x3 convolutions with same-padding and a
skip connection carrying the first layer's activations to the last layer's
output, so even a fully zeroed intermediate layer keeps propagating signal.
Global average pooling turns the final feature map into the vector consumed
by the per-task two-layer dense heads.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .sparsity import GroupPartition, LayerFlops, build_partition

HEAD_WIDTH = 16

REGRESSION = "regression"
BINARY_CLASSIFICATION = "binary_classification"


def xavier_uniform(shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    if len(shape) == 4:
        fan_in = shape[1] * shape[2] * shape[3]
        fan_out = shape[0] * shape[2] * shape[3]
    else:
        fan_in, fan_out = shape[0], shape[-1]
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class Backbone:
    """Shared conv stack. ``channels[i]`` is the i-th layer's output width."""

    def __init__(self, in_channels: int, channels: list[int], kernel: int = 3,
                 residual: bool = True, rng: np.random.Generator | None = None):
        if len(channels) < 2:
            raise ValueError(f"backbone needs >= 2 conv layers, got channels {channels}")
        if residual and channels[0] != channels[-1]:
            raise ValueError(
                f"skip connection needs matching channels across it: "
                f"layer 1 gives {channels[0]}, layer {len(channels)} gives {channels[-1]}"
            )
        rng = rng or np.random.default_rng(0)
        self.in_channels = in_channels
        self.channels = list(channels)
        self.kernel = kernel
        self.residual = residual
        self.padding = kernel // 2
        self.weights: list[T.Tensor] = []
        prev = in_channels
        for c in channels:
            w = T.Tensor(xavier_uniform((c, prev, kernel, kernel), rng), requires_grad=True)
            self.weights.append(w)
            prev = c

    def forward(self, x: T.Tensor) -> T.Tensor:
        """Pooled features [B, channels[-1]] of an input batch [B, C, H, W].

        The skip carries the first conv's pre-activation, so gradients keep
        flowing into layer 1 even when intermediate layers are entirely zero.
        """
        first = T.conv2d(x, self.weights[0], padding=self.padding)
        h = T.relu(first)
        for w in self.weights[1:-1]:
            h = T.relu(T.conv2d(h, w, padding=self.padding))
        out = T.conv2d(h, self.weights[-1], padding=self.padding)
        if self.residual:
            out = T.add(out, first)
        return T.mean(out, axis=(2, 3))

    def flop_specs(self, image_hw: tuple[int, int]) -> dict[str, LayerFlops]:
        h, w = image_hw
        specs = {}
        for i, weight in enumerate(self.weights):
            specs[f"backbone.conv{i}.weight"] = LayerFlops("conv2d", weight.shape, (h, w))
        return specs


class TaskHead:
    """Two-layer dense head mapping pooled features to one output per sample."""

    def __init__(self, task_id: str, kind: str, in_features: int,
                 rng: np.random.Generator, width: int = HEAD_WIDTH):
        if kind not in (REGRESSION, BINARY_CLASSIFICATION):
            raise ValueError(f"unknown task kind {kind!r}")
        self.task_id = task_id
        self.kind = kind
        self.w1 = T.Tensor(xavier_uniform((in_features, width), rng), requires_grad=True)
        # slightly positive so the hidden relu stays differentiable at zero features
        self.b1 = T.Tensor(np.full(width, 0.01), requires_grad=True)
        self.w2 = T.Tensor(xavier_uniform((width, 1), rng), requires_grad=True)
        self.b2 = T.Tensor(np.zeros(1), requires_grad=True)

    def forward(self, features: T.Tensor) -> T.Tensor:
        h = T.relu(T.add(T.matmul(features, self.w1), self.b1))
        return T.add(T.matmul(h, self.w2), self.b2)

    @property
    def params(self) -> list[T.Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]


def build_backbone(in_channels: int = 8, channels: list[int] | None = None,
                   kernel: int = 3, residual: bool = True,
                   rng: np.random.Generator | None = None) -> Backbone:
    return Backbone(in_channels, channels if channels is not None else [8, 8, 8],
                    kernel=kernel, residual=residual, rng=rng)


class MultiTaskModel:
    """Shared backbone, per-task heads, and per-task noise scales (stored as log sigma).

    Only backbone conv/dense weights are governed by sparsity; biases and all
    head parameters are never penalized.
    """

    def __init__(self, backbone: Backbone, rng: np.random.Generator,
                 sparsity_mode: str = "structured"):
        self.backbone = backbone
        self.sparsity_mode = sparsity_mode
        self.heads: dict[str, TaskHead] = {}
        self.log_sigmas: dict[str, T.Tensor] = {}
        self._rng = rng
        self.partitions: dict[str, GroupPartition] = {
            pid: build_partition(pid, w.shape, sparsity_mode)
            for pid, w in self.backbone_weights().items()
        }

    def add_head(self, task_id: str, kind: str) -> None:
        if task_id in self.heads:
            raise ValueError(f"task {task_id!r} already registered")
        self.heads[task_id] = TaskHead(task_id, kind, self.backbone.channels[-1], self._rng)
        self.log_sigmas[task_id] = T.Tensor(0.0, requires_grad=True)

    def forward(self, task_id: str, batch: T.Tensor) -> T.Tensor:
        if task_id not in self.heads:
            raise KeyError(f"unknown task {task_id!r}")
        return self.heads[task_id].forward(self.backbone.forward(batch))

    def forward_features(self, batch: T.Tensor) -> T.Tensor:
        return self.backbone.forward(batch)

    # -- parameter bookkeeping ------------------------------------------------

    def backbone_weights(self) -> dict[str, T.Tensor]:
        return {f"backbone.conv{i}.weight": w for i, w in enumerate(self.backbone.weights)}

    def head_params(self, task_id: str) -> dict[str, T.Tensor]:
        head = self.heads[task_id]
        names = ["w1", "b1", "w2", "b2"]
        out = {f"head.{task_id}.{n}": p for n, p in zip(names, head.params)}
        out[f"sigma.{task_id}.log"] = self.log_sigmas[task_id]
        return out

    def param_dict(self, task_ids=None) -> dict[str, T.Tensor]:
        out = dict(self.backbone_weights())
        for tid in (task_ids if task_ids is not None else self.heads):
            out.update(self.head_params(tid))
        return out

    def governed_values(self) -> dict[str, np.ndarray]:
        return {pid: w.data for pid, w in self.backbone_weights().items()}

    def state_copy(self, task_ids=None) -> dict[str, np.ndarray]:
        return {pid: t.data.copy() for pid, t in self.param_dict(task_ids).items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = self.param_dict()
        for pid, values in state.items():
            params[pid].data[...] = values

    def flop_specs(self, image_hw: tuple[int, int]) -> dict[str, LayerFlops]:
        return self.backbone.flop_specs(image_hw)


def build_model(task_kinds: dict[str, str], in_channels: int = 8,
                channels: list[int] | None = None, residual: bool = True,
                sparsity_mode: str = "structured",
                rng: np.random.Generator | None = None) -> MultiTaskModel:
    rng = rng or np.random.default_rng(0)
    backbone = build_backbone(in_channels, channels, residual=residual, rng=rng)
    model = MultiTaskModel(backbone, rng, sparsity_mode=sparsity_mode)
    for task_id, kind in task_kinds.items():
        model.add_head(task_id, kind)
    return model
