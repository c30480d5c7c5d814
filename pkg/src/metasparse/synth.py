"""Synthetic multi-task benchmark with planted channel relevance.

Inputs are iid standard-normal fields [n, C, H, W]. Each task's label depends
only on the spatial means of its planted channels: a fixed linear map plus
Gaussian noise for regression tasks, and the sign of the same noisy statistic
for classification tasks. Channels outside the global budget carry no signal
for any task, which gives pruning tests an exact ground truth.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .models import BINARY_CLASSIFICATION, REGRESSION

SPLIT_NAMES = ("train", "val", "test", "support", "query")
SPLIT_FRACTIONS = (0.6, 0.1, 0.1, 0.1, 0.1)


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    kind: str
    relevant_channels: tuple[int, ...]
    weight_vector: tuple[float, ...]
    noise_std: float

    def labels(self, inputs: np.ndarray, noise: np.ndarray) -> np.ndarray:
        pooled = inputs[:, list(self.relevant_channels)].mean(axis=(2, 3))
        stat = pooled @ np.array(self.weight_vector) + noise
        if self.kind == REGRESSION:
            return stat[:, None]
        return (stat > 0.0).astype(np.float64)[:, None]


@dataclass
class SplitDataset:
    inputs: np.ndarray
    labels: dict[str, np.ndarray]
    splits: dict[str, np.ndarray]
    task_specs: dict[str, TaskSpec] = field(default_factory=dict)
    seed: int = 0

    @property
    def task_ids(self) -> list[str]:
        return list(self.labels)

    def split_batch(self, split: str, idx: np.ndarray | None = None):
        indices = self.splits[split] if idx is None else self.splits[split][idx]
        return self.inputs[indices], {t: y[indices] for t, y in self.labels.items()}


SIGNAL_SCALE = 8.0  # per-weight scale; pooled channel means have std 1/sqrt(H*W)


def generate(n_tasks: int = 4, n_samples: int = 2000, image_shape: tuple[int, int, int] = (8, 8, 8),
             channel_budget: int = 4, seed: int = 0, relatedness: float = 0.5,
             noise_std: float = 0.2, n_classification: int = 1) -> tuple[dict[str, TaskSpec], SplitDataset]:
    """Create task specs and a five-way split dataset; pure function of its arguments."""
    n_channels, height, width = image_shape
    if not 0 < channel_budget < n_channels:
        raise ValueError(
            f"channel budget must leave at least one globally irrelevant channel: "
            f"got budget {channel_budget} of {n_channels} channels"
        )
    if not 0 <= n_classification <= n_tasks:
        raise ValueError(f"n_classification {n_classification} outside [0, {n_tasks}]")

    rng = np.random.default_rng(seed)
    pool = np.sort(rng.choice(n_channels, size=channel_budget, replace=False))
    window = max(1, round(relatedness * channel_budget))

    specs: dict[str, TaskSpec] = {}
    for i in range(n_tasks):
        channels = tuple(int(pool[(i + j) % channel_budget]) for j in range(window))
        weights = tuple(rng.normal(0.0, SIGNAL_SCALE, size=window))
        kind = BINARY_CLASSIFICATION if i >= n_tasks - n_classification else REGRESSION
        specs[f"T{i + 1}"] = TaskSpec(f"T{i + 1}", kind, channels, weights, noise_std)

    inputs = rng.standard_normal((n_samples, n_channels, height, width))
    labels = {}
    for tid, spec in specs.items():
        noise = rng.normal(0.0, noise_std, size=n_samples) if noise_std > 0 else np.zeros(n_samples)
        labels[tid] = spec.labels(inputs, noise)

    perm = rng.permutation(n_samples)
    splits = {}
    start = 0
    for name, frac in zip(SPLIT_NAMES, SPLIT_FRACTIONS):
        stop = n_samples if name == SPLIT_NAMES[-1] else start + int(round(frac * n_samples))
        splits[name] = np.sort(perm[start:stop])
        start = stop

    return specs, SplitDataset(inputs, labels, splits, specs, seed)


# ---------------------------------------------------------------------------
# serialization: binary record file plus a structured-text manifest
# ---------------------------------------------------------------------------

def save_dataset(dataset: SplitDataset, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    label_matrix = np.concatenate([dataset.labels[t] for t in dataset.task_ids], axis=1)
    np.savez(directory / "records.npz",
             sample_ids=np.arange(len(dataset.inputs)),
             inputs=dataset.inputs,
             labels=label_matrix)
    manifest = {
        "format": "metasparse-dataset-v1",
        "seed": dataset.seed,
        "tasks": [
            {
                "task_id": s.task_id,
                "kind": s.kind,
                "relevant_channels": list(s.relevant_channels),
                "weight_vector": list(s.weight_vector),
                "noise_std": s.noise_std,
            }
            for s in dataset.task_specs.values()
        ],
        "splits": {name: idx.tolist() for name, idx in dataset.splits.items()},
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1))


def load_dataset(directory: str | Path) -> SplitDataset:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("format") != "metasparse-dataset-v1":
        raise ValueError(f"unrecognized dataset manifest in {directory}")
    records = np.load(directory / "records.npz")
    specs = {
        t["task_id"]: TaskSpec(t["task_id"], t["kind"], tuple(t["relevant_channels"]),
                               tuple(t["weight_vector"]), t["noise_std"])
        for t in manifest["tasks"]
    }
    labels = {tid: records["labels"][:, i:i + 1] for i, tid in enumerate(specs)}
    splits = {name: np.array(idx, dtype=int) for name, idx in manifest["splits"].items()}
    return SplitDataset(records["inputs"], labels, splits, specs, manifest["seed"])
