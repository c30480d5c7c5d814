"""Versioned binary checkpoint container.

One npz archive holds (parameter_id, shape, data) records under ``param/``
keys, mask bit arrays under ``mask/`` keys, and a JSON header with the format
version, config hash, sparsity strength, and the generator state needed to
resume a deterministic run.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


def save_checkpoint(path: str | Path, params: dict[str, np.ndarray],
                    masks: dict[str, np.ndarray] | None = None,
                    lambda_raw: float | None = None,
                    rng_state: dict | None = None,
                    config_hash: str = "",
                    profile: list[tuple[int, float, float]] | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "version": FORMAT_VERSION,
        "config_hash": config_hash,
        "lambda_raw": lambda_raw,
        "rng_state": rng_state,
    }
    arrays = {"__header__": np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)}
    for pid, values in params.items():
        arrays[f"param/{pid}"] = np.asarray(values, dtype=np.float64)
    for pid, mask in (masks or {}).items():
        arrays[f"mask/{pid}"] = np.asarray(mask, dtype=bool)
    if profile:
        arrays["__profile__"] = np.asarray(profile, dtype=np.float64)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


class Checkpoint:
    def __init__(self, params, masks, lambda_raw, rng_state, config_hash, profile):
        self.params: dict[str, np.ndarray] = params
        self.masks: dict[str, np.ndarray] = masks
        self.lambda_raw: float | None = lambda_raw
        self.rng_state: dict | None = rng_state
        self.config_hash: str = config_hash
        self.profile: list[tuple[int, float, float]] = profile


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint at {path}")
    with np.load(path) as archive:
        header = json.loads(bytes(archive["__header__"]).decode())
        if header.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version in {path}: {header.get('version')}")
        params, masks = {}, {}
        for key in archive.files:
            if key.startswith("param/"):
                params[key[len("param/"):]] = archive[key]
            elif key.startswith("mask/"):
                masks[key[len("mask/"):]] = archive[key]
        profile = [tuple(row) for row in archive["__profile__"]] if "__profile__" in archive.files else []
    return Checkpoint(params, masks, header["lambda_raw"], header["rng_state"],
                      header["config_hash"], profile)
