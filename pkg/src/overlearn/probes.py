"""Probing frozen features and assembling the task-performance matrix.

A probe is a fixed-architecture MLP (512 -> 100 hidden units, dropout,
relu) trained on frozen feature vectors to predict one task's labels.
Probing every task against features from every preserved-task run
yields a square accuracy matrix: rows are the runs (which task the
extractor preserved), columns are the probed tasks. Off-diagonal cells
far above chance are the leakage signal everything else here measures.

The probe never touches the feature extractor: it consumes plain
arrays, and the matrix records a digest of each checkpoint's parameters
so any mutation would be visible.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import rng as rngmod
from .tasks import TaskRegistry
from .trainer import Checkpoint, extract_features

MATRIX_JSON = "matrix.json"
MATRIX_CSV = "matrix.csv"

# Stream sub-keys under the PROBE purpose tag.
_SPLIT_KEY = 0
_INIT_KEY = 1
_SHUFFLE_KEY = 2
_DROPOUT_KEY = 3


@dataclass(frozen=True)
class ProbeConfig:
    hidden: tuple[int, int] = (512, 100)
    dropout: tuple[float, float] = (0.5, 0.3)
    lr: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 100
    early_stop_patience: int = 10
    val_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if len(self.hidden) != 2 or any(h < 1 for h in self.hidden):
            raise ValueError(f"hidden must be two positive widths, got {self.hidden}")
        if len(self.dropout) != 2 or not all(0 <= p < 1 for p in self.dropout):
            raise ValueError(f"dropout rates must be in [0, 1), got {self.dropout}")
        if not 0.0 < self.val_fraction < 0.5:
            raise ValueError(f"val_fraction must be in (0, 0.5), got {self.val_fraction}")
        if self.max_epochs < 1 or self.early_stop_patience < 1:
            raise ValueError("max_epochs and early_stop_patience must be >= 1")

    def to_dict(self) -> dict:
        return {
            "hidden": list(self.hidden),
            "dropout": list(self.dropout),
            "lr": self.lr,
            "batch_size": self.batch_size,
            "max_epochs": self.max_epochs,
            "early_stop_patience": self.early_stop_patience,
            "val_fraction": self.val_fraction,
            "seed": self.seed,
        }


@dataclass
class ProbeResult:
    test_accuracy: float
    chance_floor: float  # majority-class frequency of the test labels
    best_epoch: int
    epochs_run: int
    val_losses: tuple[float, ...]


def _init_probe(config: ProbeConfig, in_dim: int, n_classes: int) -> dict[str, ad.Tensor]:
    dims = [in_dim, *config.hidden, n_classes]
    params: dict[str, ad.Tensor] = {}
    for i, (fan_in, fan_out) in enumerate(zip(dims, dims[1:])):
        gen = rngmod.stream(config.seed, rngmod.PROBE, _INIT_KEY, i)
        bound = 1.0 / math.sqrt(fan_in)
        params[f"w{i}"] = ad.Tensor(
            gen.uniform(-bound, bound, size=(fan_in, fan_out)).astype(np.float32),
            requires_grad=True,
        )
        params[f"b{i}"] = ad.Tensor(
            np.zeros(fan_out, dtype=np.float32), requires_grad=True
        )
    return params


def _probe_logits(
    params: dict[str, ad.Tensor], x: ad.Tensor, config: ProbeConfig,
    training: bool, rng: np.random.Generator | None,
) -> ad.Tensor:
    h = ad.relu(ad.add(ad.matmul(x, params["w0"]), params["b0"]))
    h = ad.dropout(h, config.dropout[0], rng, training)
    h = ad.relu(ad.add(ad.matmul(h, params["w1"]), params["b1"]))
    h = ad.dropout(h, config.dropout[1], rng, training)
    return ad.add(ad.matmul(h, params["w2"]), params["b2"])


def _mean_loss(params, x: np.ndarray, y: np.ndarray, config: ProbeConfig) -> float:
    total, count = 0.0, 0
    with ad.no_grad():
        for lo in range(0, len(x), 1024):
            xb = ad.Tensor(x[lo : lo + 1024])
            logits = _probe_logits(params, xb, config, training=False, rng=None)
            loss = ad.softmax_cross_entropy(logits, y[lo : lo + 1024])
            total += loss.data.item() * len(xb.data)
            count += len(xb.data)
    return total / count


def _predict(params, x: np.ndarray, config: ProbeConfig) -> np.ndarray:
    out = np.empty(len(x), dtype=np.int64)
    with ad.no_grad():
        for lo in range(0, len(x), 1024):
            logits = _probe_logits(
                params, ad.Tensor(x[lo : lo + 1024]), config, training=False, rng=None
            )
            out[lo : lo + 1024] = logits.data.argmax(axis=1)
    return out


def majority_fraction(labels: np.ndarray) -> float:
    return float(np.bincount(labels).max() / len(labels))


def train_probe(
    train_features: np.ndarray,
    train_labels: np.ndarray,
    test_features: np.ndarray,
    test_labels: np.ndarray,
    n_classes: int,
    config: ProbeConfig = ProbeConfig(),
) -> ProbeResult:
    """Fit the fixed probe on frozen features; report test accuracy.

    The last ``val_fraction`` of a seeded shuffle is held out for early
    stopping on validation loss (best weights restored); features are
    z-normalized per dimension with statistics of the fitting portion.
    """
    train_labels = np.asarray(train_labels, dtype=np.int64)
    test_labels = np.asarray(test_labels, dtype=np.int64)
    if len(np.unique(train_labels)) < 2:
        raise ValueError("degenerate labels: need at least 2 classes present")

    perm = rngmod.stream(config.seed, rngmod.PROBE, _SPLIT_KEY).permutation(
        len(train_features)
    )
    n_val = max(1, int(round(len(perm) * config.val_fraction)))
    fit_idx, val_idx = perm[:-n_val], perm[-n_val:]

    mean = train_features[fit_idx].mean(axis=0)
    std = np.maximum(train_features[fit_idx].std(axis=0), 1e-6)

    def norm(x):
        return ((x - mean) / std).astype(np.float32)

    x_fit, y_fit = norm(train_features[fit_idx]), train_labels[fit_idx]
    x_val, y_val = norm(train_features[val_idx]), train_labels[val_idx]

    params = _init_probe(config, train_features.shape[1], n_classes)
    optimizer = ad.Adam(params.values(), lr=config.lr)

    best_val = math.inf
    best_epoch = -1
    best_params: dict[str, np.ndarray] = {}
    patience = config.early_stop_patience
    val_losses = []

    for epoch in range(config.max_epochs):
        order = rngmod.stream(config.seed, rngmod.PROBE, _SHUFFLE_KEY, epoch).permutation(
            len(x_fit)
        )
        for batch_idx, lo in enumerate(range(0, len(order), config.batch_size)):
            idx = order[lo : lo + config.batch_size]
            drop_rng = rngmod.stream(
                config.seed, rngmod.PROBE, _DROPOUT_KEY, epoch, batch_idx
            )
            logits = _probe_logits(
                params, ad.Tensor(x_fit[idx]), config, training=True, rng=drop_rng
            )
            loss = ad.softmax_cross_entropy(logits, y_fit[idx])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()

        val_loss = _mean_loss(params, x_val, y_val, config)
        val_losses.append(val_loss)
        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best_params = {n: p.data.copy() for n, p in params.items()}
            patience = config.early_stop_patience
        else:
            patience -= 1
            if patience == 0:
                break

    for name, tensor in params.items():
        tensor.data = best_params[name]

    accuracy = float((_predict(params, norm(test_features), config) == test_labels).mean())
    return ProbeResult(
        test_accuracy=accuracy,
        chance_floor=majority_fraction(test_labels),
        best_epoch=best_epoch,
        epochs_run=len(val_losses),
        val_losses=tuple(val_losses),
    )


# ------------------------------------------------------------------
# performance matrix
# ------------------------------------------------------------------


@dataclass
class PerformanceMatrix:
    """cells[i][j]: test accuracy probing task j on features from the
    run that preserved task i."""

    task_names: tuple[str, ...]
    cells: np.ndarray
    chance: tuple[float, ...]  # per-column majority-class floor
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.cells = np.asarray(self.cells, dtype=np.float64)
        n = len(self.task_names)
        if self.cells.shape != (n, n):
            raise ValueError(f"matrix must be {n}x{n}, got {self.cells.shape}")
        if ((self.cells < 0) | (self.cells > 1)).any():
            raise ValueError("accuracies must lie in [0, 1]")
        if len(self.chance) != n:
            raise ValueError(f"need one chance floor per task, got {len(self.chance)}")

    def cell(self, preserved: str, probed: str) -> float:
        i = self.task_names.index(preserved)
        j = self.task_names.index(probed)
        return float(self.cells[i, j])

    def to_dict(self) -> dict:
        return {
            "tasks": list(self.task_names),
            "cells": [[float(v) for v in row] for row in self.cells],
            "chance": list(self.chance),
            "metadata": self.metadata,
        }

    @staticmethod
    def from_dict(d: dict) -> "PerformanceMatrix":
        return PerformanceMatrix(
            task_names=tuple(d["tasks"]),
            cells=np.asarray(d["cells"], dtype=np.float64),
            chance=tuple(d["chance"]),
            metadata=d.get("metadata", {}),
        )

    def to_json_bytes(self) -> bytes:
        return (json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n").encode()

    def to_csv_bytes(self) -> bytes:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["preserved\\probed", *self.task_names])
        for name, row in zip(self.task_names, self.cells):
            writer.writerow([name] + [f"{v:.12g}" for v in row])
        writer.writerow(["chance"] + [f"{v:.12g}" for v in self.chance])
        return buf.getvalue().encode()

    def save(self, out_dir: Path) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / MATRIX_JSON).write_bytes(self.to_json_bytes())
        (out_dir / MATRIX_CSV).write_bytes(self.to_csv_bytes())

    @staticmethod
    def load(path: Path) -> "PerformanceMatrix":
        return PerformanceMatrix.from_dict(json.loads(Path(path).read_text()))


def checkpoint_digest(ckpt: Checkpoint) -> str:
    """SHA-256 over the parameter tensors, in name order."""
    h = hashlib.sha256()
    for name in sorted(ckpt.params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(ckpt.params[name], dtype="<f4").tobytes())
    return h.hexdigest()


def build_matrix(
    checkpoints: dict[str, Checkpoint],
    registry: TaskRegistry,
    train_data: tuple[np.ndarray, dict[str, np.ndarray]],
    test_data: tuple[np.ndarray, dict[str, np.ndarray]],
    config: ProbeConfig = ProbeConfig(),
) -> PerformanceMatrix:
    """Probe every task against every preserved-task run's features.

    One probe seed serves all cells, so feature quality is the only
    varying factor. Requires one checkpoint per registry task.
    """
    names = tuple(registry.names)
    for name in names:
        if name not in checkpoints:
            raise ValueError(f"missing checkpoint for task {name!r}")

    train_images, train_labels = train_data
    test_images, test_labels = test_data
    cells = np.zeros((len(names), len(names)))
    provenance = {}
    for i, preserved in enumerate(names):
        ckpt = checkpoints[preserved]
        provenance[preserved] = {
            "preserved_task": ckpt.config.preserved_task,
            "epoch": ckpt.epoch,
            "params_sha256": checkpoint_digest(ckpt),
        }
        feats_train = extract_features(ckpt, train_images)
        feats_test = extract_features(ckpt, test_images)
        for j, probed in enumerate(names):
            result = train_probe(
                feats_train, train_labels[probed],
                feats_test, test_labels[probed],
                registry.get(probed).num_classes, config,
            )
            cells[i, j] = result.test_accuracy

    chance = tuple(majority_fraction(test_labels[name]) for name in names)
    return PerformanceMatrix(
        task_names=names,
        cells=cells,
        chance=chance,
        metadata={
            "tasks": registry.to_dict(),
            "probe_config": config.to_dict(),
            "checkpoints": provenance,
        },
    )
