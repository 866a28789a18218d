"""Multi-head CNN training with optional suppression branches.

One shared convolutional trunk produces a feature vector; a linear head
classifies the preserved task, and optional suppression branches push
the trunk to *unlearn* other signals. A branch either maximizes a known
task's loss directly (negative loss) or sits behind a gradient-reversal
node — in which case it can also be fed fresh uniformly random labels
each minibatch to suppress structure no one has named in advance.

The optimized objective and the reported one differ only in where the
sign lives: with branch coefficient c and reversal scale alpha, the
trunk gradient is lambda*dL_p - c*alpha*dL_s, so c=1 with alpha=1-lambda
realizes the same vector field as the explicit lambda*L_p-(1-lambda)*L_s
objective. Suppressed cross-entropy terms are clamped at 4*ln(n_classes)
so the maximized term cannot diverge.
"""

from __future__ import annotations

import csv
import io
import json
import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import rng as rngmod
from .tasks import TaskRegistry

BRANCH_MODES = ("known_negative_loss", "known_gr", "random_gr")
SUPPRESSION_CAP_NATS = 4.0  # clamp suppressed CE at this multiple of ln(n)

CHECKPOINT_MAGIC = b"OLCP"
CHECKPOINT_VERSION = 1
CHECKPOINT_FILE = "checkpoint.bin"
FINAL_CHECKPOINT_FILE = "checkpoint_final.bin"
TRAIN_LOG_FILE = "train_log.csv"


class TrainingDiverged(RuntimeError):
    """A loss became non-finite; training aborted."""


@dataclass(frozen=True)
class SuppressionBranch:
    """One suppression head: what it reads and how it pushes back."""

    mode: str
    n_classes: int
    task: str | None = None
    alpha: float | None = None  # reversal scale; None means 1 - lambda

    def __post_init__(self):
        if self.mode not in BRANCH_MODES:
            raise ValueError(f"unknown branch mode {self.mode!r}")
        if self.n_classes < 2:
            raise ValueError(f"branch needs at least 2 classes, got {self.n_classes}")
        if self.mode == "random_gr" and self.task is not None:
            raise ValueError("random_gr draws fresh labels and takes no task")
        if self.mode != "random_gr" and not self.task:
            raise ValueError(f"{self.mode} branch requires a task name")
        if self.alpha is not None and self.alpha < 0:
            raise ValueError(f"alpha must be non-negative, got {self.alpha}")

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "n_classes": self.n_classes,
            "task": self.task,
            "alpha": self.alpha,
        }

    @staticmethod
    def from_dict(d: dict) -> "SuppressionBranch":
        return SuppressionBranch(
            mode=d["mode"], n_classes=d["n_classes"],
            task=d.get("task"), alpha=d.get("alpha"),
        )


@dataclass(frozen=True)
class ModelConfig:
    preserved_task: str
    input_side: int = 64
    conv_blocks: tuple[tuple[int, int], ...] = ((16, 3), (32, 3))
    fc_feature_dim: int = 256
    suppression: tuple[SuppressionBranch, ...] = ()
    lam: float = 0.5  # the preserved/suppressed trade-off weight
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 30
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must be in [0, 1], got {self.lam}")
        if self.fc_feature_dim < 1:
            raise ValueError("fc_feature_dim must be positive")
        if self.input_side < 4 * 2 ** len(self.conv_blocks):
            raise ValueError(
                f"input_side {self.input_side} too small for "
                f"{len(self.conv_blocks)} pooling stages"
            )
        if not self.conv_blocks:
            raise ValueError("need at least one conv block")
        if self.batch_size < 1 or self.epochs < 1 or self.lr <= 0:
            raise ValueError("batch_size/epochs must be >= 1 and lr > 0")

    def validate_for(self, registry: TaskRegistry) -> None:
        preserved = registry.get(self.preserved_task)  # raises KeyError if absent
        for branch in self.suppression:
            if branch.mode == "random_gr":
                continue  # fresh-label branches need no registry cross-check
            if branch.task == self.preserved_task:
                raise ValueError("cannot suppress the preserved task")
            spec = registry.get(branch.task)
            if branch.n_classes != spec.num_classes:
                raise ValueError(
                    f"branch for {branch.task!r} declares {branch.n_classes} "
                    f"classes but the task has {spec.num_classes}"
                )

    def branch_alpha(self, branch: SuppressionBranch) -> float:
        return (1.0 - self.lam) if branch.alpha is None else branch.alpha

    def to_dict(self) -> dict:
        return {
            "preserved_task": self.preserved_task,
            "input_side": self.input_side,
            "conv_blocks": [list(b) for b in self.conv_blocks],
            "fc_feature_dim": self.fc_feature_dim,
            "suppression": [b.to_dict() for b in self.suppression],
            "lambda": self.lam,
            "lr": self.lr,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "seed": self.seed,
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        return ModelConfig(
            preserved_task=d["preserved_task"],
            input_side=d["input_side"],
            conv_blocks=tuple(tuple(b) for b in d["conv_blocks"]),
            fc_feature_dim=d["fc_feature_dim"],
            suppression=tuple(
                SuppressionBranch.from_dict(b) for b in d["suppression"]
            ),
            lam=d["lambda"],
            lr=d["lr"],
            batch_size=d["batch_size"],
            epochs=d["epochs"],
            seed=d["seed"],
        )


def default_random_branches(
    registry: TaskRegistry, preserved_task: str
) -> tuple[SuppressionBranch, ...]:
    """One random-label reversal branch per distinct class count among
    the non-preserved tasks (the alphabets a leak could use)."""
    counts = sorted(
        {t.num_classes for t in registry if t.name != preserved_task}
    )
    return tuple(SuppressionBranch("random_gr", n) for n in counts)


def random_labels(batch_size: int, n_classes: int, rng: np.random.Generator) -> np.ndarray:
    """I.i.d. uniform class indices, drawn fresh for every minibatch."""
    if n_classes < 2:
        raise ValueError(f"need at least 2 classes, got {n_classes}")
    return rng.integers(n_classes, size=batch_size)


# ------------------------------------------------------------------
# model
# ------------------------------------------------------------------

# Init-stream slots: trunk parameters take consecutive indices from 0,
# the preserved head starts at 64 and suppression heads at 128. Fixed
# slots keep trunk draws identical no matter which heads exist, so a
# suppressed run and a baseline share their starting trunk bit-for-bit.
_PRESERVED_SLOT = 64
_SUPPRESSION_SLOT = 128


def _uniform_init(shape: tuple, fan_in: int, seed: int, slot: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    gen = rngmod.stream(seed, rngmod.INIT, slot)
    return gen.uniform(-bound, bound, size=shape).astype(np.float32)


class Model:
    """Shared trunk plus one linear head per objective."""

    def __init__(self, config: ModelConfig, registry: TaskRegistry):
        config.validate_for(registry)
        self.config = config
        self.registry = registry
        self.params: dict[str, ad.Tensor] = {}

        slot = 0
        channels = 3
        side = config.input_side
        for i, (filters, kernel) in enumerate(config.conv_blocks):
            w = _uniform_init(
                (filters, channels, kernel, kernel),
                channels * kernel * kernel, config.seed, slot,
            )
            self.params[f"conv{i}.w"] = ad.Tensor(w, requires_grad=True)
            self.params[f"conv{i}.b"] = ad.Tensor(
                np.zeros(filters, dtype=np.float32), requires_grad=True
            )
            slot += 1
            channels = filters
            side //= 2
        self.flat_dim = channels * side * side

        self.params["fc.w"] = ad.Tensor(
            _uniform_init(
                (self.flat_dim, config.fc_feature_dim), self.flat_dim,
                config.seed, slot,
            ),
            requires_grad=True,
        )
        self.params["fc.b"] = ad.Tensor(
            np.zeros(config.fc_feature_dim, dtype=np.float32), requires_grad=True
        )

        def add_head(name: str, n_classes: int, slot: int) -> None:
            self.params[f"{name}.w"] = ad.Tensor(
                _uniform_init(
                    (config.fc_feature_dim, n_classes), config.fc_feature_dim,
                    config.seed, slot,
                ),
                requires_grad=True,
            )
            self.params[f"{name}.b"] = ad.Tensor(
                np.zeros(n_classes, dtype=np.float32), requires_grad=True
            )

        preserved_n = registry.get(config.preserved_task).num_classes
        add_head("preserved", preserved_n, _PRESERVED_SLOT)
        for i, branch in enumerate(config.suppression):
            add_head(f"suppress{i}", branch.n_classes, _SUPPRESSION_SLOT + i)

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def features(self, x: ad.Tensor) -> ad.Tensor:
        h = x
        for i in range(len(self.config.conv_blocks)):
            h = ad.conv2d(h, self.params[f"conv{i}.w"], self.params[f"conv{i}.b"])
            h = ad.relu(h)
            h = ad.maxpool2(h)
        h = ad.flatten(h)
        h = ad.add(ad.matmul(h, self.params["fc.w"]), self.params["fc.b"])
        return ad.relu(h)

    def _head(self, feats: ad.Tensor, name: str) -> ad.Tensor:
        return ad.add(
            ad.matmul(feats, self.params[f"{name}.w"]), self.params[f"{name}.b"]
        )

    def forward(self, x: ad.Tensor) -> tuple[ad.Tensor, dict[str, ad.Tensor]]:
        feats = self.features(x)
        logits = {"preserved": self._head(feats, "preserved")}
        for i, branch in enumerate(self.config.suppression):
            name = f"suppress{i}"
            if branch.mode in ("known_gr", "random_gr"):
                source = ad.grad_reverse(feats, self.config.branch_alpha(branch))
            else:
                source = feats
            logits[name] = self._head(source, name)
        return feats, logits


# ------------------------------------------------------------------
# normalization & evaluation
# ------------------------------------------------------------------


def channel_stats(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean/std over a uint8 NHWC image stack."""
    flat = images.reshape(-1, images.shape[-1]).astype(np.float64)
    mean = flat.mean(axis=0)
    std = np.maximum(flat.std(axis=0), 1e-6)
    return mean.astype(np.float32), std.astype(np.float32)


def normalize_batch(
    images: np.ndarray, mean: np.ndarray, std: np.ndarray
) -> np.ndarray:
    """uint8 NHWC -> z-normalized float32 NCHW."""
    x = (images.astype(np.float32) - mean) / std
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2))


def predict_preserved(
    model: Model, images: np.ndarray, mean: np.ndarray, std: np.ndarray,
    batch_size: int = 256,
) -> np.ndarray:
    out = np.empty(len(images), dtype=np.int64)
    with ad.no_grad():
        for lo in range(0, len(images), batch_size):
            batch = normalize_batch(images[lo : lo + batch_size], mean, std)
            feats = model.features(ad.Tensor(batch))
            logits = ad.add(
                ad.matmul(feats, model.params["preserved.w"]),
                model.params["preserved.b"],
            )
            out[lo : lo + batch_size] = logits.data.argmax(axis=1)
    return out


# ------------------------------------------------------------------
# checkpoints
# ------------------------------------------------------------------


@dataclass
class Checkpoint:
    config: ModelConfig
    registry: TaskRegistry
    epoch: int  # completed epochs
    params: dict[str, np.ndarray]
    adam_t: int
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    norm_mean: np.ndarray
    norm_std: np.ndarray

    @staticmethod
    def capture(model: Model, optimizer: ad.Adam, epoch: int,
                norm_mean: np.ndarray, norm_std: np.ndarray) -> "Checkpoint":
        names = list(model.params)
        state = optimizer.state_dict()
        return Checkpoint(
            config=model.config,
            registry=model.registry,
            epoch=epoch,
            params={n: model.params[n].data.copy() for n in names},
            adam_t=state["t"],
            adam_m=dict(zip(names, state["m"])),
            adam_v=dict(zip(names, state["v"])),
            norm_mean=np.array(norm_mean, copy=True),
            norm_std=np.array(norm_std, copy=True),
        )

    def build(self) -> tuple[Model, ad.Adam]:
        """Reconstruct the live model and optimizer at this state."""
        model = Model(self.config, self.registry)
        for name, tensor in model.params.items():
            tensor.data = np.array(self.params[name], copy=True)
        optimizer = ad.Adam(model.params.values(), lr=self.config.lr)
        optimizer.load_state_dict(
            {
                "t": self.adam_t,
                "m": [self.adam_m[n] for n in model.params],
                "v": [self.adam_v[n] for n in model.params],
            }
        )
        return model, optimizer


def save_checkpoint(ckpt: Checkpoint, path: Path) -> None:
    """Versioned binary: JSON header plus little-endian f32 blobs."""
    names = list(ckpt.params)
    blobs: list[np.ndarray] = []
    tensors = []
    offset = 0
    for prefix, table in (("", ckpt.params), ("adam.m.", ckpt.adam_m),
                          ("adam.v.", ckpt.adam_v)):
        for name in names:
            arr = np.ascontiguousarray(table[name], dtype="<f4")
            tensors.append(
                {"name": prefix + name, "shape": list(arr.shape), "offset": offset}
            )
            blobs.append(arr)
            offset += arr.nbytes
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": ckpt.config.to_dict(),
        "registry": ckpt.registry.to_dict(),
        "epoch": ckpt.epoch,
        "adam_t": ckpt.adam_t,
        "norm_mean": [float(v) for v in ckpt.norm_mean],
        "norm_std": [float(v) for v in ckpt.norm_std],
        "tensors": tensors,
    }
    head = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(head)))
        fh.write(head)
        for blob in blobs:
            fh.write(blob.tobytes())


def load_checkpoint(path: Path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, head_len = struct.unpack("<II", data[4:12])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[12 : 12 + head_len])
    body = data[12 + head_len :]

    tables: dict[str, dict[str, np.ndarray]] = {"": {}, "adam.m.": {}, "adam.v.": {}}
    for entry in header["tensors"]:
        size = int(np.prod(entry["shape"])) if entry["shape"] else 1
        raw = body[entry["offset"] : entry["offset"] + 4 * size]
        arr = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"]).copy()
        name = entry["name"]
        for prefix in ("adam.m.", "adam.v.", ""):
            if name.startswith(prefix):
                tables[prefix][name[len(prefix):]] = arr
                break
    return Checkpoint(
        config=ModelConfig.from_dict(header["config"]),
        registry=TaskRegistry.from_dict(header["registry"]),
        epoch=header["epoch"],
        params=tables[""],
        adam_t=header["adam_t"],
        adam_m=tables["adam.m."],
        adam_v=tables["adam.v."],
        norm_mean=np.asarray(header["norm_mean"], dtype=np.float32),
        norm_std=np.asarray(header["norm_std"], dtype=np.float32),
    )


# ------------------------------------------------------------------
# training
# ------------------------------------------------------------------


@dataclass
class EpochLog:
    epoch: int
    preserved_train_acc: float
    preserved_test_acc: float
    branch_losses: tuple[float, ...]
    preserved_loss: float
    combined_loss: float


@dataclass
class TrainResult:
    config: ModelConfig
    registry: TaskRegistry
    log: list[EpochLog]
    final: Checkpoint
    best: Checkpoint
    best_epoch: int
    best_test_acc: float

    def log_csv_bytes(self) -> bytes:
        n_branches = len(self.config.suppression)
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(
            ["epoch", "preserved_train_acc", "preserved_test_acc"]
            + [f"branch_{i}_loss" for i in range(n_branches)]
            + ["preserved_loss", "combined_loss"]
        )
        for row in self.log:
            writer.writerow(
                [row.epoch, f"{row.preserved_train_acc:.6f}",
                 f"{row.preserved_test_acc:.6f}"]
                + [f"{v:.8f}" for v in row.branch_losses]
                + [f"{row.preserved_loss:.8f}", f"{row.combined_loss:.8f}"]
            )
        return buf.getvalue().encode()

    @property
    def deliverable(self) -> Checkpoint:
        """The checkpoint downstream consumers should evaluate.

        A plain run's deliverable is its best epoch by preserved-task
        accuracy. A suppressed run's is the final state: selecting by
        preserved accuracy alone would systematically pick the epoch
        where the adversarial branches had scrubbed the least.
        """
        return self.final if self.config.suppression else self.best

    def save(self, out_dir: Path) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(self.deliverable, out_dir / CHECKPOINT_FILE)
        save_checkpoint(self.final, out_dir / FINAL_CHECKPOINT_FILE)
        (out_dir / TRAIN_LOG_FILE).write_bytes(self.log_csv_bytes())


def train(
    config: ModelConfig,
    registry: TaskRegistry,
    train_data: tuple[np.ndarray, dict[str, np.ndarray]],
    test_data: tuple[np.ndarray, dict[str, np.ndarray]],
    start: Checkpoint | None = None,
    init_from: Checkpoint | None = None,
    progress: Callable[[EpochLog], None] | None = None,
) -> TrainResult:
    """Run the epoch budget (or the remainder of it when resuming).

    ``start`` resumes the same run bit-exactly (same config except the
    epoch budget). ``init_from`` warm-starts a *new* run from another
    run's weights: every parameter whose name and shape match is copied
    (trunk and preserved head), anything new — typically freshly
    attached suppression heads — keeps its own deterministic init, and
    the optimizer starts cold. This is how an already-skilled extractor
    is fine-tuned to scrub a leaking attribute without relearning its
    preserved task from scratch.

    The best checkpoint is the epoch with the highest preserved-task
    test accuracy; the final checkpoint is the last epoch's state and
    resumes bit-exactly. ``progress`` is called once per finished epoch.
    """
    train_images, train_labels = train_data
    test_images, test_labels = test_data
    preserved = config.preserved_task
    y_preserved = train_labels[preserved]

    if start is not None and init_from is not None:
        raise ValueError("pass either start (resume) or init_from (warm start)")
    if start is not None:
        if replace(start.config, epochs=config.epochs) != config:
            raise ValueError("checkpoint was produced by a different config")
        model, optimizer = start.build()
        norm_mean, norm_std = start.norm_mean, start.norm_std
        first_epoch = start.epoch
    else:
        model = Model(config, registry)
        optimizer = ad.Adam(model.params.values(), lr=config.lr)
        norm_mean, norm_std = channel_stats(train_images)
        first_epoch = 0
        if init_from is not None:
            src = init_from.config
            same_net = (
                src.preserved_task == config.preserved_task
                and src.input_side == config.input_side
                and src.conv_blocks == config.conv_blocks
                and src.fc_feature_dim == config.fc_feature_dim
            )
            if not same_net:
                raise ValueError(
                    "init_from checkpoint has a different architecture or "
                    "preserved task"
                )
            for name, arr in init_from.params.items():
                dst = model.params.get(name)
                if dst is not None and dst.data.shape == arr.shape:
                    dst.data = arr.astype(dst.data.dtype, copy=True)
            # the copied trunk was trained under the source run's input
            # scaling, so keep it
            norm_mean, norm_std = init_from.norm_mean, init_from.norm_std

    caps = [
        SUPPRESSION_CAP_NATS * math.log(branch.n_classes)
        for branch in config.suppression
    ]

    log: list[EpochLog] = []
    best: Checkpoint | None = None
    best_epoch, best_acc = -1, -1.0
    n = len(train_images)

    for epoch in range(first_epoch, config.epochs):
        perm = rngmod.stream(config.seed, rngmod.SHUFFLE, epoch).permutation(n)
        correct = 0
        sum_preserved = 0.0
        sum_branches = np.zeros(len(config.suppression), dtype=np.float64)

        for batch_idx, lo in enumerate(range(0, n, config.batch_size)):
            idx = perm[lo : lo + config.batch_size]
            x = ad.Tensor(normalize_batch(train_images[idx], norm_mean, norm_std))
            _, logits = model.forward(x)

            loss_p = ad.softmax_cross_entropy(logits["preserved"], y_preserved[idx])
            total = ad.mul(loss_p, config.lam)
            branch_values = []
            for i, branch in enumerate(config.suppression):
                if branch.mode == "random_gr":
                    labels = random_labels(
                        len(idx), branch.n_classes,
                        rngmod.stream(
                            config.seed, rngmod.RANDOM_LABELS, i, epoch, batch_idx
                        ),
                    )
                else:
                    labels = train_labels[branch.task][idx]
                loss_s = ad.clamp_max(
                    ad.softmax_cross_entropy(logits[f"suppress{i}"], labels), caps[i]
                )
                branch_values.append(loss_s.data.item())
                if branch.mode == "known_negative_loss":
                    total = ad.add(total, ad.mul(loss_s, -(1.0 - config.lam)))
                else:  # the reversal node supplies the sign flip
                    total = ad.add(total, loss_s)

            p_value = loss_p.data.item()
            if not (
                math.isfinite(p_value)
                and all(math.isfinite(v) for v in branch_values)
            ):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} batch {batch_idx}: "
                    f"preserved={p_value} branches={branch_values}"
                )

            optimizer.zero_grad()
            total.backward()
            optimizer.step()

            correct += int(
                (logits["preserved"].data.argmax(axis=1) == y_preserved[idx]).sum()
            )
            sum_preserved += p_value * len(idx)
            sum_branches += np.asarray(branch_values) * len(idx)

        mean_p = sum_preserved / n
        mean_branches = tuple(float(v) for v in sum_branches / n)
        combined = config.lam * mean_p - (1.0 - config.lam) * sum(mean_branches)
        test_pred = predict_preserved(model, test_images, norm_mean, norm_std)
        test_acc = float((test_pred == test_labels[preserved]).mean())
        log.append(
            EpochLog(
                epoch=epoch,
                preserved_train_acc=correct / n,
                preserved_test_acc=test_acc,
                branch_losses=mean_branches,
                preserved_loss=mean_p,
                combined_loss=combined,
            )
        )
        if progress is not None:
            progress(log[-1])
        if test_acc > best_acc:
            best_acc = test_acc
            best_epoch = epoch
            best = Checkpoint.capture(model, optimizer, epoch + 1, norm_mean, norm_std)

    final = Checkpoint.capture(model, optimizer, config.epochs, norm_mean, norm_std)
    if best is None:  # resumed past the budget: nothing trained
        best, best_epoch, best_acc = final, config.epochs - 1, float("nan")
    return TrainResult(
        config=config,
        registry=registry,
        log=log,
        final=final,
        best=best,
        best_epoch=best_epoch,
        best_test_acc=best_acc,
    )


def extract_features(
    ckpt: Checkpoint, images: np.ndarray, batch_size: int = 256
) -> np.ndarray:
    """Eval-mode trunk output, one row per image."""
    model, _ = ckpt.build()
    out = np.empty((len(images), ckpt.config.fc_feature_dim), dtype=np.float32)
    with ad.no_grad():
        for lo in range(0, len(images), batch_size):
            batch = normalize_batch(
                images[lo : lo + batch_size], ckpt.norm_mean, ckpt.norm_std
            )
            out[lo : lo + batch_size] = model.features(ad.Tensor(batch)).data
    return out
