"""Colored handwritten-digit ingestion.

Reads the standard IDX container for digit images and labels, then
recolors each grayscale image with an independently sampled foreground
and background color (always distinct), yielding a three-task dataset:
digit (10), fgcolor (10), bgcolor (10). Color draws use one stream per
image index, so the output is deterministic and order-independent.
"""

from __future__ import annotations

import gzip
import hashlib
import struct
import urllib.request
from dataclasses import dataclass, field
from math import prod
from pathlib import Path

import numpy as np
from PIL import Image

from . import rng as rngmod
from .dataset import (
    FORMAT_VERSION,
    MANIFEST_NAME,
    manifest_csv_bytes,
    parse_manifest_csv,
)
from .tasks import MNIST_COLOR_NAMES, MNIST_REGISTRY

IMAGES_MAGIC = 2051
LABELS_MAGIC = 2049

IDX_FILE_NAMES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}

COLOR_PALETTE: dict[str, tuple[int, int, int]] = {
    "red": (255, 0, 0),
    "green": (0, 128, 0),
    "blue": (0, 0, 255),
    "yellow": (255, 255, 0),
    "cyan": (0, 255, 255),
    "magenta": (255, 0, 255),
    "orange": (255, 165, 0),
    "purple": (128, 0, 128),
    "pink": (255, 105, 180),
    "brown": (139, 69, 19),
}

_SPLIT_CODE = {"train": 0, "test": 1}


class IdxFormatError(ValueError):
    """The byte stream is not a well-formed IDX file."""


@dataclass(frozen=True)
class IdxFile:
    magic: int
    dims: tuple[int, ...]
    payload: bytes

    def as_array(self) -> np.ndarray:
        return np.frombuffer(self.payload, dtype=np.uint8).reshape(self.dims)


def parse_idx(data: bytes) -> IdxFile:
    """Parse an IDX byte stream (magic, big-endian dims, uint8 payload)."""
    if len(data) < 4:
        raise IdxFormatError("bad magic: file shorter than a magic number")
    magic = struct.unpack(">I", data[:4])[0]
    if magic == IMAGES_MAGIC:
        ndim = 3
    elif magic == LABELS_MAGIC:
        ndim = 1
    else:
        raise IdxFormatError(f"bad magic {magic}")
    header_end = 4 + 4 * ndim
    if len(data) < header_end:
        raise IdxFormatError("truncated payload: incomplete dimension header")
    dims = struct.unpack(f">{ndim}I", data[4:header_end])
    payload = data[header_end:]
    if len(payload) != prod(dims):
        raise IdxFormatError(
            f"truncated payload: dims {dims} need {prod(dims)} bytes, got {len(payload)}"
        )
    return IdxFile(magic=magic, dims=dims, payload=payload)


def load_idx_pair(images_path: Path, labels_path: Path) -> tuple[np.ndarray, np.ndarray]:
    """Read one (images, labels) IDX file pair from disk."""
    images = parse_idx(Path(images_path).read_bytes())
    labels = parse_idx(Path(labels_path).read_bytes())
    if images.magic != IMAGES_MAGIC:
        raise IdxFormatError(f"{images_path} is not an image file")
    if labels.magic != LABELS_MAGIC:
        raise IdxFormatError(f"{labels_path} is not a label file")
    if images.dims[0] != labels.dims[0]:
        raise IdxFormatError(
            f"image/label count mismatch: {images.dims[0]} vs {labels.dims[0]}"
        )
    return images.as_array(), labels.as_array()


@dataclass(frozen=True)
class ColorMnistConfig:
    seed: int = 0
    threshold: int = 128
    fg_palette: tuple[tuple[int, int, int], ...] = field(
        default=tuple(COLOR_PALETTE.values())
    )
    bg_palette: tuple[tuple[int, int, int], ...] = field(
        default=tuple(COLOR_PALETTE.values())
    )

    def __post_init__(self):
        for which, palette in (("fg", self.fg_palette), ("bg", self.bg_palette)):
            if len(palette) != 10 or len(set(palette)) != 10:
                raise ValueError(f"{which}_palette must hold 10 distinct colors")
        if not 1 <= self.threshold <= 255:
            raise ValueError(f"threshold must be in [1, 255], got {self.threshold}")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "threshold": self.threshold,
            "fg_palette": [list(c) for c in self.fg_palette],
            "bg_palette": [list(c) for c in self.bg_palette],
        }

    @staticmethod
    def from_dict(d: dict) -> "ColorMnistConfig":
        return ColorMnistConfig(
            seed=d["seed"],
            threshold=d["threshold"],
            fg_palette=tuple(tuple(c) for c in d["fg_palette"]),
            bg_palette=tuple(tuple(c) for c in d["bg_palette"]),
        )


@dataclass(frozen=True)
class MnistLabel:
    digit: int
    fgcolor: int
    bgcolor: int

    def names(self) -> dict[str, str]:
        return {
            t.name: t.class_names[getattr(self, t.name)] for t in MNIST_REGISTRY
        }

    @staticmethod
    def from_names(names: dict[str, str]) -> "MnistLabel":
        return MnistLabel(
            **{t.name: t.index_of(names[t.name]) for t in MNIST_REGISTRY}
        )


@dataclass(frozen=True)
class MnistRow:
    path: str
    split: str
    label: MnistLabel
    instance: int


MNIST_MANIFEST_COLUMNS = ("path", "split", "digit", "fgcolor", "bgcolor", "instance")


@dataclass
class ColorMnistManifest:
    config: ColorMnistConfig
    rows: list[MnistRow]

    def split_rows(self, split: str) -> list[MnistRow]:
        return [r for r in self.rows if r.split == split]

    def header_meta(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "config": self.config.to_dict(),
            "tasks": MNIST_REGISTRY.to_dict(),
        }

    def to_csv_bytes(self) -> bytes:
        def records():
            for row in self.rows:
                names = row.label.names()
                yield (
                    [row.path, row.split]
                    + [names[t.name] for t in MNIST_REGISTRY]
                    + [row.instance]
                )

        return manifest_csv_bytes(self.header_meta(), MNIST_MANIFEST_COLUMNS, records())

    def save(self, path: Path) -> None:
        Path(path).write_bytes(self.to_csv_bytes())

    @staticmethod
    def load(path: Path) -> "ColorMnistManifest":
        meta, records = parse_manifest_csv(
            Path(path).read_text(), MNIST_MANIFEST_COLUMNS, source=str(path)
        )
        config = ColorMnistConfig.from_dict(meta["config"])
        rows = [
            MnistRow(
                path=rec[0],
                split=rec[1],
                label=MnistLabel.from_names(
                    dict(zip(MNIST_MANIFEST_COLUMNS[2:5], rec[2:5]))
                ),
                instance=int(rec[5]),
            )
            for rec in records
        ]
        return ColorMnistManifest(config=config, rows=rows)


def color_assignments(config: ColorMnistConfig, split: str, count: int) -> np.ndarray:
    """The (fg, bg) palette indices for each image index of a split.

    Each image draws from its own stream; a draw with fg == bg is
    rejected and both indices are redrawn, so (fg, bg) is uniform over
    the 90 ordered unequal pairs and each marginal stays uniform.
    """
    out = np.empty((count, 2), dtype=np.int64)
    split_code = _SPLIT_CODE[split]
    for index in range(count):
        rng = rngmod.stream(config.seed, rngmod.COLORIZE, split_code, index)
        while True:
            fg, bg = rng.integers(10, size=2)
            if fg != bg:
                break
        out[index] = fg, bg
    return out


def _recolor(gray: np.ndarray, fg: tuple, bg: tuple, threshold: int) -> np.ndarray:
    mask = gray >= threshold
    img = np.empty(gray.shape + (3,), dtype=np.uint8)
    img[mask] = fg
    img[~mask] = bg
    return img


def colorize(
    train: tuple[np.ndarray, np.ndarray],
    test: tuple[np.ndarray, np.ndarray],
    config: ColorMnistConfig,
    out_dir: Path,
) -> ColorMnistManifest:
    """Write the colored dataset for both splits under ``out_dir``.

    Grayscale intensity at or above ``config.threshold`` becomes the
    sampled foreground color, everything else the background color, so
    the foreground mask is exactly the thresholded source image.
    """
    out_dir = Path(out_dir)
    rows: list[MnistRow] = []
    for split, (images, labels) in (("train", train), ("test", test)):
        if len(images) != len(labels):
            raise ValueError(
                f"{split}: {len(images)} images but {len(labels)} labels"
            )
        (out_dir / "images" / split).mkdir(parents=True, exist_ok=True)
        assignments = color_assignments(config, split, len(images))
        for index, (gray, digit) in enumerate(zip(images, labels)):
            fg_idx, bg_idx = (int(v) for v in assignments[index])
            img = _recolor(
                gray, config.fg_palette[fg_idx], config.bg_palette[bg_idx],
                config.threshold,
            )
            rel = f"images/{split}/{index:05d}.png"
            Image.fromarray(img).save(out_dir / rel, format="PNG")
            rows.append(
                MnistRow(
                    path=rel,
                    split=split,
                    label=MnistLabel(int(digit), fg_idx, bg_idx),
                    instance=index,
                )
            )
    manifest = ColorMnistManifest(config=config, rows=rows)
    manifest.save(out_dir / MANIFEST_NAME)
    return manifest


def load_colored_split(
    data_dir: Path, split: str
) -> tuple[np.ndarray, dict[str, np.ndarray], ColorMnistManifest]:
    """Load one colored split as (images uint8 NHWC, per-task labels)."""
    data_dir = Path(data_dir)
    manifest = ColorMnistManifest.load(data_dir / MANIFEST_NAME)
    rows = manifest.split_rows(split)
    if not rows:
        raise ValueError(f"no rows for split {split!r} in {data_dir}")
    first = np.asarray(Image.open(data_dir / rows[0].path).convert("RGB"))
    images = np.empty((len(rows),) + first.shape, dtype=np.uint8)
    images[0] = first
    for i, row in enumerate(rows[1:], start=1):
        with Image.open(data_dir / row.path) as im:
            images[i] = np.asarray(im.convert("RGB"))
    labels = {
        t.name: np.asarray([getattr(r.label, t.name) for r in rows], dtype=np.int64)
        for t in MNIST_REGISTRY
    }
    return images, labels, manifest


def fetch_file(url: str, dest: Path, sha256: str | None = None) -> Path:
    """Download one file (gzip transparently decompressed), optionally
    verifying its SHA-256 checksum before the decompression step."""
    dest = Path(dest)
    dest.parent.mkdir(parents=True, exist_ok=True)
    with urllib.request.urlopen(url) as resp:
        data = resp.read()
    if sha256 is not None:
        digest = hashlib.sha256(data).hexdigest()
        if digest != sha256.lower():
            raise IOError(f"checksum mismatch for {url}: got {digest}")
    if data[:2] == b"\x1f\x8b":
        data = gzip.decompress(data)
    dest.write_bytes(data)
    return dest


def fetch_idx_files(
    base_url: str, raw_dir: Path, checksums: dict[str, str] | None = None
) -> dict[str, Path]:
    """Fetch the four standard IDX files from a mirror into ``raw_dir``.

    ``checksums`` maps file names (optionally with a .gz suffix) to
    expected SHA-256 digests of the downloaded bytes.
    """
    checksums = checksums or {}
    paths = {}
    for key, name in IDX_FILE_NAMES.items():
        url = base_url.rstrip("/") + "/" + name
        expected = checksums.get(name) or checksums.get(name + ".gz")
        paths[key] = fetch_file(url, Path(raw_dir) / name, expected)
    return paths


def load_raw_dir(raw_dir: Path) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Read train and test IDX pairs from a directory using the
    standard file names."""
    raw_dir = Path(raw_dir)
    return {
        split: load_idx_pair(
            raw_dir / IDX_FILE_NAMES[f"{split}_images"],
            raw_dir / IDX_FILE_NAMES[f"{split}_labels"],
        )
        for split in ("train", "test")
    }
