"""Procedural five-task image benchmark generator.

Every image shows exactly one filled shape on a plain background, and
every image carries five labels at once: shape (5 classes), fill color
(7), size (3), quadrant location (4), and background kind (3). The
label space is the full Cartesian product — 1260 variations — and the
generator emits the same number of instances per variation, so every
task is perfectly class-balanced by construction.

Rendering is deliberately exact: hard edges, no anti-aliasing, no
rotation, a fixed high-separation palette. That keeps the pixel-level
decoder (`decode_label_oracle`) an exact inverse of the renderer,
which the test suite exercises over all 1260 labels.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, replace
from itertools import product
from pathlib import Path

import numpy as np
from PIL import Image

from . import rng as rngmod
from .tasks import (
    BACKGROUND_NAMES,
    COLOR_NAMES,
    LOCATION_NAMES,
    SHAPE_NAMES,
    SHAPES_REGISTRY,
    SIZE_NAMES,
)

FORMAT_VERSION = 1

# Foreground palette: rainbow order, tuned so every pair (including
# white and black) is at least 60 RGB units apart for unambiguous
# nearest-color matching.
PALETTE: dict[str, tuple[int, int, int]] = {
    "violet": (148, 0, 211),
    "indigo": (75, 0, 130),
    "blue": (0, 0, 255),
    "green": (0, 160, 0),
    "yellow": (255, 255, 0),
    "orange": (255, 140, 0),
    "red": (255, 0, 0),
}
WHITE = (255, 255, 255)
BLACK = (0, 0, 0)

# Bounding-box diameter bands as fractions of the image side, plus the
# per-instance jitter and the decision boundaries the decoder uses.
SIZE_FRACTIONS = (0.18, 0.30, 0.42)
SIZE_JITTER_FRACTION = 0.02
SIZE_CUTS = (0.24, 0.36)

# Quadrant centers (x, y) in a y-up frame: quadrant1 is top-right and
# the numbering runs counter-clockwise, as on the Cartesian plane.
QUADRANT_CENTERS = {
    0: (0.75, 0.75),
    1: (0.25, 0.75),
    2: (0.25, 0.25),
    3: (0.75, 0.25),
}

EDGE_MARGIN_PX = 1.0  # shape bbox stays this far inside the image
QUADRANT_MARGIN_PX = 2.0  # shape center stays this far inside its quadrant

# Continuous jitter is snapped to this sub-pixel lattice. The decoder
# searches the same lattice, so the true geometry is always among its
# candidates and re-renders to the identical pixel set — this is what
# makes the shape oracle exact even for ~11 px shapes, where nearby
# continuous parameters of *different* shapes can rasterize identically.
SNAP = 0.25


def _snap(v: float) -> float:
    return round(v / SNAP) * SNAP


def _in_size_band(diameter: float, side: int) -> bool:
    """Could the renderer have drawn this bbox diameter? Band edges get
    SNAP/2 slack because rendered diameters are snapped to the lattice."""
    frac = diameter / side
    slack = (SNAP / 2) / side
    return any(
        f - SIZE_JITTER_FRACTION - slack <= frac <= f + SIZE_JITTER_FRACTION + slack
        for f in SIZE_FRACTIONS
    )


class InvalidConfig(ValueError):
    """Raised for out-of-range generator settings."""


class UndecodableImage(Exception):
    """The pixel oracle could not invert an image: a rendering-contract
    violation, not a user error."""


@dataclass(frozen=True)
class GenConfig:
    image_side: int = 256
    train_per_variation: int = 50
    test_per_variation: int = 10
    seed: int = 0
    jitter: float = 0.15

    def __post_init__(self):
        if self.image_side < 32:
            raise InvalidConfig(f"image_side must be >= 32, got {self.image_side}")
        if self.train_per_variation < 1 or self.test_per_variation < 1:
            raise InvalidConfig("per-variation counts must be >= 1")
        if not 0.0 <= self.jitter <= 0.25:
            raise InvalidConfig(f"jitter must be in [0, 0.25], got {self.jitter}")

    def to_dict(self) -> dict:
        return {
            "image_side": self.image_side,
            "train_per_variation": self.train_per_variation,
            "test_per_variation": self.test_per_variation,
            "seed": self.seed,
            "jitter": self.jitter,
        }

    @staticmethod
    def from_dict(d: dict) -> "GenConfig":
        return GenConfig(**d)


@dataclass(frozen=True)
class VariationLabel:
    shape: int
    color: int
    size: int
    location: int
    background: int

    def __post_init__(self):
        for task in SHAPES_REGISTRY:
            idx = getattr(self, task.name)
            if not 0 <= idx < task.num_classes:
                raise ValueError(
                    f"{task.name} index {idx} out of range [0, {task.num_classes})"
                )

    def as_tuple(self) -> tuple[int, int, int, int, int]:
        return (self.shape, self.color, self.size, self.location, self.background)

    def names(self) -> dict[str, str]:
        return {
            t.name: t.class_names[getattr(self, t.name)] for t in SHAPES_REGISTRY
        }

    @staticmethod
    def from_names(names: dict[str, str]) -> "VariationLabel":
        return VariationLabel(
            **{t.name: t.index_of(names[t.name]) for t in SHAPES_REGISTRY}
        )


def all_variations() -> list[VariationLabel]:
    """Every label combination, in canonical (variation-index) order."""
    counts = [t.num_classes for t in SHAPES_REGISTRY]
    return [VariationLabel(*combo) for combo in product(*(range(n) for n in counts))]


def variation_index(label: VariationLabel) -> int:
    idx = 0
    for task, value in zip(SHAPES_REGISTRY, label.as_tuple()):
        idx = idx * task.num_classes + value
    return idx


# ------------------------------------------------------------------
# geometry
# ------------------------------------------------------------------

# Per-shape circumradius R for a target bbox diameter D (the larger of
# bbox width/height equals D), and the bbox half-extents around the
# circumcenter as multiples of R: (left, right, down, up) in y-up.
# Triangle/diamond/pentagon point up; the hexagon is flat-topped — a
# pointy-top hexagon can rasterize to the same pixel set as a small
# circle, which would make the shape label unrecoverable.
_SQ3 = math.sqrt(3.0)
_SHAPE_GEOMETRY = {
    "circle": (0.5, (1.0, 1.0, 1.0, 1.0)),
    "triangle": (1.0 / _SQ3, (_SQ3 / 2, _SQ3 / 2, 0.5, 1.0)),
    "diamond": (0.5, (1.0, 1.0, 1.0, 1.0)),
    "pentagon": (
        1.0 / (2 * math.sin(2 * math.pi / 5)),
        (math.sin(2 * math.pi / 5), math.sin(2 * math.pi / 5), math.cos(math.pi / 5), 1.0),
    ),
    "hexagon": (0.5, (1.0, 1.0, _SQ3 / 2, _SQ3 / 2)),
}
_SHAPE_SIDES = {"triangle": 3, "diamond": 4, "pentagon": 5, "hexagon": 6}
_SHAPE_PHASE = {"triangle": math.pi / 2, "diamond": math.pi / 2,
                "pentagon": math.pi / 2, "hexagon": 0.0}


def _polygon_vertices(name: str, radius: float, cx: float, cy: float) -> np.ndarray:
    """Regular polygon vertices, counter-clockwise, y-up."""
    n_sides = _SHAPE_SIDES[name]
    angles = _SHAPE_PHASE[name] + 2 * math.pi * np.arange(n_sides) / n_sides
    return np.stack([cx + radius * np.cos(angles), cy + radius * np.sin(angles)], axis=1)


def _shape_mask(
    name: str, radius: float, cx: float, cy: float,
    cols: np.ndarray, rows: np.ndarray, side: int,
) -> np.ndarray:
    """Inside-test on pixel centers for the given rows/cols window.

    The arithmetic here must stay term-for-term identical to the
    vectorized candidate search in ``_candidate_iou``: with geometry on
    the SNAP lattice, matching parameters then reproduce the rendered
    mask bit-for-bit (boundary pixels included).
    """
    xs = cols[None, :] + 0.5
    ys = side - rows[:, None] - 0.5  # y-up pixel centers
    if name == "circle":
        return (xs - cx) ** 2 + (ys - cy) ** 2 <= radius**2
    rel = _polygon_vertices(name, radius, 0.0, 0.0)
    inside = np.ones((len(rows), len(cols)), dtype=bool)
    n = len(rel)
    for i in range(n):
        x0, y0 = rel[i]
        x1, y1 = rel[(i + 1) % n]
        cross = (x1 - x0) * (ys - cy - y0) - (y1 - y0) * (xs - cx - x0)
        inside &= cross >= 0
    return inside


# Two different shapes can rasterize to the identical pixel set only
# when the raster is tiny (for a circle vs. a hexagon the cap sagitta
# falls below one pixel around a 15 px diameter); above this extent a
# mimic is geometrically impossible and the check is skipped.
_AMBIGUITY_CHECK_EXTENT = 16.0
_MAX_RENDER_ATTEMPTS = 64


def _mimicked_by_other_shape(name: str, fg_mask: np.ndarray, side: int) -> bool:
    """True when some other shape with producible (lattice, in-band)
    parameters reproduces the rendered mask pixel-for-pixel, which would
    make the shape label unrecoverable from the image."""
    observed, rows, cols, extent, bx, by = _shape_fit_context(fg_mask, side)
    if extent >= _AMBIGUITY_CHECK_EXTENT:
        return False
    return any(
        _candidate_iou(other, observed, rows, cols, side, extent, bx, by, True)
        == 1.0
        for other in SHAPE_NAMES
        if other != name
    )


def render_sample(
    label: VariationLabel, config: GenConfig, rng: np.random.Generator
) -> np.ndarray:
    """Draw one sample as an (side, side, 3) uint8 array.

    Draw order from ``rng`` is fixed: size jitter, x jitter, y jitter
    (redrawn as a block if the raster is ambiguous), then — only for
    colored backgrounds — the background color choice.
    """
    side = config.image_side
    shape_name = SHAPE_NAMES[label.shape]
    fg_name = COLOR_NAMES[label.color]
    fg = PALETTE[fg_name]
    r_per_d, extents = _SHAPE_GEOMETRY[shape_name]
    cell = side / 2.0
    qx, qy = QUADRANT_CENTERS[label.location]

    for _ in range(_MAX_RENDER_ATTEMPTS):
        frac = SIZE_FRACTIONS[label.size] + rng.uniform(
            -SIZE_JITTER_FRACTION, SIZE_JITTER_FRACTION
        )
        diameter = _snap(frac * side)
        radius = r_per_d * diameter
        ext_l, ext_r, ext_d, ext_u = (e * radius for e in extents)

        cx = qx * side + rng.uniform(-config.jitter, config.jitter) * cell
        cy = qy * side + rng.uniform(-config.jitter, config.jitter) * cell

        # keep the bbox inside the image and the center inside its quadrant
        lo_x, hi_x = ext_l + EDGE_MARGIN_PX, side - ext_r - EDGE_MARGIN_PX
        lo_y, hi_y = ext_d + EDGE_MARGIN_PX, side - ext_u - EDGE_MARGIN_PX
        if qx > 0.5:
            lo_x = max(lo_x, cell + QUADRANT_MARGIN_PX)
        else:
            hi_x = min(hi_x, cell - QUADRANT_MARGIN_PX)
        if qy > 0.5:
            lo_y = max(lo_y, cell + QUADRANT_MARGIN_PX)
        else:
            hi_y = min(hi_y, cell - QUADRANT_MARGIN_PX)
        cx = _snap(float(np.clip(cx, lo_x, hi_x)))
        cy = _snap(float(np.clip(cy, lo_y, hi_y)))

        # rasterize on pixel centers within the shape's bbox only
        col_lo = max(0, int(math.floor(cx - ext_l)) - 1)
        col_hi = min(side - 1, int(math.ceil(cx + ext_r)) + 1)
        row_lo = max(0, int(math.floor(side - (cy + ext_u))) - 1)
        row_hi = min(side - 1, int(math.ceil(side - (cy - ext_d))) + 1)
        cols = np.arange(col_lo, col_hi + 1)
        rows = np.arange(row_lo, row_hi + 1)
        mask = np.zeros((side, side), dtype=bool)
        mask[row_lo : row_hi + 1, col_lo : col_hi + 1] = _shape_mask(
            shape_name, radius, cx, cy, cols, rows, side
        )
        if not _mimicked_by_other_shape(shape_name, mask, side):
            break
    else:
        raise RuntimeError(
            f"could not draw an unambiguous {shape_name} at image side {side}"
        )

    if label.background == 0:
        bg = WHITE
    elif label.background == 1:
        bg = BLACK
    else:
        choices = [n for n in COLOR_NAMES if n != fg_name]
        bg = PALETTE[choices[int(rng.integers(len(choices)))]]

    img = np.empty((side, side, 3), dtype=np.uint8)
    img[:] = bg
    img[mask] = fg
    return img


# ------------------------------------------------------------------
# pixel oracle (inverse renderer)
# ------------------------------------------------------------------

_ALL_REFERENCE_COLORS = {**PALETTE, "white": WHITE, "black": BLACK}


def _nearest_color(pixel: np.ndarray) -> str:
    best, best_d = None, np.inf
    p = pixel.astype(np.float64)
    for name, ref in _ALL_REFERENCE_COLORS.items():
        d = float(((p - np.asarray(ref)) ** 2).sum())
        if d < best_d:
            best, best_d = name, d
    return best


def _candidate_iou(
    name: str, observed: np.ndarray, rows: np.ndarray, cols: np.ndarray,
    side: int, extent: float, bx: float, by: float, refine: bool,
) -> float:
    """Best pixel-overlap score of a shape hypothesis against the
    observed mask, optionally searching nearby diameters and sub-pixel
    centers (the bbox only bounds the true geometry to ~1 px)."""
    r_per_d, (_, _, ext_d, ext_u) = _SHAPE_GEOMETRY[name]
    if refine:
        # Lattice-aligned search: the renderer snaps diameter and center
        # to the SNAP grid, so the true geometry is in this candidate
        # set. Candidate diameters are limited to the renderer's size
        # bands — anything else is not a producible image. The window is
        # wide because vertex tips can lose a few raster rows, making
        # the observed extent undershoot the true diameter.
        diameters = [
            d
            for d in np.arange(extent - 2.0, extent + 3.0 + 1e-9, SNAP)
            if d > 2.0 and _in_size_band(d, side)
        ] or list(np.arange(max(extent - 2.0, 2.25), extent + 3.0 + 1e-9, SNAP))
        offs = np.arange(-1.0, 1.0 + 1e-9, SNAP)
        dx, dy = (g.ravel() for g in np.meshgrid(offs, offs, indexing="ij"))
    else:
        diameters = [extent]
        dx = dy = np.zeros(1)
    dx = dx[:, None, None]
    dy = dy[:, None, None]
    xs = (cols[None, :] + 0.5)[None]
    ys = (side - rows[:, None] - 0.5)[None]
    obs = observed[None]
    obs_count = int(observed.sum())

    best = -1.0
    for diameter in diameters:
        radius = r_per_d * diameter
        # circumcenter sits off the bbox center for shapes with
        # asymmetric vertical extents (triangle, pentagon)
        cx_k = _snap(bx) + dx
        cy_k = _snap(by - (ext_u - ext_d) * radius / 2.0) + dy
        if name == "circle":
            cand = (xs - cx_k) ** 2 + (ys - cy_k) ** 2 <= radius**2
        else:
            rel = _polygon_vertices(name, radius, 0.0, 0.0)
            cand = np.ones((len(dx),) + observed.shape, dtype=bool)
            n = len(rel)
            for i in range(n):
                x0, y0 = rel[i]
                x1, y1 = rel[(i + 1) % n]
                cross = (x1 - x0) * (ys - cy_k - y0) - (y1 - y0) * (xs - cx_k - x0)
                cand &= cross >= 0
        inter = (cand & obs).sum(axis=(1, 2))
        union = obs_count + cand.sum(axis=(1, 2)) - inter
        with np.errstate(invalid="ignore"):
            iou = np.where(union > 0, inter / union, 0.0)
        best = max(best, float(iou.max()))
    return best


def _shape_fit_context(
    fg_mask: np.ndarray, side: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray, float, float, float]:
    """Tight bbox window (plus margin) around the foreground, with the
    bbox extent and center that seed the candidate search."""
    rows_idx, cols_idx = np.nonzero(fg_mask)
    row_lo, row_hi = int(rows_idx.min()), int(rows_idx.max())
    col_lo, col_hi = int(cols_idx.min()), int(cols_idx.max())
    pad = 2
    rows = np.arange(max(0, row_lo - pad), min(side - 1, row_hi + pad) + 1)
    cols = np.arange(max(0, col_lo - pad), min(side - 1, col_hi + pad) + 1)
    observed = fg_mask[np.ix_(rows, cols)]
    extent = float(max(row_hi - row_lo + 1, col_hi - col_lo + 1))
    bx = (col_lo + col_hi + 1) / 2.0
    by = side - (row_lo + row_hi + 1) / 2.0  # bbox center, y-up
    return observed, rows, cols, extent, bx, by


def _classify_shape(fg_mask: np.ndarray, side: int) -> str:
    """Re-render shape candidates at the observed geometry (orientation
    and scale are fixed by the rendering contract) and pick the best
    pixel-overlap match; the leading candidates get a refined fit."""
    observed, rows, cols, extent, bx, by = _shape_fit_context(fg_mask, side)

    coarse = {
        name: _candidate_iou(name, observed, rows, cols, side, extent, bx, by, False)
        for name in SHAPE_NAMES
    }
    ranked = sorted(coarse, key=coarse.get, reverse=True)
    # At generous resolution no two different shapes overlap this well
    # even perfectly aligned, so a decisive coarse match needs no
    # sub-pixel refinement; below ~32 px quantization can push a wrong
    # shape past any fixed threshold, so always refine there.
    if (
        extent >= 32
        and coarse[ranked[0]] >= 0.93
        and coarse[ranked[0]] - coarse[ranked[1]] >= 0.03
    ):
        return ranked[0]
    refined = {
        name: _candidate_iou(name, observed, rows, cols, side, extent, bx, by, True)
        for name in ranked[:3]
    }
    return max(refined, key=refined.get)


def decode_label_oracle(img: np.ndarray, config: GenConfig) -> VariationLabel:
    """Recover the full label of a rendered image by pixel analysis."""
    side = config.image_side
    if img.shape != (side, side, 3):
        raise UndecodableImage(f"unexpected image shape {img.shape}")

    corners = img[[0, 0, -1, -1], [0, -1, 0, -1]]
    if not (corners == corners[0]).all():
        raise UndecodableImage("background corners disagree")
    bg_pixel = corners[0]
    bg_name = _nearest_color(bg_pixel)
    if bg_name == "white":
        background = 0
    elif bg_name == "black":
        background = 1
    else:
        background = 2

    fg_mask = (img != bg_pixel).any(axis=2)
    if not fg_mask.any():
        raise UndecodableImage("no foreground component")
    rows, cols = np.nonzero(fg_mask)

    fg_pixel = img[rows, cols].astype(np.float64).mean(axis=0)
    fg_name = _nearest_color(fg_pixel)
    if fg_name in ("white", "black"):
        raise UndecodableImage(f"foreground matched background color {fg_name}")
    color = COLOR_NAMES.index(fg_name)

    extent = max(rows.max() - rows.min() + 1, cols.max() - cols.min() + 1)
    frac = extent / side
    size = 0 if frac < SIZE_CUTS[0] else (1 if frac < SIZE_CUTS[1] else 2)

    x_mean = (cols + 0.5).mean()
    y_mean = (side - rows - 0.5).mean()
    right, top = x_mean > side / 2, y_mean > side / 2
    if top and right:
        location = 0
    elif top:
        location = 1
    elif not right:
        location = 2
    else:
        location = 3

    shape = SHAPE_NAMES.index(_classify_shape(fg_mask, side))
    return VariationLabel(shape, color, size, location, background)


# ------------------------------------------------------------------
# manifest
# ------------------------------------------------------------------

MANIFEST_COLUMNS = ("path", "split", "shape", "color", "size", "location", "background", "instance")
MANIFEST_NAME = "manifest.csv"


def manifest_csv_bytes(meta: dict, columns: tuple[str, ...], records) -> bytes:
    """Serialize a manifest: one `# {json}` metadata line, a header row,
    then the records. Deterministic bytes for identical inputs."""
    buf = io.StringIO()
    buf.write("# " + json.dumps(meta, sort_keys=True) + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    writer.writerows(records)
    return buf.getvalue().encode()


def parse_manifest_csv(
    text: str, columns: tuple[str, ...], source: str = "manifest"
) -> tuple[dict, list[list[str]]]:
    """Inverse of ``manifest_csv_bytes``: returns (metadata, records)."""
    lines = text.splitlines()
    if not lines or not lines[0].startswith("# "):
        raise ValueError(f"{source}: missing manifest header line")
    meta = json.loads(lines[0][2:])
    if meta.get("format_version") != FORMAT_VERSION:
        raise ValueError(
            f"{source}: unsupported format_version {meta.get('format_version')}"
        )
    reader = csv.reader(lines[1:])
    header = next(reader)
    if tuple(header) != columns:
        raise ValueError(f"{source}: unexpected columns {header}")
    return meta, [rec for rec in reader if rec]


@dataclass(frozen=True)
class ManifestRow:
    path: str
    split: str
    label: VariationLabel
    instance: int


@dataclass
class DatasetManifest:
    config: GenConfig
    rows: list[ManifestRow]

    def split_rows(self, split: str) -> list[ManifestRow]:
        return [r for r in self.rows if r.split == split]

    def header_meta(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "config": self.config.to_dict(),
            "tasks": SHAPES_REGISTRY.to_dict(),
            "palette": {k: list(v) for k, v in PALETTE.items()},
        }

    def to_csv_bytes(self) -> bytes:
        def records():
            for row in self.rows:
                names = row.label.names()
                yield (
                    [row.path, row.split]
                    + [names[t.name] for t in SHAPES_REGISTRY]
                    + [row.instance]
                )

        return manifest_csv_bytes(self.header_meta(), MANIFEST_COLUMNS, records())

    def save(self, path: Path) -> None:
        Path(path).write_bytes(self.to_csv_bytes())

    @staticmethod
    def load(path: Path) -> "DatasetManifest":
        meta, records = parse_manifest_csv(
            Path(path).read_text(), MANIFEST_COLUMNS, source=str(path)
        )
        config = GenConfig.from_dict(meta["config"])
        rows = [
            ManifestRow(
                path=rec[0],
                split=rec[1],
                label=VariationLabel.from_names(dict(zip(MANIFEST_COLUMNS[2:7], rec[2:7]))),
                instance=int(rec[7]),
            )
            for rec in records
        ]
        return DatasetManifest(config=config, rows=rows)


def build_manifest_rows(config: GenConfig) -> list[ManifestRow]:
    """The manifest is a pure function of the config: all variations in
    canonical order, train instances then test instances."""
    rows = []
    for var_idx, label in enumerate(all_variations()):
        for split, count in (("train", config.train_per_variation),
                             ("test", config.test_per_variation)):
            for instance in range(count):
                rows.append(
                    ManifestRow(
                        path=f"images/var{var_idx:04d}/{split}_{instance:03d}.png",
                        split=split,
                        label=label,
                        instance=instance,
                    )
                )
    return rows


_SPLIT_CODE = {"train": 0, "test": 1}


def generate_dataset(config: GenConfig, out_dir: Path) -> DatasetManifest:
    """Render every manifest row to a PNG under ``out_dir`` and write
    the manifest. Byte-identical for identical config."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = DatasetManifest(config=config, rows=build_manifest_rows(config))
    for row in manifest.rows:
        var_idx = variation_index(row.label)
        stream = rngmod.stream(
            config.seed, rngmod.VARIATION, var_idx, _SPLIT_CODE[row.split], row.instance
        )
        img = render_sample(row.label, config, stream)
        path = out_dir / row.path
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(img).save(path, format="PNG")
    manifest.save(out_dir / MANIFEST_NAME)
    return manifest


def load_split(
    data_dir: Path, split: str
) -> tuple[np.ndarray, dict[str, np.ndarray], DatasetManifest]:
    """Load one split as (images uint8 NHWC, per-task label arrays)."""
    data_dir = Path(data_dir)
    manifest = DatasetManifest.load(data_dir / MANIFEST_NAME)
    rows = manifest.split_rows(split)
    if not rows:
        raise ValueError(f"no rows for split {split!r} in {data_dir}")
    side = manifest.config.image_side
    images = np.empty((len(rows), side, side, 3), dtype=np.uint8)
    for i, row in enumerate(rows):
        with Image.open(data_dir / row.path) as im:
            images[i] = np.asarray(im.convert("RGB"))
    labels = {
        t.name: np.asarray([getattr(r.label, t.name) for r in rows], dtype=np.int64)
        for t in SHAPES_REGISTRY
    }
    return images, labels, manifest
