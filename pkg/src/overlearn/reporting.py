"""Report artifacts: SVG heatmaps, trust summaries, feature dumps.

Everything here is a pure function of its inputs — no timestamps or
environment details leak into file contents, so repeated exports are
byte-identical and diffable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

from .dataset import FORMAT_VERSION
from .probes import MATRIX_CSV, MATRIX_JSON, PerformanceMatrix
from .trust import TrustReport, trust_delta

TRUST_JSON = "trust.json"
HEATMAP_SVG = "heatmap.svg"
SUMMARY_MD = "summary.md"

_CELL_W = 84
_CELL_H = 56
_LEFT = 130
_TOP = 84


@dataclass(frozen=True)
class HeatmapSpec:
    """Styling for an accuracy heatmap: low values green, high red."""

    low_color: tuple[int, int, int] = (34, 139, 34)
    high_color: tuple[int, int, int] = (214, 39, 40)
    precision: int = 2
    title: str = ""

    def color_at(self, value: float) -> str:
        """Linear ramp between the endpoints; value clipped to [0, 1]."""
        v = min(max(float(value), 0.0), 1.0)
        rgb = (
            round(lo + (hi - lo) * v)
            for lo, hi in zip(self.low_color, self.high_color)
        )
        return "#" + "".join(f"{c:02x}" for c in rgb)


def render_heatmap(
    matrix: PerformanceMatrix | np.ndarray,
    spec: HeatmapSpec = HeatmapSpec(),
    task_names: Sequence[str] | None = None,
) -> str:
    """Deterministic standalone SVG: colored n x n grid, labels, values."""
    if isinstance(matrix, PerformanceMatrix):
        cells = matrix.cells
        names = list(matrix.task_names)
    else:
        cells = np.asarray(matrix, dtype=np.float64)
        names = (
            list(task_names)
            if task_names is not None
            else [f"task{i}" for i in range(cells.shape[0])]
        )
    if cells.ndim != 2 or cells.shape[0] != cells.shape[1]:
        raise ValueError("heatmap needs a square matrix")
    if len(names) != cells.shape[0]:
        raise ValueError("one label per row/column required")

    n = cells.shape[0]
    width = _LEFT + n * _CELL_W + 20
    height = _TOP + n * _CELL_H + 20
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" font-family="sans-serif" font-size="14">',
        f'<rect width="{width}" height="{height}" fill="#ffffff"/>',
    ]
    if spec.title:
        out.append(
            f'<text x="{width // 2}" y="24" text-anchor="middle" '
            f'font-size="18">{escape(spec.title)}</text>'
        )
    for j, name in enumerate(names):
        cx = _LEFT + j * _CELL_W + _CELL_W // 2
        out.append(
            f'<text x="{cx}" y="{_TOP - 12}" text-anchor="middle" '
            f'class="col-label">{escape(name)}</text>'
        )
    for i, name in enumerate(names):
        cy = _TOP + i * _CELL_H + _CELL_H // 2 + 5
        out.append(
            f'<text x="{_LEFT - 12}" y="{cy}" text-anchor="end" '
            f'class="row-label">{escape(name)}</text>'
        )
    for i in range(n):
        for j in range(n):
            x = _LEFT + j * _CELL_W
            y = _TOP + i * _CELL_H
            out.append(
                f'<rect class="cell" x="{x}" y="{y}" width="{_CELL_W}" '
                f'height="{_CELL_H}" fill="{spec.color_at(cells[i, j])}" '
                f'stroke="#ffffff"/>'
            )
            out.append(
                f'<text class="value" x="{x + _CELL_W // 2}" '
                f'y="{y + _CELL_H // 2 + 5}" text-anchor="middle">'
                f"{cells[i, j]:.{spec.precision}f}</text>"
            )
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _markdown_table(matrix: PerformanceMatrix) -> list[str]:
    names = matrix.task_names
    lines = [
        "| preserved \\ probed | " + " | ".join(names) + " |",
        "|---" * (len(names) + 1) + "|",
    ]
    for name, row in zip(names, matrix.cells):
        lines.append(
            f"| {name} | " + " | ".join(f"{v:.4f}" for v in row) + " |"
        )
    lines.append(
        "| *chance* | " + " | ".join(f"{v:.4f}" for v in matrix.chance) + " |"
    )
    return lines


def summary_markdown(
    report: TrustReport,
    matrix: PerformanceMatrix,
    baseline: tuple[TrustReport, PerformanceMatrix] | None = None,
    title: str = "Feature leakage report",
) -> str:
    lines = [
        f"# {title}",
        "",
        f"Trust score: **{report.score:.4f}** (band: {report.band})",
        "",
        "Probe accuracy for each task (columns) on features from each",
        "preserving run (rows):",
        "",
        *_markdown_table(matrix),
        "",
        "## Overlearned cells",
        "",
    ]
    if report.overlearned:
        for cell in report.overlearned:
            lines.append(
                f"- features preserving **{cell['preserved']}** predict "
                f"**{cell['probed']}** at {cell['accuracy']:.4f} "
                f"(ideal {cell['ideal']:.4f}, excess {cell['excess']:+.4f})"
            )
    else:
        lines.append("- none above threshold")
    if baseline is not None:
        base_report, base_matrix = baseline
        delta = trust_delta(base_report, report)
        lines += [
            "",
            "## Change vs baseline",
            "",
            f"Trust moved from {base_report.score:.4f} to "
            f"{report.score:.4f} (delta {delta.delta:+.4f}).",
            "",
            "Largest cell contributions:",
            "",
        ]
        for cell in delta.attributions[:5]:
            lines.append(
                f"- {cell['preserved']} features probed for "
                f"{cell['probed']}: {cell['contribution']:+.4f}"
            )
        lines += ["", "Baseline matrix:", "", *_markdown_table(base_matrix)]
    return "\n".join(lines) + "\n"


def export_report(
    report: TrustReport,
    matrix: PerformanceMatrix,
    out_dir: Path,
    baseline: tuple[TrustReport, PerformanceMatrix] | None = None,
    title: str = "Feature leakage report",
) -> dict[str, Path]:
    """Write the full artifact set; returns name -> path written."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    trust_doc = {"format_version": FORMAT_VERSION, **report.to_dict()}
    files = {
        MATRIX_JSON: matrix.to_json_bytes(),
        MATRIX_CSV: matrix.to_csv_bytes(),
        TRUST_JSON: (json.dumps(trust_doc, indent=2, sort_keys=True) + "\n").encode(),
        HEATMAP_SVG: render_heatmap(
            matrix, HeatmapSpec(title=title) if title else HeatmapSpec()
        ).encode(),
        SUMMARY_MD: summary_markdown(report, matrix, baseline, title).encode(),
    }
    paths = {}
    for name, payload in files.items():
        path = out_dir / name
        path.write_bytes(payload)
        paths[name] = path
    return paths


# ------------------------------------------------------------------
# feature dumps (raw f32 + JSON sidecar) for external visualization
# ------------------------------------------------------------------


def save_features(
    base_path: Path, features: np.ndarray, labels: dict[str, np.ndarray]
) -> tuple[Path, Path]:
    """Dump features as little-endian f32 (row-major) plus a sidecar.

    ``base_path`` has no extension; writes ``<base>.f32`` and
    ``<base>.json``. Label columns ride along in the sidecar.
    """
    features = np.ascontiguousarray(features, dtype="<f4")
    if features.ndim != 2:
        raise ValueError(f"features must be 2-D, got shape {features.shape}")
    for name, column in labels.items():
        if len(column) != len(features):
            raise ValueError(
                f"label column {name!r} has {len(column)} rows, "
                f"features have {len(features)}"
            )
    base_path = Path(base_path)
    base_path.parent.mkdir(parents=True, exist_ok=True)
    raw_path = base_path.parent / (base_path.name + ".f32")
    sidecar_path = base_path.parent / (base_path.name + ".json")
    raw_path.write_bytes(features.tobytes())
    sidecar = {
        "format_version": FORMAT_VERSION,
        "rows": features.shape[0],
        "cols": features.shape[1],
        "dtype": "<f4",
        "data_file": raw_path.name,
        "labels": {
            name: np.asarray(col).astype(int).tolist()
            for name, col in sorted(labels.items())
        },
    }
    sidecar_path.write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return raw_path, sidecar_path


def load_features(sidecar_path: Path) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    sidecar_path = Path(sidecar_path)
    meta = json.loads(sidecar_path.read_text())
    if meta.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported format_version in {sidecar_path}")
    raw = (sidecar_path.parent / meta["data_file"]).read_bytes()
    expected = meta["rows"] * meta["cols"] * 4
    if len(raw) != expected:
        raise ValueError(
            f"feature file holds {len(raw)} bytes, expected {expected}"
        )
    features = np.frombuffer(raw, dtype="<f4").reshape(meta["rows"], meta["cols"])
    labels = {
        name: np.asarray(col, dtype=np.int64) for name, col in meta["labels"].items()
    }
    return features, labels
