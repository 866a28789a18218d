"""Report artifacts: heatmap SVG, export bundle, feature dumps."""

import json
import re

import numpy as np
import pytest

from overlearn.probes import MATRIX_CSV, MATRIX_JSON, PerformanceMatrix
from overlearn.reporting import (
    HEATMAP_SVG,
    SUMMARY_MD,
    TRUST_JSON,
    HeatmapSpec,
    export_report,
    load_features,
    render_heatmap,
    save_features,
    summary_markdown,
)
from overlearn.tasks import SHAPES_REGISTRY
from overlearn.trust import ideal_matrix, trust_score, weight_matrix

TASKS = tuple(SHAPES_REGISTRY.names)
M = ideal_matrix(SHAPES_REGISTRY)
W = weight_matrix(5)


def leaky_matrix():
    cells = M.copy()
    cells[0, 4] = 0.93  # shape features leak background
    cells[0, 3] = 0.61  # ... and location
    cells[2, 2] = 0.97
    return PerformanceMatrix(
        task_names=TASKS,
        cells=cells,
        chance=(0.2, 1 / 7, 1 / 3, 0.25, 1 / 3),
        metadata={"note": "fixture"},
    )


class TestHeatmapSpec:
    def test_ramp_endpoints(self):
        spec = HeatmapSpec()
        assert spec.color_at(0.0) == "#228b22"
        assert spec.color_at(1.0) == "#d62728"

    def test_ramp_is_monotone(self):
        spec = HeatmapSpec()
        reds, greens = [], []
        for v in np.linspace(0, 1, 21):
            color = spec.color_at(v)
            reds.append(int(color[1:3], 16))
            greens.append(int(color[3:5], 16))
        assert reds == sorted(reds)
        assert greens == sorted(greens, reverse=True)

    def test_values_clipped(self):
        spec = HeatmapSpec()
        assert spec.color_at(-3.0) == spec.color_at(0.0)
        assert spec.color_at(7.0) == spec.color_at(1.0)


class TestRenderHeatmap:
    def test_five_by_five_structure(self):
        svg = render_heatmap(leaky_matrix())
        assert svg.count('class="cell"') == 25
        assert svg.count('class="value"') == 25
        for name in TASKS:
            assert svg.count(f">{name}</text>") == 2  # row + column label

    def test_repeat_is_byte_identical(self):
        a = render_heatmap(leaky_matrix(), HeatmapSpec(title="run"))
        b = render_heatmap(leaky_matrix(), HeatmapSpec(title="run"))
        assert a == b

    def test_ideal_diagonal_hits_ramp_maximum(self):
        svg = render_heatmap(M, task_names=TASKS)
        fills = re.findall(r'class="cell"[^/]*fill="(#[0-9a-f]{6})"', svg)
        assert len(fills) == 25
        diag = [fills[i * 5 + i] for i in range(5)]
        assert set(diag) == {HeatmapSpec().color_at(1.0)}

    def test_cell_values_use_precision(self):
        svg = render_heatmap(leaky_matrix(), HeatmapSpec(precision=3))
        assert ">0.930</text>" in svg

    def test_plain_array_gets_default_names(self):
        svg = render_heatmap(np.eye(2) * 0.5 + 0.25)
        assert ">task0</text>" in svg and ">task1</text>" in svg

    def test_rejects_non_square(self):
        with pytest.raises(ValueError, match="square"):
            render_heatmap(np.zeros((2, 3)))

    def test_escapes_markup_in_labels(self):
        svg = render_heatmap(np.full((2, 2), 0.5), task_names=("a<b", "c&d"))
        assert "a&lt;b" in svg and "c&amp;d" in svg


def reports():
    base = trust_score(leaky_matrix().cells, M, W, task_names=TASKS)
    improved_cells = M.copy()
    improved_cells[0, 4] = 0.55
    improved = PerformanceMatrix(
        task_names=TASKS,
        cells=improved_cells,
        chance=(0.2, 1 / 7, 1 / 3, 0.25, 1 / 3),
    )
    return base, leaky_matrix(), trust_score(improved.cells, M, W, task_names=TASKS), improved


class TestSummaryMarkdown:
    def test_mentions_score_band_and_cells(self):
        report, matrix, _, _ = reports()
        text = summary_markdown(report, matrix)
        assert f"**{report.score:.4f}**" in text
        assert f"band: {report.band}" in text
        assert "**background**" in text  # the leaked task is called out
        assert "| *chance* |" in text

    def test_no_baseline_means_no_delta_section(self):
        report, matrix, _, _ = reports()
        assert "## Change vs baseline" not in summary_markdown(report, matrix)

    def test_baseline_adds_signed_delta(self):
        base_report, base_matrix, new_report, new_matrix = reports()
        text = summary_markdown(new_report, new_matrix, (base_report, base_matrix))
        assert "## Change vs baseline" in text
        assert f"from {base_report.score:.4f} to {new_report.score:.4f}" in text
        assert "+0." in text  # improvement is signed


class TestExportReport:
    def test_writes_all_artifacts(self, tmp_path):
        report, matrix, _, _ = reports()
        paths = export_report(report, matrix, tmp_path)
        assert set(paths) == {MATRIX_JSON, MATRIX_CSV, TRUST_JSON, HEATMAP_SVG, SUMMARY_MD}
        for path in paths.values():
            assert path.exists() and path.stat().st_size > 0

    def test_trust_json_round_trips(self, tmp_path):
        report, matrix, _, _ = reports()
        export_report(report, matrix, tmp_path)
        doc = json.loads((tmp_path / TRUST_JSON).read_text())
        assert doc["format_version"] == 1
        assert doc["trust_score"] == report.score
        assert doc["tasks"] == list(TASKS)

    def test_csv_reparse_matches_cells(self, tmp_path):
        report, matrix, _, _ = reports()
        export_report(report, matrix, tmp_path)
        lines = (tmp_path / MATRIX_CSV).read_text().splitlines()
        parsed = np.array(
            [[float(v) for v in line.split(",")[1:]] for line in lines[1:6]]
        )
        assert np.abs(parsed - matrix.cells).max() < 1e-9

    def test_exports_are_deterministic(self, tmp_path):
        base_report, base_matrix, report, matrix = reports()
        a_dir, b_dir = tmp_path / "a", tmp_path / "b"
        export_report(report, matrix, a_dir, baseline=(base_report, base_matrix))
        export_report(report, matrix, b_dir, baseline=(base_report, base_matrix))
        for name in (MATRIX_JSON, MATRIX_CSV, TRUST_JSON, HEATMAP_SVG, SUMMARY_MD):
            assert (a_dir / name).read_bytes() == (b_dir / name).read_bytes()

    def test_summary_includes_delta_only_with_baseline(self, tmp_path):
        base_report, base_matrix, report, matrix = reports()
        export_report(report, matrix, tmp_path / "plain")
        export_report(
            report, matrix, tmp_path / "vs", baseline=(base_report, base_matrix)
        )
        plain = (tmp_path / "plain" / SUMMARY_MD).read_text()
        versus = (tmp_path / "vs" / SUMMARY_MD).read_text()
        assert "## Change vs baseline" not in plain
        assert "## Change vs baseline" in versus


class TestFeatureDumps:
    def test_round_trip_is_exact(self, tmp_path):
        gen = np.random.default_rng(0)
        feats = gen.normal(size=(50, 16)).astype(np.float32)
        labels = {"shape": gen.integers(5, size=50), "color": gen.integers(7, size=50)}
        raw, sidecar = save_features(tmp_path / "feats", feats, labels)
        assert raw.stat().st_size == 50 * 16 * 4
        loaded, loaded_labels = load_features(sidecar)
        assert np.array_equal(loaded, feats)
        assert set(loaded_labels) == {"shape", "color"}
        assert np.array_equal(loaded_labels["shape"], labels["shape"])

    def test_sidecar_fields(self, tmp_path):
        feats = np.zeros((3, 4), dtype=np.float32)
        _, sidecar = save_features(tmp_path / "f", feats, {"digit": np.arange(3)})
        meta = json.loads(sidecar.read_text())
        assert meta["rows"] == 3 and meta["cols"] == 4
        assert meta["dtype"] == "<f4"
        assert meta["data_file"] == "f.f32"

    def test_rejects_mismatched_label_length(self, tmp_path):
        feats = np.zeros((3, 4), dtype=np.float32)
        with pytest.raises(ValueError, match="label column"):
            save_features(tmp_path / "f", feats, {"digit": np.arange(5)})

    def test_truncated_raw_file_detected(self, tmp_path):
        feats = np.ones((4, 4), dtype=np.float32)
        raw, sidecar = save_features(tmp_path / "f", feats, {})
        raw.write_bytes(raw.read_bytes()[:-4])
        with pytest.raises(ValueError, match="expected"):
            load_features(sidecar)

    def test_rejects_one_dim_features(self, tmp_path):
        with pytest.raises(ValueError, match="2-D"):
            save_features(tmp_path / "f", np.zeros(8, dtype=np.float32), {})
