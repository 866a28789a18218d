"""Trust scoring of a probed performance matrix.

The performance matrix T holds probe accuracies: cell (i, j) is the
accuracy of predicting task j from features trained to preserve task i.
A perfectly trustworthy extractor scores 1 on the diagonal and chance
(1 / n_j) elsewhere; the trust score is one minus the weighted mean
absolute deviation from that ideal.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tasks import TaskRegistry, TaskSpec

BAND_HIGH = "high"
BAND_ACCEPTABLE = "acceptable"
BAND_POOR = "poor"

# A cell this far above its ideal value is flagged as overlearned.
DEFAULT_OVERLEARN_THRESHOLD = 0.1


def ideal_matrix(tasks: TaskRegistry | Sequence[TaskSpec]) -> np.ndarray:
    """Target matrix M: 1 on the diagonal, chance 1/n_j in column j."""
    tasks = list(tasks)
    if len(tasks) < 2:
        raise ValueError("need at least 2 tasks")
    for t in tasks:
        if t.num_classes < 2:
            raise ValueError(f"task {t.name!r} has fewer than 2 classes")
    n_t = len(tasks)
    m = np.empty((n_t, n_t), dtype=np.float64)
    for j, t in enumerate(tasks):
        m[:, j] = 1.0 / t.num_classes
    np.fill_diagonal(m, 1.0)
    return m


def weight_matrix(n_t: int) -> np.ndarray:
    """Weight matrix W: n_t - 1 on the diagonal, 1 elsewhere.

    The diagonal weight matches the n_t - 1 off-diagonal cells in each
    row, so preserved-task deviations count as much as all suppression
    deviations of that row combined.
    """
    if n_t < 2:
        raise ValueError("need at least 2 tasks")
    w = np.ones((n_t, n_t), dtype=np.float64)
    np.fill_diagonal(w, n_t - 1)
    return w


def band_for(score: float) -> str:
    if score >= 0.9:
        return BAND_HIGH
    if score >= 0.8:
        return BAND_ACCEPTABLE
    return BAND_POOR


@dataclass
class TrustReport:
    """Trust score plus the per-cell evidence behind it."""

    score: float
    band: str
    task_names: list[str]
    deviations: np.ndarray  # |M - T|
    weights: np.ndarray
    overlearned: list[dict]  # cells with T - M above threshold

    def to_dict(self) -> dict:
        return {
            "trust_score": self.score,
            "band": self.band,
            "tasks": self.task_names,
            "deviations": self.deviations.tolist(),
            "weights": self.weights.tolist(),
            "overlearned": self.overlearned,
        }

    @staticmethod
    def from_dict(d: dict) -> "TrustReport":
        return TrustReport(
            score=float(d["trust_score"]),
            band=d["band"],
            task_names=list(d["tasks"]),
            deviations=np.asarray(d["deviations"], dtype=np.float64),
            weights=np.asarray(d["weights"], dtype=np.float64),
            overlearned=list(d["overlearned"]),
        )


def trust_score(
    t_cells: np.ndarray,
    m: np.ndarray,
    w: np.ndarray,
    task_names: Sequence[str] | None = None,
    overlearn_threshold: float = DEFAULT_OVERLEARN_THRESHOLD,
) -> TrustReport:
    """Score T against ideal M under weights W.

    score = 1 - sum(|M - T| * W) / sum(W), with * element-wise and the
    sums taken over the whole matrix.
    """
    t_cells = np.asarray(t_cells, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if t_cells.shape != m.shape or t_cells.shape != w.shape:
        raise ValueError(
            f"shape mismatch: T {t_cells.shape}, M {m.shape}, W {w.shape}"
        )
    if t_cells.ndim != 2 or t_cells.shape[0] != t_cells.shape[1]:
        raise ValueError("T must be a square matrix")
    if np.any(t_cells < 0.0) or np.any(t_cells > 1.0):
        raise ValueError("T cells must lie in [0, 1]")

    n_t = t_cells.shape[0]
    names = list(task_names) if task_names is not None else [
        f"task{i}" for i in range(n_t)
    ]
    if len(names) != n_t:
        raise ValueError("task_names length does not match matrix")

    dev = np.abs(m - t_cells)
    score = 1.0 - float((dev * w).sum()) / float(w.sum())

    overlearned = []
    excess = t_cells - m
    for i in range(n_t):
        for j in range(n_t):
            if i != j and excess[i, j] > overlearn_threshold:
                overlearned.append(
                    {
                        "preserved": names[i],
                        "probed": names[j],
                        "accuracy": float(t_cells[i, j]),
                        "ideal": float(m[i, j]),
                        "excess": float(excess[i, j]),
                    }
                )
    overlearned.sort(key=lambda c: -c["excess"])

    return TrustReport(
        score=score,
        band=band_for(score),
        task_names=names,
        deviations=dev,
        weights=w,
        overlearned=overlearned,
    )


@dataclass
class TrustDelta:
    """Signed trust change between two reports over the same tasks."""

    delta: float
    attributions: list[dict]  # per-cell contribution, sums to delta

    def to_dict(self) -> dict:
        return {"delta": self.delta, "attributions": self.attributions}


def trust_delta(report_a: TrustReport, report_b: TrustReport) -> TrustDelta:
    """Change in trust from report_a to report_b with per-cell attribution.

    Positive attribution means the cell moved toward the ideal.
    """
    if report_a.task_names != report_b.task_names:
        raise ValueError("reports cover different task registries")
    if report_a.weights.shape != report_b.weights.shape or np.any(
        report_a.weights != report_b.weights
    ):
        raise ValueError("reports use different weight matrices")

    w = report_a.weights
    contrib = (report_a.deviations - report_b.deviations) * w / w.sum()
    names = report_a.task_names
    cells = [
        {
            "preserved": names[i],
            "probed": names[j],
            "contribution": float(contrib[i, j]),
        }
        for i in range(len(names))
        for j in range(len(names))
        if contrib[i, j] != 0.0
    ]
    cells.sort(key=lambda c: -abs(c["contribution"]))
    return TrustDelta(delta=float(contrib.sum()), attributions=cells)
