"""Evaluation statistics: ROC/AUC, cross-detection matrices, breakdowns.

AUC is computed with the rank (Mann-Whitney) estimator, counting ties as
half: exact, binning-free, and O(n log n). The threshold-sweep ROC curve
is kept alongside both as an exportable artifact and as the independent
cross-check (trapezoidal integration of the curve must reproduce the rank
estimate to within 1e-12).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .curvature import CurvatureResult
from .errors import ValidationError
from .textpool import Label, TextRecord
from .util import atomic_write_text

_trapezoid = getattr(np, "trapezoid", None) or np.trapz


def auc(machine_scores: Sequence[float], human_scores: Sequence[float]) -> float:
    """Probability that a random machine score outranks a random human one.

    Ties count 0.5, which anchors identically distributed scores at
    exactly 0.5. Machine is the positive class.
    """
    m = np.asarray(machine_scores, dtype=float)
    h = np.asarray(human_scores, dtype=float)
    if m.size == 0 or h.size == 0:
        raise ValidationError("both score classes must be non-empty")
    ranks = rankdata(np.concatenate([m, h]), method="average")
    u = ranks[: m.size].sum() - m.size * (m.size + 1) / 2
    return float(u / (m.size * h.size))


@dataclass(frozen=True)
class RocCurve:
    """ROC points sorted by false-positive rate, one per distinct threshold.

    thresholds[i] is the cutoff (predict machine when score >= cutoff)
    that produces points[i]; thresholds[0] is +inf, giving (0, 0), and the
    lowest observed score closes the curve at (1, 1).
    """

    points: tuple[tuple[float, float], ...]
    thresholds: tuple[float, ...]

    @property
    def fpr(self) -> np.ndarray:
        return np.array([p[0] for p in self.points])

    @property
    def tpr(self) -> np.ndarray:
        return np.array([p[1] for p in self.points])

    def area(self) -> float:
        return float(_trapezoid(self.tpr, self.fpr))


def roc_curve(machine_scores: Sequence[float], human_scores: Sequence[float]) -> RocCurve:
    m = np.sort(np.asarray(machine_scores, dtype=float))
    h = np.sort(np.asarray(human_scores, dtype=float))
    if m.size == 0 or h.size == 0:
        raise ValidationError("both score classes must be non-empty")
    cutoffs = np.unique(np.concatenate([m, h]))[::-1]
    points = [(0.0, 0.0)]
    thresholds = [float("inf")]
    for t in cutoffs:
        tpr = float((m.size - np.searchsorted(m, t, side="left")) / m.size)
        fpr = float((h.size - np.searchsorted(h, t, side="left")) / h.size)
        points.append((fpr, tpr))
        thresholds.append(float(t))
    return RocCurve(points=tuple(points), thresholds=tuple(thresholds))


@dataclass
class DetectionMatrix:
    """Generators x detectors grid of AUC values with derived summaries.

    Cells without enough records are explicit holes (None), never zeros;
    mean_row averages only present cells and records how many there were.
    diff holds self-detection AUC minus the cell, for rows whose generator
    also appears as a detector; other rows stay None.
    """

    generators: list[str]
    detectors: list[str]
    auc: list[list[float | None]]
    mean_row: list[float | None]
    mean_row_counts: list[int]
    diff: list[list[float | None]]
    missing: list[tuple[str, str]] = field(default_factory=list)

    def cell(self, generator: str, detector: str) -> float | None:
        return self.auc[self.generators.index(generator)][self.detectors.index(detector)]

    def to_dict(self) -> dict:
        return {
            "generators": self.generators,
            "detectors": self.detectors,
            "auc": self.auc,
            "mean_row": self.mean_row,
            "mean_row_counts": self.mean_row_counts,
            "diff": self.diff,
            "missing": [list(x) for x in self.missing],
        }


@dataclass(frozen=True)
class StatSummary:
    mean: float
    std: float
    n: int

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std, "n": self.n}


@dataclass(frozen=True)
class CellStats:
    """Per-(generator, detector) mean/std of the statistic and log-likelihood."""

    curvature_machine: StatSummary
    curvature_human: StatSummary
    loglik_machine: StatSummary
    loglik_human: StatSummary

    def to_dict(self) -> dict:
        return {k: v.to_dict() for k, v in self.__dict__.items()}


@dataclass
class ScoreBreakdown:
    generators: list[str]
    detectors: list[str]
    cells: dict[tuple[str, str], CellStats]


def _group_scores(
    results: Iterable[CurvatureResult],
    label_of: Mapping[str, tuple[Label, str | None]],
):
    """Split one detector's results into per-generator machine and human lists."""
    machine: dict[str, list[CurvatureResult]] = {}
    human: list[CurvatureResult] = []
    for r in results:
        if r.record_id not in label_of:
            raise ValidationError(f"result for unknown record {r.record_id}")
        label, gen = label_of[r.record_id]
        if label == Label.MACHINE:
            machine.setdefault(gen, []).append(r)
        else:
            human.append(r)
    return machine, human


def _label_map(records: Iterable[TextRecord]) -> dict[str, tuple[Label, str | None]]:
    return {r.id: (r.label, r.generator_id) for r in records}


def build_matrix(
    results_by_detector: Mapping[str, Iterable[CurvatureResult]],
    records: Iterable[TextRecord],
    generators: Sequence[str] | None = None,
    detectors: Sequence[str] | None = None,
    min_per_class: int = 2,
) -> DetectionMatrix:
    """Assemble the cross-detection AUC matrix from stored results.

    Rows are generators, columns detectors. Human scores under a detector
    are shared by every row (human texts do not depend on the generator).
    Cells with fewer than min_per_class records on either side become
    holes and are reported in .missing by name.
    """
    records = list(records)
    label_of = _label_map(records)
    detectors = list(detectors) if detectors is not None else list(results_by_detector)
    if generators is None:
        generators = sorted(
            {r.generator_id for r in records if r.label == Label.MACHINE and r.generator_id}
        )
    else:
        generators = list(generators)

    grouped = {
        det: _group_scores(results_by_detector.get(det, []), label_of) for det in detectors
    }

    grid: list[list[float | None]] = []
    missing: list[tuple[str, str]] = []
    for gen in generators:
        row: list[float | None] = []
        for det in detectors:
            machine, human = grouped[det]
            m_scores = [r.curvature for r in machine.get(gen, [])]
            h_scores = [r.curvature for r in human]
            if len(m_scores) >= min_per_class and len(h_scores) >= min_per_class:
                row.append(auc(m_scores, h_scores))
            else:
                row.append(None)
                missing.append((gen, det))
        grid.append(row)

    mean_row: list[float | None] = []
    mean_counts: list[int] = []
    for j in range(len(detectors)):
        present = [grid[i][j] for i in range(len(generators)) if grid[i][j] is not None]
        mean_row.append(float(np.mean(present)) if present else None)
        mean_counts.append(len(present))

    diff: list[list[float | None]] = []
    for i, gen in enumerate(generators):
        self_auc = grid[i][detectors.index(gen)] if gen in detectors else None
        if self_auc is None:
            diff.append([None] * len(detectors))
        else:
            diff.append(
                [None if c is None else self_auc - c for c in grid[i]]
            )
    return DetectionMatrix(
        generators=generators,
        detectors=detectors,
        auc=grid,
        mean_row=mean_row,
        mean_row_counts=mean_counts,
        diff=diff,
        missing=missing,
    )


def _summary(values: Sequence[float]) -> StatSummary:
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        return StatSummary(mean=float("nan"), std=float("nan"), n=0)
    return StatSummary(mean=float(arr.mean()), std=float(arr.std()), n=int(arr.size))


def breakdown(
    results_by_detector: Mapping[str, Iterable[CurvatureResult]],
    records: Iterable[TextRecord],
    generators: Sequence[str] | None = None,
    detectors: Sequence[str] | None = None,
) -> ScoreBreakdown:
    """Mean/std of curvature and log-likelihood per cell, split by true label.

    Human statistics for a fixed detector are computed once and replicated
    across the generator rows, making their row-invariance structural.
    """
    records = list(records)
    label_of = _label_map(records)
    detectors = list(detectors) if detectors is not None else list(results_by_detector)
    if generators is None:
        generators = sorted(
            {r.generator_id for r in records if r.label == Label.MACHINE and r.generator_id}
        )
    else:
        generators = list(generators)

    cells: dict[tuple[str, str], CellStats] = {}
    for det in detectors:
        machine, human = _group_scores(results_by_detector.get(det, []), label_of)
        human_curv = _summary([r.curvature for r in human])
        human_ll = _summary([r.target_logprob for r in human])
        for gen in generators:
            mresults = machine.get(gen, [])
            cells[(gen, det)] = CellStats(
                curvature_machine=_summary([r.curvature for r in mresults]),
                curvature_human=human_curv,
                loglik_machine=_summary([r.target_logprob for r in mresults]),
                loglik_human=human_ll,
            )
    return ScoreBreakdown(generators=list(generators), detectors=detectors, cells=cells)


# ------------------------------------------------------------------ export

def _fmt(value: float | None) -> str:
    return "" if value is None else repr(value)


def matrix_to_csv(matrix: DetectionMatrix, diff: bool = False) -> str:
    """CSV with row/column headers; holes are empty strings; last row is the mean."""
    grid = matrix.diff if diff else matrix.auc
    lines = ["generator," + ",".join(matrix.detectors)]
    for gen, row in zip(matrix.generators, grid):
        lines.append(gen + "," + ",".join(_fmt(v) for v in row))
    if not diff:
        lines.append("mean," + ",".join(_fmt(v) for v in matrix.mean_row))
    return "\n".join(lines) + "\n"


def write_matrix_csv(
    matrix: DetectionMatrix, path: str | Path, diff: bool = False, meta: dict | None = None
) -> None:
    body = matrix_to_csv(matrix, diff=diff)
    if meta:
        header = "# " + " ".join(f"{k}={v}" for k, v in sorted(meta.items())) + "\n"
        body = header + body
    atomic_write_text(path, body)


def write_matrix_json(matrix: DetectionMatrix, path: str | Path, meta: dict | None = None) -> None:
    payload = matrix.to_dict()
    if meta:
        payload.update(meta)
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True))


def write_roc_csv(curve: RocCurve, path: str | Path, meta: dict | None = None) -> None:
    lines = []
    if meta:
        lines.append("# " + " ".join(f"{k}={v}" for k, v in sorted(meta.items())))
    lines.append("threshold,fpr,tpr")
    for t, (fpr, tpr) in zip(curve.thresholds, curve.points):
        lines.append(f"{t!r},{fpr!r},{tpr!r}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_breakdown_json(bd: ScoreBreakdown, path: str | Path, meta: dict | None = None) -> None:
    payload: dict = {
        "generators": bd.generators,
        "detectors": bd.detectors,
        "cells": {f"{gen}|{det}": stats.to_dict() for (gen, det), stats in bd.cells.items()},
    }
    if meta:
        payload.update(meta)
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True))


def write_breakdown_csv(bd: ScoreBreakdown, path: str | Path, meta: dict | None = None) -> None:
    lines = []
    if meta:
        lines.append("# " + " ".join(f"{k}={v}" for k, v in sorted(meta.items())))
    lines.append("generator,detector,metric,class,mean,std,n")
    for (gen, det), stats in bd.cells.items():
        for metric, cls, s in (
            ("curvature", "machine", stats.curvature_machine),
            ("curvature", "human", stats.curvature_human),
            ("loglik", "machine", stats.loglik_machine),
            ("loglik", "human", stats.loglik_human),
        ):
            lines.append(f"{gen},{det},{metric},{cls},{s.mean!r},{s.std!r},{s.n}")
    atomic_write_text(path, "\n".join(lines) + "\n")


# ------------------------------------------------------------------- plots

def _new_figure(width: float, height: float):
    import matplotlib
    from matplotlib.backends.backend_svg import FigureCanvasSVG
    from matplotlib.figure import Figure

    fig = Figure(figsize=(width, height))
    FigureCanvasSVG(fig)
    return matplotlib, fig


def _save_svg(matplotlib, fig, path: str | Path, meta: dict | None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with matplotlib.rc_context({"svg.hashsalt": "curvedetect"}):
        fig.savefig(path, format="svg", metadata={"Date": None})
    if meta:
        comment = "<!-- " + " ".join(f"{k}={v}" for k, v in sorted(meta.items())) + " -->\n"
        with open(path, "a", encoding="utf-8") as f:
            f.write(comment)


def plot_matrix_heatmap(
    matrix: DetectionMatrix, path: str | Path, diff: bool = False, meta: dict | None = None
) -> None:
    """Heatmap of the AUC (or self-minus-cross difference) grid."""
    grid = matrix.diff if diff else matrix.auc
    data = np.array(
        [[np.nan if v is None else v for v in row] for row in grid], dtype=float
    )
    mpl, fig = _new_figure(1.6 + 1.1 * len(matrix.detectors), 1.2 + 0.6 * len(matrix.generators))
    ax = fig.subplots()
    masked = np.ma.masked_invalid(data)
    im = ax.imshow(masked, cmap="viridis", aspect="auto",
                   vmin=None if diff else 0.0, vmax=None if diff else 1.0)
    ax.set_xticks(range(len(matrix.detectors)), matrix.detectors, rotation=30, ha="right")
    ax.set_yticks(range(len(matrix.generators)), matrix.generators)
    for i in range(data.shape[0]):
        for j in range(data.shape[1]):
            label = "-" if np.isnan(data[i, j]) else f"{data[i, j]:.2f}"
            ax.text(j, i, label, ha="center", va="center", fontsize=8, color="white")
    ax.set_xlabel("detector")
    ax.set_ylabel("generator")
    ax.set_title("self minus cross AUC" if diff else "cross-detection AUC")
    fig.colorbar(im, ax=ax, shrink=0.85)
    fig.tight_layout()
    _save_svg(mpl, fig, path, meta)


def plot_mean_auc(matrix: DetectionMatrix, path: str | Path, meta: dict | None = None) -> None:
    """Bar chart of each detector's mean AUC over the generator rows."""
    mpl, fig = _new_figure(1.6 + 0.9 * len(matrix.detectors), 3.2)
    ax = fig.subplots()
    xs = range(len(matrix.detectors))
    vals = [v if v is not None else 0.0 for v in matrix.mean_row]
    ax.bar(xs, vals, color="#33679b")
    ax.axhline(0.5, color="grey", linestyle="--", linewidth=0.8)
    ax.set_xticks(list(xs), matrix.detectors, rotation=30, ha="right")
    ax.set_ylim(0, 1)
    ax.set_ylabel("mean AUC")
    ax.set_title("detector ranking")
    fig.tight_layout()
    _save_svg(mpl, fig, path, meta)


def plot_breakdown(bd: ScoreBreakdown, path: str | Path, meta: dict | None = None) -> None:
    """Mean and std of curvature and log-likelihood per detector, by class."""
    n_det = len(bd.detectors)
    mpl, fig = _new_figure(3.4 * max(n_det, 1), 5.6)
    axes = fig.subplots(2, max(n_det, 1), squeeze=False)
    xs = np.arange(len(bd.generators))
    for j, det in enumerate(bd.detectors):
        for row, metric in ((0, "curvature"), (1, "loglik")):
            ax = axes[row][j]
            mach = [bd.cells[(g, det)].__dict__[f"{metric}_machine"] for g in bd.generators]
            hum = [bd.cells[(g, det)].__dict__[f"{metric}_human"] for g in bd.generators]
            ax.errorbar(xs - 0.08, [s.mean for s in mach], yerr=[s.std for s in mach],
                        fmt="o", capsize=3, label="machine", color="#c2443b")
            ax.errorbar(xs + 0.08, [s.mean for s in hum], yerr=[s.std for s in hum],
                        fmt="s", capsize=3, label="human", color="#33679b")
            ax.set_xticks(xs, bd.generators, rotation=30, ha="right")
            ax.set_title(f"{metric}: {det}", fontsize=9)
            if j == 0:
                ax.set_ylabel(metric)
            ax.legend(fontsize=7)
    fig.tight_layout()
    _save_svg(mpl, fig, path, meta)
