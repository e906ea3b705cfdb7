"""The perturbation-curvature detection statistic and thresholded verdicts.

For a text x with perturbed neighbors x~_1..x~_k scored by one backend,
the statistic is the target log-probability minus the mean neighbor
log-probability. Large values mean the text sits on a local optimum of
the scorer's likelihood, which is the signature of machine generation.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Literal, Sequence

import numpy as np

from .errors import ValidationError
from .scorer import ScorerBackend
from .textpool import Label
from .util import atomic_write_text

LogprobMode = Literal["sum", "mean"]


@dataclass(frozen=True)
class CurvatureResult:
    """Detection statistic for one record under one detector.

    All constituent neighbor log-probabilities are retained so one
    perturbation set can be re-analyzed without re-scoring.
    curvature_normalized divides by the neighbor-score standard deviation
    (population); it is None when that deviation is zero. Headline
    evaluation always uses the unnormalized statistic.
    """

    record_id: str
    detector_id: str
    target_logprob: float
    perturb_logprobs: tuple[float, ...]
    curvature: float
    curvature_normalized: float | None = None

    def __post_init__(self):
        k = len(self.perturb_logprobs)
        if k < 1:
            raise ValidationError("need at least one perturbation logprob")
        mean = math.fsum(self.perturb_logprobs) / k
        if abs(self.curvature - (self.target_logprob - mean)) > 1e-9:
            raise ValidationError("curvature inconsistent with target minus mean")

    @property
    def k(self) -> int:
        return len(self.perturb_logprobs)

    def to_dict(self) -> dict:
        return {
            "record_id": self.record_id,
            "detector_id": self.detector_id,
            "target_logprob": self.target_logprob,
            "perturb_logprobs": list(self.perturb_logprobs),
            "curvature": self.curvature,
            "curvature_normalized": self.curvature_normalized,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CurvatureResult":
        return cls(
            record_id=d["record_id"],
            detector_id=d["detector_id"],
            target_logprob=d["target_logprob"],
            perturb_logprobs=tuple(d["perturb_logprobs"]),
            curvature=d["curvature"],
            curvature_normalized=d.get("curvature_normalized"),
        )


@dataclass(frozen=True)
class Verdict:
    record_id: str
    score: float
    threshold: float
    predicted: Label


def curvature(
    scorer: ScorerBackend,
    text: str,
    perturbations: Sequence[str],
    record_id: str = "",
    mode: LogprobMode = "sum",
) -> CurvatureResult:
    """Score text and its neighbors, return the curvature statistic.

    mode picks the log-probability reduction: "sum" (the default, the
    statistic as defined) or "mean" (length-normalized, for texts whose
    perturbations change token counts materially). Any scoring failure
    aborts the whole record; there is no partial averaging.
    """
    if not perturbations:
        raise ValidationError("need at least one perturbation")
    if mode not in ("sum", "mean"):
        raise ValidationError(f"unknown logprob mode {mode!r}")

    target_report = scorer.logprob(text)
    neighbor_reports = [scorer.logprob(p) for p in perturbations]
    return curvature_from_reports(
        record_id, scorer.identity, target_report, neighbor_reports, mode
    )


def curvature_from_reports(
    record_id: str,
    detector_id: str,
    target_report,
    neighbor_reports,
    mode: LogprobMode = "sum",
) -> CurvatureResult:
    """Assemble the statistic from already-computed ScoreReports."""
    if not neighbor_reports:
        raise ValidationError("need at least one perturbation")

    def value(report) -> float:
        return report.total_logprob if mode == "sum" else report.mean_logprob

    target = value(target_report)
    neighbor_values = [value(r) for r in neighbor_reports]
    k = len(neighbor_values)
    # Summing deviations keeps the statistic exactly zero when every
    # neighbor score equals the target.
    d = -math.fsum(v - target for v in neighbor_values) / k
    std = float(np.std(neighbor_values))
    return CurvatureResult(
        record_id=record_id,
        detector_id=detector_id,
        target_logprob=target,
        perturb_logprobs=tuple(neighbor_values),
        curvature=d,
        curvature_normalized=(d / std) if std > 0 else None,
    )


def classify(results: Iterable[CurvatureResult], threshold: float) -> list[Verdict]:
    """Machine iff curvature >= threshold; evaluation sweeps the threshold."""
    return [
        Verdict(
            record_id=r.record_id,
            score=r.curvature,
            threshold=threshold,
            predicted=Label.MACHINE if r.curvature >= threshold else Label.HUMAN,
        )
        for r in results
    ]


def write_curvatures(
    path: str | Path, results: Iterable[CurvatureResult], meta: dict | None = None
) -> None:
    """Persist results as JSONL keyed by (detector_id, record_id)."""
    lines = []
    if meta is not None:
        lines.append(json.dumps({"__meta__": meta}, sort_keys=True))
    lines.extend(json.dumps(r.to_dict(), sort_keys=True) for r in results)
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_curvatures(path: str | Path) -> list[CurvatureResult]:
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            obj = json.loads(line)
            if "__meta__" in obj:
                continue
            out.append(CurvatureResult.from_dict(obj))
    return out
