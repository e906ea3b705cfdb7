import math
import statistics

import numpy as np
import pytest

from curvedetect.curvature import CurvatureResult
from curvedetect.errors import ValidationError
from curvedetect.evalstats import (
    auc,
    breakdown,
    build_matrix,
    matrix_to_csv,
    plot_breakdown,
    plot_matrix_heatmap,
    plot_mean_auc,
    roc_curve,
    write_matrix_csv,
    write_roc_csv,
)
from curvedetect.textpool import Label, TextRecord


# ------------------------------------------------------ independent oracles

def naive_auc(machine, human):
    """O(n*m) pair count with half credit for ties."""
    wins = 0.0
    for m in machine:
        for h in human:
            if m > h:
                wins += 1.0
            elif m == h:
                wins += 0.5
    return wins / (len(machine) * len(human))


def sweep_area(machine, human):
    """Trapezoidal area under a brute-force threshold-sweep ROC."""
    thresholds = [float("inf")] + sorted(set(machine) | set(human), reverse=True)
    points = []
    for t in thresholds:
        tpr = sum(1 for m in machine if m >= t) / len(machine)
        fpr = sum(1 for h in human if h >= t) / len(human)
        points.append((fpr, tpr))
    area = 0.0
    for (x1, y1), (x2, y2) in zip(points, points[1:]):
        area += (x2 - x1) * (y1 + y2) / 2.0
    return area


def _record(rid, label, gen=None):
    return TextRecord(id=rid, text="text " + rid, label=label, generator_id=gen)


def _result(rid, det, d, ll=-10.0):
    return CurvatureResult(rid, det, ll, (ll - d,), d)


def _store(scores_by_gen_det, human_by_det):
    """Build (results_by_detector, records) from plain score dicts."""
    records = {}
    results = {}
    for (gen, det), scores in scores_by_gen_det.items():
        for i, d in enumerate(scores):
            rid = f"m-{gen}-{i}"
            records[rid] = _record(rid, Label.MACHINE, gen)
            results.setdefault(det, []).append(_result(rid, det, d))
    for det, scores in human_by_det.items():
        for i, d in enumerate(scores):
            rid = f"h-{i}"
            records.setdefault(rid, _record(rid, Label.HUMAN))
            results.setdefault(det, []).append(_result(rid, det, d))
    return results, list(records.values())


class TestAuc:
    def test_anchors_exact(self):
        assert auc([2, 3], [0, 1]) == 1.0
        assert auc([1, 2, 3], [1, 2, 3]) == 0.5
        # hand case: pairs (1,2)x2 lose, (3,2)x2 win -> (0 + 2)/4
        assert auc([1, 3], [2, 2]) == 0.5
        assert naive_auc([1, 3], [2, 2]) == 0.5
        assert sweep_area([1, 3], [2, 2]) == pytest.approx(0.5, abs=1e-15)

    def test_oracle_equivalence_random(self):
        rng = np.random.default_rng(42)
        for trial in range(500):
            nm, nh = int(rng.integers(1, 40)), int(rng.integers(1, 40))
            if trial % 2:  # heavy ties from small integer supports
                machine = list(rng.integers(0, 5, size=nm).astype(float))
                human = list(rng.integers(0, 5, size=nh).astype(float))
            else:
                machine = list(rng.normal(1.0, 2.0, size=nm))
                human = list(rng.normal(0.0, 2.0, size=nh))
            a = auc(machine, human)
            assert abs(a - naive_auc(machine, human)) < 1e-12
            assert abs(a - sweep_area(machine, human)) < 1e-12
            assert abs(a - roc_curve(machine, human).area()) < 1e-12

    def test_complement_identity(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            machine = list(rng.integers(0, 6, size=int(rng.integers(1, 25))).astype(float))
            human = list(rng.integers(0, 6, size=int(rng.integers(1, 25))).astype(float))
            assert auc(machine, human) + auc(human, machine) == pytest.approx(1.0, abs=1e-12)

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(6)
        machine = list(rng.normal(1, 1, size=30))
        human = list(rng.normal(0, 1, size=25))
        base = auc(machine, human)
        for f in (lambda x: 2 * x + 3, lambda x: math.exp(x / 10), lambda x: x ** 3):
            assert auc([f(m) for m in machine], [f(h) for h in human]) == base

    def test_empty_class_errors(self):
        with pytest.raises(ValidationError):
            auc([], [1.0])
        with pytest.raises(ValidationError):
            auc([1.0], [])

    def test_subsampling_sanity(self):
        # full-pool AUC usually lies between complementary half AUCs
        rng = np.random.default_rng(7)
        machine = rng.normal(1.0, 1.5, size=500)
        human = rng.normal(0.0, 1.5, size=500)
        full = auc(machine, human)
        inside = 0
        trials = 100
        for _ in range(trials):
            mi = rng.permutation(500)
            hi = rng.permutation(500)
            a1 = auc(machine[mi[:250]], human[hi[:250]])
            a2 = auc(machine[mi[250:]], human[hi[250:]])
            if min(a1, a2) <= full <= max(a1, a2):
                inside += 1
        assert inside >= 0.9 * trials


class TestRocCurve:
    def test_one_vs_one(self):
        curve = roc_curve([5.0], [3.0])
        assert curve.points == ((0.0, 0.0), (0.0, 1.0), (1.0, 1.0))
        assert curve.thresholds[0] == float("inf")
        assert curve.area() == 1.0

    def test_all_equal_diagonal(self):
        curve = roc_curve([1.0, 1.0], [1.0, 1.0, 1.0])
        assert curve.points == ((0.0, 0.0), (1.0, 1.0))
        assert curve.area() == pytest.approx(0.5, abs=1e-15)

    def test_invariants_random(self):
        rng = np.random.default_rng(8)
        machine = list(rng.normal(0.5, 1, size=300))
        human = list(rng.normal(0.0, 1, size=300))
        curve = roc_curve(machine, human)
        assert curve.points[0] == (0.0, 0.0)
        assert curve.points[-1] == (1.0, 1.0)
        fpr, tpr = curve.fpr, curve.tpr
        assert (np.diff(fpr) >= 0).all() and (np.diff(tpr) >= 0).all()
        assert abs(curve.area() - auc(machine, human)) < 1e-12

    def test_csv_export(self, tmp_path):
        curve = roc_curve([2.0, 3.0], [0.0, 1.0])
        path = tmp_path / "roc.csv"
        write_roc_csv(curve, path, meta={"engine_version": "v"})
        lines = path.read_text().splitlines()
        assert lines[0].startswith("#")
        assert lines[1] == "threshold,fpr,tpr"
        assert lines[2].startswith("inf,")


class TestMatrix:
    def test_one_by_one(self):
        results, records = _store({("g", "g"): [3.0, 4.0]}, {"g": [1.0, 2.0]})
        matrix = build_matrix(results, records)
        assert matrix.auc == [[1.0]]
        assert matrix.mean_row == [1.0]
        assert matrix.mean_row_counts == [1]
        assert matrix.diff == [[0.0]]

    def test_hand_two_by_two(self):
        # self cells perfect, cross cells hand-computed with the naive oracle
        scores = {
            ("g1", "g1"): [3.0, 4.0], ("g1", "g2"): [1.5, 2.5],
            ("g2", "g1"): [0.5, 1.5], ("g2", "g2"): [5.0, 6.0],
        }
        humans = {"g1": [1.0, 2.0], "g2": [2.0, 3.0]}
        results, records = _store(scores, humans)
        matrix = build_matrix(results, records, generators=["g1", "g2"],
                              detectors=["g1", "g2"])
        # hand-check via the oracle
        assert matrix.cell("g1", "g1") == naive_auc([3, 4], [1, 2]) == 1.0
        assert matrix.cell("g1", "g2") == naive_auc([1.5, 2.5], [2, 3]) == 0.25
        assert matrix.cell("g2", "g1") == naive_auc([0.5, 1.5], [1, 2]) == 0.25
        assert matrix.cell("g2", "g2") == 1.0
        # diff row: self AUC minus each cell in the row
        assert matrix.diff[0] == [0.0, 0.75]
        assert matrix.diff[1] == [0.75, 0.0]
        assert matrix.mean_row == [pytest.approx(0.625), pytest.approx(0.625)]

    def test_missing_self_detection_row(self):
        # generator with no matching detector column: diff row absent
        results, records = _store(
            {("chat-only", "det"): [3.0, 4.0]}, {"det": [1.0, 2.0]}
        )
        matrix = build_matrix(results, records)
        assert matrix.detectors == ["det"]
        assert matrix.diff == [[None]]

    def test_holes_and_mean_over_present(self):
        results, records = _store(
            {("g1", "d1"): [3.0, 4.0], ("g2", "d1"): [0.0, 1.0]},
            {"d1": [1.0, 2.0], "d2": [1.0, 2.0]},
        )
        matrix = build_matrix(results, records, detectors=["d1", "d2"])
        assert matrix.cell("g1", "d2") is None
        assert ("g1", "d2") in matrix.missing and ("g2", "d2") in matrix.missing
        assert matrix.mean_row[1] is None and matrix.mean_row_counts[1] == 0
        present = [matrix.cell("g1", "d1"), matrix.cell("g2", "d1")]
        assert matrix.mean_row[0] == np.mean(present)

    def test_mean_row_recomputation_exact(self):
        rng = np.random.default_rng(9)
        scores = {}
        humans = {}
        for det in ("d1", "d2", "d3"):
            humans[det] = list(rng.normal(0, 1, size=10))
            for gen in ("g1", "g2", "g3", "g4"):
                scores[(gen, det)] = list(rng.normal(0.5, 1, size=10))
        results, records = _store(scores, humans)
        matrix = build_matrix(results, records)
        for j in range(3):
            column = [matrix.auc[i][j] for i in range(4)]
            assert matrix.mean_row[j] == float(np.mean(column))

    def test_min_per_class(self):
        results, records = _store({("g", "d"): [3.0]}, {"d": [1.0, 2.0]})
        matrix = build_matrix(results, records)
        assert matrix.auc == [[None]]  # single machine record is not enough


class TestBreakdown:
    def test_hand_cell_and_invariants(self):
        scores = {("g1", "d"): [2.0, 4.0, 6.0, 8.0], ("g2", "d"): [1.0, 1.0]}
        humans = {"d": [0.0, 1.0, 2.0]}
        results, records = _store(scores, humans)
        bd = breakdown(results, records)
        cell = bd.cells[("g1", "d")]
        assert cell.curvature_machine.mean == statistics.mean([2, 4, 6, 8])
        assert cell.curvature_machine.std == pytest.approx(
            statistics.pstdev([2, 4, 6, 8]), abs=1e-12
        )
        assert cell.curvature_machine.n == 4
        # constant scores: zero std
        assert bd.cells[("g2", "d")].curvature_machine.std == 0.0
        # human statistics identical across generator rows
        assert bd.cells[("g1", "d")].curvature_human == bd.cells[("g2", "d")].curvature_human
        assert bd.cells[("g1", "d")].loglik_human == bd.cells[("g2", "d")].loglik_human


class TestExports:
    def _matrix(self):
        results, records = _store(
            {("g1", "d1"): [3.0, 4.0], ("g1", "d2"): [1.0, 2.0]},
            {"d1": [1.0, 2.0], "d2": [3.0, 4.0]},
        )
        return build_matrix(results, records, detectors=["d1", "d2", "d3"])

    def test_csv_layout(self, tmp_path):
        matrix = self._matrix()
        csv = matrix_to_csv(matrix)
        lines = csv.splitlines()
        assert lines[0] == "generator,d1,d2,d3"
        assert lines[1].startswith("g1,")
        assert lines[1].endswith(",")  # hole is an empty string
        assert lines[-1].startswith("mean,")

        path = tmp_path / "matrix.csv"
        write_matrix_csv(matrix, path, meta={"engine_version": "0"})
        assert path.read_text().startswith("# engine_version=0\n")

    def test_svg_plots_deterministic(self, tmp_path):
        matrix = self._matrix()
        results, records = _store(
            {("g1", "d1"): [3.0, 4.0], ("g1", "d2"): [1.0, 2.0]},
            {"d1": [1.0, 2.0], "d2": [3.0, 4.0]},
        )
        bd = breakdown(results, records, detectors=["d1", "d2"])
        for name, draw in [
            ("heat.svg", lambda p: plot_matrix_heatmap(matrix, p, meta={"m": 1})),
            ("mean.svg", lambda p: plot_mean_auc(matrix, p)),
            ("bd.svg", lambda p: plot_breakdown(bd, p)),
        ]:
            p1, p2 = tmp_path / ("a_" + name), tmp_path / ("b_" + name)
            draw(p1)
            draw(p2)
            assert p1.read_bytes() == p2.read_bytes(), name
            assert p1.read_text().lstrip().startswith("<?xml")
