import math
import random

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats
from sklearn.metrics import accuracy_score, f1_score, matthews_corrcoef

from encoderkd.errors import DuplicateSeed, EmptyRecords, LengthMismatch, TooFewPairs
from encoderkd.evaluation import (
    MetricKind,
    RunRecord,
    build_report,
    confusion,
    is_degenerate,
    metric,
    paired_t_test,
    render_significance_tsv,
    render_text,
    render_tsv,
)

SK = {"ACC": accuracy_score, "F1": lambda g, p: f1_score(g, p, zero_division=0), "MCC": matthews_corrcoef}


def vectors(tp, tn, fp, fn):
    preds = [1] * tp + [0] * tn + [1] * fp + [0] * fn
    golds = [1] * tp + [0] * tn + [0] * fp + [1] * fn
    return preds, golds


class TestMetrics:
    def test_perfect(self):
        p = [0, 1, 1, 0]
        assert [metric(k, p, p) for k in "ACC F1 MCC".split()] == [1.0, 1.0, 1.0]

    def test_mcc_worked_example(self):
        p, g = vectors(3, 4, 1, 2)
        assert confusion(p, g) == (3, 4, 1, 2)
        assert metric("MCC", p, g) == pytest.approx(10 / math.sqrt(600), abs=1e-12)
        assert metric("MCC", p, g) == pytest.approx(0.40825, abs=1e-5)

    def test_f1_worked_example(self):
        p, g = vectors(3, 4, 1, 2)
        precision, recall = 3 / 4, 3 / 5
        assert metric("F1", p, g) == pytest.approx(2 * precision * recall / (precision + recall), abs=1e-12)

    @pytest.mark.parametrize("pred", [0, 1])
    def test_one_class_predictions(self, pred):
        golds = [0, 1, 1, 0, 1]
        assert metric("MCC", [pred] * 5, golds) == 0.0
        assert is_degenerate("MCC", [pred] * 5, golds)
        assert not is_degenerate("ACC", [pred] * 5, golds)

    def test_f1_no_positives_anywhere(self):
        assert metric("F1", [0, 0], [0, 0]) == 0.0 and is_degenerate("F1", [0, 0], [0, 0])

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            metric("ACC", [1], [1, 0])
        with pytest.raises(LengthMismatch):
            metric("ACC", [], [])

    @pytest.mark.filterwarnings("ignore:A single label was found")
    @pytest.mark.parametrize("kind", list(MetricKind), ids=lambda k: k.value)
    def test_confusion_matrix_oracle(self, kind):
        rng = np.random.default_rng(11)
        for _ in range(200):
            n = int(rng.integers(1, 40))
            g = rng.integers(0, 2, n)
            p = np.where(rng.random(n) < 0.7, g, 1 - g)
            assert metric(kind, p, g) == pytest.approx(SK[kind.value](g, p), abs=1e-10)


class TestTTest:
    def test_worked_example(self):
        a = [71.0, 72.0, 70.0, 73.0]
        b = [70.0, 70.0, 70.0, 70.0]
        t, p = paired_t_test(a, b)
        assert t == pytest.approx(2.3238, abs=1e-4)
        assert p == pytest.approx(0.1027, abs=1e-3)

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_scipy(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 12))
        a, b = rng.normal(70, 2, n), rng.normal(70, 2, n)
        t, p = paired_t_test(a, b)
        ref = stats.ttest_rel(a, b)
        assert t == pytest.approx(ref.statistic, rel=1e-10)
        assert p == pytest.approx(ref.pvalue, abs=1e-6)

    @given(st.lists(st.tuples(st.floats(0, 100), st.floats(0, 100)), min_size=2, max_size=10))
    def test_antisymmetric(self, pairs):
        a, b = zip(*pairs)
        t1, p1 = paired_t_test(a, b)
        t2, p2 = paired_t_test(b, a)
        assert t1 == -t2 or (t1 == 0 and t2 == 0)
        assert p1 == pytest.approx(p2, abs=1e-12)

    def test_identical_samples(self):
        assert paired_t_test([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == (0.0, 1.0)

    def test_constant_shift(self):
        t, p = paired_t_test([2.0, 3.0, 4.0, 5.0], [1.0, 2.0, 3.0, 4.0])
        assert t == math.inf and p == 0.0

    def test_errors(self):
        with pytest.raises(TooFewPairs):
            paired_t_test([1.0], [2.0])
        with pytest.raises(LengthMismatch):
            paired_t_test([1.0, 2.0], [2.0])


def records(objective="att", init="4,8,12", task="rte", values=(70, 71, 72, 73)):
    return [RunRecord(objective, init, task, s, float(v)) for s, v in enumerate(values, start=1)]


class TestReport:
    def test_mean_std(self):
        cell = build_report(records()).cells[("att", "4,8,12", "rte")]
        assert cell.mean == 71.5
        assert cell.std == pytest.approx(1.29099, abs=1e-5)
        assert cell.std == np.std([70, 71, 72, 73], ddof=1)
        assert (cell.n, cell.single_seed) == (4, False)

    def test_single_seed_flag(self):
        rep = build_report(records(values=(70,)))
        cell = rep.cells[("att", "4,8,12", "rte")]
        assert cell.std == 0.0 and cell.single_seed
        assert "*" in render_text(rep) and "single seed" in render_text(rep)

    def test_degenerate_flag(self):
        recs = [RunRecord("att", "1,2", "cola", 1, 20.0, "MCC"), RunRecord("att", "1,2", "cola", 2, 0.0, "MCC", degenerate=True)]
        rep = build_report(recs)
        assert rep.cells[("att", "1,2", "cola")].degenerate == 1
        assert "!" in render_text(rep)
        assert "!" not in render_text(build_report(recs[:1]))

    def test_duplicate_seed(self):
        with pytest.raises(DuplicateSeed):
            build_report(records() + records(values=(1,)))

    def test_empty(self):
        with pytest.raises(EmptyRecords):
            build_report([])

    @given(st.randoms(use_true_random=False))
    def test_permutation_invariant(self, rnd: random.Random):
        recs = records() + records("hid", values=(60, 65, 61, 62)) + records(task="mrpc", values=(80, 82, 81, 85))
        shuffled = list(recs)
        rnd.shuffle(shuffled)
        a, b = build_report(recs), build_report(shuffled)
        assert a.cells == b.cells and a.significance == b.significance
        assert render_tsv(a) == render_tsv(b)

    def test_aggregate_recomputable_from_rows(self):
        rep = build_report(records() + records("hid", values=(60, 65, 61, 62)))
        for (obj, init, task), cell in rep.cells.items():
            vals = [v for (o, i, t, _), v in rep.rows.items() if (o, i, t) == (obj, init, task)]
            assert cell.mean == np.mean(vals) and cell.std == np.std(vals, ddof=1)

    def test_significance_families(self):
        recs = (
            records("att", "4,8,12") + records("hid", "4,8,12", values=(60, 62, 61, 65))
            + records("att", "1,2,3", values=(68, 69, 70, 70))
            + records("att", "4,8,12", task="mrpc", values=(80, 81, 82, 83))
            + records("hid", "4,8,12", task="mrpc", values=(79, 81, 80, 80))
        )  # fmt: skip
        rep = build_report(recs)
        objective = [s for s in rep.significance if s.family == "objective" and s.scope == "4,8,12"]
        assert {s.task for s in objective} == {"rte", "mrpc", "pooled"}
        pooled = next(s for s in objective if s.task == "pooled")
        assert pooled.n == 8 and (pooled.a, pooled.b) == ("att", "hid")
        init = [s for s in rep.significance if s.family == "init"]
        assert [(s.scope, s.a, s.b, s.task) for s in init] == [("att", "1,2,3", "4,8,12", "rte")]
        t, p = paired_t_test([68, 69, 70, 70], [70, 71, 72, 73])
        assert (init[0].t, init[0].p) == (t, p)
        assert render_significance_tsv(rep).count("\n") == len(rep.significance) + 1

    @pytest.mark.parametrize("by, groups", [("objective", ["att", "hid"]), ("init", ["1,2,3", "4,8,12"])])
    def test_grouping(self, by, groups):
        rep = build_report(records() + records("hid") + records(init="1,2,3"))
        assert list(rep.groups(by)) == groups

    def test_bad_grouping(self):
        with pytest.raises(ValueError):
            build_report(records()).groups("task")
