import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linear_sum_assignment
from sklearn.metrics import roc_auc_score, roc_curve

from ecgseg.dataset import SampleClass
from ecgseg.delineate import WaveSegment
from ecgseg.evaluation import (
    FIDUCIALS,
    BeatMatchResult,
    EvalReport,
    averaged_metrics,
    beat_table,
    binary_roc,
    boundary_metrics,
    boundary_table,
    class_metrics,
    confusion_matrix,
    f_score,
    match_events,
    reference_fiducials,
    roc_auc,
    sample_report,
    tolerance_samples,
)
from ecgseg.wfdb_io import AnnotationEvent


def pairwise_auc(pos, neg):
    """Probability a random positive outscores a random negative (ties half)."""
    pos, neg = np.asarray(pos)[:, None], np.asarray(neg)[None, :]
    return float(np.mean((pos > neg) + 0.5 * (pos == neg)))


def max_matching(pred, ref, tol):
    if not len(pred) or not len(ref):
        return 0
    ok = np.abs(np.subtract.outer(np.asarray(pred), np.asarray(ref))) <= tol
    rows, cols = linear_sum_assignment(-ok.astype(float))
    return int(ok[rows, cols].sum())


class TestConfusion:
    def test_counts(self):
        cm = confusion_matrix([0, 0, 1, 3, 3], [0, 1, 1, 3, 2])
        assert cm.tolist() == [[1, 1, 0, 0], [0, 1, 0, 0], [0, 0, 0, 0], [0, 0, 1, 1]]

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            confusion_matrix([0, 1], [0])

    def test_worked_example(self):
        cm = np.diag([90, 0, 0, 0])
        cm[0, 3] = 10
        cm[3, 0] = 5
        m = class_metrics(cm).by_name("P")
        assert (m.tp, m.fn, m.fp) == (90, 10, 5)
        assert m.sensitivity == pytest.approx(0.9)
        assert m.precision == pytest.approx(90 / 95)
        assert m.f_score == pytest.approx(2 * 0.9 * (90 / 95) / (0.9 + 90 / 95))

    def test_undefined_ratios(self):
        m = class_metrics(np.diag([5, 0, 0, 5])).by_name("QRS")
        assert m.sensitivity is None and m.precision is None and m.f_score is None

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.integers(0, 50), min_size=16, max_size=16))
    def test_micro_equals_accuracy(self, flat):
        cm = np.array(flat).reshape(4, 4)
        if cm.sum() == 0:
            return
        a = averaged_metrics(cm)
        acc = np.trace(cm) / cm.sum()
        assert a.micro_precision == a.micro_sensitivity == pytest.approx(acc, abs=0)


class TestFScore:
    @settings(max_examples=100)
    @given(st.floats(0.01, 1), st.floats(0.01, 1))
    def test_beta_one_is_harmonic_mean(self, p, s):
        assert abs(f_score(p, s) - 2 * p * s / (p + s)) <= 1e-12
        assert abs(f_score(p, s, form="standard") - 2 * p * s / (p + s)) <= 1e-12

    def test_forms_differ_for_beta_two(self):
        p, s = 0.5, 0.8
        assert f_score(p, s, 2.0) == pytest.approx(3 * p * s / (4 * p + s))
        assert f_score(p, s, 2.0, "standard") == pytest.approx(5 * p * s / (4 * p + s))

    def test_none_and_zero(self):
        assert f_score(None, 0.5) is None
        assert f_score(0.0, 0.0) is None

    def test_unknown_form(self):
        with pytest.raises(ValueError):
            f_score(0.5, 0.5, form="other")


class TestRoc:
    @pytest.mark.parametrize("seed", range(10))
    def test_auc_matches_pairwise_and_sklearn(self, seed):
        rng = np.random.default_rng(seed)
        y = rng.integers(0, 2, 40).astype(bool)
        y[:2] = [True, False]
        s = np.round(rng.normal(size=40) + y, 1)  # rounding creates ties
        c = binary_roc(y, s)
        assert c.auc == pytest.approx(pairwise_auc(s[y], s[~y]), abs=1e-12)
        assert c.auc == pytest.approx(roc_auc_score(y, s), abs=1e-12)
        fpr, tpr, _ = roc_curve(y, s, drop_intermediate=False)
        np.testing.assert_allclose(c.fpr, fpr)
        np.testing.assert_allclose(c.tpr, tpr)

    def test_endpoints_and_monotone(self):
        rng = np.random.default_rng(0)
        y = rng.integers(0, 4, 300)
        probs = rng.dirichlet(np.ones(4), 300)
        r = roc_auc(y, probs)
        for c in [*r.per_class.values(), r.micro, r.macro]:
            assert (c.fpr[0], c.tpr[0], c.fpr[-1], c.tpr[-1]) == (0, 0, 1, 1)
            assert np.all(np.diff(c.fpr) >= 0) and np.all(np.diff(c.tpr) >= 0)

    def test_perfect_separation(self):
        y = np.array([0, 1, 2, 3] * 5)
        r = roc_auc(y, np.eye(4)[y])
        assert all(c.auc == 1.0 for c in r.per_class.values())
        assert r.micro.auc == 1.0

    def test_micro_is_pooled(self):
        rng = np.random.default_rng(1)
        y = rng.integers(0, 4, 200)
        probs = rng.dirichlet(np.ones(4), 200)
        onehot = np.eye(4)[y]
        assert roc_auc(y, probs).micro.auc == pytest.approx(roc_auc_score(onehot.ravel(), probs.ravel()))

    def test_absent_class_skipped(self):
        y = np.array([0, 1, 3, 3])
        r = roc_auc(y, np.full((4, 4), 0.25))
        assert set(r.per_class) == {"P", "QRS", "NW"}

    def test_single_class_rejected(self):
        with pytest.raises(ValueError):
            binary_roc(np.ones(5, bool), np.arange(5.0))


class TestMatching:
    def test_tolerance_samples(self):
        assert tolerance_samples(0.150, 250) == 37
        assert tolerance_samples(0.150, 360) == 54
        with pytest.raises(ValueError):
            tolerance_samples(0, 250)

    def test_worked_example(self):
        r = match_events([100, 300, 510, 900], [102, 298, 500, 700], 250)
        assert (r.n_beats, r.tp, r.fp, r.fn) == (4, 3, 1, 1)
        assert r.sensitivity == 0.75 and r.precision == 0.75 and r.error_rate == 0.5
        assert r.timing_errors().tolist() == [-2, 2, 10]

    def test_one_to_one(self):
        r = match_events([100, 101, 102], [100], 250)
        assert (r.tp, r.fp, r.fn) == (1, 2, 0)

    def test_window_boundary(self):
        assert match_events([137], [100], 250).tp == 1
        assert match_events([138], [100], 250).tp == 0

    @settings(max_examples=200, deadline=None)
    @given(
        st.lists(st.integers(0, 200), max_size=12, unique=True),
        st.lists(st.integers(0, 200), max_size=12, unique=True),
        st.integers(1, 20),
    )
    def test_maximum_and_symmetric(self, pred, ref, tol):
        r = match_events(pred, ref, fs=1.0, tolerance_s=tol)
        assert r.tp == max_matching(pred, ref, tol)
        s = match_events(ref, pred, fs=1.0, tolerance_s=tol)
        assert (s.tp, s.fp, s.fn) == (r.tp, r.fn, r.fp)
        assert r.tp + r.fn == len(ref) and r.tp + r.fp == len(pred)
        assert all(abs(p - q) <= tol for p, q in r.pairs)

    def test_add_and_table(self):
        a = BeatMatchResult(10, 9, 1, 1, 0.15)
        b = BeatMatchResult(5, 5, 0, 0, 0.15)
        table = beat_table({"100": a, "total": a + b})
        assert table.splitlines() == [
            "record,n_beats,TP,FP,FN,Err_pct,Se_pct,Ppos_pct",
            "100,10,9,1,1,20.00,90.00,90.00",
            "total,15,14,1,1,13.33,93.33,93.33",
        ]


class TestBoundaries:
    def test_reference_fiducials_only_annotated(self):
        evs = [AnnotationEvent(i, s) for i, s in [(10, "("), (15, "p"), (30, "N"), (35, ")"), (60, "t"), (80, ")")]]
        f = reference_fiducials(evs)
        assert f["P_on"] == [10] and f["P_end"] == [] and f["QRS_on"] == [] and f["QRS_end"] == [35]
        assert f["T_peak"] == [60] and f["T_end"] == [80]

    def test_boundary_metrics_and_table(self):
        waves = [WaveSegment(SampleClass.P, 10, 15, 20), WaveSegment(SampleClass.QRS, 28, 30, 36)]
        evs = [AnnotationEvent(i, s) for i, s in [(12, "("), (15, "p"), (20, ")"), (28, "("), (30, "N"), (35, ")")]]
        res = boundary_metrics(waves, evs, 250.0)
        assert set(res) == set(FIDUCIALS)
        assert res["QRS_end"].tp == 1 and res["T_end"].n_beats == 0
        rows = boundary_table(res).splitlines()
        assert rows[0] == "parameter," + ",".join(FIDUCIALS)
        assert rows[2].startswith("Se,100.00") and rows[3].endswith("N/A,N/A")


class TestReport:
    def _report(self):
        rng = np.random.default_rng(0)
        y = rng.integers(0, 4, 500)
        p = rng.dirichlet(np.ones(4), 500)
        p[np.arange(500), y] += 0.5
        rep = sample_report(y, p / p.sum(1, keepdims=True), meta={"seed": 1})
        rep.beat_match["100"] = BeatMatchResult(3, 2, 1, 1, 0.15)
        return rep

    def test_json_deterministic_and_roundtrip(self):
        rep = self._report()
        assert rep.to_json() == self._report().to_json()
        back = EvalReport.from_dict(json.loads(rep.to_json()))
        assert back.metrics_csv() == rep.metrics_csv()
        assert back.confusion_csv() == rep.confusion_csv()
        assert back.beat_match["100"].tp == 2

    def test_csv_layouts(self):
        rep = self._report()
        assert rep.metrics_csv().splitlines()[0] == "class,support,TP,FP,FN,TN,Se,Ppos,F"
        assert rep.confusion_csv().splitlines()[0] == "actual\\predicted,P,QRS,T,NW"
        assert set(line.split(",")[0] for line in rep.roc_csv().splitlines()[1:]) == {"P", "QRS", "T", "NW", "micro", "macro"}
        assert "\t" in rep.metrics_csv("\t")
