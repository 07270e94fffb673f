import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ecgseg.dataset import SampleClass
from ecgseg.delineate import (
    DelineationResult,
    WaveSegment,
    argmax_decode,
    delineate_labels,
    delineate_record,
    extract_wave_segments,
    locate_peak,
    paint_waves,
    predict_record,
)

P, QRS, T, NW = (int(c) for c in SampleClass)


def labels_from(runs):
    out = []
    for cls, n in runs:
        out += [cls] * n
    return np.array(out, dtype=np.uint8)


class TestExtract:
    def test_basic_runs(self):
        lab = labels_from([(NW, 10), (P, 20), (NW, 30), (QRS, 25), (NW, 40), (T, 50), (NW, 5)])
        assert extract_wave_segments(lab, 250) == [(SampleClass.P, 10, 29), (SampleClass.QRS, 60, 84), (SampleClass.T, 125, 174)]

    def test_short_runs_removed(self):
        # 20 ms at 250 Hz is 5 samples
        lab = labels_from([(NW, 10), (QRS, 4), (NW, 10), (T, 5), (NW, 10)])
        assert extract_wave_segments(lab, 250) == [(SampleClass.T, 24, 28)]

    def test_gap_merge(self):
        # 8 ms at 250 Hz is 2 samples
        lab = labels_from([(QRS, 10), (NW, 2), (QRS, 10), (NW, 3), (QRS, 10)])
        assert extract_wave_segments(lab, 250) == [(SampleClass.QRS, 0, 21), (SampleClass.QRS, 25, 34)]

    def test_merge_across_dropped_short_run(self):
        lab = labels_from([(T, 10), (NW, 1), (P, 2), (NW, 1), (T, 10)])
        assert extract_wave_segments(lab, 250, gap_samples=4) == [(SampleClass.T, 0, 23)]

    def test_adjacent_different_classes_not_merged(self):
        lab = labels_from([(P, 10), (QRS, 10)])
        assert extract_wave_segments(lab, 250) == [(SampleClass.P, 0, 9), (SampleClass.QRS, 10, 19)]

    def test_empty_and_all_nw(self):
        assert extract_wave_segments(np.zeros(0, np.uint8), 250) == []
        assert extract_wave_segments(np.full(100, NW, np.uint8), 250) == []

    @settings(max_examples=80, deadline=None)
    @given(st.lists(st.tuples(st.sampled_from([P, QRS, T, NW]), st.integers(1, 30)), max_size=30))
    def test_invariants(self, runs):
        lab = labels_from(runs)
        segs = extract_wave_segments(lab, 250)
        for (c1, s1, e1), (c2, s2, e2) in zip(segs, segs[1:]):
            assert e1 < s2  # disjoint and ordered
        for cls, s, e in segs:
            assert cls != SampleClass.NW and e - s + 1 >= 5
        # with merging and filtering off, painting the runs back is lossless
        raw = extract_wave_segments(lab, 250, min_samples=0, gap_samples=-1)
        np.testing.assert_array_equal(paint_waves(raw, len(lab)), lab)


class TestPeaks:
    def test_abs_max_and_ties(self):
        x = np.array([0, 1, -3, 3, 2.0])
        assert locate_peak(x, (SampleClass.QRS, 0, 4)) == 2
        assert locate_peak(x, (SampleClass.QRS, 3, 4)) == 3

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            locate_peak(np.zeros(5), (SampleClass.P, 2, 5))

    def test_wave_segment_validation(self):
        with pytest.raises(ValueError):
            WaveSegment(SampleClass.QRS, 5, 4, 6)
        with pytest.raises(ValueError):
            WaveSegment(SampleClass.NW, 1, 2, 3)


class _FakeModel:
    """Posteriors that mark samples above 0.5 as QRS, others NW."""

    def __init__(self):
        self.calls = []

    def predict_proba(self, x):
        x = np.asarray(x)
        self.calls.append(x.shape)
        p = np.zeros(x.shape + (4,))
        p[..., QRS] = x > 0.5
        p[..., NW] = x <= 0.5
        return p


class TestRecord:
    def test_argmax_ties_lowest_class(self):
        assert argmax_decode(np.array([[0.25] * 4, [0, 0.5, 0.5, 0]])).tolist() == [0, 1]

    def test_windowing(self):
        x = np.zeros(2500)
        m = _FakeModel()
        probs = predict_record(m, x)
        assert probs.shape == (2500, 4)
        assert m.calls == [(2, 1000), (1, 500)]

    def test_empty(self):
        with pytest.raises(ValueError):
            predict_record(_FakeModel(), np.zeros(0))

    def test_end_to_end(self):
        x = np.zeros(2300)
        for c in (100, 1000, 1995, 2200):
            x[c - 10 : c + 11] = 1.0
            x[c] = 2.0
        res = delineate_record(_FakeModel(), x, 250.0, "r1", keep_probs=True)
        assert [(w.onset, w.peak, w.offset) for w in res.waves] == [
            (90, 100, 110), (990, 1000, 1010), (1985, 1995, 2005), (2190, 2200, 2210)
        ]
        assert res.probs.shape == (2300, 4)

    def test_exports(self):
        res = delineate_labels(labels_from([(NW, 5), (QRS, 10), (NW, 5)]), np.arange(20.0), 250.0, "rec")
        csv_text = res.to_csv()
        assert csv_text.splitlines() == [
            "record,class,onset,peak,offset,onset_s,peak_s,offset_s",
            "rec,QRS,5,14,14,0.02,0.056,0.056",
        ]
        assert "\t" in res.to_csv("\t")
        data = json.loads(res.to_json())
        assert data["record"] == "rec" and data["waves"][0]["class"] == "QRS"
        assert res.of_class(SampleClass.P) == []
