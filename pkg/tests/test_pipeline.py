import numpy as np
import pytest

from ecgseg.dataset import SampleClass
from ecgseg.pipeline import (
    DatasetLayoutError,
    PrepConfig,
    boundary_events,
    check_layout,
    evaluate_qrs_record,
    prepare_record,
    preprocess_directory,
    qrs_peaks_at_source_rate,
    rescale_events,
)
from ecgseg.delineate import DelineationResult, WaveSegment
from ecgseg.wfdb_io import AnnotationEvent, read_record

from synth import make_mitdb_like, make_qtdb_like, synth_ecg


class OracleModel:
    """Predicts QRS wherever the band-passed signal exceeds half its max."""

    def predict_proba(self, x):
        x = np.atleast_2d(x)
        thr = 0.5 * np.abs(x).max(axis=1, keepdims=True)
        p = np.zeros(x.shape + (4,))
        p[..., 1] = x > thr
        p[..., 3] = x <= thr
        return p


class TestPrepare:
    def test_labels_follow_annotations(self, tmp_path):
        make_qtdb_like(tmp_path, 1, 20)
        rec = read_record(tmp_path, "sel100", ("q1c", "pu0"))
        signal, labels, events, ext = prepare_record(rec)
        assert ext == "q1c" and len(signal) == len(labels) == 5000
        assert set(np.unique(labels)) == {0, 1, 2, 3}

    def test_annotator_fallback(self, tmp_path):
        make_qtdb_like(tmp_path, 1, 10)
        (tmp_path / "sel100.q1c").rename(tmp_path / "sel100.pu0")
        rec = read_record(tmp_path, "sel100", ("q1c", "pu0"))
        assert boundary_events(rec, ("q1c", "pu0"))[0] == "pu0"
        with pytest.raises(DatasetLayoutError, match=".q1c"):
            boundary_events(rec, ("q1c",))

    def test_rescale_events(self):
        evs = [AnnotationEvent(360, "N"), AnnotationEvent(3599, "N")]
        out = rescale_events(evs, 360, 250, 2500)
        assert [e.sample_index for e in out] == [250, 2499]

    def test_channel_checked(self, tmp_path):
        make_qtdb_like(tmp_path, 1, 10)
        with pytest.raises(ValueError, match="channel 5"):
            prepare_record(read_record(tmp_path, "sel100", ("q1c",)), PrepConfig(channel=5))


class TestPreprocess:
    def test_segments_and_manifest(self, tmp_path):
        make_qtdb_like(tmp_path, 3, 12)
        seg = preprocess_directory(tmp_path)
        assert len(seg) == 9 and seg.samples.shape == (9, 1000)
        assert seg.manifest["records"] == ["sel100", "sel101", "sel102"]
        assert seg.manifest["annotators"] == {"sel100": "q1c", "sel101": "q1c", "sel102": "q1c"}

    def test_normalize(self, tmp_path):
        make_qtdb_like(tmp_path, 1, 8)
        seg = preprocess_directory(tmp_path, PrepConfig(normalize=True))
        np.testing.assert_allclose(seg.samples.mean(axis=1), 0, atol=1e-5)

    def test_crop_to_annotations(self, tmp_path):
        rec = synth_ecg(2500, seed=0)
        from synth import write_record

        events = [e for e in rec.events if 1000 <= e.sample_index < 1800]
        write_record(tmp_path, "r", np.stack([rec.signal, rec.signal], 1), 250.0, {"q1c": events})
        seg = preprocess_directory(tmp_path, PrepConfig(crop_to_annotations=True))
        lo = min(e.sample_index for e in events)
        assert len(seg) == 1 and seg.start_offsets.tolist() == [min(lo, 1500)]

    @pytest.mark.parametrize("make", ["missing", "empty"])
    def test_layout_errors(self, tmp_path, make):
        d = tmp_path / "qtdb"
        if make == "empty":
            d.mkdir()
        with pytest.raises(DatasetLayoutError, match="expected a directory holding"):
            check_layout(d)

    def test_missing_dat(self, tmp_path):
        make_qtdb_like(tmp_path, 1, 5)
        (tmp_path / "sel100.dat").unlink()
        with pytest.raises(DatasetLayoutError, match="sel100.dat"):
            preprocess_directory(tmp_path)


class TestEvaluateHelpers:
    def test_peaks_mapped_to_source_rate(self):
        res = DelineationResult("r", 250.0, [WaveSegment(SampleClass.QRS, 240, 250, 260)])
        assert qrs_peaks_at_source_rate(res, 360.0).tolist() == [360]

    def test_qrs_on_360hz_records(self, tmp_path):
        make_mitdb_like(tmp_path, 1, 30)
        rec = read_record(tmp_path, "100", ("atr",))
        r = evaluate_qrs_record(OracleModel(), rec)
        assert r.n_beats > 20 and r.sensitivity == 1.0 and r.precision == 1.0
        assert np.abs(r.timing_errors()).max() <= 3
