"""Glue between records on disk and the model: filtering, labelling, caching, scoring."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import (
    SEGMENT_LENGTH,
    SampleClass,
    SegmentSet,
    build_sample_labels,
    segment_record,
    zscore,
)
from .delineate import DelineationResult, delineate_record
from .dsp import FilterSpec, bandpass, resample
from .evaluation import (
    DEFAULT_TOLERANCE_S,
    BeatMatchResult,
    boundary_metrics,
    match_beats,
    predicted_fiducials,
    reference_fiducials,
    restrict_to_span,
)
from .wfdb_io import BEAT_SYMBOLS, AnnotationEvent, Record, list_records, read_record

log = logging.getLogger(__name__)

MODEL_FS = 250.0
BEAT_ANNOTATOR = "atr"

EXPECTED_LAYOUT = {
    "qtdb": "a directory holding <record>.hea, <record>.dat and <record>.q1c (or .pu0) per record, "
    "optionally a RECORDS index, as in the PhysioNet 'qtdb/1.0.0' archive",
    "mitdb": "a directory holding <record>.hea, <record>.dat and <record>.atr per record, "
    "optionally a RECORDS index, as in the PhysioNet 'mitdb/1.0.0' archive",
}


class DatasetLayoutError(FileNotFoundError):
    """Dataset directory is missing or lacks the files a command needs."""


@dataclass(frozen=True)
class PrepConfig:
    """How raw records become model input."""

    channel: int = 0
    annotators: tuple[str, ...] = ("q1c", "pu0")
    filter_order: int = 3
    low_cut: float = 0.5
    high_cut: float = 40.0
    fs: float = MODEL_FS
    segment_length: int = SEGMENT_LENGTH
    normalize: bool = False
    crop_to_annotations: bool = False

    def filter_spec(self) -> FilterSpec:
        return FilterSpec(self.fs, self.filter_order, self.low_cut, self.high_cut)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["annotators"] = list(self.annotators)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PrepConfig":
        d = dict(d)
        if "annotators" in d:
            d["annotators"] = tuple(d["annotators"])
        return cls(**d)


def check_layout(directory: str | Path, db: str = "qtdb") -> list[str]:
    """Record names in ``directory``, or an error describing the expected layout."""
    directory = Path(directory)
    hint = EXPECTED_LAYOUT.get(db, EXPECTED_LAYOUT["qtdb"])
    if not directory.is_dir():
        raise DatasetLayoutError(f"dataset directory {directory} does not exist; expected {hint}")
    names = list_records(directory)
    if not names:
        raise DatasetLayoutError(f"no *.hea headers found in {directory}; expected {hint}")
    return names


def prepare_signal(record: Record, config: PrepConfig = PrepConfig()) -> np.ndarray:
    """Chosen channel, resampled to the model rate, then zero-phase band-passed."""
    if not 0 <= config.channel < record.signal.shape[1]:
        raise ValueError(
            f"{record.name}: channel {config.channel} not present ({record.signal.shape[1]} signals)"
        )
    x = record.signal[:, config.channel]
    if record.fs != config.fs:
        x = resample(x, record.fs, config.fs)
    return bandpass(x, config.fs, config.filter_order, config.low_cut, config.high_cut)


def rescale_events(events: Sequence[AnnotationEvent], fs_in: float, fs_out: float, n_out: int):
    """Map annotation sample indices to another sampling rate."""
    if fs_in == fs_out:
        return list(events)
    out = []
    for e in events:
        k = int(round(e.sample_index * fs_out / fs_in))
        if 0 <= k < n_out:
            out.append(replace(e, sample_index=k))
    return out


def boundary_events(record: Record, annotators: Sequence[str]) -> tuple[str, list[AnnotationEvent]]:
    """First annotator in preference order that the record carries."""
    for ext in annotators:
        if ext in record.annotations:
            return ext, record.annotations[ext]
    raise DatasetLayoutError(
        f"{record.name}: none of the annotation files {', '.join('.' + a for a in annotators)} found"
    )


def annotated_span(events: Sequence[AnnotationEvent]) -> tuple[int, int] | None:
    if not events:
        return None
    idx = [e.sample_index for e in events]
    return min(idx), max(idx)


def prepare_record(record: Record, config: PrepConfig = PrepConfig()):
    """``(signal, labels, events, annotator)`` at the model sampling rate."""
    signal = prepare_signal(record, config)
    ext, events = boundary_events(record, config.annotators)
    events = rescale_events(events, record.fs, config.fs, len(signal))
    labels = build_sample_labels(events, len(signal))
    return signal, labels, events, ext


def _crop(signal, labels, events, length):
    span = annotated_span(events)
    if span is None:
        return signal[:0], labels[:0], 0
    lo, hi = span
    # whole windows covering the annotated stretch
    n_win = max(1, -(-(hi - lo + 1) // length))
    lo = max(0, min(lo, len(signal) - n_win * length))
    hi = min(len(signal), lo + n_win * length)
    return signal[lo:hi], labels[lo:hi], lo


def preprocess_directory(
    directory: str | Path,
    config: PrepConfig = PrepConfig(),
    records: Sequence[str] | None = None,
) -> SegmentSet:
    """Read, filter, label and cut every record into fixed-length segments."""
    names = check_layout(directory, "qtdb") if records is None else list(records)
    segments = []
    used = {}
    for name in names:
        try:
            rec = read_record(directory, name, config.annotators)
        except FileNotFoundError as exc:
            raise DatasetLayoutError(f"{exc}; expected {EXPECTED_LAYOUT['qtdb']}") from None
        signal, labels, events, ext = prepare_record(rec, config)
        offset = 0
        if config.crop_to_annotations:
            signal, labels, offset = _crop(signal, labels, events, config.segment_length)
        segs = segment_record(signal, labels, name, config.segment_length)
        for s in segs:
            s.start_offset += offset
            if config.normalize:
                s.samples = zscore(s.samples)
        segments.extend(segs)
        used[name] = ext
        log.info("record=%s annotator=%s segments=%d", name, ext, len(segs))
    manifest = {
        "records": names,
        "annotators": used,
        "prep": config.to_dict(),
    }
    return SegmentSet.from_segments(segments, manifest)


class NormalizingPredictor:
    """Applies the per-window z-score used at training time before inference."""

    def __init__(self, model, normalize: bool):
        self.model = model
        self.normalize = normalize

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.normalize:
            x = np.stack([zscore(row) for row in np.atleast_2d(x)]).reshape(x.shape)
        return self.model.predict_proba(x)


def delineate(model, record: Record, config: PrepConfig = PrepConfig()) -> DelineationResult:
    signal = prepare_signal(record, config)
    return delineate_record(NormalizingPredictor(model, config.normalize), signal, config.fs, record.name)


def qrs_peaks_at_source_rate(result: DelineationResult, fs_source: float) -> np.ndarray:
    """Predicted QRS peak indices mapped back to the record's own sampling rate."""
    peaks = np.array([w.peak for w in result.of_class(SampleClass.QRS)], dtype=np.float64)
    return np.round(peaks * fs_source / result.sampling_frequency).astype(np.int64)


def evaluate_qrs_record(
    model,
    record: Record,
    config: PrepConfig = PrepConfig(),
    tolerance_s: float = DEFAULT_TOLERANCE_S,
) -> BeatMatchResult:
    """Beat matching of predicted QRS peaks against ``.atr`` beat annotations."""
    if BEAT_ANNOTATOR not in record.annotations:
        raise DatasetLayoutError(f"{record.name}: no .{BEAT_ANNOTATOR} beat annotation file")
    result = delineate(model, record, config)
    ref = [e.sample_index for e in record.annotations[BEAT_ANNOTATOR] if e.symbol in BEAT_SYMBOLS]
    pred = qrs_peaks_at_source_rate(result, record.fs)
    return match_beats(pred, ref, record.fs, tolerance_s)


def evaluate_boundaries_record(
    model,
    record: Record,
    config: PrepConfig = PrepConfig(),
    tolerance_s: float = DEFAULT_TOLERANCE_S,
) -> dict[str, BeatMatchResult]:
    """Fiducial matching against the boundary annotations.

    Predictions are scored only within the annotated stretch (plus the
    tolerance), since references are sparse outside it.
    """
    result = delineate(model, record, config)
    _, events = boundary_events(record, config.annotators)
    events = rescale_events(events, record.fs, config.fs, len(result.labels))
    ref = reference_fiducials(events)
    pred = predicted_fiducials(result.waves)
    span = annotated_span(events)
    if span is not None:
        pad = int(tolerance_s * config.fs)
        pred = restrict_to_span(pred, span[0] - pad, span[1] + pad)
    return boundary_metrics(pred, ref, config.fs, tolerance_s)


def load_records(directory: str | Path, names: Sequence[str], annotators: Sequence[str], db: str = "qtdb"):
    for name in names:
        try:
            yield read_record(directory, name, tuple(annotators))
        except FileNotFoundError as exc:
            raise DatasetLayoutError(f"{exc}; expected {EXPECTED_LAYOUT.get(db, '')}") from None
