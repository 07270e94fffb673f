"""Turning per-sample posteriors into P/QRS/T onset, peak and offset events."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .dataset import SEGMENT_LENGTH, SampleClass


class Predictor(Protocol):
    def predict_proba(self, x: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class WaveSegment:
    wave_class: SampleClass
    onset: int
    peak: int
    offset: int

    def __post_init__(self):
        if self.wave_class == SampleClass.NW:
            raise ValueError("a wave segment cannot be NW")
        if not self.onset <= self.peak <= self.offset:
            raise ValueError(f"need onset <= peak <= offset, got {self.onset}, {self.peak}, {self.offset}")


@dataclass
class DelineationResult:
    record_name: str
    sampling_frequency: float
    waves: list[WaveSegment] = field(default_factory=list)
    labels: np.ndarray | None = None
    probs: np.ndarray | None = None

    def of_class(self, cls: SampleClass) -> list[WaveSegment]:
        return [w for w in self.waves if w.wave_class == cls]

    def rows(self) -> list[dict]:
        fs = self.sampling_frequency
        return [
            {
                "record": self.record_name,
                "class": w.wave_class.name,
                "onset": w.onset,
                "peak": w.peak,
                "offset": w.offset,
                "onset_s": round(w.onset / fs, 6),
                "peak_s": round(w.peak / fs, 6),
                "offset_s": round(w.offset / fs, 6),
            }
            for w in self.waves
        ]

    def to_csv(self, delimiter: str = ",") -> str:
        buf = io.StringIO()
        fields = ["record", "class", "onset", "peak", "offset", "onset_s", "peak_s", "offset_s"]
        writer = csv.DictWriter(buf, fieldnames=fields, delimiter=delimiter, lineterminator="\n")
        writer.writeheader()
        writer.writerows(self.rows())
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps(
            {
                "record": self.record_name,
                "sampling_frequency": self.sampling_frequency,
                "waves": self.rows(),
            },
            indent=2,
            sort_keys=True,
        )


def argmax_decode(probs: np.ndarray) -> np.ndarray:
    """Most probable class per row; ties go to the lowest class code."""
    return np.argmax(np.asarray(probs), axis=-1).astype(np.uint8)


def _runs(labels: np.ndarray) -> list[list[int]]:
    """Maximal constant runs as ``[class, start, end]`` (inclusive)."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        return []
    change = np.flatnonzero(np.diff(labels)) + 1
    starts = np.concatenate([[0], change])
    ends = np.concatenate([change - 1, [len(labels) - 1]])
    return [[int(labels[s]), int(s), int(e)] for s, e in zip(starts, ends)]


def _merge(waves: list[list[int]], gap: int) -> list[list[int]]:
    """Join consecutive same-class waves separated by at most ``gap`` NW samples."""
    out: list[list[int]] = []
    for w in waves:
        if out and out[-1][0] == w[0] and w[1] - out[-1][2] - 1 <= gap:
            out[-1][2] = w[2]
        else:
            out.append(list(w))
    return out


def extract_wave_segments(
    labels: np.ndarray,
    fs: float,
    min_duration: float = 0.020,
    merge_gap: float = 0.008,
    min_samples: int | None = None,
    gap_samples: int | None = None,
) -> list[tuple[SampleClass, int, int]]:
    """Wave candidates ``(class, onset, offset)`` from a label sequence.

    Same-class runs separated only by short NW gaps are merged, runs shorter
    than ``min_duration`` seconds are discarded, and merging is applied once
    more over the survivors. ``min_samples``/``gap_samples`` override the
    durations directly.
    """
    if min_samples is None:
        min_samples = int(round(min_duration * fs))
    if gap_samples is None:
        gap_samples = int(round(merge_gap * fs))
    waves = [w for w in _runs(labels) if w[0] != SampleClass.NW]
    # consecutive same-class entries have only NW between them
    merged = _merge(waves, gap_samples)
    kept = [w for w in merged if w[2] - w[1] + 1 >= min_samples]
    # dropped short runs count as NW, so a second pass can bridge them
    kept = _merge(kept, gap_samples)
    return [(SampleClass(c), s, e) for c, s, e in kept]


def paint_waves(waves: Sequence[tuple[SampleClass, int, int]], n: int) -> np.ndarray:
    labels = np.full(n, SampleClass.NW, dtype=np.uint8)
    for cls, on, off in waves:
        labels[on : off + 1] = cls
    return labels


def locate_peak(signal: np.ndarray, segment: tuple[SampleClass, int, int]) -> int:
    """Index of the largest absolute amplitude in ``[onset, offset]``; ties -> earliest."""
    _, onset, offset = segment
    if not 0 <= onset <= offset < len(signal):
        raise ValueError(f"segment [{onset}, {offset}] outside signal of length {len(signal)}")
    return onset + int(np.argmax(np.abs(np.asarray(signal[onset : offset + 1]))))


def predict_record(model: Predictor, signal: np.ndarray, window: int = SEGMENT_LENGTH) -> np.ndarray:
    """Posteriors ``[N, 4]`` for a full record, inferred in consecutive windows.

    Full windows are batched; a trailing partial window runs at its own length.
    """
    signal = np.asarray(signal)
    n = len(signal)
    if n == 0:
        raise ValueError("cannot delineate an empty record")
    n_full = n // window
    parts = []
    if n_full:
        parts.append(model.predict_proba(signal[: n_full * window].reshape(n_full, window)).reshape(-1, 4))
    if n % window:
        parts.append(model.predict_proba(signal[n_full * window :][None, :]).reshape(-1, 4))
    return np.concatenate(parts, axis=0)


def delineate_labels(
    labels: np.ndarray,
    signal: np.ndarray,
    fs: float,
    record_name: str = "",
    min_duration: float = 0.020,
    merge_gap: float = 0.008,
) -> DelineationResult:
    segs = extract_wave_segments(labels, fs, min_duration, merge_gap)
    waves = [WaveSegment(cls, on, locate_peak(signal, (cls, on, off)), off) for cls, on, off in segs]
    return DelineationResult(record_name, fs, waves, labels=np.asarray(labels, dtype=np.uint8))


def delineate_record(
    model: Predictor,
    signal: np.ndarray,
    fs: float,
    record_name: str = "",
    min_duration: float = 0.020,
    merge_gap: float = 0.008,
    keep_probs: bool = False,
) -> DelineationResult:
    """Windowed inference, label concatenation, then wave extraction and peaks.

    ``signal`` must already be filtered and at the model's sampling rate.
    """
    probs = predict_record(model, signal)
    result = delineate_labels(argmax_decode(probs), signal, fs, record_name, min_duration, merge_gap)
    if keep_probs:
        result.probs = probs
    return result
