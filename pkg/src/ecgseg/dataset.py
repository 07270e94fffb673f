"""Per-sample labelling, windowing, record splits and stratified folds."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .wfdb_io import BEAT_SYMBOLS, AnnotationEvent

log = logging.getLogger(__name__)

SEGMENT_LENGTH = 1000
CACHE_VERSION = 1


class SampleClass(IntEnum):
    P = 0
    QRS = 1
    T = 2
    NW = 3


N_CLASSES = len(SampleClass)
CLASS_NAMES = tuple(c.name for c in SampleClass)

_PEAK_CLASS = {"p": SampleClass.P, "t": SampleClass.T}


def peak_class(symbol: str) -> SampleClass | None:
    if symbol in _PEAK_CLASS:
        return _PEAK_CLASS[symbol]
    if symbol in BEAT_SYMBOLS:
        return SampleClass.QRS
    return None


@dataclass(frozen=True)
class WaveTriple:
    wave_class: SampleClass
    onset: int | None
    peak: int
    offset: int | None


def wave_triples(events: Sequence[AnnotationEvent]) -> list[WaveTriple]:
    """Group boundary/peak annotations into waves.

    A wave is a peak symbol optionally preceded by ``(`` and followed by ``)``
    with nothing else in between. Missing boundaries are ``None``.
    """
    out = []
    onset = None
    current = None  # (class, peak, onset)
    for ev in events:
        if ev.symbol == "(":
            if current is not None:
                out.append(WaveTriple(current[0], current[2], current[1], None))
                current = None
            onset = ev.sample_index
        elif ev.symbol == ")":
            if current is not None:
                out.append(WaveTriple(current[0], current[2], current[1], ev.sample_index))
                current = None
            onset = None
        else:
            cls = peak_class(ev.symbol)
            if cls is None:
                continue
            if current is not None:
                out.append(WaveTriple(current[0], current[2], current[1], None))
            current = (cls, ev.sample_index, onset)
            onset = None
    if current is not None:
        out.append(WaveTriple(current[0], current[2], current[1], None))
    return out


def label_intervals(events: Sequence[AnnotationEvent]) -> list[tuple[SampleClass, int, int]]:
    """Complete ``( peak )`` triples as inclusive ``(class, onset, offset)`` intervals."""
    return [
        (w.wave_class, w.onset, w.offset)
        for w in wave_triples(events)
        if w.onset is not None and w.offset is not None and w.onset <= w.offset
    ]


def paint_intervals(
    intervals: Iterable[tuple[int, int, int]], n_samples: int
) -> tuple[np.ndarray, int]:
    """Paint inclusive intervals onto an all-NW label array.

    An interval that overlaps an already painted interval of a different class
    is dropped (earlier onset wins). Returns ``(labels, n_overlaps)``.
    """
    labels = np.full(n_samples, SampleClass.NW, dtype=np.uint8)
    overlaps = 0
    for cls, on, off in sorted(intervals, key=lambda iv: (iv[1], iv[2])):
        lo, hi = max(on, 0), min(off, n_samples - 1)
        if lo > hi:
            continue
        span = labels[lo : hi + 1]
        clash = (span != SampleClass.NW) & (span != cls)
        if clash.any():
            overlaps += 1
            continue
        span[:] = cls
    return labels, overlaps


def build_sample_labels(
    events: Sequence[AnnotationEvent], n_samples: int, return_overlaps: bool = False
):
    """Per-sample class codes from boundary annotations.

    Samples inside each ``( peak )`` triple, boundaries included, take the
    peak's class; everything else is NW.
    """
    labels, overlaps = paint_intervals(label_intervals(events), n_samples)
    if overlaps:
        log.warning("dropped %d overlapping wave intervals", overlaps)
    if return_overlaps:
        return labels, overlaps
    return labels


@dataclass
class Segment:
    samples: np.ndarray
    labels: np.ndarray
    record_name: str
    start_offset: int


def segment_record(
    signal: np.ndarray,
    labels: np.ndarray,
    record_name: str = "",
    length: int = SEGMENT_LENGTH,
) -> list[Segment]:
    """Consecutive non-overlapping windows; a trailing partial window is dropped."""
    if len(signal) != len(labels):
        raise ValueError(f"signal ({len(signal)}) and labels ({len(labels)}) differ in length")
    return [
        Segment(
            samples=np.asarray(signal[i : i + length], dtype=np.float64),
            labels=np.asarray(labels[i : i + length], dtype=np.uint8),
            record_name=record_name,
            start_offset=i,
        )
        for i in range(0, len(signal) - length + 1, length)
    ]


def zscore(x: np.ndarray) -> np.ndarray:
    sd = x.std()
    return (x - x.mean()) / sd if sd > 0 else x - x.mean()


def one_hot_encode(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    return np.eye(N_CLASSES, dtype=np.float64)[labels]


@dataclass
class SplitPlan:
    train_records: list[str]
    test_records: list[str]
    seed: int
    mode: str
    folds: list[list[int]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "train_records": self.train_records,
            "test_records": self.test_records,
            "seed": self.seed,
            "mode": self.mode,
            "folds": self.folds,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SplitPlan":
        return cls(d["train_records"], d["test_records"], d["seed"], d["mode"], d.get("folds", []))


SPLIT_MODES = {"84/21": None, "79/26": 26}


def split_records(
    names: Sequence[str], seed: int, mode: str = "84/21", train_fraction: float = 0.8
) -> SplitPlan:
    """Record-disjoint train/test split.

    Names are sorted, shuffled with ``seed``, and the head goes to training.
    Mode ``"84/21"`` takes ``round(train_fraction * n)`` training records;
    ``"79/26"`` fixes the test set at 26 records.
    """
    if len(set(names)) != len(names):
        dupes = sorted({n for n in names if list(names).count(n) > 1})
        raise ValueError(f"duplicate record names: {dupes}")
    if mode not in SPLIT_MODES:
        raise ValueError(f"unknown split mode {mode!r}; choose from {sorted(SPLIT_MODES)}")
    ordered = sorted(names)
    perm = np.random.default_rng(seed).permutation(len(ordered))
    shuffled = [ordered[i] for i in perm]
    n_test = SPLIT_MODES[mode]
    if n_test is None:
        n_train = int(round(train_fraction * len(ordered)))
    else:
        n_train = len(ordered) - n_test
    if not 0 < n_train <= len(ordered):
        raise ValueError(f"cannot take {n_train} training records from {len(ordered)}")
    return SplitPlan(
        train_records=shuffled[:n_train],
        test_records=shuffled[n_train:],
        seed=seed,
        mode=mode,
    )


def class_histogram(labels: np.ndarray) -> np.ndarray:
    return np.bincount(np.asarray(labels).ravel(), minlength=N_CLASSES)[:N_CLASSES]


def stratified_kfold(segments: Sequence[Segment] | np.ndarray, k: int = 5, seed: int = 0) -> list[list[int]]:
    """Assign whole segments to ``k`` folds, balancing per-class sample counts.

    Segments are visited in a seeded order, most atypical class mix first, and
    each goes to the open fold whose histogram moves least away from the global
    class proportions. Fold sizes differ by at most one segment.
    """
    if k < 2:
        raise ValueError(f"k must be ≥ 2, got {k}")
    if isinstance(segments, np.ndarray):
        hists = np.stack([class_histogram(row) for row in segments]).astype(np.float64)
    else:
        hists = np.stack([class_histogram(s.labels) for s in segments]).astype(np.float64)
    n = len(hists)
    if n < k:
        raise ValueError(f"need at least k={k} segments, got {n}")

    totals = hists.sum(axis=1)
    global_p = hists.sum(axis=0) / hists.sum()
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    atypical = np.abs(hists / np.maximum(totals, 1)[:, None] - global_p).sum(axis=1)
    order = order[np.argsort(-atypical[order], kind="stable")]

    capacity = np.array([n // k + (1 if f < n % k else 0) for f in range(k)])
    fold_hist = np.zeros((k, N_CLASSES))
    folds: list[list[int]] = [[] for _ in range(k)]
    for i in order:
        best, best_cost = -1, np.inf
        for f in range(k):
            if len(folds[f]) >= capacity[f]:
                continue
            new = fold_hist[f] + hists[i]
            cost = np.sum((new - global_p * new.sum()) ** 2) - np.sum(
                (fold_hist[f] - global_p * fold_hist[f].sum()) ** 2
            )
            if cost < best_cost - 1e-9:
                best, best_cost = f, cost
        folds[best].append(int(i))
        fold_hist[best] += hists[i]
    return [sorted(f) for f in folds]


# ---------------------------------------------------------------- cache files


@dataclass
class SegmentSet:
    """Segments stored column-wise, as held in a cache container."""

    samples: np.ndarray  # [n, L] float32
    labels: np.ndarray  # [n, L] uint8
    record_names: list[str]
    start_offsets: np.ndarray
    manifest: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.samples)

    @classmethod
    def from_segments(cls, segments: Sequence[Segment], manifest: dict | None = None) -> "SegmentSet":
        length = len(segments[0].samples) if segments else SEGMENT_LENGTH
        return cls(
            samples=np.array([s.samples for s in segments], dtype="<f4").reshape(-1, length),
            labels=np.array([s.labels for s in segments], dtype=np.uint8).reshape(-1, length),
            record_names=[s.record_name for s in segments],
            start_offsets=np.array([s.start_offset for s in segments], dtype=np.int64),
            manifest=dict(manifest or {}),
        )

    def subset(self, idx: Sequence[int]) -> "SegmentSet":
        idx = np.asarray(idx, dtype=np.int64)
        return SegmentSet(
            samples=self.samples[idx],
            labels=self.labels[idx],
            record_names=[self.record_names[i] for i in idx],
            start_offsets=self.start_offsets[idx],
            manifest=dict(self.manifest),
        )

    def select_records(self, names: Iterable[str]) -> "SegmentSet":
        wanted = set(names)
        return self.subset([i for i, r in enumerate(self.record_names) if r in wanted])

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.samples, dtype="<f4").tobytes())
        h.update(np.ascontiguousarray(self.labels, dtype=np.uint8).tobytes())
        h.update("\n".join(self.record_names).encode())
        h.update(np.ascontiguousarray(self.start_offsets, dtype="<i8").tobytes())
        return h.hexdigest()


def save_segments(path: str | Path, seg: SegmentSet) -> None:
    """Write a cache container (``.npz``): ``<f4`` samples, ``u1`` labels, JSON manifest."""
    manifest = dict(seg.manifest)
    manifest["cache_version"] = CACHE_VERSION
    manifest["n_segments"] = len(seg)
    manifest["content_sha256"] = seg.content_hash()
    with open(path, "wb") as fh:
        np.savez(
            fh,
            samples=np.ascontiguousarray(seg.samples, dtype="<f4"),
            labels=np.ascontiguousarray(seg.labels, dtype=np.uint8),
            record_names=np.array(seg.record_names, dtype="U"),
            start_offsets=np.ascontiguousarray(seg.start_offsets, dtype="<i8"),
            manifest=np.array(json.dumps(manifest, sort_keys=True)),
        )
    seg.manifest = manifest


def load_segments(path: str | Path) -> SegmentSet:
    with np.load(path, allow_pickle=False) as z:
        manifest = json.loads(str(z["manifest"]))
        if manifest.get("cache_version") != CACHE_VERSION:
            raise ValueError(
                f"{path}: cache version {manifest.get('cache_version')} != {CACHE_VERSION}"
            )
        return SegmentSet(
            samples=z["samples"].astype("<f4"),
            labels=z["labels"].astype(np.uint8),
            record_names=[str(s) for s in z["record_names"]],
            start_offsets=z["start_offsets"].astype(np.int64),
            manifest=manifest,
        )
