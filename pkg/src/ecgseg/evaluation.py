"""Sample-level metrics, ROC/AUC, and tolerance-window event matching."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .dataset import CLASS_NAMES, N_CLASSES, SampleClass, wave_triples
from .delineate import WaveSegment
from .wfdb_io import AnnotationEvent

DEFAULT_TOLERANCE_S = 0.150
MACRO_GRID_POINTS = 201

_trapezoid = getattr(np, "trapezoid", None) or np.trapz


def _ratio(num: float, den: float) -> float | None:
    return num / den if den else None


def confusion_matrix(y_true: np.ndarray, y_pred: np.ndarray, n_classes: int = N_CLASSES) -> np.ndarray:
    """Counts with rows = actual class, columns = predicted class."""
    y_true = np.asarray(y_true, dtype=np.int64).ravel()
    y_pred = np.asarray(y_pred, dtype=np.int64).ravel()
    if y_true.shape != y_pred.shape:
        raise ValueError(f"length mismatch: {len(y_true)} true vs {len(y_pred)} predicted labels")
    return np.bincount(y_true * n_classes + y_pred, minlength=n_classes * n_classes).reshape(
        n_classes, n_classes
    )


def f_score(precision: float | None, sensitivity: float | None, beta: float = 1.0, form: str = "as_written"):
    """F-measure from precision and sensitivity.

    ``form="as_written"`` uses ``(1 + beta)`` in the numerator; ``"standard"``
    uses ``(1 + beta**2)``. Both equal ``2PS/(P+S)`` at ``beta = 1``.
    """
    if precision is None or sensitivity is None:
        return None
    den = beta**2 * precision + sensitivity
    if den == 0:
        return None
    if form == "as_written":
        factor = 1.0 + beta
    elif form == "standard":
        factor = 1.0 + beta**2
    else:
        raise ValueError(f"unknown F-score form {form!r}")
    return factor * precision * sensitivity / den


@dataclass
class PerClass:
    name: str
    tp: int
    fp: int
    fn: int
    tn: int
    sensitivity: float | None
    precision: float | None
    f_score: float | None
    support: int


@dataclass
class ClassMetrics:
    classes: list[PerClass]
    accuracy: float | None
    beta: float = 1.0

    def by_name(self, name: str) -> PerClass:
        return next(c for c in self.classes if c.name == name)


def class_metrics(cm: np.ndarray, beta: float = 1.0, form: str = "as_written", names=CLASS_NAMES) -> ClassMetrics:
    cm = np.asarray(cm, dtype=np.int64)
    total = int(cm.sum())
    out = []
    for k in range(cm.shape[0]):
        tp = int(cm[k, k])
        fn = int(cm[k].sum()) - tp
        fp = int(cm[:, k].sum()) - tp
        tn = total - tp - fn - fp
        se = _ratio(tp, tp + fn)
        pp = _ratio(tp, tp + fp)
        out.append(PerClass(names[k], tp, fp, fn, tn, se, pp, f_score(pp, se, beta, form), tp + fn))
    return ClassMetrics(out, _ratio(int(np.trace(cm)), total), beta)


@dataclass
class AveragedMetrics:
    micro_precision: float | None
    micro_sensitivity: float | None
    macro_precision: float | None
    macro_sensitivity: float | None
    macro_f1: float | None
    n_precision_classes: int
    n_sensitivity_classes: int


def averaged_metrics(cm: np.ndarray) -> AveragedMetrics:
    """Micro averages pool TP/FP/FN; macro averages skip undefined per-class values."""
    m = class_metrics(cm)
    tp = sum(c.tp for c in m.classes)
    fp = sum(c.fp for c in m.classes)
    fn = sum(c.fn for c in m.classes)
    precs = [c.precision for c in m.classes if c.precision is not None]
    sens = [c.sensitivity for c in m.classes if c.sensitivity is not None]
    f1s = [c.f_score for c in m.classes if c.f_score is not None]
    return AveragedMetrics(
        micro_precision=_ratio(tp, tp + fp),
        micro_sensitivity=_ratio(tp, tp + fn),
        macro_precision=float(np.mean(precs)) if precs else None,
        macro_sensitivity=float(np.mean(sens)) if sens else None,
        macro_f1=float(np.mean(f1s)) if f1s else None,
        n_precision_classes=len(precs),
        n_sensitivity_classes=len(sens),
    )


# --------------------------------------------------------------------- ROC


@dataclass
class Curve:
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float

    def to_dict(self) -> dict:
        return {"fpr": self.fpr.tolist(), "tpr": self.tpr.tolist(), "auc": self.auc}


@dataclass
class RocCurves:
    per_class: dict[str, Curve]
    micro: Curve | None
    macro: Curve | None

    def to_dict(self) -> dict:
        return {
            "per_class": {k: v.to_dict() for k, v in self.per_class.items()},
            "micro": self.micro.to_dict() if self.micro else None,
            "macro": self.macro.to_dict() if self.macro else None,
        }


def binary_roc(is_pos: np.ndarray, scores: np.ndarray) -> Curve:
    """ROC over all distinct score thresholds, from (0, 0) to (1, 1)."""
    is_pos = np.asarray(is_pos, dtype=bool).ravel()
    scores = np.asarray(scores, dtype=np.float64).ravel()
    n_pos = int(is_pos.sum())
    n_neg = len(is_pos) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs both positive and negative samples")
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    pos = is_pos[order]
    # last index of each distinct threshold
    last = np.flatnonzero(np.diff(s) != 0)
    last = np.concatenate([last, [len(s) - 1]])
    tps = np.cumsum(pos)[last]
    fps = (last + 1) - tps
    tpr = np.concatenate([[0.0], tps / n_pos])
    fpr = np.concatenate([[0.0], fps / n_neg])
    return Curve(fpr, tpr, float(_trapezoid(tpr, fpr)))


def roc_auc(y_true: np.ndarray, scores: np.ndarray, n_classes: int = N_CLASSES) -> RocCurves:
    """One-vs-rest curves per class, plus micro (pooled) and macro (mean TPR on a
    common FPR grid) averages. Classes absent from ``y_true`` are skipped."""
    y_true = np.asarray(y_true, dtype=np.int64).ravel()
    scores = np.asarray(scores, dtype=np.float64).reshape(len(y_true), n_classes)
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    onehot = np.eye(n_classes, dtype=bool)[y_true]
    per_class = {}
    for k in range(n_classes):
        if onehot[:, k].all() or not onehot[:, k].any():
            continue
        per_class[CLASS_NAMES[k] if n_classes == N_CLASSES else str(k)] = binary_roc(onehot[:, k], scores[:, k])
    micro = binary_roc(onehot.ravel(), scores.ravel()) if per_class else None
    macro = None
    if per_class:
        grid = np.linspace(0.0, 1.0, MACRO_GRID_POINTS)
        mean_tpr = np.mean([np.interp(grid, c.fpr, c.tpr) for c in per_class.values()], axis=0)
        # pin the (0, 0) endpoint; vertical steps at fpr=0 otherwise lift it
        mean_tpr[0] = 0.0
        macro = Curve(grid, mean_tpr, float(_trapezoid(mean_tpr, grid)))
    return RocCurves(per_class, micro, macro)


# ----------------------------------------------------------- event matching


@dataclass
class BeatMatchResult:
    n_beats: int
    tp: int
    fp: int
    fn: int
    tolerance_s: float
    pairs: list[tuple[int, int]] = field(default_factory=list, repr=False)

    @property
    def sensitivity(self) -> float | None:
        return _ratio(self.tp, self.tp + self.fn)

    @property
    def precision(self) -> float | None:
        return _ratio(self.tp, self.tp + self.fp)

    @property
    def error_rate(self) -> float | None:
        return _ratio(self.fp + self.fn, self.n_beats)

    @property
    def f1(self) -> float | None:
        return f_score(self.precision, self.sensitivity)

    def timing_errors(self) -> np.ndarray:
        """Predicted minus reference sample index for matched pairs."""
        return np.array([p - r for p, r in self.pairs], dtype=np.int64)

    def __add__(self, other: "BeatMatchResult") -> "BeatMatchResult":
        return BeatMatchResult(
            self.n_beats + other.n_beats,
            self.tp + other.tp,
            self.fp + other.fp,
            self.fn + other.fn,
            self.tolerance_s,
            self.pairs + other.pairs,
        )

    def to_dict(self) -> dict:
        return {
            "n_beats": self.n_beats,
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "err_pct": _pct(self.error_rate),
            "se_pct": _pct(self.sensitivity),
            "ppv_pct": _pct(self.precision),
            "tolerance_s": self.tolerance_s,
        }


def _pct(x: float | None) -> float | None:
    return None if x is None else round(100.0 * x, 4)


def tolerance_samples(tolerance_s: float, fs: float) -> int:
    """Whole samples inside a ±tolerance window (150 ms at 250 Hz -> 37)."""
    if tolerance_s <= 0:
        raise ValueError("tolerance must be > 0")
    return int(math.floor(tolerance_s * fs + 1e-9))


def match_events(
    predicted: Sequence[int],
    reference: Sequence[int],
    fs: float,
    tolerance_s: float = DEFAULT_TOLERANCE_S,
) -> BeatMatchResult:
    """One-to-one matching of event times within ±tolerance.

    Both lists are walked in time order; the earliest unmatched prediction and
    earliest unmatched reference are paired when within the window, otherwise
    the earlier of the two can never match and is counted as an error. This
    yields the maximum number of matches and is symmetric in its arguments.
    """
    tol = tolerance_samples(tolerance_s, fs)
    pred = np.sort(np.asarray(predicted, dtype=np.int64))
    ref = np.sort(np.asarray(reference, dtype=np.int64))
    i = j = 0
    pairs = []
    while i < len(pred) and j < len(ref):
        d = pred[i] - ref[j]
        if abs(d) <= tol:
            pairs.append((int(pred[i]), int(ref[j])))
            i += 1
            j += 1
        elif d < 0:
            i += 1
        else:
            j += 1
    tp = len(pairs)
    return BeatMatchResult(len(ref), tp, len(pred) - tp, len(ref) - tp, tolerance_s, pairs)


def match_beats(predicted, reference, fs: float, tolerance_s: float = DEFAULT_TOLERANCE_S) -> BeatMatchResult:
    return match_events(predicted, reference, fs, tolerance_s)


FIDUCIALS = ("P_on", "P_peak", "P_end", "QRS_on", "QRS_end", "T_peak", "T_end")


def predicted_fiducials(waves: Sequence[WaveSegment]) -> dict[str, list[int]]:
    out: dict[str, list[int]] = {k: [] for k in FIDUCIALS}
    for w in waves:
        if w.wave_class == SampleClass.P:
            out["P_on"].append(w.onset)
            out["P_peak"].append(w.peak)
            out["P_end"].append(w.offset)
        elif w.wave_class == SampleClass.QRS:
            out["QRS_on"].append(w.onset)
            out["QRS_end"].append(w.offset)
        elif w.wave_class == SampleClass.T:
            out["T_peak"].append(w.peak)
            out["T_end"].append(w.offset)
    return out


def reference_fiducials(events: Sequence[AnnotationEvent]) -> dict[str, list[int]]:
    """Fiducials from annotation events; a boundary counts only when annotated."""
    out: dict[str, list[int]] = {k: [] for k in FIDUCIALS}
    for w in wave_triples(events):
        if w.wave_class == SampleClass.P:
            if w.onset is not None:
                out["P_on"].append(w.onset)
            out["P_peak"].append(w.peak)
            if w.offset is not None:
                out["P_end"].append(w.offset)
        elif w.wave_class == SampleClass.QRS:
            if w.onset is not None:
                out["QRS_on"].append(w.onset)
            if w.offset is not None:
                out["QRS_end"].append(w.offset)
        else:
            out["T_peak"].append(w.peak)
            if w.offset is not None:
                out["T_end"].append(w.offset)
    return out


def restrict_to_span(events: dict[str, list[int]], lo: int, hi: int) -> dict[str, list[int]]:
    return {k: [e for e in v if lo <= e <= hi] for k, v in events.items()}


def boundary_metrics(
    predicted: dict[str, list[int]] | Sequence[WaveSegment],
    reference: dict[str, list[int]] | Sequence[AnnotationEvent],
    fs: float,
    tolerance_s: float = DEFAULT_TOLERANCE_S,
) -> dict[str, BeatMatchResult]:
    """Independent tolerance matching per fiducial column."""
    if not isinstance(predicted, dict):
        predicted = predicted_fiducials(predicted)
    if not isinstance(reference, dict):
        reference = reference_fiducials(reference)
    return {k: match_events(predicted.get(k, []), reference.get(k, []), fs, tolerance_s) for k in FIDUCIALS}


def boundary_table(results: dict[str, BeatMatchResult], delimiter: str = ",") -> str:
    """Rows ``# beats``, ``Se``, ``P+`` (percent) with one column per fiducial."""
    buf = io.StringIO()
    w = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
    w.writerow(["parameter", *FIDUCIALS])
    w.writerow(["n_beats", *(results[k].n_beats for k in FIDUCIALS)])
    w.writerow(["Se", *(_fmt(_pct(results[k].sensitivity)) for k in FIDUCIALS)])
    w.writerow(["P+", *(_fmt(_pct(results[k].precision)) for k in FIDUCIALS)])
    return buf.getvalue()


def beat_table(rows: dict[str, BeatMatchResult], delimiter: str = ",") -> str:
    """``# beats, TP, FP, FN, Err (%), Se, P+`` per row label."""
    buf = io.StringIO()
    w = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
    w.writerow(["record", "n_beats", "TP", "FP", "FN", "Err_pct", "Se_pct", "Ppos_pct"])
    for name, r in rows.items():
        w.writerow(
            [name, r.n_beats, r.tp, r.fp, r.fn, _fmt(_pct(r.error_rate)), _fmt(_pct(r.sensitivity)), _fmt(_pct(r.precision))]
        )
    return buf.getvalue()


def _fmt(x) -> str:
    return "N/A" if x is None else f"{x:.2f}"


# ------------------------------------------------------------------ report


@dataclass
class EvalReport:
    confusion: np.ndarray
    metrics: ClassMetrics
    averaged: AveragedMetrics
    roc: RocCurves | None = None
    beat_match: dict[str, BeatMatchResult] = field(default_factory=dict)
    boundaries: dict[str, BeatMatchResult] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "meta": self.meta,
            "confusion_matrix": {"rows_actual_cols_predicted": CLASS_NAMES, "counts": self.confusion.tolist()},
            "per_class": [asdict(c) for c in self.metrics.classes],
            "accuracy": self.metrics.accuracy,
            "averaged": asdict(self.averaged),
            "roc": self.roc.to_dict() if self.roc else None,
            "beat_match": {k: v.to_dict() for k, v in self.beat_match.items()},
            "boundaries": {k: v.to_dict() for k, v in self.boundaries.items()},
        }

    def to_json(self) -> str:
        return json.dumps(_round_floats(self.to_dict()), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        """Inverse of :meth:`to_dict` (matched pairs are not stored and come back empty)."""

        def curve(c):
            return None if c is None else Curve(np.asarray(c["fpr"]), np.asarray(c["tpr"]), c["auc"])

        def beats(b):
            return BeatMatchResult(b["n_beats"], b["tp"], b["fp"], b["fn"], b["tolerance_s"])

        roc = d.get("roc")
        return cls(
            confusion=np.asarray(d["confusion_matrix"]["counts"], dtype=np.int64),
            metrics=ClassMetrics([PerClass(**c) for c in d["per_class"]], d["accuracy"]),
            averaged=AveragedMetrics(**d["averaged"]),
            roc=None
            if roc is None
            else RocCurves({k: curve(v) for k, v in roc["per_class"].items()}, curve(roc["micro"]), curve(roc["macro"])),
            beat_match={k: beats(v) for k, v in d.get("beat_match", {}).items()},
            boundaries={k: beats(v) for k, v in d.get("boundaries", {}).items()},
            meta=d.get("meta", {}),
        )

    def metrics_csv(self, delimiter: str = ",") -> str:
        buf = io.StringIO()
        w = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
        w.writerow(["class", "support", "TP", "FP", "FN", "TN", "Se", "Ppos", "F"])
        for c in self.metrics.classes:
            w.writerow([c.name, c.support, c.tp, c.fp, c.fn, c.tn, _num(c.sensitivity), _num(c.precision), _num(c.f_score)])
        a = self.averaged
        w.writerow(["micro", "", "", "", "", "", _num(a.micro_sensitivity), _num(a.micro_precision), ""])
        w.writerow(["macro", "", "", "", "", "", _num(a.macro_sensitivity), _num(a.macro_precision), _num(a.macro_f1)])
        w.writerow(["accuracy", "", "", "", "", "", "", "", _num(self.metrics.accuracy)])
        return buf.getvalue()

    def confusion_csv(self, delimiter: str = ",") -> str:
        buf = io.StringIO()
        w = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
        w.writerow(["actual\\predicted", *CLASS_NAMES])
        for name, row in zip(CLASS_NAMES, self.confusion.tolist()):
            w.writerow([name, *row])
        return buf.getvalue()

    def roc_csv(self, delimiter: str = ",") -> str:
        """Long-format plot data: ``curve, fpr, tpr``."""
        buf = io.StringIO()
        w = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
        w.writerow(["curve", "fpr", "tpr", "auc"])
        if self.roc is not None:
            curves = dict(self.roc.per_class)
            if self.roc.micro:
                curves["micro"] = self.roc.micro
            if self.roc.macro:
                curves["macro"] = self.roc.macro
            for name, c in curves.items():
                for x, y in zip(c.fpr, c.tpr):
                    w.writerow([name, f"{x:.10g}", f"{y:.10g}", f"{c.auc:.10g}"])
        return buf.getvalue()


def _num(x) -> str:
    return "" if x is None else f"{x:.6f}"


def _round_floats(obj, digits: int = 10):
    if isinstance(obj, float):
        return round(obj, digits)
    if isinstance(obj, dict):
        return {k: _round_floats(v, digits) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round_floats(v, digits) for v in obj]
    return obj


def sample_report(y_true: np.ndarray, probs: np.ndarray, with_roc: bool = True, meta: dict | None = None) -> EvalReport:
    y_true = np.asarray(y_true).ravel()
    probs = np.asarray(probs, dtype=np.float64).reshape(-1, N_CLASSES)
    y_pred = np.argmax(probs, axis=1)
    cm = confusion_matrix(y_true, y_pred)
    return EvalReport(
        confusion=cm,
        metrics=class_metrics(cm),
        averaged=averaged_metrics(cm),
        roc=roc_auc(y_true, probs) if with_roc else None,
        meta={"unit": "sample", **(meta or {})},
    )
