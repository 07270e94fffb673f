"""Readers for PhysioNet WFDB records: ``.hea`` headers, format 212/16 signal
files and MIT-format binary annotation files.

Only the pieces needed for QTDB and MITDB are supported. Everything here is a
pure function over text or bytes, plus :func:`read_record` which does the file
I/O for one record directory.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_GAIN = 200.0
DEFAULT_FS = 250.0
SUPPORTED_FORMATS = (212, 16)

# MIT annotation codes -> display symbols (ecgcodes.h).
ANNOTATION_SYMBOLS = {
    0: " ", 1: "N", 2: "L", 3: "R", 4: "a", 5: "V", 6: "F", 7: "J", 8: "A",
    9: "S", 10: "E", 11: "j", 12: "/", 13: "Q", 14: "~", 16: "|", 18: "s",
    19: "T", 20: "*", 21: "D", 22: '"', 23: "=", 24: "p", 25: "B", 26: "^",
    27: "t", 28: "+", 29: "u", 30: "?", 31: "!", 32: "[", 33: "]", 34: "e",
    35: "n", 36: "@", 37: "x", 38: "f", 39: "(", 40: ")", 41: "r",
}
SYMBOL_CODES = {sym: code for code, sym in ANNOTATION_SYMBOLS.items()}

# Symbols WFDB treats as QRS (beat) annotations.
BEAT_SYMBOLS = frozenset("NLRBAaJSVrFejnE/fQ?")

SKIP, NUM, SUB, CHN, AUX = 59, 60, 61, 62, 63


class WfdbFormatError(ValueError):
    """Raised for malformed or unsupported WFDB content."""


@dataclass(frozen=True)
class SignalSpec:
    file_name: str
    format_code: int
    gain: float
    baseline: int
    units: str = "mV"
    adc_resolution: int = 0
    adc_zero: int = 0
    byte_offset: int = 0
    description: str = ""


@dataclass(frozen=True)
class RecordHeader:
    record_name: str
    n_signals: int
    sampling_frequency: float
    n_samples: int
    signals: tuple[SignalSpec, ...]
    comments: tuple[str, ...] = ()


@dataclass(frozen=True)
class AnnotationEvent:
    sample_index: int
    symbol: str
    chan: int = 0
    aux: str | None = None
    code: int = 0
    subtype: int = 0
    num: int = 0


@dataclass
class Record:
    header: RecordHeader
    signal: np.ndarray  # [n_samples, n_signals], mV
    annotations: dict[str, list[AnnotationEvent]] = field(default_factory=dict)

    @property
    def name(self) -> str:
        return self.header.record_name

    @property
    def fs(self) -> float:
        return self.header.sampling_frequency


def _parse_float(token: str, lineno: int, what: str) -> float:
    try:
        return float(token)
    except ValueError:
        raise WfdbFormatError(f"line {lineno}: invalid {what} {token!r}") from None


def _parse_int(token: str, lineno: int, what: str) -> int:
    try:
        return int(token)
    except ValueError:
        raise WfdbFormatError(f"line {lineno}: invalid {what} {token!r}") from None


def _parse_signal_line(line: str, lineno: int) -> SignalSpec:
    tokens = line.split()
    if len(tokens) < 2:
        raise WfdbFormatError(f"line {lineno}: signal line needs a file name and format")
    file_name, fmt_field = tokens[0], tokens[1]

    byte_offset = 0
    if "+" in fmt_field:
        fmt_field, off = fmt_field.split("+", 1)
        byte_offset = _parse_int(off, lineno, "byte offset")
    fmt_field = fmt_field.split(":", 1)[0]
    if "x" in fmt_field:
        fmt_field, spf = fmt_field.split("x", 1)
        if spf and _parse_int(spf, lineno, "samples per frame") != 1:
            raise WfdbFormatError(f"line {lineno}: multi-frequency records are not supported")
    format_code = _parse_int(fmt_field, lineno, "format code")
    if format_code not in SUPPORTED_FORMATS:
        raise WfdbFormatError(
            f"line {lineno}: unsupported format code {format_code} "
            f"(supported: {', '.join(map(str, SUPPORTED_FORMATS))})"
        )

    gain = 0.0
    baseline = None
    units = "mV"
    if len(tokens) > 2:
        gain_field = tokens[2]
        if "/" in gain_field:
            gain_field, units = gain_field.split("/", 1)
        if "(" in gain_field:
            gain_field, base = gain_field.split("(", 1)
            baseline = _parse_int(base.rstrip(")"), lineno, "baseline")
        gain = _parse_float(gain_field, lineno, "gain")
    if gain < 0:
        raise WfdbFormatError(f"line {lineno}: gain must be > 0, got {gain}")
    if gain == 0:
        gain = DEFAULT_GAIN

    adc_res = _parse_int(tokens[3], lineno, "ADC resolution") if len(tokens) > 3 else 0
    adc_zero = _parse_int(tokens[4], lineno, "ADC zero") if len(tokens) > 4 else 0
    if baseline is None:
        # WFDB: an omitted baseline equals the ADC zero.
        baseline = adc_zero
    description = " ".join(tokens[8:]) if len(tokens) > 8 else ""
    return SignalSpec(
        file_name=file_name,
        format_code=format_code,
        gain=gain,
        baseline=baseline,
        units=units,
        adc_resolution=adc_res,
        adc_zero=adc_zero,
        byte_offset=byte_offset,
        description=description,
    )


def parse_header(text: str) -> RecordHeader:
    """Parse the contents of a WFDB ``.hea`` file.

    Errors name the offending (1-based) line number.
    """
    lines = []
    comments = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.strip()
        if not stripped:
            continue
        if stripped.startswith("#"):
            comments.append(stripped[1:].strip())
            continue
        lines.append((lineno, stripped))
    if not lines:
        raise WfdbFormatError("header contains no record line")

    lineno, record_line = lines[0]
    tokens = record_line.split()
    if len(tokens) < 2:
        raise WfdbFormatError(f"line {lineno}: malformed record line {record_line!r}")
    name = tokens[0]
    if "/" in name:
        raise WfdbFormatError(f"line {lineno}: multi-segment records are not supported")
    n_signals = _parse_int(tokens[1], lineno, "signal count")
    if n_signals < 1:
        raise WfdbFormatError(f"line {lineno}: signal count must be ≥ 1, got {n_signals}")
    fs = DEFAULT_FS
    if len(tokens) > 2:
        fs = _parse_float(tokens[2].split("/")[0].split("(")[0], lineno, "sampling frequency")
    if fs <= 0:
        raise WfdbFormatError(f"line {lineno}: sampling frequency must be > 0, got {fs}")
    n_samples = _parse_int(tokens[3], lineno, "sample count") if len(tokens) > 3 else 0
    if n_samples < 0:
        raise WfdbFormatError(f"line {lineno}: negative sample count {n_samples}")

    signal_lines = lines[1:]
    if len(signal_lines) < n_signals:
        raise WfdbFormatError(
            f"line {lineno}: record line declares {n_signals} signals "
            f"but {len(signal_lines)} signal lines follow"
        )
    signals = tuple(_parse_signal_line(text, no) for no, text in signal_lines[:n_signals])
    return RecordHeader(
        record_name=name,
        n_signals=n_signals,
        sampling_frequency=fs,
        n_samples=n_samples,
        signals=signals,
        comments=tuple(comments),
    )


def _unpack_212(raw: np.ndarray, n_values: int) -> np.ndarray:
    n_pairs = n_values // 2
    triples = raw[: 3 * n_pairs].reshape(-1, 3).astype(np.int32)
    out = np.empty(n_values, dtype=np.int32)
    out[0 : 2 * n_pairs : 2] = triples[:, 0] | ((triples[:, 1] & 0x0F) << 8)
    out[1 : 2 * n_pairs : 2] = triples[:, 2] | ((triples[:, 1] & 0xF0) << 4)
    if n_values % 2:
        b0, b1 = int(raw[3 * n_pairs]), int(raw[3 * n_pairs + 1])
        out[-1] = b0 | ((b1 & 0x0F) << 8)
    # 12-bit two's complement
    out[out > 2047] -= 4096
    return out


def decode_digital(header: RecordHeader, data: bytes, signals: list[int] | None = None) -> np.ndarray:
    """Decode one signal file into raw ADC values, shape ``[n_samples, n_sig]``.

    ``signals`` lists the header signal indices stored (interleaved) in ``data``;
    by default all of them.
    """
    if signals is None:
        signals = list(range(header.n_signals))
    specs = [header.signals[i] for i in signals]
    formats = {s.format_code for s in specs}
    if len(formats) != 1:
        raise WfdbFormatError(f"signals in one file use mixed formats {sorted(formats)}")
    fmt = formats.pop()
    n_sig = len(specs)
    raw = np.frombuffer(data, dtype=np.uint8)[specs[0].byte_offset :]
    offset = specs[0].byte_offset

    if fmt == 212:
        n_frames = header.n_samples or (len(raw) * 2 // 3) // n_sig
        n_values = n_frames * n_sig
        needed = 3 * (n_values // 2) + 2 * (n_values % 2)
        if len(raw) < needed:
            complete = (len(raw) // 3) * 2 // n_sig
            raise WfdbFormatError(
                f"format 212 data truncated at byte offset {offset + len(raw)}: "
                f"need {offset + needed} bytes for {n_frames} frames "
                f"({complete} complete frames present)"
            )
        values = _unpack_212(raw, n_values)
    elif fmt == 16:
        n_frames = header.n_samples or (len(raw) // 2) // n_sig
        n_values = n_frames * n_sig
        needed = 2 * n_values
        if len(raw) < needed:
            raise WfdbFormatError(
                f"format 16 data truncated at byte offset {offset + len(raw)}: "
                f"need {offset + needed} bytes for {n_frames} frames"
            )
        values = raw[:needed].view("<i2").astype(np.int32)
    else:
        raise WfdbFormatError(f"unsupported format code {fmt}")
    return values.reshape(n_frames, n_sig)


def decode_signal(header: RecordHeader, data: bytes, signals: list[int] | None = None) -> np.ndarray:
    """Decode a signal file and convert to physical units via ``(adc - baseline) / gain``."""
    if signals is None:
        signals = list(range(header.n_signals))
    adc = decode_digital(header, data, signals)
    gain = np.array([header.signals[i].gain for i in signals], dtype=np.float64)
    baseline = np.array([header.signals[i].baseline for i in signals], dtype=np.float64)
    return (adc - baseline) / gain


def decode_annotations(data: bytes) -> list[AnnotationEvent]:
    """Decode a MIT-format binary annotation file.

    Each 16-bit little-endian word carries a 6-bit type code and a 10-bit time
    increment. Codes 59-63 are pseudo-annotations (SKIP, NUM, SUB, CHN, AUX)
    that adjust time or modify the preceding annotation. A zero word ends the
    stream.
    """
    buf = bytes(data)
    n = len(buf)
    events: list[dict] = []
    time = 0
    chan = 0
    num = 0
    pos = 0
    while True:
        if pos + 2 > n:
            raise WfdbFormatError(f"annotation stream ends without terminator at byte offset {pos}")
        word = buf[pos] | (buf[pos + 1] << 8)
        code, value = word >> 10, word & 0x3FF
        pos += 2
        if word == 0:
            break
        if code == SKIP:
            if pos + 4 > n:
                raise WfdbFormatError(f"SKIP interval overruns buffer at byte offset {pos}")
            hi = buf[pos] | (buf[pos + 1] << 8)
            lo = buf[pos + 2] | (buf[pos + 3] << 8)
            interval = (hi << 16) | lo
            if interval >= 1 << 31:
                interval -= 1 << 32
            time += interval
            pos += 4
        elif code == NUM:
            if events:
                num = value - 1024 if value > 511 else value
                events[-1]["num"] = num
        elif code == SUB:
            if events:
                events[-1]["subtype"] = value - 1024 if value > 511 else value
        elif code == CHN:
            chan = value
            if events:
                events[-1]["chan"] = chan
        elif code == AUX:
            end = pos + value
            if end > n:
                raise WfdbFormatError(
                    f"AUX string of {value} bytes overruns buffer at byte offset {pos}"
                )
            if events:
                events[-1]["aux"] = buf[pos:end].split(b"\x00", 1)[0].decode("latin-1")
            pos = end + (value & 1)
        else:
            time += value
            events.append(
                {
                    "sample_index": time,
                    "code": code,
                    "symbol": ANNOTATION_SYMBOLS.get(code, f"[{code}]"),
                    "chan": chan,
                    "num": num,
                    "subtype": 0,
                    "aux": None,
                }
            )
    out = [AnnotationEvent(**e) for e in events]
    out.sort(key=lambda e: e.sample_index)
    return out


def list_records(directory: str | os.PathLike) -> list[str]:
    """Record names in a PhysioNet-style directory (``RECORDS`` file, else ``*.hea``)."""
    directory = Path(directory)
    records_file = directory / "RECORDS"
    if records_file.exists():
        names = [ln.strip() for ln in records_file.read_text().splitlines() if ln.strip()]
        return [n for n in names if (directory / f"{n}.hea").exists()]
    return sorted(p.stem for p in directory.glob("*.hea"))


def read_record(
    directory: str | os.PathLike,
    name: str,
    annotators: tuple[str, ...] = (),
) -> Record:
    """Read header, signals and any of the requested annotation files present."""
    directory = Path(directory)
    header_path = directory / f"{name}.hea"
    if not header_path.exists():
        raise FileNotFoundError(f"missing header {header_path}")
    header = parse_header(header_path.read_text(encoding="latin-1"))

    by_file: dict[str, list[int]] = {}
    for i, spec in enumerate(header.signals):
        by_file.setdefault(spec.file_name, []).append(i)
    columns: dict[int, np.ndarray] = {}
    n_rows = None
    for file_name, idx in by_file.items():
        data = (directory / file_name).read_bytes()
        block = decode_signal(header, data, idx)
        n_rows = block.shape[0] if n_rows is None else min(n_rows, block.shape[0])
        for j, i in enumerate(idx):
            columns[i] = block[:, j]
    signal = np.stack([columns[i][:n_rows] for i in range(header.n_signals)], axis=1)

    annotations = {}
    n = signal.shape[0]
    for ext in annotators:
        path = directory / f"{name}.{ext}"
        if not path.exists():
            continue
        events = decode_annotations(path.read_bytes())
        kept = [e for e in events if 0 <= e.sample_index < n]
        if len(kept) != len(events):
            log.warning(
                "%s.%s: dropped %d annotations outside [0, %d)", name, ext, len(events) - len(kept), n
            )
        annotations[ext] = kept
    return Record(header=header, signal=signal, annotations=annotations)
