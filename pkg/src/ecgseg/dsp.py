"""Band-pass design, zero-phase filtering and rational resampling."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy import signal as sps


class FilterDesignError(ValueError):
    pass


@dataclass(frozen=True)
class FilterSpec:
    sampling_frequency: float
    order: int = 3
    low_cut: float = 0.5
    high_cut: float = 40.0

    def validate(self) -> None:
        nyq = self.sampling_frequency / 2
        if self.order < 1:
            raise FilterDesignError(f"order must be ≥ 1, got {self.order}")
        if not 0 < self.low_cut < self.high_cut < nyq:
            raise FilterDesignError(
                f"need 0 < low_cut < high_cut < fs/2, got "
                f"low={self.low_cut}, high={self.high_cut}, fs/2={nyq}"
            )


@dataclass(frozen=True)
class IirCoefficients:
    b: np.ndarray
    a: np.ndarray

    @property
    def poles(self) -> np.ndarray:
        return np.roots(self.a)

    def frequency_response(self, freqs: np.ndarray, fs: float) -> np.ndarray:
        """Complex response H(e^{jw}) at ``freqs`` (Hz)."""
        z = np.exp(-2j * np.pi * np.asarray(freqs, dtype=np.float64) / fs)
        num = np.polyval(self.b[::-1], z)
        den = np.polyval(self.a[::-1], z)
        return num / den


def design_butterworth_bandpass(spec: FilterSpec) -> IirCoefficients:
    """Digital Butterworth band-pass via the bilinear transform.

    The analog low-pass prototype of order ``spec.order`` is shifted to a
    band-pass around the pre-warped edges, giving a transfer function of degree
    ``2 * order``. Design is done in zero-pole-gain form to keep the poles near
    z = 1 accurate.
    """
    spec.validate()
    fs = spec.sampling_frequency
    n = spec.order
    # Pre-warp band edges onto the analog frequency axis (bilinear uses 2*fs).
    warped_lo = 2 * fs * np.tan(np.pi * spec.low_cut / fs)
    warped_hi = 2 * fs * np.tan(np.pi * spec.high_cut / fs)
    bw = warped_hi - warped_lo
    w0 = np.sqrt(warped_lo * warped_hi)

    k = np.arange(1, n + 1)
    proto_poles = np.exp(1j * np.pi * (2 * k + n - 1) / (2 * n))

    # low-pass -> band-pass: each prototype pole p maps to roots of s^2 - p*bw*s + w0^2
    scaled = proto_poles * bw / 2
    disc = np.sqrt(scaled**2 - w0**2)
    analog_poles = np.concatenate([scaled + disc, scaled - disc])
    analog_zeros = np.zeros(n)
    analog_gain = bw**n

    # bilinear transform
    fs2 = 2 * fs
    digital_poles = (fs2 + analog_poles) / (fs2 - analog_poles)
    digital_zeros = np.concatenate([(fs2 + analog_zeros) / (fs2 - analog_zeros), -np.ones(n)])
    digital_gain = analog_gain * np.real(np.prod(fs2 - analog_zeros) / np.prod(fs2 - analog_poles))

    b = digital_gain * np.real(np.poly(digital_zeros))
    a = np.real(np.poly(digital_poles))
    return IirCoefficients(b=b / a[0], a=a / a[0])


def filtfilt(coeffs: IirCoefficients, x: np.ndarray) -> np.ndarray:
    """Forward-backward IIR filtering with odd-reflection edge padding.

    The pad length is ``3 * max(len(a), len(b))``; each pass starts from the
    steady-state initial conditions scaled by the first padded sample.
    """
    b, a = np.asarray(coeffs.b, np.float64), np.asarray(coeffs.a, np.float64)
    x = np.asarray(x, dtype=np.float64)
    padlen = 3 * max(len(a), len(b))
    if x.ndim != 1:
        raise ValueError("filtfilt expects a 1-D signal")
    if len(x) <= padlen:
        raise ValueError(f"signal of length {len(x)} is too short; need more than {padlen} samples")

    left = 2 * x[0] - x[padlen:0:-1]
    right = 2 * x[-1] - x[-2 : -padlen - 2 : -1]
    ext = np.concatenate([left, x, right])

    zi = sps.lfilter_zi(b, a)
    y, _ = sps.lfilter(b, a, ext, zi=zi * ext[0])
    y = y[::-1]
    y, _ = sps.lfilter(b, a, y, zi=zi * y[0])
    y = y[::-1]
    return y[padlen:-padlen]


def bandpass(x: np.ndarray, fs: float, order: int = 3, low: float = 0.5, high: float = 40.0) -> np.ndarray:
    return filtfilt(design_butterworth_bandpass(FilterSpec(fs, order, low, high)), x)


def rational_ratio(fs_in: float, fs_out: float, max_denominator: int = 1000) -> Fraction:
    if fs_in <= 0 or fs_out <= 0:
        raise ValueError(f"sampling frequencies must be > 0, got {fs_in}, {fs_out}")
    return Fraction(fs_out / fs_in).limit_denominator(max_denominator)


def resample(x: np.ndarray, fs_in: float, fs_out: float) -> np.ndarray:
    """Polyphase resampling by the rational ratio ``fs_out / fs_in``.

    The anti-aliasing FIR is a Kaiser-windowed sinc with its cutoff at the lower
    of the two Nyquist rates. Output length is ``round(len(x) * fs_out / fs_in)``.
    """
    ratio = rational_ratio(fs_in, fs_out)
    x = np.asarray(x, dtype=np.float64)
    if ratio == 1:
        return x.copy()
    n_out = int(round(len(x) * fs_out / fs_in))
    if len(x) == 0:
        return np.zeros(0)
    y = sps.resample_poly(x, ratio.numerator, ratio.denominator, window=("kaiser", 5.0))
    if len(y) < n_out:
        y = np.concatenate([y, np.full(n_out - len(y), y[-1] if len(y) else 0.0)])
    return y[:n_out]
