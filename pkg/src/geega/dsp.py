"""Filtering, spectral estimation and band-power integration."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import signal as sps

STFT_WINDOW = 256


@dataclass(frozen=True)
class BandDefinition:
    name: str
    lo_hz: float
    hi_hz: float

    def __post_init__(self):
        if not 0 < self.lo_hz < self.hi_hz:
            raise ValueError(f"band {self.name}: need 0 < lo < hi, got {self.lo_hz}, {self.hi_hz}")


DEFAULT_BANDS = (
    BandDefinition("Delta", 1.0, 4.0),
    BandDefinition("Theta", 4.0, 8.0),
    BandDefinition("Alpha", 8.0, 12.0),
    BandDefinition("Beta", 12.0, 30.0),
    BandDefinition("Gamma", 30.0, 75.0),
)


def check_bands(bands) -> tuple[BandDefinition, ...]:
    bands = tuple(bands)
    for a, b in zip(bands, bands[1:]):
        if b.lo_hz < a.hi_hz:
            raise ValueError(f"bands {a.name} and {b.name} overlap or are out of order")
    return bands


@dataclass
class PsdEstimate:
    freqs_hz: np.ndarray
    power: np.ndarray  # uV^2/Hz


def _check_cutoff(f, nyquist, what):
    if not 0 < f < nyquist:
        raise ValueError(f"{what} {f} Hz must lie in (0, {nyquist}) Hz")


def bandpass_sos(sample_rate_hz, lo_hz, hi_hz, order=4):
    nyq = sample_rate_hz / 2.0
    _check_cutoff(lo_hz, nyq, "low edge")
    _check_cutoff(hi_hz, nyq, "high edge")
    if lo_hz >= hi_hz:
        raise ValueError(f"low edge {lo_hz} must be below high edge {hi_hz}")
    if order < 1:
        raise ValueError("filter order must be >= 1")
    return sps.butter(order, [lo_hz, hi_hz], btype="bandpass", fs=sample_rate_hz, output="sos")


def bandpass(x, sample_rate_hz, lo_hz=1.0, hi_hz=75.0, order=4):
    """Zero-phase Butterworth bandpass (forward-backward second-order sections).

    The effective magnitude response is the squared Butterworth response.
    Works along the last axis.
    """
    sos = bandpass_sos(sample_rate_hz, lo_hz, hi_hz, order)
    poles = np.concatenate([np.roots(sec[3:]) for sec in sos])
    if not np.all(np.abs(poles) < 1):
        raise FloatingPointError("bandpass design produced poles outside the unit circle")
    x = np.asarray(x, dtype=np.float64)
    return sps.sosfiltfilt(sos, x, axis=-1)


def notch(x, sample_rate_hz, f0_hz=60.0, quality=30.0):
    _check_cutoff(f0_hz, sample_rate_hz / 2.0, "notch frequency")
    b, a = sps.iirnotch(f0_hz, quality, fs=sample_rate_hz)
    x = np.asarray(x, dtype=np.float64)
    return sps.filtfilt(b, a, x, axis=-1)


def psd(x, sample_rate_hz, window_seconds=1.0, overlap_fraction=0.5) -> PsdEstimate:
    """Welch PSD with a Hann window; one-sided density in uV^2/Hz."""
    x = np.asarray(x, dtype=np.float64)
    nperseg = int(round(window_seconds * sample_rate_hz))
    if nperseg < 2 or x.shape[-1] < nperseg:
        raise ValueError(f"signal of {x.shape[-1]} samples shorter than one {nperseg}-sample window")
    if not 0 <= overlap_fraction < 1:
        raise ValueError("overlap fraction must be in [0, 1)")
    freqs, power = sps.welch(
        x, fs=sample_rate_hz, window="hann", nperseg=nperseg,
        noverlap=int(round(overlap_fraction * nperseg)), detrend=False,
        scaling="density", axis=-1,
    )
    return PsdEstimate(freqs, np.maximum(power, 0.0))


def simpson_integrate(y, x) -> float:
    """Composite Simpson's rule on a possibly non-uniform grid.

    Interval pairs are integrated with the three-point parabola through their
    nodes. With an odd number of intervals the last one falls back to the
    trapezoid rule.
    """
    y = np.asarray(y, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if y.shape != x.shape or y.ndim != 1:
        raise ValueError("x and y must be 1-d and of equal length")
    if x.size < 2:
        raise ValueError("need at least two samples")
    h = np.diff(x)
    if np.any(h <= 0):
        raise ValueError("x must be strictly ascending")
    n_pairs = h.size // 2
    h0 = h[0:2 * n_pairs:2]
    h1 = h[1:2 * n_pairs:2]
    y0 = y[0:2 * n_pairs:2]
    y1 = y[1:2 * n_pairs + 1:2]
    y2 = y[2:2 * n_pairs + 1:2]
    hs = h0 + h1
    total = np.sum(
        hs / 6.0 * ((2.0 - h1 / h0) * y0 + hs * hs / (h0 * h1) * y1 + (2.0 - h0 / h1) * y2)
    )
    if h.size % 2:
        total += 0.5 * h[-1] * (y[-2] + y[-1])
    return float(total)


def band_power(est: PsdEstimate, band: BandDefinition) -> float:
    f = est.freqs_hz
    if band.lo_hz < f[0] or band.hi_hz > f[-1]:
        raise ValueError(f"band {band.name} [{band.lo_hz}, {band.hi_hz}] Hz outside PSD range [{f[0]}, {f[-1]}]")
    sel = (f >= band.lo_hz) & (f <= band.hi_hz)
    if sel.sum() < 2:
        raise ValueError(f"band {band.name} covers fewer than two PSD bins")
    return max(simpson_integrate(est.power[sel], f[sel]), 0.0)


def stft_frames(x, window_len=STFT_WINDOW) -> np.ndarray:
    """Magnitudes of non-overlapping rectangular-window FFT frames, [frames x bins]."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("stft_frames expects a 1-d signal")
    if x.size < window_len:
        raise ValueError(f"signal of {x.size} samples shorter than one {window_len}-sample frame")
    n = x.size // window_len
    frames = x[: n * window_len].reshape(n, window_len)
    return np.abs(np.fft.rfft(frames, axis=1))
