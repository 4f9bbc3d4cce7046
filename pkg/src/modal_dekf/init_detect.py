"""Preprocessing and FFT-based mode detection for filter initialization.

The detection pipeline removes the DC component, normalizes each channel to
unit peak, averages the Hann-windowed magnitude spectra across channels and
returns the prominent local maxima with parabolically refined frequencies.
Detected peaks seed the Kalman filters: frequencies from the spectrum,
dampings at zero, amplitudes and phases from a short least-squares residue
fit.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .baselines import residue_fit
from .errors import ValidationError
from .signal_model import MeasurementWindow, Mode, ModeSet, SystemState

logger = logging.getLogger(__name__)

DEFAULT_MAX_MODES = 3
DEFAULT_PROMINENCE = 5.0


@dataclass(frozen=True)
class SpectralPeak:
    """One detected spectral line: interpolated frequency (Hz), raw
    magnitude and its prominence relative to the median spectrum level."""

    freq_hz: float
    magnitude: float
    prominence: float


@dataclass(frozen=True)
class Preprocessed:
    """DC-free, unit-peak window plus the per-channel affine transform that
    maps fitted values back to raw units."""

    window: MeasurementWindow
    offsets: np.ndarray
    scales: np.ndarray

    def restore_curve(self, curve: np.ndarray) -> np.ndarray:
        """Map a normalized-units curve back to raw units."""
        curve = np.asarray(curve, dtype=float)
        if curve.shape[0] != self.scales.size:
            raise ValidationError("curve channel count does not match the transform")
        return curve * self.scales[:, None] + self.offsets[:, None]


def preprocess(raw: MeasurementWindow) -> Preprocessed:
    """Remove the per-channel mean and normalize to unit peak deviation."""
    if raw.n_samples < 2:
        raise ValidationError("preprocessing needs at least 2 samples")
    offsets = raw.samples.mean(axis=1)
    centered = raw.samples - offsets[:, None]
    scales = np.abs(centered).max(axis=1)
    if (scales == 0).any():
        dead = int(np.argmax(scales == 0))
        raise ValidationError(f"channel {dead} is constant; nothing to normalize")
    normalized = centered / scales[:, None]
    return Preprocessed(MeasurementWindow(normalized, raw.fs, raw.t0), offsets, scales)


def _parabolic_refine(logmag: np.ndarray, i: int) -> float:
    """Fractional bin offset of a local maximum from its log-magnitude
    3-point parabola, clamped to half a bin."""
    a, b, g = logmag[i - 1], logmag[i], logmag[i + 1]
    denom = a - 2.0 * b + g
    if denom == 0.0:
        return 0.0
    delta = 0.5 * (a - g) / denom
    return float(np.clip(delta, -0.5, 0.5))


def fft_mode_scan(
    window: MeasurementWindow,
    max_modes: int = DEFAULT_MAX_MODES,
    prominence_threshold: float = DEFAULT_PROMINENCE,
    channel: int | None = None,
) -> list[SpectralPeak]:
    """Locate up to ``max_modes`` oscillation frequencies in (0, fs/2).

    The spectrum is the average of each channel's Hann-windowed magnitude
    spectrum, each normalized to unit maximum (``channel`` restricts the
    scan to a single channel).  A local maximum qualifies when it reaches
    ``prominence_threshold`` times the median spectrum level.  Returns peaks
    sorted by frequency; an empty list means no oscillation was detected.
    """
    if window.n_samples < 32:
        raise ValidationError("mode scan needs at least 32 samples")
    if max_modes < 1:
        raise ValidationError("max_modes must be >= 1")
    rows = window.samples if channel is None else window.samples[channel:channel + 1]
    n = window.n_samples
    taper = np.hanning(n)
    spectra = []
    for row in rows:
        mag = np.abs(np.fft.rfft((row - row.mean()) * taper))
        top = mag.max()
        if top == 0:
            continue
        spectra.append(mag / top)
    if not spectra:
        return []
    mag = np.mean(spectra, axis=0)
    median = np.median(mag)
    floor = prominence_threshold * median

    candidates = []
    for i in range(1, mag.size - 1):
        if mag[i] > mag[i - 1] and mag[i] >= mag[i + 1] and mag[i] >= floor:
            candidates.append(i)
    candidates.sort(key=lambda i: mag[i], reverse=True)
    candidates = candidates[:max_modes]

    logmag = np.log10(np.maximum(mag, 1e-300))
    df = window.fs / n
    peaks = []
    for i in candidates:
        delta = _parabolic_refine(logmag, i)
        freq = (i + delta) * df
        if 0.0 < freq < window.fs / 2.0:
            prom = mag[i] / median if median > 0 else math.inf
            peaks.append(SpectralPeak(freq, float(mag[i]), float(prom)))
    peaks.sort(key=lambda p: p.freq_hz)
    return peaks


def build_initial_state(
    peaks,
    window: MeasurementWindow,
    fit_seconds: float = 2.0,
) -> SystemState:
    """Turn detected peaks into a full filter initialization.

    Frequencies come from the peaks (rad/s), dampings start at zero and the
    per-channel amplitudes/phases come from a residue fit over the first
    ``fit_seconds`` of data.  When that fit fails the amplitude falls back
    to the channel RMS with zero phase (with a warning).
    """
    peaks = list(peaks)
    if not peaks:
        raise ValidationError("cannot initialize from an empty peak list")
    modes = ModeSet(tuple(Mode.from_hz(p.freq_hz, 0.0) for p in sorted(peaks, key=lambda p: p.freq_hz)))
    l = len(modes)
    n_fit = min(window.n_samples, max(int(round(fit_seconds * window.fs)), 4 * l + 4))
    sub = MeasurementWindow(window.samples[:, :n_fit], window.fs, window.t0)
    try:
        amplitudes, phases = residue_fit(sub, list(modes))
    except (ValidationError, np.linalg.LinAlgError) as exc:
        warnings.warn(f"residue fit failed ({exc}); falling back to RMS amplitudes",
                      stacklevel=2)
        rms = np.sqrt(np.mean(window.samples ** 2, axis=1))
        amplitudes = np.tile(rms[:, None], (1, l))
        phases = np.zeros((window.n_channels, l))
    return SystemState.build(modes, amplitudes, phases)
