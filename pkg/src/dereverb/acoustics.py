"""Octave-band room-acoustics descriptors.

Decay times come from backward-integrated energy curves: a line is fitted to
the -5..-35 dB span and extrapolated (T60 = 2 * T30).  Clarity is the dB
ratio of energy in the first 50 ms to the remaining tail, measured after
aligning the peak to time zero.  Band restriction uses a 4th-order
Butterworth band-pass applied forward-backward (zero phase, so decay timing
is preserved).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
import scipy.signal

from .errors import ConfigError

OCTAVE_CENTERS = (125.0, 250.0, 500.0, 1000.0, 2000.0, 4000.0)

# A T30 span shorter than this is the analysis filter's own ringing, not a
# room decay; such fits are reported as undefined.
_MIN_SPAN_S = 5e-3

C50_CLIP_DB = 90.0
_EARLY_WINDOW_S = 0.050


def octave_bands(sample_rate: int) -> Tuple[float, ...]:
    """Standard octave centers whose upper edge stays below Nyquist."""
    return tuple(c for c in OCTAVE_CENTERS if c * np.sqrt(2.0) < sample_rate / 2.0)


def _band_sos(center_hz: float, sample_rate: int):
    lo = center_hz / np.sqrt(2.0)
    hi = center_hz * np.sqrt(2.0)
    if hi >= sample_rate / 2.0:
        raise ConfigError(f"octave band at {center_hz} Hz exceeds Nyquist")
    return scipy.signal.butter(2, [lo, hi], btype="bandpass", fs=sample_rate, output="sos")


def octave_filter(h: np.ndarray, center_hz: float, sample_rate: int) -> np.ndarray:
    """Zero-phase octave-band restriction, same length as the input."""
    h = np.asarray(h, dtype=np.float64)
    sos = _band_sos(center_hz, sample_rate)
    pad = min(h.size - 1, 3 * int(sample_rate / center_hz) + 24)
    return scipy.signal.sosfiltfilt(sos, h, padlen=pad)


def edc(h: np.ndarray) -> np.ndarray:
    """Energy decay curve in dB, 0 dB at the first sample, non-increasing."""
    h = np.asarray(h, dtype=np.float64)
    energy = np.cumsum(h[::-1] ** 2)[::-1]
    total = energy[0]
    if total == 0.0:
        raise ConfigError("cannot compute a decay curve for an all-zero signal")
    out = np.full(h.size, -np.inf)
    nz = energy > 0
    out[nz] = 10.0 * np.log10(energy[nz] / total)
    return out


def t60(h: np.ndarray, center_hz: float, sample_rate: int) -> Optional[float]:
    """Decay time from the -5..-35 dB fit, doubled; None when undefined."""
    curve = edc(octave_filter(h, center_hz, sample_rate))
    below5 = np.nonzero(curve <= -5.0)[0]
    below35 = np.nonzero(curve <= -35.0)[0]
    if below5.size == 0 or below35.size == 0:
        return None
    start, stop = below5[0], below35[0]
    span = (stop - start) / sample_rate
    if span < _MIN_SPAN_S:
        return None
    t = np.arange(start, stop + 1) / sample_rate
    seg = curve[start : stop + 1]
    finite = np.isfinite(seg)
    if finite.sum() < 2:
        return None
    slope = np.polyfit(t[finite], seg[finite], 1)[0]
    if slope >= 0:
        return None
    return 2.0 * (-30.0 / slope)


def c50(h: np.ndarray, center_hz: float, sample_rate: int) -> float:
    """Early-to-late energy ratio (dB) at 50 ms, clipped to +-90 dB.

    The raw response is shifted so its peak-magnitude sample sits at time
    zero, then band-filtered with enough leading padding that the zero-phase
    pre-ring of early content is counted on the early side.
    """
    h = np.asarray(h, dtype=np.float64)
    if not np.any(h):
        raise ConfigError("cannot compute clarity for an all-zero signal")
    peak = int(np.argmax(np.abs(h)))
    aligned = h[peak:]
    margin = int(0.05 * sample_rate) + 64
    padded = np.concatenate([np.zeros(margin), aligned, np.zeros(margin)])
    sos = _band_sos(center_hz, sample_rate)
    filtered = scipy.signal.sosfiltfilt(sos, padded)
    split = margin + int(round(_EARLY_WINDOW_S * sample_rate))
    early = float(np.sum(filtered[:split] ** 2))
    late = float(np.sum(filtered[split:] ** 2))
    if late == 0.0:
        return C50_CLIP_DB
    if early == 0.0:
        return -C50_CLIP_DB
    return float(np.clip(10.0 * np.log10(early / late), -C50_CLIP_DB, C50_CLIP_DB))


@dataclass
class RirMetrics:
    """Per-band descriptors; None marks an undefined decay fit."""

    t60_s: Dict[float, Optional[float]]
    c50_db: Dict[float, float]


def rir_metrics(h: np.ndarray, sample_rate: int) -> RirMetrics:
    bands = octave_bands(sample_rate)
    return RirMetrics(
        t60_s={b: t60(h, b, sample_rate) for b in bands},
        c50_db={b: c50(h, b, sample_rate) for b in bands},
    )


def metrics_error(est: RirMetrics, ref: RirMetrics):
    """Per-band absolute errors; bands without a defined T60 on either side
    are excluded from the T60 table and reported."""
    t60_err: Dict[float, float] = {}
    skipped: List[float] = []
    for band, ref_val in ref.t60_s.items():
        est_val = est.t60_s.get(band)
        if ref_val is None or est_val is None:
            skipped.append(band)
            continue
        t60_err[band] = abs(est_val - ref_val)
    c50_err = {
        band: abs(est.c50_db[band] - ref.c50_db[band])
        for band in ref.c50_db
        if band in est.c50_db
    }
    return {"t60_s": t60_err, "c50_db": c50_err, "skipped_bands": skipped}
