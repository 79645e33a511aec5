"""Parametric subband reverberation operator.

A time-frequency RIR is assembled from per-band exponential decays
(weight and rate per band, log-linearly interpolated to the full bin grid)
and free per-entry phases, then projected: inverse STFT, minimum-phase
correction, direct-path normalization to a unit first sample, and forward
STFT.  The projected filter convolves a signal frame-wise and independently
per frequency bin.  Every stage has a hand-written VJP so the whole operator
is differentiable with respect to the input signal and all parameters.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.fft

from . import dsp
from .dsp import Spectrogram, StftConfig, Waveform
from .errors import ConfigError, DegenerateRirError

# Per-band clamp boxes: weights 0..40 dB, decay rates in nepers/second
# (0.5..28 1/s spans amplitude-decay times of roomy 14 s down to dry 0.25 s).
WEIGHT_MIN = 1.0
WEIGHT_MAX = 100.0
DECAY_MIN = 0.5
DECAY_MAX = 28.0

DEFAULT_N_FRAMES = 100


@dataclass(frozen=True)
class BandLayout:
    """Strictly increasing band-center frequencies in Hz."""

    centers_hz: tuple

    def __post_init__(self):
        c = np.asarray(self.centers_hz, dtype=np.float64)
        if c.ndim != 1 or c.size < 2:
            raise ConfigError("band layout needs at least two centers")
        if np.any(np.diff(c) <= 0) or c[0] < 0:
            raise ConfigError("band centers must be strictly increasing and >= 0")

    @property
    def n_bands(self) -> int:
        return len(self.centers_hz)

    def centers(self) -> np.ndarray:
        return np.asarray(self.centers_hz, dtype=np.float64)


def default_band_layout(sample_rate: int = dsp.DEFAULT_SAMPLE_RATE) -> BandLayout:
    """26 bands at 16 kHz: 125 Hz spacing up to 1 kHz, 250 Hz up to 3 kHz,
    500 Hz up to 8 kHz."""
    nyquist = sample_rate / 2.0
    centers = [float(f) for f in range(125, 1001, 125)]
    centers += [float(f) for f in range(1250, 3001, 250)]
    centers += [float(f) for f in range(3500, 8001, 500)]
    centers = [f for f in centers if f <= nyquist]
    return BandLayout(tuple(centers))


@dataclass
class RirParams:
    """Operator parameter set: per-entry phases plus per-band gain and decay."""

    phases: np.ndarray  # (n_frames, n_bins) radians
    weights: np.ndarray  # (n_bands,) linear gain
    decays: np.ndarray  # (n_bands,) per-frame decay rate
    layout: BandLayout = field(
        default_factory=default_band_layout
    )
    n_frames: int = DEFAULT_N_FRAMES

    def __post_init__(self):
        self.phases = np.asarray(self.phases, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.decays = np.asarray(self.decays, dtype=np.float64)
        if self.phases.shape[0] != self.n_frames:
            raise ConfigError("phase matrix row count must equal n_frames")
        b = self.layout.n_bands
        if self.weights.shape != (b,) or self.decays.shape != (b,):
            raise ConfigError("weights/decays must have one entry per band")
        if b >= self.phases.shape[1]:
            raise ConfigError("band count must be smaller than bin count")
        for a in (self.phases, self.weights, self.decays):
            if not np.all(np.isfinite(a)):
                raise ConfigError("RIR parameters must be finite")

    @property
    def n_bins(self) -> int:
        return int(self.phases.shape[1])

    def copy(self) -> "RirParams":
        return RirParams(
            self.phases.copy(),
            self.weights.copy(),
            self.decays.copy(),
            self.layout,
            self.n_frames,
        )


def init_rir_params(
    cfg: StftConfig,
    layout: Optional[BandLayout] = None,
    n_frames: int = DEFAULT_N_FRAMES,
    rng: Optional[np.random.Generator] = None,
) -> RirParams:
    """Mid-box start: unit weights, geometric-mean decay, uniform phases."""
    layout = layout or default_band_layout(cfg.sample_rate)
    rng = rng or np.random.default_rng(0)
    b = layout.n_bands
    phases = rng.uniform(-np.pi, np.pi, size=(n_frames, cfg.n_bins))
    weights = np.ones(b)
    decays = np.full(b, math.sqrt(DECAY_MIN * DECAY_MAX))
    return RirParams(phases, weights, decays, layout, n_frames)


def clamp_params(params: RirParams) -> RirParams:
    """Project weights and decays into their boxes; phases untouched."""
    return RirParams(
        params.phases,
        np.clip(params.weights, WEIGHT_MIN, WEIGHT_MAX),
        np.clip(params.decays, DECAY_MIN, DECAY_MAX),
        params.layout,
        params.n_frames,
    )


def rir_length(cfg: StftConfig, n_frames: int = DEFAULT_N_FRAMES) -> int:
    """Time-domain RIR length implied by the frame grid."""
    return n_frames * cfg.hop


# ---------------------------------------------------------------------------
# Magnitude model
# ---------------------------------------------------------------------------


def frame_times(cfg: StftConfig, n_frames: int) -> np.ndarray:
    """Frame-center times in seconds on the hop grid."""
    return np.arange(n_frames, dtype=np.float64) * cfg.hop / cfg.sample_rate


def magnitude_from_decay(params: RirParams, cfg: StftConfig) -> np.ndarray:
    """Per-band magnitude envelope ``weights * exp(-decays * t)`` at frame
    times ``t`` (decays in nepers per second)."""
    t = frame_times(cfg, params.n_frames)[:, None]
    return params.weights[None, :] * np.exp(-params.decays[None, :] * t)


def _bin_frequencies(cfg: StftConfig) -> np.ndarray:
    return np.arange(cfg.n_bins) * cfg.sample_rate / cfg.fft_size


def _interp_weights(layout: BandLayout, cfg: StftConfig):
    """(lo, hi, t) per bin for linear interpolation over band centers,
    constant extrapolation outside the outermost centers."""
    centers = layout.centers()
    freqs = _bin_frequencies(cfg)
    hi = np.searchsorted(centers, freqs, side="left")
    lo = hi - 1
    lo = np.clip(lo, 0, len(centers) - 1)
    hi = np.clip(hi, 0, len(centers) - 1)
    span = centers[hi] - centers[lo]
    with np.errstate(invalid="ignore", divide="ignore"):
        t = np.where(span > 0, (freqs - centers[lo]) / np.where(span > 0, span, 1.0), 0.0)
    t = np.clip(t, 0.0, 1.0)
    return lo, hi, t


def interpolate_bands(
    band_mag: np.ndarray, layout: BandLayout, cfg: StftConfig
) -> np.ndarray:
    """Expand (n_frames, n_bands) magnitudes to all bins, log-linearly in Hz."""
    band_mag = np.asarray(band_mag, dtype=np.float64)
    if np.any(band_mag <= 0):
        raise ConfigError("band magnitudes must be positive for log interpolation")
    lo, hi, t = _interp_weights(layout, cfg)
    logm = np.log(band_mag)
    return np.exp((1.0 - t)[None, :] * logm[:, lo] + t[None, :] * logm[:, hi])


def _interpolate_vjp(
    band_mag: np.ndarray, full_mag: np.ndarray, cot: np.ndarray, lo, hi, t
) -> np.ndarray:
    """Cotangent on band magnitudes given one on the interpolated matrix."""
    # d full = full * ((1-t) dlog[lo] + t dlog[hi]);  dlog = dband / band
    weighted = cot * full_mag
    d_log = np.zeros_like(band_mag)
    np.add.at(d_log.T, lo, ((1.0 - t)[None, :] * weighted).T)
    np.add.at(d_log.T, hi, (t[None, :] * weighted).T)
    return d_log / band_mag


# ---------------------------------------------------------------------------
# Assembly and projection
# ---------------------------------------------------------------------------


@dataclass
class _AssembleTape:
    params: RirParams
    cfg: StftConfig
    use_min_phase: bool
    band_mag: np.ndarray
    full_mag: np.ndarray
    phasor: np.ndarray
    h_raw: np.ndarray
    h_min: np.ndarray
    h_unit: np.ndarray
    length: int


def _assemble_with_tape(params: RirParams, cfg: StftConfig, use_min_phase: bool = True):
    if params.n_bins != cfg.n_bins:
        raise ConfigError("parameter bin count does not match STFT config")
    band_mag = magnitude_from_decay(params, cfg)
    full_mag = interpolate_bands(band_mag, params.layout, cfg)
    phasor = np.exp(1j * params.phases)
    h_tf = full_mag * phasor
    if not np.any(h_tf):
        raise DegenerateRirError("parameters produce an all-zero filter")
    length = rir_length(cfg, params.n_frames)
    h_raw = dsp.istft_array(h_tf, cfg, length=length)
    if not np.any(h_raw):
        raise DegenerateRirError("projected time-domain filter is all zero")
    if use_min_phase:
        h_min = dsp.minimum_phase_array(h_raw)
        if h_min[0] <= 0:
            raise DegenerateRirError("minimum-phase filter has a non-positive onset")
        # Direct-path injection: normalize so the first sample is a unit
        # impulse.  The global gain division is the magnitude correction that
        # makes the projection idempotent; optimized parameters are never
        # rewritten.
        h_unit = h_min / h_min[0]
    else:
        # Ablated chain (no minimum phase): the onset sign is arbitrary, so
        # the direct path is injected by literal sample replacement.
        h_min = h_raw
        h_unit = h_raw.copy()
        h_unit[0] = 1.0
    return _AssembleTape(
        params, cfg, use_min_phase, band_mag, full_mag, phasor, h_raw, h_min,
        h_unit, length,
    )


def assemble_rir(
    params: RirParams,
    cfg: Optional[StftConfig] = None,
    use_min_phase: bool = True,
):
    """Build the projected time-frequency filter and its time-domain RIR.

    Returns ``(hbar, h)`` where ``hbar`` is STFT-consistent and ``h`` starts
    with a unit impulse.  ``use_min_phase=False`` ablates the minimum-phase
    stage of the projection.
    """
    cfg = cfg or StftConfig()
    tape = _assemble_with_tape(params, cfg, use_min_phase)
    spec = Spectrogram(dsp.stft_array(tape.h_unit, cfg), cfg, n_samples=tape.length)
    return spec, Waveform(tape.h_unit, cfg.sample_rate)


def effective_magnitude(hbar: Spectrogram) -> np.ndarray:
    """Magnitude of the projected filter, for diagnostics (post-correction)."""
    return np.abs(hbar.values)


def _assemble_vjp_from_h(tape: _AssembleTape, d_hunit: np.ndarray) -> dict:
    """Cotangents on (phases, weights, decays) given one on the unit-onset RIR."""
    p, cfg = tape.params, tape.cfg
    if tape.use_min_phase:
        h0 = tape.h_min[0]
        d_hmin = d_hunit / h0
        d_hmin[0] -= (tape.h_min @ d_hunit) / h0**2
        d_hraw = dsp.minimum_phase_vjp(tape.h_raw, d_hmin)
    else:
        d_hraw = np.asarray(d_hunit, dtype=np.float64).copy()
        d_hraw[0] = 0.0  # replaced sample carries no gradient
    d_htf = dsp.istft_vjp(
        tape.full_mag * tape.phasor, d_hraw, cfg, length=tape.length
    )
    d_mag = np.real(np.conj(d_htf) * tape.phasor)
    d_phases = np.real(np.conj(d_htf) * 1j * tape.full_mag * tape.phasor)
    lo, hi, t = _interp_weights(p.layout, cfg)
    d_band = _interpolate_vjp(tape.band_mag, tape.full_mag, d_mag, lo, hi, t)
    times = frame_times(cfg, p.n_frames)[:, None]
    d_weights = np.sum(d_band * tape.band_mag, axis=0) / p.weights
    d_decays = -np.sum(d_band * tape.band_mag * times, axis=0)
    return {"phases": d_phases, "weights": d_weights, "decays": d_decays}


# ---------------------------------------------------------------------------
# Subband convolution
# ---------------------------------------------------------------------------


def subband_convolve_arrays(hbar: np.ndarray, x_spec: np.ndarray) -> np.ndarray:
    """Per-bin convolution along the frame axis: out has M + N_h - 1 frames."""
    hbar = np.asarray(hbar, dtype=np.complex128)
    x_spec = np.asarray(x_spec, dtype=np.complex128)
    if hbar.shape[1] != x_spec.shape[1]:
        raise ConfigError("filter and signal spectrograms have different bin counts")
    out_frames = x_spec.shape[0] + hbar.shape[0] - 1
    p = scipy.fft.next_fast_len(out_frames)
    fh = np.fft.fft(hbar, n=p, axis=0)
    fx = np.fft.fft(x_spec, n=p, axis=0)
    return np.fft.ifft(fh * fx, axis=0)[:out_frames]


def subband_convolve(hbar: Spectrogram, x_spec: Spectrogram) -> Spectrogram:
    values = subband_convolve_arrays(hbar.values, x_spec.values)
    return Spectrogram(values, x_spec.config)


def _subband_convolve_vjp(
    hbar: np.ndarray, x_spec: np.ndarray, cot: np.ndarray, wrt: str
) -> np.ndarray:
    """Adjoint of the frame-axis convolution (cross-correlation with the
    conjugate of the fixed factor)."""
    out_frames = x_spec.shape[0] + hbar.shape[0] - 1
    p = scipy.fft.next_fast_len(out_frames)
    fu = np.fft.fft(np.asarray(cot, dtype=np.complex128), n=p, axis=0)
    if wrt == "x":
        other, keep = hbar, x_spec.shape[0]
    elif wrt == "h":
        other, keep = x_spec, hbar.shape[0]
    else:
        raise ValueError(wrt)
    fo = np.fft.fft(other, n=p, axis=0)
    return np.fft.ifft(fu * np.conj(fo), axis=0)[:keep]


# ---------------------------------------------------------------------------
# Full operator
# ---------------------------------------------------------------------------


@dataclass
class SignalPlan:
    """Signal-side transforms reused across applications with varying
    parameters (the optimizer's inner loop keeps the signal fixed)."""

    cfg: StftConfig
    n_frames: int
    pad: int
    redundancy: float
    x: np.ndarray
    x_padded: np.ndarray
    x_spec: np.ndarray
    fx: np.ndarray  # frame-axis FFT of x_spec at the convolution length
    conv_len: int
    out_frames: int
    h_frames: int
    out_len: int
    inner_len: int


def make_signal_plan(x: np.ndarray, cfg: StftConfig, n_frames: int) -> SignalPlan:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise ConfigError("operator input must be a non-empty 1-D signal")
    pad = cfg.win_length // 2
    redundancy = float(np.sum(cfg.window())) / cfg.hop
    x_padded = np.concatenate([np.zeros(pad), x, np.zeros(pad)])
    x_spec = dsp.stft_array(x_padded, cfg)
    h_len = rir_length(cfg, n_frames)
    h_frames = cfg.n_frames(h_len + 2 * pad)
    out_frames = x_spec.shape[0] + h_frames - 1
    conv_len = scipy.fft.next_fast_len(out_frames)
    fx = scipy.fft.fft(x_spec, n=conv_len, axis=0, workers=-1)
    out_len = x.size + h_len - 1
    return SignalPlan(
        cfg, n_frames, pad, redundancy, x, x_padded, x_spec, fx, conv_len,
        out_frames, h_frames, out_len, out_len + 2 * pad,
    )


@dataclass
class FilterPrep:
    """Assembled filter plus its analysis, shareable across signal plans."""

    assemble: _AssembleTape
    pad: int
    redundancy: float
    h_padded: np.ndarray
    h_spec: np.ndarray


def prepare_filter(
    params: RirParams, cfg: StftConfig, use_min_phase: bool = True
) -> FilterPrep:
    tape_a = _assemble_with_tape(params, cfg, use_min_phase)
    pad = cfg.win_length // 2
    redundancy = float(np.sum(cfg.window())) / cfg.hop
    h_padded = np.concatenate([np.zeros(pad), tape_a.h_unit, np.zeros(pad)])
    h_spec = dsp.stft_array(h_padded, cfg) / redundancy
    return FilterPrep(tape_a, pad, redundancy, h_padded, h_spec)


@dataclass
class ApplyTape:
    prep: FilterPrep
    plan: SignalPlan
    fh: np.ndarray
    y_spec: np.ndarray


def apply_prepared(prep: FilterPrep, plan: SignalPlan):
    fh = scipy.fft.fft(prep.h_spec, n=plan.conv_len, axis=0, workers=-1)
    y_spec = scipy.fft.ifft(fh * plan.fx, axis=0, workers=-1)[: plan.out_frames]
    y_inner = dsp.istft_array(y_spec, plan.cfg, length=plan.inner_len)
    return y_inner[2 * plan.pad :], ApplyTape(prep, plan, fh, y_spec)


def apply_with_tape(
    params: RirParams,
    x: np.ndarray,
    cfg: StftConfig,
    use_min_phase: bool = True,
    plan: Optional[SignalPlan] = None,
):
    # Both operands are padded by half a window on each side so every true
    # sample sits at full analysis redundancy, and the filter spectrum is
    # divided by that redundancy; the subband product then reproduces the
    # time-domain convolution exactly away from machine precision.
    if plan is None:
        plan = make_signal_plan(x, cfg, params.n_frames)
    prep = prepare_filter(params, cfg, use_min_phase)
    return apply_prepared(prep, plan)


def apply_operator(
    params: RirParams,
    x: Waveform,
    cfg: Optional[StftConfig] = None,
    use_min_phase: bool = True,
) -> Waveform:
    """Reverberate ``x``: output has ``len(x) + rir_length - 1`` samples."""
    cfg = cfg or StftConfig(sample_rate=x.sample_rate)
    y, _ = apply_with_tape(params, x.samples, cfg, use_min_phase)
    return Waveform(y, cfg.sample_rate)


def _apply_vjp_yspec(tape: ApplyTape, cot_y: np.ndarray) -> np.ndarray:
    plan = tape.plan
    cot_inner = np.concatenate([np.zeros(2 * plan.pad), cot_y])
    return dsp.istft_vjp(tape.y_spec, cot_inner, plan.cfg, length=plan.inner_len)


def apply_vjp_x(tape: ApplyTape, cot_y: np.ndarray) -> np.ndarray:
    """Gradient with respect to the input signal."""
    plan = tape.plan
    d_yspec = _apply_vjp_yspec(tape, cot_y)
    fu = scipy.fft.fft(d_yspec, n=plan.conv_len, axis=0, workers=-1)
    d_xspec = scipy.fft.ifft(fu * np.conj(tape.fh), axis=0, workers=-1)[
        : plan.x_spec.shape[0]
    ]
    d_xpad = dsp.stft_vjp(plan.x_padded, d_xspec, plan.cfg)
    return d_xpad[plan.pad : plan.pad + plan.x.size]


def apply_vjp_to_filter(tape: ApplyTape, cot_y: np.ndarray) -> np.ndarray:
    """Cotangent on the unit-onset RIR (the assemble back-pass is linear, so
    contributions from several costs can be summed before finishing)."""
    plan, prep = tape.plan, tape.prep
    d_yspec = _apply_vjp_yspec(tape, cot_y)
    fu = scipy.fft.fft(d_yspec, n=plan.conv_len, axis=0, workers=-1)
    d_hspec = scipy.fft.ifft(fu * np.conj(plan.fx), axis=0, workers=-1)[
        : plan.h_frames
    ]
    d_hpad = dsp.stft_vjp(prep.h_padded, d_hspec / prep.redundancy, plan.cfg)
    return d_hpad[prep.pad : prep.pad + prep.assemble.h_unit.size]


def apply_vjp_params(tape: ApplyTape, cot_y: np.ndarray) -> dict:
    """Gradients with respect to phases, weights, and decays."""
    return _assemble_vjp_from_h(tape.prep.assemble, apply_vjp_to_filter(tape, cot_y))


def render_rir(
    params: RirParams,
    cfg: Optional[StftConfig] = None,
    use_min_phase: bool = True,
) -> Waveform:
    """Time-domain RIR estimate: the operator applied to a unit impulse."""
    cfg = cfg or StftConfig()
    y, _ = apply_with_tape(params, np.array([1.0]), cfg, use_min_phase)
    return Waveform(y[: rir_length(cfg, params.n_frames)], cfg.sample_rate)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def params_to_json(params: RirParams) -> str:
    phases = np.ascontiguousarray(params.phases, dtype="<f8")
    doc = {
        "band_centers": list(params.layout.centers()),
        "w_db": [20.0 * math.log10(w) for w in params.weights],
        "alpha": list(params.decays),
        "n_frames": params.n_frames,
        "phases": base64.b64encode(phases.tobytes()).decode("ascii"),
    }
    return json.dumps(doc)


def params_from_json(text: str) -> RirParams:
    doc = json.loads(text)
    n_frames = int(doc["n_frames"])
    raw = base64.b64decode(doc["phases"])
    flat = np.frombuffer(raw, dtype="<f8")
    if flat.size % n_frames != 0:
        raise ConfigError("phase payload size inconsistent with n_frames")
    phases = flat.reshape(n_frames, flat.size // n_frames).astype(np.float64)
    weights = np.array([10.0 ** (db / 20.0) for db in doc["w_db"]])
    return RirParams(
        phases,
        weights,
        np.asarray(doc["alpha"], dtype=np.float64),
        BandLayout(tuple(float(c) for c in doc["band_centers"])),
        n_frames,
    )
