"""Deterministic signal-processing primitives with hand-written adjoints.

Every differentiable operation here comes with a vector-Jacobian product
(VJP) so that scalar costs can be back-propagated through the fixed
operator/cost chain without a general autodiff framework.  All VJPs satisfy
the adjoint identity ``<f(x), u> = <x, vjp(f, x, u)>`` under the real inner
product ``<a, b> = Re(sum(conj(a) * b))``.

Computation is float64/complex128 throughout; 32-bit data is accepted at the
boundaries and widened.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import scipy.fft

from .errors import ConfigError, NumericError

DEFAULT_SAMPLE_RATE = 16_000

# Relative floor applied to |FFT| before the log inside minimum_phase;
# avoids -inf at spectral nulls.
_MINPHASE_FLOOR = 1e-8

# Window-sum-square below this relative threshold is treated as zero
# (uncovered samples at the extreme edges of the overlap-add grid).
_WSS_FLOOR = 1e-8


@dataclass
class Waveform:
    """A finite 1-D real signal with its sample rate in Hz."""

    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ConfigError("waveform must be a non-empty 1-D array")
        if not np.all(np.isfinite(self.samples)):
            raise NumericError("waveform contains non-finite samples")

    def __len__(self) -> int:
        return int(self.samples.size)

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class StftConfig:
    """Analysis/synthesis grid: Hann window, centered frames, zero-padded FFT.

    The FFT frame is ``pad_factor`` times the window length, i.e. with the
    default 2.0 half of every transformed frame is zeros (512-sample window,
    1024-point FFT, 513 bins at 16 kHz).
    """

    sample_rate: int = DEFAULT_SAMPLE_RATE
    window_ms: float = 32.0
    hop_ms: float = 8.0
    pad_factor: float = 2.0

    def __post_init__(self):
        if self.win_length % self.hop != 0:
            raise ConfigError("hop must divide the window length")
        if self.win_length < 2 * self.hop:
            raise ConfigError("window must overlap by at least half (win >= 2*hop)")
        if self.fft_size < self.win_length:
            raise ConfigError("pad_factor must be >= 1")

    @property
    def win_length(self) -> int:
        return int(round(self.sample_rate * self.window_ms / 1000.0))

    @property
    def hop(self) -> int:
        return int(round(self.sample_rate * self.hop_ms / 1000.0))

    @property
    def fft_size(self) -> int:
        return int(round(self.win_length * self.pad_factor))

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    def window(self) -> np.ndarray:
        n = np.arange(self.win_length)
        return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / self.win_length)

    def n_frames(self, n_samples: int) -> int:
        return max(1, int(math.ceil(n_samples / self.hop)))


@dataclass
class Spectrogram:
    """Complex time-frequency matrix, frames x bins, tied to its grid."""

    values: np.ndarray
    config: StftConfig = field(default_factory=StftConfig)
    n_samples: Optional[int] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.complex128)
        if self.values.ndim != 2:
            raise ConfigError("spectrogram must be a 2-D array")
        if self.values.shape[1] != self.config.n_bins:
            raise ConfigError(
                f"spectrogram has {self.values.shape[1]} bins, config expects "
                f"{self.config.n_bins}"
            )
        if not np.all(np.isfinite(self.values)):
            raise NumericError("spectrogram contains non-finite entries")

    @property
    def n_frames(self) -> int:
        return int(self.values.shape[0])


# ---------------------------------------------------------------------------
# STFT / iSTFT
#
# Frame m is centered at sample m*hop and stored zero-phase: the window
# center sits at FFT-buffer position 0 and earlier samples wrap to the upper
# half of the buffer.  Under this layout a per-bin product of two frames is
# a circular convolution of buffers that stays in the same convention, which
# is what makes subband filtering line up with the synthesis grid.  Synthesis
# overlap-adds the full FFT buffer (so content created in the zero-padded
# region by filtering is kept) and divides by the per-sample analysis-window
# sum; on consistent spectrograms the round trip is exact for every sample.
# ---------------------------------------------------------------------------


def _overlap_add(frames: np.ndarray, hop: int) -> np.ndarray:
    """Sum (m, f) frames at stride ``hop`` into a ((m-1)*hop + f) buffer."""
    m, f = frames.shape
    buf = np.zeros((m - 1) * hop + f)
    if f % hop == 0:
        for k in range(0, f, hop):
            buf[k : k + m * hop].reshape(m, hop)[...] += frames[:, k : k + hop]
    else:
        for i in range(m):
            buf[i * hop : i * hop + f] += frames[i]
    return buf


def _gather_strided(buf: np.ndarray, m: int, f: int, hop: int) -> np.ndarray:
    """Inverse access pattern of ``_overlap_add``: rows buf[i*hop : i*hop+f]."""
    out = np.empty((m, f))
    if f % hop == 0:
        for k in range(0, f, hop):
            out[:, k : k + hop] = buf[k : k + m * hop].reshape(m, hop)
    else:
        for i in range(m):
            out[i] = buf[i * hop : i * hop + f]
    return out


def _gather_frames(x: np.ndarray, n_frames: int, cfg: StftConfig) -> np.ndarray:
    """(n_frames, win_length) view of x around each frame center."""
    half = cfg.win_length // 2
    total = (n_frames - 1) * cfg.hop + cfg.win_length
    right = total - half - x.size
    if right < 0:
        raise ConfigError("frame grid shorter than signal")
    padded = np.concatenate([np.zeros(half), x, np.zeros(right)])
    return _gather_strided(padded, n_frames, cfg.win_length, cfg.hop)


def _roll_to_buffer(frames: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """Place windowed frames zero-phase into FFT buffers."""
    m = frames.shape[0]
    half = cfg.win_length // 2
    buf = np.zeros((m, cfg.fft_size))
    buf[:, : cfg.win_length - half] = frames[:, half:]
    buf[:, cfg.fft_size - half :] = frames[:, :half]
    return buf


def _buffer_to_frames(buf: np.ndarray, cfg: StftConfig) -> np.ndarray:
    half = cfg.win_length // 2
    frames = np.empty((buf.shape[0], cfg.win_length))
    frames[:, half:] = buf[:, : cfg.win_length - half]
    frames[:, :half] = buf[:, cfg.fft_size - half :]
    return frames


def stft_array(x: np.ndarray, cfg: StftConfig) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise ConfigError("stft input must be a non-empty 1-D array")
    m = cfg.n_frames(x.size)
    frames = _gather_frames(x, m, cfg) * cfg.window()[None, :]
    return scipy.fft.rfft(_roll_to_buffer(frames, cfg), axis=1, workers=-1)


def stft(x: Waveform, cfg: Optional[StftConfig] = None) -> Spectrogram:
    """Short-time Fourier transform on the centered, zero-phase Hann grid."""
    cfg = cfg or StftConfig(sample_rate=x.sample_rate)
    if x.sample_rate != cfg.sample_rate:
        raise ConfigError("waveform sample rate does not match STFT config")
    return Spectrogram(stft_array(x.samples, cfg), cfg, n_samples=len(x))


def _ola_grid(n_frames: int, cfg: StftConfig):
    """Timeline for full-buffer overlap-add: offset of sample 0 and length."""
    offset = cfg.fft_size // 2
    total = (n_frames - 1) * cfg.hop + cfg.fft_size
    return offset, total


@functools.lru_cache(maxsize=64)
def _window_sum(n_frames: int, cfg: StftConfig) -> np.ndarray:
    win = cfg.window()
    half = cfg.win_length // 2
    offset, total = _ola_grid(n_frames, cfg)
    tiled = np.broadcast_to(win, (n_frames, cfg.win_length))
    body = _overlap_add(np.ascontiguousarray(tiled), cfg.hop)
    wsum = np.zeros(total)
    start = offset - half
    wsum[start : start + body.size] = body
    wsum.setflags(write=False)
    return wsum


def istft_array(
    s: np.ndarray, cfg: StftConfig, length: Optional[int] = None
) -> np.ndarray:
    s = np.asarray(s, dtype=np.complex128)
    m = s.shape[0]
    if length is None:
        length = m * cfg.hop
    z = scipy.fft.irfft(s, n=cfg.fft_size, axis=1, workers=-1)
    half_fft = cfg.fft_size // 2
    rolled = np.concatenate([z[:, half_fft:], z[:, :half_fft]], axis=1)
    offset, total = _ola_grid(m, cfg)
    buf = _overlap_add(rolled, cfg.hop)  # starts at time -offset, length total
    wsum = _window_sum(m, cfg)
    good = wsum > _WSS_FLOOR * wsum.max()
    buf = np.where(good, buf / np.where(good, wsum, 1.0), 0.0)
    out = np.zeros(length)
    avail = min(length, total - offset)
    out[:avail] = buf[offset : offset + avail]
    return out


def istft(s: Spectrogram, length: Optional[int] = None) -> Waveform:
    """Full-buffer overlap-add inverse; exact on consistent spectrograms."""
    if length is None:
        length = s.n_samples
    return Waveform(istft_array(s.values, s.config, length), s.config.sample_rate)


def _rfft_adjoint(u: np.ndarray, n: int) -> np.ndarray:
    """Adjoint of ``rfft`` (last axis) under the real pairing."""
    full = np.zeros(u.shape[:-1] + (n,), dtype=np.complex128)
    full[..., : u.shape[-1]] = u
    return scipy.fft.ifft(full, axis=-1, workers=-1).real * n


def stft_vjp(x: np.ndarray, cotangent: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """Gradient of ``<stft(x), U>`` with respect to the length-len(x) signal."""
    x = np.asarray(x, dtype=np.float64)
    m = cfg.n_frames(x.size)
    buf_c = _rfft_adjoint(np.asarray(cotangent, dtype=np.complex128), cfg.fft_size)
    frames_c = _buffer_to_frames(buf_c, cfg) * cfg.window()[None, :]
    half = cfg.win_length // 2
    acc = _overlap_add(frames_c, cfg.hop)
    return acc[half : half + x.size]


def istft_vjp(
    s: np.ndarray, cotangent: np.ndarray, cfg: StftConfig, length: Optional[int] = None
) -> np.ndarray:
    """Cotangent on the spectrogram for a waveform cotangent of ``istft``."""
    s = np.asarray(s)
    m = s.shape[0]
    if length is None:
        length = m * cfg.hop
    cot = np.asarray(cotangent, dtype=np.float64)
    if cot.size != length:
        raise ConfigError("istft_vjp cotangent length mismatch")
    offset, total = _ola_grid(m, cfg)
    buf = np.zeros(total)
    avail = min(length, total - offset)
    buf[offset : offset + avail] = cot[:avail]
    wsum = _window_sum(m, cfg)
    good = wsum > _WSS_FLOOR * wsum.max()
    buf = np.where(good, buf / np.where(good, wsum, 1.0), 0.0)
    rolled = _gather_strided(buf, m, cfg.fft_size, cfg.hop)
    half_fft = cfg.fft_size // 2
    z_c = np.concatenate([rolled[:, half_fft:], rolled[:, :half_fft]], axis=1)
    # Adjoint of irfft: conjugate-pair bins count twice, DC/Nyquist once.
    n = cfg.fft_size
    out = scipy.fft.fft(z_c, axis=1, workers=-1)[:, : cfg.n_bins] / n
    hi = cfg.n_bins - 1 if n % 2 == 0 else cfg.n_bins
    out[:, 1:hi] *= 2.0
    return out


# ---------------------------------------------------------------------------
# Magnitude compression
# ---------------------------------------------------------------------------


def compress_array(s: np.ndarray, exponent: float = 2.0 / 3.0) -> np.ndarray:
    s = np.asarray(s, dtype=np.complex128)
    mag = np.abs(s)
    safe = np.where(mag > 0, mag, 1.0)
    # z |z|^(p-1) = |z|^p e^{j angle z}; exact 0 at z = 0
    return s * (safe ** (exponent - 1.0))


def compress(s: Spectrogram, exponent: float = 2.0 / 3.0) -> Spectrogram:
    """Raise magnitudes to ``exponent`` keeping phases; 0 maps to 0."""
    return replace(s, values=compress_array(s.values, exponent))


def compress_vjp(
    s: np.ndarray, cotangent: np.ndarray, exponent: float = 2.0 / 3.0
) -> np.ndarray:
    """VJP of ``compress``; the subgradient at 0 is defined as 0."""
    s = np.asarray(s, dtype=np.complex128)
    u = np.asarray(cotangent, dtype=np.complex128)
    mag = np.abs(s)
    nz = mag > 0
    safe = np.where(nz, mag, 1.0)
    phase = s / safe
    local = u * np.conj(phase)  # cotangent in the (radial, tangential) frame
    scaled = exponent * local.real + 1j * local.imag
    return np.where(nz, safe ** (exponent - 1.0) * scaled * phase, 0.0)


# ---------------------------------------------------------------------------
# Minimum phase
# ---------------------------------------------------------------------------


def _cepstral_fold(n: int) -> np.ndarray:
    """Fold window turning a real cepstrum into a causal (minimum-phase) one."""
    w = np.zeros(n)
    w[0] = 1.0
    if n % 2 == 0:
        w[1 : n // 2] = 2.0
        w[n // 2] = 1.0
    else:
        w[1 : (n + 1) // 2] = 2.0
    return w


def _minimum_phase_core(h: np.ndarray):
    n = h.size
    f = np.fft.fft(h)
    r = np.abs(f)
    rmax = r.max()
    if rmax == 0.0:
        raise NumericError("minimum phase of an all-zero signal is undefined")
    floor = _MINPHASE_FLOOR * rmax
    rf = np.maximum(r, floor)
    lm = np.log(rf)
    c = np.fft.ifft(lm)
    fold = _cepstral_fold(n)
    g = np.fft.fft(fold * c)
    fmin = np.exp(g)
    hmin = np.fft.ifft(fmin).real
    tape = (h, f, r, rf, fold, g, fmin)
    return hmin, tape


def minimum_phase_array(h: np.ndarray) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 1 or h.size == 0:
        raise ConfigError("minimum_phase input must be a non-empty 1-D array")
    return _minimum_phase_core(h)[0]


def minimum_phase(h: Waveform) -> Waveform:
    """Same-magnitude signal with all spectral phase lag removed.

    The phase is the negative Hilbert transform of the log magnitude along
    the frequency axis, computed by real-cepstrum folding (DC and Nyquist
    bins unfolded).  Magnitudes below 1e-8 of the peak are floored before the
    log.
    """
    return Waveform(minimum_phase_array(h.samples), h.sample_rate)


def minimum_phase_vjp(h: np.ndarray, cotangent: np.ndarray) -> np.ndarray:
    """Gradient of ``<minimum_phase(h), u>`` with respect to ``h``."""
    h = np.asarray(h, dtype=np.float64)
    u = np.asarray(cotangent, dtype=np.float64)
    _, (h, f, r, rf, fold, g, fmin) = _minimum_phase_core(h)
    n = h.size
    # hmin = Re(ifft(fmin)); adjoint(ifft) = fft/n, adjoint(Re) lifts to complex.
    d_fmin = np.fft.fft(u.astype(np.complex128)) / n
    # Fm = exp(G): holomorphic, adjoint multiplies by conj(exp(G)).
    d_g = d_fmin * np.conj(fmin)
    # G = fft(fold * ifft(lm)); adjoint(fft) = n*ifft, fold is self-adjoint.
    d_c = np.fft.ifft(d_g) * n * fold
    d_lm = (np.fft.fft(d_c) / n).real
    mask = r >= _MINPHASE_FLOOR * r.max()
    d_r = np.where(mask, d_lm / rf, 0.0)
    safe = np.where(r > 0, r, 1.0)
    d_f = d_r * f / safe
    return (np.fft.ifft(d_f) * n).real


# ---------------------------------------------------------------------------
# RMS utilities
# ---------------------------------------------------------------------------


def rms(x) -> float:
    samples = x.samples if isinstance(x, Waveform) else np.asarray(x, dtype=np.float64)
    return float(np.sqrt(np.mean(samples**2)))


def rescale_rms_array(x: np.ndarray, target: float) -> np.ndarray:
    if target <= 0:
        raise ConfigError("RMS target must be positive")
    x = np.asarray(x, dtype=np.float64)
    level = np.sqrt(np.mean(x**2))
    if level == 0.0:
        raise NumericError("cannot rescale an all-zero signal to a nonzero RMS")
    return x * (target / level)


def rescale_rms(x: Waveform, target: float) -> Waveform:
    """Scale ``x`` so that ``rms(result) == target``."""
    return Waveform(rescale_rms_array(x.samples, target), x.sample_rate)


def rescale_rms_vjp(x: np.ndarray, cotangent: np.ndarray, target: float) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    u = np.asarray(cotangent, dtype=np.float64)
    n = x.size
    level = np.sqrt(np.mean(x**2))
    if level == 0.0:
        raise NumericError("rescale_rms VJP undefined at the zero signal")
    scale = target / level
    # f(x) = c(x) x with c = target / rms(x);  J^T u = c u - t (x.u) x / (n rms^3)
    return scale * u - target * (x @ u) * x / (n * level**3)


# ---------------------------------------------------------------------------
# VJP registry
# ---------------------------------------------------------------------------

_VJPS = {
    "stft": stft_vjp,
    "istft": istft_vjp,
    "compress": compress_vjp,
    "minimum_phase": minimum_phase_vjp,
    "rescale_rms": rescale_rms_vjp,
}

_NAMES = {
    stft: "stft",
    stft_array: "stft",
    istft: "istft",
    istft_array: "istft",
    compress: "compress",
    compress_array: "compress",
    minimum_phase: "minimum_phase",
    minimum_phase_array: "minimum_phase",
    rescale_rms: "rescale_rms",
    rescale_rms_array: "rescale_rms",
}


def vjp(op, primal_input, cotangent, **kwargs):
    """Dispatch the registered adjoint for ``op`` at ``primal_input``.

    ``op`` may be the operation callable or its registry name.  Raises
    ``ConfigError`` for operations without a registered adjoint.
    """
    name = op if isinstance(op, str) else _NAMES.get(op)
    if name not in _VJPS:
        raise ConfigError(f"no VJP registered for operation {op!r}")
    return _VJPS[name](primal_input, cotangent, **kwargs)
