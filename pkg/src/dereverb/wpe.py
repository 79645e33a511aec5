"""Single-channel weighted-prediction-error dereverberation in the STFT domain.

Per frequency bin, an iteratively reweighted delayed linear prediction
filter estimates the late reverberation from past frames and subtracts it;
the weights are the current dereverberated frame powers, floored relative to
the per-bin mean so the whole procedure is gain-equivariant.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import dsp
from .dsp import StftConfig, Waveform
from .errors import ConfigError

# Relative power floor and diagonal loading for the normal equations.
_POWER_FLOOR = 1e-10
_DIAG_LOAD = 1e-10

# Bins per chunk: bounds the (bins, frames, taps) tap tensor memory.
_CHUNK = 64


@dataclass(frozen=True)
class WpeConfig:
    taps: int = 50
    delay: int = 2
    iterations: int = 5
    stft: StftConfig = field(default_factory=StftConfig)

    def __post_init__(self):
        if self.taps < 1 or self.delay < 1 or self.iterations < 1:
            raise ConfigError("taps, delay, and iterations must all be >= 1")


def _tap_tensor(z: np.ndarray, taps: int, delay: int) -> np.ndarray:
    """(bins, frames, taps) tensor of delayed past frames per bin."""
    k, m = z.shape
    padded = np.concatenate([np.zeros((k, delay + taps), dtype=z.dtype), z], axis=1)
    idx = np.arange(m)[:, None] + (taps - np.arange(taps))[None, :]
    return padded[:, idx]


def wpe_dereverb_array(y: np.ndarray, cfg: WpeConfig) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    spec = dsp.stft_array(y, cfg.stft)
    m = spec.shape[0]
    if m <= cfg.taps + cfg.delay:
        raise ConfigError(
            f"input too short for WPE: {m} frames <= taps+delay "
            f"({cfg.taps}+{cfg.delay})"
        )
    z = spec.T.copy()  # (bins, frames)
    out = np.empty_like(z)
    eye = np.eye(cfg.taps)
    for lo in range(0, z.shape[0], _CHUNK):
        zc = z[lo : lo + _CHUNK]
        taps = _tap_tensor(zc, cfg.taps, cfg.delay)
        d = zc.copy()
        for _ in range(cfg.iterations):
            power = np.abs(d) ** 2
            floor = _POWER_FLOOR * power.mean(axis=1, keepdims=True)
            lam = np.maximum(power, floor)
            w = np.zeros_like(lam)
            nz = lam > 0
            w[nz] = 1.0 / lam[nz]
            r = np.einsum("kmt,kms,km->kts", taps, np.conj(taps), w, optimize=True)
            p = np.einsum("kmt,km,km->kt", taps, np.conj(zc), w, optimize=True)
            trace = np.trace(r, axis1=1, axis2=2).real
            load = (_DIAG_LOAD * trace + 1e-100)[:, None, None] * eye[None]
            g = np.linalg.solve(r + load, p[:, :, None])[:, :, 0]
            d = zc - np.einsum("kt,kmt->km", np.conj(g), taps, optimize=True)
        out[lo : lo + _CHUNK] = d
    return dsp.istft_array(out.T, cfg.stft, length=y.size)


def wpe_dereverb(y: Waveform, cfg: WpeConfig | None = None) -> Waveform:
    """Dereverberate by delayed linear prediction; output length = input length."""
    cfg = cfg or WpeConfig(stft=StftConfig(sample_rate=y.sample_rate))
    if y.sample_rate != cfg.stft.sample_rate:
        raise ConfigError("waveform sample rate does not match WPE STFT config")
    return Waveform(wpe_dereverb_array(y.samples, cfg), y.sample_rate)
