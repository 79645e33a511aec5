"""Measurement-fidelity cost: mean squared distance between
magnitude-compressed spectrograms, with its waveform gradient.

The per-frame normalization uses the frame count of the shorter input before
zero-padding, which keeps the cost symmetric and makes the gradient exactly
invariant to trailing silence appended beyond the compared region.
"""

from __future__ import annotations

from typing import Tuple

import numpy as np

from . import dsp
from .dsp import StftConfig

COMPRESSION_EXPONENT = 2.0 / 3.0


def _pad_pair(u: np.ndarray, v: np.ndarray, cfg: StftConfig):
    # Extend the analysis grid half a window past the common end so frames
    # straddling the boundary are represented; appending further silence then
    # only adds frames that see zeros on both sides.
    n = max(u.size, v.size) + cfg.win_length // 2
    u = np.concatenate([u, np.zeros(n - u.size)])
    v = np.concatenate([v, np.zeros(n - v.size)])
    return u, v


def _norm_frames(u_len: int, v_len: int, cfg: StftConfig) -> int:
    return cfg.n_frames(min(u_len, v_len))


def cost(u: np.ndarray, v: np.ndarray, cfg: StftConfig) -> float:
    """Squared compressed-spectrogram distance, averaged over frames."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    m = _norm_frames(u.size, v.size, cfg)
    u, v = _pad_pair(u, v, cfg)
    su = dsp.compress_array(dsp.stft_array(u, cfg), COMPRESSION_EXPONENT)
    sv = dsp.compress_array(dsp.stft_array(v, cfg), COMPRESSION_EXPONENT)
    return float(np.sum(np.abs(su - sv) ** 2)) / m


def cost_spectrograms(su: np.ndarray, sv: np.ndarray, norm_frames: int) -> float:
    """Cost on pre-compressed spectrogram pairs (testing/diagnostics)."""
    return float(np.sum(np.abs(su - sv) ** 2)) / norm_frames


class CostTarget:
    """Precompressed reference for repeated cost evaluations against one
    target (the measurement stays fixed across optimizer iterations)."""

    def __init__(self, target: np.ndarray, estimate_len: int, cfg: StftConfig):
        target = np.asarray(target, dtype=np.float64)
        self.cfg = cfg
        self.estimate_len = estimate_len
        self.norm_frames = _norm_frames(target.size, estimate_len, cfg)
        t, e_probe = _pad_pair(target, np.zeros(estimate_len), cfg)
        self.common_len = e_probe.size
        self.compressed = dsp.compress_array(
            dsp.stft_array(t, cfg), COMPRESSION_EXPONENT
        )

    def cost_and_grad(self, estimate: np.ndarray) -> Tuple[float, np.ndarray]:
        estimate = np.asarray(estimate, dtype=np.float64)
        if estimate.size != self.estimate_len:
            raise ValueError("estimate length differs from the planned length")
        e = np.concatenate([estimate, np.zeros(self.common_len - estimate.size)])
        spec_e = dsp.stft_array(e, self.cfg)
        diff = dsp.compress_array(spec_e, COMPRESSION_EXPONENT) - self.compressed
        value = float(np.sum(diff.real**2 + diff.imag**2)) / self.norm_frames
        cot = (2.0 / self.norm_frames) * diff
        grad_full = dsp.stft_vjp(
            e, dsp.compress_vjp(spec_e, cot, COMPRESSION_EXPONENT), self.cfg
        )
        return value, grad_full[: self.estimate_len]


def cost_and_grad(
    target: np.ndarray, estimate: np.ndarray, cfg: StftConfig
) -> Tuple[float, np.ndarray]:
    """Cost and its gradient with respect to ``estimate``."""
    estimate = np.asarray(estimate, dtype=np.float64)
    return CostTarget(target, estimate.size, cfg).cost_and_grad(estimate)
