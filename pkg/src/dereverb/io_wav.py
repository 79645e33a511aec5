"""Mono WAV reading/writing via scipy (PCM16/24-in-32/float32).

Float32 round trips losslessly; integer PCM is scaled to [-1, 1).
"""

from __future__ import annotations

import os

import numpy as np
import scipy.io.wavfile

from .dsp import Waveform
from .errors import ConfigError

_INT_SCALES = {np.dtype(np.int16): 32768.0, np.dtype(np.int32): 2147483648.0}


def read_wav(path: str, downmix: bool = False) -> Waveform:
    if not os.path.exists(path):
        raise ConfigError(f"input file not found: {path}")
    try:
        rate, data = scipy.io.wavfile.read(path)
    except ValueError as exc:
        raise ConfigError(f"cannot read WAV file {path}: {exc}") from exc
    if data.ndim == 2:
        if not downmix:
            raise ConfigError(
                f"{path} has {data.shape[1]} channels; pass --downmix to average them"
            )
        data = data.astype(np.float64).mean(axis=1)
    if data.dtype in _INT_SCALES:
        samples = data.astype(np.float64) / _INT_SCALES[data.dtype]
    elif data.dtype == np.uint8:
        samples = (data.astype(np.float64) - 128.0) / 128.0
    else:
        samples = data.astype(np.float64)
    return Waveform(samples, int(rate))


def write_wav(path: str, x: Waveform, fmt: str = "float32"):
    if fmt == "float32":
        scipy.io.wavfile.write(path, x.sample_rate, x.samples.astype(np.float32))
    elif fmt == "pcm16":
        clipped = np.clip(x.samples, -1.0, 32767.0 / 32768.0)
        scipy.io.wavfile.write(
            path, x.sample_rate, np.round(clipped * 32768.0).astype(np.int16)
        )
    else:
        raise ConfigError(f"unknown WAV format {fmt!r}")
