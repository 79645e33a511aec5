"""Blind dereverberation and room-acoustics estimation by diffusion posterior sampling."""

from .errors import (
    BridgeError,
    ConfigError,
    DegenerateRirError,
    DereverbError,
    NumericError,
)

__version__ = "0.1.0"


def __getattr__(name):
    # Late imports keep `import dereverb` light; the heavy numerics load on
    # first use of the public entry points.
    if name in ("Waveform", "Spectrogram", "StftConfig"):
        from . import dsp

        return getattr(dsp, name)
    if name in ("DiffusionSchedule", "run_blind", "run_informed"):
        from . import sampler

        return getattr(sampler, name)
    if name == "wpe_dereverb":
        from .wpe import wpe_dereverb

        return wpe_dereverb
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


__all__ = [
    "BridgeError",
    "ConfigError",
    "DegenerateRirError",
    "DereverbError",
    "NumericError",
    "DiffusionSchedule",
    "Spectrogram",
    "StftConfig",
    "Waveform",
    "run_blind",
    "run_informed",
    "wpe_dereverb",
    "__version__",
]
