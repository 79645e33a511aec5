import numpy as np
import pytest

from dereverb.dsp import StftConfig


@pytest.fixture(scope="session")
def small_cfg():
    """Desk-scale grid: 64-sample window, hop 16, 128-point FFT, 65 bins."""
    return StftConfig(sample_rate=16000, window_ms=4.0, hop_ms=1.0, pad_factor=2.0)


@pytest.fixture(scope="session")
def default_cfg():
    return StftConfig()


def rel_err(a, b):
    a = np.asarray(a, dtype=np.complex128)
    b = np.asarray(b, dtype=np.complex128)
    denom = np.linalg.norm(b.ravel())
    if denom == 0.0:
        return np.linalg.norm(a.ravel())
    return np.linalg.norm((a - b).ravel()) / denom


def pairing(u, v):
    """Real inner product <u, v> = Re(sum(conj(u) v)) used by all adjoints."""
    u = np.asarray(u).ravel()
    v = np.asarray(v).ravel()
    return float(np.real(np.sum(np.conj(u) * v)))


def dirderiv(f, x, v, eps=1e-6):
    """Central-difference directional derivative of f at x along v."""
    return (f(x + eps * v) - f(x - eps * v)) / (2.0 * eps)
