"""Score-model abstraction and analytic priors.

Sign convention used throughout the package: ``score(x, sigma)`` is the
gradient of the log marginal density of the data corrupted with Gaussian
noise of standard deviation ``sigma``, so one-step denoising is
``x0_hat = x + sigma**2 * score(x, sigma)``.

Analytic priors (isotropic Gaussian, Gaussian mixture) give exact scores and
exact score Jacobians; they stand in for a trained network at desk scale and
anchor every sampler test to closed forms.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
from scipy.special import logsumexp

from .errors import ConfigError


class ScoreModel:
    """Interface: a score function plus optional extras used by the sampler.

    ``data_rms`` is the average RMS level the sampler constrains denoised
    estimates to (None disables the constraint).  ``vjp_score`` (if not
    None) maps a cotangent through the score Jacobian at (x, sigma); when a
    model cannot provide it the sampler falls back to an identity Jacobian
    for the denoiser.
    """

    data_rms: Optional[float] = None
    vjp_score: Optional[Callable[[np.ndarray, float, np.ndarray], np.ndarray]] = None

    def score(self, x: np.ndarray, sigma: float) -> np.ndarray:
        raise NotImplementedError


@dataclass
class GaussianPrior(ScoreModel):
    """Isotropic Gaussian prior N(mean, variance * I)."""

    mean: Union[float, np.ndarray] = 0.0
    variance: float = 1.0
    data_rms: Optional[float] = None

    def __post_init__(self):
        if self.variance <= 0:
            raise ConfigError("Gaussian prior variance must be positive")

    def score(self, x: np.ndarray, sigma: float) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return (self.mean - x) / (self.variance + sigma**2)

    def vjp_score(self, x: np.ndarray, sigma: float, cotangent: np.ndarray) -> np.ndarray:
        return -np.asarray(cotangent, dtype=np.float64) / (self.variance + sigma**2)

    def denoiser_gain(self, sigma: float) -> float:
        """Exact d(x0_hat)/dx factor for this prior (scalar times identity)."""
        return self.variance / (self.variance + sigma**2)


@dataclass
class GaussianMixturePrior(ScoreModel):
    """Mixture of isotropic Gaussians with shared dimensionality."""

    means: np.ndarray = field(default_factory=lambda: np.zeros((1, 1)))
    variances: np.ndarray = field(default_factory=lambda: np.ones(1))
    weights: Optional[np.ndarray] = None
    data_rms: Optional[float] = None

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.variances = np.atleast_1d(np.asarray(self.variances, dtype=np.float64))
        n = self.means.shape[0]
        if self.weights is None:
            self.weights = np.full(n, 1.0 / n)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.variances.shape != (n,) or self.weights.shape != (n,):
            raise ConfigError("component count mismatch between means/variances/weights")
        if np.any(self.variances <= 0):
            raise ConfigError("mixture variances must be positive")
        if abs(self.weights.sum() - 1.0) > 1e-9 or np.any(self.weights < 0):
            raise ConfigError("mixture weights must be a probability vector")

    def _responsibilities(self, x: np.ndarray, sigma: float):
        x = np.asarray(x, dtype=np.float64)
        v = self.variances + sigma**2  # (C,)
        diff = x[None, :] - self.means  # (C, L)
        sq = np.sum(diff**2, axis=1)
        logp = np.log(self.weights) - 0.5 * (
            x.size * np.log(2.0 * np.pi * v) + sq / v
        )
        r = np.exp(logp - logsumexp(logp))
        return r, diff, v

    def log_density(self, x: np.ndarray, sigma: float) -> float:
        x = np.asarray(x, dtype=np.float64)
        v = self.variances + sigma**2
        diff = x[None, :] - self.means
        sq = np.sum(diff**2, axis=1)
        logp = np.log(self.weights) - 0.5 * (
            x.size * np.log(2.0 * np.pi * v) + sq / v
        )
        return float(logsumexp(logp))

    def score(self, x: np.ndarray, sigma: float) -> np.ndarray:
        r, diff, v = self._responsibilities(x, sigma)
        return -np.sum((r / v)[:, None] * diff, axis=0)

    def vjp_score(self, x: np.ndarray, sigma: float, cotangent: np.ndarray) -> np.ndarray:
        # Hessian of the log density applied to the cotangent:
        # J = -sum_i r_i/v_i I + sum_i r_i g_i g_i^T - s s^T,  g_i = (mu_i-x)/v_i
        u = np.asarray(cotangent, dtype=np.float64)
        r, diff, v = self._responsibilities(x, sigma)
        g = -diff / v[:, None]  # (C, L)
        s = np.sum(r[:, None] * g, axis=0)
        out = -np.sum(r / v) * u
        out += g.T @ (r * (g @ u))
        out -= s * (s @ u)
        return out

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        c = rng.choice(len(self.weights), p=self.weights)
        return self.means[c] + np.sqrt(self.variances[c]) * rng.standard_normal(
            self.means.shape[1]
        )


def tweedie_denoise(x: np.ndarray, sigma: float, model: ScoreModel) -> np.ndarray:
    """Posterior-mean estimate of the clean signal from a noised state."""
    x = np.asarray(x, dtype=np.float64)
    if sigma < 0:
        raise ConfigError("noise level must be nonnegative")
    if sigma == 0.0:
        return x.copy()
    return x + sigma**2 * model.score(x, sigma)


def denoiser_vjp(
    model: ScoreModel, x: np.ndarray, sigma: float, cotangent: np.ndarray
) -> np.ndarray:
    """Cotangent through d(x0_hat)/dx; identity fallback without vjp_score."""
    u = np.asarray(cotangent, dtype=np.float64)
    if model.vjp_score is None or sigma == 0.0:
        return u.copy()
    return u + sigma**2 * model.vjp_score(x, sigma, u)


def karras_weight(sigma: float, sigma_data: float = 1.0) -> float:
    """Default score-matching loss weight: the denoiser-space weighting
    (sigma^2 + sigma_data^2) / (sigma * sigma_data)^2 expressed against
    score-space residuals (multiplied by sigma^4)."""
    return sigma**2 * (sigma**2 + sigma_data**2) / sigma_data**2


def dsm_loss(
    model: ScoreModel,
    x0: np.ndarray,
    sigma: float,
    noise: np.ndarray,
    weight: Union[None, float, Callable[[float], float]] = None,
) -> float:
    """Denoising score-matching objective for one (x0, sigma, noise) triple.

    The target is the score of the Gaussian transition kernel at
    ``x = x0 + sigma * noise``, namely ``-noise / sigma``.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if sigma <= 0:
        raise ConfigError("dsm_loss requires a positive noise level")
    if callable(weight):
        lam = float(weight(sigma))
    elif weight is None:
        lam = karras_weight(sigma, model.data_rms or 1.0)
    else:
        lam = float(weight)
    x = x0 + sigma * noise
    resid = model.score(x, sigma) + noise / sigma
    return lam * float(np.sum(resid**2))
