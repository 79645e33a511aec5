"""Reverse-diffusion engine with measurement guidance.

The noise schedule follows the warped power discretization with a final step
to zero; stepping is stochastic Euler-Heun (per-step noise churn, two score
evaluations per step except the last).  Guidance adds the likelihood score
``-zeta * grad C`` to the prior score, with ``zeta`` normalizing the applied
gradient to a fixed norm; it is computed once per step at the churned noise
level and reused in the corrector leg.

Blind runs interleave the inner filter-parameter optimization between the
denoising estimate and the guidance evaluation, warm-starting parameters and
optimizer moments across steps.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
import scipy.signal

from . import dsp, objective, operator
from .dsp import StftConfig
from .errors import ConfigError, NumericError
from .operator import BandLayout, RirParams, apply_vjp_x, apply_with_tape
from .priors import ScoreModel, denoiser_vjp
from .rir_opt import AdamConfig, AdamState, optimize_rir
from .wpe import WpeConfig, wpe_dereverb_array

EPS_GUARD = 1e-12


@dataclass(frozen=True)
class DiffusionSchedule:
    """Noise-level schedule and sampler knobs."""

    t_max: float = 0.5
    t_min: float = 1e-4
    rho: float = 10.0
    n_steps: int = 200
    s_churn: float = 50.0
    s_noise: float = 1.0
    zeta_scale: float = 0.6
    reg_sigma_min: float = 5e-4
    reg_sigma_max: float = 1e-2

    def __post_init__(self):
        if self.n_steps < 2:
            raise ConfigError("schedule needs at least two steps")
        if not (self.t_max > self.t_min > 0):
            raise ConfigError("schedule requires t_max > t_min > 0")

    def sigmas(self) -> np.ndarray:
        return karras_schedule(self.t_max, self.t_min, self.rho, self.n_steps)

    def reg_sigmas(self) -> np.ndarray:
        """Regularizer noise levels: same discretization, clipped range."""
        return np.clip(self.sigmas(), self.reg_sigma_min, self.reg_sigma_max)

    def churn_gamma(self) -> float:
        if self.s_churn <= 0:
            return 0.0
        return min(self.s_churn / self.n_steps, math.sqrt(2.0) - 1.0)


def karras_schedule(t_max: float, t_min: float, rho: float, n: int) -> np.ndarray:
    """Warped power interpolation from t_max down to t_min (n values)."""
    if n < 2:
        raise ConfigError("schedule needs at least two levels")
    steps = np.arange(n) / (n - 1)
    inv = 1.0 / rho
    out = (t_max**inv + steps * (t_min**inv - t_max**inv)) ** rho
    # the formula's endpoints are t_max and t_min exactly; pin them against
    # pow round-trip error
    out[0] = t_max
    out[-1] = t_min
    return out


def zeta(grad_norm: float, length: int, scale: float = 0.6) -> float:
    """Guidance scaling: the applied gradient gets norm ``sqrt(length)*scale``."""
    if grad_norm <= EPS_GUARD:
        raise NumericError("guidance gradient norm under the guard threshold")
    return math.sqrt(length) * scale / grad_norm


def posterior_step(
    x: np.ndarray,
    sigma: float,
    sigma_next: float,
    score: np.ndarray,
    guidance: np.ndarray,
) -> np.ndarray:
    """Euler leg of the reverse update: x - sigma (sigma_next - sigma)(s + g)."""
    return x - sigma * (sigma_next - sigma) * (score + guidance)


# ---------------------------------------------------------------------------
# Measurement operators (forward model + adjoint wrt the signal)
# ---------------------------------------------------------------------------


class ConvolutionMeasurement:
    """Fixed time-domain filter: the informed forward model."""

    def __init__(self, h: np.ndarray):
        self.h = np.asarray(h, dtype=np.float64)
        if self.h.ndim != 1 or self.h.size == 0:
            raise ConfigError("filter must be a non-empty 1-D signal")

    def forward(self, x: np.ndarray):
        return scipy.signal.fftconvolve(x, self.h, mode="full"), x.size

    def vjp_x(self, ctx: int, cot: np.ndarray) -> np.ndarray:
        full = scipy.signal.fftconvolve(cot, self.h[::-1], mode="full")
        return full[self.h.size - 1 : self.h.size - 1 + ctx]


class OperatorMeasurement:
    """Parametric subband filter at fixed parameters (one guidance step)."""

    def __init__(self, params: RirParams, cfg: StftConfig, use_min_phase: bool = True):
        self.params = params
        self.cfg = cfg
        self.use_min_phase = use_min_phase

    def forward(self, x: np.ndarray):
        y, tape = apply_with_tape(self.params, x, self.cfg, self.use_min_phase)
        return y, tape

    def vjp_x(self, ctx, cot: np.ndarray) -> np.ndarray:
        return apply_vjp_x(ctx, cot)


def likelihood_gradient(
    x_t: np.ndarray,
    sigma: float,
    y: np.ndarray,
    model: ScoreModel,
    measure,
    cfg: StftConfig,
    data_rms: Optional[float] = None,
    score: Optional[np.ndarray] = None,
):
    """Gradient of the measurement cost with respect to the diffusion state.

    Chains the denoiser (exact Jacobian when the model provides one, identity
    fallback otherwise), the RMS constraint, the forward model, and the
    compressed-spectrogram cost.  Returns (gradient, cost, denoised estimate
    after the RMS constraint).
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    if score is None:
        score = model.score(x_t, sigma)
    x0 = x_t + sigma**2 * score
    rescaled = data_rms is not None and dsp.rms(x0) > 0.0
    x0c = dsp.rescale_rms_array(x0, data_rms) if rescaled else x0
    y_hat, ctx = measure.forward(x0c)
    value, grad_y = objective.cost_and_grad(y, y_hat, cfg)
    grad_x0c = measure.vjp_x(ctx, grad_y)
    grad_x0 = (
        dsp.rescale_rms_vjp(x0, grad_x0c, data_rms) if rescaled else grad_x0c
    )
    grad_xt = denoiser_vjp(model, x_t, sigma, grad_x0)
    return grad_xt, value, x0c


def warm_init(
    y: np.ndarray,
    length: int,
    schedule: DiffusionSchedule,
    rng: np.random.Generator,
    wpe_cfg: Optional[WpeConfig] = None,
    use_wpe: bool = True,
):
    """Noised rough estimate to start reverse diffusion from.

    The mean is the linear-prediction dereverb of the measurement (or the
    truncated measurement itself with ``use_wpe=False``); the perturbation
    has the schedule's initial noise level.
    """
    y = np.asarray(y, dtype=np.float64)
    if use_wpe:
        x_init = wpe_dereverb_array(y, wpe_cfg or WpeConfig())[:length]
    else:
        x_init = y[:length].copy()
    x_t = x_init + schedule.t_max * rng.standard_normal(length)
    return x_t, x_init


# ---------------------------------------------------------------------------
# End-to-end drivers
# ---------------------------------------------------------------------------


@dataclass
class InformedResult:
    speech: np.ndarray
    trace: List[dict]
    x_init: np.ndarray


@dataclass
class BlindResult:
    speech: np.ndarray
    params: RirParams
    trace: List[dict]
    x_init: np.ndarray


def _check_finite(x: np.ndarray, trace: List[dict], where: str):
    if not np.all(np.isfinite(x)):
        err = NumericError(f"non-finite state during {where}")
        err.trace = trace
        raise err


def _guidance(
    x, sigma_hat, y, model, measure, cfg, data_rms, score, zeta_scale
):
    """(guidance vector, cost, zeta) with the guard-skip convention."""
    grad, value, _ = likelihood_gradient(
        x, sigma_hat, y, model, measure, cfg, data_rms, score=score
    )
    gnorm = float(np.linalg.norm(grad))
    if gnorm <= EPS_GUARD:
        return None, value, None
    z = zeta(gnorm, x.size, zeta_scale)
    return -z * grad, value, z


def run_informed(
    y: np.ndarray,
    h: np.ndarray,
    model: ScoreModel,
    schedule: DiffusionSchedule = DiffusionSchedule(),
    seed: int = 0,
    cfg: Optional[StftConfig] = None,
    wpe_cfg: Optional[WpeConfig] = None,
    use_wpe: bool = True,
    guidance_scale: float = 1.0,
) -> InformedResult:
    """Posterior sampling with a known room filter."""
    cfg = cfg or StftConfig()
    y = np.asarray(y, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    length = y.size - h.size + 1
    if length < 1:
        raise ConfigError("measurement shorter than the filter")
    _require_finite_input(y)
    ss = np.random.SeedSequence(seed)
    rng_warm, rng_churn = [np.random.default_rng(s) for s in ss.spawn(2)]
    x, x_init = warm_init(y, length, schedule, rng_warm, wpe_cfg, use_wpe)
    measure = ConvolutionMeasurement(h)
    trace: List[dict] = []
    x = _reverse_loop(
        x, y, model, schedule, cfg, rng_churn, measure, trace,
        guidance_scale=guidance_scale, inner=None,
    )
    return InformedResult(speech=x, trace=trace, x_init=x_init)


def run_blind(
    y: np.ndarray,
    model: ScoreModel,
    schedule: DiffusionSchedule = DiffusionSchedule(),
    seed: int = 0,
    cfg: Optional[StftConfig] = None,
    n_frames: int = operator.DEFAULT_N_FRAMES,
    layout: Optional[BandLayout] = None,
    n_inner: int = 10,
    adam_cfg: AdamConfig = AdamConfig(),
    use_min_phase: bool = True,
    use_regularizer: bool = True,
    wpe_cfg: Optional[WpeConfig] = None,
    use_wpe: bool = True,
    guidance_scale: float = 1.0,
    snapshot_dir: Optional[str] = None,
) -> BlindResult:
    """Joint dereverberation and filter estimation from the measurement alone.

    ``snapshot_dir`` dumps the filter parameters as JSON after every step.
    """
    cfg = cfg or StftConfig()
    y = np.asarray(y, dtype=np.float64)
    h_len = operator.rir_length(cfg, n_frames)
    length = y.size - h_len + 1
    if length < 1:
        raise ConfigError(
            f"measurement must be longer than the modeled filter ({h_len} samples)"
        )
    _require_finite_input(y)
    ss = np.random.SeedSequence(seed)
    rng_warm, rng_churn, rng_reg, rng_phase = [
        np.random.default_rng(s) for s in ss.spawn(4)
    ]
    x, x_init = warm_init(y, length, schedule, rng_warm, wpe_cfg, use_wpe)
    params = operator.init_rir_params(cfg, layout, n_frames, rng_phase)
    adam_state = AdamState.for_params(params)
    reg_sigmas = schedule.reg_sigmas()
    trace: List[dict] = []
    state = {"params": params, "adam": adam_state}

    if snapshot_dir is not None:
        os.makedirs(snapshot_dir, exist_ok=True)

    def inner(x0_hat: np.ndarray, i: int):
        state["params"], state["adam"], _ = optimize_rir(
            state["params"], x0_hat, y, n_inner, float(reg_sigmas[i]), rng_reg,
            cfg, state["adam"], adam_cfg, use_min_phase, use_regularizer,
        )
        if snapshot_dir is not None:
            path = os.path.join(snapshot_dir, f"step_{schedule.n_steps - 1 - i:05d}.json")
            with open(path, "w") as fh:
                fh.write(operator.params_to_json(state["params"]))
        return OperatorMeasurement(state["params"], cfg, use_min_phase)

    x = _reverse_loop(
        x, y, model, schedule, cfg, rng_churn, None, trace,
        guidance_scale=guidance_scale, inner=inner,
    )
    return BlindResult(speech=x, params=state["params"], trace=trace, x_init=x_init)


def _require_finite_input(y: np.ndarray):
    if not np.all(np.isfinite(y)):
        raise NumericError("measurement contains non-finite samples")


def _reverse_loop(
    x, y, model, schedule, cfg, rng_churn, measure, trace, guidance_scale, inner
):
    sigmas = np.concatenate([schedule.sigmas(), [0.0]])
    gamma = schedule.churn_gamma()
    n = schedule.n_steps
    data_rms = model.data_rms
    for i in range(n):
        sigma, sigma_next = float(sigmas[i]), float(sigmas[i + 1])
        if gamma > 0.0:
            sigma_hat = sigma * (1.0 + gamma)
            x = x + math.sqrt(sigma_hat**2 - sigma**2) * schedule.s_noise * (
                rng_churn.standard_normal(x.size)
            )
        else:
            sigma_hat = sigma
        score = model.score(x, sigma_hat)
        x0_hat = x + sigma_hat**2 * score
        if data_rms is not None and dsp.rms(x0_hat) > 0.0:
            x0_hat = dsp.rescale_rms_array(x0_hat, data_rms)
        step_measure = inner(x0_hat, i) if inner is not None else measure
        guidance, cost_val, z = None, None, None
        if guidance_scale != 0.0:
            guidance, cost_val, z = _guidance(
                x, sigma_hat, y, model, step_measure, cfg, data_rms, score,
                schedule.zeta_scale * guidance_scale,
            )
        g = guidance if guidance is not None else np.zeros_like(x)
        d = -sigma_hat * (score + g)
        x_next = x + (sigma_next - sigma_hat) * d
        if sigma_next > 0.0:
            score2 = model.score(x_next, sigma_next)
            d2 = -sigma_next * (score2 + g)
            x_next = x + (sigma_next - sigma_hat) * 0.5 * (d + d2)
        _check_finite(x_next, trace, f"step {n - 1 - i}")
        trace.append(
            {
                "step": n - 1 - i,
                "sigma": sigma,
                "cost": cost_val,
                "zeta": z,
                "rms": dsp.rms(x_next),
                "guided": guidance is not None,
            }
        )
        x = x_next
    return x


def trace_to_ndjson(trace: List[dict]) -> str:
    """One JSON record per line, in step order."""
    return "\n".join(json.dumps(rec) for rec in trace) + "\n"
