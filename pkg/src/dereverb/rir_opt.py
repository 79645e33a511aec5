"""Inner-loop filter-parameter estimation: Adam on the reconstruction cost
plus a stochastic smoothing regularizer, with box clamping after every step.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from . import objective, operator
from .dsp import StftConfig
from .errors import NumericError
from .operator import RirParams, apply_vjp_params, apply_with_tape, clamp_params


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8


@dataclass
class AdamState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: RirParams) -> "AdamState":
        zeros = {
            "phases": np.zeros_like(params.phases),
            "weights": np.zeros_like(params.weights),
            "decays": np.zeros_like(params.decays),
        }
        return cls(m=zeros, v={k: z.copy() for k, z in zeros.items()})


def adam_step(
    state: AdamState,
    values: Dict[str, np.ndarray],
    grads: Dict[str, np.ndarray],
    cfg: AdamConfig = AdamConfig(),
) -> Tuple[AdamState, Dict[str, np.ndarray]]:
    """One bias-corrected Adam update; returns fresh state and values."""
    t = state.step + 1
    new_m, new_v, out = {}, {}, {}
    for key, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {key}")
        m = cfg.beta1 * state.m[key] + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * state.v[key] + (1.0 - cfg.beta2) * g**2
        m_hat = m / (1.0 - cfg.beta1**t)
        v_hat = v / (1.0 - cfg.beta2**t)
        out[key] = values[key] - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
        new_m[key], new_v[key] = m, v
    return AdamState(m=new_m, v=new_v, step=t), out


def _params_dict(params: RirParams) -> Dict[str, np.ndarray]:
    return {
        "phases": params.phases,
        "weights": params.weights,
        "decays": params.decays,
    }


def _params_from_dict(d: Dict[str, np.ndarray], like: RirParams) -> RirParams:
    return RirParams(d["phases"], d["weights"], d["decays"], like.layout, like.n_frames)


def noise_regularizer(
    params: RirParams,
    sigma_prime: float,
    noise: np.ndarray,
    cfg: StftConfig,
    use_min_phase: bool = True,
    plan=None,
) -> Tuple[float, Dict[str, np.ndarray]]:
    """Compressed-spectrogram distance between the rendered filter and a
    detached noisy copy; the gradient flows only through the live branch,
    injecting multiplicative noise into the parameter gradients."""
    if sigma_prime == 0.0:
        zero = {k: np.zeros_like(v) for k, v in _params_dict(params).items()}
        return 0.0, zero
    impulse = np.array([1.0])
    h_hat, tape = apply_with_tape(params, impulse, cfg, use_min_phase, plan=plan)
    noisy = h_hat + sigma_prime * np.asarray(noise, dtype=np.float64)
    value, grad_h = objective.cost_and_grad(noisy, h_hat, cfg)
    grads = apply_vjp_params(tape, grad_h)
    return value, grads


def optimize_rir(
    params: RirParams,
    x0_hat: np.ndarray,
    y: np.ndarray,
    n_iters: int,
    sigma_prime: float,
    rng: np.random.Generator,
    cfg: StftConfig,
    adam_state: Optional[AdamState] = None,
    adam_cfg: AdamConfig = AdamConfig(),
    use_min_phase: bool = True,
    use_regularizer: bool = True,
) -> Tuple[RirParams, AdamState, float]:
    """Run ``n_iters`` Adam steps on the joint filter objective.

    The Adam moments persist across calls via ``adam_state`` (warm start);
    regularizer noise is redrawn each iteration from ``rng``.  Returns the
    clamped parameters, the optimizer state, and the last reconstruction
    cost.
    """
    if adam_state is None:
        adam_state = AdamState.for_params(params)
    x0_hat = np.asarray(x0_hat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    h_len = operator.rir_length(cfg, params.n_frames)
    # the signal, measurement, and impulse stay fixed across iterations
    plan = operator.make_signal_plan(x0_hat, cfg, params.n_frames)
    target = objective.CostTarget(y, plan.out_len, cfg)
    reg_plan = operator.make_signal_plan(np.array([1.0]), cfg, params.n_frames)
    last_cost = np.nan
    for _ in range(n_iters):
        # one filter assembly serves both the reconstruction term and the
        # regularizer; their cotangents on the unit-onset RIR add up before
        # the (linear) assemble back-pass
        prep = operator.prepare_filter(params, cfg, use_min_phase)
        y_hat, tape = operator.apply_prepared(prep, plan)
        recon, grad_y = target.cost_and_grad(y_hat)
        if not np.isfinite(recon):
            raise NumericError("non-finite reconstruction cost in filter update")
        d_filter = operator.apply_vjp_to_filter(tape, grad_y)
        if use_regularizer and sigma_prime > 0.0:
            v = rng.standard_normal(h_len)
            h_hat, tape_r = operator.apply_prepared(prep, reg_plan)
            noisy = h_hat + sigma_prime * v
            _, grad_h = objective.cost_and_grad(noisy, h_hat, cfg)
            d_filter = d_filter + operator.apply_vjp_to_filter(tape_r, grad_h)
        grads = operator._assemble_vjp_from_h(prep.assemble, d_filter)
        adam_state, values = adam_step(adam_state, _params_dict(params), grads, adam_cfg)
        params = clamp_params(_params_from_dict(values, params))
        last_cost = recon
    return params, adam_state, last_cost
