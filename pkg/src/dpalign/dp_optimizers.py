"""DP-SGD, DP-Adam and DP-AdamW.

One step of DP-AdamW, with t counted from 1::

    g_bar = g / max(1, ||g|| / C)                        clip
    g_til = g_bar + n,   n ~ N(0, s^2)                   privatize
    m     = b1 m + (1 - b1) g_til
    v     = b2 v + (1 - b2) g_til^2
    v_til = max(v - (1 - b2^t) s^2, 0)                   noise-variance correction
    theta = (1 - lr wd) theta
            - lr m / sqrt(v_til + eps) * sqrt(1 - b2^t) / (1 - b1^t)

where s = sigma C for batch clipping and s = sigma C / B for per-example
clipping. DP-Adam is the same update with wd forced to 0; DP-SGD is
``theta - lr g_til``.
"""

from __future__ import annotations

import dataclasses
from collections.abc import Callable, Mapping
from dataclasses import dataclass
from typing import Literal

import numpy as np

from .tensor_core import GradSet, ParamSet, global_l2_norm, per_example_l2_norms, zeros_like

Variant = Literal["dp_sgd", "dp_adam", "dp_adamw"]
ClippingMode = Literal["batch", "per_sample"]

MAX_STEPS = 2**53


class OptimizerError(RuntimeError):
    pass


@dataclass(frozen=True)
class DPOptimizerConfig:
    variant: Variant = "dp_adamw"
    learning_rate: float | Callable[[int], float] = 5e-5
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    clip_norm: float = 0.1
    noise_multiplier: float = 0.0
    denom_epsilon: float = 1e-8
    clipping_mode: ClippingMode = "batch"
    # zero-budget sentinel: drop the clipped signal, keep only the noise
    pure_noise: bool = False

    def __post_init__(self):
        if self.variant not in ("dp_sgd", "dp_adam", "dp_adamw"):
            raise ValueError(f"unknown optimizer variant {self.variant!r}")
        if self.clipping_mode not in ("batch", "per_sample"):
            raise ValueError(f"unknown clipping_mode {self.clipping_mode!r}")
        if not callable(self.learning_rate) and not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.beta1 < 1.0:
            raise ValueError("beta1 must lie in [0, 1)")
        if not 0.0 <= self.beta2 < 1.0:
            raise ValueError("beta2 must lie in [0, 1)")
        if not self.clip_norm > 0:
            raise ValueError("clip_norm must be positive")
        if not (self.noise_multiplier >= 0 and np.isfinite(self.noise_multiplier)):
            raise ValueError("noise_multiplier must be finite and nonnegative")
        if not self.denom_epsilon > 0:
            raise ValueError("denom_epsilon must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")

    def lr_at(self, t: int) -> float:
        return float(self.learning_rate(t)) if callable(self.learning_rate) else float(self.learning_rate)

    @property
    def effective_weight_decay(self) -> float:
        return 0.0 if self.variant == "dp_adam" else self.weight_decay

    def replace(self, **changes) -> "DPOptimizerConfig":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class OptimizerState:
    m: GradSet
    v: GradSet
    t: int = 0

    @classmethod
    def zeros(cls, params: Mapping[str, np.ndarray]) -> "OptimizerState":
        return cls(m=zeros_like(params), v=zeros_like(params), t=0)


@dataclass(frozen=True)
class StepInfo:
    """Diagnostics from one step: pre-clip norm(s) and whether clipping bound."""

    grad_norm: float
    clip_fraction: float
    noise_std: float


def clip_gradient(g: Mapping[str, np.ndarray], C: float) -> GradSet:
    """Scale ``g`` by 1 / max(1, ||g|| / C)."""
    if not C > 0:
        raise ValueError("clip norm C must be positive")
    g = g if isinstance(g, GradSet) else GradSet(g)
    if not g.all_finite():
        raise OptimizerError("cannot clip a non-finite gradient")
    norm = global_l2_norm(g)
    factor = max(1.0, norm / C)
    if factor == 1.0:
        return g
    return g.map(lambda v: v / factor)


def clip_per_example(g: Mapping[str, np.ndarray], C: float) -> tuple[GradSet, np.ndarray]:
    """Clip each example of a stacked GradSet to norm C and average.

    Returns the averaged gradient and the per-example pre-clip norms.
    """
    if not C > 0:
        raise ValueError("clip norm C must be positive")
    g = g if isinstance(g, GradSet) else GradSet(g)
    if not g.all_finite():
        raise OptimizerError("cannot clip a non-finite gradient")
    norms = per_example_l2_norms(g)
    factors = 1.0 / np.maximum(1.0, norms / C)

    def scale_mean(v):
        return np.tensordot(factors, v, axes=(0, 0)) / v.shape[0]

    return g.map(scale_mean), norms


def privatize_gradient(
    g_clipped: Mapping[str, np.ndarray], sigma: float, C: float, rng: np.random.Generator
) -> GradSet:
    """Add N(0, (sigma C)^2) noise to every coordinate."""
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    g_clipped = g_clipped if isinstance(g_clipped, GradSet) else GradSet(g_clipped)
    return _add_noise(g_clipped, sigma * C, rng)


def _add_noise(g: GradSet, std: float, rng: np.random.Generator) -> GradSet:
    if std == 0:
        return g
    return g.map(lambda v: v + rng.normal(0.0, std, size=v.shape))


def corrected_second_moment(
    v: Mapping[str, np.ndarray], t: int, beta2: float, sigma: float, C: float
) -> GradSet:
    """Subtract the expected noise contribution (1 - b2^t) (sigma C)^2, clamped at 0."""
    if t < 1:
        raise ValueError("t must be >= 1")
    v = v if isinstance(v, GradSet) else GradSet(v)
    if sigma == 0:
        return v
    bias = (1.0 - beta2**t) * (sigma * C) ** 2
    return v.map(lambda x: np.maximum(x - bias, 0.0))


def noise_std(config: DPOptimizerConfig, batch_size: int) -> float:
    std = config.noise_multiplier * config.clip_norm
    return std / batch_size if config.clipping_mode == "per_sample" else std


def privatized_gradient(
    grads: Mapping[str, np.ndarray], config: DPOptimizerConfig, rng: np.random.Generator
) -> tuple[GradSet, StepInfo]:
    """Clip + noise according to ``config.clipping_mode``.

    In per-sample mode ``grads`` carries a leading example axis.
    """
    if config.clipping_mode == "per_sample":
        batch_size = next(iter(grads.values())).shape[0]
        clipped, norms = clip_per_example(grads, config.clip_norm)
        grad_norm = float(np.mean(norms))
        clip_fraction = float(np.mean(norms > config.clip_norm))
    else:
        batch_size = 1
        grad_norm = global_l2_norm(grads)
        clipped = clip_gradient(grads, config.clip_norm)
        clip_fraction = float(grad_norm > config.clip_norm)
    std = noise_std(config, batch_size)
    if config.pure_noise:
        clipped = clipped.map(np.zeros_like)
    noisy = _add_noise(clipped, std, rng)
    return noisy, StepInfo(grad_norm=grad_norm, clip_fraction=clip_fraction, noise_std=std)


def apply_update(
    params: Mapping[str, np.ndarray],
    g_tilde: GradSet,
    state: OptimizerState,
    config: DPOptimizerConfig,
    noise_sd: float,
) -> tuple[ParamSet, OptimizerState]:
    """Moment updates and parameter step from an already privatized gradient."""
    if state.t + 1 >= MAX_STEPS:
        raise OverflowError("optimizer step counter overflow")
    t = state.t + 1
    lr = config.lr_at(t)
    new = {}
    if config.variant == "dp_sgd":
        for name in sorted(params):
            new[name] = params[name] - lr * g_tilde[name]
        m, v = state.m, state.v
    else:
        b1, b2 = config.beta1, config.beta2
        wd = config.effective_weight_decay
        m = state.m.zip_map(g_tilde, lambda m_, g: b1 * m_ + (1.0 - b1) * g)
        v = state.v.zip_map(g_tilde, lambda v_, g: b2 * v_ + (1.0 - b2) * g * g)
        # noise_sd already folds C (and 1/B); pass it as sigma with C = 1
        v_til = corrected_second_moment(v, t, b2, noise_sd, 1.0)
        scale = np.sqrt(1.0 - b2**t) / (1.0 - b1**t)
        eps = config.denom_epsilon
        for name in sorted(params):
            step = m[name] / np.sqrt(v_til[name] + eps) * scale
            new[name] = (1.0 - wd * lr) * params[name] - lr * step
    for name, value in new.items():
        if not np.all(np.isfinite(value)):
            raise OptimizerError(f"non-finite update for parameter {name!r} at step {t}")
    return ParamSet(new), OptimizerState(m=m, v=v, t=t)


def step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: OptimizerState,
    config: DPOptimizerConfig,
    rng: np.random.Generator,
) -> tuple[ParamSet, OptimizerState]:
    """clip -> noise -> moments -> corrected second moment -> decoupled-decay update."""
    params_out, state_out, _ = step_with_info(params, grads, state, config, rng)
    return params_out, state_out


def step_with_info(params, grads, state, config, rng):
    g_tilde, info = privatized_gradient(grads, config, rng)
    params_out, state_out = apply_update(params, g_tilde, state, config, info.noise_std)
    return params_out, state_out, info


class DPOptimizer:
    """Stateful convenience wrapper owning its config, moments and RNG."""

    def __init__(self, params: Mapping[str, np.ndarray], config: DPOptimizerConfig, seed: int | np.random.Generator = 0):
        self.config = config
        self.state = OptimizerState.zeros(params)
        self.rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.last_info: StepInfo | None = None

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> ParamSet:
        new_params, self.state, self.last_info = step_with_info(params, grads, self.state, self.config, self.rng)
        return new_params
