"""AdamW with decoupled weight decay, global-norm clipping, token-indexed
warmup + cosine (or linear) decay schedule, and mask-aware updates.

The schedule is a function of tokens seen, not steps, so changing the batch
size does not change the curve. With masks present, gradients, moments, decay
and the update itself are all forced to zero at masked positions: a masked
weight stays exactly 0.0 for the whole sparse phase.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from .errors import ConfigError, NonFiniteError
from .model import GptModel
from .sparsity import MaskSet


@dataclass
class OptimizerConfig:
    peak_lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.1
    clip_global_norm: float = 1.0

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("betas must be in (0, 1)")
        if self.eps <= 0 or self.clip_global_norm <= 0:
            raise ConfigError("eps and clip_global_norm must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ScheduleConfig:
    total_tokens: float
    peak_lr: float
    warmup_tokens: float = 3.75e8
    final_lr_fraction: float = 0.1
    shape: str = "cosine"  # "cosine" for pre-training, "linear" for fine-tuning

    def __post_init__(self):
        if self.shape not in ("cosine", "linear"):
            raise ConfigError(f"unknown schedule shape {self.shape!r}")
        if self.warmup_tokens >= self.total_tokens:
            raise ConfigError("warmup_tokens must be < total_tokens")
        if not (0.0 <= self.final_lr_fraction <= 1.0):
            raise ConfigError("final_lr_fraction must be in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(sched: ScheduleConfig, tokens_seen: float) -> float:
    """Learning rate after ``tokens_seen`` tokens.

    Linear ramp 0 -> peak over the warmup, then decay from peak to
    final_lr_fraction * peak at total_tokens (cosine or linear), clamped at
    the floor beyond the budget.
    """
    if tokens_seen < 0:
        raise ValueError("tokens_seen must be >= 0")
    peak = sched.peak_lr
    if sched.warmup_tokens > 0 and tokens_seen < sched.warmup_tokens:
        return peak * tokens_seen / sched.warmup_tokens
    floor = sched.final_lr_fraction * peak
    span = sched.total_tokens - sched.warmup_tokens
    progress = (tokens_seen - sched.warmup_tokens) / span
    if progress <= 0.0:  # exact at the warmup boundary
        return peak
    if progress >= 1.0:  # exact at (and clamped beyond) the budget
        return floor
    if sched.shape == "cosine":
        return floor + (peak - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))
    return peak + (floor - peak) * progress


class OptState:
    """First/second moments per parameter plus step and token counters."""

    def __init__(self, model: GptModel):
        self.m = {k: np.zeros_like(p.value) for k, p in model.params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in model.params.items()}
        self.step = 0

    @classmethod
    def from_arrays(cls, model: GptModel, m, v, step: int) -> "OptState":
        st = cls(model)
        for k in st.m:
            st.m[k][...] = m[k]
            st.v[k][...] = v[k]
        st.step = step
        return st


def global_grad_norm(model: GptModel) -> float:
    sq = 0.0
    for p in model.params.values():
        g = p.grad
        sq += float(np.dot(g.ravel(), g.ravel()))
    return math.sqrt(sq)


def clip_gradients(model: GptModel, max_norm: float) -> float:
    """Scale all gradients so the global norm is <= max_norm; returns the
    pre-clip norm. Gradients already within the bound are left untouched."""
    norm = global_grad_norm(model)
    if norm > max_norm:
        scale = max_norm / norm
        for p in model.params.values():
            p.grad *= scale
    return norm


def step(
    model: GptModel,
    opt_cfg: OptimizerConfig,
    opt_state: OptState,
    lr: float,
    masks: MaskSet | None = None,
) -> float:
    """One AdamW update over all parameters; returns the pre-clip grad norm.

    w <- w - lr*wd*w - lr * m_hat / (sqrt(v_hat) + eps), with bias-corrected
    moments. Weight decay only touches parameters flagged for decay.
    """
    for name, p in model.params.items():
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteError(f"non-finite gradient in {name}")
    grad_norm = clip_gradients(model, opt_cfg.clip_global_norm)
    opt_state.step += 1
    t = opt_state.step
    bc1 = 1.0 - opt_cfg.beta1**t
    bc2 = 1.0 - opt_cfg.beta2**t
    for name, p in model.params.items():
        g = p.grad
        mask = masks.masks.get(name) if masks is not None else None
        if mask is not None:
            g = g * mask
        m = opt_state.m[name]
        v = opt_state.v[name]
        m *= opt_cfg.beta1
        m += (1.0 - opt_cfg.beta1) * g
        v *= opt_cfg.beta2
        v += (1.0 - opt_cfg.beta2) * g * g
        if mask is not None:
            # keep moments at masked positions exactly zero
            m *= mask
            v *= mask
        m_hat = m / bc1
        v_hat = v / bc2
        upd = lr * m_hat / (np.sqrt(v_hat) + opt_cfg.eps)
        if p.decay and opt_cfg.weight_decay:
            p.value -= lr * opt_cfg.weight_decay * p.value
        p.value -= upd
        if mask is not None:
            p.value *= mask
    return grad_norm
