"""Adam optimizer and batch-size learning-rate scaling policies.

The optimizer operates on the flattened parameter vector (the same layout the
ring collective averages), so replicas that feed it identical averaged
gradients stay bit-identical. Hyperparameter defaults are the standard Adam
values: beta1=0.9, beta2=0.999, eps=1e-8.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class NonFiniteGradientError(ValueError):
    """A gradient contained NaN/Inf; the message names the offending tensor."""


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, dtype="float32", **hyper) -> "AdamState":
        return cls(m=np.zeros(n, dtype=dtype), v=np.zeros(n, dtype=dtype), **hyper)


def adam_step(
    params: np.ndarray,
    grads: np.ndarray,
    state: AdamState,
    lr: float,
    layout=None,
) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update on flat vectors.

    Returns (new_params, new_state); inputs are not mutated. `layout` is an
    optional list of (name, start, stop, shape) slices used only to name the
    tensor in the non-finite-gradient error.
    """
    if params.shape != grads.shape:
        raise ValueError(f"params shape {params.shape} != grads shape {grads.shape}")
    if lr < 0:
        raise ValueError("lr must be >= 0")
    if not np.all(np.isfinite(grads)):
        bad = int(np.flatnonzero(~np.isfinite(grads))[0])
        where = f"flat index {bad}"
        if layout:
            for name, a, b, _ in layout:
                if a <= bad < b:
                    where = f"tensor {name} (flat index {bad})"
                    break
        raise NonFiniteGradientError(f"non-finite gradient in {where}")

    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * (grads * grads)
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new_params = params - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = AdamState(
        m=m, v=v, t=t, beta1=state.beta1, beta2=state.beta2, eps=state.eps
    )
    return new_params.astype(params.dtype, copy=False), new_state


@dataclass
class LrPolicy:
    """Base learning rate plus the batch-size scaling rule applied to it.

    mode "linear" multiplies the base rate by the batch-size increase factor
    k, mode "sqrt" by sqrt(k), and "fixed" ignores k. With warmup_steps > 0
    the multiplier ramps linearly from 1 up to its target so training starts
    at base_lr; beyond the ramp the rate is constant.
    """

    base_lr: float = 1.2e-3
    mode: str = "fixed"
    batch_scale_k: int = 1
    warmup_steps: int = 0

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.mode not in ("fixed", "linear", "sqrt"):
            raise ValueError("mode must be fixed, linear, or sqrt")
        if self.batch_scale_k < 1:
            raise ValueError("batch_scale_k must be a positive integer")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")

    @property
    def scaled_lr(self) -> float:
        if self.mode == "linear":
            return self.base_lr * self.batch_scale_k
        if self.mode == "sqrt":
            return self.base_lr * math.sqrt(self.batch_scale_k)
        return self.base_lr


def effective_lr(policy: LrPolicy, step: int) -> float:
    """Learning rate at a given step under the policy's warm-up ramp."""
    if step < 0:
        raise ValueError("step must be >= 0")
    target = policy.scaled_lr
    if policy.warmup_steps > 0 and step < policy.warmup_steps:
        frac = step / policy.warmup_steps
        return policy.base_lr + (target - policy.base_lr) * frac
    return target
