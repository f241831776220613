"""Adam optimizer and the three-phase learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffcore import Parameter


def lr_at(iteration: int, policy) -> float:
    """Learning rate at ``iteration`` under the three-phase schedule:
    linear warmup from 0 to the peak over the first warmup fraction of
    iterations, constant at the peak through the constant fraction, then
    linear decay to 0 at the final iteration. Continuous everywhere.
    """
    total = policy.total_iters
    if not 0 <= iteration <= total:
        raise ValueError(f"iteration {iteration} outside [0, {total}]")
    peak = policy.peak_lr
    warm_end = policy.warmup_frac * total
    const_end = (policy.warmup_frac + policy.const_frac) * total
    if iteration <= warm_end:
        return peak * iteration / warm_end if warm_end > 0 else peak
    if iteration <= const_end:
        return peak
    return peak * (total - iteration) / (total - const_end)


@dataclass
class AdamState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    step: int = 0


def init_adam_state(params: list[Parameter]) -> AdamState:
    return AdamState(
        m=[np.zeros_like(p.value) for p in params],
        v=[np.zeros_like(p.value) for p in params],
    )


def adam_step(
    params: list[Parameter],
    grads,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """One bias-corrected Adam update in place. Frozen parameters are left
    untouched (their moment buffers do not advance either). Pass
    ``grads=None`` to read each parameter's accumulated gradient."""
    if grads is None:
        grads = [p.grad for p in params]
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if not p.trainable:
            continue
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.node.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


class Adam:
    """Stateful wrapper: zero grads, backprop, then ``step(lr)``."""

    def __init__(self, params: list[Parameter], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.state = init_adam_state(self.params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def step(self, lr: float):
        adam_step(self.params, None, self.state, lr, self.beta1, self.beta2, self.eps)

    def zero_grads(self):
        for p in self.params:
            p.zero_grad()
