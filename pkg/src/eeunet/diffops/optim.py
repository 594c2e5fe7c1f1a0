"""Learnable parameters and the Adam optimiser."""
from dataclasses import dataclass, field

import numpy as np

from ..errors import EmptyGradient


@dataclass
class ParamTensor:
    name: str
    value: np.ndarray
    grad: np.ndarray = None
    touched: bool = False

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)

    def accumulate(self, g):
        self.grad += g
        self.touched = True

    def zero_grad(self):
        self.grad[...] = 0
        self.touched = False


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, state):
    """One bias-corrected Adam update over ``params``; zeroes their grads.

    Raises EmptyGradient when a parameter received no gradient since the
    last step, which means it is not wired into the backward pass.
    """
    missing = [p.name for p in params if not p.touched]
    if missing:
        raise EmptyGradient(f"parameters without gradient: {missing[:5]}{'...' if len(missing) > 5 else ''}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p in params:
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.value)
            state.v[p.name] = np.zeros_like(p.value)
        v = state.v[p.name]
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        step = (state.lr * (m / c1)) / (np.sqrt(v / c2) + state.eps)
        p.value -= step.astype(p.value.dtype, copy=False)
        p.zero_grad()
    return params, state
