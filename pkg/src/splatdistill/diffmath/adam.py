"""Adam optimizer with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..exceptions import GradError
from .tensor import DTYPE, Tensor


@dataclass
class AdamState:
    """Per-parameter moment buffers; ``step`` counts completed updates."""

    lr: float
    m: np.ndarray = None
    v: np.ndarray = None
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    scratch: np.ndarray = None  # reusable work buffer, not optimizer state

    @staticmethod
    def for_param(p: Tensor, lr: float) -> "AdamState":
        return AdamState(
            lr=lr,
            m=np.zeros(p.data.shape, dtype=DTYPE),
            v=np.zeros(p.data.shape, dtype=DTYPE),
        )


def adam_step(p: Tensor, state: AdamState) -> None:
    """One in-place Adam update; clears the parameter's grad afterwards.

    Runs through a single scratch buffer to avoid temporaries on the
    multi-megabyte generator layers.
    """
    if p.grad is None:
        raise GradError(f"adam_step: parameter {p.name or '<unnamed>'} has no grad")
    g = p.grad
    state.step += 1
    if state.scratch is None or state.scratch.shape != g.shape:
        state.scratch = np.empty_like(g)
    buf = state.scratch
    np.multiply(g, DTYPE(1.0 - state.beta1), out=buf)
    state.m *= DTYPE(state.beta1)
    state.m += buf
    np.multiply(g, g, out=buf)
    buf *= DTYPE(1.0 - state.beta2)
    state.v *= DTYPE(state.beta2)
    state.v += buf
    c1 = 1.0 / (1.0 - state.beta1**state.step)
    c2 = 1.0 / (1.0 - state.beta2**state.step)
    np.sqrt(state.v, out=buf)
    buf *= DTYPE(np.sqrt(c2))
    buf += DTYPE(state.eps)
    np.divide(state.m, buf, out=buf)
    buf *= DTYPE(state.lr * c1)
    p.data -= buf
    p.grad = None


@dataclass
class Adam:
    """Convenience wrapper applying ``adam_step`` to a parameter list."""

    params: list
    lr: float
    states: dict = field(default_factory=dict)

    def step(self) -> None:
        for p in self.params:
            st = self.states.get(id(p))
            if st is None:
                st = AdamState.for_param(p, self.lr)
                self.states[id(p)] = st
            adam_step(p, st)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
