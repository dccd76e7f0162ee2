"""Small fully connected networks with GELU hidden layers."""

from __future__ import annotations

import numpy as np

from . import diffmath as dm
from .exceptions import DimensionError


class MLP:
    """Linear stack with GELU on hidden layers and a linear output.

    Weights are fan-in-scaled uniform; ``zero_init_last`` zeroes the output
    layer so the network is exactly constant-zero at start.
    """

    def __init__(self, dims, rng: np.random.Generator, name: str = "mlp",
                 zero_init_last: bool = False):
        if len(dims) < 2:
            raise DimensionError("MLP needs at least input and output dims")
        self.dims = list(dims)
        self.name = name
        self.weights = []
        self.biases = []
        n_layers = len(dims) - 1
        for li in range(n_layers):
            fan_in, fan_out = dims[li], dims[li + 1]
            if zero_init_last and li == n_layers - 1:
                w = np.zeros((fan_in, fan_out), dtype=dm.DTYPE)
            else:
                bound = np.sqrt(6.0 / fan_in)
                w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            self.weights.append(dm.param(w, name=f"{name}.w{li}"))
            self.biases.append(dm.param(np.zeros(fan_out), name=f"{name}.b{li}"))

    def __call__(self, x: dm.Tensor) -> dm.Tensor:
        h = x
        last = len(self.weights) - 1
        for li, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = dm.affine(h, w, b)
            if li != last:
                h = dm.gelu(h)
        return h

    def parameters(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def named_parameters(self) -> dict:
        return {p.name: p for p in self.parameters()}

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag

    def copy(self) -> "MLP":
        dup = MLP.__new__(MLP)
        dup.dims = list(self.dims)
        dup.name = self.name
        dup.weights = [dm.param(w.data.copy(), name=w.name) for w in self.weights]
        dup.biases = [dm.param(b.data.copy(), name=b.name) for b in self.biases]
        return dup

    def state_dict(self) -> dict:
        return {p.name: p.data for p in self.parameters()}

    def load_state_dict(self, state: dict) -> None:
        for p in self.parameters():
            if p.name not in state:
                raise DimensionError(f"missing parameter {p.name}")
            arr = np.asarray(state[p.name], dtype=dm.DTYPE)
            if arr.shape != p.data.shape:
                raise DimensionError(
                    f"{p.name}: checkpoint shape {arr.shape} != {p.data.shape}"
                )
            p.data = arr.copy()
