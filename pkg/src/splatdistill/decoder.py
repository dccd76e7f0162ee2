"""Map tri-plane features at sampled positions to raw splat attributes.

Three head arrangements:

* sequential — one MLP per attribute; each head sees the features plus
  every previously decoded raw attribute, in the order
  color -> opacity -> rotation -> scale -> position offset.
* parallel — a single MLP emits all fourteen raw channels at once.
* sequential_reversed — the same chaining with the attribute order
  inverted (offset first, color last).

Heads condition on raw (pre-activation) attributes, keeping the chain
free of double saturation. Every head's output layer starts at zero, so
a fresh decoder emits the neutral scene at the initial positions.
"""

from __future__ import annotations

from enum import Enum

import numpy as np

from . import diffmath as dm
from .exceptions import DimensionError
from .gsscene import GaussianScene, RawAttributes, assemble_scene
from .mlp import MLP
from .triplane import TriPlane, sample_features

HEAD_HIDDEN = 128
ATTR_WIDTHS = {"color": 3, "opacity": 1, "rotation": 4, "scale": 3, "offset": 3}
SEQUENTIAL_ORDER = ("color", "opacity", "rotation", "scale", "offset")
REVERSED_ORDER = tuple(reversed(SEQUENTIAL_ORDER))


class ArchVariant(str, Enum):
    SEQUENTIAL = "sequential"
    PARALLEL = "parallel"
    SEQUENTIAL_REVERSED = "sequential_reversed"


def _chain_order(variant: ArchVariant):
    return SEQUENTIAL_ORDER if variant is ArchVariant.SEQUENTIAL else REVERSED_ORDER


class SplatDecoder:
    """Decoder heads for one architecture variant."""

    def __init__(self, variant, channels: int, rng: np.random.Generator):
        self.variant = ArchVariant(variant)
        self.channels = channels
        self.heads: dict[str, MLP] = {}
        if self.variant is ArchVariant.PARALLEL:
            self.heads["all"] = MLP(
                [channels, HEAD_HIDDEN, HEAD_HIDDEN, HEAD_HIDDEN, 14],
                rng, name="head_all", zero_init_last=True,
            )
        else:
            in_dim = channels
            for attr in _chain_order(self.variant):
                self.heads[attr] = MLP(
                    [in_dim, HEAD_HIDDEN, HEAD_HIDDEN, HEAD_HIDDEN,
                     ATTR_WIDTHS[attr]],
                    rng, name=f"head_{attr}", zero_init_last=True,
                )
                in_dim += ATTR_WIDTHS[attr]

    def input_dims(self) -> dict:
        return {name: mlp.dims[0] for name, mlp in self.heads.items()}

    def parameters(self) -> list:
        out = []
        for mlp in self.heads.values():
            out.extend(mlp.parameters())
        return out

    def set_trainable(self, flag: bool) -> None:
        for mlp in self.heads.values():
            mlp.set_trainable(flag)

    def state_dict(self) -> dict:
        state = {}
        for mlp in self.heads.values():
            state.update(mlp.state_dict())
        return state

    def load_state_dict(self, state: dict) -> None:
        for mlp in self.heads.values():
            mlp.load_state_dict(state)


def decode_attributes(decoder: SplatDecoder, features: dm.Tensor) -> RawAttributes:
    """Raw attribute block for per-point features [N,F]."""
    if features.shape[-1] != decoder.channels:
        raise DimensionError(
            f"features have {features.shape[-1]} channels, decoder expects "
            f"{decoder.channels}"
        )
    if decoder.variant is ArchVariant.PARALLEL:
        return RawAttributes.from_block(decoder.heads["all"](features))
    outputs = {}
    h = features
    for attr in _chain_order(decoder.variant):
        outputs[attr] = decoder.heads[attr](h)
        h = dm.concat([h, outputs[attr]], axis=-1)
    return RawAttributes(**outputs)


def decode_scene(decoder: SplatDecoder, tp: TriPlane, init_positions,
                 scale_max: float = 0.05) -> GaussianScene:
    """Single forward pass from tri-plane to an explicit splat scene."""
    feats = sample_features(tp, init_positions)
    raw = decode_attributes(decoder, feats)
    return assemble_scene(raw, init_positions, scale_max=scale_max)
