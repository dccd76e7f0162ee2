"""Latent-conditioned tri-plane generator and teacher/student cloning.

The generator is a plain MLP mapping a 16-dim latent to the stacked
plane tensor. This stands in for a full style-based convolutional
backbone: the distillation method only needs a learnable producer of
tri-planes, and at desk scale an MLP is the smallest thing that works.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffmath as dm
from .exceptions import DimensionError, RangeError
from .mlp import MLP
from .triplane import TriPlane

LATENT_DIM = 16


def validate_latent(z) -> np.ndarray:
    z = np.asarray(z, dtype=dm.DTYPE).reshape(-1)
    if z.shape[0] != LATENT_DIM:
        raise DimensionError(f"latent must have dim {LATENT_DIM}, got {z.shape[0]}")
    if not np.isfinite(z).all():
        raise ValueError("latent contains non-finite values")
    return z


def random_latent(rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(-1.0, 1.0, size=LATENT_DIM).astype(dm.DTYPE)


class Generator:
    """MLP latent -> [3, R, R, F] tri-plane."""

    def __init__(self, rng: np.random.Generator, resolution: int = 32,
                 channels: int = 16, hidden: int = 128, name: str = "generator"):
        self.resolution = resolution
        self.channels = channels
        out_dim = 3 * resolution * resolution * channels
        self.mlp = MLP([LATENT_DIM, hidden, hidden, out_dim], rng, name=name)

    def __call__(self, z) -> TriPlane:
        return generate_triplane(self, z)

    def parameters(self) -> list:
        return self.mlp.parameters()

    def set_trainable(self, flag: bool) -> None:
        self.mlp.set_trainable(flag)

    def copy(self) -> "Generator":
        dup = Generator.__new__(Generator)
        dup.resolution = self.resolution
        dup.channels = self.channels
        dup.mlp = self.mlp.copy()
        return dup

    def state_dict(self) -> dict:
        return self.mlp.state_dict()

    def load_state_dict(self, state: dict) -> None:
        self.mlp.load_state_dict(state)


def generate_triplane(g: Generator, z) -> TriPlane:
    """Deterministic tri-plane from a latent; differentiable wrt weights."""
    return generate_triplane_batch(g, [z])[0]


def generate_triplane_batch(g: Generator, zs) -> list:
    """Tri-planes for several latents from one batched generator pass.

    One GEMM instead of per-latent GEMVs; the wide output layer is
    memory-bound, so batching amortizes the weight traffic.
    """
    zb = np.stack([validate_latent(z) for z in zs], axis=0)
    flat = g.mlp(dm.tensor(zb))
    r, f = g.resolution, g.channels
    out = dm.reshape(flat, (len(zs), 3, r, r, f))
    return [TriPlane(dm.select_row(out, i)) for i in range(len(zs))]


@dataclass
class BackboneState:
    """Frozen teacher generator plus a trainable student clone."""

    teacher: Generator
    student: Generator


def clone_backbone(teacher: Generator) -> BackboneState:
    """Deep-copy the teacher; the copy trains, the original stays frozen."""
    student = teacher.copy()
    teacher.set_trainable(False)
    student.set_trainable(True)
    return BackboneState(teacher=teacher, student=student)


def interpolate_latents(z0, z1, t: float) -> np.ndarray:
    if not (0.0 <= t <= 1.0):
        raise RangeError(f"interpolation t={t} outside [0, 1]")
    z0 = validate_latent(z0)
    z1 = validate_latent(z1)
    return ((1.0 - t) * z0 + t * z1).astype(dm.DTYPE)
