"""Explicit Gaussian splat scenes: attribute range mapping and covariance.

Raw (unbounded) decoder outputs become renderable attributes here:
sigmoid for color and opacity, a w-biased normalized quaternion for
rotation, and a bounded decreasing map
``scale = scale_max * exp(-softplus(raw))`` that keeps every splat's
extent in (0, scale_max]. Positions are the initial points plus the raw
offset. All mappings are differentiable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffmath as dm
from .exceptions import DimensionError

DEFAULT_SCALE_MAX = 0.05
RAW_CHANNELS = 14  # 3 color + 1 opacity + 4 rotation + 3 scale + 3 offset
QUAT_BIAS = np.array([1.0, 0.0, 0.0, 0.0], dtype=np.float32)


@dataclass
class RawAttributes:
    """Pre-activation per-splat attributes, in decode order."""

    color: dm.Tensor  # [N,3]
    opacity: dm.Tensor  # [N,1]
    rotation: dm.Tensor  # [N,4]
    scale: dm.Tensor  # [N,3]
    offset: dm.Tensor  # [N,3]

    def __post_init__(self):
        n = self.color.shape[0]
        widths = {"color": 3, "opacity": 1, "rotation": 4, "scale": 3, "offset": 3}
        for name, w in widths.items():
            t = getattr(self, name)
            if t.shape != (n, w):
                raise DimensionError(f"raw {name}: shape {t.shape}, expected ({n},{w})")

    @property
    def count(self) -> int:
        return self.color.shape[0]

    @staticmethod
    def from_block(block: dm.Tensor) -> "RawAttributes":
        """Split a packed [N,14] block (parallel-decoder output layout)."""
        if block.shape[-1] != RAW_CHANNELS:
            raise DimensionError(
                f"raw block needs {RAW_CHANNELS} channels, got {block.shape[-1]}"
            )
        return RawAttributes(
            color=dm.slice_last(block, 0, 3),
            opacity=dm.slice_last(block, 3, 4),
            rotation=dm.slice_last(block, 4, 8),
            scale=dm.slice_last(block, 8, 11),
            offset=dm.slice_last(block, 11, 14),
        )


@dataclass
class GaussianScene:
    """Immutable array-of-splats scene over the [-1,1]^3 cube.

    Fields are tensors so a scene can sit inside a differentiable graph;
    use ``.data`` for plain arrays.
    """

    positions: dm.Tensor  # [N,3]
    colors: dm.Tensor  # [N,3] in [0,1]
    opacities: dm.Tensor  # [N] in [0,1]
    rotations: dm.Tensor  # [N,4] unit quaternions (w,x,y,z)
    scales: dm.Tensor  # [N,3] in (0, scale_max]
    scale_max: float = DEFAULT_SCALE_MAX

    @property
    def count(self) -> int:
        return self.positions.shape[0]

    def validate(self) -> None:
        n = self.count
        if n < 1:
            raise ValueError("scene must contain at least one splat")
        q = self.rotations.data
        norms = np.linalg.norm(q, axis=1)
        if np.abs(norms - 1.0).max() > 1e-5:
            raise ValueError("quaternions not unit length")
        s = self.scales.data
        if s.min() <= 0 or s.max() > self.scale_max * (1 + 1e-5):
            raise ValueError("scales outside (0, scale_max]")
        o = self.opacities.data
        if o.min() < 0 or o.max() > 1:
            raise ValueError("opacities outside [0,1]")
        if not np.isfinite(self.positions.data).all():
            raise ValueError("non-finite positions")


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Unit quaternions (w,x,y,z) [N,4] -> rotation matrices [N,3,3]."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    m = np.empty((q.shape[0], 3, 3), dtype=np.float64)
    m[:, 0, 0] = 1 - 2 * (y * y + z * z)
    m[:, 0, 1] = 2 * (x * y - w * z)
    m[:, 0, 2] = 2 * (x * z + w * y)
    m[:, 1, 0] = 2 * (x * y + w * z)
    m[:, 1, 1] = 1 - 2 * (x * x + z * z)
    m[:, 1, 2] = 2 * (y * z - w * x)
    m[:, 2, 0] = 2 * (x * z - w * y)
    m[:, 2, 1] = 2 * (y * z + w * x)
    m[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def build_covariance(q, s) -> np.ndarray:
    """Sigma = R diag(s) diag(s) R^T for one splat; symmetric PD."""
    q = np.asarray(q, dtype=np.float64).reshape(4)
    s = np.asarray(s, dtype=np.float64).reshape(3)
    nrm = np.linalg.norm(q)
    if abs(nrm - 1.0) > 1e-4:
        raise ValueError(f"quaternion norm {nrm:.6f} violates the unit contract")
    if (s <= 0).any():
        raise ValueError("scales must be positive")
    r = quat_to_rotmat(q[None])[0]
    return (r * (s**2)[None, :]) @ r.T


def assemble_scene(raw: RawAttributes, init_positions,
                   scale_max: float = DEFAULT_SCALE_MAX) -> GaussianScene:
    """Range-map raw attributes onto initial positions.

    All-zero raw input yields the neutral scene: mid-gray half-opaque
    identity-oriented splats of scale scale_max/2 at the initial points.
    """
    init_t = (
        init_positions
        if isinstance(init_positions, dm.Tensor)
        else dm.tensor(np.asarray(init_positions, dtype=np.float32))
    )
    n = raw.count
    if init_t.shape != (n, 3):
        raise DimensionError(f"init positions {init_t.shape} != ({n},3)")
    colors = dm.sigmoid(raw.color)
    opac = dm.reshape(dm.sigmoid(raw.opacity), (n,))
    bias = dm.tensor(np.tile(QUAT_BIAS, (n, 1)))
    quats = dm.l2_normalize(dm.add(raw.rotation, bias))
    scales = dm.mul(dm.exp(dm.neg(dm.softplus(raw.scale))), float(scale_max))
    positions = dm.add(init_t, raw.offset)
    return GaussianScene(
        positions=positions,
        colors=colors,
        opacities=opac,
        rotations=quats,
        scales=scales,
        scale_max=scale_max,
    )


def disassemble_scene(scene: GaussianScene, init_positions) -> RawAttributes:
    """Invert the range mappings (rotation up to its lost magnitude).

    Valid away from activation saturation; re-assembling the result
    reproduces the scene.
    """

    def logit(x):
        x = np.clip(x.astype(np.float64), 1e-7, 1 - 1e-7)
        return np.log(x / (1 - x))

    init = np.asarray(init_positions, dtype=np.float32)
    s = scene.scales.data.astype(np.float64) / scene.scale_max
    y = -np.log(s)  # softplus(raw_scale)
    y = np.maximum(y, 1e-7)
    raw_scale = np.log(np.expm1(y))
    raw_rot = scene.rotations.data.astype(np.float64) - QUAT_BIAS[None, :]
    return RawAttributes(
        color=dm.tensor(logit(scene.colors.data)),
        opacity=dm.tensor(logit(scene.opacities.data)[:, None]),
        rotation=dm.tensor(raw_rot),
        scale=dm.tensor(raw_scale),
        offset=dm.tensor(scene.positions.data - init),
    )
