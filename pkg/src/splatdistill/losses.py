"""Composite image objective: L1 + SSIM + Sobel plus pluggable hooks.

The perceptual and identity terms are hook slots: any differentiable
callable (pred, target) -> scalar tensor qualifies. Absent hooks
contribute exactly zero; the identity hook is additionally gated to
near-frontal views. A toy multi-scale edge/blur hook ships for
experiments that want a perceptual-style signal without a pretrained
network.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffmath as dm
from .exceptions import DimensionError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2

SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float32)
SOBEL_Y = SOBEL_X.T.copy()


@dataclass
class LossWeights:
    """Coefficients for (L1, SSIM, perceptual, identity, Sobel)."""

    l1: float = 0.2
    ssim: float = 0.5
    perceptual: float = 1.0
    identity: float = 1.0
    sobel: float = 0.2

    def __post_init__(self):
        for name in ("l1", "ssim", "perceptual", "identity", "sobel"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be non-negative")

    def as_tuple(self):
        return (self.l1, self.ssim, self.perceptual, self.identity, self.sobel)


@dataclass
class LossHooks:
    """Optional perceptual/identity callables and the frontal gate."""

    perceptual: object = None
    identity: object = None
    identity_gate_deg: float = 45.0


def _check_pair(a: dm.Tensor, b: dm.Tensor, op: str, min_size: int = 1):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: image shapes {a.shape} vs {b.shape}")
    if len(a.shape) != 3:
        raise DimensionError(f"{op}: expected [H,W,C] images, got {a.shape}")
    if a.shape[0] < min_size or a.shape[1] < min_size:
        raise DimensionError(
            f"{op}: image {a.shape[:2]} smaller than required {min_size}"
        )


def l1_loss(a: dm.Tensor, b: dm.Tensor) -> dm.Tensor:
    """Mean absolute difference over all pixels and channels."""
    _check_pair(a, b, "l1_loss")
    return dm.mean_all(dm.absolute(dm.sub(a, b)))


def _ssim_map(a: dm.Tensor, b: dm.Tensor) -> dm.Tensor:
    k = dm.gaussian_kernel1d(SSIM_WINDOW, SSIM_SIGMA)

    def filt(x):
        return dm.conv_separable_valid(x, k)

    mu_a = filt(a)
    mu_b = filt(b)
    mu_aa = dm.mul(mu_a, mu_a)
    mu_bb = dm.mul(mu_b, mu_b)
    mu_ab = dm.mul(mu_a, mu_b)
    var_a = dm.sub(filt(dm.mul(a, a)), mu_aa)
    var_b = dm.sub(filt(dm.mul(b, b)), mu_bb)
    cov = dm.sub(filt(dm.mul(a, b)), mu_ab)
    num = dm.mul(
        dm.add(dm.mul(mu_ab, 2.0), SSIM_C1), dm.add(dm.mul(cov, 2.0), SSIM_C2)
    )
    den = dm.mul(
        dm.add(dm.add(mu_aa, mu_bb), SSIM_C1),
        dm.add(dm.add(var_a, var_b), SSIM_C2),
    )
    return dm.div(num, den)


def ssim_loss(a: dm.Tensor, b: dm.Tensor) -> dm.Tensor:
    """1 - mean SSIM; 11x11 Gaussian window (sigma 1.5) on [0,1] images.

    Window statistics use the population (uniform-weight) normalization
    and the mean runs over the fully-valid interior, per channel.
    """
    _check_pair(a, b, "ssim_loss", min_size=SSIM_WINDOW)
    return dm.sub(dm.mul(dm.mean_all(_ssim_map(a, b)), -1.0), -1.0)


def ssim_value(a, b) -> float:
    """Plain SSIM score between two arrays or tensors (metric use)."""
    ta = a if isinstance(a, dm.Tensor) else dm.tensor(a)
    tb = b if isinstance(b, dm.Tensor) else dm.tensor(b)
    return float(_ssim_map(ta, tb).data.mean())


def sobel_loss(a: dm.Tensor, b: dm.Tensor) -> dm.Tensor:
    """Mean L1 between Sobel responses, Gx and Gy compared separately."""
    _check_pair(a, b, "sobel_loss", min_size=3)
    gx = dm.mean_all(
        dm.absolute(dm.sub(dm.conv3x3_reflect(a, SOBEL_X),
                           dm.conv3x3_reflect(b, SOBEL_X)))
    )
    gy = dm.mean_all(
        dm.absolute(dm.sub(dm.conv3x3_reflect(a, SOBEL_Y),
                           dm.conv3x3_reflect(b, SOBEL_Y)))
    )
    return dm.add(gx, gy)


def toy_perceptual_hook(levels: int = 3):
    """Multi-scale edge+blur comparison; a stand-in perceptual signal.

    At each pyramid level: L1 between Gaussian-blurred images plus L1
    between Sobel responses, averaged over levels.
    """
    k = dm.gaussian_kernel1d(5, 1.0)

    def hook(pred: dm.Tensor, target: dm.Tensor) -> dm.Tensor:
        if pred.shape[0] < 5 or pred.shape[1] < 5:
            raise DimensionError(
                f"toy perceptual hook needs at least 5x5 images, got {pred.shape}"
            )
        total = None
        used = 0
        a, b = pred, target
        for _ in range(levels):
            blur = dm.mean_all(
                dm.absolute(
                    dm.sub(dm.conv_separable_valid(a, k),
                           dm.conv_separable_valid(b, k))
                )
            )
            term = dm.add(blur, sobel_loss(a, b))
            total = term if total is None else dm.add(total, term)
            used += 1
            h, w = a.shape[0] // 2, a.shape[1] // 2
            if h < 5 or w < 5 or a.shape[0] % 2 or a.shape[1] % 2:
                break  # next level would be too small for the filters
            a = dm.avg_pool2(a)
            b = dm.avg_pool2(b)
        return dm.mul(total, 1.0 / used)

    return hook


def combined_loss(pred: dm.Tensor, target: dm.Tensor, weights: LossWeights,
                  hooks: LossHooks | None = None,
                  view_azimuth_deg: float = 0.0):
    """Weighted sum of the five terms; returns (scalar, per-term report).

    Hook terms are exactly zero when absent; the identity term is also
    zero outside the frontal gate. The report maps term name to the
    unweighted float value ('n/a' for inactive hooks).
    """
    hooks = hooks or LossHooks()
    terms = []
    report = {}

    def active(name, weight, make):
        t = make()
        report[name] = float(t.item())
        if weight != 0.0:
            terms.append((weight, t))

    active("l1", weights.l1, lambda: l1_loss(pred, target))
    active("ssim", weights.ssim, lambda: ssim_loss(pred, target))
    active("sobel", weights.sobel, lambda: sobel_loss(pred, target))
    if hooks.perceptual is not None:
        active("perceptual", weights.perceptual,
               lambda: hooks.perceptual(pred, target))
    else:
        report["perceptual"] = "n/a"
    if hooks.identity is not None:
        gated = abs(view_azimuth_deg) > hooks.identity_gate_deg
        if gated:
            report["identity"] = 0.0
        else:
            active("identity", weights.identity,
                   lambda: hooks.identity(pred, target))
    else:
        report["identity"] = "n/a"
    total = dm.weighted_sum(terms)
    report["total"] = float(total.item())
    return total, report
