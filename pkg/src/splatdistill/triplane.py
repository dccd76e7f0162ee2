"""Tri-plane features over the [-1,1]^3 scene cube.

Three axis-aligned planes (XY, XZ, YZ) of shape [R, R, F]. A 3D point is
projected onto each plane by dropping one coordinate, bilinearly
interpolated with the align-corners convention (-1 maps to texel 0
center, +1 to texel R-1 center), and the three feature vectors are
averaged. Out-of-cube points clamp to the cube surface.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange

from . import diffmath as dm
from .exceptions import DimensionError

# Plane index -> (u coord, v coord) of the kept axes.
PLANE_AXES = ((0, 1), (0, 2), (1, 2))
PLANE_NAMES = ("plane_xy", "plane_xz", "plane_yz")


class TriPlane:
    """Stacked plane tensor [3, R, R, F]; ``planes`` may require grad."""

    def __init__(self, planes: dm.Tensor):
        shape = planes.data.shape
        if len(shape) != 4 or shape[0] != 3 or shape[1] != shape[2]:
            raise DimensionError(f"TriPlane expects [3,R,R,F], got {shape}")
        if not np.isfinite(planes.data).all():
            raise ValueError("TriPlane contains non-finite values")
        self.planes = planes

    @property
    def resolution(self) -> int:
        return self.planes.data.shape[1]

    @property
    def channels(self) -> int:
        return self.planes.data.shape[3]

    @staticmethod
    def zeros(resolution: int = 32, channels: int = 16) -> "TriPlane":
        return TriPlane(
            dm.tensor(np.zeros((3, resolution, resolution, channels), dtype=dm.DTYPE))
        )

    def named_tensors(self) -> dict:
        return {
            name: self.planes.data[i] for i, name in enumerate(PLANE_NAMES)
        }

    @staticmethod
    def from_named_tensors(state: dict) -> "TriPlane":
        stack = np.stack([state[name] for name in PLANE_NAMES], axis=0)
        return TriPlane(dm.tensor(stack))


@njit(cache=True, parallel=True, fastmath=True)
def _sample_fwd(planes, pts, out):
    n, f = pts.shape[0], planes.shape[3]
    r = planes.shape[1]
    one = np.float32(1.0)
    third = np.float32(1.0 / 3.0)
    scale = np.float32(0.5 * (r - 1))
    for i in prange(n):
        x = min(one, max(-one, pts[i, 0]))
        y = min(one, max(-one, pts[i, 1]))
        z = min(one, max(-one, pts[i, 2]))
        for p in range(3):
            if p == 0:
                u = (x + one) * scale
                v = (y + one) * scale
            elif p == 1:
                u = (x + one) * scale
                v = (z + one) * scale
            else:
                u = (y + one) * scale
                v = (z + one) * scale
            u0 = min(max(int(u), 0), r - 2)
            v0 = min(max(int(v), 0), r - 2)
            du = u - np.float32(u0)
            dv = v - np.float32(v0)
            w00 = (one - du) * (one - dv) * third
            w01 = (one - du) * dv * third
            w10 = du * (one - dv) * third
            w11 = du * dv * third
            for c in range(f):
                out[i, c] += (
                    w00 * planes[p, u0, v0, c]
                    + w01 * planes[p, u0, v0 + 1, c]
                    + w10 * planes[p, u0 + 1, v0, c]
                    + w11 * planes[p, u0 + 1, v0 + 1, c]
                )


@njit(cache=True)
def _sample_bwd(planes, pts, gout, gplanes, gpts, want_pts):
    n, f = pts.shape[0], planes.shape[3]
    r = planes.shape[1]
    one = np.float32(1.0)
    zero = np.float32(0.0)
    third = np.float32(1.0 / 3.0)
    scale = np.float32(0.5 * (r - 1))
    for i in range(n):
        raw = pts[i]
        x = min(one, max(-one, raw[0]))
        y = min(one, max(-one, raw[1]))
        z = min(one, max(-one, raw[2]))
        for p in range(3):
            if p == 0:
                u = (x + one) * scale
                v = (y + one) * scale
                au, av = 0, 1
                cu, cv = raw[0], raw[1]
            elif p == 1:
                u = (x + one) * scale
                v = (z + one) * scale
                au, av = 0, 2
                cu, cv = raw[0], raw[2]
            else:
                u = (y + one) * scale
                v = (z + one) * scale
                au, av = 1, 2
                cu, cv = raw[1], raw[2]
            u0 = min(max(int(u), 0), r - 2)
            v0 = min(max(int(v), 0), r - 2)
            du = u - np.float32(u0)
            dv = v - np.float32(v0)
            su = third * scale if -one < cu < one else zero
            sv = third * scale if -one < cv < one else zero
            for c in range(f):
                g = gout[i, c]
                if g == zero:
                    continue
                gt = g * third
                gplanes[p, u0, v0, c] += gt * (one - du) * (one - dv)
                gplanes[p, u0, v0 + 1, c] += gt * (one - du) * dv
                gplanes[p, u0 + 1, v0, c] += gt * du * (one - dv)
                gplanes[p, u0 + 1, v0 + 1, c] += gt * du * dv
                if want_pts:
                    t00 = planes[p, u0, v0, c]
                    t01 = planes[p, u0, v0 + 1, c]
                    t10 = planes[p, u0 + 1, v0, c]
                    t11 = planes[p, u0 + 1, v0 + 1, c]
                    dfdu = (one - dv) * (t10 - t00) + dv * (t11 - t01)
                    dfdv = (one - du) * (t01 - t00) + du * (t11 - t10)
                    gpts[i, au] += g * su * dfdu
                    gpts[i, av] += g * sv * dfdv


def sample_features(tp: TriPlane, points) -> dm.Tensor:
    """Mean of the three bilinear plane lookups for each point [N,3] -> [N,F]."""
    pts_t = points if isinstance(points, dm.Tensor) else dm.tensor(points)
    pts = np.ascontiguousarray(pts_t.data, dtype=dm.DTYPE)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise DimensionError(f"sample_features: points shape {pts.shape}")
    planes = np.ascontiguousarray(tp.planes.data)
    out = np.zeros((pts.shape[0], tp.channels), dtype=dm.DTYPE)
    _sample_fwd(planes, pts, out)
    out_t = dm.Tensor(out)

    def backward(g):
        g = np.ascontiguousarray(g, dtype=dm.DTYPE)
        gplanes = np.zeros_like(planes)
        want_pts = pts_t.requires_grad
        gpts = np.zeros_like(pts) if want_pts else np.zeros((0, 3), dtype=dm.DTYPE)
        _sample_bwd(planes, pts, g, gplanes, gpts, want_pts)
        return (gplanes, gpts if want_pts else None)

    dm.record_op([tp.planes, pts_t], [out_t], backward)
    return out_t
