"""Differentiable Gaussian splat rasterizer.

Forward: perspective projection of each splat, EWA covariance projection
(affine Jacobian at the splat mean) with a 0.3-pixel low-pass, then
depth-ordered front-to-back alpha compositing per pixel. Backward
returns exact analytic gradients for position, color, opacity,
quaternion, and scale.

Compositing walks splats in depth order over their 3-sigma screen
bounding rectangles, banded over image rows; each band owns private
accumulators reduced in fixed band order, so results do not depend on
the thread count.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange

from . import diffmath as dm
from .cameras import Camera
from .gsscene import GaussianScene, quat_to_rotmat

ALPHA_CAP = 0.99
ALPHA_SKIP = 1.0 / 255.0
T_STOP = 1e-4
LOW_PASS = 0.3
DET_EPS = 1e-12
FRAME_CULL = 1.3
N_BANDS = 16


# ---------------------------------------------------------------------------
# projection (vectorized numpy, hand-derived backward)


def _project_forward(positions, quats, scales, cam: Camera):
    """Project all splats; returns per-splat 2D stats and cached intermediates."""
    n = positions.shape[0]
    rot = cam.rotation.astype(np.float64)
    t = cam.translation.astype(np.float64)
    f = float(cam.focal)
    cx, cy = cam.principal

    p_cam = positions.astype(np.float64) @ rot.T + t
    x, y, z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]
    safe_z = np.where(z > 1e-6, z, 1.0)

    u = f * x / safe_z + cx
    v = f * y / safe_z + cy
    mean2d = np.stack([u, v], axis=1)

    r3 = quat_to_rotmat(quats.astype(np.float64))
    m = r3 * scales.astype(np.float64)[:, None, :]  # R diag(s)
    sigma3 = m @ np.transpose(m, (0, 2, 1))

    j = np.zeros((n, 2, 3), dtype=np.float64)
    j[:, 0, 0] = f / safe_z
    j[:, 0, 2] = -f * x / safe_z**2
    j[:, 1, 1] = f / safe_z
    j[:, 1, 2] = -f * y / safe_z**2
    a = j @ rot  # [N,2,3]
    cov2d = a @ sigma3 @ np.transpose(a, (0, 2, 1))
    cov2d[:, 0, 0] += LOW_PASS
    cov2d[:, 1, 1] += LOW_PASS

    ca, cb, cc = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = ca * cc - cb * cb
    invertible = det > DET_EPS
    safe_det = np.where(invertible, det, 1.0)
    conic = np.stack([cc / safe_det, -cb / safe_det, ca / safe_det], axis=1)

    eig_max = 0.5 * (ca + cc + np.sqrt(np.maximum((ca - cc) ** 2 + 4 * cb * cb, 0.0)))
    radius = np.ceil(3.0 * np.sqrt(np.maximum(eig_max, 0.0)))

    w, h = cam.width, cam.height
    in_front = z > cam.near
    on_frame = (
        (u > -(FRAME_CULL - 1.0) * w)
        & (u < FRAME_CULL * w)
        & (v > -(FRAME_CULL - 1.0) * h)
        & (v < FRAME_CULL * h)
    )
    valid = in_front & on_frame & invertible
    cache = dict(
        p_cam=p_cam, r3=r3, m=m, sigma3=sigma3, j=j, a=a,
        conic_all=conic, det=safe_det, rot=rot, f=f,
        invertible=invertible, in_front=in_front, on_frame=on_frame,
    )
    return mean2d, conic, z.copy(), radius, valid, cache


def _quat_rot_partials(q):
    """dR/dq for the (w,x,y,z) rotation formula; returns [N,4,3,3]."""
    n = q.shape[0]
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    zero = np.zeros(n)
    dw = np.stack(
        [zero, -z, y, z, zero, -x, -y, x, zero], axis=1
    ).reshape(n, 3, 3)
    dx = np.stack(
        [zero, y, z, y, -2 * x, -w, z, w, -2 * x], axis=1
    ).reshape(n, 3, 3)
    dy = np.stack(
        [-2 * y, x, w, x, zero, z, -w, z, -2 * y], axis=1
    ).reshape(n, 3, 3)
    dz = np.stack(
        [-2 * z, -w, x, w, -2 * z, y, x, y, zero], axis=1
    ).reshape(n, 3, 3)
    return 2.0 * np.stack([dw, dx, dy, dz], axis=1)


def _project_backward(gmean2d, gconic, cache, quats, scales, valid):
    """Chain 2D-stat gradients back to position/quaternion/scale."""
    p_cam = cache["p_cam"]
    r3, m, sigma3 = cache["r3"], cache["m"], cache["sigma3"]
    a, rot, f = cache["a"], cache["rot"], cache["f"]
    conic = cache["conic_all"]
    x, y, z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]
    safe_z = np.where(z > 1e-6, z, 1.0)

    gmean2d = gmean2d * valid[:, None]
    gconic = gconic * valid[:, None]

    # conic = inv(cov2d): dL/dSigma2 = -C G C with the off-diagonal halved
    gc_full = np.empty((quats.shape[0], 2, 2))
    gc_full[:, 0, 0] = gconic[:, 0]
    gc_full[:, 0, 1] = gc_full[:, 1, 0] = 0.5 * gconic[:, 1]
    gc_full[:, 1, 1] = gconic[:, 2]
    c_full = np.empty_like(gc_full)
    c_full[:, 0, 0] = conic[:, 0]
    c_full[:, 0, 1] = c_full[:, 1, 0] = conic[:, 1]
    c_full[:, 1, 1] = conic[:, 2]
    g2 = -c_full @ gc_full @ c_full  # dL/dcov2d (symmetric)

    ga = 2.0 * g2 @ a @ sigma3  # dL/dA
    g3 = np.transpose(a, (0, 2, 1)) @ g2 @ a  # dL/dSigma3 (symmetric)
    gm = 2.0 * g3 @ m
    gscale = np.einsum("nrj,nrj->nj", gm, r3)
    grot3 = gm * scales.astype(np.float64)[:, None, :]
    dr = _quat_rot_partials(quats.astype(np.float64))
    gquat = np.einsum("nkij,nij->nk", dr, grot3)

    # A = J rot: dL/dJ, then the J and mean2d paths into camera space
    gj = ga @ rot.T
    gp_cam = np.zeros_like(p_cam)
    gp_cam[:, 0] = gmean2d[:, 0] * f / safe_z - gj[:, 0, 2] * f / safe_z**2
    gp_cam[:, 1] = gmean2d[:, 1] * f / safe_z - gj[:, 1, 2] * f / safe_z**2
    gp_cam[:, 2] = (
        -gmean2d[:, 0] * f * x / safe_z**2
        - gmean2d[:, 1] * f * y / safe_z**2
        - gj[:, 0, 0] * f / safe_z**2
        - gj[:, 1, 1] * f / safe_z**2
        + gj[:, 0, 2] * 2.0 * f * x / safe_z**3
        + gj[:, 1, 2] * 2.0 * f * y / safe_z**3
    )
    gpos = gp_cam @ rot

    flt = valid.astype(np.float64)[:, None]
    return (
        (gpos * flt).astype(np.float32),
        (gquat * flt).astype(np.float32),
        (gscale * flt).astype(np.float32),
    )


def project_gaussian(splat_index: int, scene: GaussianScene, cam: Camera):
    """Project one splat; returns dict or None when culled (normal outcome)."""
    mean2d, conic, depth, radius, valid, _ = _project_forward(
        scene.positions.data[splat_index : splat_index + 1],
        scene.rotations.data[splat_index : splat_index + 1],
        scene.scales.data[splat_index : splat_index + 1],
        cam,
    )
    if not valid[0]:
        return None
    return {
        "mean2d": mean2d[0].astype(np.float32),
        "conic": conic[0].astype(np.float32),
        "cov2d": np.linalg.inv(
            np.array(
                [[conic[0, 0], conic[0, 1]], [conic[0, 1], conic[0, 2]]]
            )
        ),
        "depth": float(depth[0]),
        "radius": float(radius[0]),
    }


# ---------------------------------------------------------------------------
# banded compositing kernels


@njit(cache=True, parallel=True, fastmath=True)
def _raster_fwd(order, mean2d, conic, colors, opac, radius, w, h, n_bands,
                img, t_final, n_contrib):
    band_rows = (h + n_bands - 1) // n_bands
    for band in prange(n_bands):
        y_lo = band * band_rows
        y_hi = min(h, y_lo + band_rows)
        if y_lo >= y_hi:
            continue
        for k in range(order.shape[0]):
            i = order[k]
            r = radius[i]
            u = mean2d[i, 0]
            v = mean2d[i, 1]
            x0 = max(0, int(u - r))
            x1 = min(w - 1, int(u + r))
            y0 = max(y_lo, int(v - r))
            y1 = min(y_hi - 1, int(v + r))
            if x0 > x1 or y0 > y1:
                continue
            ca = conic[i, 0]
            cb = conic[i, 1]
            cc = conic[i, 2]
            op = opac[i]
            c0 = colors[i, 0]
            c1 = colors[i, 1]
            c2 = colors[i, 2]
            for py in range(y0, y1 + 1):
                for px in range(x0, x1 + 1):
                    t_cur = t_final[py, px]
                    if t_cur < T_STOP:
                        continue
                    dx = np.float32(px) + np.float32(0.5) - u
                    dy = np.float32(py) + np.float32(0.5) - v
                    power = (
                        np.float32(-0.5) * (ca * dx * dx + cc * dy * dy)
                        - cb * dx * dy
                    )
                    if power < np.float32(-15.0):
                        continue
                    alpha = op * np.exp(power)
                    if alpha < np.float32(ALPHA_SKIP):
                        continue
                    if alpha > np.float32(ALPHA_CAP):
                        alpha = np.float32(ALPHA_CAP)
                    wgt = t_cur * alpha
                    img[py, px, 0] += wgt * c0
                    img[py, px, 1] += wgt * c1
                    img[py, px, 2] += wgt * c2
                    t_final[py, px] = t_cur * (np.float32(1.0) - alpha)
                    n_contrib[py, px] = k + 1


@njit(cache=True, parallel=True, fastmath=True)
def _raster_bwd(order, mean2d, conic, colors, opac, radius, w, h, n_bands,
                t_final, n_contrib, bg, gimg, galpha,
                gmean_b, gconic_b, gcolor_b, gopac_b):
    band_rows = (h + n_bands - 1) // n_bands
    for band in prange(n_bands):
        y_lo = band * band_rows
        y_hi = min(h, y_lo + band_rows)
        if y_lo >= y_hi:
            continue
        rows = y_hi - y_lo
        t_cur = np.empty((rows, w), dtype=np.float32)
        sfx = np.zeros((rows, w, 3), dtype=np.float32)
        sfx_a = np.zeros((rows, w), dtype=np.float32)
        for py in range(y_lo, y_hi):
            for px in range(w):
                tf = t_final[py, px]
                t_cur[py - y_lo, px] = tf
                sfx[py - y_lo, px, 0] = tf * bg[0]
                sfx[py - y_lo, px, 1] = tf * bg[1]
                sfx[py - y_lo, px, 2] = tf * bg[2]
        for k in range(order.shape[0] - 1, -1, -1):
            i = order[k]
            r = radius[i]
            u = mean2d[i, 0]
            v = mean2d[i, 1]
            x0 = max(0, int(u - r))
            x1 = min(w - 1, int(u + r))
            y0 = max(y_lo, int(v - r))
            y1 = min(y_hi - 1, int(v + r))
            if x0 > x1 or y0 > y1:
                continue
            ca = conic[i, 0]
            cb = conic[i, 1]
            cc = conic[i, 2]
            op = opac[i]
            c0 = colors[i, 0]
            c1 = colors[i, 1]
            c2 = colors[i, 2]
            for py in range(y0, y1 + 1):
                for px in range(x0, x1 + 1):
                    if k + 1 > n_contrib[py, px]:
                        continue
                    dx = np.float32(px) + np.float32(0.5) - u
                    dy = np.float32(py) + np.float32(0.5) - v
                    power = (
                        np.float32(-0.5) * (ca * dx * dx + cc * dy * dy)
                        - cb * dx * dy
                    )
                    if power < np.float32(-15.0):
                        continue
                    gval = np.exp(power)
                    alpha = op * gval
                    if alpha < np.float32(ALPHA_SKIP):
                        continue
                    capped = alpha > np.float32(ALPHA_CAP)
                    if capped:
                        alpha = np.float32(ALPHA_CAP)
                    ry = py - y_lo
                    one_m = np.float32(1.0) - alpha
                    t_i = t_cur[ry, px] / one_m
                    wgt = t_i * alpha
                    g0 = gimg[py, px, 0]
                    g1 = gimg[py, px, 1]
                    g2 = gimg[py, px, 2]
                    ga = galpha[py, px]
                    gcolor_b[band, i, 0] += g0 * wgt
                    gcolor_b[band, i, 1] += g1 * wgt
                    gcolor_b[band, i, 2] += g2 * wgt
                    dalpha = (
                        g0 * (t_i * c0 - sfx[ry, px, 0] / one_m)
                        + g1 * (t_i * c1 - sfx[ry, px, 1] / one_m)
                        + g2 * (t_i * c2 - sfx[ry, px, 2] / one_m)
                        + ga * (t_i - sfx_a[ry, px] / one_m)
                    )
                    if not capped:
                        gopac_b[band, i] += dalpha * gval
                        dg = dalpha * op
                        gmean_b[band, i, 0] += dg * gval * (ca * dx + cb * dy)
                        gmean_b[band, i, 1] += dg * gval * (cc * dy + cb * dx)
                        gconic_b[band, i, 0] += dg * gval * (
                            np.float32(-0.5) * dx * dx
                        )
                        gconic_b[band, i, 1] += dg * gval * (-dx * dy)
                        gconic_b[band, i, 2] += dg * gval * (
                            np.float32(-0.5) * dy * dy
                        )
                    sfx[ry, px, 0] += wgt * c0
                    sfx[ry, px, 1] += wgt * c1
                    sfx[ry, px, 2] += wgt * c2
                    sfx_a[ry, px] += wgt
                    t_cur[ry, px] = t_i


# ---------------------------------------------------------------------------
# public rendering entry points


def render(scene: GaussianScene, cam: Camera, bg=(1.0, 1.0, 1.0),
           stats: dict | None = None):
    """Rasterize the scene; returns (image [H,W,3], alpha [H,W]) tensors.

    Differentiable wrt every splat attribute when run under a tape.
    ``stats``, when given, receives culling/skip diagnostics.
    """
    if scene.count < 1:
        raise ValueError("cannot render an empty scene")
    bg_arr = np.asarray(bg, dtype=np.float32).reshape(3)
    pos = scene.positions.data
    qts = scene.rotations.data
    scl = scene.scales.data
    mean2d, conic, depth, radius, valid, cache = _project_forward(pos, qts, scl, cam)
    if stats is not None:
        stats["culled_behind"] = int((~cache["in_front"]).sum())
        stats["culled_frame"] = int((cache["in_front"] & ~cache["on_frame"]).sum())
        stats["skipped_degenerate"] = int(
            (cache["in_front"] & cache["on_frame"] & ~cache["invertible"]).sum()
        )
        stats["rendered"] = int(valid.sum())

    vidx = np.nonzero(valid)[0]
    order_local = np.argsort(depth[vidx], kind="stable")
    order = vidx[order_local].astype(np.int64)

    h, w = cam.height, cam.width
    img = np.zeros((h, w, 3), dtype=np.float32)
    t_final = np.ones((h, w), dtype=np.float32)
    n_contrib = np.zeros((h, w), dtype=np.int32)
    mean2d_f = np.ascontiguousarray(mean2d, dtype=np.float32)
    conic_f = np.ascontiguousarray(conic, dtype=np.float32)
    colors_f = np.ascontiguousarray(scene.colors.data, dtype=np.float32)
    opac_f = np.ascontiguousarray(scene.opacities.data, dtype=np.float32)
    radius_f = np.ascontiguousarray(radius, dtype=np.float32)
    n_bands = min(N_BANDS, h)
    _raster_fwd(order, mean2d_f, conic_f, colors_f, opac_f, radius_f,
                w, h, n_bands, img, t_final, n_contrib)
    img_out = img + t_final[:, :, None] * bg_arr[None, None, :]
    alpha_out = 1.0 - t_final

    img_t = dm.Tensor(img_out)
    alpha_t = dm.Tensor(alpha_out)

    def backward(gimg, galpha):
        # the background and alpha-map dependencies on residual transmittance
        # enter through the suffix initialization inside the kernel
        gimg = np.ascontiguousarray(gimg, dtype=np.float32)
        galpha_c = np.ascontiguousarray(galpha, dtype=np.float32)
        gmean_b = np.zeros((n_bands, scene.count, 2), dtype=np.float32)
        gconic_b = np.zeros((n_bands, scene.count, 3), dtype=np.float32)
        gcolor_b = np.zeros((n_bands, scene.count, 3), dtype=np.float32)
        gopac_b = np.zeros((n_bands, scene.count), dtype=np.float32)
        _raster_bwd(order, mean2d_f, conic_f, colors_f, opac_f, radius_f,
                    w, h, n_bands, t_final, n_contrib, bg_arr, gimg, galpha_c,
                    gmean_b, gconic_b, gcolor_b, gopac_b)
        gmean2d = gmean_b.sum(axis=0, dtype=np.float64)
        gconic = gconic_b.sum(axis=0, dtype=np.float64)
        gcolor = gcolor_b.sum(axis=0)
        gopac = gopac_b.sum(axis=0)
        gpos, gquat, gscale = _project_backward(
            gmean2d, gconic, cache, qts, scl, valid
        )
        return (gpos, gcolor, gopac, gquat, gscale)

    dm.record_op(
        [scene.positions, scene.colors, scene.opacities, scene.rotations,
         scene.scales],
        [img_t, alpha_t],
        backward,
    )
    return img_t, alpha_t


def render_backward(scene: GaussianScene, cam: Camera, bg, dL_dimage):
    """Explicit backward pass: gradients for all splat attributes."""
    for t in (scene.positions, scene.colors, scene.opacities,
              scene.rotations, scene.scales):
        t.requires_grad = True
        t.grad = None
    with dm.Tape() as tape:
        img, _ = render(scene, cam, bg)
    tape.backward(img, seed=np.asarray(dL_dimage, dtype=np.float32))
    return {
        "positions": scene.positions.grad,
        "colors": scene.colors.grad,
        "opacities": scene.opacities.grad,
        "rotations": scene.rotations.grad,
        "scales": scene.scales.grad,
    }
