"""Finite-difference gradient audit across every differentiable surface.

Each check runs seeded random trials comparing tape gradients against
central differences (h = 1e-3; the FD side reduces in float64 so float32
scalar rounding does not drown the quotient). Render paths use a looser
1e-2 tolerance: their compositing is only piecewise smooth and trials
are configured away from the thresholds.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import diffmath as dm
from .cameras import look_at, orbit_camera
from .decoder import SplatDecoder, decode_scene
from .gsscene import GaussianScene, RawAttributes, assemble_scene
from .losses import SOBEL_X, _ssim_map, sobel_loss
from .rasterizer import render as raster_render
from .teacher import NerfHead, RayConfig, composite_rays, ray_samples, volume_render
from .triplane import TriPlane, sample_features

DEFAULT_H = 1e-3


@dataclass
class CheckResult:
    name: str
    tolerance: float
    max_rel_err: float
    trials: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


def _fd_weighted(make_out, params, rng, h=DEFAULT_H, max_probe=24):
    """Worst relative FD error of mean(out * w) over all params."""
    out_probe = make_out()
    w = rng.normal(size=out_probe.shape).astype(np.float32)
    wt = dm.tensor(w)
    for p in params:
        p.requires_grad = True
        p.grad = None
    with dm.Tape() as tape:
        loss = dm.mean_all(dm.mul(make_out(), wt))
    tape.backward(loss)

    worst = 0.0
    for p in params:
        g = p.grad
        assert g is not None, "missing gradient"
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        size = flat.size
        idx = (
            np.arange(size)
            if size <= max_probe
            else rng.choice(size, size=max_probe, replace=False)
        )
        num = np.zeros(len(idx))
        for k, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            fp = (make_out().data.astype(np.float64) * w).mean()
            flat[i] = orig - h
            fm = (make_out().data.astype(np.float64) * w).mean()
            flat[i] = orig
            num[k] = (fp - fm) / (2 * h)
        ana = gflat[idx].astype(np.float64)
        denom = np.abs(num).max() + 1e-4
        worst = max(worst, float(np.abs(ana - num).max() / denom))
    return worst


def _check(name, tol, trials, trial_fn) -> CheckResult:
    t0 = time.perf_counter()
    worst = 0.0
    for t in range(trials):
        worst = max(worst, trial_fn(np.random.default_rng(1000 + t)))
    return CheckResult(name, tol, worst, trials, time.perf_counter() - t0)


# --- individual trial builders ---------------------------------------------


def _trial_elementwise(op_name):
    def trial(rng):
        if op_name == "absolute":
            # keep arguments away from the |.| kink relative to the FD step
            a = dm.param((0.3 + np.abs(rng.normal(size=(4, 8))))
                         * np.sign(rng.normal(size=(4, 8))))
        else:
            a = dm.param(rng.normal(size=(4, 8)) + 0.3)
        b = dm.param(rng.normal(size=(4, 8)) + 3.0)
        ops = {
            "add": lambda: dm.add(a, b),
            "sub": lambda: dm.sub(a, b),
            "mul": lambda: dm.mul(a, b),
            "div": lambda: dm.div(a, b),
            "exp": lambda: dm.exp(dm.mul(a, 0.5)),
            "absolute": lambda: dm.absolute(a),
            "square": lambda: dm.square(a),
            "gelu": lambda: dm.gelu(a),
            "softplus": lambda: dm.softplus(a),
            "sigmoid": lambda: dm.sigmoid(a),
        }
        make = ops[op_name]
        params = [a, b] if op_name in ("add", "sub", "mul", "div") else [a]
        return _fd_weighted(make, params, rng)

    return trial


def _trial_affine(rng):
    x = dm.param(rng.normal(size=(5, 4)))
    w = dm.param(rng.normal(size=(4, 3)))
    b = dm.param(rng.normal(size=3))
    return _fd_weighted(lambda: dm.affine(x, w, b), [x, w, b], rng)


def _trial_normalize(rng):
    x = dm.param(rng.normal(size=(6, 4)) + 0.4)
    return _fd_weighted(lambda: dm.l2_normalize(x), [x], rng)


def _trial_shape_ops(rng):
    a = dm.param(rng.normal(size=(3, 4)))
    b = dm.param(rng.normal(size=(3, 2)))

    def make():
        cat = dm.concat([a, b], axis=-1)
        part = dm.slice_last(cat, 1, 5)
        row = dm.select_row(dm.reshape(part, (3, 4)), 1)
        return dm.square(row)

    return _fd_weighted(make, [a, b], rng)


def _trial_imgops(rng):
    img = dm.param(rng.random((10, 8, 2)))
    k = dm.gaussian_kernel1d(5, 1.2)
    err = _fd_weighted(lambda: dm.conv_separable_valid(img, k), [img], rng)
    err = max(err, _fd_weighted(
        lambda: dm.conv3x3_reflect(img, SOBEL_X), [img], rng
    ))
    return max(err, _fd_weighted(
        lambda: dm.avg_pool2(img), [img], rng
    ))


def _trial_triplane(rng):
    planes = dm.param(rng.normal(size=(3, 5, 5, 2)).astype(np.float32))
    tp = TriPlane(planes)
    # texel-interior points: bilinear weights are only piecewise smooth,
    # so FD must not straddle a texel boundary
    cell = rng.integers(0, 4, size=(5, 3))
    frac = rng.uniform(0.1, 0.9, size=(5, 3))
    pts = ((cell + frac) / 2.0 - 1.0).astype(np.float32)
    pts_t = dm.param(pts)
    return _fd_weighted(lambda: sample_features(tp, pts_t), [planes, pts_t], rng)


def _composite_f64(sigma, rgb, deltas, bg):
    """float64 mirror of the compositing recurrence (FD oracle)."""
    sigma = sigma.astype(np.float64)
    rgb = rgb.astype(np.float64)
    deltas = deltas.astype(np.float64)
    t = np.ones(sigma.shape[0])
    pix = np.zeros((sigma.shape[0], 3))
    for j in range(sigma.shape[1]):
        em = np.exp(-sigma[:, j] * deltas[:, j])
        w = t * (1.0 - em)
        pix += w[:, None] * rgb[:, j]
        t *= em
    return pix + t[:, None] * np.asarray(bg)


def _trial_composite(rng):
    # moderate optical depth keeps d(pixel)/d(sigma) healthy everywhere
    sigma = dm.param(rng.uniform(0.2, 2.0, size=(2, 6)))
    rgb = dm.param(rng.random((2, 6, 3)))
    _, deltas = ray_samples(RayConfig(near=1.0, far=2.5, samples=6), 2)
    bg = (0.3, 0.2, 0.5)
    w = rng.normal(size=(2, 3)).astype(np.float32)

    for p in (sigma, rgb):
        p.requires_grad = True
        p.grad = None
    with dm.Tape() as tape:
        pix, _ = composite_rays(sigma, rgb, deltas, bg)
        loss = dm.mean_all(dm.mul(pix, dm.tensor(w)))
    tape.backward(loss)

    worst = 0.0
    for p in (sigma, rgb):
        flat = p.data.reshape(-1)
        gflat = p.grad.reshape(-1)
        num = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + DEFAULT_H
            fp = (_composite_f64(sigma.data, rgb.data, deltas, bg) * w).mean()
            flat[i] = orig - DEFAULT_H
            fm = (_composite_f64(sigma.data, rgb.data, deltas, bg) * w).mean()
            flat[i] = orig
            num[i] = (fp - fm) / (2 * DEFAULT_H)
        worst = max(
            worst,
            float(np.abs(gflat - num).max() / (np.abs(num).max() + 1e-4)),
        )
    return worst


def _trial_volume_render(rng):
    planes = dm.param(rng.normal(size=(3, 6, 6, 4)).astype(np.float32) * 0.5)
    tp = TriPlane(planes)
    head = NerfHead(rng, channels=4, hidden=8)
    cam = orbit_camera(float(rng.uniform(0, 360)), 10.0, width=4, height=4)
    rc = RayConfig(samples=8)

    def make():
        img, _ = volume_render(tp, head, cam, rc, bg=(1, 1, 1))
        return img

    return _fd_weighted(make, [planes], rng, max_probe=12, h=2e-3)


def _trial_assemble(rng):
    block = dm.param(rng.normal(size=(4, 14)) * 0.5)
    init = rng.uniform(-0.5, 0.5, (4, 3)).astype(np.float32)

    def make():
        scene = assemble_scene(RawAttributes.from_block(block), init)
        return dm.concat(
            [scene.positions, scene.colors,
             dm.reshape(scene.opacities, (4, 1)), scene.rotations,
             dm.mul(scene.scales, 10.0)],
            axis=-1,
        )

    return _fd_weighted(make, [block], rng)


def _raster_scene(rng):
    n = 5
    pos = rng.uniform(-0.25, 0.25, (n, 3))
    # well-separated depths: an FD step must never swap the global sort
    pos[:, 2] = np.linspace(-0.25, 0.25, n) + rng.uniform(-0.01, 0.01, n)
    cols = rng.uniform(0.2, 0.8, (n, 3))
    opc = rng.uniform(0.2, 0.34, n)
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    scl = rng.uniform(0.35, 0.55, (n, 3))
    return GaussianScene(
        positions=dm.param(pos), colors=dm.param(cols),
        opacities=dm.param(opc), rotations=dm.param(q),
        scales=dm.param(scl), scale_max=1.0,
    )


def _trial_rasterizer(rng):
    cam = look_at(eye=(0, 0, -2.0), target=(0, 0, 0), fov_y_deg=30.0,
                  width=16, height=16, near=0.5, far=8.0)
    scene = _raster_scene(rng)

    def make():
        img, _ = raster_render(scene, cam, bg=(0.2, 0.3, 0.4))
        return img

    params = [scene.positions, scene.colors, scene.opacities,
              scene.rotations, scene.scales]
    return _fd_weighted(make, params, rng, max_probe=6)


def _ssim_map_f64(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """float64 mirror of the SSIM map, used as the FD oracle."""
    from numpy.lib.stride_tricks import sliding_window_view

    from .losses import SSIM_C1, SSIM_C2, SSIM_SIGMA, SSIM_WINDOW

    k = dm.gaussian_kernel1d(SSIM_WINDOW, SSIM_SIGMA).astype(np.float64)

    def filt(x):
        t = np.einsum("...k,k->...", sliding_window_view(x, k.size, axis=1), k)
        return np.einsum("...k,k->...", sliding_window_view(t, k.size, axis=0), k)

    a = a.astype(np.float64)
    b = b.astype(np.float64)
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a**2
    var_b = filt(b * b) - mu_b**2
    cov = filt(a * b) - mu_a * mu_b
    return ((2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)) / (
        (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    )


def _trial_loss_maps(rng):
    a = dm.param(rng.random((14, 14, 2)))
    b = dm.tensor(rng.random((14, 14, 2)).astype(np.float32) + 0.5)

    # analytic grads of the f32 map against FD on the f64 oracle mirror
    w = rng.normal(size=(4, 4, 2)).astype(np.float32)
    a.requires_grad = True
    a.grad = None
    with dm.Tape() as tape:
        loss = dm.mean_all(dm.mul(_ssim_map(a, b), dm.tensor(w)))
    tape.backward(loss)
    flat = a.data.reshape(-1)
    gflat = a.grad.reshape(-1)
    idx = rng.choice(flat.size, size=12, replace=False)
    num = np.zeros(len(idx))
    h = DEFAULT_H
    for k, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + h
        fp = (_ssim_map_f64(a.data, b.data) * w).mean()
        flat[i] = orig - h
        fm = (_ssim_map_f64(a.data, b.data) * w).mean()
        flat[i] = orig
        num[k] = (fp - fm) / (2 * h)
    err = float(
        np.abs(gflat[idx] - num).max() / (np.abs(num).max() + 1e-4)
    )

    def sobel_map():
        ga = dm.conv3x3_reflect(a, SOBEL_X)
        gb = dm.conv3x3_reflect(b, SOBEL_X)
        return dm.sub(ga, gb)

    return max(err, _fd_weighted(sobel_map, [a], rng, max_probe=12))


def _trial_decoder_path(rng):
    dec = SplatDecoder("sequential", 4, rng)
    for mlp in dec.heads.values():
        mlp.weights[-1].data[:] = rng.normal(
            size=mlp.weights[-1].data.shape
        ).astype(np.float32) * 0.05
    # moderate opacity: alpha stays off the 1/255 skip inside the frame
    # while the stacked transmittance keeps clear of the 1e-4 stop
    dec.heads["opacity"].biases[-1].data[:] = 0.5
    planes = dm.param(rng.normal(size=(3, 5, 5, 4)).astype(np.float32) * 0.5)
    tp = TriPlane(planes)
    init = rng.uniform(-0.3, 0.3, (6, 3)).astype(np.float32)
    init[:, 2] = np.linspace(-0.3, 0.3, 6)  # fixed distinct depth order
    cam = look_at(eye=(0, 0, -2.0), target=(0, 0, 0), fov_y_deg=30.0,
                  width=10, height=10, near=0.5, far=8.0)

    def make():
        # splats sized so both the 3-sigma rect and the 1/255 alpha skip
        # stay outside the frame: the probed function is smooth
        scene = decode_scene(dec, tp, init, scale_max=1.3)
        img, _ = raster_render(scene, cam, bg=(1, 1, 1))
        return img

    probe = [dec.heads["color"].weights[1], dec.heads["scale"].weights[-1],
             planes]
    # the full chain stacks enough float32 roundings that h = 1e-3 probes
    # sit near the noise floor; 3e-3 keeps truncation negligible
    return _fd_weighted(make, probe, rng, max_probe=5, h=3e-3)


_ELEMENTWISE = ("add", "sub", "mul", "div", "exp", "absolute", "square",
                "gelu", "softplus", "sigmoid")


def grad_check_all(fast: bool = False) -> list:
    """Run the whole suite; returns CheckResult rows (all must pass)."""
    n_cheap = 20 if fast else 100
    n_mid = 10 if fast else 100
    n_heavy = 3 if fast else 10
    checks = []
    for op in _ELEMENTWISE:
        checks.append(
            _check(f"diffmath.{op}", 1e-3, n_cheap, _trial_elementwise(op))
        )
    checks.append(_check("diffmath.affine", 1e-3, n_cheap, _trial_affine))
    checks.append(_check("diffmath.l2_normalize", 1e-3, n_cheap, _trial_normalize))
    checks.append(_check("diffmath.shape_ops", 1e-3, n_cheap, _trial_shape_ops))
    checks.append(_check("diffmath.image_ops", 1e-3, n_mid, _trial_imgops))
    checks.append(_check("triplane.sample_features", 1e-3, n_mid, _trial_triplane))
    checks.append(_check("teacher.composite_rays", 1e-3, n_mid, _trial_composite))
    checks.append(_check("teacher.volume_render", 1e-2, n_heavy, _trial_volume_render))
    checks.append(_check("gsscene.assemble_scene", 1e-3, n_mid, _trial_assemble))
    checks.append(_check("rasterizer.render", 1e-2, n_mid, _trial_rasterizer))
    checks.append(_check("losses.maps", 1e-3, n_heavy, _trial_loss_maps))
    checks.append(_check("decoder.end_to_end", 1e-2, n_heavy, _trial_decoder_path))
    return checks
