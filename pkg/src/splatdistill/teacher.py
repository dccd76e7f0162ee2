"""Implicit-side ground truth: analytic field family, NeRF-style head,
and a differentiable volumetric ray-marching renderer.

The analytic family maps a latent deterministically to a blob-head scene
(head ellipsoid, nose, two ears, two-tone hair split). A generator +
feature-decoding head are regressed against that family in 3D, which
yields the frozen "pre-trained" implicit teacher that distillation
targets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit, prange

from . import diffmath as dm
from .backbone import LATENT_DIM, Generator, generate_triplane_batch, validate_latent
from .cameras import Camera
from .exceptions import TeacherFitError
from .mlp import MLP
from .triplane import TriPlane, sample_features


# ---------------------------------------------------------------------------
# analytic scene family

N_BLOBS = 4
_PARAM_COUNT = 4 * 7 + 3 + 3 + 1  # per-blob (center, inv-scale, amp) + colors + split

# Per-parameter ranges, one row per scalar. Blob order: head, nose, left
# ear, right ear. Sub-ranges sit inside the documented family ranges
# (centers in [-0.6, 0.6], inverse scales in [2, 12], amplitudes in [20, 60]).
_RANGES = np.array(
    # head
    [(-0.08, 0.08), (-0.08, 0.08), (-0.08, 0.08),
     (9.0, 12.0), (9.0, 12.0), (9.0, 12.0), (20.0, 26.0),
     # nose
     (-0.06, 0.06), (-0.16, -0.06), (0.34, 0.46),
     (10.0, 12.0), (10.0, 12.0), (10.0, 12.0), (20.0, 25.0),
     # left ear
     (-0.48, -0.38), (0.04, 0.16), (-0.10, 0.02),
     (10.0, 12.0), (10.0, 12.0), (10.0, 12.0), (20.0, 25.0),
     # right ear
     (0.38, 0.48), (0.04, 0.16), (-0.10, 0.02),
     (10.0, 12.0), (10.0, 12.0), (10.0, 12.0), (20.0, 25.0),
     # base color, hair color, hair height split
     (0.35, 0.85), (0.35, 0.85), (0.35, 0.85),
     (0.05, 0.55), (0.05, 0.55), (0.05, 0.55),
     (0.0, 0.4)],
    dtype=np.float64,
)

COLOR_BLEND_WIDTH = 0.05


@dataclass
class SceneParams:
    """One blob-head scene; all values inside the family ranges."""

    centers: np.ndarray  # [4,3]
    inv_scales: np.ndarray  # [4,3]
    amplitudes: np.ndarray  # [4]
    base_color: np.ndarray  # [3]
    hair_color: np.ndarray  # [3]
    hair_threshold: float


class SceneFamily:
    """Affine map from latent codes to scene parameters.

    Each scalar parameter is ``lo + (hi-lo) * (a.z + 1)/2`` with a fixed
    L1-normalized row ``a``, so parameters are affine in z and always in
    range for z in [-1,1]^16.
    """

    def __init__(self, family_seed: int = 0):
        self.family_seed = family_seed
        rng = np.random.default_rng(family_seed)
        rows = rng.normal(size=(_PARAM_COUNT, LATENT_DIM))
        rows /= np.abs(rows).sum(axis=1, keepdims=True)
        self._proj = rows
        self._lo = _RANGES[:, 0]
        self._hi = _RANGES[:, 1]

    def derive(self, z) -> SceneParams:
        z = validate_latent(z).astype(np.float64)
        unit = (self._proj @ z + 1.0) / 2.0
        vec = self._lo + (self._hi - self._lo) * unit
        blobs = vec[:28].reshape(4, 7)
        return SceneParams(
            centers=blobs[:, 0:3].astype(np.float32),
            inv_scales=blobs[:, 3:6].astype(np.float32),
            amplitudes=blobs[:, 6].astype(np.float32),
            base_color=vec[28:31].astype(np.float32),
            hair_color=vec[31:34].astype(np.float32),
            hair_threshold=float(vec[34]),
        )


def analytic_field(points, sp: SceneParams):
    """Ground-truth density and color at points [N,3] -> ([N], [N,3]).

    sigma(x) = sum_k w_k * exp(-0.5 * sum_a p_ka (x_a - mu_ka)^2); color is
    the base tone below the hair split and the hair tone above it, blended
    smoothly over COLOR_BLEND_WIDTH in the up (y) coordinate.
    """
    pts = np.asarray(points, dtype=np.float32).reshape(-1, 3)
    d = pts[:, None, :] - sp.centers[None, :, :]  # [N,4,3]
    expo = -0.5 * np.einsum("nka,ka->nk", d * d, sp.inv_scales)
    sigma = (np.exp(expo) @ sp.amplitudes).astype(np.float32)
    t = np.clip((pts[:, 1] - sp.hair_threshold) / COLOR_BLEND_WIDTH + 0.5, 0.0, 1.0)
    s = (t * t * (3.0 - 2.0 * t)).astype(np.float32)[:, None]
    rgb = sp.base_color[None, :] * (1.0 - s) + sp.hair_color[None, :] * s
    return sigma, rgb.astype(np.float32)


# ---------------------------------------------------------------------------
# NeRF-style head over tri-plane features


class NerfHead:
    """Feature MLP F -> 64 -> 64 -> 4; softplus density, sigmoid color."""

    def __init__(self, rng: np.random.Generator, channels: int = 16, hidden: int = 64):
        self.channels = channels
        self.mlp = MLP([channels, hidden, hidden, 4], rng, name="nerf_head")

    def __call__(self, features: dm.Tensor):
        raw = self.mlp(features)
        sigma = dm.softplus(dm.slice_last(raw, 0, 1))
        rgb = dm.sigmoid(dm.slice_last(raw, 1, 4))
        return sigma, rgb

    def parameters(self):
        return self.mlp.parameters()

    def set_trainable(self, flag: bool) -> None:
        self.mlp.set_trainable(flag)

    def state_dict(self) -> dict:
        return self.mlp.state_dict()

    def load_state_dict(self, state: dict) -> None:
        self.mlp.load_state_dict(state)


def nerf_head_field(tp: TriPlane, head: NerfHead, points):
    """Density/color tensors for points through the tri-plane + head."""
    feats = sample_features(tp, points)
    return head(feats)


# ---------------------------------------------------------------------------
# volumetric ray marching


@dataclass
class RayConfig:
    near: float = 1.0
    far: float = 4.0
    samples: int = 64
    jitter: bool = False

    def __post_init__(self):
        if not (0.0 < self.near < self.far):
            raise ValueError(f"need 0 < near < far, got {self.near}, {self.far}")
        if self.samples < 2:
            raise ValueError("need at least 2 samples per ray")


def ray_samples(rc: RayConfig, n_rays: int, rng: np.random.Generator | None = None):
    """Sample distances [R,S] and step sizes [R,S].

    Jitter off: bin midpoints with full bin widths (midpoint quadrature).
    Jitter on: one uniform sample per bin; steps are consecutive
    differences, last step runs to the far plane.
    """
    h = (rc.far - rc.near) / rc.samples
    if rc.jitter:
        if rng is None:
            raise ValueError("jitter sampling needs an rng")
        u = rng.random((n_rays, rc.samples), dtype=np.float32)
    else:
        u = np.full((n_rays, rc.samples), 0.5, dtype=np.float32)
    idx = np.arange(rc.samples, dtype=np.float32)[None, :]
    ts = rc.near + (idx + u) * h
    if rc.jitter:
        deltas = np.empty_like(ts)
        deltas[:, :-1] = ts[:, 1:] - ts[:, :-1]
        deltas[:, -1] = rc.far - ts[:, -1]
    else:
        deltas = np.full_like(ts, h)
    return ts.astype(np.float32), deltas.astype(np.float32)


@njit(cache=True, parallel=True, fastmath=True)
def _composite_fwd(sigma, rgb, delta, bg, pix, acc):
    n_rays, n_s = sigma.shape
    for r in prange(n_rays):
        t_cur = np.float32(1.0)
        c0 = np.float32(0.0)
        c1 = np.float32(0.0)
        c2 = np.float32(0.0)
        a = np.float32(0.0)
        for j in range(n_s):
            em = np.exp(-sigma[r, j] * delta[r, j])
            alpha = np.float32(1.0) - em
            w = t_cur * alpha
            c0 += w * rgb[r, j, 0]
            c1 += w * rgb[r, j, 1]
            c2 += w * rgb[r, j, 2]
            a += w
            t_cur *= em
        pix[r, 0] = c0 + t_cur * bg[0]
        pix[r, 1] = c1 + t_cur * bg[1]
        pix[r, 2] = c2 + t_cur * bg[2]
        acc[r] = a


@njit(cache=True, parallel=True, fastmath=True)
def _composite_bwd(sigma, rgb, delta, bg, gpix, gacc, gsigma, grgb):
    n_rays, n_s = sigma.shape
    for r in prange(n_rays):
        t_final = np.float32(1.0)
        for j in range(n_s):
            t_final *= np.exp(-sigma[r, j] * delta[r, j])
        sfx0 = t_final * bg[0]
        sfx1 = t_final * bg[1]
        sfx2 = t_final * bg[2]
        sfx_a = np.float32(0.0)
        t_cur = t_final
        for j in range(n_s - 1, -1, -1):
            em = np.exp(-sigma[r, j] * delta[r, j])
            alpha = np.float32(1.0) - em
            if em < np.float32(1e-30):
                em = np.float32(1e-30)
            t_j = t_cur / em
            w = t_j * alpha
            grgb[r, j, 0] = gpix[r, 0] * w
            grgb[r, j, 1] = gpix[r, 1] * w
            grgb[r, j, 2] = gpix[r, 2] * w
            dc_da = (
                gpix[r, 0] * (t_j * rgb[r, j, 0] - sfx0 / em)
                + gpix[r, 1] * (t_j * rgb[r, j, 1] - sfx1 / em)
                + gpix[r, 2] * (t_j * rgb[r, j, 2] - sfx2 / em)
            )
            da = dc_da + gacc[r] * (t_j - sfx_a / em)
            gsigma[r, j] = da * delta[r, j] * em
            sfx0 += w * rgb[r, j, 0]
            sfx1 += w * rgb[r, j, 1]
            sfx2 += w * rgb[r, j, 2]
            sfx_a += w
            t_cur = t_j


def composite_rays(sigma: dm.Tensor, rgb: dm.Tensor, deltas: np.ndarray, bg) -> tuple:
    """Front-to-back alpha compositing of per-sample density/color.

    sigma: [R,S], rgb: [R,S,3], deltas: [R,S] (constant). Returns pixel
    colors [R,3] and the accumulated alpha map [R].
    """
    bg = np.asarray(bg, dtype=np.float32).reshape(3)
    sig = np.ascontiguousarray(sigma.data)
    col = np.ascontiguousarray(rgb.data)
    deltas = np.ascontiguousarray(deltas, dtype=np.float32)
    pix = np.zeros((sig.shape[0], 3), dtype=np.float32)
    acc = np.zeros(sig.shape[0], dtype=np.float32)
    _composite_fwd(sig, col, deltas, bg, pix, acc)
    pix_t, acc_t = dm.Tensor(pix), dm.Tensor(acc)

    def backward(gpix, gacc):
        gs = np.zeros_like(sig)
        gc = np.zeros_like(col)
        _composite_bwd(
            sig, col, deltas, bg,
            np.ascontiguousarray(gpix, dtype=np.float32),
            np.ascontiguousarray(gacc, dtype=np.float32),
            gs, gc,
        )
        return (gs, gc)

    dm.record_op([sigma, rgb], [pix_t, acc_t], backward)
    return pix_t, acc_t


def volume_render(
    tp: TriPlane,
    head: NerfHead,
    cam: Camera,
    rc: RayConfig,
    bg=(1.0, 1.0, 1.0),
    rng: np.random.Generator | None = None,
    chunk: int = 4096,
):
    """Ray-march the implicit field; returns (image [H,W,3], alpha [H,W]).

    Differentiable wrt the tri-plane and head weights when run under a
    tape. Rays march in chunks to bound peak memory.
    """
    origins, dirs = cam.rays()
    n = origins.shape[0]
    pix_chunks, acc_chunks = [], []
    recording = dm.Tape.active() is not None
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        ts, deltas = ray_samples(rc, hi - lo, rng)
        pts = origins[lo:hi, None, :] + dirs[lo:hi, None, :] * ts[:, :, None]
        sigma, rgb = nerf_head_field(tp, head, pts.reshape(-1, 3))
        s = rc.samples
        sigma2 = dm.reshape(sigma, (hi - lo, s))
        rgb2 = dm.reshape(rgb, (hi - lo, s, 3))
        pix, acc = composite_rays(sigma2, rgb2, deltas, bg)
        pix_chunks.append(pix)
        acc_chunks.append(acc)
    if len(pix_chunks) == 1:
        pix_all, acc_all = pix_chunks[0], acc_chunks[0]
    else:
        pix_all = dm.concat(pix_chunks, axis=0) if recording else dm.Tensor(
            np.concatenate([p.data for p in pix_chunks], axis=0)
        )
        acc_all = dm.concat(acc_chunks, axis=0) if recording else dm.Tensor(
            np.concatenate([a.data for a in acc_chunks], axis=0)
        )
    img = dm.reshape(pix_all, (cam.height, cam.width, 3))
    alpha = dm.reshape(acc_all, (cam.height, cam.width))
    return img, alpha


def render_analytic(cam: Camera, sp: SceneParams, rc: RayConfig,
                    bg=(1.0, 1.0, 1.0), rng=None):
    """Volume render the analytic field directly (oracle path, no MLP)."""
    origins, dirs = cam.rays()
    ts, deltas = ray_samples(rc, origins.shape[0], rng)
    pts = origins[:, None, :] + dirs[:, None, :] * ts[:, :, None]
    sigma, rgb = analytic_field(pts.reshape(-1, 3), sp)
    sigma = sigma.reshape(ts.shape)
    rgb = rgb.reshape(ts.shape + (3,))
    bg = np.asarray(bg, dtype=np.float32).reshape(3)
    pix = np.zeros((ts.shape[0], 3), dtype=np.float32)
    acc = np.zeros(ts.shape[0], dtype=np.float32)
    _composite_fwd(sigma, rgb, deltas, bg, pix, acc)
    return (
        pix.reshape(cam.height, cam.width, 3),
        acc.reshape(cam.height, cam.width),
    )


# ---------------------------------------------------------------------------
# teacher fitting


@dataclass
class TeacherConfig:
    resolution: int = 32
    channels: int = 16
    generator_hidden: int = 128
    head_hidden: int = 64
    iterations: int = 5000
    latents_per_iter: int = 8
    points_per_latent: int = 1024
    lr: float = 2e-3
    seed: int = 0
    core_rel_err_max: float = 0.10
    eval_latents: int = 4
    family_seed: int = 0


@dataclass
class FittedTeacher:
    """Frozen implicit teacher: generator, head, and the scene family."""

    generator: Generator
    head: NerfHead
    family: SceneFamily
    final_loss: float = 0.0
    core_rel_err: float = 0.0
    _plane_cache: dict = field(default_factory=dict, repr=False)

    def triplane(self, z) -> TriPlane:
        """Tri-plane for a latent, cached (the teacher is frozen)."""
        key = np.asarray(z, dtype=np.float32).tobytes()
        tp = self._plane_cache.get(key)
        if tp is None:
            tp = self.generator(z)
            tp.planes.requires_grad = False
            self._plane_cache[key] = tp
        return tp

    def render(self, z, cam: Camera, rc: RayConfig, bg=(1.0, 1.0, 1.0), rng=None):
        img, alpha = volume_render(self.triplane(z), self.head, cam, rc, bg, rng)
        return img.data, alpha.data

    def state_dict(self) -> dict:
        state = dict(self.generator.state_dict())
        state.update(self.head.state_dict())
        return state

    def save(self, path, cfg: "TeacherConfig") -> None:
        """Checkpoint plus a sidecar config describing the architecture."""
        dm.save_checkpoint(path, self.state_dict())
        meta = {
            "resolution": cfg.resolution,
            "channels": cfg.channels,
            "generator_hidden": cfg.generator_hidden,
            "head_hidden": cfg.head_hidden,
            "family_seed": cfg.family_seed,
            "final_loss": self.final_loss,
            "core_rel_err": self.core_rel_err,
        }
        sidecar = Path(str(path) + ".cfg")
        sidecar.write_text(
            "".join(f"{k} = {v}\n" for k, v in meta.items())
        )


def load_teacher(path) -> FittedTeacher:
    """Rebuild a frozen teacher from its checkpoint and sidecar config."""
    sidecar = Path(str(path) + ".cfg")
    meta = {}
    for line in sidecar.read_text().splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition("=")
        meta[key.strip()] = value.strip()
    rng = np.random.default_rng(0)  # weights are overwritten below
    gen = Generator(
        rng,
        resolution=int(meta["resolution"]),
        channels=int(meta["channels"]),
        hidden=int(meta["generator_hidden"]),
    )
    head = NerfHead(rng, channels=int(meta["channels"]),
                    hidden=int(meta["head_hidden"]))
    state = dm.load_checkpoint(path)
    gen.load_state_dict(state)
    head.load_state_dict(state)
    gen.set_trainable(False)
    head.set_trainable(False)
    return FittedTeacher(
        generator=gen, head=head, family=SceneFamily(int(meta["family_seed"])),
        final_loss=float(meta.get("final_loss", 0.0)),
        core_rel_err=float(meta.get("core_rel_err", 0.0)),
    )


def _training_points(sp: SceneParams, n: int, rng: np.random.Generator) -> np.ndarray:
    """Half uniform over the cube, half concentrated around the blobs."""
    n_uni = n // 2
    pts = [rng.uniform(-1.0, 1.0, size=(n_uni, 3))]
    n_blob = n - n_uni
    per = max(1, n_blob // N_BLOBS)
    for k in range(N_BLOBS):
        std = 1.5 / np.sqrt(sp.inv_scales[k])
        smp = rng.normal(loc=sp.centers[k], scale=std, size=(per, 3))
        pts.append(np.clip(smp, -1.0, 1.0))
    out = np.concatenate(pts, axis=0)[:n]
    return out.astype(np.float32)


def core_relative_errors(gen: Generator, head: NerfHead, family: SceneFamily,
                         latents) -> np.ndarray:
    """|sigma_hat - sigma*| / sigma* at every blob core of every latent."""
    errs = []
    for z in latents:
        sp = family.derive(z)
        tp = gen(z)
        sigma_t, _ = nerf_head_field(tp, head, sp.centers)
        sigma_true, _ = analytic_field(sp.centers, sp)
        pred = sigma_t.data.reshape(-1)
        errs.extend(np.abs(pred - sigma_true) / sigma_true)
    return np.asarray(errs, dtype=np.float64)


def fit_teacher(latents, budget: int | None = None,
                cfg: TeacherConfig | None = None,
                log_every: int = 0) -> FittedTeacher:
    """Regress generator + head against the analytic family in 3D.

    ``latents`` is the scene set (>= 2 for a family fit; a single latent
    overfits one scene). Minimizes mean |s_hat - s*|/(1 + s*) plus the L1
    color error by Adam, then gates on the held-out blob-core density
    error; failure raises TeacherFitError with diagnostics.
    """
    cfg = cfg or TeacherConfig()
    iters = budget if budget is not None else cfg.iterations
    latents = [validate_latent(z) for z in latents]
    family = SceneFamily(cfg.family_seed)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xEA]))
    gen = Generator(
        rng, resolution=cfg.resolution, channels=cfg.channels,
        hidden=cfg.generator_hidden, name="generator",
    )
    head = NerfHead(rng, channels=cfg.channels, hidden=cfg.head_hidden)
    params = gen.parameters() + head.parameters()
    opt = dm.Adam(params, lr=cfg.lr)
    scene_params = [family.derive(z) for z in latents]

    batch = min(cfg.latents_per_iter, len(latents))
    loss_val = float("nan")
    for it in range(iters):
        order = rng.permutation(len(latents))[:batch]
        with dm.Tape() as tape:
            tps = generate_triplane_batch(gen, [latents[zi] for zi in order])
            total = None
            for j, zi in enumerate(order):
                sp = scene_params[zi]
                pts = _training_points(sp, cfg.points_per_latent, rng)
                sigma_true, rgb_true = analytic_field(pts, sp)
                sigma_t, rgb_t = nerf_head_field(tps[j], head, pts)
                res = dm.sub(sigma_t, dm.tensor(sigma_true.reshape(-1, 1)))
                wgt = dm.tensor((1.0 / (1.0 + sigma_true)).reshape(-1, 1))
                sloss = dm.mean_all(dm.mul(dm.absolute(res), wgt))
                closs = dm.mean_all(dm.absolute(dm.sub(rgb_t, dm.tensor(rgb_true))))
                loss = dm.add(sloss, closs)
                total = loss if total is None else dm.add(total, loss)
            batch_loss = dm.mul(total, 1.0 / batch)
            loss_val = batch_loss.item()
            tape.backward(batch_loss)
        opt.step()
        if log_every and (it % log_every == 0 or it == iters - 1):
            print(f"[fit-teacher] iter {it:5d} loss {loss_val:.4f}")

    eval_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5EED]))
    eval_latents = [
        eval_rng.uniform(-1.0, 1.0, size=LATENT_DIM).astype(np.float32)
        for _ in range(cfg.eval_latents)
    ]
    errs = core_relative_errors(gen, head, family, eval_latents)
    core_err = float(errs.mean())
    if core_err > cfg.core_rel_err_max:
        raise TeacherFitError(
            f"teacher fit failed: held-out core density error "
            f"{core_err:.3f} > {cfg.core_rel_err_max:.3f}",
            diagnostics={
                "core_rel_err_mean": core_err,
                "core_rel_err_max": float(errs.max()),
                "final_loss": loss_val,
                "iterations": iters,
            },
        )
    gen.set_trainable(False)
    head.set_trainable(False)
    return FittedTeacher(
        generator=gen, head=head, family=family,
        final_loss=loss_val, core_rel_err=core_err,
    )
