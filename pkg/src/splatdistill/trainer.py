"""Distillation orchestration.

Fits nothing itself: it wires a frozen implicit teacher to the splat
decoder and the student backbone, draws cameras, renders targets and
predictions, applies the composite loss, and steps Adam. Also owns the
held-out evaluation protocol, the render-speed benchmark, and the
ablation matrix.

Teacher targets depend only on (teacher, latent, camera), so they are
pre-rendered once per run over a per-latent camera pool and reused; the
pool, the latent pools, and the position initialization derive from a
dedicated data seed so ablations and repeat runs share them (and can
reuse an on-disk cache).
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

from . import diffmath as dm
from .backbone import (
    BackboneState,
    clone_backbone,
    generate_triplane_batch,
    random_latent,
)
from .cameras import Camera, orbit_camera
from .decoder import ArchVariant, SplatDecoder, decode_scene
from .exceptions import TrainingDivergedError
from .losses import LossHooks, LossWeights, combined_loss, ssim_value, toy_perceptual_hook
from .rasterizer import render as raster_render
from .surface_init import InitStrategy, sample_positions
from .teacher import FittedTeacher, RayConfig, volume_render

ORBIT_RADIUS = 2.7
ORBIT_FOV = 25.0


class CameraMode(str, Enum):
    ORBIT360 = "orbit360"
    FRONTAL_LIMITED = "frontal_limited"


def sample_camera(mode: CameraMode, rng: np.random.Generator,
                  width: int = 128, height: int = 128,
                  near: float = 1.0, far: float = 4.0) -> Camera:
    """One camera on the orbit sphere, aimed at the origin.

    orbit360: azimuth uniform over the full circle, elevation uniform in
    [-30, 30] degrees. frontal_limited: azimuth N(0, 15) clamped to +-45,
    elevation N(0, 10) clamped to +-30.
    """
    mode = CameraMode(mode)
    if mode is CameraMode.ORBIT360:
        azim = rng.uniform(0.0, 360.0)
        elev = rng.uniform(-30.0, 30.0)
    else:
        azim = float(np.clip(rng.normal(0.0, 15.0), -45.0, 45.0))
        elev = float(np.clip(rng.normal(0.0, 10.0), -30.0, 30.0))
    return orbit_camera(
        azim, elev, radius=ORBIT_RADIUS, fov_y_deg=ORBIT_FOV,
        width=width, height=height, near=near, far=far,
    )


def eval_cameras(mode: CameraMode, n_views: int, width: int, height: int,
                 near: float = 1.0, far: float = 4.0) -> list:
    """Deterministic evaluation ring matching the camera mode's coverage."""
    mode = CameraMode(mode)
    if mode is CameraMode.ORBIT360:
        azims = np.linspace(0.0, 360.0, n_views, endpoint=False)
    else:
        azims = np.linspace(-45.0, 45.0, n_views)
    return [
        orbit_camera(a, 10.0, radius=ORBIT_RADIUS, fov_y_deg=ORBIT_FOV,
                     width=width, height=height, near=near, far=far)
        for a in azims
    ]


@dataclass
class TrainConfig:
    iterations: int = 2000
    lr: float = 0.0009
    cameras_per_iter: int = 2
    latents_per_batch: int = 4
    train_latents: int = 8
    heldout_latents: int = 2
    camera_mode: CameraMode = CameraMode.ORBIT360
    image_size: int = 128
    splat_count: int = 20_000
    init_strategy: str = "marching_cubes"
    init_shrink_max: float = 0.15
    init_grid_resolution: int = 128
    arch_variant: str = "sequential"
    loss_weights: LossWeights = field(default_factory=LossWeights)
    use_toy_perceptual: bool = False
    finetune_backbone: bool = True
    seed: int = 0
    data_seed: int = 1234
    ray_samples: int = 64
    background: tuple = (1.0, 1.0, 1.0)
    target_views_per_latent: int = 30
    scale_max: float = 0.05
    eval_views: int = 8
    log_every: int = 50

    def __post_init__(self):
        if self.iterations < 1 or self.cameras_per_iter < 1:
            raise ValueError("iteration and camera counts must be >= 1")
        if self.latents_per_batch < 1 or self.train_latents < 1:
            raise ValueError("latent counts must be >= 1")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        self.camera_mode = CameraMode(self.camera_mode)
        ArchVariant(self.arch_variant)

    def ray_config(self, jitter: bool) -> RayConfig:
        return RayConfig(samples=self.ray_samples, jitter=jitter)


def latent_pools(cfg: TrainConfig):
    """Training and held-out latents from the data seed."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.data_seed, 0xA]))
    train = [random_latent(rng) for _ in range(cfg.train_latents)]
    held = [random_latent(rng) for _ in range(cfg.heldout_latents)]
    return train, held


def _latent_key(teacher_digest: str, z: np.ndarray, tag: str, extra: str = "") -> str:
    h = hashlib.sha256()
    h.update(teacher_digest.encode())
    h.update(np.asarray(z, dtype=np.float32).tobytes())
    h.update(tag.encode())
    h.update(extra.encode())
    return h.hexdigest()[:24]


def teacher_digest(teacher: FittedTeacher) -> str:
    h = hashlib.sha256()
    for name in sorted(teacher.state_dict()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(teacher.state_dict()[name]).tobytes())
    return h.hexdigest()[:24]


def init_positions_for(teacher: FittedTeacher, z, cfg: TrainConfig,
                       cache_dir=None, digest=None) -> np.ndarray:
    """Initial splat positions for one latent (cached on disk if possible)."""
    digest = digest or teacher_digest(teacher)
    extra = (
        f"{cfg.init_strategy}/{cfg.splat_count}/{cfg.init_shrink_max}"
        f"/{cfg.init_grid_resolution}/{cfg.data_seed}"
    )
    key = _latent_key(digest, z, "init", extra)
    if cache_dir is not None:
        path = Path(cache_dir) / f"init_{key}.npy"
        if path.exists():
            return np.load(path)
    strategy = InitStrategy(
        kind=cfg.init_strategy, count=cfg.splat_count,
        shrink_max=cfg.init_shrink_max,
        grid_resolution=cfg.init_grid_resolution,
    )
    rng = np.random.default_rng(np.random.SeedSequence([cfg.data_seed, 0xB]))
    pts = sample_positions(strategy, teacher.triplane(z), teacher.head, rng)
    if cache_dir is not None:
        Path(cache_dir).mkdir(parents=True, exist_ok=True)
        np.save(Path(cache_dir) / f"init_{key}.npy", pts)
    return pts


def render_target_pool(teacher: FittedTeacher, z, cfg: TrainConfig,
                       cache_dir=None, digest=None):
    """Per-latent camera pool and teacher renders (jittered quadrature)."""
    digest = digest or teacher_digest(teacher)
    extra = (
        f"{cfg.camera_mode.value}/{cfg.image_size}/{cfg.ray_samples}"
        f"/{cfg.target_views_per_latent}/{cfg.background}/{cfg.data_seed}"
    )
    key = _latent_key(digest, z, "targets", extra)
    path = Path(cache_dir) / f"targets_{key}.npz" if cache_dir is not None else None
    if path is not None and path.exists():
        blob = np.load(path)
        return blob["images"], blob["azimuths"], blob["eyes"], blob["rotations"], blob["translations"]
    rng = np.random.default_rng(
        np.random.SeedSequence(
            [cfg.data_seed, 0xC, int.from_bytes(np.asarray(z, np.float32).tobytes()[:4], "little")]
        )
    )
    cams = [
        sample_camera(cfg.camera_mode, rng, cfg.image_size, cfg.image_size)
        for _ in range(cfg.target_views_per_latent)
    ]
    rc = cfg.ray_config(jitter=True)
    images = np.empty(
        (len(cams), cfg.image_size, cfg.image_size, 3), dtype=np.float32
    )
    for vi, cam in enumerate(cams):
        img, _ = teacher.render(z, cam, rc, bg=cfg.background, rng=rng)
        images[vi] = img
    azim = np.array([c.azimuth_deg for c in cams], dtype=np.float32)
    eyes = np.stack([c.eye for c in cams])
    rots = np.stack([c.rotation for c in cams])
    trans = np.stack([c.translation for c in cams])
    if path is not None:
        Path(cache_dir).mkdir(parents=True, exist_ok=True)
        np.savez_compressed(
            path, images=images, azimuths=azim, eyes=eyes,
            rotations=rots, translations=trans,
        )
    return images, azim, eyes, rots, trans


def _pool_camera(cfg: TrainConfig, rots, trans, vi: int, azim) -> Camera:
    return Camera(
        fov_y_deg=ORBIT_FOV, width=cfg.image_size, height=cfg.image_size,
        rotation=rots[vi], translation=trans[vi],
        near=1.0, far=4.0, azimuth_deg=float(azim[vi]),
    )


@dataclass
class DistillResult:
    decoder: SplatDecoder
    backbone: BackboneState
    init_positions: dict
    metrics: dict
    loss_history: list
    divergence_alarm: bool
    worst_smoothed_ratio: float
    train_latents: list
    heldout_latents: list
    elapsed_s: float
    log_path: str | None = None


def distill(cfg: TrainConfig, teacher: FittedTeacher, out_dir=None,
            cache_dir=None, progress=None) -> DistillResult:
    """Train decoder heads (and optionally the student backbone) against
    frozen teacher renders; returns the trained state plus held-out metrics.
    """
    t_start = time.perf_counter()
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    digest = teacher_digest(teacher)
    train_z, held_z = latent_pools(cfg)

    init_pos = {}
    targets = {}
    for li, z in enumerate(train_z):
        init_pos[li] = init_positions_for(teacher, z, cfg, cache_dir, digest)
        targets[li] = render_target_pool(teacher, z, cfg, cache_dir, digest)

    backbone = clone_backbone(teacher.generator)
    rng_init = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x1]))
    decoder = SplatDecoder(cfg.arch_variant, teacher.generator.channels, rng_init)
    if cfg.finetune_backbone:
        backbone.student.set_trainable(True)
        params = decoder.parameters() + backbone.student.parameters()
    else:
        backbone.student.set_trainable(False)
        params = decoder.parameters()
    opt = dm.Adam(params, lr=cfg.lr)
    hooks = LossHooks(
        perceptual=toy_perceptual_hook() if cfg.use_toy_perceptual else None
    )

    rng_train = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x2]))
    history = []
    log_rows = []
    n_imgs = cfg.latents_per_batch * cfg.cameras_per_iter
    for it in range(cfg.iterations):
        batch = rng_train.choice(
            len(train_z), size=min(cfg.latents_per_batch, len(train_z)),
            replace=False,
        )
        view_picks = {
            int(li): rng_train.choice(
                cfg.target_views_per_latent, size=cfg.cameras_per_iter,
                replace=cfg.cameras_per_iter > cfg.target_views_per_latent,
            )
            for li in batch
        }
        term_sums: dict = {}
        with dm.Tape() as tape:
            tps = generate_triplane_batch(
                backbone.student, [train_z[int(li)] for li in batch]
            )
            total = None
            for bi, li in enumerate(int(x) for x in batch):
                scene = decode_scene(
                    decoder, tps[bi], init_pos[li], scale_max=cfg.scale_max
                )
                images, azim, _, rots, trans = targets[li]
                for vi in view_picks[li]:
                    cam = _pool_camera(cfg, rots, trans, int(vi), azim)
                    pred, _ = raster_render(scene, cam, bg=cfg.background)
                    tgt = dm.tensor(images[int(vi)])
                    loss, report = combined_loss(
                        pred, tgt, cfg.loss_weights, hooks,
                        view_azimuth_deg=cam.azimuth_deg,
                    )
                    for k, val in report.items():
                        if isinstance(val, float):
                            term_sums[k] = term_sums.get(k, 0.0) + val / n_imgs
                    total = loss if total is None else dm.add(total, loss)
            batch_loss = dm.mul(total, 1.0 / n_imgs)
            loss_val = float(batch_loss.item())
            if not math.isfinite(loss_val):
                dump_path = None
                if out_dir is not None:
                    dump_path = out_dir / "diverged.json"
                    dump_path.write_text(json.dumps({
                        "iteration": it,
                        "batch_latents": [int(x) for x in batch],
                        "views": {str(k): v.tolist() for k, v in view_picks.items()},
                        "terms": term_sums,
                    }, indent=2))
                raise TrainingDivergedError(
                    f"non-finite loss at iteration {it}", dump_path=dump_path
                )
            tape.backward(batch_loss)
        opt.step()
        history.append({"iteration": it, **term_sums})
        for k, val in term_sums.items():
            log_rows.append((it, k, val))
        if progress and (it % cfg.log_every == 0 or it == cfg.iterations - 1):
            progress(it, term_sums)

    log_path = None
    if out_dir is not None:
        log_path = out_dir / "training_log.csv"
        with open(log_path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["iteration", "term", "value"])
            writer.writerows(log_rows)

    alarm, worst = divergence_alarm(history)
    held_init = {
        hi: init_positions_for(teacher, z, cfg, cache_dir, digest)
        for hi, z in enumerate(held_z)
    }
    metrics = evaluate(
        teacher, backbone.student, decoder, held_z, cfg,
        init_positions={hi: held_init[hi] for hi in held_init},
    )
    return DistillResult(
        decoder=decoder,
        backbone=backbone,
        init_positions=init_pos,
        metrics=metrics,
        loss_history=history,
        divergence_alarm=alarm,
        worst_smoothed_ratio=worst,
        train_latents=train_z,
        heldout_latents=held_z,
        elapsed_s=time.perf_counter() - t_start,
        log_path=str(log_path) if log_path else None,
    )


def divergence_alarm(history, window: int = 100, factor: float = 1.2):
    """Smoothed-loss watchdog: flags later values above factor * running min."""
    totals = [h.get("total", float("nan")) for h in history]
    if len(totals) < window:
        return False, 1.0
    kernel = np.ones(window) / window
    smooth = np.convolve(np.asarray(totals), kernel, mode="valid")
    running_min = np.minimum.accumulate(smooth)
    ratios = smooth / np.maximum(running_min, 1e-12)
    worst = float(ratios.max())
    return bool(worst > factor), worst


def evaluate(teacher: FittedTeacher, student_gen, decoder: SplatDecoder,
             latents, cfg: TrainConfig, init_positions=None) -> dict:
    """Deterministic metrics against teacher renders (jitter off).

    Perceptual and identity similarity slots report 'n/a' unless hooks
    provide them elsewhere.
    """
    cams = eval_cameras(cfg.camera_mode, cfg.eval_views, cfg.image_size,
                        cfg.image_size)
    rc = cfg.ray_config(jitter=False)
    digest = teacher_digest(teacher)
    mses, ssims = [], []
    for li, z in enumerate(latents):
        if init_positions is not None and li in init_positions:
            pts = init_positions[li]
        else:
            pts = init_positions_for(teacher, z, cfg, None, digest)
        tp = generate_triplane_batch(student_gen, [z])[0]
        scene = decode_scene(decoder, tp, pts, scale_max=cfg.scale_max)
        for cam in cams:
            tgt, _ = teacher.render(z, cam, rc, bg=cfg.background)
            pred, _ = raster_render(scene, cam, bg=cfg.background)
            mses.append(float(((pred.data - tgt) ** 2).mean()))
            ssims.append(ssim_value(pred.data, tgt))
    mse = float(np.mean(mses))
    return {
        "mse": mse,
        "ssim": float(np.mean(ssims)),
        "psnr": float(10.0 * np.log10(1.0 / max(mse, 1e-12))),
        "lpips": "n/a",
        "id_similarity": "n/a",
    }


def benchmark_fps(scene, teacher: FittedTeacher, z, sizes=(256, 512),
                  frames: int = 30, warmup: int = 5, ray_samples: int = 64) -> dict:
    """Median frame times for splat vs volume rendering at each size."""
    report = {}
    for size in sizes:
        cam = orbit_camera(30.0, 10.0, radius=ORBIT_RADIUS, fov_y_deg=ORBIT_FOV,
                           width=size, height=size)
        rc = RayConfig(samples=ray_samples, jitter=False)

        def time_fn(fn):
            for _ in range(warmup):
                fn()
            times = []
            for _ in range(frames):
                t0 = time.perf_counter()
                fn()
                times.append(time.perf_counter() - t0)
            return float(np.median(times))

        t_raster = time_fn(lambda: raster_render(scene, cam))
        t_volume = time_fn(lambda: teacher.render(z, cam, rc))
        report[size] = {
            "raster_s": t_raster,
            "volume_s": t_volume,
            "ratio": t_volume / t_raster,
            "raster_fps": 1.0 / t_raster,
            "volume_fps": 1.0 / t_volume,
        }
    return report


ABLATION_AXES = ("init_strategy", "arch_variant", "loss_knockout", "finetune")

_INIT_ROWS = (("Random Pos", "random"), ("3D Grid", "grid"),
              ("March. Cubes", "marching_cubes"))
_ARCH_ROWS = (("Sequential", "sequential"), ("Parallel", "parallel"),
              ("Sequential Reversed", "sequential_reversed"))


def ablation_configs(base: TrainConfig, axis: str):
    """(row name, config) pairs for one ablation axis, sharing the base seed."""
    if axis == "init_strategy":
        return [(name, replace(base, init_strategy=v)) for name, v in _INIT_ROWS]
    if axis == "arch_variant":
        return [(name, replace(base, arch_variant=v)) for name, v in _ARCH_ROWS]
    if axis == "loss_knockout":
        rows = [("baseline", base)]
        w = base.loss_weights
        rows.append(("w/o L1", replace(base, loss_weights=replace(w, l1=0.0))))
        rows.append(("w/o SSIM", replace(base, loss_weights=replace(w, ssim=0.0))))
        rows.append(("w/o Sobel", replace(base, loss_weights=replace(w, sobel=0.0))))
        if base.use_toy_perceptual:
            rows.append(("w/o perceptual", replace(base, use_toy_perceptual=False)))
        return rows
    if axis == "finetune":
        return [
            ("w/ fine-tuning", replace(base, finetune_backbone=True)),
            ("w/o fine-tuning", replace(base, finetune_backbone=False)),
        ]
    raise ValueError(f"unknown ablation axis {axis!r}; pick one of {ABLATION_AXES}")


def ablation_run(base: TrainConfig, axis: str, teacher: FittedTeacher,
                 out_dir=None, cache_dir=None, progress=None) -> list:
    """Train one model per variant (shared seed/data) and tabulate metrics."""
    rows = []
    for name, cfg in ablation_configs(base, axis):
        sub_dir = Path(out_dir) / name.replace("/", "_").replace(" ", "_") \
            if out_dir is not None else None
        result = distill(cfg, teacher, out_dir=sub_dir, cache_dir=cache_dir,
                         progress=progress)
        rows.append({"variant": name, **{k: v for k, v in result.metrics.items()}})
    if out_dir is not None:
        write_ablation_tables(rows, Path(out_dir), axis)
    return rows


def write_ablation_tables(rows, out_dir: Path, axis: str) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    cols = ["variant", "mse", "ssim", "psnr"]
    with open(out_dir / f"ablation_{axis}.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(cols)
        for r in rows:
            writer.writerow([r[c] for c in cols])
    lines = ["| " + " | ".join(cols) + " |",
             "|" + "|".join("---" for _ in cols) + "|"]
    for r in rows:
        lines.append(
            "| " + " | ".join(
                f"{r[c]:.4f}" if isinstance(r[c], float) else str(r[c])
                for c in cols
            ) + " |"
        )
    (out_dir / f"ablation_{axis}.md").write_text("\n".join(lines) + "\n")
