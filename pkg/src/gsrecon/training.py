"""Training losses, deferred backpropagation through rendering, the
end-to-end training loop, and a direct single-scene optimizer."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .cameras import Camera
from .gaussians import GaussianSet, activate, merge_views
from .metrics import psnr
from .network import (NetworkConfig, init_weights, reconstruct,
                      save_checkpoint, weights_to_values)
from .optim import AdamW, clip_by_global_norm
from .render import RenderOutput, rasterize, render_backward, render_forward

BLACK = (0.0, 0.0, 0.0)


@dataclass
class TrainConfig:
    lr: float = 3e-4
    warmup: int = 200
    total_steps: int = 5000
    betas: tuple[float, float] = (0.9, 0.95)
    weight_decay: float = 0.05
    batch: int = 1
    views_in: int = 4
    views_sup: int = 4
    w_perceptual: float = 0.5
    w_mask: float = 1.0
    grad_clip: float = 1.0          # 0 disables
    deferred: bool = True
    sso_lr: float = 0.03
    seed: int = 0
    eval_every: int = 500
    checkpoint_every: int = 1000
    log_every: int = 25

    def __post_init__(self):
        if self.views_sup < 1:
            raise ValueError("views_sup must be >= 1")
        for name in ("lr", "warmup", "total_steps", "batch", "views_in"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class LossReport:
    """Per-view loss components; total = mean(image_l2 + wp*perceptual)
    + wm*mean(mask)."""

    total: float
    image_l2: list[float]
    perceptual: list[float]
    mask: list[float]
    w_perceptual: float = 0.5
    w_mask: float = 1.0

    @property
    def image_l2_mean(self):
        return float(np.mean(self.image_l2))

    @property
    def perceptual_mean(self):
        return float(np.mean(self.perceptual))

    @property
    def mask_mean(self):
        return float(np.mean(self.mask))

    def reassembled_total(self) -> float:
        img = np.mean([l2 + self.w_perceptual * lp
                       for l2, lp in zip(self.image_l2, self.perceptual)])
        return float(img + self.w_mask * np.mean(self.mask))


class PerceptualExtractor:
    """Frozen multi-scale feature stack: three strided 3x3 linear
    convolutions with orthogonal columns, seed-initialized. Features are
    linear in the image, so the squared-feature loss is quadratic along
    image blends."""

    STAGES = ((3, 8), (8, 16), (16, 32))

    def __init__(self, seed: int = 0):
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0x9E77)))
        self.filters = []
        for cin, cout in self.STAGES:
            a = rng.normal(size=(9 * cin, cout))
            q, _ = np.linalg.qr(a)
            self.filters.append(q.astype(np.float32))

    def features(self, image: T.Value) -> list[T.Value]:
        x = image.reshape(1, *image.shape)
        feats = []
        for w in self.filters:
            _, h, wd, _ = x.shape
            if min(h, wd) < 2:
                break
            dt = x.dtype
            wv = T.Value(w.astype(dt))
            # pad so the strided 3x3 grid tiles exactly at any parity
            padded = T.pad2d(x, 1, h % 2, 1, wd % 2)
            cols = T.patches(padded, 3, 2)
            b, ho, wo, _ = cols.shape
            x = (cols.reshape(b * ho * wo, w.shape[0]) @ wv).reshape(
                b, ho, wo, w.shape[1])
            feats.append(x)
        return feats

    def loss(self, a: T.Value, b: T.Value) -> T.Value:
        fa = self.features(a)
        fb = self.features(b)
        total = None
        for x, y in zip(fa, fb):
            d = x - y
            term = (d * d).mean()
            total = term if total is None else total + term
        return total


def _view_losses(rgb: T.Value, alpha: T.Value, gt_image: np.ndarray,
                 gt_mask: np.ndarray, cfg: TrainConfig,
                 perceptual: PerceptualExtractor | None):
    dt = rgb.dtype
    gt_i = T.Value(np.asarray(gt_image, dtype=dt))
    gt_m = T.Value(np.asarray(gt_mask, dtype=dt))
    di = rgb - gt_i
    l2 = (di * di).mean()
    if cfg.w_perceptual > 0 and perceptual is not None:
        lp = perceptual.loss(rgb, gt_i)
    else:
        lp = T.Value(np.zeros((), dtype=dt))
    dm = alpha - gt_m
    lmask = (dm * dm).mean()
    return l2, lp, lmask


def compute_loss(outputs: list[RenderOutput], gt_images, gt_masks,
                 cfg: TrainConfig,
                 perceptual: PerceptualExtractor | None = None):
    """Mean-over-views image loss (L2 + weighted perceptual) plus weighted
    mask loss; returns (scalar Value on tape, LossReport)."""
    vp = len(outputs)
    l2s, lps, lms = [], [], []
    total = None
    for out, gi, gm in zip(outputs, gt_images, gt_masks):
        l2, lp, lm = _view_losses(out.rgb, out.alpha, gi, gm, cfg, perceptual)
        contrib = (l2 + cfg.w_perceptual * lp + cfg.w_mask * lm) * (1.0 / vp)
        total = contrib if total is None else total + contrib
        l2s.append(l2.item())
        lps.append(lp.item())
        lms.append(lm.item())
    report = LossReport(total.item(), l2s, lps, lms,
                        cfg.w_perceptual, cfg.w_mask)
    return total, report


def deferred_backward(gset: GaussianSet, cameras: list[Camera], gt_images,
                      gt_masks, cfg: TrainConfig,
                      perceptual: PerceptualExtractor | None = None,
                      background=BLACK):
    """Gradient of the training objective at the Gaussian attributes,
    rendering one supervision view at a time.

    Each view is rendered without recording; the per-view loss gradient with
    respect to the rendered image and alpha is computed under a local tape,
    then pushed through a fresh re-render of that view. Only one view's
    rendering activations are ever live. Returns (grads dict, LossReport).
    """
    vp = len(cameras)
    grads = {
        "positions": np.zeros_like(gset.positions.data),
        "rotations": np.zeros_like(gset.rotations.data),
        "scales": np.zeros_like(gset.scales.data),
        "opacities": np.zeros_like(gset.opacities.data),
        "colors": np.zeros_like(gset.colors.data),
    }
    l2s, lps, lms = [], [], []
    total = 0.0
    for cam, gi, gm in zip(cameras, gt_images, gt_masks):
        rgb, alpha, _ = render_forward(gset, cam, background)
        with T.Tape() as lt:
            img = T.Value(rgb, watch=True)
            al = T.Value(alpha, watch=True)
            l2, lp, lm = _view_losses(img, al, gi, gm, cfg, perceptual)
            contrib = (l2 + cfg.w_perceptual * lp + cfg.w_mask * lm) * (1.0 / vp)
            contrib.backward()
        g_img = img.grad if img.grad is not None else np.zeros_like(rgb)
        g_al = al.grad if al.grad is not None else np.zeros_like(alpha)
        view_grads = render_backward(gset, cam, g_img, g_al,
                                     background=background)
        for k in grads:
            grads[k] += view_grads[k]
        total += contrib.item()
        l2s.append(l2.item())
        lps.append(lp.item())
        lms.append(lm.item())
    report = LossReport(total, l2s, lps, lms, cfg.w_perceptual, cfg.w_mask)
    return grads, report


def backward_into_network(tape: T.Tape, gset: GaussianSet, grads: dict):
    """Continue a deferred backward from Gaussian-attribute gradients into
    whatever produced the set on the given tape."""
    seeds = {gset.positions: grads["positions"],
             gset.rotations: grads["rotations"],
             gset.scales: grads["scales"],
             gset.opacities: grads["opacities"],
             gset.colors: grads["colors"]}
    tape.backward({v: g for v, g in seeds.items() if v.attached})


def _stack_views(views):
    images = np.stack([v.image for v in views]).astype(np.float32)
    masks = np.stack([v.mask for v in views]).astype(np.float32)
    cams = [v.camera for v in views]
    return images, masks, cams


def evaluate_scenes(weights, net_cfg: NetworkConfig, scenes,
                    background=BLACK, split: str = "eval"):
    """Reconstruct each scene from its input views and report PSNR on the
    requested split. Returns (mean psnr, per-scene list)."""
    per_scene = []
    wv = weights_to_values(weights, watch=False)
    for scene in scenes:
        inputs = [v for v in scene.views if v.split == "input"]
        evals = [v for v in scene.views if v.split == split]
        images, _, cams = _stack_views(inputs)
        gset = reconstruct(images, cams, wv, net_cfg)
        vals = []
        for v in evals:
            rgb, _, _ = render_forward(gset, v.camera, background)
            vals.append(psnr(rgb, v.image))
        per_scene.append(float(np.mean(vals)))
    return float(np.mean(per_scene)), per_scene


def train_loop(dataset, net_cfg: NetworkConfig, cfg: TrainConfig,
               out_dir=None, eval_scenes=None, weights=None,
               background=BLACK, progress=None):
    """Feed-forward training: sample a scene, reconstruct from its input
    views, render sampled supervision views, apply the image/mask losses,
    deferred backward, optimizer step. Fully reproducible from cfg.seed.

    Returns (weights, log) where log is a list of per-step dicts; the same
    records are appended to <out_dir>/metrics.log as JSON lines.
    """
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0x7A1)))
    if weights is None:
        weights = init_weights(net_cfg, cfg.seed)
    opt = AdamW(cfg.lr, cfg.betas, weight_decay=cfg.weight_decay,
                warmup=cfg.warmup, total_steps=cfg.total_steps)
    perceptual = PerceptualExtractor(cfg.seed) if cfg.w_perceptual > 0 else None
    log: list[dict] = []
    log_file = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_file = open(out_dir / "metrics.log", "a")

    queue: list[int] = []
    images_seen = 0
    t_start = time.perf_counter()
    for step in range(1, cfg.total_steps + 1):
        batch_grads: dict[str, np.ndarray] = {}
        reports = []
        for _ in range(cfg.batch):
            if not queue:
                queue = list(rng.permutation(len(dataset)))
            scene = dataset[queue.pop()]
            inputs = [v for v in scene.views if v.split == "input"]
            pool = [v for v in scene.views if v.split == "train"]
            take = min(cfg.views_sup, len(pool))
            sup = [pool[i] for i in rng.choice(len(pool), take, replace=False)]
            in_images, _, in_cams = _stack_views(inputs)
            sup_images, sup_masks, sup_cams = _stack_views(sup)

            with T.Tape() as tape:
                wv = weights_to_values(weights)
                gset = reconstruct(in_images, in_cams, wv, net_cfg)
                if cfg.deferred:
                    ggrads, report = deferred_backward(
                        gset, sup_cams, sup_images, sup_masks, cfg,
                        perceptual, background)
                    backward_into_network(tape, gset, ggrads)
                else:
                    outs = [rasterize(gset, c, background) for c in sup_cams]
                    total, report = compute_loss(outs, sup_images, sup_masks,
                                                 cfg, perceptual)
                    total.backward()
            for name, v in wv.items():
                g = v.grad if v.grad is not None else np.zeros_like(weights[name])
                if name in batch_grads:
                    batch_grads[name] += g
                else:
                    batch_grads[name] = g.copy()
            reports.append(report)
            images_seen += len(inputs) + len(sup)

        if cfg.batch > 1:
            for g in batch_grads.values():
                g /= cfg.batch
        gnorm = clip_by_global_norm(batch_grads, cfg.grad_clip)
        lr_now = opt.current_lr()
        applied = opt.step(weights, batch_grads)

        entry = {
            "step": step, "lr": lr_now,
            "loss": float(np.mean([r.total for r in reports])),
            "image_l2": float(np.mean([r.image_l2_mean for r in reports])),
            "perceptual": float(np.mean([r.perceptual_mean for r in reports])),
            "mask": float(np.mean([r.mask_mean for r in reports])),
            "grad_norm": gnorm, "images_seen": images_seen,
            "applied": applied,
        }
        if eval_scenes and cfg.eval_every and step % cfg.eval_every == 0:
            entry["eval_psnr"], _ = evaluate_scenes(weights, net_cfg,
                                                    eval_scenes, background)
        if step % max(1, cfg.log_every) == 0 or step == cfg.total_steps:
            log.append(entry)
            if log_file:
                log_file.write(json.dumps(entry) + "\n")
                log_file.flush()
            if progress:
                progress(entry)
        if out_dir and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            save_checkpoint(out_dir / f"ckpt_{step:06d}.bin", net_cfg, weights,
                            extra={"step": step, "images_seen": images_seen})
    if out_dir:
        save_checkpoint(Path(out_dir) / "ckpt_final.bin", net_cfg, weights,
                        extra={"step": cfg.total_steps,
                               "images_seen": images_seen,
                               "wall_s": time.perf_counter() - t_start})
        if log_file:
            log_file.close()
    return weights, log


def _init_raw_maps(shape_hw, n_views, rng):
    h, w = shape_hw
    maps = []
    for _ in range(n_views):
        raw = rng.normal(0.0, 0.01, size=(h, w, 12)).astype(np.float32)
        raw[..., 1] = 1.0      # rotation w starts at identity
        raw[..., 0] = 0.0      # depth logit at mid-frustum
        maps.append(raw)
    return maps


def sso_fit(images, masks, cameras: list[Camera], cfg: TrainConfig,
            steps: int = 2000, holdout=None, background=BLACK,
            s_min: float | None = None, s_max: float | None = None):
    """Single-scene optimization oracle: fit raw attribute maps directly
    (no network) through activate + rasterize with the training objective.

    `holdout`, when given, is a list of (image, camera) pairs scored by PSNR
    after fitting. Returns (GaussianSet, info dict). Divergence (non-finite
    loss) aborts with diagnostics.
    """
    if len(images) < 1:
        raise ValueError("sso_fit: need at least one view")
    s_min = cfg_val(s_min, 0.005)
    s_max = cfg_val(s_max, 0.02)
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0x550)))
    h, w = images[0].shape[:2]
    maps = _init_raw_maps((h, w), len(images), rng)
    opt = AdamW(cfg.sso_lr, cfg.betas, weight_decay=0.0, warmup=0,
                total_steps=max(steps, 1))
    perceptual = PerceptualExtractor(cfg.seed) if cfg.w_perceptual > 0 else None
    losses = []

    def build(map_values):
        sets = [activate(mv, cam, s_min, s_max)
                for mv, cam in zip(map_values, cameras)]
        return merge_views(sets)

    for step in range(steps):
        with T.Tape() as tape:
            mvals = [T.Value(m, watch=True) for m in maps]
            gset = build(mvals)
            ggrads, report = deferred_backward(gset, cameras, images, masks,
                                               cfg, perceptual, background)
            backward_into_network(tape, gset, ggrads)
        if not np.isfinite(report.total):
            raise RuntimeError(f"sso_fit diverged at step {step}: "
                               f"loss={report.total}, report={report}")
        grads = {str(i): (mv.grad if mv.grad is not None
                          else np.zeros_like(maps[i]))
                 for i, mv in enumerate(mvals)}
        if cfg.grad_clip:
            clip_by_global_norm(grads, cfg.grad_clip)
        opt.step({str(i): m for i, m in enumerate(maps)}, grads)
        losses.append(report.total)

    final = build([T.Value(m) for m in maps]).detached()
    info = {"losses": losses}
    if holdout:
        vals = []
        for img, cam in holdout:
            rgb, _, _ = render_forward(final, cam, background)
            vals.append(psnr(rgb, img))
        info["holdout_psnr"] = float(np.mean(vals))
        info["holdout_psnr_per_view"] = vals
    return final, info


def cfg_val(value, default):
    return default if value is None else value
