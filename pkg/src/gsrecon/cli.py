"""Command-line entry point wiring the library into reproducible workflows.

Every run writes its artifacts under a per-run directory containing an echo
of the resolved configuration and a MANIFEST listing inputs, seeds, and
content hashes. The output root comes from --out, the GSRECON_OUT
environment variable, or ./runs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import tensor as T
from .cameras import load_cameras
from .config import RunConfig, load_config
from .data import load_dataset, make_dataset, save_dataset
from .gaussians import GaussianSet, export_ply, import_ply
from .mesh import extract_mesh, save_mesh_obj, save_mesh_ply
from .metrics import chamfer_fscore, evaluate_views, opacity_mass_outside
from .network import (NetworkConfig, init_weights, load_checkpoint,
                      reconstruct, save_checkpoint, weights_to_values)
from .render import rasterize, render_forward, save_png
from .training import (TrainConfig, compute_loss, evaluate_scenes, sso_fit,
                       train_loop)

COMMANDS = ("gen-data", "train", "reconstruct", "render", "sso-fit",
            "extract-mesh", "eval", "grad-check", "ablate")

ABLATION_SWITCHES = ("scale_act", "up_blocks", "mask_loss", "upsampler",
                     "position_head")


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _make_run_dir(cfg: RunConfig, command: str) -> Path:
    root = Path(cfg.out or os.environ.get("GSRECON_OUT", "runs"))
    stamp = time.strftime("%Y%m%d-%H%M%S")
    run = root / f"{command}-{stamp}"
    n = 0
    while run.exists():
        n += 1
        run = root / f"{command}-{stamp}-{n}"
    run.mkdir(parents=True)
    cfg.save(run / "config_echo.json")
    return run


def _write_manifest(run_dir: Path, inputs: list, seeds: dict):
    artifacts = {}
    for p in sorted(run_dir.rglob("*")):
        if p.is_file() and p.name != "MANIFEST.json":
            artifacts[str(p.relative_to(run_dir))] = _sha256(p)
    manifest = {"inputs": [str(p) for p in inputs], "seeds": seeds,
                "artifacts": artifacts}
    (run_dir / "MANIFEST.json").write_text(json.dumps(manifest, indent=1,
                                                      sort_keys=True))


def _load_scene(dataset_path: str, scene_id: str | None):
    scenes = load_dataset(dataset_path)
    if scene_id is None:
        return scenes[0]
    for s in scenes:
        if s.scene_id == scene_id:
            return s
    raise SystemExit(f"scene {scene_id!r} not found in {dataset_path}; "
                     f"available: {[s.scene_id for s in scenes]}")


def cmd_gen_data(cfg: RunConfig, args) -> int:
    d = cfg.data
    scenes = make_dataset(d.n_scenes, seed=cfg.seed, n_views=d.n_views,
                          fov_deg=d.fov_deg, radius=d.radius,
                          image_hw=tuple(d.image_hw),
                          eval_fraction=d.eval_fraction)
    save_dataset(scenes, d.path, previews=d.previews)
    run = _make_run_dir(cfg, "gen-data")
    hashes = {str(p.relative_to(d.path)): _sha256(p)
              for p in sorted(Path(d.path).rglob("*")) if p.is_file()}
    (run / "dataset_hashes.json").write_text(json.dumps(hashes, indent=1,
                                                        sort_keys=True))
    _write_manifest(run, [], {"seed": cfg.seed})
    print(f"wrote {len(scenes)} scenes to {d.path} "
          f"({sum(len(s.views) for s in scenes)} views); run dir {run}")
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    scenes = load_dataset(cfg.data.path)
    k = min(cfg.data.holdout_scenes, max(0, len(scenes) - 1))
    train_scenes = scenes[:len(scenes) - k] if k else scenes
    eval_scenes = scenes[len(scenes) - k:] if k else []
    run = _make_run_dir(cfg, "train")
    print(f"training on {len(train_scenes)} scenes "
          f"({len(eval_scenes)} held out) -> {run}")
    weights, log = train_loop(train_scenes, cfg.network, cfg.train,
                              out_dir=run, eval_scenes=eval_scenes or None,
                              progress=lambda e: print(
                                  f"step {e['step']:6d} lr {e['lr']:.2e} "
                                  f"loss {e['loss']:.5f}"
                                  + (f" eval {e['eval_psnr']:.2f} dB"
                                     if "eval_psnr" in e else "")))
    if eval_scenes:
        mean_psnr, _ = evaluate_scenes(weights, cfg.network, eval_scenes)
        print(f"held-out scene PSNR: {mean_psnr:.2f} dB")
    _write_manifest(run, [cfg.data.path], {"seed": cfg.train.seed})
    return 0


def _reconstruct_from_args(cfg: RunConfig, args):
    wv_cfg = cfg.network
    if args.checkpoint:
        wv_cfg, weights, _ = load_checkpoint(args.checkpoint)
    else:
        weights = init_weights(wv_cfg, cfg.seed)
    if args.dataset:
        scene = _load_scene(args.dataset, args.scene)
        inputs = scene.input_views()
        images = np.stack([v.image for v in inputs])
        cams = [v.camera for v in inputs]
    else:
        if not (args.cameras and args.images):
            raise SystemExit("reconstruct needs either --dataset or "
                             "--cameras plus --images")
        cams = load_cameras(args.cameras)
        paths = args.images.split(",")
        if len(paths) != len(cams):
            raise SystemExit(f"{len(paths)} images but {len(cams)} cameras")
        loaded = []
        for p in paths:
            if p.endswith(".npy"):
                loaded.append(np.load(p))
            else:
                from .render import load_png
                loaded.append(load_png(p)[..., :3])
        images = np.stack(loaded).astype(np.float32)
    wv = weights_to_values(weights, watch=False)
    return reconstruct(images, cams, wv, wv_cfg).detached()


def cmd_reconstruct(cfg: RunConfig, args) -> int:
    gset = _reconstruct_from_args(cfg, args)
    run = _make_run_dir(cfg, "reconstruct")
    out = run / "gaussians.ply"
    export_ply(gset, out)
    _write_manifest(run, [p for p in (args.checkpoint, args.dataset,
                                      args.cameras) if p],
                    {"seed": cfg.seed})
    print(f"wrote {len(gset)} gaussians to {out}")
    return 0


def cmd_render(cfg: RunConfig, args) -> int:
    gset = import_ply(args.ply)
    cams = load_cameras(args.cameras)
    run = _make_run_dir(cfg, "render")
    bg = (1.0, 1.0, 1.0) if args.white_background else (0.0, 0.0, 0.0)
    for i, cam in enumerate(cams):
        rgb, alpha, depth = render_forward(gset, cam, bg)
        save_png(rgb, run / f"view_{i:03d}.png")
        np.save(run / f"view_{i:03d}.npy", rgb.astype(np.float32))
        np.save(run / f"alpha_{i:03d}.npy", alpha.astype(np.float32))
        np.save(run / f"depth_{i:03d}.npy", depth.astype(np.float32))
    _write_manifest(run, [args.ply, args.cameras], {"seed": cfg.seed})
    print(f"rendered {len(cams)} views to {run}")
    return 0


def cmd_sso_fit(cfg: RunConfig, args) -> int:
    scene = _load_scene(args.dataset, args.scene)
    inputs = scene.input_views()
    holdout = [(v.image, v.camera) for v in scene.split_views("eval")]
    gset, info = sso_fit([v.image for v in inputs],
                         [v.mask for v in inputs],
                         [v.camera for v in inputs],
                         cfg.train, steps=args.steps, holdout=holdout,
                         s_min=cfg.network.s_min, s_max=cfg.network.s_max)
    run = _make_run_dir(cfg, "sso-fit")
    export_ply(gset, run / "fitted.ply")
    summary = {"final_loss": info["losses"][-1] if info["losses"] else None,
               "holdout_psnr": info.get("holdout_psnr")}
    (run / "sso_report.json").write_text(json.dumps(summary, indent=1))
    _write_manifest(run, [args.dataset], {"seed": cfg.train.seed})
    print(f"sso-fit: {summary}")
    return 0


def cmd_extract_mesh(cfg: RunConfig, args) -> int:
    gset = import_ply(args.ply)
    m = cfg.mesh
    verts, faces, colors = extract_mesh(
        gset, n_cameras=m.n_cameras, camera_radius=m.camera_radius,
        voxel=m.voxel, trunc=m.trunc, image_hw=tuple(m.image_hw),
        min_fraction=m.min_fraction)
    run = _make_run_dir(cfg, "extract-mesh")
    save_mesh_ply(run / "mesh.ply", verts, faces, colors)
    save_mesh_obj(run / "mesh.obj", verts, faces)
    _write_manifest(run, [args.ply], {"seed": cfg.seed})
    print(f"mesh: {len(verts)} vertices, {len(faces)} faces -> {run}")
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    scenes = load_dataset(args.dataset)
    net_cfg, weights, _ = load_checkpoint(args.checkpoint)
    wv = weights_to_values(weights, watch=False)
    run = _make_run_dir(cfg, "eval")
    rows = ["scene,psnr,ssim,chamfer,fscores"]
    texts = []
    for scene in scenes:
        inputs = scene.input_views()
        evals = scene.split_views("eval")
        images = np.stack([v.image for v in inputs])
        gset = reconstruct(images, [v.camera for v in inputs], wv, net_cfg)
        preds = [render_forward(gset, v.camera)[0] for v in evals]
        rep = evaluate_views(preds, [v.image for v in evals])
        rep.n_points_pred = len(gset)
        rep.n_points_gt = len(scene.gaussians)
        cd, fs = chamfer_fscore(gset.positions.data,
                                scene.gaussians.positions.data,
                                thresholds=cfg.eval.thresholds,
                                icp=cfg.eval.icp,
                                max_points=cfg.eval.max_points)
        rep.chamfer, rep.fscores = cd, fs
        rows.append(rep.csv_row(scene.scene_id))
        texts.append(f"[{scene.scene_id}]\n{rep.as_text()}")
    (run / "report.csv").write_text("\n".join(rows) + "\n")
    (run / "report.txt").write_text("\n\n".join(texts) + "\n")
    _write_manifest(run, [args.dataset, args.checkpoint], {"seed": cfg.seed})
    print("\n\n".join(texts))
    return 0


def cmd_grad_check(cfg: RunConfig, args) -> int:
    """Finite-difference audit of the end-to-end gradient, per parameter
    group, in 64-bit on a tiny configuration."""
    from .data import gen_scene, render_dataset
    tol = args.tolerance
    net = NetworkConfig(patch=4, width=16, enc_layers=1, heads=2, up_blocks=2,
                        window=64, views=4, image_hw=(8, 8))
    weights = {k: v.astype(np.float64)
               for k, v in init_weights(net, cfg.seed).items()}
    sample = render_dataset(gen_scene(cfg.seed), n_views=6, image_hw=(8, 8),
                            seed=cfg.seed)
    inputs = sample.input_views()
    sup = sample.split_views("train")[:1]
    images = np.stack([v.image for v in inputs]).astype(np.float64)
    tcfg = TrainConfig(views_sup=1, w_perceptual=0.5, seed=cfg.seed)

    def loss_fn(w):
        with T.Tape():
            wv = weights_to_values(w)
            gset = reconstruct(images, [v.camera for v in inputs], wv, net)
            outs = [rasterize(gset, v.camera) for v in sup]
            from .training import PerceptualExtractor
            total, _ = compute_loss(outs, [v.image.astype(np.float64)
                                           for v in sup],
                                    [v.mask.astype(np.float64) for v in sup],
                                    tcfg, PerceptualExtractor(cfg.seed))
            total.backward()
            return total.item(), {k: v.grad for k, v in wv.items()}

    _, grads = loss_fn(weights)
    rng = np.random.default_rng(cfg.seed)
    groups = sorted({name.split(".")[0] for name in weights})
    worst_overall = 0.0
    status = 0
    for group in groups:
        names = [n for n in weights if n.split(".")[0] == group]
        worst = 0.0
        for name in names:
            for fi in rng.integers(0, weights[name].size, size=2):
                eps = 1e-5
                for sign in (+1, -1):
                    w2 = {k: v.copy() for k, v in weights.items()}
                    w2[name].flat[fi] += sign * eps
                    val, _ = loss_fn(w2)
                    if sign > 0:
                        hi = val
                    else:
                        lo = val
                num = (hi - lo) / (2 * eps)
                err = abs(grads[name].flat[fi] - num) / max(1.0, abs(num))
                worst = max(worst, err)
        ok = worst <= tol
        if not ok:
            status = 1
        worst_overall = max(worst_overall, worst)
        print(f"{group:12s} max relative error {worst:.3e} "
              f"{'ok' if ok else 'FAIL'}")
    print(f"overall      max relative error {worst_overall:.3e} "
          f"(tolerance {tol:g})")
    return status


def _ablate_variants(switch: str, cfg: RunConfig):
    """Paired (label, network overrides, train overrides) for one switch."""
    if switch == "scale_act":
        return [("interp", {"scale_activation": "interp"}, {}),
                ("exp", {"scale_activation": "exp"}, {})]
    if switch == "up_blocks":
        return [("up2", {"up_blocks": 2}, {}),
                ("up0", {"up_blocks": 0}, {})]
    if switch == "mask_loss":
        return [("mask-on", {}, {"w_mask": 1.0}),
                ("mask-off", {}, {"w_mask": 0.0})]
    if switch == "upsampler":
        return [("attention", {"upsampler": "attention"}, {}),
                ("conv", {"upsampler": "conv"}, {})]
    if switch == "position_head":
        return [("depth", {"position_head": "depth"}, {}),
                ("xyz", {"position_head": "xyz"}, {})]
    raise SystemExit(f"unknown ablation switch {switch!r}; "
                     f"valid: {ABLATION_SWITCHES}")


def run_ablation(cfg: RunConfig, switches, scenes, eval_scenes, seeds=None):
    """Train paired runs differing in exactly one switch; returns table rows
    of (switch, label, seed, psnr, ssim, floater_mass)."""
    import dataclasses
    seeds = seeds or [cfg.train.seed]
    rows = []
    for switch in switches:
        for label, net_over, train_over in _ablate_variants(switch, cfg):
            for seed in seeds:
                net = dataclasses.replace(cfg.network, **net_over)
                tr = dataclasses.replace(cfg.train, seed=seed, **train_over)
                weights, _ = train_loop(scenes, net, tr)
                psnr_mean, _ = evaluate_scenes(weights, net, eval_scenes)
                ssims, masses = [], []
                wv = weights_to_values(weights, watch=False)
                for scene in eval_scenes:
                    inputs = scene.input_views()
                    gset = reconstruct(np.stack([v.image for v in inputs]),
                                       [v.camera for v in inputs], wv, net)
                    evals = scene.split_views("eval")
                    preds = [render_forward(gset, v.camera)[0] for v in evals]
                    ssims.append(evaluate_views(
                        preds, [v.image for v in evals]).ssim_mean)
                    masses.append(opacity_mass_outside(
                        gset.positions.data, gset.opacities.data,
                        radius=1.1))
                rows.append({"switch": switch, "variant": label, "seed": seed,
                             "psnr": psnr_mean,
                             "ssim": float(np.mean(ssims)),
                             "floater_mass": float(np.mean(masses))})
    return rows


def format_ablation_table(rows) -> str:
    lines = [f"{'switch':14s} {'variant':10s} {'seed':>4s} {'PSNR':>7s} "
             f"{'SSIM':>7s} {'floaters':>10s}"]
    for r in rows:
        lines.append(f"{r['switch']:14s} {r['variant']:10s} {r['seed']:4d} "
                     f"{r['psnr']:7.2f} {r['ssim']:7.4f} "
                     f"{r['floater_mass']:10.2f}")
    return "\n".join(lines)


def cmd_ablate(cfg: RunConfig, args) -> int:
    switches = (args.switches.split(",") if args.switches
                else list(ABLATION_SWITCHES))
    scenes = load_dataset(args.dataset)
    k = min(cfg.data.holdout_scenes, max(0, len(scenes) - 1))
    train_scenes = scenes[:len(scenes) - k]
    eval_scenes = scenes[len(scenes) - k:]
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    rows = run_ablation(cfg, switches, train_scenes, eval_scenes, seeds)
    table = format_ablation_table(rows)
    run = _make_run_dir(cfg, "ablate")
    (run / "ablation_report.txt").write_text(table + "\n")
    (run / "ablation_rows.json").write_text(json.dumps(rows, indent=1))
    _write_manifest(run, [args.dataset], {"seeds": seeds or [cfg.train.seed]})
    print(table)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gsrecon",
        description="Sparse-view reconstruction into 3D Gaussians: data "
                    "generation, training, rendering, meshing, evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON run configuration file")
        p.add_argument("--out", help="output root (default $GSRECON_OUT or ./runs)")
        p.add_argument("overrides", nargs="*",
                       help="dotted-key overrides, e.g. train.lr=0.001")

    common(sub.add_parser("gen-data", help="generate a procedural dataset"))
    common(sub.add_parser("train", help="train the reconstructor"))

    p = sub.add_parser("reconstruct", help="images + cameras -> splat PLY")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--dataset")
    p.add_argument("--scene")
    p.add_argument("--cameras")
    p.add_argument("--images", help="comma-separated .npy/.png paths")

    p = sub.add_parser("render", help="render a splat PLY from cameras")
    common(p)
    p.add_argument("--ply", required=True)
    p.add_argument("--cameras", required=True)
    p.add_argument("--white-background", action="store_true")

    p = sub.add_parser("sso-fit", help="single-scene direct optimization")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--scene")
    p.add_argument("--steps", type=int, default=2000)

    p = sub.add_parser("extract-mesh", help="splat PLY -> triangle mesh")
    common(p)
    p.add_argument("--ply", required=True)

    p = sub.add_parser("eval", help="image + geometry metrics on a dataset")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("grad-check", help="finite-difference gradient audit")
    common(p)
    p.add_argument("--tolerance", type=float, default=1e-4)

    p = sub.add_parser("ablate", help="paired single-switch ablation runs")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--switches", help=f"comma list from {ABLATION_SWITCHES}")
    p.add_argument("--seeds", help="comma list of seeds")
    return parser


def dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        cfg = load_config(args.config, args.overrides)
        if args.out:
            cfg.out = args.out
    except (KeyError, ValueError, TypeError, FileNotFoundError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    handler = {
        "gen-data": cmd_gen_data,
        "train": cmd_train,
        "reconstruct": cmd_reconstruct,
        "render": cmd_render,
        "sso-fit": cmd_sso_fit,
        "extract-mesh": cmd_extract_mesh,
        "eval": cmd_eval,
        "grad-check": cmd_grad_check,
        "ablate": cmd_ablate,
    }[args.command]
    try:
        return handler(cfg, args)
    except (ValueError, FileNotFoundError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main():
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
