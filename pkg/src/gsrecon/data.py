"""Procedural ground-truth scenes and multi-view datasets.

Ground truth is itself a GaussianSet, so reference renders are exact and
geometry metrics have an exact oracle. Every byte of a dataset is
regenerable from (seed, config).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cameras import Camera, load_cameras, save_cameras
from .gaussians import GaussianSet, export_ply, import_ply
from .render import render_forward, save_png

SCENE_RADIUS = 1.0           # procedural objects fit in the unit sphere


@dataclass
class ViewRecord:
    image: np.ndarray        # (H, W, 3) float32 in [0, 1]
    mask: np.ndarray         # (H, W) float32 alpha
    camera: Camera
    split: str               # "input" | "train" | "eval"
    index: int


@dataclass
class SceneSample:
    scene_id: str
    seed: int
    gaussians: GaussianSet
    views: list[ViewRecord]

    def input_views(self):
        return [v for v in self.views if v.split == "input"]

    def split_views(self, split: str):
        return [v for v in self.views if v.split == split]


def gen_scene(seed: int) -> GaussianSet:
    """Procedural object: 3-8 ellipsoidal blobs, each a surface cluster of
    50-400 Gaussians with smoothly varying colors, inside the unit sphere."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x5CE)))
    n_blobs = int(rng.integers(3, 9))
    pos, quat, scale, opac, color = [], [], [], [], []
    for _ in range(n_blobs):
        center = rng.normal(size=3)
        center *= rng.uniform(0.0, 0.55) / max(np.linalg.norm(center), 1e-9)
        axes = rng.uniform(0.08, 0.35, size=3)
        limit = 0.95 - np.linalg.norm(center)
        if axes.max() > limit:
            axes *= limit / axes.max()
        count = int(rng.integers(50, 401))
        dirs = rng.normal(size=(count, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        pts = center + dirs * axes
        base = rng.uniform(0.15, 0.9, size=3)
        grad_dir = rng.normal(size=3)
        grad_dir /= np.linalg.norm(grad_dir)
        amp = rng.uniform(-0.4, 0.4, size=3)
        shade = (pts @ grad_dir)[:, None] * amp
        cols = np.clip(base + shade, 0.05, 0.95)
        q = rng.normal(size=(count, 4))
        q /= np.linalg.norm(q, axis=1, keepdims=True)
        pos.append(pts)
        quat.append(q)
        scale.append(rng.uniform(0.008, 0.02, size=(count, 3)))
        opac.append(rng.uniform(0.55, 0.95, size=count))
        color.append(cols)
    return GaussianSet.from_arrays(np.concatenate(pos), np.concatenate(quat),
                                   np.concatenate(scale), np.concatenate(opac),
                                   np.concatenate(color))


def _sphere_camera(az_deg: float, elev_deg: float, radius: float,
                   fov_deg: float, hw, near: float, far: float) -> Camera:
    a, e = math.radians(az_deg), math.radians(elev_deg)
    p = radius * np.array([math.cos(e) * math.cos(a), math.sin(e),
                           math.cos(e) * math.sin(a)])
    return Camera.look_at(p, (0, 0, 0), fov_deg, hw[1], hw[0], near, far)


def render_dataset(scene: GaussianSet, n_views: int = 12,
                   fov_deg: float = 50.0, radius: float = 2.0, seed: int = 0,
                   image_hw=(64, 64), eval_fraction: float = 0.25,
                   scene_id: str | None = None) -> SceneSample:
    """Multi-view sample: 4 input views at azimuths {0, 90, 180, 270} and
    elevation 20 (both jittered +-10 under seed), the rest random on the
    same sphere; black-background renders with exact alpha masks."""
    if n_views < 5:
        raise ValueError("render_dataset: need n_views >= 5 (4 inputs + 1)")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xDA7A)))
    near = 0.1 * SCENE_RADIUS
    far = 4.0 * SCENE_RADIUS
    cams = []
    for base_az in (0.0, 90.0, 180.0, 270.0):
        az = base_az + rng.uniform(-10, 10)
        el = 20.0 + rng.uniform(-10, 10)
        cams.append(_sphere_camera(az, el, radius, fov_deg, image_hw, near, far))
    for _ in range(n_views - 4):
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        cams.append(Camera.look_at(d * radius, (0, 0, 0), fov_deg,
                                   image_hw[1], image_hw[0], near, far))
    n_rest = n_views - 4
    n_eval = max(1, round(n_rest * eval_fraction))
    views = []
    for i, cam in enumerate(cams):
        rgb, alpha, _ = render_forward(scene, cam)
        split = "input" if i < 4 else ("eval" if i >= n_views - n_eval
                                       else "train")
        views.append(ViewRecord(rgb.astype(np.float32),
                                alpha.astype(np.float32), cam, split, i))
    return SceneSample(scene_id or f"scene_{seed:06d}", seed, scene, views)


def make_dataset(n_scenes: int, seed: int = 0, **render_kwargs) -> list[SceneSample]:
    """n procedural scenes with per-scene derived seeds."""
    return [render_dataset(gen_scene(seed * 100003 + i),
                           seed=seed * 100003 + i,
                           scene_id=f"scene_{i:04d}", **render_kwargs)
            for i in range(n_scenes)]


def save_dataset(scenes: list[SceneSample], path, previews: bool = True):
    """Directory per scene: cameras file, per-view .npy image/mask tensors,
    ground-truth PLY, and a manifest carrying seeds and split flags."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {"format": "gsrecon-dataset-v1", "scenes": []}
    for scene in scenes:
        sdir = root / scene.scene_id
        sdir.mkdir(exist_ok=True)
        save_cameras([v.camera for v in scene.views], sdir / "cameras.json")
        export_ply(scene.gaussians, sdir / "gt.ply")
        entry = {"id": scene.scene_id, "seed": scene.seed, "views": []}
        for v in scene.views:
            img_rel = f"{scene.scene_id}/image_{v.index:03d}.npy"
            msk_rel = f"{scene.scene_id}/mask_{v.index:03d}.npy"
            np.save(root / img_rel, v.image)
            np.save(root / msk_rel, v.mask)
            if previews:
                save_png(v.image, sdir / f"image_{v.index:03d}.png")
            entry["views"].append({"index": v.index, "split": v.split,
                                   "image": img_rel, "mask": msk_rel})
        manifest["scenes"].append(entry)
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1,
                                                   sort_keys=True))


def load_dataset(path) -> list[SceneSample]:
    root = Path(path)
    mf = root / "manifest.json"
    if not mf.exists():
        raise FileNotFoundError(f"{mf}: dataset manifest not found")
    manifest = json.loads(mf.read_text())
    if manifest.get("format") != "gsrecon-dataset-v1":
        raise ValueError(f"{mf}: unknown dataset format "
                         f"{manifest.get('format')!r}")
    scenes = []
    for entry in manifest["scenes"]:
        sdir = root / entry["id"]
        cams = load_cameras(sdir / "cameras.json")
        gset = import_ply(sdir / "gt.ply")
        if len(cams) != len(entry["views"]):
            raise ValueError(f"{sdir}: manifest lists {len(entry['views'])} "
                             f"views but cameras file has {len(cams)}")
        views = []
        for vrec in entry["views"]:
            cam = cams[vrec["index"]]
            img = np.load(root / vrec["image"])
            msk = np.load(root / vrec["mask"])
            if img.shape != (cam.height, cam.width, 3):
                raise ValueError(f"{vrec['image']}: image shape {img.shape} "
                                 f"does not match camera "
                                 f"{cam.height}x{cam.width}")
            if msk.shape != (cam.height, cam.width):
                raise ValueError(f"{vrec['mask']}: mask shape {msk.shape} "
                                 f"does not match camera "
                                 f"{cam.height}x{cam.width}")
            views.append(ViewRecord(img, msk, cam, vrec["split"],
                                    vrec["index"]))
        scenes.append(SceneSample(entry["id"], entry["seed"], gset, views))
    return scenes
