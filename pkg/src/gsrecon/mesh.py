"""Triangle-mesh extraction from a Gaussian set: render RGB-D from a sphere
of cameras, fuse into a truncated signed-distance volume, run marching
cubes, and drop small floater components."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import map_coordinates
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from skimage.measure import marching_cubes as _skimage_mc

from .cameras import Camera, fibonacci_cameras
from .gaussians import GaussianSet
from .render import render_forward

ALPHA_GATE = 0.5          # pixels below this alpha contribute no depth


@dataclass
class TsdfVolume:
    origin: np.ndarray        # (3,) world position of voxel (0,0,0) center
    voxel: float
    tsdf: np.ndarray          # (nx, ny, nz) in [-1, 1], +1 is free space
    weight: np.ndarray        # (nx, ny, nz) >= 0
    rgb: np.ndarray           # (nx, ny, nz, 3) accumulated color * weight

    def voxel_centers(self) -> np.ndarray:
        nx, ny, nz = self.tsdf.shape
        ix, iy, iz = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz),
                                 indexing="ij")
        idx = np.stack([ix, iy, iz], axis=-1).reshape(-1, 3)
        return self.origin + idx * self.voxel


def make_volume(bbox_min, bbox_max, voxel: float) -> TsdfVolume:
    bbox_min = np.asarray(bbox_min, dtype=np.float64)
    bbox_max = np.asarray(bbox_max, dtype=np.float64)
    dims = np.maximum(np.ceil((bbox_max - bbox_min) / voxel).astype(int) + 1, 2)
    return TsdfVolume(origin=bbox_min, voxel=voxel,
                      tsdf=np.ones(tuple(dims), dtype=np.float32),
                      weight=np.zeros(tuple(dims), dtype=np.float32),
                      rgb=np.zeros(tuple(dims) + (3,), dtype=np.float32))


def tsdf_fuse(gset: GaussianSet, cameras: list[Camera], voxel: float = 0.02,
              trunc: float | None = None, volume: TsdfVolume | None = None,
              pad_fraction: float = 0.1) -> TsdfVolume:
    """Weighted TSDF fusion of rendered RGB-D over the given cameras.

    The volume defaults to the 10%-padded bounding box of the set. Depth is
    the renderer's expected-depth channel, gated by alpha >= 0.5.
    """
    if trunc is None:
        trunc = 3.0 * voxel
    if trunc < 2.0 * voxel:
        raise ValueError(f"tsdf_fuse: trunc {trunc} must be >= 2 * voxel")
    if volume is None:
        pos = gset.positions.data
        if len(gset) == 0:
            return make_volume((-1, -1, -1), (1, 1, 1), voxel)
        lo, hi = pos.min(axis=0), pos.max(axis=0)
        pad = pad_fraction * max((hi - lo).max(), voxel)
        volume = make_volume(lo - pad, hi + pad, voxel)
    if len(gset) == 0 or not cameras:
        return volume

    centers = volume.voxel_centers()
    shape = volume.tsdf.shape
    tsdf_sum = volume.tsdf.reshape(-1) * volume.weight.reshape(-1)
    wsum = volume.weight.reshape(-1).copy()
    rgbsum = volume.rgb.reshape(-1, 3).copy()

    for cam in cameras:
        rgb, alpha, depth = render_forward(gset, cam)
        t = (centers - cam.center) @ cam.rotation
        z = -t[:, 2]
        f = cam.focal
        cx, cy = cam.principal
        with np.errstate(divide="ignore", invalid="ignore"):
            u = (cx + f * t[:, 0] / z).astype(np.int64)
            v = (cy - f * t[:, 1] / z).astype(np.int64)
        ok = (z > cam.near) & (u >= 0) & (u < cam.width) \
            & (v >= 0) & (v < cam.height)
        vi, ui = v[ok], u[ok]
        gated = alpha[vi, ui] >= ALPHA_GATE
        sel = np.nonzero(ok)[0][gated]
        vi, ui = vi[gated], ui[gated]
        sdf = depth[vi, ui] - z[sel]
        inside = sdf > -trunc
        sel, vi, ui, sdf = sel[inside], vi[inside], ui[inside], sdf[inside]
        # confidence tapers linearly behind the observed surface
        w = np.where(sdf >= 0, 1.0, 1.0 + sdf / trunc)
        tsdf_sum[sel] += w * np.clip(sdf / trunc, -1.0, 1.0)
        wsum[sel] += w
        rgbsum[sel] += w[:, None] * rgb[vi, ui]

    filled = wsum > 0
    tsdf = np.ones_like(wsum)
    tsdf[filled] = tsdf_sum[filled] / wsum[filled]
    volume.tsdf = tsdf.reshape(shape).astype(np.float32)
    volume.weight = wsum.reshape(shape).astype(np.float32)
    volume.rgb = rgbsum.reshape(shape + (3,)).astype(np.float32)
    return volume


def marching_cubes(volume: TsdfVolume):
    """Zero-isosurface of the TSDF with linear interpolation along edges;
    vertex colors come from the volume's RGB accumulators.

    Returns (vertices (V,3), faces (F,3), colors (V,3)); all empty when the
    volume has no zero crossing.
    """
    empty = (np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64),
             np.zeros((0, 3)))
    observed = volume.weight > 0
    if not observed.any():
        return empty
    # cubes may emit faces only where every corner was observed; otherwise
    # the unobserved-interior sentinel (+1) fakes a crossing at the frontier
    from scipy.ndimage import binary_erosion
    mask = binary_erosion(observed, np.ones((3, 3, 3), dtype=bool))
    if not mask.any():
        return empty
    try:
        verts_idx, faces, _, _ = _skimage_mc(
            volume.tsdf.astype(np.float64), level=0.0, mask=mask)
    except (ValueError, RuntimeError):
        return empty
    with np.errstate(invalid="ignore"):
        mean_rgb = volume.rgb / np.maximum(volume.weight[..., None], 1e-9)
    colors = np.stack([map_coordinates(mean_rgb[..., ch], verts_idx.T,
                                       order=1, mode="nearest")
                       for ch in range(3)], axis=-1)
    verts = volume.origin + verts_idx * volume.voxel
    return verts, faces.astype(np.int64), np.clip(colors, 0.0, 1.0)


def remove_floaters(verts, faces, colors=None, min_fraction: float = 0.05):
    """Delete connected components whose face count is below min_fraction
    of the largest component's."""
    if len(faces) == 0:
        return verts, faces, colors
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    adj = coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])),
                     shape=(len(verts), len(verts)))
    n_comp, labels = connected_components(adj, directed=False)
    face_comp = labels[faces[:, 0]]
    counts = np.bincount(face_comp, minlength=n_comp)
    keep_comps = np.nonzero(counts >= min_fraction * counts.max())[0]
    keep_faces = np.isin(face_comp, keep_comps)
    faces = faces[keep_faces]
    used = np.unique(faces)
    remap = -np.ones(len(verts), dtype=np.int64)
    remap[used] = np.arange(len(used))
    verts = verts[used]
    faces = remap[faces]
    if colors is not None:
        colors = colors[used]
    return verts, faces, colors


def extract_mesh(gset: GaussianSet, n_cameras: int = 200,
                 camera_radius: float | None = None, voxel: float = 0.02,
                 trunc: float | None = None, image_hw=(128, 128),
                 min_fraction: float = 0.05):
    """Full pipeline: Fibonacci camera rig -> TSDF fusion -> marching cubes
    -> floater removal."""
    pos = gset.positions.data
    center = pos.mean(axis=0)
    extent = np.linalg.norm(pos - center, axis=1).max() if len(gset) else 1.0
    if camera_radius is None:
        camera_radius = 2.5 * max(extent, 0.1)
    cams = fibonacci_cameras(n_cameras, camera_radius, look_at=center,
                             width=image_hw[1], height=image_hw[0])
    vol = tsdf_fuse(gset, cams, voxel=voxel, trunc=trunc)
    verts, faces, colors = marching_cubes(vol)
    return remove_floaters(verts, faces, colors, min_fraction)


# -- mesh file io ------------------------------------------------------------

def save_mesh_ply(path, verts, faces, colors=None):
    """Binary little-endian PLY with uchar vertex colors and triangle faces."""
    n, m = len(verts), len(faces)
    header = ("ply\nformat binary_little_endian 1.0\n"
              f"element vertex {n}\n"
              "property float x\nproperty float y\nproperty float z\n"
              "property uchar red\nproperty uchar green\nproperty uchar blue\n"
              f"element face {m}\n"
              "property list uchar int vertex_indices\nend_header\n")
    if colors is None:
        colors = np.full((n, 3), 0.7)
    c8 = (np.clip(colors, 0, 1) * 255 + 0.5).astype(np.uint8)
    vrec = np.zeros(n, dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                              ("r", "u1"), ("g", "u1"), ("b", "u1")])
    vrec["x"], vrec["y"], vrec["z"] = verts.T.astype(np.float32)
    vrec["r"], vrec["g"], vrec["b"] = c8.T
    frec = np.zeros(m, dtype=[("n", "u1"), ("i", "<i4", (3,))])
    frec["n"] = 3
    frec["i"] = faces
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        vrec.tofile(f)
        frec.tofile(f)


def load_mesh_ply(path):
    with open(path, "rb") as f:
        blob = f.read()
    end = blob.find(b"end_header\n")
    if end < 0:
        raise ValueError(f"{path}: missing end_header")
    lines = blob[:end].decode("ascii").splitlines()
    counts = {}
    for line in lines:
        p = line.split()
        if p[:1] == ["element"]:
            counts[p[1]] = int(p[2])
    n, m = counts.get("vertex", 0), counts.get("face", 0)
    off = end + len(b"end_header\n")
    vrec = np.frombuffer(blob, dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                                      ("r", "u1"), ("g", "u1"), ("b", "u1")],
                         count=n, offset=off)
    off += vrec.nbytes
    frec = np.frombuffer(blob, dtype=[("n", "u1"), ("i", "<i4", (3,))],
                         count=m, offset=off)
    verts = np.stack([vrec["x"], vrec["y"], vrec["z"]], axis=-1).astype(np.float64)
    colors = np.stack([vrec["r"], vrec["g"], vrec["b"]], axis=-1) / 255.0
    return verts, frec["i"].astype(np.int64), colors


def save_mesh_obj(path, verts, faces):
    with open(path, "w") as f:
        for v in verts:
            f.write(f"v {v[0]:.7g} {v[1]:.7g} {v[2]:.7g}\n")
        for tri in faces:
            f.write(f"f {tri[0] + 1} {tri[1] + 1} {tri[2] + 1}\n")
