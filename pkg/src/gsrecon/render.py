"""Differentiable rasterization of Gaussian sets into RGB, alpha, and
expected-depth images, plus a brute-force per-pixel reference renderer.

The tiled path projects Gaussians (perspective mean, first-order EWA
covariance with a low-pass floor), sorts them by camera depth, bins them
into pixel tiles by conservative 3-sigma footprints, and composites front
to back. The backward pass treats the depth sort as a fixed permutation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _raster_kernels as K
from . import tensor as T
from .cameras import Camera
from .gaussians import GaussianSet, quat_to_rotmat

COV_FLOOR = 0.3             # px^2 low-pass added to the cov2d diagonal


class ActivationMeter:
    """Tracks floats retained for rasterizer backward passes; used to verify
    the deferred-backprop memory contract."""

    def __init__(self):
        self.current = 0
        self.peak = 0

    def reset(self):
        self.current = 0
        self.peak = 0

    def alloc(self, n: int):
        self.current += n
        self.peak = max(self.peak, self.current)

    def free(self, n: int):
        self.current -= n


RENDER_METER = ActivationMeter()


@dataclass
class ProjectedGaussian:
    """Visible Gaussians after perspective projection, depth-sorted."""

    mean2d: np.ndarray      # (M, 2) pixel coords
    cov2d: np.ndarray       # (M, 2, 2) after the low-pass floor
    depth: np.ndarray       # (M,) camera-space depth
    color: np.ndarray       # (M, 3)
    opacity: np.ndarray     # (M,)
    index: np.ndarray       # (M,) indices into the source set


@dataclass
class RenderOutput:
    rgb: T.Value            # (H, W, 3)
    alpha: T.Value          # (H, W)
    depth: T.Value          # (H, W) expected splat depth


def covariance3d(rotation: np.ndarray, scale: np.ndarray) -> np.ndarray:
    """World covariance R diag(s^2) R^T from unit quaternions and scales."""
    q = np.asarray(rotation, dtype=np.float64)
    s = np.asarray(scale, dtype=np.float64)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    s = np.atleast_2d(s)
    r = quat_to_rotmat(q)
    m = r * s[:, None, :]
    cov = m @ np.swapaxes(m, -1, -2)
    return cov[0] if single else cov


class _ProjectionContext:
    """Everything the projection backward chain needs, for one view."""

    __slots__ = ("camera", "dtype", "n_total", "vis", "q", "qn", "qnorm",
                 "rotmat", "scale", "mm", "cov_cam", "tvec", "z", "mean2d",
                 "cov2d", "conic", "color", "opac", "pair_gauss",
                 "tile_ranges", "tiles_x", "tile_size", "_meter_count")

    def float_count(self) -> int:
        n = 0
        for name in self.__slots__:
            v = getattr(self, name, None)
            if isinstance(v, np.ndarray):
                n += v.size
        return n


def _project_for_render(pos, quat, scale, opac, color, camera: Camera,
                        tile_size: int) -> _ProjectionContext:
    dtype = pos.dtype
    f = dtype.type(camera.focal)
    cx, cy = camera.principal
    rc = camera.rotation.astype(dtype)

    qualn = np.linalg.norm(quat, axis=-1, keepdims=True)
    qn = quat / qualn
    rot = quat_to_rotmat(qn)
    tvec_all = (pos - camera.center.astype(dtype)) @ rc
    z_all = -tvec_all[:, 2]

    vis = z_all > camera.near
    order = np.argsort(z_all[vis], kind="stable")
    vis_idx = np.nonzero(vis)[0][order]

    ctx = _ProjectionContext()
    ctx.camera = camera
    ctx.dtype = dtype
    ctx.n_total = pos.shape[0]
    ctx.vis = vis_idx
    ctx.q = quat[vis_idx]
    ctx.qn = qn[vis_idx]
    ctx.qnorm = qualn[vis_idx]
    ctx.rotmat = rot[vis_idx]
    ctx.scale = scale[vis_idx]
    ctx.tvec = tvec_all[vis_idx]
    ctx.z = z_all[vis_idx]
    ctx.color = color[vis_idx]
    ctx.opac = opac[vis_idx]
    ctx.tile_size = tile_size

    m = vis_idx.shape[0]
    ctx.mm = ctx.rotmat * ctx.scale[:, None, :]
    cov_w = ctx.mm @ np.swapaxes(ctx.mm, -1, -2)
    ctx.cov_cam = np.einsum("ki,nkl,lj->nij", rc, cov_w, rc)

    tx, ty, z = ctx.tvec[:, 0], ctx.tvec[:, 1], ctx.z
    u = cx + f * tx / z
    v = cy - f * ty / z
    ctx.mean2d = np.stack([u, v], axis=-1)

    j = np.zeros((m, 2, 3), dtype=dtype)
    j[:, 0, 0] = f / z
    j[:, 0, 2] = f * tx / z ** 2
    j[:, 1, 1] = -f / z
    j[:, 1, 2] = -f * ty / z ** 2
    cov2d = np.einsum("nab,nbc,ndc->nad", j, ctx.cov_cam, j)
    cov2d[:, 0, 0] += dtype.type(COV_FLOOR)
    cov2d[:, 1, 1] += dtype.type(COV_FLOOR)
    ctx.cov2d = cov2d

    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    ctx.conic = np.stack([cov2d[:, 1, 1] / det, -cov2d[:, 0, 1] / det,
                          cov2d[:, 0, 0] / det], axis=-1)

    # conservative tile binning by the 3-sigma bounding box
    mid = 0.5 * (cov2d[:, 0, 0] + cov2d[:, 1, 1])
    disc = np.sqrt(np.maximum(0.25 * (cov2d[:, 0, 0] - cov2d[:, 1, 1]) ** 2
                              + cov2d[:, 0, 1] ** 2, 0.0))
    radius = 3.0 * np.sqrt(mid + disc)
    h, w = camera.height, camera.width
    tiles_x = (w + tile_size - 1) // tile_size
    tiles_y = (h + tile_size - 1) // tile_size
    ctx.tiles_x = tiles_x

    on = ((u + radius > 0) & (u - radius < w) &
          (v + radius > 0) & (v - radius < h))
    gi0 = np.nonzero(on)[0]
    if gi0.size == 0:
        ctx.pair_gauss = np.zeros(0, dtype=np.int64)
        ctx.tile_ranges = np.zeros((tiles_x * tiles_y, 2), dtype=np.int64)
        return ctx
    x0 = np.clip(((u[gi0] - radius[gi0]) // tile_size).astype(np.int64), 0, tiles_x - 1)
    x1 = np.clip(((u[gi0] + radius[gi0]) // tile_size).astype(np.int64), 0, tiles_x - 1)
    y0 = np.clip(((v[gi0] - radius[gi0]) // tile_size).astype(np.int64), 0, tiles_y - 1)
    y1 = np.clip(((v[gi0] + radius[gi0]) // tile_size).astype(np.int64), 0, tiles_y - 1)
    nx = x1 - x0 + 1
    reps = nx * (y1 - y0 + 1)
    gi = np.repeat(gi0, reps)
    offsets = np.concatenate([[0], np.cumsum(reps)[:-1]])
    rank = np.arange(gi.size, dtype=np.int64) - np.repeat(offsets, reps)
    nx_r = np.repeat(nx, reps)
    tile_id = ((np.repeat(y0, reps) + rank // nx_r) * tiles_x
               + np.repeat(x0, reps) + rank % nx_r)
    order2 = np.argsort(tile_id, kind="stable")
    ctx.pair_gauss = gi[order2]
    tid_sorted = tile_id[order2]
    starts = np.searchsorted(tid_sorted, np.arange(tiles_x * tiles_y))
    ends = np.searchsorted(tid_sorted, np.arange(tiles_x * tiles_y), side="right")
    ctx.tile_ranges = np.stack([starts, ends], axis=-1).astype(np.int64)
    return ctx


def _forward_images(ctx: _ProjectionContext, background, term_eps):
    cam = ctx.camera
    dtype = ctx.dtype
    h, w = cam.height, cam.width
    bg = np.asarray(background, dtype=dtype).reshape(3)
    rgb = np.empty((h, w, 3), dtype=dtype)
    rgb[:] = bg
    alpha = np.zeros((h, w), dtype=dtype)
    depth = np.zeros((h, w), dtype=dtype)
    if ctx.pair_gauss.size:
        K.forward(ctx.mean2d, ctx.conic, ctx.z, ctx.color, ctx.opac,
                  ctx.pair_gauss, ctx.tile_ranges, ctx.tiles_x, ctx.tile_size,
                  h, w, bg, dtype.type(K.ALPHA_MAX), dtype.type(term_eps),
                  rgb, alpha, depth)
    return rgb, alpha, depth


def _backward_attributes(ctx: _ProjectionContext, g_rgb, g_alpha, g_depth,
                         background, term_eps):
    """Chain image gradients back to (mu, quat, scale, opac, color)."""
    cam = ctx.camera
    dtype = ctx.dtype
    m = ctx.vis.shape[0]
    d_mean = np.zeros((m, 2), dtype=dtype)
    d_conic = np.zeros((m, 3), dtype=dtype)
    d_z = np.zeros(m, dtype=dtype)
    d_color = np.zeros((m, 3), dtype=dtype)
    d_opac = np.zeros(m, dtype=dtype)
    bg = np.asarray(background, dtype=dtype).reshape(3)
    if ctx.pair_gauss.size:
        K.backward(ctx.mean2d, ctx.conic, ctx.z, ctx.color, ctx.opac,
                   ctx.pair_gauss, ctx.tile_ranges, ctx.tiles_x, ctx.tile_size,
                   cam.height, cam.width, bg, dtype.type(K.ALPHA_MAX),
                   dtype.type(term_eps),
                   np.ascontiguousarray(g_rgb, dtype=dtype),
                   np.ascontiguousarray(g_alpha, dtype=dtype),
                   np.ascontiguousarray(g_depth, dtype=dtype),
                   d_mean, d_conic, d_z, d_color, d_opac)

    # conic -> cov2d (d_conic holds [d/da, d/db, d/dc] with b the off-diagonal)
    cov = ctx.cov2d
    lam = np.empty_like(cov)
    det = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] ** 2
    lam[:, 0, 0] = cov[:, 1, 1] / det
    lam[:, 1, 1] = cov[:, 0, 0] / det
    lam[:, 0, 1] = lam[:, 1, 0] = -cov[:, 0, 1] / det
    d_lam = np.empty_like(cov)
    d_lam[:, 0, 0] = d_conic[:, 0]
    d_lam[:, 1, 1] = d_conic[:, 2]
    d_lam[:, 0, 1] = d_lam[:, 1, 0] = 0.5 * d_conic[:, 1]
    d_cov = -lam @ d_lam @ lam

    # cov2d = J cov_cam J^T + floor
    f = dtype.type(cam.focal)
    tx, ty, z = ctx.tvec[:, 0], ctx.tvec[:, 1], ctx.z
    j = np.zeros((m, 2, 3), dtype=dtype)
    j[:, 0, 0] = f / z
    j[:, 0, 2] = f * tx / z ** 2
    j[:, 1, 1] = -f / z
    j[:, 1, 2] = -f * ty / z ** 2
    d_cov_cam = np.einsum("nba,nbc,ncd->nad", j, d_cov, j)
    d_j = 2.0 * d_cov @ j @ ctx.cov_cam

    d_tx = d_mean[:, 0] * (f / z) + d_j[:, 0, 2] * (f / z ** 2)
    d_ty = d_mean[:, 1] * (-f / z) + d_j[:, 1, 2] * (-f / z ** 2)
    d_zc = (d_mean[:, 0] * (-f * tx / z ** 2) + d_mean[:, 1] * (f * ty / z ** 2)
            + d_j[:, 0, 0] * (-f / z ** 2) + d_j[:, 1, 1] * (f / z ** 2)
            + d_j[:, 0, 2] * (-2 * f * tx / z ** 3)
            + d_j[:, 1, 2] * (2 * f * ty / z ** 3)
            + d_z)
    d_tvec = np.stack([d_tx, d_ty, -d_zc], axis=-1)
    rc = cam.rotation.astype(dtype)
    d_pos_vis = d_tvec @ rc.T

    # cov_cam = Rc^T cov_w Rc;  cov_w = M M^T with M = R diag(s)
    d_cov_w = np.einsum("ik,nkl,jl->nij", rc, d_cov_cam, rc)
    d_mm = 2.0 * d_cov_w @ ctx.mm
    d_scale_vis = np.einsum("nij,nij->nj", d_mm, ctx.rotmat)
    d_rot = d_mm * ctx.scale[:, None, :]

    # rotation matrix -> normalized quaternion
    qw, qx, qy, qz = (ctx.qn[:, i] for i in range(4))
    r = d_rot
    d_qn = np.stack([
        2 * (-qz * r[:, 0, 1] + qy * r[:, 0, 2] + qz * r[:, 1, 0]
             - qx * r[:, 1, 2] - qy * r[:, 2, 0] + qx * r[:, 2, 1]),
        2 * (qy * r[:, 0, 1] + qz * r[:, 0, 2] + qy * r[:, 1, 0]
             - 2 * qx * r[:, 1, 1] - qw * r[:, 1, 2] + qz * r[:, 2, 0]
             + qw * r[:, 2, 1] - 2 * qx * r[:, 2, 2]),
        2 * (-2 * qy * r[:, 0, 0] + qx * r[:, 0, 1] + qw * r[:, 0, 2]
             + qx * r[:, 1, 0] + qz * r[:, 1, 2] - qw * r[:, 2, 0]
             + qz * r[:, 2, 1] - 2 * qy * r[:, 2, 2]),
        2 * (-2 * qz * r[:, 0, 0] - qw * r[:, 0, 1] + qx * r[:, 0, 2]
             + qw * r[:, 1, 0] - 2 * qz * r[:, 1, 1] + qy * r[:, 1, 2]
             + qx * r[:, 2, 0] + qy * r[:, 2, 1]),
    ], axis=-1)
    dot = (d_qn * ctx.qn).sum(axis=-1, keepdims=True)
    d_quat_vis = (d_qn - ctx.qn * dot) / ctx.qnorm

    n = ctx.n_total
    grads = {
        "positions": np.zeros((n, 3), dtype=dtype),
        "rotations": np.zeros((n, 4), dtype=dtype),
        "scales": np.zeros((n, 3), dtype=dtype),
        "opacities": np.zeros(n, dtype=dtype),
        "colors": np.zeros((n, 3), dtype=dtype),
    }
    grads["positions"][ctx.vis] = d_pos_vis
    grads["rotations"][ctx.vis] = d_quat_vis
    grads["scales"][ctx.vis] = d_scale_vis
    grads["opacities"][ctx.vis] = d_opac
    grads["colors"][ctx.vis] = d_color
    return grads


def project(gset: GaussianSet, camera: Camera) -> ProjectedGaussian:
    """Perspective projection of the visible Gaussians (depth > near),
    depth-sorted; cov2d carries the low-pass floor on its diagonal."""
    ctx = _project_for_render(gset.positions.data, gset.rotations.data,
                              gset.scales.data, gset.opacities.data,
                              gset.colors.data, camera, tile_size=16)
    return ProjectedGaussian(ctx.mean2d, ctx.cov2d, ctx.z, ctx.color,
                             ctx.opac, ctx.vis)


def rasterize(gset: GaussianSet, camera: Camera, background=(0.0, 0.0, 0.0),
              tile_size: int = 16, term_eps: float = K.TERM_EPS,
              deferred: bool = False) -> RenderOutput:
    """Differentiable tiled rasterization.

    With deferred=True the projection and tile lists are not retained for
    backward; they are rebuilt when the backward pass reaches this node,
    so at most one view's rendering activations are live at a time.
    """
    inputs = (gset.positions, gset.rotations, gset.scales,
              gset.opacities, gset.colors)
    arrays = tuple(v.data for v in inputs)
    ctx = _project_for_render(*arrays, camera, tile_size)
    rgb, alpha, depth = _forward_images(ctx, background, term_eps)
    packed = np.concatenate([rgb, alpha[..., None], depth[..., None]], axis=-1)

    state = {}
    if deferred:
        state["ctx"] = None
    else:
        state["ctx"] = ctx
        RENDER_METER.alloc(ctx.float_count())
    del ctx

    def bwd(g_packed):
        c = state["ctx"]
        if c is None:
            c = _project_for_render(*arrays, camera, tile_size)
            RENDER_METER.alloc(c.float_count())
            state["ctx"] = c
        grads = _backward_attributes(c, g_packed[..., 0:3], g_packed[..., 3],
                                     g_packed[..., 4], background, term_eps)
        return tuple(grads[k] for k in ("positions", "rotations", "scales",
                                        "opacities", "colors"))

    def release():
        if state["ctx"] is not None:
            RENDER_METER.free(state["ctx"].float_count())
            state["ctx"] = None

    out = T._record("rasterize", inputs, packed, bwd, release_hook=release)
    return RenderOutput(out[..., 0:3], out[..., 3], out[..., 4])


def render_forward(gset: GaussianSet, camera: Camera,
                   background=(0.0, 0.0, 0.0), tile_size: int = 16,
                   term_eps: float = K.TERM_EPS):
    """Plain forward render with no recording; returns numpy arrays."""
    ctx = _project_for_render(gset.positions.data, gset.rotations.data,
                              gset.scales.data, gset.opacities.data,
                              gset.colors.data, camera, tile_size)
    return _forward_images(ctx, background, term_eps)


def render_backward(gset: GaussianSet, camera: Camera, g_rgb, g_alpha,
                    g_depth=None, background=(0.0, 0.0, 0.0),
                    tile_size: int = 16, term_eps: float = K.TERM_EPS):
    """One-view image-gradient backprop to Gaussian attributes, re-running
    projection locally (the deferred-backprop building block)."""
    ctx = _project_for_render(gset.positions.data, gset.rotations.data,
                              gset.scales.data, gset.opacities.data,
                              gset.colors.data, camera, tile_size)
    RENDER_METER.alloc(ctx.float_count())
    try:
        if g_depth is None:
            g_depth = np.zeros((camera.height, camera.width), dtype=ctx.dtype)
        return _backward_attributes(ctx, g_rgb, g_alpha, g_depth,
                                    background, term_eps)
    finally:
        RENDER_METER.free(ctx.float_count())


def reference_rasterize(gset: GaussianSet, camera: Camera,
                        background=(0.0, 0.0, 0.0)) -> RenderOutput:
    """Brute-force oracle: per-pixel compositing over all depth-sorted
    Gaussians, no tiling, no early termination. Forward only."""
    ctx = _project_for_render(gset.positions.data, gset.rotations.data,
                              gset.scales.data, gset.opacities.data,
                              gset.colors.data, camera, tile_size=16)
    dtype = ctx.dtype
    h, w = camera.height, camera.width
    bg = np.asarray(background, dtype=dtype).reshape(3)
    m = ctx.vis.shape[0]
    if m == 0:
        rgb = np.empty((h, w, 3), dtype=dtype)
        rgb[:] = bg
        return RenderOutput(T.Value(rgb), T.Value(np.zeros((h, w), dtype)),
                            T.Value(np.zeros((h, w), dtype)))
    ys, xs = np.meshgrid(np.arange(h, dtype=dtype) + 0.5,
                         np.arange(w, dtype=dtype) + 0.5, indexing="ij")
    dx = xs.reshape(-1, 1) - ctx.mean2d[:, 0]
    dy = ys.reshape(-1, 1) - ctx.mean2d[:, 1]
    d2 = (ctx.conic[:, 0] * dx * dx + 2 * ctx.conic[:, 1] * dx * dy
          + ctx.conic[:, 2] * dy * dy)
    a = np.minimum(ctx.opac * np.exp(-0.5 * d2), dtype.type(K.ALPHA_MAX))
    a[d2 > K.MAHALANOBIS_CUT] = 0.0
    trans = np.cumprod(1.0 - a, axis=1)
    trans = np.concatenate([np.ones((h * w, 1), dtype=dtype),
                            trans[:, :-1]], axis=1)
    wgt = a * trans
    acc_w = wgt.sum(axis=1)
    rgb = (wgt @ ctx.color + (1.0 - acc_w)[:, None] * bg).reshape(h, w, 3)
    depth = (wgt @ ctx.z) / np.maximum(acc_w, dtype.type(K.DEPTH_EPS))
    return RenderOutput(T.Value(rgb.astype(dtype)),
                        T.Value(acc_w.reshape(h, w)),
                        T.Value(depth.reshape(h, w)))


def save_png(image01: np.ndarray, path):
    """Save an (H, W, 3) or (H, W) float image in [0, 1] as 8-bit PNG."""
    from PIL import Image
    arr = np.clip(np.asarray(image01), 0.0, 1.0)
    arr = (arr * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(arr).save(path)


def load_png(path) -> np.ndarray:
    from PIL import Image
    return np.asarray(Image.open(path), dtype=np.float32) / 255.0
