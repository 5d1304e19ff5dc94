"""Raw attribute maps, activation into renderable Gaussian sets, multi-view
merging, and splat-PLY interop."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from . import tensor as T
from .cameras import Camera, pixel_rays

SH_DC = 0.2820948          # DC spherical-harmonics basis constant
UNIT_EPS = 1e-6            # keeps opacities/colors strictly inside (0, 1)

# raw attribute-map channel layout (depth mode / xyz mode)
CHANNELS_DEPTH = 12
CHANNELS_XYZ = 14

PLY_PROPS = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
             "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]


@dataclass(frozen=True)
class AttributeMap:
    """Per-view raw network output before activation: (H, W, C) with
    C=12 (depth head) or C=14 (xyz head)."""

    raw: T.Value
    xyz_mode: bool = False

    def __post_init__(self):
        want = CHANNELS_XYZ if self.xyz_mode else CHANNELS_DEPTH
        if self.raw.ndim != 3 or self.raw.shape[-1] != want:
            raise ValueError(f"AttributeMap: expected (H, W, {want}), "
                             f"got {self.raw.shape}")


@dataclass(frozen=True)
class GaussianSet:
    """Activated scene representation. Fields are Values so a set produced
    under a tape stays differentiable; immutable after construction."""

    positions: T.Value    # (N, 3) world units
    rotations: T.Value    # (N, 4) unit quaternions (w, x, y, z)
    scales: T.Value       # (N, 3) world units
    opacities: T.Value    # (N,) in (0, 1)
    colors: T.Value       # (N, 3) in (0, 1), DC color only
    degenerate_rotations: int = field(default=0, compare=False)

    def __post_init__(self):
        n = self.positions.shape[0]
        shapes = (self.positions.shape, self.rotations.shape,
                  self.scales.shape, self.opacities.shape, self.colors.shape)
        if shapes != ((n, 3), (n, 4), (n, 3), (n,), (n, 3)):
            raise ValueError(f"GaussianSet: inconsistent field shapes {shapes}")

    @staticmethod
    def from_arrays(positions, rotations, scales, opacities, colors,
                    dtype=np.float32) -> "GaussianSet":
        return GaussianSet(T.Value(positions, dtype), T.Value(rotations, dtype),
                           T.Value(scales, dtype), T.Value(opacities, dtype),
                           T.Value(colors, dtype))

    def __len__(self):
        return self.positions.shape[0]

    def detached(self) -> "GaussianSet":
        return GaussianSet(self.positions.detach(), self.rotations.detach(),
                           self.scales.detach(), self.opacities.detach(),
                           self.colors.detach(), self.degenerate_rotations)

    def validate(self, s_min: float | None = None, s_max: float | None = None,
                 atol: float = 1e-5):
        """Raise if any set invariant is violated."""
        q = self.rotations.data
        norms = np.linalg.norm(q, axis=-1)
        if np.abs(norms - 1.0).max() > atol:
            raise ValueError("GaussianSet: non-unit quaternion")
        o = self.opacities.data
        c = self.colors.data
        if o.min() <= 0 or o.max() >= 1 or c.min() <= 0 or c.max() >= 1:
            raise ValueError("GaussianSet: opacity/color outside (0, 1)")
        s = self.scales.data
        if s_min is not None and (s.min() < s_min - atol or s.max() > s_max + atol):
            raise ValueError(f"GaussianSet: scales outside [{s_min}, {s_max}]")
        for name in ("positions", "rotations", "scales", "opacities", "colors"):
            if not np.isfinite(getattr(self, name).data).all():
                raise ValueError(f"GaussianSet: non-finite {name}")


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Unit quaternions (..., 4) as (w, x, y, z) -> rotation matrices (..., 3, 3)."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    m = np.empty(q.shape[:-1] + (3, 3), dtype=q.dtype)
    m[..., 0, 0] = 1 - 2 * (y * y + z * z)
    m[..., 0, 1] = 2 * (x * y - w * z)
    m[..., 0, 2] = 2 * (x * z + w * y)
    m[..., 1, 0] = 2 * (x * y + w * z)
    m[..., 1, 1] = 1 - 2 * (x * x + z * z)
    m[..., 1, 2] = 2 * (y * z - w * x)
    m[..., 2, 0] = 2 * (x * z - w * y)
    m[..., 2, 1] = 2 * (y * z + w * x)
    m[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a * b for (..., 4) quaternions (w, x, y, z)."""
    aw, ax, ay, az = (a[..., i] for i in range(4))
    bw, bx, by, bz = (b[..., i] for i in range(4))
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def rotmat_to_quat(m: np.ndarray) -> np.ndarray:
    """Rotation matrix (3, 3) -> unit quaternion (w, x, y, z), w >= 0."""
    w = 0.5 * np.sqrt(max(0.0, 1.0 + m[0, 0] + m[1, 1] + m[2, 2]))
    if w > 1e-6:
        x = (m[2, 1] - m[1, 2]) / (4 * w)
        y = (m[0, 2] - m[2, 0]) / (4 * w)
        z = (m[1, 0] - m[0, 1]) / (4 * w)
    else:
        x = 0.5 * np.sqrt(max(0.0, 1.0 + m[0, 0] - m[1, 1] - m[2, 2]))
        s = 4 * x if x > 1e-6 else 1.0
        y = (m[0, 1] + m[1, 0]) / s
        z = (m[0, 2] + m[2, 0]) / s
        w = (m[2, 1] - m[1, 2]) / s
    q = np.array([w, x, y, z])
    return q / np.linalg.norm(q)


def activate(raw: AttributeMap | T.Value, camera: Camera, s_min: float = 0.005,
             s_max: float = 0.02, depth_activation: str = "sigmoid",
             scale_activation: str = "interp") -> GaussianSet:
    """Turn a raw attribute map into a renderable GaussianSet.

    Per-channel activations: depth logit -> [near, far] (sigmoid by default,
    softplus as the ablation alternative), quaternion normalized, scale
    interpolated between s_min and s_max by sigmoid (or the unbounded
    exponential ablation variant), opacity and color sigmoid. Positions are
    placed along the camera's pixel rays; in xyz mode the first three
    channels are taken as raw world positions instead.
    """
    if s_min >= s_max:
        raise ValueError(f"activate: need s_min < s_max, got {s_min}, {s_max}")
    if not isinstance(raw, AttributeMap):
        raw = AttributeMap(raw, xyz_mode=raw.shape[-1] == CHANNELS_XYZ)
    h, w, c = raw.raw.shape
    if (h, w) != (camera.height, camera.width):
        raise ValueError(f"activate: map {h}x{w} does not match camera "
                         f"{camera.height}x{camera.width}")
    n = h * w
    flat = raw.raw.reshape((n, c))
    dtype = flat.dtype

    if raw.xyz_mode:
        mu = flat[:, 0:3]
        q_raw, s_raw = flat[:, 3:7], flat[:, 7:10]
        o_raw, c_raw = flat[:, 10], flat[:, 11:14]
    else:
        dirs = pixel_rays(camera).directions.reshape(n, 3).astype(dtype)
        depth_logit = flat[:, 0]
        if depth_activation == "sigmoid":
            tau = camera.near + (camera.far - camera.near) * T.sigmoid(depth_logit)
        elif depth_activation == "softplus":
            tau = T.clip(camera.near + T.softplus(depth_logit),
                         camera.near, camera.far)
        else:
            raise ValueError(f"activate: unknown depth activation "
                             f"{depth_activation!r}")
        tau3 = T.repeat(tau.reshape(n, 1), 3, axis=1)
        mu = tau3 * T.Value(dirs) + T.Value(camera.center.astype(dtype))
        q_raw, s_raw = flat[:, 1:5], flat[:, 5:8]
        o_raw, c_raw = flat[:, 8], flat[:, 9:12]

    # zero-norm quaternions fall back to identity; tallied, not an error
    norms = np.linalg.norm(q_raw.data, axis=-1)
    bad = norms < 1e-12
    n_bad = int(bad.sum())
    if n_bad:
        fix = np.zeros((n, 4), dtype=dtype)
        fix[bad, 0] = 1.0
        q_raw = q_raw + T.Value(fix)
    rot = T.l2_normalize(q_raw)

    if scale_activation == "interp":
        sig_s = T.sigmoid(s_raw)
        scales = s_min * sig_s + s_max * (1.0 - sig_s)
    elif scale_activation == "exp":
        # conventional unbounded splat scaling, kept for the ablation
        scales = float(np.sqrt(s_min * s_max)) * T.exp(T.clip(s_raw, -8.0, 8.0))
    else:
        raise ValueError(f"activate: unknown scale activation "
                         f"{scale_activation!r}")
    opac = T.clip(T.sigmoid(o_raw), UNIT_EPS, 1.0 - UNIT_EPS)
    colors = T.clip(T.sigmoid(c_raw), UNIT_EPS, 1.0 - UNIT_EPS)
    return GaussianSet(mu, rot, scales, opac, colors, degenerate_rotations=n_bad)


def merge_views(sets: list[GaussianSet]) -> GaussianSet:
    """Concatenate per-view sets, view-major, preserving row-major order."""
    if not sets:
        raise ValueError("merge_views: empty list")
    if len(sets) == 1:
        return sets[0]
    return GaussianSet(
        T.concat([s.positions for s in sets], axis=0),
        T.concat([s.rotations for s in sets], axis=0),
        T.concat([s.scales for s in sets], axis=0),
        T.concat([s.opacities for s in sets], axis=0),
        T.concat([s.colors for s in sets], axis=0),
        degenerate_rotations=sum(s.degenerate_rotations for s in sets))


def split_views(merged: GaussianSet, sizes: list[int]) -> list[GaussianSet]:
    """Inverse of merge_views given the per-view Gaussian counts."""
    if sum(sizes) != len(merged):
        raise ValueError(f"split_views: sizes {sizes} do not sum to {len(merged)}")
    out, start = [], 0
    for sz in sizes:
        sl = slice(start, start + sz)
        out.append(GaussianSet(merged.positions[sl], merged.rotations[sl],
                               merged.scales[sl], merged.opacities[sl],
                               merged.colors[sl]))
        start += sz
    return out


# -- splat-PLY interop -------------------------------------------------------

def export_ply(gset: GaussianSet, path):
    """Binary little-endian PLY in the de-facto splat layout: colors as
    SH-DC coefficients, opacity as a logit, scales as natural logs."""
    gset.validate()
    n = len(gset)
    rec = np.zeros(n, dtype=[(p, "<f4") for p in PLY_PROPS])
    pos = gset.positions.data
    rec["x"], rec["y"], rec["z"] = pos[:, 0], pos[:, 1], pos[:, 2]
    fdc = (gset.colors.data.astype(np.float64) - 0.5) / SH_DC
    for i in range(3):
        rec[f"f_dc_{i}"] = fdc[:, i]
    o = gset.opacities.data.astype(np.float64)
    rec["opacity"] = np.log(o / (1.0 - o))
    for i in range(3):
        rec[f"scale_{i}"] = np.log(gset.scales.data[:, i])
    for i in range(4):
        rec[f"rot_{i}"] = gset.rotations.data[:, i]
    header = ("ply\nformat binary_little_endian 1.0\n"
              f"element vertex {n}\n"
              + "".join(f"property float {p}\n" for p in PLY_PROPS)
              + "end_header\n")
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        rec.tofile(f)


def import_ply(path) -> GaussianSet:
    """Read a splat PLY written by export_ply (extra float properties from
    other tools are tolerated and ignored)."""
    with open(path, "rb") as f:
        blob = f.read()
    end = blob.find(b"end_header\n")
    if not blob.startswith(b"ply\n") or end < 0:
        raise ValueError(f"{path}: not a PLY file (missing magic or end_header)")
    lines = blob[:end].decode("ascii", "replace").splitlines()
    if "format binary_little_endian 1.0" not in lines:
        raise ValueError(f"{path}: unsupported PLY format (need "
                         "binary_little_endian 1.0)")
    n = None
    props = []
    for line in lines:
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            n = int(parts[2])
        elif parts and parts[0] == "element" and parts[1] != "vertex":
            raise ValueError(f"{path}: unexpected element {parts[1]!r}")
        elif parts[:1] == ["property"]:
            if parts[1] != "float":
                raise ValueError(f"{path}: non-float property {parts[2]!r}")
            props.append(parts[2])
    if n is None:
        raise ValueError(f"{path}: missing 'element vertex' line")
    missing = [p for p in PLY_PROPS if p not in props]
    if missing:
        raise ValueError(f"{path}: missing required properties {missing}")
    data = np.frombuffer(blob, dtype=[(p, "<f4") for p in props],
                         count=n, offset=end + len(b"end_header\n"))
    pos = np.stack([data["x"], data["y"], data["z"]], axis=-1)
    colors = np.stack([data[f"f_dc_{i}"] for i in range(3)],
                      axis=-1).astype(np.float64) * SH_DC + 0.5
    opac = expit(data["opacity"].astype(np.float64))
    scales = np.exp(np.stack([data[f"scale_{i}"] for i in range(3)], axis=-1))
    rot = np.stack([data[f"rot_{i}"] for i in range(4)], axis=-1).astype(np.float64)
    rot /= np.linalg.norm(rot, axis=-1, keepdims=True)
    return GaussianSet.from_arrays(pos, rot, scales, opac, colors)
