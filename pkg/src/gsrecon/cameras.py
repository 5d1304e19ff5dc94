"""Pinhole cameras, per-pixel rays, ray embeddings, and sphere-sampled rigs.

Conventions (used everywhere, including file export): right-handed world;
the camera looks down its local -z axis with x right and y up; image x runs
right, image y runs down; rays pass through pixel centers (i+0.5, j+0.5).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))


@dataclass(frozen=True)
class Camera:
    """Pinhole camera: world-from-camera rotation, center, vertical fov."""

    rotation: np.ndarray      # (3,3), columns are camera axes in world coords
    center: np.ndarray        # (3,)
    fov_y_deg: float
    width: int
    height: int
    near: float = 0.05
    far: float = 100.0

    def __post_init__(self):
        object.__setattr__(self, "rotation",
                           np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "center",
                           np.asarray(self.center, dtype=np.float64).reshape(3))
        rtr = self.rotation.T @ self.rotation
        if not np.allclose(rtr, np.eye(3), atol=1e-6):
            raise ValueError("Camera: rotation is not orthonormal")
        if np.linalg.det(self.rotation) < 0:
            raise ValueError("Camera: rotation must have determinant +1")
        if not (0 < self.near < self.far):
            raise ValueError(f"Camera: need 0 < near < far, "
                             f"got {self.near}, {self.far}")

    @property
    def focal(self) -> float:
        """Focal length in pixels (from the vertical field of view)."""
        return 0.5 * self.height / math.tan(math.radians(self.fov_y_deg) / 2)

    @property
    def principal(self) -> tuple[float, float]:
        return 0.5 * self.width, 0.5 * self.height

    def resized(self, width: int, height: int) -> "Camera":
        return replace(self, width=width, height=height)

    @staticmethod
    def look_at(center, target, fov_y_deg: float, width: int, height: int,
                near: float = 0.05, far: float = 100.0) -> "Camera":
        """Camera at `center` oriented toward `target`, world +y up
        (fallback +x when degenerate)."""
        center = np.asarray(center, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - center
        n = np.linalg.norm(fwd)
        if n < 1e-12:
            fwd = np.array([0.0, 0.0, -1.0])
        else:
            fwd = fwd / n
        up = np.array([0.0, 1.0, 0.0])
        if abs(np.dot(fwd, up)) > 1.0 - 1e-8:
            up = np.array([1.0, 0.0, 0.0])
        x = np.cross(fwd, up)
        x /= np.linalg.norm(x)
        y = np.cross(-fwd, x)
        rot = np.stack([x, y, -fwd], axis=1)
        return Camera(rot, center, fov_y_deg, width, height, near, far)


@dataclass(frozen=True)
class RayMap:
    """Per-pixel ray origins and unit directions, shape (H, W, 3) each."""

    origins: np.ndarray
    directions: np.ndarray


def pixel_rays(camera: Camera) -> RayMap:
    """One ray per pixel center; directions are unit vectors in world space."""
    h, w = camera.height, camera.width
    f = camera.focal
    cx, cy = camera.principal
    u = (np.arange(w, dtype=np.float64) + 0.5 - cx) / f
    v = (np.arange(h, dtype=np.float64) + 0.5 - cy) / f
    uu, vv = np.meshgrid(u, v)
    d_cam = np.stack([uu, -vv, -np.ones_like(uu)], axis=-1)
    d_world = d_cam @ camera.rotation.T
    d_world /= np.linalg.norm(d_world, axis=-1, keepdims=True)
    origins = np.broadcast_to(camera.center, (h, w, 3)).copy()
    return RayMap(origins, d_world)


def plucker_embed(rays: RayMap) -> np.ndarray:
    """Six-channel ray encoding: unit direction and moment origin x direction."""
    moment = np.cross(rays.origins, rays.directions)
    return np.concatenate([rays.directions, moment], axis=-1)


def unproject(camera: Camera, depth: np.ndarray) -> np.ndarray:
    """Place one point per pixel at the given distance along its ray."""
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != (camera.height, camera.width):
        raise ValueError(f"unproject: depth shape {depth.shape} does not match "
                         f"camera {camera.height}x{camera.width}")
    if depth.min() < camera.near - 1e-9 or depth.max() > camera.far + 1e-9:
        raise ValueError(f"unproject: depth range [{depth.min()}, {depth.max()}] "
                         f"outside [near={camera.near}, far={camera.far}]")
    rays = pixel_rays(camera)
    return rays.origins + depth[..., None] * rays.directions


def project_points(camera: Camera, points: np.ndarray):
    """World points -> (pixel xy, camera-space depth). Inverse of unproject
    up to the ray parameterization."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    t = (pts - camera.center) @ camera.rotation
    z = -t[:, 2]
    f = camera.focal
    cx, cy = camera.principal
    with np.errstate(divide="ignore", invalid="ignore"):
        px = cx + f * t[:, 0] / z
        py = cy - f * t[:, 1] / z
    return np.stack([px, py], axis=-1), z


def fibonacci_cameras(n: int, radius: float, look_at=(0.0, 0.0, 0.0),
                      fov_y_deg: float = 50.0, width: int = 64,
                      height: int = 64, near: float | None = None,
                      far: float | None = None) -> list[Camera]:
    """n near-uniform cameras on a sphere via the Fibonacci lattice, each
    oriented toward look_at. The first sample sits at the +z pole."""
    if n < 1:
        raise ValueError("fibonacci_cameras: n must be >= 1")
    if radius <= 0:
        raise ValueError("fibonacci_cameras: radius must be positive")
    look_at = np.asarray(look_at, dtype=np.float64)
    if near is None:
        near = 0.05 * radius
    if far is None:
        far = 4.0 * radius
    cams = []
    for k in range(n):
        z = 1.0 - 2.0 * k / n
        r = math.sqrt(max(0.0, 1.0 - z * z))
        phi = k * GOLDEN_ANGLE
        p = np.array([r * math.cos(phi), r * math.sin(phi), z]) * radius
        cams.append(Camera.look_at(p + look_at, look_at, fov_y_deg,
                                   width, height, near, far))
    return cams


def transform_camera(camera: Camera, rot: np.ndarray, t: np.ndarray) -> Camera:
    """Apply the world-space rigid motion x -> rot @ x + t to a camera."""
    rot = np.asarray(rot, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    return replace(camera, rotation=rot @ camera.rotation,
                   center=rot @ camera.center + t)


def save_cameras(cameras: list[Camera], path):
    views = [{
        "rotation": [float(x) for x in c.rotation.reshape(-1)],
        "center": [float(x) for x in c.center],
        "fov_y_deg": float(c.fov_y_deg),
        "width": int(c.width),
        "height": int(c.height),
        "near": float(c.near),
        "far": float(c.far),
    } for c in cameras]
    Path(path).write_text(json.dumps(views, indent=1, sort_keys=True))


def load_cameras(path) -> list[Camera]:
    views = json.loads(Path(path).read_text())
    cams = []
    for i, v in enumerate(views):
        missing = {"rotation", "center", "fov_y_deg", "width", "height",
                   "near", "far"} - set(v)
        if missing:
            raise ValueError(f"camera file {path}: view {i} missing "
                             f"fields {sorted(missing)}")
        cams.append(Camera(np.array(v["rotation"]).reshape(3, 3),
                           np.array(v["center"]), v["fov_y_deg"],
                           v["width"], v["height"], v["near"], v["far"]))
    return cams
