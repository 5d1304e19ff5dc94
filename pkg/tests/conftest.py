import numpy as np
import pytest

from gsrecon.cameras import Camera
from gsrecon.gaussians import GaussianSet


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def random_gaussians(rng, n=8, dtype=np.float64, opac_range=(0.1, 0.6),
                     scale_range=(0.08, 0.3), spread=0.35):
    """Random scene in front of the origin-facing test camera."""
    pos = rng.normal(scale=spread, size=(n, 3))
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    s = rng.uniform(*scale_range, size=(n, 3))
    o = rng.uniform(*opac_range, size=n)
    c = rng.uniform(0.05, 0.95, size=(n, 3))
    return GaussianSet.from_arrays(pos, q, s, o, c, dtype=dtype)


def make_camera(size=16, dist=2.5, fov=60.0):
    return Camera.look_at((0.15, -0.1, dist), (0, 0, 0), fov, size, size,
                          0.1, 10.0)


def grad_safe_scene(rng, n=8, size=16, max_tries=200):
    """Scene suitable for finite-difference gradient checks: no camera-depth
    ties within 1e-3 (the sort-tie exclusion) and no pixel center within
    a small band of any Gaussian's 3-sigma cutoff boundary, where central
    differences are invalid.
    """
    from gsrecon.render import project
    cam = make_camera(size)
    for _ in range(max_tries):
        gset = random_gaussians(rng, n)
        pg = project(gset, cam)
        if len(pg.depth) < n:
            continue
        dz = np.diff(np.sort(pg.depth))
        if len(dz) and dz.min() < 1.5e-3:
            continue
        ys, xs = np.meshgrid(np.arange(size) + 0.5, np.arange(size) + 0.5,
                             indexing="ij")
        conic = np.linalg.inv(pg.cov2d)
        dx = xs.reshape(-1, 1) - pg.mean2d[:, 0]
        dy = ys.reshape(-1, 1) - pg.mean2d[:, 1]
        d2 = (conic[:, 0, 0] * dx ** 2 + 2 * conic[:, 0, 1] * dx * dy
              + conic[:, 1, 1] * dy ** 2)
        if np.abs(d2 - 9.0).min() < 5e-3:
            continue
        return gset, cam
    raise RuntimeError("could not build a gradient-safe scene")
