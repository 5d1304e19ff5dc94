import math

import numpy as np
import pytest

from gsrecon.cameras import (Camera, fibonacci_cameras, load_cameras,
                             pixel_rays, plucker_embed, project_points,
                             save_cameras, transform_camera, unproject)


def test_single_pixel_principal_ray():
    cam = Camera(np.eye(3), np.zeros(3), 90.0, 1, 1, 0.1, 10.0)
    rm = pixel_rays(cam)
    assert np.allclose(rm.directions[0, 0], [0, 0, -1])
    assert np.allclose(rm.origins, 0)


def test_fov90_corner_symmetry():
    cam = Camera(np.eye(3), np.zeros(3), 90.0, 2, 2, 0.1, 10.0)
    d = pixel_rays(cam).directions.reshape(-1, 3)
    angles = np.arccos(-d[:, 2])
    assert np.allclose(angles, angles[0])
    assert np.allclose(np.linalg.norm(d, axis=1), 1.0, atol=1e-6)


def test_adjacent_ray_angle_matches_fov_over_height(rng):
    cam = Camera.look_at(rng.normal(size=3) * 2, np.zeros(3), 15.0, 65, 65,
                         0.1, 10.0)
    d = pixel_rays(cam).directions
    a = d[32, 32]
    b = d[33, 32]
    angle = np.arccos(np.clip(a @ b, -1, 1))
    # first-order estimate, plus the exact value from projecting unit-depth
    # ray endpoints one pixel apart
    assert angle == pytest.approx(math.radians(15.0) / 65, rel=0.01)
    assert angle == pytest.approx(math.atan(1.0 / cam.focal), rel=1e-6)


def test_central_ray_is_forward_axis():
    cam = Camera.look_at((1, 2, 3), (0, 0, 0), 50.0, 33, 33, 0.1, 10.0)
    fwd = -cam.rotation[:, 2]
    assert np.allclose(pixel_rays(cam).directions[16, 16], fwd, atol=1e-12)


def test_plucker_zero_moment_at_origin():
    cam = Camera(np.eye(3), np.zeros(3), 60.0, 4, 4, 0.1, 10.0)
    emb = plucker_embed(pixel_rays(cam))
    assert np.allclose(emb[..., 3:], 0.0)


def test_plucker_hand_example():
    from gsrecon.cameras import RayMap
    rays = RayMap(np.array([[[1.0, 0, 0]]]), np.array([[[0.0, 0, -1.0]]]))
    emb = plucker_embed(rays)
    assert np.allclose(emb[0, 0], [0, 0, -1, 0, 1, 0])


def test_plucker_invariant_to_origin_slide(rng):
    cam = Camera.look_at(rng.normal(size=3) * 2, np.zeros(3), 55.0, 8, 8,
                         0.1, 10.0)
    rm = pixel_rays(cam)
    base = plucker_embed(rm)
    for t in rng.uniform(-3, 3, size=5):
        from gsrecon.cameras import RayMap
        slid = RayMap(rm.origins + t * rm.directions, rm.directions)
        assert np.abs(plucker_embed(slid) - base).max() < 1e-6


def test_unproject_direct():
    cam = Camera(np.eye(3), np.zeros(3), 60.0, 1, 1, 0.5, 10.0)
    pts = unproject(cam, np.full((1, 1), 2.0))
    assert np.allclose(pts[0, 0], [0, 0, -2.0])


def test_unproject_constant_depth_sphere(rng):
    cam = Camera.look_at(rng.normal(size=3), np.zeros(3), 45.0, 9, 7,
                         0.25, 10.0)
    pts = unproject(cam, np.full((7, 9), 0.25))
    d = np.linalg.norm(pts - cam.center, axis=-1)
    assert np.abs(d - 0.25).max() < 1e-6


def test_unproject_project_round_trip(rng):
    cam = Camera.look_at(rng.normal(size=3) * 3, np.zeros(3), 47.0, 20, 14,
                         0.1, 20.0)
    tau = rng.uniform(1.0, 5.0, size=(14, 20))
    pts = unproject(cam, tau)
    px, _ = project_points(cam, pts.reshape(-1, 3))
    jj, ii = np.meshgrid(np.arange(20) + 0.5, np.arange(14) + 0.5)
    expected = np.stack([jj.ravel(), ii.ravel()], axis=-1)
    assert np.abs(px - expected).max() <= 1e-4


def test_unproject_rejects_out_of_range_depth():
    cam = Camera(np.eye(3), np.zeros(3), 60.0, 2, 2, 0.5, 2.0)
    with pytest.raises(ValueError, match="outside"):
        unproject(cam, np.full((2, 2), 5.0))


def test_fibonacci_single_camera_at_pole():
    cam = fibonacci_cameras(1, 2.0)[0]
    assert np.allclose(cam.center, [0, 0, 2.0], atol=1e-12)


def test_fibonacci_centers_on_sphere():
    cams = fibonacci_cameras(200, 2.0)
    radii = np.array([np.linalg.norm(c.center) for c in cams])
    assert np.abs(radii - 2.0).max() < 1e-9


def test_fibonacci_near_uniform_spacing():
    from scipy.spatial import cKDTree
    centers = np.stack([c.center for c in fibonacci_cameras(200, 1.0)])
    nn = cKDTree(centers).query(centers, k=2)[0][:, 1]
    assert nn.std() / nn.mean() < 0.25
    centers16 = np.stack([c.center for c in fibonacci_cameras(16, 1.0)])
    nn16 = cKDTree(centers16).query(centers16, k=2)[0][:, 1]
    assert nn16.max() / nn16.min() < 2.0


def test_fibonacci_look_at_offset_center():
    target = np.array([1.0, 2.0, -0.5])
    cams = fibonacci_cameras(10, 3.0, look_at=target)
    for c in cams:
        assert np.linalg.norm(c.center - target) == pytest.approx(3.0)
        fwd = -c.rotation[:, 2]
        to_target = (target - c.center) / 3.0
        assert np.allclose(fwd, to_target, atol=1e-9)


def test_rigid_equivariance(rng):
    from scipy.spatial.transform import Rotation
    cam = Camera.look_at((2, 1, 2), (0, 0, 0), 50.0, 6, 6, 0.1, 10.0)
    rot = Rotation.random(random_state=3).as_matrix()
    t = rng.normal(size=3)
    moved = transform_camera(cam, rot, t)
    rm = pixel_rays(cam)
    rm2 = pixel_rays(moved)
    assert np.abs(rm2.origins - (rm.origins @ rot.T + t)).max() < 1e-9
    assert np.abs(rm2.directions - rm.directions @ rot.T).max() < 1e-9


def test_camera_validation():
    with pytest.raises(ValueError, match="orthonormal"):
        Camera(np.eye(3) * 2, np.zeros(3), 50.0, 4, 4)
    with pytest.raises(ValueError, match="near"):
        Camera(np.eye(3), np.zeros(3), 50.0, 4, 4, near=2.0, far=1.0)
    flip = np.diag([1.0, 1.0, -1.0])
    with pytest.raises(ValueError, match="determinant"):
        Camera(flip, np.zeros(3), 50.0, 4, 4)


def test_camera_serialization_round_trip(tmp_path, rng):
    cams = fibonacci_cameras(5, 2.0, fov_y_deg=47.0, width=32, height=24)
    path = tmp_path / "cameras.json"
    save_cameras(cams, path)
    loaded = load_cameras(path)
    assert len(loaded) == 5
    for a, b in zip(cams, loaded):
        assert np.allclose(a.rotation, b.rotation)
        assert np.allclose(a.center, b.center)
        assert (a.fov_y_deg, a.width, a.height) == (b.fov_y_deg, b.width, b.height)


def test_camera_file_missing_field(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('[{"rotation": [1,0,0,0,1,0,0,0,1], "center": [0,0,0]}]')
    with pytest.raises(ValueError, match="missing"):
        load_cameras(path)
