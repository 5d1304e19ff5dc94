import numpy as np
import pytest

from gsrecon.cameras import fibonacci_cameras
from gsrecon.gaussians import GaussianSet
from gsrecon.mesh import (TsdfVolume, extract_mesh, load_mesh_ply, make_volume,
                          marching_cubes, remove_floaters, save_mesh_obj,
                          save_mesh_ply, tsdf_fuse)


def _ball(sigma=0.15, opacity=0.95):
    return GaussianSet.from_arrays([[0, 0, 0.0]], [[1, 0, 0, 0.0]],
                                   [[sigma] * 3], [opacity], [[0.8, 0.2, 0.2]])


def _zero_crossing_radii(vol):
    """Radii where the fused tsdf crosses zero along voxel rows."""
    verts, faces, _ = marching_cubes(vol)
    assert len(verts) > 0
    return np.linalg.norm(verts, axis=1)


def test_single_ball_shell_in_sigma_band():
    sigma = 0.15
    vol = make_volume((-0.5, -0.5, -0.5), (0.5, 0.5, 0.5), 0.02)
    cams = fibonacci_cameras(64, 1.5, width=64, height=64)
    tsdf_fuse(_ball(sigma), cams, voxel=0.02, volume=vol)
    radii = _zero_crossing_radii(vol)
    assert radii.min() > sigma - 2 * 0.02
    assert radii.max() < 2 * sigma + 2 * 0.02


def test_fuse_no_cameras_leaves_volume():
    vol = make_volume((-1, -1, -1), (1, 1, 1), 0.1)
    before = vol.tsdf.copy()
    out = tsdf_fuse(_ball(), [], voxel=0.1, volume=vol)
    assert np.array_equal(out.tsdf, before)
    assert out.weight.sum() == 0


def test_fuse_camera_count_convergence():
    def shell(n):
        vol = make_volume((-0.5, -0.5, -0.5), (0.5, 0.5, 0.5), 0.02)
        cams = fibonacci_cameras(n, 1.5, width=64, height=64)
        tsdf_fuse(_ball(), cams, voxel=0.02, volume=vol)
        return _zero_crossing_radii(vol)

    r1, r2 = shell(48), shell(96)
    assert abs(np.median(r1) - np.median(r2)) <= 0.02


def test_fuse_order_independence():
    cams = fibonacci_cameras(12, 1.5, width=32, height=32)
    vol1 = make_volume((-0.5,) * 3, (0.5,) * 3, 0.05)
    tsdf_fuse(_ball(), cams, voxel=0.05, volume=vol1)
    vol2 = make_volume((-0.5,) * 3, (0.5,) * 3, 0.05)
    tsdf_fuse(_ball(), cams[::-1], voxel=0.05, volume=vol2)
    assert np.abs(vol1.tsdf - vol2.tsdf).max() <= 1e-6


def test_fuse_trunc_validation():
    with pytest.raises(ValueError, match="trunc"):
        tsdf_fuse(_ball(), [], voxel=0.1, trunc=0.1)


def _analytic_sphere_volume(radius=0.5, voxel=0.02, extent=0.8):
    vol = make_volume((-extent,) * 3, (extent,) * 3, voxel)
    centers = vol.voxel_centers()
    sdf = radius - np.linalg.norm(centers, axis=1)
    vol.tsdf = np.clip(sdf / (3 * voxel), -1, 1).reshape(
        vol.tsdf.shape).astype(np.float32)
    vol.weight = np.ones_like(vol.weight)
    vol.rgb = np.ones_like(vol.rgb) * 0.5
    return vol


def test_marching_cubes_analytic_sphere():
    vol = _analytic_sphere_volume()
    verts, faces, colors = marching_cubes(vol)
    radii = np.linalg.norm(verts, axis=1)
    assert np.abs(radii - 0.5).max() <= 0.02
    assert len(faces) > 100
    assert np.allclose(colors, 0.5, atol=1e-5)


def test_marching_cubes_sphere_euler_characteristic():
    vol = _analytic_sphere_volume()
    verts, faces, _ = marching_cubes(vol)
    edges = set()
    for tri in faces:
        for a, b in ((0, 1), (1, 2), (2, 0)):
            edges.add((min(tri[a], tri[b]), max(tri[a], tri[b])))
    euler = len(verts) - len(edges) + len(faces)
    assert euler == 2


def test_marching_cubes_all_positive_empty():
    vol = make_volume((-1,) * 3, (1,) * 3, 0.25)
    vol.weight[:] = 1.0          # observed but all free space
    verts, faces, colors = marching_cubes(vol)
    assert len(verts) == 0 and len(faces) == 0


def test_remove_floaters_drops_small_component():
    vol = _analytic_sphere_volume()
    verts, faces, colors = marching_cubes(vol)
    n = len(verts)
    tetra_v = np.array([[2.0, 0, 0], [2.1, 0, 0], [2.0, 0.1, 0],
                        [2.0, 0, 0.1]])
    tetra_f = np.array([[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]]) + n
    all_v = np.concatenate([verts, tetra_v])
    all_f = np.concatenate([faces, tetra_f])
    all_c = np.concatenate([colors, np.zeros((4, 3))])
    v2, f2, c2 = remove_floaters(all_v, all_f, all_c, min_fraction=0.05)
    assert len(v2) == n and len(f2) == len(faces)
    assert f2.max() < len(v2)


def test_remove_floaters_single_component_unchanged():
    vol = _analytic_sphere_volume()
    verts, faces, colors = marching_cubes(vol)
    v2, f2, _ = remove_floaters(verts, faces, colors)
    assert len(v2) == len(verts) and len(f2) == len(faces)


def test_remove_floaters_component_census():
    rng = np.random.default_rng(0)

    def blob(center, n_tri):
        # fan of n_tri triangles sharing one vertex: one component
        pts = [np.asarray(center)]
        faces = []
        for i in range(n_tri):
            pts.append(center + rng.normal(size=3) * 0.1)
            pts.append(center + rng.normal(size=3) * 0.1)
            faces.append([0, 2 * i + 1, 2 * i + 2])
        return np.array(pts), np.array(faces)

    sizes = [40, 10, 3, 1]
    verts_list, faces_list, off = [], [], 0
    for k, size in enumerate(sizes):
        v, f = blob(np.array([3.0 * k, 0, 0]), size)
        verts_list.append(v)
        faces_list.append(f + off)
        off += len(v)
    verts = np.concatenate(verts_list)
    faces = np.concatenate(faces_list)
    _, f2, _ = remove_floaters(verts, faces, None, min_fraction=0.1)
    threshold = 0.1 * max(sizes)
    expected = sum(s for s in sizes if s >= threshold)
    assert len(f2) == expected


def test_mesh_scales_linearly():
    gs = _ball(0.15)
    cams = fibonacci_cameras(32, 1.5, width=48, height=48)
    vol = make_volume((-0.5,) * 3, (0.5,) * 3, 0.025)
    tsdf_fuse(gs, cams, voxel=0.025, volume=vol)
    r_base = np.median(_zero_crossing_radii(vol))

    k = 2.0
    gs2 = GaussianSet.from_arrays(gs.positions.data * k, gs.rotations.data,
                                  gs.scales.data * k, gs.opacities.data,
                                  gs.colors.data)
    cams2 = fibonacci_cameras(32, 1.5 * k, width=48, height=48)
    vol2 = make_volume((-1.0,) * 3, (1.0,) * 3, 0.05)
    tsdf_fuse(gs2, cams2, voxel=0.05, volume=vol2)
    r_scaled = np.median(_zero_crossing_radii(vol2))
    assert abs(r_scaled - k * r_base) <= 0.05  # one (scaled) voxel


def test_extract_mesh_end_to_end_and_io(tmp_path):
    verts, faces, colors = extract_mesh(_ball(0.15), n_cameras=32,
                                        voxel=0.03, image_hw=(48, 48))
    assert len(verts) > 0 and len(faces) > 0
    ply = tmp_path / "m.ply"
    save_mesh_ply(ply, verts, faces, colors)
    v2, f2, c2 = load_mesh_ply(ply)
    assert np.abs(v2 - verts).max() < 1e-6
    assert np.array_equal(f2, faces)
    assert np.abs(c2 - np.clip(colors, 0, 1)).max() <= 1 / 255 + 1e-9

    obj = tmp_path / "m.obj"
    save_mesh_obj(obj, verts, faces)
    lines = obj.read_text().splitlines()
    assert sum(l.startswith("v ") for l in lines) == len(verts)
    assert sum(l.startswith("f ") for l in lines) == len(faces)
