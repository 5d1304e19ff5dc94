import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gsrecon import tensor as T
from gsrecon.cameras import Camera, pixel_rays
from gsrecon.gaussians import (GaussianSet, activate, export_ply, import_ply,
                               merge_views, quat_multiply, quat_to_rotmat,
                               split_views)

CAM = Camera.look_at((0, 0, 2.0), (0, 0, 0), 50.0, 4, 4, 0.5, 2.5)
CAM2 = Camera.look_at((0, 0, 2.0), (0, 0, 0), 50.0, 2, 2, 0.5, 2.5)


def raw_map(h=4, w=4, fill=0.0, c=12):
    return T.Value(np.full((h, w, c), fill, dtype=np.float32))


def test_scale_logit_zero_is_midpoint():
    raw = raw_map()
    gs = activate(raw, CAM, 0.005, 0.02)
    assert np.allclose(gs.scales.data, 0.0125, atol=1e-7)


def test_large_scale_logit_selects_s_min():
    arr = np.zeros((4, 4, 12), dtype=np.float32)
    arr[..., 5:8] = 20.0
    gs = activate(T.Value(arr), CAM, 0.005, 0.02)
    assert np.abs(gs.scales.data - 0.005).max() < 1e-6


def test_scale_activation_monotone_and_bounded(rng):
    logits = np.linspace(-30, 30, 101)
    arr = np.zeros((1, 101, 12), dtype=np.float64)
    arr[0, :, 5] = logits
    cam = Camera.look_at((0, 0, 2.0), (0, 0, 0), 50.0, 101, 1, 0.5, 2.5)
    s = activate(T.Value(arr), cam).scales.data[:, 0]
    assert (np.diff(s) <= 1e-12).all()
    assert s.min() >= 0.005 and s.max() <= 0.02


def test_quaternion_normalization():
    arr = np.zeros((1, 1, 12), dtype=np.float32)
    arr[..., 1] = 2.0          # quaternion (2, 0, 0, 0)
    gs = activate(T.Value(arr), Camera.look_at((0, 0, 2), (0, 0, 0), 50.0,
                                               1, 1, 0.5, 2.5))
    assert np.allclose(gs.rotations.data, [[1, 0, 0, 0]])


def test_zero_norm_quaternion_tallied_not_error():
    arr = np.random.default_rng(0).normal(size=(2, 2, 12)).astype(np.float32)
    arr[0, 0, 1:5] = 0.0
    cam = Camera.look_at((0, 0, 2), (0, 0, 0), 50.0, 2, 2, 0.5, 2.5)
    gs = activate(T.Value(arr), cam)
    assert gs.degenerate_rotations == 1
    assert np.allclose(gs.rotations.data[0], [1, 0, 0, 0])
    gs.validate()


def test_depth_midpoint_unprojects_along_ray():
    cam = Camera.look_at((0.3, -0.2, 2.0), (0, 0, 0), 50.0, 4, 4, 0.5, 2.5)
    gs = activate(raw_map(), cam)
    dirs = pixel_rays(cam).directions.reshape(-1, 3)
    expected = cam.center + 1.5 * dirs
    assert np.abs(gs.positions.data - expected).max() < 1e-6


def test_positions_on_rays_cross_product(rng):
    arr = rng.normal(scale=3.0, size=(6, 5, 12)).astype(np.float32)
    cam = Camera.look_at((1.0, 0.5, 2.0), (0, 0, 0), 55.0, 5, 6, 0.3, 4.0)
    gs = activate(T.Value(arr), cam)
    dirs = pixel_rays(cam).directions.reshape(-1, 3)
    cross = np.cross(gs.positions.data - cam.center, dirs)
    assert np.abs(np.linalg.norm(cross, axis=1)).max() <= 1e-5


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.floats(0.1, 1e6))
def test_activate_invariants_fuzz(seed, scale):
    """Arbitrary finite raw maps always activate into a valid set."""
    rng = np.random.default_rng(seed)
    arr = (rng.normal(size=(3, 3, 12)) * scale).astype(np.float32)
    gs = activate(T.Value(arr), Camera.look_at((0, 0, 2), (0, 0, 0), 50.0,
                                               3, 3, 0.5, 2.5))
    gs.validate(0.005, 0.02)


def test_exp_scale_activation_unbounded():
    arr = np.zeros((2, 2, 12), dtype=np.float32)
    arr[..., 5:8] = -3.0
    gs = activate(T.Value(arr), CAM2, scale_activation="exp")
    mid = np.sqrt(0.005 * 0.02)
    assert np.allclose(gs.scales.data, mid * np.exp(-3.0), rtol=1e-5)
    arr[..., 5:8] = 5.0
    gs2 = activate(T.Value(arr), CAM2, scale_activation="exp")
    assert gs2.scales.data.max() > 0.02      # escapes the interp bounds


def test_softplus_depth_activation_stays_in_frustum():
    arr = np.zeros((2, 2, 12), dtype=np.float32)
    arr[..., 0] = 40.0
    gs = activate(T.Value(arr), CAM2, depth_activation="softplus")
    d = np.linalg.norm(gs.positions.data - CAM2.center, axis=1)
    assert d.max() <= CAM2.far + 1e-5


def test_xyz_mode_uses_raw_positions(rng):
    arr = rng.normal(size=(2, 2, 14)).astype(np.float32)
    from gsrecon.gaussians import AttributeMap
    gs = activate(AttributeMap(T.Value(arr), xyz_mode=True), CAM2)
    assert np.allclose(gs.positions.data, arr.reshape(-1, 14)[:, :3])


def test_merge_views_count_and_order(rng):
    cam = Camera.look_at((0, 0, 2), (0, 0, 0), 50.0, 64, 64, 0.5, 2.5)
    sets = [activate(T.Value(rng.normal(size=(64, 64, 12)).astype(np.float32)),
                     cam) for _ in range(4)]
    merged = merge_views(sets)
    assert len(merged) == 16384
    parts = split_views(merged, [len(s) for s in sets])
    for orig, back in zip(sets, parts):
        assert np.array_equal(orig.positions.data, back.positions.data)
        assert np.array_equal(orig.colors.data, back.colors.data)


def test_merge_single_view_identity(rng):
    arr = rng.normal(size=(2, 2, 12)).astype(np.float32)
    gs = activate(T.Value(arr), CAM2)
    assert merge_views([gs]) is gs


def test_quat_rotmat_orthonormal(rng):
    q = rng.normal(size=(10, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    r = quat_to_rotmat(q)
    eye = np.einsum("nij,nkj->nik", r, r)
    assert np.abs(eye - np.eye(3)).max() < 1e-12
    ab = quat_multiply(q[:5], q[5:])
    r_ab = quat_to_rotmat(ab / np.linalg.norm(ab, axis=1, keepdims=True))
    assert np.abs(r_ab - r[:5] @ r[5:]).max() < 1e-12


# -- PLY interop -------------------------------------------------------------

def _sample_set(rng, n=17):
    pos = rng.normal(size=(n, 3))
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    s = rng.uniform(0.005, 0.02, size=(n, 3))
    o = rng.uniform(0.05, 0.95, size=n)
    c = rng.uniform(0.05, 0.95, size=(n, 3))
    return GaussianSet.from_arrays(pos, q, s, o, c)


def test_ply_round_trip(tmp_path, rng):
    gs = _sample_set(rng)
    path = tmp_path / "set.ply"
    export_ply(gs, path)
    back = import_ply(path)
    assert np.abs(back.positions.data - gs.positions.data).max() < 1e-6
    assert np.abs(back.scales.data - gs.scales.data).max() < 1e-7
    assert np.abs(back.opacities.data - gs.opacities.data).max() < 1e-6
    assert np.abs(back.colors.data - gs.colors.data).max() < 1e-6
    q_err = np.minimum(np.abs(back.rotations.data - gs.rotations.data),
                       np.abs(back.rotations.data + gs.rotations.data)).max()
    assert q_err < 1e-6


def test_ply_gray_color_gives_zero_dc(tmp_path):
    gs = GaussianSet.from_arrays([[0, 0, 0.0]], [[1, 0, 0, 0.0]],
                                 [[0.01] * 3], [0.5], [[0.5] * 3])
    path = tmp_path / "gray.ply"
    export_ply(gs, path)
    blob = path.read_bytes()
    n = blob.index(b"end_header\n") + len(b"end_header\n")
    rec = np.frombuffer(blob, dtype="<f4", offset=n)
    fdc = rec[3:6]
    assert np.abs(fdc).max() < 1e-7


def test_ply_opacity_logit_encoding(tmp_path):
    gs = GaussianSet.from_arrays([[0, 0, 0.0]], [[1, 0, 0, 0.0]],
                                 [[0.01] * 3], [0.75], [[0.4] * 3])
    path = tmp_path / "o.ply"
    export_ply(gs, path)
    rec = np.frombuffer(path.read_bytes(), dtype="<f4",
                        offset=path.read_bytes().index(b"end_header\n") + 11)
    assert rec[6] == pytest.approx(np.log(3.0), rel=1e-5)


def test_ply_header_and_field_names(tmp_path, rng):
    path = tmp_path / "f.ply"
    export_ply(_sample_set(rng, 3), path)
    head = path.read_bytes().split(b"end_header")[0].decode()
    for name in ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
                 "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2",
                 "rot_3"]:
        assert f"property float {name}\n" in head
    assert "binary_little_endian" in head


def test_ply_malformed_rejected(tmp_path, rng):
    p1 = tmp_path / "bad1.ply"
    p1.write_bytes(b"not a ply at all")
    with pytest.raises(ValueError, match="PLY"):
        import_ply(p1)

    good = tmp_path / "good.ply"
    export_ply(_sample_set(rng, 2), good)
    blob = good.read_bytes().replace(b"property float opacity\n", b"")
    p2 = tmp_path / "bad2.ply"
    p2.write_bytes(blob)
    with pytest.raises(ValueError, match="opacity"):
        import_ply(p2)
