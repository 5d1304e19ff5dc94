import numpy as np
import pytest

from gsrecon.cameras import fibonacci_cameras
from gsrecon.data import (SceneSample, gen_scene, load_dataset, make_dataset,
                          render_dataset, save_dataset)
from gsrecon.render import render_forward


def test_gen_scene_deterministic():
    a = gen_scene(42)
    b = gen_scene(42)
    assert np.array_equal(a.positions.data, b.positions.data)
    assert np.array_equal(a.colors.data, b.colors.data)
    c = gen_scene(43)
    assert len(c) != len(a) or not np.array_equal(c.positions.data,
                                                  a.positions.data)


def test_gen_scene_inside_unit_sphere_and_valid():
    for seed in range(5):
        gs = gen_scene(seed)
        assert 150 <= len(gs) <= 3200
        assert np.linalg.norm(gs.positions.data, axis=1).max() <= 1.0
        gs.validate(0.005, 0.02)


def test_gen_scene_silhouette_from_fibonacci_cameras():
    gs = gen_scene(7)
    for cam in fibonacci_cameras(16, 2.0, width=32, height=32):
        _, alpha, _ = render_forward(gs, cam)
        assert alpha.max() > 0.5


def test_render_dataset_structure():
    sample = render_dataset(gen_scene(1), n_views=32, fov_deg=50.0,
                            image_hw=(32, 32), seed=1)
    assert len(sample.views) == 32
    assert len(sample.input_views()) == 4
    assert len(sample.split_views("eval")) >= 1
    for v in sample.views:
        assert np.linalg.norm(v.camera.center) == pytest.approx(2.0, abs=1e-9)
        assert v.camera.fov_y_deg == 50.0
        assert v.image.shape == (32, 32, 3)
        assert v.mask.shape == (32, 32)


def test_render_dataset_rerender_reproduces_stored():
    sample = render_dataset(gen_scene(3), n_views=6, image_hw=(16, 16), seed=3)
    for v in sample.views:
        rgb, alpha, _ = render_forward(sample.gaussians, v.camera)
        assert np.array_equal(rgb.astype(np.float32), v.image)
        assert np.array_equal(alpha.astype(np.float32), v.mask)


def test_mask_equals_alpha_channel():
    sample = render_dataset(gen_scene(4), n_views=5, image_hw=(16, 16), seed=4)
    for v in sample.views:
        _, alpha, _ = render_forward(sample.gaussians, v.camera)
        assert np.array_equal(v.mask, alpha.astype(np.float32))


def test_render_dataset_rejects_too_few_views():
    with pytest.raises(ValueError, match="n_views"):
        render_dataset(gen_scene(0), n_views=4)


def test_save_load_round_trip(tmp_path):
    scenes = make_dataset(2, seed=9, n_views=6, image_hw=(16, 16))
    save_dataset(scenes, tmp_path / "ds")
    back = load_dataset(tmp_path / "ds")
    assert len(back) == 2
    for a, b in zip(scenes, back):
        assert a.scene_id == b.scene_id and a.seed == b.seed
        assert len(a.views) == len(b.views)
        for va, vb in zip(a.views, b.views):
            assert np.array_equal(va.image, vb.image)
            assert np.array_equal(va.mask, vb.mask)
            assert va.split == vb.split
            assert np.allclose(va.camera.rotation, vb.camera.rotation)
        assert np.abs(a.gaussians.positions.data
                      - b.gaussians.positions.data).max() < 1e-6


def test_manifest_seed_regenerates_scene(tmp_path):
    scenes = make_dataset(1, seed=5, n_views=6, image_hw=(16, 16))
    save_dataset(scenes, tmp_path / "ds")
    back = load_dataset(tmp_path / "ds")[0]
    regen = render_dataset(gen_scene(back.seed), n_views=6,
                           image_hw=(16, 16), seed=back.seed)
    for va, vb in zip(regen.views, back.views):
        assert np.array_equal(va.image, vb.image)


def test_corrupted_mask_rejected_naming_file(tmp_path):
    scenes = make_dataset(1, seed=2, n_views=6, image_hw=(16, 16))
    save_dataset(scenes, tmp_path / "ds")
    victim = next((tmp_path / "ds" / scenes[0].scene_id).glob("mask_000.npy"))
    np.save(victim, np.zeros((3, 3), dtype=np.float32))
    with pytest.raises(ValueError, match="mask_000"):
        load_dataset(tmp_path / "ds")


def test_dataset_regenerable_bytes(tmp_path):
    scenes1 = make_dataset(1, seed=11, n_views=5, image_hw=(16, 16))
    scenes2 = make_dataset(1, seed=11, n_views=5, image_hw=(16, 16))
    save_dataset(scenes1, tmp_path / "a")
    save_dataset(scenes2, tmp_path / "b")
    files_a = sorted(p.relative_to(tmp_path / "a")
                     for p in (tmp_path / "a").rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / "b")
                     for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert files_a == files_b
    for rel in files_a:
        assert (tmp_path / "a" / rel).read_bytes() == \
            (tmp_path / "b" / rel).read_bytes(), rel
