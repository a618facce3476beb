import json
import math

import numpy as np
import pytest

from refrax.scenegen import (PRESETS, Camera, DatasetError, cameras_from_manifest,
                             cameras_helical, cameras_random_sphere, look_at, make_scene_spec,
                             preset_object, read_dataset, write_dataset)


def test_single_camera_looks_at_origin():
    (cam,) = cameras_random_sphere(1, 4.0, seed=3)
    assert np.linalg.norm(cam.position) == pytest.approx(4.0, abs=1e-12)
    # the forward ray passes through the origin
    p, f = cam.position, cam.forward
    assert np.linalg.norm(p + (-(p @ f)) * f) < 1e-12


def test_random_sphere_is_uniform_and_seeded():
    cams = cameras_random_sphere(1000, 2.0, seed=9)
    pos = np.array([c.position for c in cams])
    assert np.linalg.norm(pos.mean(axis=0)) < 0.1 * 2.0
    again = cameras_random_sphere(1000, 2.0, seed=9)
    assert all(np.array_equal(a.c2w, b.c2w) for a, b in zip(cams, again))
    with pytest.raises(ValueError):
        cameras_random_sphere(0, 1.0)


def test_helical_layout():
    cams = cameras_helical(4, 2.0, (0.0, 3.0), 1.0)
    az = [math.degrees(math.atan2(c.position[1], c.position[0])) % 360 for c in cams]
    assert np.allclose(az, [0, 90, 180, 270], atol=1e-9)
    assert np.allclose([c.position[2] for c in cams], [0, 1, 2, 3], atol=1e-12)
    many = cameras_helical(100, 2.0, (-0.4, 0.4))
    z = np.array([c.position[2] for c in many])
    assert z[0] == -0.4 and z[-1] == 0.4 and np.all(np.diff(z) > 0)
    a = np.unwrap([math.atan2(c.position[1], c.position[0]) for c in many])
    assert np.allclose(np.degrees(np.diff(a)), 3.6)
    with pytest.raises(ValueError):
        cameras_helical(1, 2.0)


def test_camera_validation_and_pole():
    with pytest.raises(ValueError):
        Camera(np.diag([2.0, 1, 1, 1]), 0.8)
    with pytest.raises(ValueError):
        Camera(np.eye(4), 0.8, 0, 4)
    c2w = look_at([0, 0, 3.0])  # straight down the world up axis
    cam = Camera(c2w, 0.8)
    assert np.allclose(cam.c2w[:3, :3].T @ cam.c2w[:3, :3], np.eye(3), atol=1e-12)
    assert np.allclose(cam.forward, [0, 0, -1])


def test_pinhole_corners_from_manifest():
    fov = 0.6911
    manifest = {"camera_angle_x": fov, "frames": [{"transform_matrix": np.eye(4).tolist()}]}
    (cam,) = cameras_from_manifest(manifest)
    assert (cam.width, cam.height) == (800, 800)
    _, d = cam.rays()
    d = d.reshape(800, 800, 3)
    focal = 0.5 * 800 / math.tan(0.5 * fov)
    for i, j in [(0, 0), (0, 799), (799, 0), (799, 799)]:
        v = np.array([(j + 0.5 - 400) / focal, -(i + 0.5 - 400) / focal, -1.0])
        assert np.allclose(d[i, j], v / np.linalg.norm(v), atol=1e-12)


def test_splits_disjoint_and_aimed_at_object():
    spec = make_scene_spec(n_train=20, n_val=5, n_test=8, seed=2)
    poses = [c.c2w.tobytes() for split in ("train", "val", "test") for c in spec.cameras[split]]
    assert len(set(poses)) == len(poses)
    for split in spec.cameras:
        for c in spec.cameras[split]:
            p, f = c.position, c.forward
            assert np.linalg.norm(p - (p @ f) * f) < 0.5


def test_presets_build():
    for name in PRESETS:
        mesh, media = preset_object(name)
        if mesh is not None:
            mesh.validate()
            assert mesh.is_closed()
    with pytest.raises(ValueError, match="convex-sphere"):
        preset_object("teapot")


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    spec = make_scene_spec("convex-sphere", n_train=3, n_val=0, n_test=2, resolution=(12, 10))
    root = tmp_path_factory.mktemp("ds")
    write_dataset(spec, root)
    return spec, root


def test_dataset_round_trip(small_dataset):
    spec, root = small_dataset
    ds = read_dataset(root)
    for split in ("train", "val", "test"):
        assert len(ds.spec.cameras[split]) == len(spec.cameras[split])
        for a, b in zip(ds.spec.cameras[split], spec.cameras[split]):
            assert np.max(np.abs(a.c2w - b.c2w)) <= 1e-12
            assert (a.width, a.height) == (12, 10)
    assert ds.images["train"].shape == (3, 10, 12, 3)
    assert ds.depths["test"].dtype == np.float32
    assert ds.masks["train"].any()
    assert ds.spec.background == spec.background
    assert np.array_equal(ds.spec.media.ior_table(), spec.media.ior_table())
    # images survive a second write bit for bit
    root2 = root.parent / "copy"
    write_dataset(ds.spec, root2, renders={s: (ds.images[s], ds.depths[s], ds.masks[s])
                                            for s in ("train", "val", "test")})
    for f in sorted(root.rglob("*.png")):
        assert f.read_bytes() == (root2 / f.relative_to(root)).read_bytes()
    for f in sorted(root.rglob("*.pfm")):
        assert f.read_bytes() == (root2 / f.relative_to(root)).read_bytes()


def test_empty_split_manifest(small_dataset):
    _, root = small_dataset
    manifest = json.loads((root / "transforms_val.json").read_text())
    assert manifest["frames"] == []
    assert "camera_angle_x" in manifest


def test_missing_and_malformed_files(small_dataset, tmp_path):
    _, root = small_dataset
    with pytest.raises(DatasetError):
        read_dataset(tmp_path / "nothing")
    bad = tmp_path / "bad"
    bad.mkdir()
    for f in root.iterdir():
        if f.is_file():
            (bad / f.name).write_bytes(f.read_bytes())
    (bad / "transforms_train.json").write_text("{not json")
    with pytest.raises(DatasetError, match="malformed"):
        read_dataset(bad)
    (bad / "transforms_train.json").unlink()
    with pytest.raises(DatasetError, match="missing"):
        read_dataset(bad)
