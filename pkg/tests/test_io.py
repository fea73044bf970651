import json
import math
import zipfile

import numpy as np
import pytest

from vdgs._validation import ValidationError
from vdgs.geometry import GaussianCloud
from vdgs.io import (
    CheckpointError, DatasetError, PlyError, camera_from_transform, camera_to_transform, cloud_from_ply_bytes,
    config_text, gaussian_ply_properties, load_checkpoint, load_config, load_ply, load_poses, load_points_ply,
    load_transforms, parse_config_text, ply_bytes, read_image, save_checkpoint, save_ply, save_points_ply,
    write_image,
)
from vdgs.synthetic import make_dataset, make_scene, write_dataset
from vdgs.trainer import TrainConfig, train

from conftest import random_cloud


def write_transforms(path, frames, **top):
    doc = dict(top)
    doc["frames"] = frames
    path.write_text(json.dumps(doc))
    return path


def test_focal_from_field_of_view(tmp_path):
    write_image(tmp_path / "a.png", np.zeros((600, 800, 3)))
    p = write_transforms(tmp_path / "transforms_train.json",
                         [{"file_path": "a", "transform_matrix": np.eye(4).tolist()}], camera_angle_x=0.6911112)
    cam = load_transforms(p).cameras("train")[0]
    assert cam.fx == pytest.approx(400 / math.tan(0.3455556))
    assert cam.fx == pytest.approx(1111.111, abs=1e-3)
    assert cam.fy == cam.fx and (cam.cx, cam.cy) == (400, 300)


def test_identity_transform_looks_down_minus_z():
    cam = camera_from_transform(np.eye(4), 10, 10, 10.0)
    np.testing.assert_allclose(cam.center, 0, atol=1e-12)
    np.testing.assert_allclose(cam.forward, [0, 0, -1])
    np.testing.assert_allclose(camera_to_transform(cam), np.eye(4), atol=1e-12)


def test_transform_round_trip(rng):
    from vdgs.synthetic import orbit_cameras

    for cam in orbit_cameras(5):
        back = camera_from_transform(camera_to_transform(cam), cam.width, cam.height, cam.fx)
        np.testing.assert_allclose(back.world_to_camera, cam.world_to_camera, atol=1e-12)


def test_zero_frames_is_error(tmp_path):
    p = write_transforms(tmp_path / "transforms_train.json", [], camera_angle_x=0.5)
    with pytest.raises(DatasetError, match="frames"):
        load_transforms(p)
    assert load_poses(p) == []


@pytest.mark.parametrize("frame,top,msg", [
    ({"file_path": "a"}, {"camera_angle_x": 0.5}, "transform_matrix"),
    ({"file_path": "a", "transform_matrix": np.eye(4).tolist()}, {}, "camera_angle_x"),
    ({"file_path": "a", "transform_matrix": [[1, 2], [3, 4]]}, {"camera_angle_x": 0.5}, "4x4"),
    ({"file_path": "a", "transform_matrix": np.zeros((4, 4)).tolist()}, {"camera_angle_x": 0.5}, "invertible"),
    ({"file_path": "missing", "transform_matrix": np.eye(4).tolist()}, {"camera_angle_x": 0.5}, "does not exist"),
])
def test_malformed_frames(tmp_path, frame, top, msg):
    write_image(tmp_path / "a.png", np.zeros((4, 4, 3)))
    p = write_transforms(tmp_path / "transforms_train.json", [frame], **top)
    with pytest.raises(DatasetError, match=msg):
        load_transforms(p)


def test_not_json(tmp_path):
    (tmp_path / "transforms_train.json").write_text("{nope")
    with pytest.raises(DatasetError, match="JSON"):
        load_transforms(tmp_path)


def test_dataset_directory_round_trip(tmp_path):
    ds = make_dataset(make_scene(n=15), n_train=3, n_test=2, size=16, quantize=True)
    write_dataset(tmp_path, ds)
    back = load_transforms(tmp_path)
    assert back.splits == ["test", "train"]
    for split in ("train", "test"):
        for a, b in zip(ds.images(split), back.images(split)):
            np.testing.assert_array_equal(a, b)
        for a, b in zip(ds.cameras(split), back.cameras(split)):
            np.testing.assert_allclose(a.world_to_camera, b.world_to_camera, atol=1e-6)
    np.testing.assert_allclose(back.points[0], ds.points[0], atol=1e-6)
    np.testing.assert_allclose(back.background, ds.background)


def test_image_size_mismatch(tmp_path):
    write_image(tmp_path / "a.png", np.zeros((4, 6, 3)))
    p = write_transforms(tmp_path / "transforms_train.json",
                         [{"file_path": "a.png", "transform_matrix": np.eye(4).tolist(), "w": 4, "h": 4}],
                         camera_angle_x=0.5)
    with pytest.raises(DatasetError, match="image is 6x4"):
        load_transforms(p).images("train")


def test_ppm_round_trip_exact(tmp_path, rng):
    img = rng.integers(0, 256, size=(7, 5, 3)).astype(np.uint8)
    write_image(tmp_path / "x.ppm", img)
    np.testing.assert_array_equal(np.round(read_image(tmp_path / "x.ppm") * 255).astype(np.uint8), img)
    write_image(tmp_path / "x.png", img)
    np.testing.assert_array_equal(read_image(tmp_path / "x.png") * 255, img.astype(float))


def test_white_pixel_png(tmp_path):
    write_image(tmp_path / "w.png", np.ones((1, 1, 3)))
    np.testing.assert_array_equal(read_image(tmp_path / "w.png"), np.ones((1, 1, 3)))


def test_alpha_over_background(tmp_path):
    from PIL import Image

    Image.fromarray(np.array([[[255, 0, 0, 0], [255, 0, 0, 255]]], np.uint8), "RGBA").save(tmp_path / "a.png")
    img = read_image(tmp_path / "a.png", background=(0, 0, 1))
    np.testing.assert_allclose(img[0], [[0, 0, 1], [1, 0, 0]])


def test_unsupported_format(tmp_path):
    with pytest.raises(ValidationError):
        write_image(tmp_path / "x.jpg", np.zeros((2, 2, 3)))
    from PIL import Image

    Image.fromarray(np.zeros((2, 2, 3), np.uint8)).save(tmp_path / "x.bmp")
    with pytest.raises(ValidationError, match="unsupported"):
        read_image(tmp_path / "x.bmp")


@pytest.mark.parametrize("degree", [0, 1, 2, 3])
def test_ply_round_trip_bit_exact(tmp_path, degree):
    cloud = random_cloud(50, seed=degree, degree=degree, dtype=np.float32)
    save_ply(cloud, tmp_path / "c.ply")
    back = load_ply(tmp_path / "c.ply")
    assert back.sh_degree == degree
    for name in GaussianCloud.PARAM_NAMES:
        assert getattr(back, name).tobytes() == getattr(cloud, name).tobytes()


def test_ply_layout():
    assert "f_rest_0" not in gaussian_ply_properties(0)
    names = gaussian_ply_properties(3)
    assert names[:9] == ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
    assert names[9:54] == [f"f_rest_{i}" for i in range(45)]
    assert names[54:] == ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    cloud = random_cloud(2, degree=1, dtype=np.float32)
    data = ply_bytes(cloud)
    body = np.frombuffer(data[data.index(b"end_header\n") + 11:], "<f4").reshape(2, -1)
    # f_rest is channel-major: all red coefficients first
    np.testing.assert_array_equal(body[:, 9:12], cloud.sh[:, 0, 1:])
    np.testing.assert_array_equal(body[:, 3:6], 0)


def test_all_zero_vertex_has_half_opacity():
    names = gaussian_ply_properties(0)
    header = "ply\nformat binary_little_endian 1.0\nelement vertex 1\n"
    header += "".join(f"property float {n}\n" for n in names) + "end_header\n"
    cloud = cloud_from_ply_bytes(header.encode() + np.zeros(len(names), "<f4").tobytes())
    assert cloud.opacities[0] == pytest.approx(0.5)


def test_ply_wrong_layout_lists_properties():
    header = "ply\nformat binary_little_endian 1.0\nelement vertex 1\nproperty float x\nproperty float q\nend_header\n"
    with pytest.raises(PlyError, match="(?s)found: +x q.*expected: x y z"):
        cloud_from_ply_bytes(header.encode() + np.zeros(2, "<f4").tobytes())


def test_ply_truncated():
    data = ply_bytes(random_cloud(10, dtype=np.float32))
    with pytest.raises(PlyError, match="truncated"):
        cloud_from_ply_bytes(data[:-3])


def test_point_cloud_round_trip(tmp_path, rng):
    pts = rng.normal(size=(20, 3))
    save_points_ply(tmp_path / "p.ply", pts, rng.uniform(size=(20, 3)))
    p, c = load_points_ply(tmp_path / "p.ply")
    np.testing.assert_allclose(p, pts.astype(np.float32))
    assert c.shape == (20, 3) and c.max() <= 1
    ascii_ply = "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\n"
    (tmp_path / "a.ply").write_text(ascii_ply + "end_header\n1 2 3\n4 5 6\n")
    np.testing.assert_array_equal(load_points_ply(tmp_path / "a.ply")[0], [[1, 2, 3], [4, 5, 6]])


def test_config_parsing(tmp_path):
    d = parse_config_text("iterations = 12  # short\n\nvariant = O*\ndeterministic = yes\nlr_sh=0.01\n")
    assert d == {"iterations": 12, "variant": "O*", "deterministic": True, "lr_sh": 0.01}
    with pytest.raises(ValidationError, match="unknown"):
        parse_config_text("bogus = 1")
    with pytest.raises(ValidationError, match=":1"):
        parse_config_text("iterations = many")
    cfg = TrainConfig(iterations=7, seed=3)
    (tmp_path / "c.txt").write_text(config_text(cfg))
    assert load_config(tmp_path / "c.txt") == cfg
    assert load_config(tmp_path / "c.txt", seed=9).seed == 9


@pytest.fixture(scope="module")
def trained():
    ds = make_dataset(make_scene(n=15, seed=1), n_train=3, n_test=1, size=16)
    cfg = TrainConfig(iterations=12, eval_interval=6, densify_from=4, densify_interval=4)
    state, _ = train(cfg, ds)
    return cfg, ds, state


def test_checkpoint_round_trip(tmp_path, trained):
    cfg, ds, state = trained
    save_checkpoint(tmp_path / "a.vdgs", state, cfg, ds)
    ck = load_checkpoint(tmp_path / "a.vdgs")
    assert ck.config == cfg and ck.state.iteration == state.iteration
    for name in GaussianCloud.PARAM_NAMES:
        assert getattr(ck.state.cloud, name).tobytes() == getattr(state.cloud, name).tobytes()
    assert ck.state.grid.tables.tobytes() == state.grid.tables.tobytes()
    assert all(ck.state.mlp.params[k].tobytes() == v.tobytes() for k, v in state.mlp.params.items())
    assert ck.state.rng.bit_generator.state == state.rng.bit_generator.state
    assert len(ck.split_cameras("train")) == 3 and len(ck.split_cameras("test")) == 1
    save_checkpoint(tmp_path / "b.vdgs", ck.state, ck.config, ds)
    assert (tmp_path / "a.vdgs").read_bytes() == (tmp_path / "b.vdgs").read_bytes()


def test_checkpoint_truncated_and_version(tmp_path, trained):
    cfg, ds, state = trained
    save_checkpoint(tmp_path / "a.vdgs", state, cfg, ds)
    data = (tmp_path / "a.vdgs").read_bytes()
    (tmp_path / "t.vdgs").write_bytes(data[: len(data) // 2])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "t.vdgs")
    with zipfile.ZipFile(tmp_path / "a.vdgs") as src, zipfile.ZipFile(tmp_path / "v.vdgs", "w") as dst:
        for name in src.namelist():
            blob = src.read(name)
            if name == "meta.json":
                meta = json.loads(blob)
                meta["version"] = 99
                blob = json.dumps(meta).encode()
            dst.writestr(name, blob)
    with pytest.raises(CheckpointError, match="version 99"):
        load_checkpoint(tmp_path / "v.vdgs")
    with pytest.raises(CheckpointError, match="not found"):
        load_checkpoint(tmp_path / "nothing.vdgs")
