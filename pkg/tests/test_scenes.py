import json
import shutil

import numpy as np
import pytest
from scipy import ndimage

from pyramid_nerf.render import Camera
from pyramid_nerf.scenes import (
    MANIFEST,
    MultiscaleDataset,
    Plane,
    ProceduralScene,
    _decode_png,
    _encode_png,
    _trace_seed,
    build_dataset,
    constant_texture,
    look_at,
    make_scene,
    trace_reference,
)


def facing_camera(scene, distance, width, focal):
    eye = np.asarray(scene.view_axis) * distance
    return Camera(width, width, focal, look_at(eye, np.zeros(3), up=(1.0, 0.0, 0.0)), 0.1, distance + 2)


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds") / "a"
    ds = build_dataset(make_scene("slanted_checkerboard"), 3, 2, base_resolution=16, seed=7,
                       out_dir=root, supersample=4)
    return ds


def test_constant_red_plane():
    plane = Plane(np.zeros(3), [1.0, 0, 0], [0, 1.0, 0], 50.0, 50.0, constant_texture((1.0, 0.0, 0.0)))
    scene = ProceduralScene("custom", [plane])
    cam = Camera(12, 10, 8.0, look_at([0, 0, 3.0], [0, 0, 0], up=(0, 1.0, 0)), 0.1, 5.0)
    img = trace_reference(scene, cam, supersample=16)
    assert np.array_equal(img, np.broadcast_to([1.0, 0.0, 0.0], img.shape))


def test_distant_checker_averages_to_grey():
    scene = make_scene("slanted_checkerboard")
    # 4x4 pixels over +-0.6 of the board: each pixel spans three checker periods
    cam = facing_camera(scene, 4.0, 4, 2 * 4.0 / 0.6)
    img = trace_reference(scene, cam, supersample=256, seed=0)
    assert np.all(np.abs(img - 0.5) <= 0.03)


def test_more_rays_do_not_increase_variance():
    scene = make_scene("slanted_checkerboard")
    cam = facing_camera(scene, 4.0, 6, 10.0)
    var = [trace_reference(scene, cam, supersample=k * k, seed=1, return_variance=True)[1].mean()
           for k in (2, 4, 8, 16)]
    assert all(b <= a for a, b in zip(var, var[1:]))


@pytest.mark.parametrize("ss", [0, 2, 10])
def test_supersample_must_be_a_square(ss):
    scene = make_scene("slanted_checkerboard")
    with pytest.raises(ValueError):
        trace_reference(scene, facing_camera(scene, 3.0, 4, 4.0), supersample=ss)


def test_degenerate_camera_rejected():
    scene = make_scene("brick_wall")
    cam = facing_camera(scene, 3.0, 4, 4.0)
    cam.pose = cam.pose * np.array([2.0, 1, 1, 1])
    with pytest.raises(ValueError):
        trace_reference(scene, cam, supersample=1)


def test_tracing_is_deterministic():
    scene = make_scene("colored_spheres")
    cam = facing_camera(scene, 3.0, 8, 8.0)
    assert np.array_equal(trace_reference(scene, cam, 16, seed=3), trace_reference(scene, cam, 16, seed=3))


def test_albedo_stays_in_range():
    for kind in ("slanted_checkerboard", "brick_wall", "colored_spheres"):
        scene = make_scene(kind)
        img = trace_reference(scene, facing_camera(scene, 2.5, 12, 14.0), 4)
        assert img.min() >= 0 and img.max() <= 1


def test_coarse_scale_has_less_high_frequency_energy():
    scene = make_scene("slanted_checkerboard")
    cam = facing_camera(scene, 4.0, 128, 0.5 * 128 / np.tan(np.deg2rad(15)))
    energy = []
    for s in (1.0, 0.125):
        img = trace_reference(scene, cam.scaled(s), supersample=16, seed=0).mean(axis=-1)
        energy.append(np.mean(np.abs(ndimage.laplace(img)[1:-1, 1:-1])))
    assert energy[1] < energy[0]


# datasets --------------------------------------------------------------------

def test_layout_and_invariants(tiny):
    assert tiny.scales == [1.0, 0.5, 0.25, 0.125]
    assert len(tiny.records) == 5 * 4
    for r in tiny.records:
        base = next(b for b in tiny.records if b.camera_id == r.camera_id and b.scale == 1.0)
        assert (r.camera.width, r.camera.height) == (int(16 * r.scale), int(16 * r.scale))
        assert r.camera.focal == base.camera.focal * r.scale
        assert tiny.image(r).shape == (r.camera.height, r.camera.width, 3)


def test_half_scale_is_a_re_render(tiny):
    scene = make_scene("slanted_checkerboard")
    hits = 0
    for cid in range(5):
        full = next(r for r in tiny.records if r.camera_id == cid and r.scale == 1.0)
        half = next(r for r in tiny.records if r.camera_id == cid and r.scale == 0.5)
        ref = trace_reference(scene, full.camera.scaled(0.5), 4, seed=_trace_seed(7, cid, 1))
        assert np.array_equal(tiny.image(half), np.round(ref * 255) / 255)
        f = tiny.image(full)
        pooled = f.reshape(8, 2, 8, 2, 3).mean(axis=(1, 3))
        hits += not np.allclose(pooled, tiny.image(half), atol=1 / 255)
    assert hits > 0


def test_manifest_round_trip(tiny):
    again = MultiscaleDataset.load(tiny.root)
    assert len(again.records) == len(tiny.records)
    for a, b in zip(again.records, tiny.records):
        assert (a.path, a.camera_id, a.split, a.scale) == (b.path, b.camera_id, b.split, b.scale)
        assert np.array_equal(a.camera.pose, b.camera.pose)
        assert (a.camera.focal, a.camera.near, a.camera.far) == (b.camera.focal, b.camera.near, b.camera.far)


def test_fixed_seed_is_byte_identical(tiny, tmp_path):
    other = build_dataset(make_scene("slanted_checkerboard"), 3, 2, base_resolution=16, seed=7,
                          out_dir=tmp_path / "b", supersample=4)
    files = sorted(p.relative_to(tiny.root) for p in tiny.root.rglob("*") if p.is_file())
    assert files == sorted(p.relative_to(other.root) for p in other.root.rglob("*") if p.is_file())
    for f in files:
        assert (tiny.root / f).read_bytes() == (other.root / f).read_bytes()


def test_test_poses_absent_from_train(tiny):
    train = {r.camera.pose.tobytes() for r in tiny.select("train")}
    assert all(r.camera.pose.tobytes() not in train for r in tiny.select("test"))


def copy_dataset(tiny, tmp_path):
    dst = tmp_path / "copy"
    shutil.copytree(tiny.root, dst)
    return dst


def test_loader_rejects_missing_image(tiny, tmp_path):
    dst = copy_dataset(tiny, tmp_path)
    (dst / tiny.records[3].path).unlink()
    with pytest.raises(ValueError, match="missing image"):
        MultiscaleDataset.load(dst)


def test_loader_rejects_test_pose_copied_from_train(tiny, tmp_path):
    dst = copy_dataset(tiny, tmp_path)
    m = json.loads((dst / MANIFEST).read_text())
    src = next(i for i in m["images"] if i["split"] == "train" and i["camera_id"] == 0)
    for img in m["images"]:
        if img["split"] == "test":
            img["pose"] = src["pose"]
    (dst / MANIFEST).write_text(json.dumps(m))
    with pytest.raises(ValueError, match="train pose"):
        MultiscaleDataset.load(dst)


def test_loader_rejects_wrong_focal(tiny, tmp_path):
    dst = copy_dataset(tiny, tmp_path)
    m = json.loads((dst / MANIFEST).read_text())
    m["images"][1]["focal"] *= 1.1
    (dst / MANIFEST).write_text(json.dumps(m))
    with pytest.raises(ValueError, match="focal"):
        MultiscaleDataset.load(dst)


def test_missing_manifest_is_an_io_error(tmp_path):
    with pytest.raises(OSError, match="manifest"):
        MultiscaleDataset.load(tmp_path)


def test_png_round_trip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (5, 7, 3)) / 255
    _encode_png(tmp_path / "x.png", img)
    assert np.array_equal(_decode_png(tmp_path / "x.png"), img)


def test_ray_table_matches_pixels(tiny):
    rays, colors, scales = tiny.ray_table("test")
    n = sum(r.camera.width * r.camera.height for r in tiny.select("test"))
    assert len(rays) == len(colors) == len(scales) == n
    assert set(np.unique(scales)) == {1.0, 0.5, 0.25, 0.125}


def test_camera_distances_span_an_octave_range():
    scene = make_scene("slanted_checkerboard")
    from pyramid_nerf.scenes import sample_cameras
    cams = sample_cameras(scene, 200, 16, np.random.default_rng(0))
    d = np.array([np.linalg.norm(c.center) for c in cams])
    assert d.max() / d.min() > 5
    assert np.all((d > 1.0) & (d < 10.0))
