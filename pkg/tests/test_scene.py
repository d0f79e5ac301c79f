import numpy as np
import pytest

from sdfpose.lie import Sim3, exp_so3, random_rotation
from sdfpose.quadric import CameraFrame
from sdfpose.scene import (
    Intrinsics,
    NoiseModel,
    PointSet,
    SceneObject,
    SceneSpec,
    load_views,
    make_scene,
    observe_object,
    read_observations,
    read_pfm,
    read_pgm,
    render_views,
    sample_observation,
    save_views,
    write_observations,
    write_pfm,
    write_pgm,
)
from sdfpose.shapes import SuperShape
from sdfpose.trainer import ShapeFamily

SMALL = Intrinsics(width=41, height=31, focal=40.0)


def sphere_object(oid, radius, center):
    to_world = Sim3.from_parts(radius, np.eye(3), np.asarray(center, float))
    return SceneObject(oid, "sphere", to_world.inverse(), SuperShape((1.0, 1.0, 1.0)))


def single_pixel(p):
    return np.array([[p]], dtype=float)


# ------------------------------------------------------------------ rendering


def test_sphere_center_depth():
    cam = CameraFrame.look_at((0, 0, -3), (0, 0, 0))
    spec = SceneSpec([sphere_object(0, 1.0, (0, 0, 0))], [cam], SMALL)
    (view,) = render_views(spec)
    assert view.depth[15, 20] == pytest.approx(2.0, abs=1e-3)
    assert view.masks[0][15, 20]
    assert not view.masks[0][0, 0] and view.depth[0, 0] == 0.0


def test_full_occlusion_gives_empty_mask():
    cam = CameraFrame.look_at((0, 0, -6), (0, 0, 0))
    spec = SceneSpec([sphere_object(0, 1.5, (0, 0, -3)), sphere_object(1, 0.3, (0, 0, 0))], [cam], SMALL)
    (view,) = render_views(spec)
    assert view.masks[0].any()
    assert not view.masks[1].any()


def test_camera_inside_object_is_skipped():
    cam = CameraFrame.look_at((0, 0, 0.1), (0, 0, 5))
    spec = SceneSpec([sphere_object(0, 1.0, (0, 0, 0))], [cam], SMALL)
    (view,) = render_views(spec)
    assert view.skipped and not view.masks[0].any()


def test_surface_points_lie_on_ground_truth():
    shapes = [ShapeFamily().sample(np.random.default_rng(s)) for s in range(2)]
    spec = make_scene(shapes, n_views=4, seed=1)
    views = render_views(spec)
    for obj in spec.objects:
        pts = observe_object(views, obj.object_id, intrinsics=spec.intrinsics)
        surf = pts.x[pts.d == 0]
        assert len(surf) > 100
        assert np.max(np.abs(obj.sdf_world(surf))) < 2e-3


def test_rendering_is_deterministic_and_noise_is_applied():
    shapes = [SuperShape((0.5, 0.4, 0.3))]
    clean = render_views(make_scene(shapes, n_views=2, seed=3))
    a = render_views(make_scene(shapes, n_views=2, seed=3, noise=NoiseModel(depth_sigma=0.01)))
    b = render_views(make_scene(shapes, n_views=2, seed=3, noise=NoiseModel(depth_sigma=0.01)))
    for va, vb, vc in zip(a, b, clean):
        np.testing.assert_array_equal(va.depth, vb.depth)
        hit = vc.depth > 0
        np.testing.assert_array_equal(va.depth > 0, hit)
        assert np.std(va.depth[hit] - vc.depth[hit]) == pytest.approx(0.01, rel=0.1)


def test_mask_morphology():
    shapes = [SuperShape((0.5, 0.4, 0.3))]
    clean = render_views(make_scene(shapes, n_views=1, seed=4))[0].masks[0]
    grown = render_views(make_scene(shapes, n_views=1, seed=4, noise=NoiseModel(mask_radius=2)))[0].masks[0]
    shrunk = render_views(make_scene(shapes, n_views=1, seed=4, noise=NoiseModel(mask_radius=-2)))[0].masks[0]
    assert np.all(grown >= clean) and grown.sum() > clean.sum()
    assert np.all(shrunk <= clean) and shrunk.sum() < clean.sum()


def test_floor_hides_what_lies_below():
    cam = CameraFrame.look_at((0, -4, 2), (0, 0, 0))
    objs = [sphere_object(0, 0.5, (0, 0, 0))]
    (free,) = render_views(SceneSpec(objs, [cam], SMALL))
    (floored,) = render_views(SceneSpec(objs, [cam], SMALL, floor_height=0.0))
    assert floored.masks[0].sum() < free.masks[0].sum()
    # floor pixels carry depth but belong to no object
    floor_pixels = (floored.depth > 0) & ~floored.masks[0]
    assert floor_pixels.sum() > 0
    # every remaining object pixel sees the upper half
    pts = sample_observation(floored.depth, floored.masks[0], cam, intrinsics=SMALL)
    assert np.all(pts.x[pts.d == 0][:, 2] > -1e-3)


def test_scene_spec_validation():
    with pytest.raises(ValueError):
        SceneSpec([sphere_object(0, 1.0, (0, 0, 0))], [], SMALL)


# --------------------------------------------------------------- observations


def test_on_axis_points_and_labels():
    pts = sample_observation(np.array([[2.0]]), np.array([[True]]), CameraFrame(Sim3.identity()), 0.05, normalized_coords=single_pixel((0.0, 0.0)))
    np.testing.assert_allclose(pts.x, [[0, 0, 2.0], [0, 0, 1.95], [0, 0, 2.05]], atol=1e-15)
    # camera-side point is outside the surface: +eps
    np.testing.assert_array_equal(pts.d, [0.0, 0.05, -0.05])
    np.testing.assert_array_equal(pts.pixel, [[0, 0]] * 3)


def test_off_axis_offset_has_length_epsilon():
    pts = sample_observation(np.array([[2.0]]), np.array([[True]]), CameraFrame(Sim3.identity()), 0.05, normalized_coords=single_pixel((0.1, 0.0)))
    assert np.linalg.norm(pts.x[1] - pts.x[0]) == pytest.approx(0.05, abs=1e-15)
    assert np.linalg.norm(pts.x[2] - pts.x[0]) == pytest.approx(0.05, abs=1e-15)
    # all three points stay on the viewing ray
    assert np.linalg.norm(np.cross(pts.x[1], pts.x[2])) < 1e-15


def test_observation_equivariance(rng):
    depth = rng.uniform(1, 3, size=(31, 41))
    mask = rng.uniform(size=(31, 41)) < 0.3
    base = sample_observation(depth, mask, CameraFrame(Sim3.identity()), intrinsics=SMALL)
    for _ in range(5):
        C = Sim3.from_parts(1.0, random_rotation(rng), rng.normal(size=3))
        moved = sample_observation(depth, mask, CameraFrame(C), intrinsics=SMALL)
        np.testing.assert_allclose(moved.x, C.apply(base.x), atol=1e-12)
        np.testing.assert_array_equal(moved.d, base.d)


def test_points_come_from_mask_pixels_and_bad_depth_is_skipped(rng):
    depth = rng.uniform(1, 3, size=(31, 41))
    depth[5, :] = 0.0
    depth[6, :] = -1.0
    mask = np.zeros((31, 41), bool)
    mask[3:10, 10:20] = True
    pts = sample_observation(depth, mask, CameraFrame(Sim3.identity()), intrinsics=SMALL)
    assert np.all(mask[pts.pixel[:, 0], pts.pixel[:, 1]])
    assert pts.skipped == 20
    assert len(pts) == 3 * (70 - 20)


def test_decimation_limit(rng):
    mask = np.ones((100, 100), bool)
    pts = sample_observation(np.ones((100, 100)), mask, CameraFrame(Sim3.identity()), normalized_coords=np.zeros((100, 100, 2)) + 0.01)
    assert len(pts) // 3 <= 3000


def test_nonpositive_epsilon_rejected():
    with pytest.raises(ValueError):
        sample_observation(np.ones((1, 1)), np.ones((1, 1), bool), CameraFrame(Sim3.identity()), 0.0, normalized_coords=single_pixel((0, 0)))


# --------------------------------------------------------------- file formats


def test_pfm_round_trip_and_header(tmp_path, rng):
    img = rng.uniform(0, 5, size=(7, 9)).astype(np.float32)
    write_pfm(tmp_path / "d.pfm", img)
    data = (tmp_path / "d.pfm").read_bytes()
    assert data.startswith(b"Pf\n9 7\n-1.0\n")
    assert len(data) == len(b"Pf\n9 7\n-1.0\n") + 4 * 63
    np.testing.assert_array_equal(read_pfm(tmp_path / "d.pfm"), img)


def test_pgm_round_trip_and_header(tmp_path, rng):
    mask = rng.uniform(size=(5, 6)) < 0.5
    write_pgm(tmp_path / "m.pgm", mask)
    data = (tmp_path / "m.pgm").read_bytes()
    assert data.startswith(b"P5\n6 5\n255\n")
    assert set(data[len(b"P5\n6 5\n255\n") :]) <= {0, 255}
    np.testing.assert_array_equal(read_pgm(tmp_path / "m.pgm"), mask)


def test_observation_ndjson_round_trip(tmp_path):
    pts = sample_observation(np.array([[2.0, 1.5]]), np.array([[True, True]]), CameraFrame(Sim3.identity(), 4), normalized_coords=np.array([[[0.0, 0.0], [0.1, -0.2]]]))
    write_observations(tmp_path / "o.ndjson", pts)
    lines = (tmp_path / "o.ndjson").read_text().splitlines()
    assert len(lines) == 6 and set(__import__("json").loads(lines[0])) == {"x", "d", "k", "p"}
    back = read_observations(tmp_path / "o.ndjson")
    np.testing.assert_array_equal(back.x, pts.x)
    np.testing.assert_array_equal(back.d, pts.d)
    np.testing.assert_array_equal(back.view, pts.view)
    np.testing.assert_array_equal(back.pixel, pts.pixel)
    write_observations(tmp_path / "e.ndjson", PointSet.empty())
    assert len(read_observations(tmp_path / "e.ndjson")) == 0


def test_scene_json_round_trip(tmp_path):
    spec = make_scene([SuperShape((0.5, 0.4, 0.3), (0.5, 0.8), (0.2, 0.1))], n_views=3, seed=2, noise=NoiseModel(0.01, -1), floor_height=0.0)
    spec.save(tmp_path / "s.json")
    back = SceneSpec.load(tmp_path / "s.json")
    assert back.to_dict() == spec.to_dict()
    back.save(tmp_path / "t.json")
    assert (tmp_path / "s.json").read_bytes() == (tmp_path / "t.json").read_bytes()


def test_views_directory_round_trip(tmp_path):
    spec = make_scene([SuperShape((0.5, 0.4, 0.3))], n_views=2, seed=2, intrinsics=SMALL)
    views = render_views(spec)
    save_views(tmp_path, views, spec.intrinsics)
    K, back = load_views(tmp_path)
    assert K == spec.intrinsics
    for a, b in zip(views, back):
        assert a.view_id == b.view_id and a.skipped == b.skipped
        np.testing.assert_allclose(b.camera.pose.matrix, a.camera.pose.matrix, atol=1e-12)
        np.testing.assert_array_equal(b.depth, a.depth.astype(np.float32))
        np.testing.assert_array_equal(b.masks[0], a.masks[0])
