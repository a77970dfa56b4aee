import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from decoupled_appearance.geometry import Camera, DepthMap, DomainError, back_project, pixel_centers, project


def random_camera(rng, width=64, height=48):
    rot = Rotation.random(random_state=rng.integers(1 << 31)).as_matrix()
    return Camera(
        fx=rng.uniform(40, 120),
        fy=rng.uniform(40, 120),
        cx=rng.uniform(20, 44),
        cy=rng.uniform(15, 33),
        width=width,
        height=height,
        rotation=rot,
        translation=rng.normal(size=3),
    )


def homogeneous_back_project(cam, pixel, depth):
    """Independent route: inverse intrinsics on a homogeneous pixel, then a 4x4 pose."""
    k_inv = np.linalg.inv(cam.intrinsics)
    ray = k_inv @ np.array([pixel[0], pixel[1], 1.0])
    cam_pt = np.append(ray * depth, 1.0)
    pose = np.eye(4)
    pose[:3, :3] = cam.rotation
    pose[:3, 3] = cam.translation
    return (pose @ cam_pt)[:3]


def test_principal_point_is_optical_axis():
    cam = Camera(100, 100, 32, 24, 64, 48)
    np.testing.assert_allclose(back_project(cam, (32, 24), 2.5), [0, 0, 2.5], atol=0)


def test_project_axis_point():
    cam = Camera(100, 100, 32, 24, 64, 48)
    pix, z = project(cam, [0, 0, 3.0])
    np.testing.assert_array_equal(pix, [32, 24])
    assert z == 3.0


def test_back_project_matches_homogeneous_oracle():
    rng = np.random.default_rng(3)
    for _ in range(50):
        cam = random_camera(rng)
        pix = rng.uniform([0, 0], [cam.width, cam.height])
        d = rng.uniform(0.1, 20)
        np.testing.assert_allclose(back_project(cam, pix, d), homogeneous_back_project(cam, pix, d), rtol=1e-12, atol=1e-12)


def test_round_trip_single_pixel():
    rng = np.random.default_rng(0)
    cam = random_camera(rng)
    p = np.array([10.3, 40.7])
    pix, z = project(cam, back_project(cam, p, 4.2))
    assert np.max(np.abs(pix - p)) < 1e-9
    assert abs(z - 4.2) < 1e-12


def test_round_trip_1000_points():
    rng = np.random.default_rng(1)
    cam = random_camera(rng)
    pix = rng.uniform([0, 0], [cam.width, cam.height], size=(1000, 2))
    depth = rng.uniform(0.05, 50, size=1000)
    world = back_project(cam, pix, depth)
    pix2, z = project(cam, world)
    np.testing.assert_allclose(pix2, pix, rtol=1e-9, atol=1e-9)
    np.testing.assert_allclose(z, depth, rtol=1e-9)
    # and in the other direction
    np.testing.assert_allclose(back_project(cam, pix2, z), world, rtol=1e-9, atol=1e-9)


def test_linear_in_depth():
    cam = Camera(80, 90, 30, 20, 64, 48)
    p = (12.5, 33.0)
    np.testing.assert_allclose(back_project(cam, p, 2.0), 2 * back_project(cam, p, 1.0), rtol=1e-15)


@pytest.mark.parametrize("depth", [0.0, -1.0, np.nan])
def test_back_project_rejects_bad_depth(depth):
    with pytest.raises(DomainError):
        back_project(Camera(1, 1, 0, 0, 4, 4), (1, 1), depth)


def test_back_project_rejects_outside_pixel():
    with pytest.raises(DomainError):
        back_project(Camera(1, 1, 0, 0, 4, 4), (5, 1), 1.0)


@pytest.mark.parametrize("z", [0.0, -2.0])
def test_project_rejects_points_behind(z):
    with pytest.raises(DomainError):
        project(Camera(1, 1, 0, 0, 4, 4), [0.1, 0.2, z])


def test_camera_invariants():
    with pytest.raises(ValueError):
        Camera(0, 1, 0, 0, 4, 4)
    with pytest.raises(ValueError):
        Camera(1, 1, 0, 0, 0, 4)
    with pytest.raises(ValueError):
        Camera(1, 1, 0, 0, 4, 4, rotation=np.diag([1.0, 1.0, -1.0]))
    with pytest.raises(ValueError):
        Camera(1, 1, 0, 0, 4, 4, rotation=np.eye(3) * 1.01)


def test_camera_json_round_trip(tmp_path):
    cam = random_camera(np.random.default_rng(5))
    cam.save_json(tmp_path / "cam.json")
    d = json.loads((tmp_path / "cam.json").read_text())
    assert sorted(d) == ["cx", "cy", "fx", "fy", "height", "rotation", "translation", "width"]
    assert len(d["rotation"]) == 9 and len(d["translation"]) == 3
    back = Camera.load_json(tmp_path / "cam.json")
    np.testing.assert_array_equal(back.rotation, cam.rotation)
    np.testing.assert_array_equal(back.translation, cam.translation)
    assert (back.fx, back.fy, back.cx, back.cy, back.width, back.height) == (
        cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height,
    )


def test_rotation_row_major_in_json():
    rot = Rotation.from_euler("z", 30, degrees=True).as_matrix()
    cam = Camera(1, 1, 0, 0, 2, 2, rotation=rot)
    assert cam.to_dict()["rotation"][1] == pytest.approx(rot[0, 1])


def test_look_at_points_forward_axis():
    cam = Camera.look_at([0, 0, 5], [0, 0, 0], [0, 1, 0], 50, 50, 32, 32)
    pix, z = project(cam, [0, 0, 0])
    np.testing.assert_allclose(pix, [16, 16], atol=1e-12)
    assert z == pytest.approx(5.0)
    # world up appears towards smaller row indices
    (_, v_up), _ = project(cam, [0, 1, 0])
    assert v_up < 16


def test_pixel_centers_convention():
    pc = pixel_centers(3, 2)
    assert pc.shape == (2, 3, 2)
    np.testing.assert_array_equal(pc[0, 0], [0.5, 0.5])
    np.testing.assert_array_equal(pc[1, 2], [2.5, 1.5])


def test_depth_map_sentinel():
    dm = DepthMap.from_array(np.array([[1.0, 0.0], [np.inf, 2.0]]))
    np.testing.assert_array_equal(dm.valid, [[True, False], [False, True]])
    np.testing.assert_array_equal(dm.values, [[1.0, 0.0], [0.0, 2.0]])


@settings(max_examples=60, deadline=None)
@given(
    u=st.floats(0, 64), v=st.floats(0, 48), d=st.floats(1e-3, 1e3),
    seed=st.integers(0, 2**31 - 1),
)
def test_round_trip_property(u, v, d, seed):
    cam = random_camera(np.random.default_rng(seed))
    pix, z = project(cam, back_project(cam, (u, v), d))
    assert np.allclose(pix, (u, v), rtol=1e-9, atol=1e-9 * max(1.0, d))
    assert z == pytest.approx(d, rel=1e-9)
