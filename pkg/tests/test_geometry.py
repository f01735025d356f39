import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from d2s.exceptions import NonPositiveDepth
from d2s.geometry import (CameraPose, Intrinsics, pose_error, project, random_rotation,
                          rotation_about, so3_exp, transform_to_camera, unproject)

K100 = Intrinsics(100, 100, 50, 50)
seeds = st.integers(0, 2**32 - 1)


def random_pose(rng, spread=2.0):
    return CameraPose(random_rotation(rng), rng.uniform(-spread, spread, 3))


def test_project_on_axis():
    assert np.allclose(project(CameraPose.identity(), K100, [0, 0, 2]), [50, 50])


def test_project_off_axis():
    # fx * 1/2 + cx
    assert np.allclose(project(CameraPose.identity(), K100, [1, 0, 2]), [100, 50])


def test_project_behind_camera_raises():
    with pytest.raises(NonPositiveDepth):
        project(CameraPose.identity(), K100, [0, 0, -1])


def test_project_on_camera_plane_raises():
    with pytest.raises(NonPositiveDepth):
        project(CameraPose.identity(), K100, [1, 1, 0])


def test_transform_identity():
    assert np.allclose(transform_to_camera(CameraPose.identity(), [1, 2, 3]), [1, 2, 3])


def test_transform_quarter_turn_about_z():
    pose = CameraPose(rotation_about([0, 0, 1], 90), np.zeros(3))
    assert np.allclose(transform_to_camera(pose, [1, 0, 0]), [0, 1, 0], atol=1e-15)


@given(seeds)
def test_transform_matches_homogeneous_oracle(seed):
    rng = np.random.default_rng(seed)
    pose = random_pose(rng)
    y = rng.normal(size=3)
    expected = (pose.matrix() @ np.append(y, 1.0))[:3]
    assert np.allclose(transform_to_camera(pose, y), expected, atol=1e-12)


def test_intrinsics_rejects_nonpositive_focal():
    with pytest.raises(ValueError):
        Intrinsics(0, 100, 0, 0)
    with pytest.raises(ValueError):
        Intrinsics(100, -1, 0, 0)


def test_pose_error_identity():
    e = pose_error(CameraPose.identity(), CameraPose.identity())
    assert (e.translation_error, e.rotation_error) == (0.0, 0.0)


def test_pose_error_pure_translation():
    R = rotation_about([1, 2, 3], 40)
    a = CameraPose(R, np.zeros(3))
    # shift the camera centre by 0.05 along x
    b = CameraPose(R, -R @ np.array([0.05, 0, 0]))
    e = pose_error(a, b)
    assert e.translation_error == pytest.approx(0.05, abs=1e-15)
    assert e.rotation_error == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("axis", [[1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1, 1], [0.3, -2, 0.7]])
def test_pose_error_half_turn(axis):
    a = CameraPose.identity()
    b = CameraPose(rotation_about(axis, 180), np.zeros(3))
    assert pose_error(a, b).rotation_error == pytest.approx(180.0, abs=1e-9)


@given(seeds)
def test_rotation_error_symmetric_and_bounded(seed):
    rng = np.random.default_rng(seed)
    a, b = random_pose(rng), random_pose(rng)
    ab, ba = pose_error(a, b), pose_error(b, a)
    assert ab.rotation_error == pytest.approx(ba.rotation_error, abs=1e-9)
    assert 0 <= ab.rotation_error <= 180
    assert ab.translation_error >= 0


@given(seeds, st.floats(1e-7, 1e-3))
def test_pose_error_first_order_in_perturbation(seed, magnitude):
    rng = np.random.default_rng(seed)
    pose = random_pose(rng)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    perturbed = CameraPose(so3_exp(axis * magnitude) @ pose.rotation, pose.translation)
    assert pose_error(pose, perturbed).rotation_error == pytest.approx(np.degrees(magnitude), rel=1e-6)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    moved = CameraPose(pose.rotation, pose.translation + magnitude * direction)
    assert pose_error(pose, moved).translation_error == pytest.approx(magnitude, rel=1e-6)


@given(seeds)
def test_unproject_project_round_trip(seed):
    rng = np.random.default_rng(seed)
    pose = random_pose(rng)
    k = Intrinsics(*rng.uniform(200, 800, 2), *rng.uniform(100, 400, 2))
    pixel = rng.uniform(0, 640, 2)
    depth = rng.uniform(0.5, 20)
    world = unproject(pose, k, pixel, depth)
    assert np.allclose(project(pose, k, world), pixel, atol=1e-9, rtol=0)


@settings(max_examples=50)
@given(seeds)
def test_pose_serialization_and_inverse(seed):
    rng = np.random.default_rng(seed)
    pose = random_pose(rng)
    assert pose.is_valid()
    again = CameraPose.from_array(pose.to_array())
    assert np.array_equal(again.rotation, pose.rotation)
    assert np.array_equal(again.translation, pose.translation)
    ident = pose.compose(pose.inverse())
    assert np.allclose(ident.matrix(), np.eye(4), atol=1e-12)
    assert np.allclose(pose.center, pose.inverse().translation)


def test_look_at_faces_target():
    pose = CameraPose.look_at([5, 0, 1], [0, 0, 1])
    assert pose.is_valid()
    cam = transform_to_camera(pose, [0, 0, 1])
    assert np.allclose(cam[:2], 0, atol=1e-12)
    assert cam[2] == pytest.approx(5.0)
