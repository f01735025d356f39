import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from d2s.exceptions import DegenerateSample, NoConsensus, TooFewCorrespondences
from d2s.frames import SceneCoordinateSet
from d2s.geometry import CameraPose, Intrinsics, pose_error, project_many, random_rotation, so3_exp
from d2s.pose_solver import (Correspondence, RansacConfig, _adaptive_bound, filter_reliable, p3p,
                             ransac_pnp, refine_lm, reprojection_cost)

K = Intrinsics(500, 500, 320, 240)


def scene_pose(rng, n=100, extent=2.0):
    """Points in a box in front of a random camera, plus their exact projections."""
    R = random_rotation(rng)
    cam = np.column_stack([rng.uniform(-extent, extent, (n, 2)), rng.uniform(4, 8, n)])
    t = rng.uniform(-1, 1, 3)
    world = (cam - t) @ R  # R^T (cam - t)
    pose = CameraPose(R, t)
    px, ok = project_many(pose, K, world)
    assert ok.all()
    return pose, world, px


def corr(px, world):
    return [Correspondence(p, w, 1.0) for p, w in zip(px, world)]


def test_filter_reliable_boundary():
    coords = SceneCoordinateSet(np.arange(9.0).reshape(3, 3), np.zeros(3), np.array([0.9, 0.5, 0.49]))
    kept = filter_reliable(coords, np.zeros((3, 2)), 0.5)
    assert [c.reliability for c in kept] == [0.9, 0.5]
    assert np.array_equal(kept[1].world, [3, 4, 5])


def test_filter_reliable_all_one():
    coords = SceneCoordinateSet(np.zeros((5, 3)), np.zeros(5), np.ones(5))
    assert len(filter_reliable(coords, np.zeros((5, 2)), 1.0)) == 5


@settings(max_examples=60)
@given(st.integers(0, 2**31 - 1))
def test_p3p_recovers_pose(seed):
    rng = np.random.default_rng(seed)
    pose, world, px = scene_pose(rng, 3)
    try:
        candidates = p3p(px, world, K)
    except DegenerateSample:
        return
    errors = [pose_error(c, pose) for c in candidates]
    best = min(errors, key=lambda e: e.max_error)
    assert best.translation_error < 1e-6 and best.rotation_error < 1e-6
    for c in candidates:
        # every candidate reproduces the three observations and the three pairwise distances
        proj, ok = project_many(c, K, world)
        assert ok.all()
        assert np.max(np.abs(proj - px)) < 1e-6
        cam = world @ c.rotation.T + c.translation
        for i, j in ((0, 1), (0, 2), (1, 2)):
            assert np.linalg.norm(cam[i] - cam[j]) == pytest.approx(np.linalg.norm(world[i] - world[j]),
                                                                    abs=1e-9)


def test_p3p_collinear_is_degenerate():
    world = np.array([[0, 0, 5.0], [1, 0, 5.0], [2, 0, 5.0]])
    px, _ = project_many(CameraPose.identity(), K, world)
    with pytest.raises(DegenerateSample):
        p3p(px, world, K)


def test_p3p_duplicate_pixels_is_degenerate():
    world = np.array([[0, 0, 5.0], [1, 0, 5.0], [0, 1, 6.0]])
    px = np.array([[100.0, 100.0], [100.0, 100.0], [200.0, 50.0]])
    with pytest.raises(DegenerateSample):
        p3p(px, world, K)


def test_ransac_noiseless_exact():
    rng = np.random.default_rng(0)
    pose, world, px = scene_pose(rng)
    est = ransac_pnp(corr(px, world), K, RansacConfig(seed=1))
    err = pose_error(est.pose, pose)
    assert err.translation_error < 1e-6 and err.rotation_error < 1e-6
    assert est.inlier_count == 100 == int(est.inlier_mask.sum())


def test_ransac_accepts_array_tuple():
    rng = np.random.default_rng(1)
    pose, world, px = scene_pose(rng, 20)
    est = ransac_pnp((px, world), K)
    assert pose_error(est.pose, pose).max_error < 1e-6


def test_ransac_with_outliers():
    rng = np.random.default_rng(2)
    pose, world, px = scene_pose(rng, 100)
    diameter = np.max(np.linalg.norm(world[:, None] - world[None], axis=-1))
    noisy = px + rng.normal(0, 1.0, px.shape)
    outliers = rng.permutation(100)[:50]
    noisy[outliers] = rng.uniform([0, 0], [640, 480], (50, 2))
    est = ransac_pnp(corr(noisy, world), K, RansacConfig(seed=3))
    assert pose_error(est.pose, pose).translation_error < 0.01 * diameter
    true_inliers = np.setdiff1d(np.arange(100), outliers)
    assert est.inlier_mask[true_inliers].mean() >= 0.95


def test_ransac_too_few():
    rng = np.random.default_rng(3)
    _, world, px = scene_pose(rng, 3)
    with pytest.raises(TooFewCorrespondences):
        ransac_pnp(corr(px, world), K)


def test_ransac_no_consensus():
    rng = np.random.default_rng(4)
    world = rng.uniform(-1, 1, (30, 3)) + [0, 0, 5]
    px = rng.uniform([0, 0], [640, 480], (30, 2))
    with pytest.raises(NoConsensus):
        ransac_pnp(corr(px, world), K, RansacConfig(inlier_threshold_px=0.01, max_iterations=200))


def test_ransac_deterministic():
    rng = np.random.default_rng(5)
    pose, world, px = scene_pose(rng, 60)
    noisy = px + rng.normal(0, 1.0, px.shape)
    noisy[:20] = rng.uniform([0, 0], [640, 480], (20, 2))
    a = ransac_pnp(corr(noisy, world), K, RansacConfig(seed=9))
    b = ransac_pnp(corr(noisy, world), K, RansacConfig(seed=9))
    assert np.array_equal(a.pose.to_array(), b.pose.to_array())
    assert np.array_equal(a.inlier_mask, b.inlier_mask)
    assert a.iterations_used == b.iterations_used


def test_ransac_refinement_does_not_increase_cost():
    rng = np.random.default_rng(6)
    pose, world, px = scene_pose(rng, 80)
    noisy = px + rng.normal(0, 2.0, px.shape)
    raw = ransac_pnp(corr(noisy, world), K, RansacConfig(seed=0), refine=False)
    refined = ransac_pnp(corr(noisy, world), K, RansacConfig(seed=0))
    m = raw.inlier_mask
    assert reprojection_cost(refined.pose, noisy[m], world[m], K) <= \
        reprojection_cost(raw.pose, noisy[m], world[m], K)


def test_adaptive_bound():
    assert _adaptive_bound(1.0, 0.9999, 10000) == 1
    assert _adaptive_bound(0.0, 0.9999, 10000) == 10000
    expected = int(np.ceil(np.log(1 - 0.9999) / np.log(1 - 0.5 ** 3)))
    assert _adaptive_bound(0.5, 0.9999, 10000) == expected


def test_refine_fixed_point():
    rng = np.random.default_rng(7)
    pose, world, px = scene_pose(rng, 30)
    out = refine_lm(pose, px, world, K)
    assert np.allclose(out.rotation, pose.rotation, atol=1e-10)
    assert np.allclose(out.translation, pose.translation, atol=1e-10)


@settings(max_examples=30)
@given(st.integers(0, 2**31 - 1))
def test_refine_recovers_perturbed_pose(seed):
    rng = np.random.default_rng(seed)
    pose, world, px = scene_pose(rng, 30)
    diameter = np.max(np.linalg.norm(world[:, None] - world[None], axis=-1))
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    shift = rng.normal(size=3)
    shift *= 0.01 * diameter / np.linalg.norm(shift)
    start = CameraPose(so3_exp(axis * np.radians(1.0)) @ pose.rotation, pose.translation + shift)
    out = refine_lm(start, px, world, K)
    err = pose_error(out, pose)
    assert err.translation_error < 1e-8 and err.rotation_error < 1e-8


@settings(max_examples=30)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 5.0))
def test_refine_never_increases_cost(seed, noise):
    rng = np.random.default_rng(seed)
    pose, world, px = scene_pose(rng, 25)
    px = px + rng.normal(0, noise, px.shape)
    start = CameraPose(so3_exp(rng.normal(0, 0.05, 3)) @ pose.rotation, pose.translation + rng.normal(0, 0.1, 3))
    out = refine_lm(start, px, world, K)
    assert reprojection_cost(out, px, world, K) <= reprojection_cost(start, px, world, K)
