"""Synthetic scenes, rendered descriptor frames and the evaluation harness.

Descriptors are latent codes attached to 3D points rather than image
patches: a reliable point always yields its code plus noise, while an
unreliable point draws a fresh random code in every frame, so it carries no
information about its position.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull
from scipy.spatial.distance import pdist

from .exceptions import BadConfig, InsufficientVisibility, NoConsensus, TooFewCorrespondences
from .frames import Frame, SceneCoordinateSet
from .geometry import CameraPose, Intrinsics, pose_error, transform_to_camera
from .network import ModelParams, forward
from .pose_solver import RansacConfig, all_correspondences, filter_reliable, ransac_pnp

NEAR_PLANE = 0.1


@dataclass(frozen=True)
class SyntheticScene:
    points: np.ndarray  # (M, 3)
    codes: np.ndarray  # (M, D)
    reliable_flag: np.ndarray  # (M,) uint8
    diameter: float

    @property
    def centroid(self):
        return self.points.mean(axis=0)


@dataclass(frozen=True)
class RenderConfig:
    descriptor_noise_sigma: float = 0.05
    pixel_noise_sigma: float = 1.0
    max_points: int = 150
    image_width: int = 640
    image_height: int = 480
    focal: float = 500.0
    domain_shift: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.descriptor_noise_sigma < 0 or self.pixel_noise_sigma < 0:
            raise BadConfig("noise sigmas must be >= 0")
        if self.max_points < 4:
            raise BadConfig("max_points must be >= 4")
        if self.domain_shift < 0:
            raise BadConfig("domain_shift must be >= 0")

    def intrinsics(self):
        return Intrinsics(self.focal, self.focal, self.image_width / 2, self.image_height / 2)


@dataclass(frozen=True)
class TrajectorySpec:
    """Three disjoint camera orbits around the scene, all looking at ``target``."""

    n_train: int = 100
    n_test: int = 50
    n_unlabeled: int = 50
    radius: float = 7.0
    height: float = 1.0
    target: tuple = (0.0, 0.0, 1.0)
    target_jitter: float = 0.3


def _unit_rows(rng, n, d):
    v = rng.normal(size=(n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def scene_diameter(points):
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) > 64:
        try:
            pts = pts[ConvexHull(pts).vertices]
        except Exception:  # degenerate (flat) point sets
            pass
    return float(pdist(pts).max())


def generate_scene(M=200, D=64, unreliable_fraction=0.3, seed=0, extent=(4.0, 4.0, 2.0)):
    """Points uniform in a box with z in [0, extent_z]; unit-norm codes."""
    if M < 10:
        raise BadConfig("M must be >= 10")
    if D < 4 or D % 4:
        raise BadConfig("D must be a positive multiple of 4")
    if not 0 <= unreliable_fraction < 1:
        raise BadConfig("unreliable_fraction must lie in [0, 1)")
    rng = np.random.default_rng([seed, 0])
    ex = np.asarray(extent, dtype=np.float64)
    lo = np.array([-ex[0] / 2, -ex[1] / 2, 0.0])
    points = lo + rng.uniform(size=(M, 3)) * ex
    codes = _unit_rows(rng, M, D)
    flags = np.ones(M, dtype=np.uint8)
    flags[rng.permutation(M)[: int(math.floor(unreliable_fraction * M))]] = 0
    return SyntheticScene(points, codes, flags, scene_diameter(points))


def shift_vector(scene, config):
    """Fixed descriptor offset of norm ``config.domain_shift`` (direction from the seed)."""
    if config.domain_shift == 0:
        return np.zeros(scene.codes.shape[1])
    v = np.random.default_rng([config.seed, 99]).normal(size=scene.codes.shape[1])
    return config.domain_shift * v / np.linalg.norm(v)


def render_frame(scene, pose, k, config=None, rng=None, shift=None, frame_id=""):
    """Observe ``scene`` from ``pose``: keypoints, descriptors and labels.

    Keeps at most ``config.max_points`` in-frustum points (nearest first).
    Rows are returned in random order.
    """
    config = config or RenderConfig()
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    cam = transform_to_camera(pose, scene.points)
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = k.fx * cam[:, 0] / z + k.cx
        v = k.fy * cam[:, 1] / z + k.cy
    visible = (z > NEAR_PLANE) & (u >= 0) & (u < config.image_width) & (v >= 0) & (v < config.image_height)
    ids = np.flatnonzero(visible)
    ids = ids[np.lexsort((ids, z[ids]))][: config.max_points]
    if np.count_nonzero(scene.reliable_flag[ids]) < 4:
        raise InsufficientVisibility(f"only {np.count_nonzero(scene.reliable_flag[ids])} reliable points visible")
    ids = ids[rng.permutation(len(ids))]

    n, D = len(ids), scene.codes.shape[1]
    keypoints = np.stack([u[ids], v[ids]], axis=1)
    if config.pixel_noise_sigma:
        keypoints = keypoints + rng.normal(0, config.pixel_noise_sigma, size=keypoints.shape)
    reliable = scene.reliable_flag[ids].astype(bool)
    desc = scene.codes[ids].copy()
    if config.descriptor_noise_sigma:
        desc += rng.normal(0, config.descriptor_noise_sigma, size=desc.shape)
    n_bad = int(np.count_nonzero(~reliable))
    if n_bad:
        desc[~reliable] = _unit_rows(rng, n_bad, D)
    if shift is not None:
        desc = desc + shift
    return Frame(
        descriptors=desc.astype(np.float32),
        # geometry stays float64 in memory; files quantize to f32
        keypoints=keypoints,
        gt_coords=scene.points[ids].copy(),
        gt_reliability=scene.reliable_flag[ids].astype(np.uint8),
        pose=pose,
        intrinsics=k,
        frame_id=frame_id,
        point_ids=ids,
    )


def trajectory_poses(spec, split, rng):
    """Camera poses for ``split`` in {'train', 'test', 'unlabeled'}."""
    n = {"train": spec.n_train, "test": spec.n_test, "unlabeled": spec.n_unlabeled}[split]
    radius, height, phase = {
        "train": (spec.radius, spec.height, 0.0),
        "test": (0.92 * spec.radius, spec.height + 0.6, 0.5),
        "unlabeled": (1.08 * spec.radius, spec.height - 0.4, 0.25),
    }[split]
    target = np.asarray(spec.target, dtype=np.float64)
    poses = []
    for i in range(n):
        a = 2 * math.pi * (i + phase) / max(n, 1)
        eye = np.array([radius * math.cos(a), radius * math.sin(a), height + 0.5 * math.sin(3 * a)])
        look = target + rng.uniform(-spec.target_jitter, spec.target_jitter, size=3)
        poses.append(CameraPose.look_at(eye, look))
    return poses


def make_dataset(scene, trajectory=None, config=None):
    """Deterministic (train, test, unlabeled) frame lists on disjoint orbits.

    The domain shift, if any, is added to test and unlabeled descriptors.
    Unlabeled frames keep only descriptors, keypoints and intrinsics.
    """
    trajectory = trajectory or TrajectorySpec()
    config = config or RenderConfig()
    if min(trajectory.n_train, trajectory.n_test, trajectory.n_unlabeled) < 0:
        raise BadConfig("frame counts must be >= 0")
    half_box = np.max(np.abs(scene.points[:, :2]))
    if 0.92 * trajectory.radius <= half_box * math.sqrt(2):
        raise BadConfig("camera orbit intersects the scene")
    k = config.intrinsics()
    shift = shift_vector(scene, config)
    splits = {}
    for split_id, split in enumerate(("train", "test", "unlabeled")):
        pose_rng = np.random.default_rng([config.seed, 1, split_id])
        frames = []
        for i, pose in enumerate(trajectory_poses(trajectory, split, pose_rng)):
            rng = np.random.default_rng([config.seed, 2, split_id, i])
            f = render_frame(scene, pose, k, config, rng,
                             shift=None if split == "train" else shift,
                             frame_id=f"{split}-{i:04d}")
            frames.append(f.without_labels() if split == "unlabeled" else f)
        splits[split] = frames
    return splits["train"], splits["test"], splits["unlabeled"]


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class FrameRecord:
    frame_id: str
    t_err: float
    r_err: float
    inliers: int
    solver_ms: float


@dataclass
class EvalReport:
    records: list
    t_thresh: float
    r_thresh: float
    curve: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))

    @property
    def median_translation(self):
        return float(np.median([r.t_err for r in self.records]))

    @property
    def median_rotation(self):
        return float(np.median([r.r_err for r in self.records]))

    def recall(self, t_thresh=None, r_thresh=None):
        t = self.t_thresh if t_thresh is None else t_thresh
        r = self.r_thresh if r_thresh is None else r_thresh
        ok = [rec.t_err <= t and rec.r_err <= r for rec in self.records]
        return 100.0 * float(np.mean(ok)) if ok else 0.0

    @property
    def mean_solver_ms(self):
        return float(np.mean([r.solver_ms for r in self.records]))

    def summary_text(self):
        return (f"frames {len(self.records)}\n"
                f"median_translation {self.median_translation:.6g}\n"
                f"median_rotation_deg {self.median_rotation:.6g}\n"
                f"recall_pct {self.recall():.2f} (t<={self.t_thresh:.4g}, r<={self.r_thresh:.4g})\n"
                f"mean_solver_ms {self.mean_solver_ms:.3f}\n")

    def to_text(self):
        lines = ["# frame_id t_err r_err inliers solver_ms"]
        lines += [f"{r.frame_id} {r.t_err:.9g} {r.r_err:.9g} {r.inliers} {r.solver_ms:.3f}"
                  for r in self.records]
        return "\n".join(lines) + "\n# summary\n" + self.summary_text()

    def curve_text(self):
        return "".join(f"{x:.4f} {y:.4f}\n" for x, y in self.curve)


def cumulative_curve(records, t_thresh, r_thresh, max_ratio=5.0, samples=101):
    """Percent of frames whose max(t/t_thresh, r/r_thresh) is <= x, for x on a grid."""
    e = np.array([max(r.t_err / t_thresh, r.r_err / r_thresh) for r in records])
    xs = np.linspace(0.0, max_ratio, samples)
    ys = np.array([100.0 * np.mean(e <= x) for x in xs]) if len(e) else np.zeros_like(xs)
    return np.stack([xs, ys], axis=1)


def oracle_predictor(frame):
    """Ground-truth coordinates; reliability 1 on reliable rows, ~0 elsewhere."""
    rel = np.where(frame.gt_reliability > 0, 1.0, 1e-3)
    return SceneCoordinateSet(frame.gt_coords.astype(np.float64), np.zeros(len(frame)), rel)


def constant_predictor(point):
    def predict(frame):
        K = len(frame)
        return SceneCoordinateSet(np.tile(np.asarray(point, float), (K, 1)), np.zeros(K), np.ones(K))
    return predict


def evaluate(params, test_frames, solver_config=None, t_thresh=0.05, r_thresh=5.0,
             use_filter=True):
    """Localize each frame and collect pose errors.

    ``params`` is a :class:`ModelParams` or any callable mapping a frame to a
    :class:`SceneCoordinateSet`.  Frames where the solver fails count as
    infinite error.
    """
    solver_config = solver_config or RansacConfig()
    predict = (lambda f: forward(f.descriptor_set, params)) if isinstance(params, ModelParams) else params
    records = []
    for frame in test_frames:
        pred = predict(frame)
        if use_filter:
            corrs = filter_reliable(pred, frame.keypoints, solver_config.reliability_threshold)
        else:
            corrs = all_correspondences(pred, frame.keypoints)
        start = time.perf_counter()
        try:
            est = ransac_pnp(corrs, frame.intrinsics, solver_config)
        except (TooFewCorrespondences, NoConsensus):
            elapsed = 1e3 * (time.perf_counter() - start)
            records.append(FrameRecord(frame.frame_id, math.inf, math.inf, 0, elapsed))
            continue
        elapsed = 1e3 * (time.perf_counter() - start)
        err = pose_error(est.pose, frame.pose)
        records.append(FrameRecord(frame.frame_id, err.translation_error, err.rotation_error,
                                   est.inlier_count, elapsed))
    report = EvalReport(records, t_thresh, r_thresh)
    report.curve = cumulative_curve(records, t_thresh, r_thresh)
    return report
