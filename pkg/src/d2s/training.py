"""Losses, the two-stage training schedule, pseudo-label updates and augmentation."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, fields

import numpy as np

from . import diffcore as dc
from .exceptions import BadConfig, EmptyDataset
from .frames import Frame
from .geometry import DEPTH_EPS
from .network import Architecture, ModelParams, forward_tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossWeights:
    alpha_m: float = 1.0
    alpha_u: float = 1.0
    alpha_r: float = 0.0

    def __post_init__(self):
        if min(self.alpha_m, self.alpha_u, self.alpha_r) < 0:
            raise BadConfig("loss weights must be nonnegative")


STAGE1_WEIGHTS = LossWeights(1.0, 1.0, 0.0)
STAGE2_WEIGHTS = LossWeights(1.0, 1.0, 10.0)
UPDATE_WEIGHTS = LossWeights(1.0, 1.0, 1.0)


@dataclass(frozen=True)
class TrainConfig:
    # network
    num_layers: int = 5
    num_heads: int = 4
    head_widths: tuple = (512, 1024, 1024, 512)
    beta: float = 100.0
    # schedule
    batch_size: int = 8
    stage1_iters: int = 300_000
    stage2_iters: int = 100_000
    update_iters: int = 50_000
    lr_stage1: float = 1e-4
    lr_stage2: float = 1e-5
    lr_update: float = 1e-4
    lr_decay: float = 0.5
    stage2_alpha_r: float = 10.0
    update_alpha_r: float = 1.0
    normalize_by_reliable: bool = False
    # augmentation
    augment: bool = False
    augment_prob: float = 0.5
    augment_sigma: float = 0.05
    warp_prob: float = 0.3
    distortion_scale: float = 0.4
    seed: int = 0
    log_every: int = 0

    def __post_init__(self):
        object.__setattr__(self, "head_widths", tuple(int(w) for w in self.head_widths))
        if self.batch_size < 1:
            raise BadConfig("batch_size must be >= 1")
        if min(self.stage1_iters, self.stage2_iters, self.update_iters) < 0:
            raise BadConfig("iteration counts must be >= 0")

    def architecture(self, descriptor_dim):
        return Architecture(descriptor_dim, self.num_layers, self.num_heads, self.head_widths, self.beta)

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    descriptors: np.ndarray  # (N, K, D)
    valid: np.ndarray  # (N, K) bool, False on padding rows
    keypoints: np.ndarray  # (N, K, 2)
    gt_coords: np.ndarray  # (N, K, 3)
    z: np.ndarray  # (N, K) in {0, 1}
    rotations: np.ndarray  # (N, 3, 3)
    translations: np.ndarray  # (N, 3)
    intrinsics: np.ndarray  # (N, 4) fx, fy, cx, cy
    has_pose: np.ndarray  # (N,) bool

    @property
    def size(self):
        return self.descriptors.shape[0]


def collate(frames, dtype=np.float32):
    """Stack frames into a zero-padded batch."""
    N = len(frames)
    K = max(len(f) for f in frames)
    D = frames[0].descriptors.shape[1]
    b = Batch(
        descriptors=np.zeros((N, K, D), dtype),
        valid=np.zeros((N, K), bool),
        keypoints=np.zeros((N, K, 2), dtype),
        gt_coords=np.zeros((N, K, 3), dtype),
        z=np.zeros((N, K), dtype),
        rotations=np.tile(np.eye(3, dtype=dtype), (N, 1, 1)),
        translations=np.zeros((N, 3), dtype),
        intrinsics=np.ones((N, 4), dtype),
        has_pose=np.zeros(N, bool),
    )
    for i, f in enumerate(frames):
        k = len(f)
        b.descriptors[i, :k] = f.descriptors
        b.valid[i, :k] = True
        b.keypoints[i, :k] = f.keypoints
        if f.gt_coords is not None:
            b.gt_coords[i, :k] = f.gt_coords
        if f.gt_reliability is not None:
            b.z[i, :k] = f.gt_reliability
        if f.has_pose:
            b.rotations[i] = f.pose.rotation
            b.translations[i] = f.pose.translation
            b.intrinsics[i] = f.intrinsics.to_array()
            b.has_pose[i] = True
    return b


def _as_batch(frames, dtype):
    if isinstance(frames, Batch):
        return frames
    if isinstance(frames, Frame):
        frames = [frames]
    return collate(list(frames), dtype)


def _as_pred(pred, batch):
    """Accept a Tensor (N, K, 4) / (K, 4) or a SceneCoordinateSet."""
    if isinstance(pred, dc.Tensor):
        if pred.ndim == 2:
            pred = dc.reshape(pred, (1,) + pred.shape)
        return pred
    values = np.concatenate([pred.coords, np.asarray(pred.raw_p).reshape(-1, 1)], axis=1)
    return dc.Tensor(values[None].astype(batch.descriptors.dtype))


def _prepare(pred, frames):
    dtype = pred.dtype if isinstance(pred, dc.Tensor) else np.asarray(pred.coords).dtype
    batch = _as_batch(frames, dtype)
    return _as_pred(pred, batch), batch


# ---------------------------------------------------------------------------
# losses (each returns the sum over all frames in the batch)
# ---------------------------------------------------------------------------

def loss_m(pred, frames):
    """Masked squared coordinate error, summed over descriptors and frames."""
    pred, batch = _prepare(pred, frames)
    diff = dc.sub(dc.cols(pred, 0, 3), batch.gt_coords.astype(pred.dtype))
    w = (batch.z * batch.valid)[..., None].astype(pred.dtype)
    return dc.sum(dc.mul(dc.square(diff), w))


def loss_u(pred, frames, beta=100.0):
    """Squared gap between ground-truth reliability and ``1/(1+|beta p|)``."""
    pred, batch = _prepare(pred, frames)
    p = dc.cols(pred, 3, 4)
    z_hat = dc.div(1.0, dc.add(dc.abs_smooth(dc.scale(p, beta)), 1.0))
    resid = dc.sub(batch.z[..., None].astype(pred.dtype), z_hat)
    return dc.sum(dc.mul(dc.square(resid), batch.valid[..., None].astype(pred.dtype)))


def loss_r(pred, frames):
    """Masked squared reprojection error in pixels.

    Descriptors whose predicted camera depth is <= DEPTH_EPS, and frames with
    no pose, contribute zero.
    """
    pred, batch = _prepare(pred, frames)
    dt = pred.dtype
    xyz = dc.cols(pred, 0, 3)
    Rt = np.swapaxes(batch.rotations, 1, 2).astype(dt)
    cam = dc.add(dc.matmul(xyz, Rt), batch.translations[:, None, :].astype(dt))
    depth_val = cam.value[..., 2]
    m = ((depth_val > DEPTH_EPS) & batch.valid & batch.has_pose[:, None] & (batch.z > 0)).astype(dt)
    # masked rows get depth 1 so the division stays finite; their gradient is zero
    depth = dc.add(dc.mul(dc.cols(cam, 2, 3), m[..., None]), (1.0 - m)[..., None])
    xy = dc.div(dc.cols(cam, 0, 2), depth)
    f = batch.intrinsics[:, None, 0:2].astype(dt)
    c = batch.intrinsics[:, None, 2:4].astype(dt)
    px = dc.add(dc.mul(xy, f), c)
    resid = dc.sub(px, batch.keypoints.astype(dt))
    return dc.sum(dc.mul(dc.square(resid), m[..., None]))


def total_loss(pred, frames, weights, beta=100.0, normalize_by_reliable=False):
    """Weighted sum of the three terms, each averaged over the batch's frames."""
    pred, batch = _prepare(pred, frames)
    if normalize_by_reliable:
        denom = max(1.0, float(np.sum(batch.z * batch.valid)))
    else:
        denom = float(batch.size)
    terms = []
    if weights.alpha_m:
        terms.append(dc.scale(loss_m(pred, batch), weights.alpha_m / denom))
    if weights.alpha_u:
        terms.append(dc.scale(loss_u(pred, batch, beta), weights.alpha_u / denom))
    if weights.alpha_r:
        terms.append(dc.scale(loss_r(pred, batch), weights.alpha_r / denom))
    if not terms:
        return dc.tensor(0.0, dtype=pred.dtype)
    out = terms[0]
    for t in terms[1:]:
        out = dc.add(out, t)
    return out


def batch_loss(params, batch, weights, normalize_by_reliable=False):
    dtype = next(iter(params.tensors.values())).dtype
    x = dc.Tensor(batch.descriptors.astype(dtype, copy=False))
    pred = forward_tensor(x, params, valid=batch.valid)
    return total_loss(pred, batch, weights, params.arch.beta, normalize_by_reliable)


# ---------------------------------------------------------------------------
# schedules
# ---------------------------------------------------------------------------

def stage1_lr(config, it):
    """Learning rate halved (by ``lr_decay``) every quarter of stage 1."""
    if config.stage1_iters == 0:
        return config.lr_stage1
    quarter = min(3, (4 * it) // config.stage1_iters)
    return config.lr_stage1 * config.lr_decay ** quarter


def _maybe_augment(frame, config, rng):
    if config.augment and rng.random() < config.augment_prob:
        aug = augment_frame(frame, rng, sigma=config.augment_sigma,
                            warp_prob=config.warp_prob, distortion_scale=config.distortion_scale)
        if aug is not None:
            return aug
    return frame


def _run(params, sampler, iters, lr_fn, weights, config, rng, optimizer, history, stage):
    for it in range(iters):
        frames = [_maybe_augment(f, config, rng) for f in sampler(rng)]
        batch = collate(frames, next(iter(params.tensors.values())).dtype)
        optimizer.zero_grad()
        loss = batch_loss(params, batch, weights, config.normalize_by_reliable)
        dc.backward(loss)
        optimizer.step(lr_fn(it))
        value = loss.item()
        if history is not None:
            history.append((stage, it, value))
        if config.log_every and it % config.log_every == 0:
            log.info("%s iter %d loss %.6g lr %.3g", stage, it, value, lr_fn(it))
        if not math.isfinite(value):
            raise FloatingPointError(f"{stage}: loss became {value} at iteration {it}")


def _uniform_sampler(frames, n):
    def sample(rng):
        return [frames[i] for i in rng.integers(0, len(frames), size=n)]
    return sample


def train(dataset, config=None, params=None, history=None):
    """Two-stage training.  Returns the trained :class:`ModelParams`.

    Stage 1 uses weights (1, 1, 0) with a quarterly-decayed learning rate;
    stage 2 adds the reprojection term with a constant smaller rate.  Batches
    are drawn uniformly with replacement from a generator seeded by
    ``config.seed``.
    """
    config = config or TrainConfig()
    frames = list(dataset)
    if not frames:
        raise EmptyDataset("training dataset is empty")
    rng = np.random.default_rng(config.seed)
    if params is None:
        params = ModelParams.initialize(config.architecture(frames[0].descriptors.shape[1]), rng)
    optimizer = dc.Adam(params.tensors)
    sampler = _uniform_sampler(frames, config.batch_size)
    _run(params, sampler, config.stage1_iters, lambda it: stage1_lr(config, it),
         STAGE1_WEIGHTS, config, rng, optimizer, history, "stage1")
    weights2 = LossWeights(1.0, 1.0, config.stage2_alpha_r)
    _run(params, sampler, config.stage2_iters, lambda it: config.lr_stage2,
         weights2, config, rng, optimizer, history, "stage2")
    return params


def split_batch(batch_size):
    """(labeled, pseudo) counts in each update batch."""
    return math.ceil(batch_size / 2), batch_size // 2


def update_with_pseudo(params, labeled_dataset, pseudo_dataset, config=None, history=None):
    """Fine-tune on half labeled / half pseudo-labelled batches; returns new params."""
    config = config or TrainConfig()
    labeled, pseudo = list(labeled_dataset), list(pseudo_dataset)
    if not pseudo:
        raise EmptyDataset("pseudo-labelled dataset is empty")
    if not labeled:
        raise EmptyDataset("labeled dataset is empty")
    params = params.copy()
    rng = np.random.default_rng(config.seed + 1)
    n_lab, n_pseudo = split_batch(config.batch_size)

    def sample(rng):
        a = [labeled[i] for i in rng.integers(0, len(labeled), size=n_lab)]
        b = [pseudo[i] for i in rng.integers(0, len(pseudo), size=n_pseudo)]
        return a + b

    weights = LossWeights(1.0, 1.0, config.update_alpha_r)
    optimizer = dc.Adam(params.tensors)
    _run(params, sample, config.update_iters, lambda it: config.lr_update,
         weights, config, rng, optimizer, history, "update")
    return params


# ---------------------------------------------------------------------------
# augmentation by label transfer
# ---------------------------------------------------------------------------

def _homography(src, dst):
    A = []
    for (x, y), (u, v) in zip(src, dst):
        A.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        A.append([0, 0, 0, x, y, 1, -v * x, -v * y])
    h = np.linalg.solve(np.asarray(A, float), dst.reshape(-1))
    return np.append(h, 1.0).reshape(3, 3)


def random_perspective(rng, width, height, distortion_scale):
    """Homography moving each image corner inward by up to ``distortion_scale`` * half-size."""
    hw, hh = distortion_scale * width / 2, distortion_scale * height / 2
    w, h = width - 1, height - 1
    src = np.array([[0, 0], [w, 0], [w, h], [0, h]], float)
    signs = np.array([[1, 1], [-1, 1], [-1, -1], [1, -1]], float)
    disp = rng.uniform(0, 1, size=(4, 2)) * np.array([hw, hh])
    return _homography(src, src + signs * disp)


def apply_homography(H, pts):
    p = np.c_[pts, np.ones(len(pts))] @ H.T
    return p[:, :2] / p[:, 2:3]


def augment_frame(frame, rng, sigma=0.05, warp_prob=0.3, distortion_scale=0.4,
                  image_size=None, min_valid=50):
    """Perturb a labeled frame and re-derive its labels by matching.

    Descriptors get Gaussian noise; keypoints get a random perspective warp
    with probability ``warp_prob``.  Labels are transferred from the original
    through mutual-NN matching.  Returns ``None`` when fewer than
    ``min_valid`` labels transfer.  Warped frames lose their pose, since the
    warp no longer corresponds to a pinhole camera.
    """
    from .pseudo_label import transfer_labels

    desc = frame.descriptors
    if sigma > 0:
        desc = (desc + rng.normal(0.0, sigma, size=desc.shape)).astype(frame.descriptors.dtype)
    keypoints, pose = frame.keypoints, frame.pose
    if warp_prob > 0 and rng.random() < warp_prob:
        if image_size is None:
            k = frame.intrinsics
            image_size = (2 * k.cx, 2 * k.cy) if k is not None else tuple(np.ptp(frame.keypoints, 0) + 1)
        H = random_perspective(rng, image_size[0], image_size[1], distortion_scale)
        keypoints = apply_homography(H, frame.keypoints).astype(frame.keypoints.dtype)
        pose = None
    perturbed = frame.replace(descriptors=desc, keypoints=keypoints, gt_coords=None,
                              gt_reliability=None, pose=pose, point_ids=None)
    pseudo = transfer_labels(perturbed, [frame], min_valid=min_valid)
    if not pseudo.admitted:
        return None
    out = pseudo.to_frame()
    return out.replace(pose=pose, intrinsics=frame.intrinsics, frame_id=frame.frame_id + "+aug")
