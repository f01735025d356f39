"""Pseudo 2D-3D labels for unlabeled frames.

For each unlabeled frame: retrieve the most similar training frames by a
global descriptor, match local descriptors against each of them, and copy
the matched training descriptors' world coordinates.  Frames with fewer than
``min_valid`` transferred labels are skipped.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from .frames import Frame

TOP_K = 10
MIN_VALID = 50
RATIO = 0.9


@dataclass(frozen=True)
class GlobalDescriptor:
    vector: np.ndarray


@dataclass(frozen=True)
class MatchSet:
    pairs: np.ndarray  # (n, 2) int: query index, train index
    distances: np.ndarray  # (n,)

    def __len__(self):
        return len(self.pairs)


@dataclass(frozen=True)
class PseudoFrame:
    frame: Frame
    pseudo_coords: np.ndarray  # (K, 3)
    valid_mask: np.ndarray  # (K,) uint8
    s: int
    min_valid: int = MIN_VALID

    @property
    def admitted(self):
        return self.s >= self.min_valid

    def to_frame(self):
        """Labeled view: transferred descriptors get reliability 1, the rest 0."""
        return self.frame.replace(gt_coords=self.pseudo_coords, gt_reliability=self.valid_mask,
                                  pose=None, point_ids=None)


@dataclass
class PseudoLabelReport:
    processed: int = 0
    admitted: int = 0
    skipped: list = field(default_factory=list)  # (frame_id, s)
    s_values: list = field(default_factory=list)

    @property
    def mean_s(self):
        return float(np.mean(self.s_values)) if self.s_values else 0.0

    def to_text(self):
        lines = [f"processed {self.processed}", f"admitted {self.admitted}",
                 f"skipped {len(self.skipped)}", f"mean_s {self.mean_s:.2f}"]
        lines += [f"skip {fid} s={s}" for fid, s in self.skipped]
        return "\n".join(lines) + "\n"


def global_descriptor(frame):
    desc = np.asarray(getattr(frame, "descriptors", frame), dtype=np.float64)
    if desc.shape[0] < 1:
        raise ValueError("frame has no descriptors")
    mean = desc.mean(axis=0)
    norm = np.linalg.norm(mean)
    return GlobalDescriptor(mean / norm if norm > 0 else mean)


def retrieve_top_k(query, train_descriptors, k=TOP_K):
    """Indices of the ``k`` most cosine-similar training frames, best first.

    ``train_descriptors`` holds GlobalDescriptors (or an (n, D) array of their
    vectors).  Ties go to the lower index.
    """
    if isinstance(train_descriptors, np.ndarray):
        bank = train_descriptors
    else:
        bank = np.stack([g.vector for g in train_descriptors])
    if len(bank) == 0:
        raise ValueError("training set is empty")
    q = getattr(query, "vector", query)
    sims = bank @ q
    order = np.lexsort((np.arange(len(sims)), -sims))
    return order[:k]


def _pairwise_distances(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    d2 = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.sqrt(np.maximum(d2, 0.0))


def match_descriptors(query, train, ratio=RATIO):
    """Mutual nearest neighbours (L2) passing the nearest/second-nearest ratio test."""
    qd = getattr(query, "descriptors", query)
    td = getattr(train, "descriptors", train)
    if len(qd) == 0 or len(td) == 0:
        raise ValueError("both descriptor sets must be nonempty")
    dist = _pairwise_distances(qd, td)
    nn12 = dist.argmin(axis=1)
    nn21 = dist.argmin(axis=0)
    rows = np.arange(len(qd))
    best = dist[rows, nn12]
    if dist.shape[1] > 1:
        second = np.partition(dist, 1, axis=1)[:, 1]
        with np.errstate(divide="ignore", invalid="ignore"):
            passes = np.where(second > 0, best / second, np.where(best > 0, 1.0, 0.0)) < ratio
    else:
        passes = np.ones(len(qd), bool)
    keep = (nn21[nn12] == rows) & passes
    return MatchSet(np.stack([rows[keep], nn12[keep]], axis=1), best[keep])


def transfer_labels(query_frame, train_frames, min_valid=MIN_VALID, ratio=RATIO):
    """Copy world coordinates from matched, reliable training descriptors.

    When several training frames label the same query descriptor, the match
    with the smallest descriptor distance wins.
    """
    K = len(query_frame)
    dtypes = [t.gt_coords.dtype for t in train_frames if t.has_labels]
    coords = np.zeros((K, 3), dtype=np.result_type(*dtypes) if dtypes else np.float32)
    mask = np.zeros(K, dtype=np.uint8)
    best = np.full(K, np.inf)
    for train in train_frames:
        if not train.has_labels:
            continue
        matches = match_descriptors(query_frame, train, ratio)
        for (qi, ti), d in zip(matches.pairs, matches.distances):
            if train.gt_reliability[ti] and d < best[qi]:
                best[qi] = d
                coords[qi] = train.gt_coords[ti]
                mask[qi] = 1
    return PseudoFrame(query_frame, coords, mask, int(mask.sum()), min_valid)


class PseudoLabeler(BaseEstimator):
    """Retrieval + matching + copy over a fixed labeled training set.

    ``fit`` indexes the training frames; ``transform`` returns the admitted
    pseudo-labelled frames for a collection of unlabeled frames.
    """

    def __init__(self, top_k=TOP_K, min_valid=MIN_VALID, ratio=RATIO):
        self.top_k = top_k
        self.min_valid = min_valid
        self.ratio = ratio

    def fit(self, train_frames):
        self.train_frames_ = [f for f in train_frames if f.has_labels]
        if not self.train_frames_:
            raise ValueError("no labeled training frames")
        self.bank_ = np.stack([global_descriptor(f).vector for f in self.train_frames_])
        return self

    def label(self, frame):
        ids = retrieve_top_k(global_descriptor(frame), self.bank_, self.top_k)
        return transfer_labels(frame, [self.train_frames_[i] for i in ids],
                               self.min_valid, self.ratio)

    def transform(self, unlabeled_frames, report=None):
        report = report if report is not None else PseudoLabelReport()
        admitted = []
        for frame in unlabeled_frames:
            pf = self.label(frame)
            report.processed += 1
            report.s_values.append(pf.s)
            if pf.admitted:
                report.admitted += 1
                admitted.append(pf.to_frame())
            else:
                report.skipped.append((frame.frame_id, pf.s))
        return admitted

    def fit_transform(self, train_frames, unlabeled_frames, report=None):
        return self.fit(train_frames).transform(unlabeled_frames, report)


def pseudo_label(train_frames, unlabeled_frames, top_k=TOP_K, min_valid=MIN_VALID):
    """Run the whole procedure; returns (admitted frames, report)."""
    report = PseudoLabelReport()
    admitted = PseudoLabeler(top_k, min_valid).fit_transform(train_frames, unlabeled_frames, report)
    return admitted, report
