"""Per-image containers passed between the network, losses, solver and I/O."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .geometry import CameraPose, Intrinsics


@dataclass(frozen=True)
class DescriptorSet:
    descriptors: np.ndarray  # (K, D)
    keypoints: np.ndarray  # (K, 2) pixels

    def __len__(self):
        return self.descriptors.shape[0]

    @property
    def dim(self):
        return self.descriptors.shape[1]


@dataclass(frozen=True)
class SceneCoordinateSet:
    coords: np.ndarray  # (K, 3)
    raw_p: np.ndarray  # (K,)
    reliability: np.ndarray  # (K,) in (0, 1]

    def __len__(self):
        return self.coords.shape[0]


@dataclass(frozen=True)
class Frame:
    """One image: descriptors + keypoints, optionally labels, pose and intrinsics.

    ``gt_reliability`` doubles as the valid mask of pseudo-labelled frames.
    ``point_ids`` is in-memory only (synthetic ground-truth identity, -1 for
    unreliable points) and is never serialized.
    """

    descriptors: np.ndarray
    keypoints: np.ndarray
    gt_coords: Optional[np.ndarray] = None
    gt_reliability: Optional[np.ndarray] = None
    pose: Optional[CameraPose] = None
    intrinsics: Optional[Intrinsics] = None
    frame_id: str = ""
    point_ids: Optional[np.ndarray] = field(default=None, compare=False, repr=False)

    def __len__(self):
        return self.descriptors.shape[0]

    @property
    def has_labels(self):
        return self.gt_coords is not None and self.gt_reliability is not None

    @property
    def has_pose(self):
        return self.pose is not None and self.intrinsics is not None

    @property
    def valid_mask(self):
        """Per-descriptor label mask; all zeros for an unlabeled frame."""
        if self.gt_reliability is None:
            return np.zeros(len(self), dtype=np.uint8)
        return self.gt_reliability

    @property
    def descriptor_set(self):
        return DescriptorSet(self.descriptors, self.keypoints)

    @property
    def reliable_count(self):
        return 0 if self.gt_reliability is None else int(np.count_nonzero(self.gt_reliability))

    def replace(self, **changes):
        return replace(self, **changes)

    def without_labels(self):
        """Strip labels and pose (keeps intrinsics), as an unlabeled observation."""
        return replace(self, gt_coords=None, gt_reliability=None, pose=None)


LabeledFrame = Frame
