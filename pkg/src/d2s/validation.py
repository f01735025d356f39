"""Input checks for the estimator-facing API."""
from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

from .exceptions import DimensionMismatch, EmptyDataset, NotFittedError
from .frames import Frame


def check_descriptors(X, dim=None, dtype=np.float32):
    """Return a finite, 2-D (K, D) descriptor array, optionally checking D."""
    X = getattr(X, "descriptors", X)
    try:
        X = check_array(X, dtype=dtype, ensure_2d=True, ensure_all_finite=True)
    except ValueError as exc:
        raise DimensionMismatch(str(exc)) from None
    if dim is not None and X.shape[1] != dim:
        raise DimensionMismatch(f"descriptor dim {X.shape[1]} != expected {dim}")
    return X


def check_keypoints(keypoints, n):
    kp = check_array(keypoints, dtype=np.float64, ensure_all_finite=True)
    if kp.shape != (n, 2):
        raise DimensionMismatch(f"keypoints shape {kp.shape} != ({n}, 2)")
    return kp


def check_frame(frame, require_labels=False, require_pose=False):
    if not isinstance(frame, Frame):
        raise TypeError(f"expected a Frame, got {type(frame).__name__}")
    if frame.keypoints.shape != (len(frame), 2):
        raise DimensionMismatch(f"frame {frame.frame_id!r}: keypoints shape {frame.keypoints.shape}")
    if require_labels and not frame.has_labels:
        raise ValueError(f"frame {frame.frame_id!r} has no labels")
    if require_pose and not frame.has_pose:
        raise ValueError(f"frame {frame.frame_id!r} has no pose/intrinsics")
    return frame


def check_frames(frames, require_labels=False, require_pose=False, dim=None):
    if isinstance(frames, Frame):
        frames = [frames]
    frames = list(frames)
    if not frames:
        raise EmptyDataset("no frames given")
    for f in frames:
        check_frame(f, require_labels, require_pose)
        if dim is not None and f.descriptors.shape[1] != dim:
            raise DimensionMismatch(f"frame {f.frame_id!r}: descriptor dim {f.descriptors.shape[1]} != {dim}")
    return frames


def check_fitted(estimator, attribute="params_"):
    if getattr(estimator, attribute, None) is None:
        raise NotFittedError(f"{type(estimator).__name__} is not fitted; call fit() first")
