"""scikit-learn style wrapper around the network, training and pose solver."""
from __future__ import annotations

from dataclasses import fields

import numpy as np
from sklearn.base import BaseEstimator

from .frames import DescriptorSet
from .network import ModelParams, forward
from .pose_solver import RansacConfig, all_correspondences, filter_reliable, ransac_pnp
from .pseudo_label import PseudoLabeler, PseudoLabelReport
from .synth import evaluate
from .training import TrainConfig, train, update_with_pseudo
from .validation import check_descriptors, check_fitted, check_frame, check_frames


class D2SRegressor(BaseEstimator):
    """Descriptor-to-scene-coordinate regressor.

    ``fit`` takes labeled frames; ``predict`` maps a (K, D) descriptor matrix
    (or a frame) to (K, 3) world coordinates; ``localize`` runs the pose
    solver on top.  Constructor arguments mirror :class:`TrainConfig`.
    """

    def __init__(self, num_layers=5, num_heads=4, head_widths=(512, 1024, 1024, 512), beta=100.0,
                 batch_size=8, stage1_iters=300_000, stage2_iters=100_000, update_iters=50_000,
                 lr_stage1=1e-4, lr_stage2=1e-5, lr_update=1e-4, lr_decay=0.5,
                 stage2_alpha_r=10.0, update_alpha_r=1.0, normalize_by_reliable=False,
                 augment=False, augment_prob=0.5, augment_sigma=0.05, warp_prob=0.3,
                 distortion_scale=0.4, reliability_threshold=0.5, seed=0, log_every=0):
        self.num_layers = num_layers
        self.num_heads = num_heads
        self.head_widths = head_widths
        self.beta = beta
        self.batch_size = batch_size
        self.stage1_iters = stage1_iters
        self.stage2_iters = stage2_iters
        self.update_iters = update_iters
        self.lr_stage1 = lr_stage1
        self.lr_stage2 = lr_stage2
        self.lr_update = lr_update
        self.lr_decay = lr_decay
        self.stage2_alpha_r = stage2_alpha_r
        self.update_alpha_r = update_alpha_r
        self.normalize_by_reliable = normalize_by_reliable
        self.augment = augment
        self.augment_prob = augment_prob
        self.augment_sigma = augment_sigma
        self.warp_prob = warp_prob
        self.distortion_scale = distortion_scale
        self.reliability_threshold = reliability_threshold
        self.seed = seed
        self.log_every = log_every

    @classmethod
    def from_config(cls, config, reliability_threshold=0.5):
        return cls(reliability_threshold=reliability_threshold,
                   **{f.name: getattr(config, f.name) for f in fields(TrainConfig)})

    @classmethod
    def from_params(cls, params, **kwargs):
        a = params.arch
        est = cls(num_layers=a.num_layers, num_heads=a.num_heads, head_widths=a.head_widths,
                  beta=a.beta, **kwargs)
        est.params_ = params
        est.n_features_in_ = a.descriptor_dim
        return est

    def train_config(self):
        return TrainConfig(**{f.name: getattr(self, f.name) for f in fields(TrainConfig)})

    def fit(self, frames, y=None):
        frames = check_frames(frames, require_labels=True)
        self.history_ = []
        self.params_ = train(frames, self.train_config(), history=self.history_)
        self.n_features_in_ = frames[0].descriptors.shape[1]
        return self

    def _forward(self, X):
        check_fitted(self)
        desc = check_descriptors(X, self.n_features_in_)
        kp = getattr(X, "keypoints", np.zeros((len(desc), 2), np.float32))
        return forward(DescriptorSet(desc, kp), self.params_)

    def predict(self, X):
        """(K, 3) scene coordinates."""
        return self._forward(X).coords

    def predict_reliability(self, X):
        return self._forward(X).reliability

    def transform(self, X):
        """(K, 4): coordinates followed by reliability."""
        out = self._forward(X)
        return np.column_stack([out.coords, out.reliability])

    def localize(self, frame, solver_config=None, use_filter=True):
        check_frame(frame)
        if frame.intrinsics is None:
            raise ValueError("frame has no intrinsics")
        solver_config = solver_config or RansacConfig(reliability_threshold=self.reliability_threshold,
                                                      seed=self.seed)
        pred = self._forward(frame)
        if use_filter:
            corrs = filter_reliable(pred, frame.keypoints, solver_config.reliability_threshold)
        else:
            corrs = all_correspondences(pred, frame.keypoints)
        return ransac_pnp(corrs, frame.intrinsics, solver_config)

    def evaluate(self, frames, t_thresh=0.05, r_thresh=5.0, solver_config=None, use_filter=True):
        check_fitted(self)
        frames = check_frames(frames, require_pose=True, dim=self.n_features_in_)
        solver_config = solver_config or RansacConfig(reliability_threshold=self.reliability_threshold,
                                                      seed=self.seed)
        return evaluate(self.params_, frames, solver_config, t_thresh, r_thresh, use_filter)

    def score(self, frames, y=None, t_thresh=0.05, r_thresh=5.0):
        """Recall in [0, 1] at the given thresholds."""
        return self.evaluate(frames, t_thresh, r_thresh).recall() / 100.0

    def update(self, labeled_frames, unlabeled_frames, labeler=None):
        """Pseudo-label ``unlabeled_frames`` against ``labeled_frames`` and fine-tune.

        Returns ``self``; the labelling report is kept in ``pseudo_report_``.
        """
        check_fitted(self)
        labeled = check_frames(labeled_frames, require_labels=True, dim=self.n_features_in_)
        unlabeled = check_frames(unlabeled_frames, dim=self.n_features_in_)
        labeler = labeler or PseudoLabeler()
        self.pseudo_report_ = PseudoLabelReport()
        pseudo = labeler.fit_transform(labeled, unlabeled, self.pseudo_report_)
        self.update_pseudo(labeled, pseudo)
        return self

    def update_pseudo(self, labeled_frames, pseudo_frames):
        check_fitted(self)
        self.update_history_ = []
        self.params_ = update_with_pseudo(self.params_, labeled_frames, pseudo_frames,
                                          self.train_config(), self.update_history_)
        return self

    @property
    def params(self):
        check_fitted(self)
        return self.params_

    def set_model(self, params: ModelParams):
        self.params_ = params
        self.n_features_in_ = params.arch.descriptor_dim
        return self
