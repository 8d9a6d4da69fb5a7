"""Scikit-learn style estimator wrapping training and inference.

``X`` is a list of (snippets x channels) float arrays and ``y`` a matching
list of (start, end, class_id) triples in snippet units, so the estimator
plugs into sklearn tooling (clone, get_params, grid search) without any
file formats involved. Time-unit conversion is the CLI layer's job.
"""

from __future__ import annotations

import tempfile
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .config import ModelConfig, TrainConfig
from .data import VideoSample
from .training import evaluate_samples, load_checkpoint, predict_sample, train
from .validation import check_annotation_list, check_feature_list


class TemporalActionLocalizer(BaseEstimator):
    """Anchor-free action localizer with hierarchical transformer encoders.

    Parameters mirror the model/training configuration; ``fit`` trains from
    scratch and ``predict`` returns per-video detection lists sorted by
    score. All randomness is controlled by ``seed``.
    """

    def __init__(self, levels: int = 3, channels: int = 16, num_classes: int = 3,
                 heads: int = 4, delta: float = 0.7, tau: int = 5,
                 loss_lambda: float = 1.0, omega: float = 8.0,
                 bfs_enabled: bool = True, encoder_type: str = "hierarchical",
                 epochs: int = 100, batch_size: int = 2, lr: float = 1e-3,
                 weight_decay: float = 1e-4, seed: int = 0,
                 score_threshold: float = 1e-3, top_k: int = 200,
                 nms_sigma: float = 0.5):
        self.levels = levels
        self.channels = channels
        self.num_classes = num_classes
        self.heads = heads
        self.delta = delta
        self.tau = tau
        self.loss_lambda = loss_lambda
        self.omega = omega
        self.bfs_enabled = bfs_enabled
        self.encoder_type = encoder_type
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.seed = seed
        self.score_threshold = score_threshold
        self.top_k = top_k
        self.nms_sigma = nms_sigma

    def _configs(self, in_channels: int) -> tuple[ModelConfig, TrainConfig]:
        model_cfg = ModelConfig(levels=self.levels, channels=self.channels,
                                in_channels=in_channels, num_classes=self.num_classes,
                                heads=self.heads, delta=self.delta, tau=self.tau,
                                loss_lambda=self.loss_lambda, omega=self.omega,
                                bfs_enabled=self.bfs_enabled,
                                encoder_type=self.encoder_type,
                                score_threshold=self.score_threshold,
                                top_k=self.top_k, nms_sigma=self.nms_sigma)
        train_cfg = TrainConfig(epochs=self.epochs, batch_size=self.batch_size,
                                lr=self.lr, weight_decay=self.weight_decay,
                                seed=self.seed)
        return model_cfg, train_cfg

    @staticmethod
    def _samples(arrays: list[np.ndarray],
                 segments: list[list[tuple[float, float, int]]] | None) -> list[VideoSample]:
        out = []
        for i, arr in enumerate(arrays):
            segs = segments[i] if segments is not None else []
            out.append(VideoSample(id=f"seq_{i:04d}", features=arr, segments=segs))
        return out

    def fit(self, X, y):
        """Train on feature sequences ``X`` with annotations ``y``. Returns self."""
        arrays = check_feature_list(X)
        segments = check_annotation_list(y, [a.shape[0] for a in arrays],
                                         self.num_classes)
        model_cfg, train_cfg = self._configs(arrays[0].shape[1])
        samples = self._samples(arrays, segments)
        with tempfile.TemporaryDirectory(prefix="htal_fit_") as tmp:
            result = train(samples, model_cfg, train_cfg, Path(tmp))
            net, _ = load_checkpoint(result.checkpoint_path)
        self.net_ = net
        self.model_config_ = model_cfg
        self.n_features_in_ = arrays[0].shape[1]
        self.initial_loss_ = result.initial_loss
        self.final_loss_ = result.final_loss
        return self

    def _check_fitted(self) -> None:
        if not hasattr(self, "net_"):
            raise NotFittedError(
                "This TemporalActionLocalizer instance is not fitted yet; call fit first.")

    def predict(self, X) -> list[list]:
        """Detections per sequence: lists of (start, end, class_id, score) records."""
        self._check_fitted()
        arrays = check_feature_list(X)
        for i, arr in enumerate(arrays):
            if arr.shape[1] != self.n_features_in_:
                raise ValueError(
                    f"X[{i}] has {arr.shape[1]} channels, fitted with {self.n_features_in_}")
        samples = self._samples(arrays, None)
        return [predict_sample(self.net_, s, self.model_config_) for s in samples]

    def score(self, X, y, thresholds=(0.3, 0.4, 0.5, 0.6, 0.7)) -> float:
        """Average mAP of ``predict(X)`` against ``y`` over the threshold grid."""
        self._check_fitted()
        arrays = check_feature_list(X)
        segments = check_annotation_list(y, [a.shape[0] for a in arrays],
                                         self.num_classes)
        samples = self._samples(arrays, segments)
        return evaluate_samples(self.net_, samples, self.model_config_,
                                list(thresholds))
