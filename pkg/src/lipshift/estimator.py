"""scikit-learn style wrapper around training, prediction and certification."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .certify import certify_batch
from .data import Dataset
from .exceptions import DimensionError
from .model import ArchConfig, build_model, lipschitz_report
from .train import TARGET_EPS, TrainConfig, train


def check_images(X, input_shape=None) -> np.ndarray:
    """Validate an image batch: 4-D, finite, values in ``[0, 1]``."""
    X = check_array(X, allow_nd=True, dtype=np.float32, ensure_all_finite=True)
    if X.ndim != 4:
        raise DimensionError(f"expected images [N, C, H, W], got shape {X.shape}")
    if input_shape is not None and tuple(X.shape[1:]) != tuple(input_shape):
        raise DimensionError(f"expected images of shape {tuple(input_shape)}, got {X.shape[1:]}")
    if X.size and (X.min() < 0.0 or X.max() > 1.0):
        raise ValueError("pixel values must lie in [0, 1]")
    return X


def check_images_labels(X, y):
    X, y = check_X_y(X, y, allow_nd=True, dtype=np.float32, ensure_all_finite=True)
    return check_images(X), y


class LipShiFTClassifier(ClassifierMixin, BaseEstimator):
    """Certifiably robust image classifier with an sklearn interface.

    ``fit`` trains with the Lipschitz-margin loss; ``certify`` returns a
    boolean mask of samples whose prediction provably cannot change within
    an l2 ball of radius ``eps``.
    """

    def __init__(
        self,
        stage_depths=(1, 1, 1, 1),
        embed_dim=16,
        p_drop=0.0,
        epochs=30,
        batch_size=32,
        lr=5e-4,
        weight_decay=0.0,
        eps=TARGET_EPS,
        random_state=0,
    ):
        self.stage_depths = stage_depths
        self.embed_dim = embed_dim
        self.p_drop = p_drop
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.eps = eps
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_images_labels(X, y)
        self.classes_ = unique_labels(y)
        labels = np.searchsorted(self.classes_, y)
        depths = tuple(self.stage_depths)
        arch = ArchConfig(
            stage_depths=depths,
            embed_dim=self.embed_dim,
            dim_multipliers=tuple(2**i for i in range(len(depths))),
            p_drop=self.p_drop,
            num_classes=max(len(self.classes_), 2),
            input_shape=tuple(X.shape[1:]),
        ).validate()
        self.model_ = build_model(arch, self.random_state)
        cfg = TrainConfig(
            batch_size=min(self.batch_size, len(X)),
            lr=self.lr,
            epochs=self.epochs,
            weight_decay=self.weight_decay,
            seed=self.random_state,
            target_eps=self.eps,
            crop_pad=0,
        )
        result = train(self.model_, Dataset(X, labels, arch.num_classes), cfg)
        self.history_ = result.log
        self.report_ = result.report
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_images(X, self.model_.cfg.input_shape)
        return np.asarray(self.model_.predict_logits(X), dtype=np.float64)

    def predict(self, X) -> np.ndarray:
        logits = self.decision_function(X)
        return self.classes_[np.argmax(logits, axis=1)]

    def certify(self, X, eps=None) -> np.ndarray:
        """Boolean mask: prediction certified constant within radius ``eps``."""
        eps = self.eps if eps is None else eps
        logits = self.decision_function(X)
        K = self.report_.pair_constants()
        return np.array([c.certified for c in certify_batch(logits, K, eps)], dtype=bool)

    def verified_accuracy(self, X, y, eps=None) -> float:
        y = np.asarray(y)
        return float(np.mean((self.predict(X) == y) & self.certify(X, eps)))

    def lipschitz_bound(self) -> float:
        check_is_fitted(self, "model_")
        return lipschitz_report(self.model_).backbone_bound
