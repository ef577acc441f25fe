"""scikit-learn style wrapper around the training harness.

Unlabeled rows are marked with ``y == -1`` (the sklearn semi-supervised
convention). Every row, labeled or not, feeds the unsupervised costs.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import harness, ladder, variants
from .data import Dataset, SemiSupervisedSplit

UNLABELED = -1


class LadderClassifier(ClassifierMixin, BaseEstimator):
    """Semi-supervised classifier for any of the seven training variants.

    ``lambdas`` and ``epsilons`` default to the preset row for
    ``(kind, preset_labels)``; ``hidden`` sets the encoder between the input
    and the class layer.
    """

    def __init__(self, kind: str = "ladder", hidden=(256, 128), preset_labels: int = 100,
                 lambdas=None, epsilons=None, sigma=None, vat_norm: str = "linf",
                 epochs: int = 30, decay_start: int = 20, learning_rate: float = 0.002,
                 labeled_batch: int = 100, unlabeled_batch: int = 100, random_state: int = 0):
        self.kind = kind
        self.hidden = hidden
        self.preset_labels = preset_labels
        self.lambdas = lambdas
        self.epsilons = epsilons
        self.sigma = sigma
        self.vat_norm = vat_norm
        self.epochs = epochs
        self.decay_start = decay_start
        self.learning_rate = learning_rate
        self.labeled_batch = labeled_batch
        self.unlabeled_batch = unlabeled_batch
        self.random_state = random_state

    @classmethod
    def from_preset(cls, kind: str, n_labels: int, **kw) -> "LadderClassifier":
        return cls(kind=kind, preset_labels=n_labels, **kw)

    def variant_config(self, n_features: int, n_classes: int) -> variants.VariantConfig:
        widths = (n_features, *self.hidden, n_classes)
        base = variants.default_config(self.kind, self.preset_labels, widths=widths)
        kw = {"vat_norm": self.vat_norm}
        if self.lambdas is not None:
            kw["lambdas"] = tuple(self.lambdas)
        if self.epsilons is not None:
            kw["epsilons"] = tuple(self.epsilons)
        if self.sigma is not None:
            kw["sigma"] = self.sigma
        return variants.with_overrides(base, **kw)

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float32)
        labeled = y != UNLABELED
        if not labeled.any():
            raise ValueError("need at least one labeled row (y != -1)")
        self.classes_ = np.unique(y[labeled])
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes among labeled rows")
        self.n_features_in_ = X.shape[1]
        y_idx = np.searchsorted(self.classes_, y[labeled])
        split = SemiSupervisedSplit(Dataset(X[labeled], y_idx), Dataset(X))
        self.variant_ = self.variant_config(X.shape[1], len(self.classes_))
        config = harness.TrainConfig(
            epochs=self.epochs, decay_start=min(self.decay_start, self.epochs),
            base_lr=self.learning_rate, labeled_batch=self.labeled_batch,
            unlabeled_batch=min(self.unlabeled_batch, len(X)), seed=self.random_state)
        result = harness.train(self.variant_, config, split)
        self.params_ = result.params
        self.loss_ = result.final_loss
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float32)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return ladder.predict_proba(self.params_, X)

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]
