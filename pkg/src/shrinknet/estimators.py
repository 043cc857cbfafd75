"""scikit-learn compatible wrappers around training, distillation and pruning.

Inputs are image batches ``(n, H, W, C)``; labels are identity ids of any
hashable type.  ``transform`` returns embeddings, ``predict`` returns
identity labels of the closed training set.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.model_selection import train_test_split
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .experiment import build_arch
from .netlib import Model, forward_embed
from .ops import _softmax_np
from .pruning import PruneConfig, compression_ratio, prune_iterative
from .training import KDConfig, TrainConfig, distill, fine_tuner, predict_logits, train_plain


def _check_images(X, model: Model = None):
    X = check_array(X, allow_nd=True, dtype=np.float32, ensure_min_samples=1)
    if X.ndim != 4:
        raise ValueError(f"expected an image batch of shape (n, H, W, C), got {X.shape}")
    if model is not None and tuple(X.shape[1:]) != tuple(model.spec.input_shape):
        raise ValueError(f"images have shape {X.shape[1:]}, model expects {tuple(model.spec.input_shape)}")
    return X


class _EmbeddingBase(ClassifierMixin, TransformerMixin, BaseEstimator):
    def _split(self, X, y_idx):
        if not self.validation_fraction:
            return (X, y_idx), None
        Xf, Xv, yf, yv = train_test_split(X, y_idx, test_size=self.validation_fraction, stratify=y_idx, random_state=self.random_state)
        return (Xf, yf), (Xv, yv)

    def _prepare(self, X, y):
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float32)
        check_classification_targets(y)
        if X.ndim != 4:
            raise ValueError(f"expected an image batch of shape (n, H, W, C), got {X.shape}")
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two identities to train")
        return X, y_idx

    def transform(self, X):
        """Embeddings of shape (n, embedding_dim)."""
        check_is_fitted(self, "model_")
        X = _check_images(X, self.model_)
        self.model_.eval()
        return np.concatenate([forward_embed(self.model_, X[i : i + 256]) for i in range(0, len(X), 256)])

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        return _softmax_np(predict_logits(self.model_, _check_images(X, self.model_)).astype(np.float64))

    def predict(self, X):
        return self.classes_[self.predict_proba(X).argmax(axis=1)]


class EmbeddingNetwork(_EmbeddingBase):
    """Train an architecture from scratch with cross-entropy and early stopping."""

    def __init__(
        self,
        arch="mini_teacher",
        embedding_dim=64,
        optimizer="adam",
        lr=3e-3,
        epochs=15,
        batch_size=32,
        patience=4,
        validation_fraction=0.2,
        random_state=0,
    ):
        self.arch = arch
        self.embedding_dim = embedding_dim
        self.optimizer = optimizer
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.patience = patience
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def _train_config(self):
        return TrainConfig(self.optimizer, self.lr, 0.9, self.epochs, self.batch_size, self.patience, self.random_state)

    def fit(self, X, y):
        X, y_idx = self._prepare(X, y)
        train, val = self._split(X, y_idx)
        model = build_arch(self.arch, len(self.classes_), X.shape[1:], self.embedding_dim, self.random_state)
        self.model_, self.train_report_ = train_plain(model, train, val, self._train_config())
        return self


class DistilledEmbeddingNetwork(EmbeddingNetwork):
    """Train a student against a fitted teacher estimator with the distillation loss."""

    def __init__(
        self,
        teacher=None,
        arch="student_plain",
        embedding_dim=64,
        tau=4.0,
        lam=0.9,
        optimizer="adam",
        lr=3e-3,
        epochs=40,
        batch_size=32,
        patience=6,
        validation_fraction=0.2,
        random_state=0,
    ):
        super().__init__(arch, embedding_dim, optimizer, lr, epochs, batch_size, patience, validation_fraction, random_state)
        self.teacher = teacher
        self.tau = tau
        self.lam = lam

    def fit(self, X, y):
        if self.teacher is None:
            raise ValueError("a fitted teacher estimator is required")
        check_is_fitted(self.teacher, "model_")
        X, y_idx = self._prepare(X, y)
        if not np.array_equal(self.classes_, self.teacher.classes_):
            raise ValueError("teacher and student must be trained on the same identities")
        train, val = self._split(X, y_idx)
        cfg = KDConfig(self.optimizer, self.lr, 0.9, self.epochs, self.batch_size, self.patience, self.random_state, tau=self.tau, lam=self.lam)
        student = build_arch(self.arch, len(self.classes_), X.shape[1:], self.embedding_dim, self.random_state)
        self.model_, self.train_report_ = distill(self.teacher.model_, student, train, val, cfg)
        return self


class PrunedEmbeddingNetwork(_EmbeddingBase):
    """Iteratively prune a copy of a fitted estimator's network, fine-tuning on ``(X, y)``."""

    def __init__(
        self,
        estimator=None,
        rule="layerwise_magnitude",
        target_cr=8.0,
        iterations=4,
        fine_tune_epochs=10,
        lr=1e-3,
        batch_size=32,
        random_state=0,
    ):
        self.estimator = estimator
        self.rule = rule
        self.target_cr = target_cr
        self.iterations = iterations
        self.fine_tune_epochs = fine_tune_epochs
        self.lr = lr
        self.batch_size = batch_size
        self.random_state = random_state

    def fit(self, X, y):
        if self.estimator is None:
            raise ValueError("a fitted estimator to prune is required")
        check_is_fitted(self.estimator, "model_")
        X, y_idx = self._prepare(X, y)
        if not np.array_equal(self.classes_, self.estimator.classes_):
            raise ValueError("pruning data must use the estimator's identities")
        cfg = PruneConfig(self.rule, self.target_cr, self.iterations, self.fine_tune_epochs, seed=self.random_state)
        ft = TrainConfig("adam", self.lr, 0.9, self.fine_tune_epochs, self.batch_size, 0, self.random_state)
        self.model_, self.history_ = prune_iterative(self.estimator.model_.copy(), cfg, (X, y_idx), fine_tuner((X, y_idx), ft))
        self.cr_params_ = compression_ratio(self.model_).cr_params
        return self
