"""scikit-learn style wrappers around the pipeline.

Token inputs are integer arrays of shape (n_sequences, length). Feature
inputs for :class:`HiddenPCAProjection` follow the usual sklearn layout
(n_samples, n_features); internally everything is feature-major.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin, clone
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .calibration import collect
from .errors import InputError
from .fusing import fuse, fused_forward, size_report
from .model import ModelConfig, forward, init_model, train_toy
from .numerics import centering_matrix, svd_full
from .projection import inject
from .pruning import Schedule, binarize, expected_retained, train_masks


def _tokens(X, y=None):
    if y is None:
        X = check_array(X, dtype=None, ensure_2d=True)
    else:
        X, y = check_X_y(X, y, dtype=None, ensure_2d=True)
    if not np.issubdtype(X.dtype, np.integer):
        if not np.all(X == np.round(X)):
            raise InputError("token arrays must hold integers")
        X = X.astype(np.int64)
    if X.size and X.min() < 0:
        raise InputError("token ids must be non-negative")
    return X if y is None else (X, y)


def _softmax_rows(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class _TokenClassifier(ClassifierMixin, BaseEstimator):
    def _logits(self, X):  # (n_samples, n_classes)
        raise NotImplementedError

    def decision_function(self, X):
        check_is_fitted(self)
        return self._logits(_tokens(X))

    def predict_proba(self, X):
        return _softmax_rows(self.decision_function(X))

    def predict(self, X):
        scores = self.decision_function(X)  # checks fitted state before classes_ is read
        return self.classes_[np.argmax(scores, axis=1)]


class ToyTransformerClassifier(_TokenClassifier):
    """A small post-LN or pre-RMSNorm transformer trained with Adam on token sequences."""

    def __init__(self, arch="postln", n_layers=2, d=16, n_heads=4, d_f=32, vocab_size=None,
                 steps=200, lr=3e-3, batch_size=32, random_state=0):
        self.arch = arch
        self.n_layers = n_layers
        self.d = d
        self.n_heads = n_heads
        self.d_f = d_f
        self.vocab_size = vocab_size
        self.steps = steps
        self.lr = lr
        self.batch_size = batch_size
        self.random_state = random_state

    def fit(self, X, y):
        X, y = _tokens(X, y)
        self.classes_, codes = np.unique(y, return_inverse=True)
        vocab = self.vocab_size if self.vocab_size is not None else int(X.max()) + 1
        cfg = ModelConfig(self.arch, self.n_layers, self.d, self.n_heads, self.d_f, vocab,
                          X.shape[1], max(len(self.classes_), 2), int(self.random_state))
        self.model_, self.loss_curve_ = train_toy(init_model(cfg), X, codes, steps=self.steps,
                                                  batch_size=self.batch_size, lr=self.lr,
                                                  seed=int(self.random_state))
        self.n_features_in_ = X.shape[1]
        return self

    def _logits(self, X):
        return forward(self.model_, X).T


class HiddenPCAProjection(TransformerMixin, BaseEstimator):
    """Principal-coordinate projection of hidden features.

    ``transform`` returns ``P_in x`` (scores on the principal directions of
    the per-sample-centred features) and ``inverse_transform`` applies
    ``P_out = diag(gamma) U``. Keeping all components makes the pair exact
    on centred inputs.
    """

    def __init__(self, n_components=None, center=True, gamma=None):
        self.n_components = n_components
        self.center = center
        self.gamma = gamma

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        d = X.shape[1]
        k = d if self.n_components is None else int(self.n_components)
        if not 1 <= k <= d:
            raise InputError(f"n_components must be in [1, {d}], got {self.n_components}")
        r = centering_matrix(d) if self.center else np.eye(d)
        res = svd_full(r @ X.T)
        energy = res.S ** 2
        total = energy.sum()
        self.components_ = res.U.T[:k]
        self.singular_values_ = res.S[:k]
        self.explained_variance_ratio_ = energy[:k] / total if total > 0 else np.zeros(min(k, energy.size))
        self.P_in_ = self.components_ @ r
        g = np.ones(d) if self.gamma is None else np.asarray(self.gamma, dtype=np.float64).ravel()
        if g.size != d:
            raise InputError(f"gamma has {g.size} entries, features have {d}")
        self.P_out_ = g[:, None] * self.components_.T
        self.n_features_in_ = d
        return self

    def transform(self, X):
        check_is_fitted(self)
        X = check_array(X, dtype=np.float64)
        return (self.P_in_ @ X.T).T

    def inverse_transform(self, Z):
        check_is_fitted(self)
        Z = check_array(Z, dtype=np.float64)
        return (self.P_out_ @ Z.T).T


class PrunedTransformerClassifier(_TokenClassifier):
    """Calibrate, inject projections, train masks, binarize and fuse.

    ``estimator`` is a :class:`ToyTransformerClassifier`; it is fitted on the
    same data first unless it is already fitted.
    """

    def __init__(self, estimator=None, target_sparsity=0.5, T=None, calib_size=64, group_size=1,
                 stage1_epochs=1, stage2_epochs=3, lr=1e-3, mask_lr=0.1, lambda_lr=0.1,
                 batch_size=32, random_state=0):
        self.estimator = estimator
        self.target_sparsity = target_sparsity
        self.T = T
        self.calib_size = calib_size
        self.group_size = group_size
        self.stage1_epochs = stage1_epochs
        self.stage2_epochs = stage2_epochs
        self.lr = lr
        self.mask_lr = mask_lr
        self.lambda_lr = lambda_lr
        self.batch_size = batch_size
        self.random_state = random_state

    def fit(self, X, y):
        X, y = _tokens(X, y)
        base = self.estimator if self.estimator is not None else ToyTransformerClassifier(
            random_state=self.random_state)
        try:
            check_is_fitted(base)
        except NotFittedError:
            base = clone(base).fit(X, y)
        self.estimator_ = base
        self.classes_ = base.classes_
        codes = np.searchsorted(self.classes_, y)
        model = base.model_
        calib = X[: self.calib_size]
        T = self.T if self.T is not None else min(4 * model.config.d, calib.size)
        seed = int(self.random_state)
        features = collect(model, calib, T, seed=seed)
        projected = inject(model, features, self.group_size)
        schedule = Schedule(self.stage1_epochs, self.stage2_epochs, self.lr, self.mask_lr,
                            self.lambda_lr, self.batch_size, seed=seed)
        result = train_masks(projected, X, codes, self.target_sparsity, schedule)
        self.masks_ = binarize(result.masks, self.target_sparsity, model.config)
        self.projected_ = result.projected
        self.fused_ = fuse(result.projected, self.masks_)
        self.sparsity_ = expected_retained(self.masks_, model.config)
        self.size_ = size_report(self.fused_)
        self.history_ = result.history
        self.n_features_in_ = X.shape[1]
        return self

    def _logits(self, X):
        return fused_forward(self.fused_, X).T
