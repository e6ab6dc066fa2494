"""scikit-learn style wrapper around :class:`ArConvNet` training."""
import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import ShapeError
from .model import ArConvNet, default_config, tiny_config
from .train import evaluate, softmax, train_epochs

ARCHITECTURES = {"default": default_config, "tiny": tiny_config}


class ArConvNetClassifier(ClassifierMixin, BaseEstimator):
    """Image classifier on ``(N, H, W, 3)`` float arrays in ``[0, 1]``.

    ``score`` is the support-weighted accuracy, which for single-label
    data equals plain accuracy.
    """

    def __init__(self, arch="default", epochs=20, batch_size=32, learning_rate=1e-4,
                 random_state=0, dtype="float32"):
        self.arch = arch
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.random_state = random_state
        self.dtype = dtype

    def _check_X(self, X):
        X = np.asarray(X)
        if X.ndim != 4 or X.shape[-1] != 3:
            raise ShapeError(f"expected (N, H, W, 3) images, got {X.shape}")
        return X.astype(self.dtype, copy=False)

    def fit(self, X, y):
        if self.arch not in ARCHITECTURES:
            raise ValueError(f"arch must be one of {sorted(ARCHITECTURES)}")
        X = self._check_X(X)
        self.classes_, y_idx = np.unique(np.asarray(y), return_inverse=True)
        config = ARCHITECTURES[self.arch](classes=len(self.classes_))
        self.model_ = ArConvNet(config, seed=self.random_state, dtype=np.dtype(self.dtype))
        res = train_epochs(self.model_, X, y_idx, self.epochs, self.batch_size,
                           seed=self.random_state, lr=self.learning_rate)
        self.loss_curve_ = res.loss_curve
        self.n_iter_ = res.steps
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        return softmax(self.model_.predict_logits(self._check_X(X), self.batch_size).astype(np.float64))

    def predict(self, X):
        check_is_fitted(self, "model_")
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]

    def score(self, X, y, sample_weight=None):
        if sample_weight is not None:
            return super().score(X, y, sample_weight)
        check_is_fitted(self, "model_")
        idx = np.searchsorted(self.classes_, np.asarray(y))
        return evaluate(self.model_, self._check_X(X), idx, self.batch_size).weighted_accuracy
