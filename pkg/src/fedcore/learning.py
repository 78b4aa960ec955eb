"""Small from-scratch classifiers trained by mini-batch SGD.

Parameters live in one flat vector ``theta`` so that federated averaging is a
plain weighted sum. Layouts (row-major blocks, in this order):

* logistic regression ``(d, C)``: ``W`` (C x d), ``b`` (C)
* one-hidden-layer perceptron ``(d, H, C)``: ``W1`` (H x d), ``b1`` (H),
  ``W2`` (C x H), ``b2`` (C); hidden activation is ``tanh``

The loss is mean multinomial cross-entropy plus ``0.5 * l2 * ||theta||^2``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .datasets import LabeledDataset
from .exceptions import ParameterError

__all__ = [
    "Arch",
    "ModelParams",
    "TrainConfig",
    "init_params",
    "logits",
    "loss_and_grad",
    "local_update",
    "predict",
    "evaluate_accuracy",
    "SoftmaxRegression",
    "PerceptronClassifier",
]


@dataclass(frozen=True)
class Arch:
    kind: str
    n_features: int
    n_classes: int
    hidden: int = 0

    def __post_init__(self):
        if self.kind not in ("logistic", "mlp"):
            raise ParameterError(f"unknown architecture {self.kind!r}")
        if self.n_features < 1 or self.n_classes < 2:
            raise ParameterError("architecture needs n_features >= 1 and n_classes >= 2")
        if self.kind == "mlp" and self.hidden < 1:
            raise ParameterError("mlp needs hidden >= 1")

    @classmethod
    def logistic(cls, d, C):
        return cls("logistic", d, C)

    @classmethod
    def mlp(cls, d, hidden, C):
        return cls("mlp", d, C, hidden)

    @property
    def n_params(self):
        d, C, H = self.n_features, self.n_classes, self.hidden
        if self.kind == "logistic":
            return C * d + C
        return H * d + H + C * H + C


@dataclass(frozen=True)
class ModelParams:
    arch: Arch
    theta: np.ndarray

    def __post_init__(self):
        theta = np.array(self.theta, dtype=float).reshape(-1)
        if theta.shape[0] != self.arch.n_params:
            raise ParameterError(f"theta has {theta.shape[0]} entries, {self.arch} needs {self.arch.n_params}")
        if not np.all(np.isfinite(theta)):
            raise ParameterError("theta contains NaN or Inf")
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)

    def with_theta(self, theta):
        return ModelParams(self.arch, theta)

    def to_json(self):
        a = self.arch
        return json.dumps(
            {"arch": {"kind": a.kind, "n_features": a.n_features, "n_classes": a.n_classes, "hidden": a.hidden},
             "theta": self.theta.tolist()}
        )

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(Arch(**d["arch"]), np.array(d["theta"], dtype=float))

    def to_bytes(self):
        """Little-endian float64 theta, no header (the arch travels separately)."""
        return self.theta.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, arch, raw):
        return cls(arch, np.frombuffer(raw, dtype="<f8"))


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    local_epochs: int = 1
    learning_rate: float = 0.1
    l2: float = 0.0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ParameterError("batch_size must be >= 1")
        if self.local_epochs < 0:
            raise ParameterError("local_epochs must be >= 0")
        # zero is allowed: it makes local_update an exact identity
        if not self.learning_rate >= 0:
            raise ParameterError("learning_rate must be non-negative")
        if self.l2 < 0:
            raise ParameterError("l2 must be non-negative")


def init_params(arch, seed=0):
    """Zeros for logistic regression; U(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights for the MLP."""
    if arch.kind == "logistic":
        return ModelParams(arch, np.zeros(arch.n_params))
    rng = np.random.default_rng(seed)
    d, H, C = arch.n_features, arch.hidden, arch.n_classes
    W1 = rng.uniform(-1, 1, size=H * d) / np.sqrt(d)
    W2 = rng.uniform(-1, 1, size=C * H) / np.sqrt(H)
    return ModelParams(arch, np.concatenate([W1, np.zeros(H), W2, np.zeros(C)]))


def _unpack(arch, theta):
    d, C, H = arch.n_features, arch.n_classes, arch.hidden
    if arch.kind == "logistic":
        return theta[: C * d].reshape(C, d), theta[C * d :]
    o = 0
    W1 = theta[o : o + H * d].reshape(H, d)
    o += H * d
    b1 = theta[o : o + H]
    o += H
    W2 = theta[o : o + C * H].reshape(C, H)
    o += C * H
    return W1, b1, W2, theta[o:]


def _check_dims(params, X):
    if X.ndim != 2 or X.shape[1] != params.arch.n_features:
        raise ParameterError(f"expected {params.arch.n_features} features, got shape {X.shape}")


def logits(params, X):
    X = np.asarray(X, dtype=float)
    _check_dims(params, X)
    if params.arch.kind == "logistic":
        W, b = _unpack(params.arch, params.theta)
        return X @ W.T + b
    W1, b1, W2, b2 = _unpack(params.arch, params.theta)
    return np.tanh(X @ W1.T + b1) @ W2.T + b2


def _log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def loss_and_grad(params, X, y, l2=0.0):
    """Mean cross-entropy (+ L2) and its gradient with respect to ``theta``."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=np.int64)
    _check_dims(params, X)
    arch, theta = params.arch, params.theta
    B = X.shape[0]
    if arch.kind == "logistic":
        W, b = _unpack(arch, theta)
        z = X @ W.T + b
    else:
        W1, b1, W2, b2 = _unpack(arch, theta)
        a = np.tanh(X @ W1.T + b1)
        z = a @ W2.T + b2
    logp = _log_softmax(z)
    loss = -logp[np.arange(B), y].mean() + 0.5 * l2 * theta @ theta
    dz = np.exp(logp)
    dz[np.arange(B), y] -= 1.0
    dz /= B
    if arch.kind == "logistic":
        grad = np.concatenate([(dz.T @ X).ravel(), dz.sum(axis=0)])
    else:
        da = (dz @ W2) * (1.0 - a * a)
        grad = np.concatenate([(da.T @ X).ravel(), da.sum(axis=0), (dz.T @ a).ravel(), dz.sum(axis=0)])
    return float(loss), grad + l2 * theta


def local_update(params, data, cfg, seed=0):
    """``cfg.local_epochs`` passes of mini-batch SGD over ``data``.

    Batches of ``cfg.batch_size`` (the last may be smaller) are drawn from a
    fresh permutation each epoch. Empty data returns ``params`` unchanged.
    """
    if len(data) == 0 or cfg.local_epochs == 0 or cfg.learning_rate == 0:
        if len(data):
            _check_dims(params, data.features)
        return params
    X, y = data.features, data.labels
    _check_dims(params, X)
    if y.max() >= params.arch.n_classes:
        raise ParameterError("labels exceed the model's class count")
    rng = np.random.default_rng(seed)
    theta = params.theta.copy()
    cur = params
    for _ in range(cfg.local_epochs):
        order = rng.permutation(len(y))
        for start in range(0, len(y), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            _, g = loss_and_grad(cur, X[idx], y[idx], cfg.l2)
            theta = theta - cfg.learning_rate * g
            cur = params.with_theta(theta)
    return cur


def predict(params, X):
    """Argmax class; ties go to the lowest class id."""
    return np.argmax(logits(params, X), axis=1)


def evaluate_accuracy(params, test):
    if len(test) == 0:
        raise ParameterError("cannot evaluate accuracy on an empty test set")
    return float(np.mean(predict(params, test.features) == test.labels))


def check_n_features(est, X):
    if X.shape[1] != est.n_features_in_:
        raise ValueError(
            f"X has {X.shape[1]} features, but {type(est).__name__} is expecting {est.n_features_in_} features as input"
        )
    return X


class _SGDClassifierBase(ClassifierMixin, BaseEstimator):
    def _arch(self, d, C):
        raise NotImplementedError

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        self.classes_ = unique_labels(y)
        if len(self.classes_) < 2:
            raise ValueError("need samples of at least two classes; got 1 class")
        y_idx = np.searchsorted(self.classes_, y)
        self.n_features_in_ = X.shape[1]
        arch = self._arch(X.shape[1], len(self.classes_))
        cfg = TrainConfig(self.batch_size, self.epochs, self.learning_rate, self.l2)
        data = LabeledDataset(X, y_idx, len(self.classes_))
        self.params_ = local_update(init_params(arch, self.random_state), data, cfg, self.random_state)
        return self

    def _scores(self, X):
        check_is_fitted(self, "params_")
        return logits(self.params_, check_n_features(self, check_array(X)))

    def decision_function(self, X):
        """Class scores; for two classes the margin of ``classes_[1]`` over ``classes_[0]``."""
        z = self._scores(X)
        return z[:, 1] - z[:, 0] if z.shape[1] == 2 else z

    def predict_proba(self, X):
        return np.exp(_log_softmax(self._scores(X)))

    def predict(self, X):
        scores = self._scores(X)
        return self.classes_[np.argmax(scores, axis=1)]


class SoftmaxRegression(_SGDClassifierBase):
    """Multinomial logistic regression trained with mini-batch SGD."""

    def __init__(self, batch_size=32, epochs=20, learning_rate=0.1, l2=0.0, random_state=0):
        self.batch_size = batch_size
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.l2 = l2
        self.random_state = random_state

    def _arch(self, d, C):
        return Arch.logistic(d, C)


class PerceptronClassifier(_SGDClassifierBase):
    """One-hidden-layer tanh network trained with mini-batch SGD."""

    def __init__(self, hidden=16, batch_size=32, epochs=20, learning_rate=0.1, l2=0.0, random_state=0):
        self.hidden = hidden
        self.batch_size = batch_size
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.l2 = l2
        self.random_state = random_state

    def _arch(self, d, C):
        return Arch.mlp(d, self.hidden, C)
