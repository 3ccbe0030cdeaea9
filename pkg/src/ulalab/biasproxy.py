"""Bias proxy: a linear probe on a frozen pretrained encoder.

The probe is trained on target labels. Because a low-capacity head on top of
self-supervised features picks up the easiest (spurious) cue first, its
predictions stand in for the unobserved bias attribute. Calibrated with a
temperature, the probe also yields the soft confusion matrix
``p(y, y_bias)`` over the training set and from it the conditional
``p(y | y_bias)`` used for logit adjustment.
"""
import json
import os
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from ._train import encode, fit_linear_head
from ._validation import check_features, check_pair
from .exceptions import ConfigurationError, DivergenceError
from .numgrad import forward, load_checkpoint, predict_labels, save_checkpoint, softmax


@dataclass
class JointEstimate:
    """Soft confusion matrix ``joint[y, y_bias]`` and ``conditional[y, y_bias] = p(y | y_bias)``."""

    joint: np.ndarray
    conditional: np.ndarray
    alpha: float


def calibrated_conditional(logits, tau=1.0):
    """``softmax(logits / tau)`` row-wise."""
    if tau <= 0:
        raise ConfigurationError(f"temperature must be positive, got {tau}")
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    return softmax(logits / tau)


def proxy_predict(logits):
    """Proxy labels: argmax of the head logits, lowest index on ties."""
    return predict_labels(np.atleast_2d(logits))


def soft_confusion(probs, y, n_classes=None, hard=False):
    """Expected joint of true labels and proxy predictions over a training set.

    ``joint[k, j] = (1/N) * sum_i probs[i, j] * [y_i == k]``. With
    ``hard=True`` the probabilities are replaced by one-hot argmax
    predictions, which gives the ordinary normalised confusion matrix.
    """
    probs = np.asarray(probs, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if probs.ndim != 2 or probs.shape[0] != y.size or y.size == 0:
        raise ConfigurationError("probs must be N x K with one row per label")
    K = n_classes or probs.shape[1]
    if hard:
        probs = np.eye(probs.shape[1])[proxy_predict(probs)]
    joint = np.zeros((K, probs.shape[1]))
    np.add.at(joint, y, probs)
    return joint / y.size


def conditional_from_joint(joint, alpha=0.0):
    """``p(y | y_bias)`` with additive (Dirichlet) smoothing ``alpha``."""
    joint = np.asarray(joint, dtype=np.float64)
    if alpha < 0:
        raise ConfigurationError("alpha must be non-negative")
    col = joint.sum(axis=0, keepdims=True)
    if alpha == 0 and np.any(col <= 0):
        empty = np.flatnonzero(col[0] <= 0).tolist()
        raise ConfigurationError(f"proxy never predicts classes {empty}; use alpha > 0 to smooth")
    K = joint.shape[0]
    return (joint + alpha) / (col + K * alpha)


def default_alpha(K, n):
    return 1.0 / (K * n)


class BiasProxy(ClassifierMixin, BaseEstimator):
    """Linear head trained on target labels over a frozen encoder.

    Parameters
    ----------
    encoder : MlpModel or None
        Frozen feature extractor; None uses the raw inputs as features.
    T_stop : float
        Probe training budget in epochs (fractions allowed).
    tau : float
        Post-hoc calibration temperature for :meth:`predict_proba`; it does
        not influence training or :meth:`predict`.
    """

    def __init__(self, encoder=None, T_stop=10, lr=1e-3, weight_decay=0.0, batch_size=256,
                 tau=1.0, n_classes=None, random_state=0):
        self.encoder = encoder
        self.T_stop = T_stop
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.tau = tau
        self.n_classes = n_classes
        self.random_state = random_state

    def fit(self, X, y):
        if self.T_stop < 0:
            raise ConfigurationError("T_stop must be non-negative")
        X, y = check_pair(X, y, None if self.encoder is None else self.encoder.input_dim)
        K = self.n_classes or int(y.max()) + 1
        self.classes_ = np.arange(K)
        self.n_features_in_ = X.shape[1]
        features = encode(self.encoder, X)
        self.head_ = fit_linear_head(features, y, K, self.T_stop, self.lr, self.weight_decay,
                                     self.batch_size, self.random_state)
        if not np.isfinite(self.head_.params).all():
            raise DivergenceError("probe training produced non-finite parameters")
        return self

    def decision_function(self, X):
        check_is_fitted(self, "head_")
        X = check_features(X, self.n_features_in_)
        return forward(self.head_, encode(self.encoder, X).astype(self.head_.dtype))

    def predict(self, X):
        return proxy_predict(self.decision_function(X))

    def predict_proba(self, X):
        return calibrated_conditional(self.decision_function(X), self.tau)

    def soft_confusion(self, X, y, hard=False):
        X, y = check_pair(X, y)
        return soft_confusion(self.predict_proba(X), y, len(self.classes_), hard=hard)

    def joint_estimate(self, X, y, alpha=None):
        joint = self.soft_confusion(X, y)
        if alpha is None:
            alpha = default_alpha(len(self.classes_), len(y))
        return JointEstimate(joint, conditional_from_joint(joint, alpha), alpha)

    # -- artifact -----------------------------------------------------------

    def save(self, directory, encoder_ref=None):
        """Write the head checkpoint and a JSON manifest into ``directory``."""
        check_is_fitted(self, "head_")
        os.makedirs(directory, exist_ok=True)
        save_checkpoint(self.head_, os.path.join(directory, "head.ck"))
        if encoder_ref is None and self.encoder is not None:
            encoder_ref = "encoder.ck"
            save_checkpoint(self.encoder, os.path.join(directory, encoder_ref))
        manifest = {"encoder": encoder_ref, "head": "head.ck", "tau": self.tau, "T_stop": self.T_stop,
                    "n_classes": len(self.classes_), "lr": self.lr, "weight_decay": self.weight_decay,
                    "batch_size": self.batch_size, "random_state": self.random_state}
        with open(os.path.join(directory, "proxy.json"), "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, directory):
        with open(os.path.join(directory, "proxy.json")) as fh:
            m = json.load(fh)
        encoder = None
        if m["encoder"]:
            path = m["encoder"] if os.path.isabs(m["encoder"]) else os.path.join(directory, m["encoder"])
            encoder, _ = load_checkpoint(path)
        head, _ = load_checkpoint(os.path.join(directory, m["head"]))
        proxy = cls(encoder, m["T_stop"], m["lr"], m["weight_decay"], m["batch_size"], m["tau"],
                    m["n_classes"], m["random_state"])
        proxy.head_ = head
        proxy.classes_ = np.arange(m["n_classes"])
        proxy.n_features_in_ = head.input_dim if encoder is None else encoder.input_dim
        return proxy


def train_probe(encoder, X, y, T_stop, lr=1e-3, weight_decay=0.0, batch_size=256, tau=1.0,
                n_classes=None, seed=0):
    """Functional form of ``BiasProxy(...).fit(X, y)``."""
    return BiasProxy(encoder, T_stop, lr, weight_decay, batch_size, tau, n_classes, seed).fit(X, y)
