"""Input validation helpers for the estimator API."""
import numpy as np
from sklearn.utils.validation import check_array, column_or_1d

from .exceptions import ConfigurationError


def check_features(X, n_features=None, dtype=np.float32):
    X = check_array(X, dtype=dtype, ensure_2d=True, ensure_all_finite=True)
    if n_features is not None and X.shape[1] != n_features:
        raise ConfigurationError(f"expected {n_features} features, got {X.shape[1]}")
    return X


def check_targets(y, n_classes=None):
    y = column_or_1d(y)
    if y.size and not np.all(np.equal(np.mod(y, 1), 0)):
        raise ConfigurationError("labels must be integers")
    y = y.astype(np.int64)
    if y.size and y.min() < 0:
        raise ConfigurationError("labels must be non-negative")
    if n_classes is not None and y.size and y.max() >= n_classes:
        raise ConfigurationError(f"labels must lie in [0, {n_classes})")
    return y


def check_pair(X, y, n_features=None, n_classes=None):
    X = check_features(X, n_features)
    y = check_targets(y, n_classes)
    if X.shape[0] != y.size:
        raise ConfigurationError(f"X has {X.shape[0]} rows but y has {y.size} labels")
    return X, y
