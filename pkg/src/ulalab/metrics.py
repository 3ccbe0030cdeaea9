"""Group-robust evaluation and bias-unsupervised validation scores."""
import csv
import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigurationError

log = logging.getLogger(__name__)


def _predictions(predictor, X):
    """Accept an estimator, a callable or a precomputed label array."""
    if hasattr(predictor, "predict"):
        return np.asarray(predictor.predict(X))
    if callable(predictor):
        return np.asarray(predictor(X))
    pred = np.asarray(predictor)
    if pred.shape != (len(X),):
        raise ConfigurationError("precomputed predictions do not match the dataset length")
    return pred


def _exact_mean(values):
    # correctly rounded sum, so relabelling the cells cannot change the result
    return math.fsum(values.ravel()) / values.size


@dataclass
class GroupReport:
    per_group_acc: np.ndarray
    counts: np.ndarray
    balanced: float
    worst: float
    iid: float
    empty_cells: list = field(default_factory=list)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["y", "z", "count", "accuracy"])
            for (y, z), n in np.ndenumerate(self.counts):
                acc = "" if n == 0 else f"{self.per_group_acc[y, z]:.6f}"
                w.writerow([y, z, int(n), acc])
            w.writerow(["summary", "", int(self.counts.sum()), ""])
            w.writerow(["balanced", "", "", f"{self.balanced:.6f}"])
            w.writerow(["worst", "", "", f"{self.worst:.6f}"])
            w.writerow(["iid", "", "", f"{self.iid:.6f}"])


def cell_accuracies(pred, y, groups, n_rows, n_cols):
    """Per-cell accuracy table (0 where empty) and the per-cell counts."""
    counts = np.zeros((n_rows, n_cols))
    hits = np.zeros((n_rows, n_cols))
    np.add.at(counts, (y, groups), 1.0)
    np.add.at(hits, (y, groups), (pred == y).astype(float))
    acc = np.divide(hits, counts, out=np.zeros_like(hits), where=counts > 0)
    return acc, counts


def group_balanced_accuracy(predictor, test):
    """Mean of per-(y, z) accuracies on a dataset carrying the hidden attribute.

    This is an evaluation-only path: it is the one place (besides the
    bias-supervised baseline) where ``z`` is read.
    """
    if len(test) == 0:
        raise ConfigurationError("empty test set")
    pred = _predictions(predictor, test.X)
    acc, counts = cell_accuracies(pred, test.y, test.z, test.K, test.L)
    nonempty = counts > 0
    empty = [tuple(int(i) for i in c) for c in np.argwhere(~nonempty)]
    return GroupReport(acc, counts, _exact_mean(acc[nonempty]), float(acc[nonempty].min()),
                       float(np.mean(pred == test.y)), empty)


@dataclass
class ValidationPartition:
    """Cells ``S[y, y_bias]`` of a validation set, as index arrays."""

    cells: dict
    counts: np.ndarray

    @classmethod
    def build(cls, y, bias_pred, n_classes):
        y = np.asarray(y)
        bias_pred = np.asarray(bias_pred)
        cells = {}
        counts = np.zeros((n_classes, n_classes), dtype=np.int64)
        for a, b in itertools.product(range(n_classes), repeat=2):
            idx = np.flatnonzero((y == a) & (bias_pred == b))
            cells[(a, b)] = idx
            counts[a, b] = idx.size
        return cls(cells, counts)


def _proxy_cells(predictor, proxy, X, y, bias_pred, min_count):
    y = np.asarray(y)
    if y.size == 0:
        raise ConfigurationError("empty validation set")
    if bias_pred is None:
        bias_pred = proxy.predict(X)
    K = int(max(y.max(), np.max(bias_pred))) + 1
    if proxy is not None and hasattr(proxy, "classes_"):
        K = max(K, len(proxy.classes_))
    pred = _predictions(predictor, X)
    acc, counts = cell_accuracies(pred, y, np.asarray(bias_pred), K, K)
    keep = counts >= max(min_count, 1)
    dropped = int(((counts > 0) & ~keep).sum())
    if dropped:
        log.info("excluded %d validation cells with fewer than %d samples", dropped, min_count)
    if keep.sum() == 1:
        log.warning("only one non-empty validation cell; the score is degenerate")
    if not keep.any():
        raise ConfigurationError("no validation cell reaches min_count")
    return acc[keep]


def unsupervised_balanced_val(predictor, proxy, X, y, min_count=1, bias_pred=None):
    """Balanced accuracy over cells of (true label, proxy prediction).

    Only cells holding at least ``min_count`` samples are averaged.
    ``bias_pred`` may be passed to reuse proxy predictions.
    """
    return _exact_mean(_proxy_cells(predictor, proxy, X, y, bias_pred, min_count))


def unsupervised_worst_group_val(predictor, proxy, X, y, min_count=1, bias_pred=None):
    """Minimum accuracy over the same cells as :func:`unsupervised_balanced_val`."""
    return float(_proxy_cells(predictor, proxy, X, y, bias_pred, min_count).min())


def pearson(xs, ys):
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.size != ys.size or xs.size < 3:
        raise ConfigurationError("pearson needs at least three paired points")
    dx = xs - xs.mean()
    dy = ys - ys.mean()
    sx = np.sqrt(np.sum(dx * dx))
    sy = np.sqrt(np.sum(dy * dy))
    if sx == 0 or sy == 0:
        raise ConfigurationError("pearson is undefined for zero-variance inputs")
    return float(np.clip(np.sum(dx * dy) / (sx * sy), -1.0, 1.0))


# ---------------------------------------------------------------------------
# enumerable toy problems


@dataclass
class EnumerableToy:
    """Joint ``p_data(x, y, z)`` over a finite input space, shape (|X|, K, L)."""

    p_xyz: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.p_xyz, dtype=np.float64)
        if p.ndim != 3 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ConfigurationError("toy joint must be a non-negative (|X|, K, L) array summing to 1")
        self.p_xyz = p

    @property
    def shape(self):
        return self.p_xyz.shape

    def p_yz(self):
        return self.p_xyz.sum(axis=0)

    def p_x_given_yz(self):
        """Mechanism ``p(x | y, z)``, identical under training and test distributions."""
        pyz = self.p_yz()
        if np.any(pyz <= 0):
            raise ConfigurationError("every (y, z) group needs positive mass")
        return self.p_xyz / pyz[None]

    def p_y_given_z(self):
        pyz = self.p_yz()
        return pyz / pyz.sum(axis=0, keepdims=True)


def exact_group_balanced_accuracy(toy, classifier):
    """Balanced accuracy of a table ``classifier[x] -> y`` under the uniform-group test law."""
    mech = toy.p_x_given_yz()
    n_x, K, L = toy.shape
    correct = (np.asarray(classifier)[:, None] == np.arange(K)[None, :]).astype(float)
    return float(np.einsum("xyz,xy->", mech, correct) / (K * L))


def exact_multilabel_balanced_accuracy(toy, pair_classifier):
    """Balanced accuracy of a table ``x -> (y, z)`` over all K*L groups."""
    mech = toy.p_x_given_yz()
    n_x, K, L = toy.shape
    ys, zs = np.asarray(pair_classifier).T
    total = sum(mech[x, ys[x], zs[x]] for x in range(n_x))
    return float(total / (K * L))


def factorized_scorer(toy, h):
    """Product-form scores ``exp(h(x)_y) * C(z, x)`` of the logit-adjusted model.

    ``C(z, x) = p(z | x) p(x) / (Z(z, x) p(z))`` with
    ``Z(z, x) = sum_y exp(h(x)_y + log p(y | z))``. Returns (|X|, K, L).
    """
    h = np.asarray(h, dtype=np.float64)
    p_x = toy.p_xyz.sum(axis=(1, 2))
    p_z = toy.p_yz().sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        p_z_given_x = np.where(p_x[:, None] > 0, toy.p_xyz.sum(axis=1) / p_x[:, None], 0.0)
    shift = h.max(axis=1, keepdims=True)
    e = np.exp(h - shift)
    Z = e @ toy.p_y_given_z()
    C = p_z_given_x * p_x[:, None] / (Z * p_z[None, :])
    return e[:, :, None] * C[:, None, :]


def argmax_pairs(scores):
    """Flat argmax over (y, z) per x with lowest-index tie-breaking; returns (|X|, 2)."""
    n_x, K, L = scores.shape
    flat = np.argmax(scores.reshape(n_x, K * L), axis=1)
    return np.stack([flat // L, flat % L], axis=1)


def oracle_bayes_toy(toy):
    """Classifier table maximising the group-balanced accuracy, and that accuracy.

    The balanced accuracy is a sum over ``x`` of ``sum_z p(x | c(x), z)``, so
    the optimum picks ``argmax_y sum_z p(x | y, z)`` independently per ``x``.
    """
    mech = toy.p_x_given_yz()
    table = np.argmax(mech.sum(axis=2), axis=1)
    return table, exact_group_balanced_accuracy(toy, table)


def brute_force_best_table(toy):
    """Exhaustive search over all ``K ** |X|`` classifier tables (small toys only)."""
    n_x, K, _ = toy.shape
    if K ** n_x > 2 ** 20:
        raise ConfigurationError("too many classifier tables for exhaustive search")
    best, best_acc = None, -1.0
    for table in itertools.product(range(K), repeat=n_x):
        acc = exact_group_balanced_accuracy(toy, table)
        if acc > best_acc + 1e-15:
            best, best_acc = np.array(table), acc
    return best, best_acc
