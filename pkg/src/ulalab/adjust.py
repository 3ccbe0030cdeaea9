"""Logit-adjusted training of the debiased classifier.

During training the logits of ``h(x)`` are shifted by ``eta * log p(y | b)``
where ``b`` is either the true bias attribute (``sla``) or the prediction of
a frozen bias proxy (``ula``); ``erm`` uses no shift. Inference always uses
the raw logits. A checkpoint is scored at the end of every epoch and the best
one (earliest on ties) is kept.
"""
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from ._train import encode, minibatches, steps_per_epoch
from ._validation import check_features, check_pair, check_targets
from .biasproxy import conditional_from_joint
from .exceptions import ConfigurationError, DivergenceError
from .metrics import unsupervised_balanced_val, unsupervised_worst_group_val
from .numgrad import (LrSchedule, MlpModel, OptimState, adamw_step, backward,
                      ce_loss_with_offset, forward, lr_at, predict_labels)
from .rng import substream

log = logging.getLogger(__name__)

MODES = ("erm", "sla", "ula")
VALIDATORS = ("balanced", "worst", "iid", "last")
DIVERGENCE_LOSS = 1e3


@dataclass
class AdjustSpec:
    mode: str = "ula"
    eta: float = 1.0
    log_floor: float = -30.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}")
        if self.eta < 0:
            raise ConfigurationError("eta must be non-negative")
        if self.log_floor >= 0:
            raise ConfigurationError("log_floor must be negative")


def _clamped_log(p, log_floor):
    with np.errstate(divide="ignore"):
        return np.maximum(np.log(p), log_floor)


def sla_offsets(y_given_z, z, log_floor=-30.0):
    """``max(log p(y | z), log_floor)`` for every class ``y``."""
    y_given_z = np.asarray(y_given_z, dtype=np.float64)
    if not 0 <= z < y_given_z.shape[1]:
        raise ConfigurationError(f"bias value {z} out of range [0, {y_given_z.shape[1]})")
    return _clamped_log(y_given_z[:, z], log_floor)


def ula_offsets(joint_estimate, y_bias_hat, eta, log_floor=-30.0):
    """``eta * max(log p(y | y_bias_hat), log_floor)``; all zeros when ``eta == 0``."""
    cond = joint_estimate.conditional
    if eta == 0:
        return np.zeros(cond.shape[0])
    return eta * _clamped_log(cond[:, y_bias_hat], log_floor)


def offset_table(conditional, eta, log_floor=-30.0):
    """Row ``b`` holds the K offsets applied to samples whose bias value is ``b``."""
    conditional = np.asarray(conditional, dtype=np.float64)
    if eta == 0:
        return np.zeros(conditional.T.shape)
    return eta * _clamped_log(conditional, log_floor).T


def group_conditional(y, z, K, L, alpha=0.0):
    """Empirical ``p(y | z)`` (K x L) from labelled groups."""
    counts = np.zeros((K, L))
    np.add.at(counts, (y, z), 1.0)
    return conditional_from_joint(counts / counts.sum(), alpha)


@dataclass
class FinetuneResult:
    model: MlpModel
    best_epoch: int
    best_score: float
    curve: list = field(default_factory=list)
    status: str = "ok"
    message: str = ""


def finetune(model, X, y, offsets=None, validate=None, lr=1e-3, weight_decay=0.0, max_epochs=30,
             batch_size=256, seed=0, iid_valid=None):
    """Minimise the offset cross-entropy; keep the best checkpoint by ``validate``.

    ``offsets`` is an N x K array aligned with ``X`` (None for plain ERM).
    ``validate(model) -> float`` is evaluated on the initial model and after
    every epoch. ``iid_valid`` optionally gives ``(X_valid, y_valid)`` for the
    i.i.d. accuracy column of the curve. Divergence ends training with
    ``status == "failed"`` instead of raising.
    """
    model = model.copy()
    n = X.shape[0]
    if offsets is not None:
        offsets = np.asarray(offsets, dtype=model.dtype)
        if offsets.shape != (n, model.output_dim):
            raise ConfigurationError(f"offsets must be {n} x {model.output_dim}")
    validate = validate or (lambda m: 0.0)

    def iid_acc(m):
        if iid_valid is None:
            return float("nan")
        return float(np.mean(predict_labels(forward(m, iid_valid[0])) == iid_valid[1]))

    score = validate(model)
    best = FinetuneResult(model.copy(), 0, score)
    best.curve.append({"epoch": 0, "train_loss": float("nan"), "val_score": score, "iid_val_acc": iid_acc(model)})
    if max_epochs == 0:
        return best

    state = OptimState.for_model(model, lr, weight_decay)
    sched = LrSchedule(lr, max_epochs * steps_per_epoch(n, batch_size))
    rng = substream(seed, "shuffle", "finetune")
    step = 0
    for epoch in range(1, max_epochs + 1):
        total, seen = 0.0, 0
        try:
            for idx in minibatches(n, batch_size, rng):
                logits, ctx = forward(model, X[idx], return_context=True)
                loss, dlogits = ce_loss_with_offset(logits, None if offsets is None else offsets[idx], y[idx])
                if not math.isfinite(loss) or loss > DIVERGENCE_LOSS:
                    raise DivergenceError(f"loss {loss:.4g} at epoch {epoch}, step {step}")
                adamw_step(model, state, backward(model, ctx, dlogits), lr_at(sched, step))
                step += 1
                total += loss * idx.size
                seen += idx.size
        except DivergenceError as exc:
            log.warning("finetuning diverged: %s", exc)
            best.status, best.message = "failed", str(exc)
            return best
        score = validate(model)
        best.curve.append({"epoch": epoch, "train_loss": total / seen, "val_score": score,
                           "iid_val_acc": iid_acc(model)})
        if score > best.best_score:
            best.model, best.best_epoch, best.best_score = model.copy(), epoch, score
    return best


def predict_debiased(model, X):
    """Predictions from the raw logits; no adjustment is applied at inference."""
    return predict_labels(forward(model, np.asarray(X, dtype=model.dtype)))


def write_curve(curve, path):
    import csv
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, ["epoch", "train_loss", "val_score", "iid_val_acc"])
        w.writeheader()
        for row in curve:
            w.writerow(row)


class LogitAdjustedClassifier(ClassifierMixin, BaseEstimator):
    """Debiased classifier trained with logit adjustment.

    Parameters
    ----------
    mode : {"erm", "sla", "ula"}
        ``sla`` needs ``bias=`` in :meth:`fit`; ``ula`` needs ``proxy=``.
    eta : float
        Adjustment strength; 0 is plain ERM.
    encoder : MlpModel or None
        Pretrained initialisation of the feature layers. When None a fresh
        network with ``hidden`` layers is used.
    head_only : bool
        Keep the encoder frozen and train only the linear head.
    validator : {"balanced", "worst", "iid", "last"}
        Checkpoint selection rule. The first two use cells of
        (label, proxy prediction) and require a proxy; without one they fall
        back to i.i.d. validation accuracy.
    """

    def __init__(self, mode="ula", eta=1.0, encoder=None, hidden=(256, 128), lr=1e-3,
                 weight_decay=1e-4, max_epochs=30, batch_size=256, log_floor=-30.0, alpha=None,
                 head_only=False, validator="balanced", min_count=1, n_classes=None,
                 random_state=0):
        self.mode = mode
        self.eta = eta
        self.encoder = encoder
        self.hidden = hidden
        self.lr = lr
        self.weight_decay = weight_decay
        self.max_epochs = max_epochs
        self.batch_size = batch_size
        self.log_floor = log_floor
        self.alpha = alpha
        self.head_only = head_only
        self.validator = validator
        self.min_count = min_count
        self.n_classes = n_classes
        self.random_state = random_state

    def _init_model(self, n_features, K):
        init_seed = substream(self.random_state, "init", "debiased").integers(2**31)
        if self.encoder is None:
            return None, MlpModel.initialize((n_features,) + tuple(self.hidden) + (K,),
                                             seed=init_seed, dtype=np.float32)
        head = MlpModel.initialize([self.encoder.output_dim, K], ["identity"], seed=init_seed,
                                   dtype=self.encoder.dtype)
        return self.encoder.copy(), head

    def _offsets(self, X, y, K, proxy, bias):
        spec = AdjustSpec(self.mode, self.eta, self.log_floor)
        self.joint_ = None
        if spec.mode == "erm":
            return None
        if spec.mode == "sla":
            if bias is None:
                raise ConfigurationError("mode='sla' needs the bias attribute (bias=...)")
            bias = check_targets(bias)
            L = int(bias.max()) + 1
            alpha = 0.0 if self.alpha is None else self.alpha
            cond = group_conditional(y, bias, K, L, alpha)
            self.conditional_ = cond
            return offset_table(cond, spec.eta, spec.log_floor)[bias]
        if proxy is None:
            raise ConfigurationError("mode='ula' needs a fitted bias proxy (proxy=...)")
        je = proxy.joint_estimate(X, y, self.alpha)
        self.joint_ = je
        self.conditional_ = je.conditional
        return offset_table(je.conditional, spec.eta, spec.log_floor)[proxy.predict(X)]

    def _validator(self, proxy, X_valid, y_valid):
        kind = self.validator
        if kind not in VALIDATORS:
            raise ConfigurationError(f"validator must be one of {VALIDATORS}")
        if X_valid is None or kind == "last":
            self.validator_used_ = "last"
            return None
        if kind in ("balanced", "worst") and proxy is None:
            log.info("no bias proxy available; selecting checkpoints by i.i.d. validation accuracy")
            kind = "iid"
        self.validator_used_ = kind
        if kind == "iid":
            return lambda m: float(np.mean(predict_debiased(m, X_valid) == y_valid))
        bias_pred = proxy.predict(X_valid)
        score = unsupervised_balanced_val if kind == "balanced" else unsupervised_worst_group_val
        return lambda m: score(predict_debiased(m, X_valid), None, X_valid, y_valid,
                               self.min_count, bias_pred)

    def fit(self, X, y, proxy=None, bias=None, X_valid=None, y_valid=None):
        X, y = check_pair(X, y)
        K = self.n_classes or int(y.max()) + 1
        self.classes_ = np.arange(K)
        self.n_features_in_ = X.shape[1]
        if X_valid is not None:
            X_valid, y_valid = check_pair(X_valid, y_valid, X.shape[1])
        offsets = self._offsets(X, y, K, proxy, bias)
        validate = self._validator(proxy, X_valid, y_valid)
        if validate is None:
            # strictly increasing scores make the final epoch the selected one
            counter = iter(range(10**9))
            validate = lambda m: float(next(counter))

        encoder, head = self._init_model(X.shape[1], K)
        iid = None if X_valid is None else (X_valid, y_valid)
        kwargs = dict(lr=self.lr, weight_decay=self.weight_decay, max_epochs=self.max_epochs,
                      batch_size=self.batch_size, seed=self.random_state)
        if encoder is None:
            result = finetune(head, X, y, offsets, validate, iid_valid=iid, **kwargs)
        elif self.head_only:
            feats = encode(encoder, X)
            iid_f = None if iid is None else (encode(encoder, X_valid), y_valid)
            result = finetune(head, feats, y, offsets, lambda h: validate(encoder.stack(h)),
                              iid_valid=iid_f, **kwargs)
            result.model = encoder.stack(result.model)
        else:
            result = finetune(encoder.stack(head), X, y, offsets, validate, iid_valid=iid, **kwargs)
        self.model_ = result.model
        self.best_epoch_ = result.best_epoch
        self.best_score_ = result.best_score
        self.curve_ = result.curve
        self.status_ = result.status
        self.message_ = result.message
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        X = check_features(X, self.n_features_in_)
        return forward(self.model_, X.astype(self.model_.dtype, copy=False))

    def predict(self, X):
        return predict_labels(self.decision_function(X))
