"""Contrastive pretraining of the base encoder.

Two augmented views of every image are embedded by ``encoder -> projector``
and L2-normalised; each query is contrasted against its own positive key and
all other keys of the batch (plus an optional queue of past keys). Keys are
treated as constants, so gradients reach the network only through queries;
by default both views take a turn as queries.
"""
import logging
from dataclasses import asdict, dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._train import encode, fit_linear_head, steps_per_epoch
from ._validation import check_features, check_targets
from .exceptions import CollapseError, ConfigurationError
from .numgrad import (LrSchedule, MlpModel, OptimState, adamw_step, backward,
                      forward, log_softmax, lr_at, predict_labels)
from .rng import substream
from .synthdata import IMAGE_SHAPE

log = logging.getLogger(__name__)

NORM_TOL = 1e-6


@dataclass
class AugConfig:
    crop_min_scale: float = 0.6
    tint_jitter: float = 0.3
    gray_prob: float = 0.3
    noise_std: float = 0.05
    flip_prob: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.crop_min_scale <= 1.0:
            raise ConfigurationError("crop_min_scale must lie in (0, 1]")
        if self.tint_jitter < 0 or self.noise_std < 0:
            raise ConfigurationError("tint_jitter and noise_std must be non-negative")
        for name in ("gray_prob", "flip_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigurationError(f"{name} must lie in [0, 1]")

    @classmethod
    def identity(cls):
        return cls(crop_min_scale=1.0, tint_jitter=0.0, gray_prob=0.0, noise_std=0.0, flip_prob=0.0)


@dataclass
class SslConfig:
    proj_dim: int = 64
    proj_hidden: int = 128
    temperature: float = 0.1
    epochs: int = 20
    batch: int = 256
    lr: float = 1e-3
    weight_decay: float = 1e-4
    checkpoint_every: int = 5
    use_momentum_encoder: bool = False
    momentum: float = 0.99
    queue_size: int = 0
    symmetric: bool = True

    def __post_init__(self):
        if self.proj_dim < 2:
            raise ConfigurationError("proj_dim must be at least 2")
        if self.temperature <= 0:
            raise ConfigurationError("temperature must be positive")
        if self.checkpoint_every < 1 or self.epochs < 0 or self.batch < 2:
            raise ConfigurationError("invalid epochs / batch / checkpoint cadence")
        if not 0.0 <= self.momentum < 1.0 or self.queue_size < 0:
            raise ConfigurationError("momentum must lie in [0, 1) and queue_size >= 0")


# ---------------------------------------------------------------------------
# loss


def _check_unit(name, v):
    norms = np.linalg.norm(np.atleast_2d(v), axis=1)
    if np.any(np.abs(norms - 1.0) > NORM_TOL):
        raise ConfigurationError(f"{name} must be L2-normalised (norms {norms.min():.6g}..{norms.max():.6g})")


def infonce_loss(q, k_pos, negatives, temperature):
    """InfoNCE for one query; returns ``(loss, dloss/dq)``.

    Keys are constants (no gradient is returned for them).
    """
    q = np.asarray(q, dtype=np.float64)
    k_pos = np.asarray(k_pos, dtype=np.float64)
    negatives = np.atleast_2d(np.asarray(negatives, dtype=np.float64))
    if negatives.shape[0] < 1:
        raise ConfigurationError("need at least one negative")
    _check_unit("q", q)
    _check_unit("k_pos", k_pos)
    _check_unit("negatives", negatives)
    keys = np.vstack([k_pos, negatives])
    logits = keys @ q / temperature
    logp = log_softmax(logits[None, :])[0]
    p = np.exp(logp)
    p[0] -= 1.0
    return float(-logp[0]), keys.T @ p / temperature


def infonce_batch(queries, keys, temperature, extra_negatives=None):
    """Mean InfoNCE where row ``i`` of ``keys`` is the positive of query ``i``.

    Every other key (and every row of ``extra_negatives``) is a negative.
    Returns ``(loss, dloss/dqueries)``.
    """
    bank = keys if extra_negatives is None or len(extra_negatives) == 0 else np.vstack([keys, extra_negatives])
    logits = queries @ bank.T / temperature
    B = queries.shape[0]
    logp = log_softmax(logits)
    rows = np.arange(B)
    loss = float(-logp[rows, rows].mean())
    d = np.exp(logp)
    d[rows, rows] -= 1.0
    d /= B
    return loss, (d @ bank) / temperature


def l2_normalize(v):
    norm = np.linalg.norm(v, axis=1, keepdims=True)
    return v / norm, norm


def l2_normalize_backward(u, norm, du):
    """Adjoint of ``u = v / |v|`` row-wise."""
    return (du - u * np.sum(u * du, axis=1, keepdims=True)) / norm


# ---------------------------------------------------------------------------
# augmentations


def _random_resized_crop(imgs, min_scale, rng):
    n, H, W, _ = imgs.shape
    scale = rng.uniform(min_scale, 1.0, size=n)
    ratio = np.exp(rng.uniform(np.log(3 / 4), np.log(4 / 3), size=n))
    h = np.minimum(np.sqrt(scale / ratio) * H, H)
    w = np.minimum(np.sqrt(scale * ratio) * W, W)
    top = rng.uniform(0, 1, size=n) * (H - h)
    left = rng.uniform(0, 1, size=n) * (W - w)
    grid = np.arange(H) + 0.5
    ys = top[:, None] + grid[None, :] * (h[:, None] / H) - 0.5
    xs = left[:, None] + (np.arange(W) + 0.5)[None, :] * (w[:, None] / W) - 0.5
    ys = np.clip(ys, 0, H - 1)
    xs = np.clip(xs, 0, W - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    wy = (ys - y0)[:, :, None, None]
    wx = (xs - x0)[:, None, :, None]
    b = np.arange(n)[:, None, None]

    def gather(yi, xi):
        return imgs[b, yi[:, :, None], xi[:, None, :]]

    top_row = gather(y0, x0) * (1 - wx) + gather(y0, x1) * wx
    bot_row = gather(y1, x0) * (1 - wx) + gather(y1, x1) * wx
    return top_row * (1 - wy) + bot_row * wy


def augment_batch(X, cfg, rng, image_shape=IMAGE_SHAPE):
    """Apply independent random augmentations to every row of ``X``."""
    X = np.asarray(X, dtype=np.float32)
    n = X.shape[0]
    imgs = X.reshape((n,) + tuple(image_shape))
    if cfg.crop_min_scale < 1.0:
        imgs = _random_resized_crop(imgs, cfg.crop_min_scale, rng)
    if cfg.tint_jitter > 0:
        tint = 1.0 + rng.uniform(-cfg.tint_jitter, cfg.tint_jitter, size=(n, 1, 1, imgs.shape[3]))
        imgs = imgs * tint
    if cfg.gray_prob > 0:
        gray = rng.random(n) < cfg.gray_prob
        if gray.any():
            imgs = imgs.copy()
            imgs[gray] = imgs[gray].mean(axis=3, keepdims=True)
    if cfg.flip_prob > 0:
        flip = rng.random(n) < cfg.flip_prob
        if flip.any():
            imgs = imgs.copy()
            imgs[flip] = imgs[flip, :, ::-1]
    if cfg.noise_std > 0:
        imgs = imgs + rng.normal(0.0, cfg.noise_std, size=imgs.shape)
    return np.clip(imgs, 0.0, 1.0).reshape(n, -1).astype(np.float32)


def augment(x, cfg, rng, image_shape=IMAGE_SHAPE):
    """Augment a single flattened image."""
    return augment_batch(np.asarray(x)[None, :], cfg, rng, image_shape)[0]


# ---------------------------------------------------------------------------
# pretraining


def pretrain_encoder(X, encoder_sizes=(432, 256, 128), config=None, aug=None, seed=0,
                     dtype=np.float32, image_shape=IMAGE_SHAPE):
    """Contrastive pretraining on unlabeled features.

    Returns a dict ``{epoch: encoder}`` holding the initial encoder (epoch 0),
    one snapshot every ``checkpoint_every`` epochs and the final encoder.
    Snapshots are rounded to float32 so they equal their on-disk checkpoints.
    """
    config = config or SslConfig()
    aug = aug or AugConfig()
    X = check_features(X, n_features=encoder_sizes[0])
    n = X.shape[0]
    if n < 2:
        raise ConfigurationError("need at least two training samples")
    n_enc = len(encoder_sizes) - 1
    net = MlpModel.initialize(
        tuple(encoder_sizes) + (config.proj_hidden, config.proj_dim),
        ("relu",) * n_enc + ("relu", "identity"),
        seed=substream(seed, "init", "ssl").integers(2**31), dtype=dtype)

    def snapshot():
        enc, _ = net.split(n_enc)
        return enc.astype(np.float32).astype(dtype)

    checkpoints = {0: snapshot()}
    if config.epochs == 0:
        return checkpoints

    key_net = net.copy() if config.use_momentum_encoder else None
    queue = np.zeros((0, config.proj_dim), dtype=dtype)
    batch = min(config.batch, n)
    per_epoch = n // batch
    total = per_epoch * config.epochs
    state = OptimState.for_model(net, config.lr, config.weight_decay)
    sched = LrSchedule(config.lr, total)
    rng_shuffle = substream(seed, "shuffle", "ssl")
    rng_aug = substream(seed, "augment", "ssl")
    tau = config.temperature
    low_std_steps = 0
    step = 0
    for epoch in range(1, config.epochs + 1):
        perm = rng_shuffle.permutation(n)
        losses = []
        for i in range(per_epoch):
            xb = X[perm[i * batch:(i + 1) * batch]]
            v1 = augment_batch(xb, aug, rng_aug, image_shape)
            v2 = augment_batch(xb, aug, rng_aug, image_shape)
            z1, ctx1 = forward(net, v1, return_context=True)
            u1, n1 = l2_normalize(z1)
            if key_net is None:
                z2, ctx2 = forward(net, v2, return_context=True)
            else:
                z2 = forward(key_net, v2)
            u2, n2 = l2_normalize(z2)
            loss, du1 = infonce_batch(u1, u2, tau, queue)
            grad = backward(net, ctx1, l2_normalize_backward(u1, n1, du1))
            if key_net is None and config.symmetric:
                loss2, du2 = infonce_batch(u2, u1, tau, queue)
                grad += backward(net, ctx2, l2_normalize_backward(u2, n2, du2))
                loss = 0.5 * (loss + loss2)
                grad *= 0.5
            adamw_step(net, state, grad, lr_at(sched, step))
            step += 1
            if key_net is not None:
                m = config.momentum
                key_net.params *= m
                key_net.params += (1 - m) * net.params
            if config.queue_size:
                queue = np.vstack([u2, queue])[:config.queue_size]
            losses.append(loss)

            spread = float(u1.std(axis=0).mean())
            low_std_steps = low_std_steps + 1 if spread < 1e-4 else 0
            if low_std_steps >= 50:
                raise CollapseError(f"embeddings collapsed (std {spread:.2e}) at epoch {epoch}, step {step}")
        log.debug("ssl epoch %d loss %.4f", epoch, float(np.mean(losses)))
        if epoch % config.checkpoint_every == 0 or epoch == config.epochs:
            checkpoints[epoch] = snapshot()
    return checkpoints


def online_probe_score(encoder, X_train, y_train, X_valid, y_valid, n_classes=None,
                       epochs=5, lr=1e-3, batch_size=256, seed=0):
    """i.i.d. validation accuracy of a short-budget linear probe on frozen features."""
    y_train = check_targets(y_train)
    y_valid = check_targets(y_valid)
    K = n_classes or int(max(y_train.max(), y_valid.max())) + 1
    head = fit_linear_head(encode(encoder, X_train), y_train, K, epochs, lr,
                           batch_size=batch_size, seed=seed)
    pred = predict_labels(forward(head, encode(encoder, X_valid).astype(head.dtype)))
    return float(np.mean(pred == y_valid))


class ContrastiveEncoder(TransformerMixin, BaseEstimator):
    """Estimator wrapper around :func:`pretrain_encoder`.

    ``fit`` ignores ``y``. ``transform`` uses the encoder at ``T_ssl`` (the
    last checkpoint when None); every checkpoint stays in ``checkpoints_``.
    """

    def __init__(self, hidden=(256, 128), proj_dim=64, proj_hidden=128, temperature=0.1,
                 epochs=20, batch_size=256, lr=1e-3, weight_decay=1e-4, checkpoint_every=5,
                 use_momentum_encoder=False, momentum=0.99, queue_size=0, aug=None,
                 T_ssl=None, random_state=0):
        self.hidden = hidden
        self.proj_dim = proj_dim
        self.proj_hidden = proj_hidden
        self.temperature = temperature
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.checkpoint_every = checkpoint_every
        self.use_momentum_encoder = use_momentum_encoder
        self.momentum = momentum
        self.queue_size = queue_size
        self.aug = aug
        self.T_ssl = T_ssl
        self.random_state = random_state

    def ssl_config(self):
        return SslConfig(self.proj_dim, self.proj_hidden, self.temperature, self.epochs,
                         self.batch_size, self.lr, self.weight_decay, self.checkpoint_every,
                         self.use_momentum_encoder, self.momentum, self.queue_size)

    def fit(self, X, y=None):
        X = check_features(X)
        sizes = (X.shape[1],) + tuple(self.hidden)
        self.checkpoints_ = pretrain_encoder(X, sizes, self.ssl_config(), self.aug, self.random_state)
        self.n_features_in_ = X.shape[1]
        return self

    @property
    def encoder_(self):
        check_is_fitted(self, "checkpoints_")
        if self.T_ssl is None:
            return self.checkpoints_[max(self.checkpoints_)]
        if self.T_ssl not in self.checkpoints_:
            raise ConfigurationError(f"no checkpoint at T_ssl={self.T_ssl}; have {sorted(self.checkpoints_)}")
        return self.checkpoints_[self.T_ssl]

    def transform(self, X):
        X = check_features(X, n_features=self.n_features_in_)
        return encode(self.encoder_, X)


def aug_config_dict(aug):
    return asdict(aug or AugConfig())
