"""Minibatch plumbing shared by the probe, the online probe and finetuning."""
import math

import numpy as np

from .numgrad import (LrSchedule, MlpModel, OptimState, adamw_step, backward,
                      ce_loss_with_offset, forward, lr_at)
from .rng import substream


def minibatches(n, batch_size, rng):
    perm = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield perm[i:i + batch_size]


def steps_per_epoch(n, batch_size):
    return max(1, math.ceil(n / batch_size))


def encode(encoder, X, batch_size=4096):
    """Features of a frozen encoder (identity when ``encoder`` is None)."""
    X = np.asarray(X)
    if encoder is None:
        return X.astype(np.float32, copy=False)
    out = np.empty((X.shape[0], encoder.output_dim), dtype=encoder.dtype)
    for i in range(0, X.shape[0], batch_size):
        out[i:i + batch_size] = forward(encoder, X[i:i + batch_size])
    return out


def fit_linear_head(features, y, n_classes, epochs, lr=1e-3, weight_decay=0.0,
                    batch_size=256, seed=0, dtype=np.float32, schedule="cosine"):
    """Train a linear softmax classifier on fixed features with AdamW.

    ``epochs`` may be fractional; training then stops after the
    corresponding number of optimizer steps.
    """
    features = np.asarray(features, dtype=dtype)
    head = MlpModel.initialize([features.shape[1], n_classes], ["identity"],
                               seed=substream(seed, "init", "head").integers(2**31), dtype=dtype)
    n = features.shape[0]
    total = int(round(epochs * steps_per_epoch(n, batch_size)))
    if total <= 0:
        return head
    state = OptimState.for_model(head, lr, weight_decay)
    sched = LrSchedule(lr, total, schedule)
    rng = substream(seed, "shuffle", "head")
    step = 0
    while step < total:
        for idx in minibatches(n, batch_size, rng):
            logits, ctx = forward(head, features[idx], return_context=True)
            _, dlogits = ce_loss_with_offset(logits, None, y[idx])
            adamw_step(head, state, backward(head, ctx, dlogits), lr_at(sched, step))
            step += 1
            if step >= total:
                break
    return head
