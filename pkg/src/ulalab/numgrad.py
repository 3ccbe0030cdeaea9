"""Small feed-forward networks with hand-written adjoints.

Everything here works on a single flat parameter vector per model so that the
optimizer, checkpoints and finite-difference checks can treat a network as one
array. Layer ``i`` owns ``W_i`` (in x out, row-major) followed by ``b_i``.
"""
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigurationError, DivergenceError, FormatError

ACTIVATIONS = ("relu", "identity")

CHECKPOINT_MAGIC = b"ULAC"
CHECKPOINT_VERSION = 1


class MlpModel:
    """Parameters and layout of a multilayer perceptron.

    Parameters
    ----------
    layer_sizes : sequence of int
        ``(input_dim, hidden..., output_dim)``.
    activations : sequence of str, optional
        One tag per layer. Defaults to relu on hidden layers and identity on
        the output layer.
    params : ndarray, optional
        Flat parameter vector; zeros when omitted.
    dtype : numpy dtype
        Storage and compute precision.
    """

    def __init__(self, layer_sizes, activations=None, params=None, dtype=np.float64):
        layer_sizes = tuple(int(s) for s in layer_sizes)
        if len(layer_sizes) < 2 or min(layer_sizes) < 1:
            raise ConfigurationError(f"invalid layer sizes {layer_sizes}")
        n_layers = len(layer_sizes) - 1
        if activations is None:
            activations = ("relu",) * (n_layers - 1) + ("identity",)
        activations = tuple(activations)
        if len(activations) != n_layers or any(a not in ACTIVATIONS for a in activations):
            raise ConfigurationError(f"need {n_layers} activations from {ACTIVATIONS}, got {activations}")
        self.layer_sizes = layer_sizes
        self.activations = activations
        self.dtype = np.dtype(dtype)
        n = param_count(layer_sizes)
        if params is None:
            params = np.zeros(n, dtype=self.dtype)
        params = np.ascontiguousarray(params, dtype=self.dtype)
        if params.shape != (n,):
            raise ConfigurationError(f"expected {n} parameters, got shape {params.shape}")
        self.params = params

    @classmethod
    def initialize(cls, layer_sizes, activations=None, seed=None, dtype=np.float64):
        """He-uniform weights for relu layers, fan-in uniform otherwise; zero biases."""
        model = cls(layer_sizes, activations, dtype=dtype)
        rng = np.random.default_rng(seed)
        for (W, b), act in zip(model.layers(), model.activations):
            fan_in = W.shape[0]
            bound = math.sqrt(6.0 / fan_in) if act == "relu" else math.sqrt(1.0 / fan_in)
            W[...] = rng.uniform(-bound, bound, size=W.shape)
            b[...] = 0.0
        return model

    @property
    def n_layers(self):
        return len(self.layer_sizes) - 1

    @property
    def n_params(self):
        return self.params.size

    @property
    def input_dim(self):
        return self.layer_sizes[0]

    @property
    def output_dim(self):
        return self.layer_sizes[-1]

    def _offsets(self):
        off = 0
        for d_in, d_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            yield off, d_in, d_out
            off += d_in * d_out + d_out

    def layers(self, params=None):
        """(W, b) views into ``params`` (defaults to the model's own vector)."""
        p = self.params if params is None else params
        out = []
        for off, d_in, d_out in self._offsets():
            W = p[off:off + d_in * d_out].reshape(d_in, d_out)
            b = p[off + d_in * d_out:off + d_in * d_out + d_out]
            out.append((W, b))
        return out

    def copy(self):
        return MlpModel(self.layer_sizes, self.activations, self.params.copy(), self.dtype)

    def astype(self, dtype):
        return MlpModel(self.layer_sizes, self.activations, self.params.astype(dtype), dtype)

    def stack(self, other):
        """Compose ``other`` on top of this model (self runs first)."""
        if other.input_dim != self.output_dim:
            raise ConfigurationError(f"cannot stack {other.layer_sizes} on {self.layer_sizes}")
        return MlpModel(
            self.layer_sizes + other.layer_sizes[1:],
            self.activations + other.activations,
            np.concatenate([self.params, other.params.astype(self.dtype)]),
            self.dtype,
        )

    def split(self, n_layers):
        """Split into the first ``n_layers`` layers and the remainder."""
        if not 0 < n_layers < self.n_layers:
            raise ConfigurationError(f"cannot split {self.n_layers} layers at {n_layers}")
        cut = param_count(self.layer_sizes[:n_layers + 1])
        first = MlpModel(self.layer_sizes[:n_layers + 1], self.activations[:n_layers],
                         self.params[:cut].copy(), self.dtype)
        rest = MlpModel(self.layer_sizes[n_layers:], self.activations[n_layers:],
                        self.params[cut:].copy(), self.dtype)
        return first, rest

    def __eq__(self, other):
        return (isinstance(other, MlpModel)
                and self.layer_sizes == other.layer_sizes
                and self.activations == other.activations
                and np.array_equal(self.params, other.params))

    def __repr__(self):
        return f"MlpModel({list(self.layer_sizes)}, {list(self.activations)}, dtype={self.dtype.name})"


def param_count(layer_sizes):
    return sum(a * b + b for a, b in zip(layer_sizes[:-1], layer_sizes[1:]))


@dataclass
class ForwardContext:
    """Per-layer inputs and pre-activations recorded by :func:`forward`."""

    inputs: list
    preacts: list


def forward(model, batch, return_context=False):
    """Logits of ``model`` on a B x D batch.

    With ``return_context=True`` also returns the :class:`ForwardContext`
    required by :func:`backward`.
    """
    X = np.asarray(batch, dtype=model.dtype)
    if X.ndim != 2 or X.shape[1] != model.input_dim:
        raise ConfigurationError(f"batch shape {X.shape} does not match input dim {model.input_dim}")
    inputs, preacts = [], []
    h = X
    for (W, b), act in zip(model.layers(), model.activations):
        inputs.append(h)
        a = h @ W
        a += b
        preacts.append(a)
        h = np.maximum(a, 0) if act == "relu" else a
    if return_context:
        return h, ForwardContext(inputs, preacts)
    return h


def backward(model, context, dlogits, return_input_grad=False):
    """Gradient of a scalar loss w.r.t. the flat parameters, given dL/dlogits."""
    if context is None or not isinstance(context, ForwardContext):
        raise ValueError("backward needs the context returned by forward(..., return_context=True)")
    grad = np.zeros_like(model.params)
    g = np.asarray(dlogits, dtype=model.dtype)
    layers = model.layers()
    grad_layers = model.layers(grad)
    if g.shape != context.preacts[-1].shape:
        raise ConfigurationError(f"dlogits shape {g.shape} does not match logits {context.preacts[-1].shape}")
    for i in reversed(range(model.n_layers)):
        W, _ = layers[i]
        gW, gb = grad_layers[i]
        if model.activations[i] == "relu":
            g = g * (context.preacts[i] > 0)
        np.matmul(context.inputs[i].T, g, out=gW)
        gb[...] = g.sum(axis=0)
        if i > 0 or return_input_grad:
            g = g @ W.T
    if return_input_grad:
        return grad, g
    return grad


def log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def ce_loss_with_offset(logits, offsets, labels, sample_weight=None):
    """Mean cross-entropy of ``softmax(logits + offsets)`` and its gradient w.r.t. ``logits``.

    ``offsets`` may be ``None`` (plain cross-entropy). With ``sample_weight``
    the mean is weighted and normalised by the weight total.
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    bad = ~np.isfinite(logits).all(axis=1)
    if bad.any():
        idx = int(np.flatnonzero(bad)[0])
        raise DivergenceError(f"non-finite logits at batch index {idx}", index=idx)
    B, K = logits.shape
    if labels.shape != (B,) or labels.min(initial=0) < 0 or labels.max(initial=0) >= K:
        raise ConfigurationError(f"labels must be {B} integers in [0, {K})")
    z = logits if offsets is None else logits + offsets
    logp = log_softmax(z)
    rows = np.arange(B)
    if sample_weight is None:
        w = np.full(B, 1.0 / B, dtype=logits.dtype)
    else:
        w = np.asarray(sample_weight, dtype=logits.dtype)
        w = w / w.sum()
    loss = float(-(w * logp[rows, labels]).sum())
    dlogits = np.exp(logp)
    dlogits[rows, labels] -= 1.0
    dlogits *= w[:, None]
    return loss, dlogits


@dataclass
class OptimState:
    """AdamW moments and hyperparameters for one flat parameter vector."""

    first_moment: np.ndarray
    second_moment: np.ndarray
    base_lr: float = 1e-3
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0

    @classmethod
    def for_model(cls, model, base_lr=1e-3, weight_decay=0.0, **kw):
        return cls(np.zeros_like(model.params), np.zeros_like(model.params),
                   base_lr=base_lr, weight_decay=weight_decay, **kw)


def adamw_step(model, state, gradient, lr=None):
    """One decoupled-weight-decay Adam update, in place.

    ``lr`` overrides ``state.base_lr`` (used by schedules). Returns
    ``(model, state)``.
    """
    g = np.asarray(gradient)
    if g.shape != model.params.shape:
        raise ConfigurationError(f"gradient shape {g.shape} != parameter shape {model.params.shape}")
    if not np.isfinite(g).all():
        raise DivergenceError(f"non-finite gradient at optimizer step {state.step_count + 1}")
    lr = state.base_lr if lr is None else lr
    b1, b2 = state.beta1, state.beta2
    state.step_count += 1
    t = state.step_count
    m, v = state.first_moment, state.second_moment
    m *= b1
    m += (1 - b1) * g
    v *= b2
    v += (1 - b2) * (g * g)
    m_hat = m / (1 - b1 ** t)
    v_hat = v / (1 - b2 ** t)
    update = m_hat / (np.sqrt(v_hat) + state.epsilon)
    if state.weight_decay:
        update += state.weight_decay * model.params
    model.params -= (lr * update).astype(model.dtype, copy=False)
    return model, state


@dataclass
class LrSchedule:
    base_lr: float
    total_steps: int
    kind: str = "cosine"

    def __post_init__(self):
        if self.kind not in ("cosine", "constant"):
            raise ConfigurationError(f"unknown schedule kind {self.kind!r}")
        if self.total_steps < 1:
            raise ConfigurationError("total_steps must be positive")


def lr_at(schedule, step):
    """Learning rate at ``step``; steps outside ``[0, total_steps]`` are clamped."""
    if schedule.kind == "constant":
        return schedule.base_lr
    step = min(max(step, 0), schedule.total_steps)
    return schedule.base_lr * 0.5 * (1.0 + math.cos(math.pi * step / schedule.total_steps))


def predict_labels(logits):
    """Row-wise argmax; ties resolve to the lowest index."""
    return np.argmax(logits, axis=1)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model, path, step=0, extra=None):
    header = {
        "format_version": CHECKPOINT_VERSION,
        "layer_sizes": list(model.layer_sizes),
        "activations": list(model.activations),
        "step": int(step),
    }
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    params = np.asarray(model.params, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<Q", params.size))
        fh.write(params.tobytes())


def load_checkpoint(path, dtype=np.float32):
    """Read a checkpoint; returns ``(model, header)``."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    try:
        version, hlen = struct.unpack_from("<II", data, 4)
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
        header = json.loads(data[12:12 + hlen].decode("utf-8"))
        (n,) = struct.unpack_from("<Q", data, 12 + hlen)
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt checkpoint header ({exc})") from None
    start = 12 + hlen + 8
    if len(data) != start + 4 * n:
        raise FormatError(f"{path}: truncated checkpoint ({len(data) - start} of {4 * n} parameter bytes)")
    params = np.frombuffer(data, dtype="<f4", count=n, offset=start)
    model = MlpModel(header["layer_sizes"], header["activations"], params.astype(dtype), dtype)
    return model, header
