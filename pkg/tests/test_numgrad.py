import math

import numpy as np
import pytest

from ulalab.exceptions import ConfigurationError, DivergenceError, FormatError
from ulalab.numgrad import (LrSchedule, MlpModel, OptimState, adamw_step, backward,
                            ce_loss_with_offset, forward, load_checkpoint, lr_at,
                            predict_labels, save_checkpoint)


def _fd_grad(f, x, eps=1e-6):
    g = np.zeros_like(x)
    for i in range(x.size):
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def _rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)


def test_forward_matches_hand_computation():
    m = MlpModel([2, 2, 1])
    W1, b1 = m.layers()[0]
    W2, b2 = m.layers()[1]
    W1[...] = [[1.0, -1.0], [2.0, 0.5]]
    b1[...] = [0.0, -3.0]
    W2[...] = [[1.0], [2.0]]
    b2[...] = [0.5]
    # hidden = relu([1 + 4, -1 + 1 - 3]) = [5, 0]; out = 5 + 0.5
    np.testing.assert_array_equal(forward(m, [[1.0, 2.0]]), [[5.5]])


def test_forward_rejects_wrong_width():
    m = MlpModel.initialize([3, 2], seed=0)
    with pytest.raises(ConfigurationError):
        forward(m, np.zeros((4, 5)))


@pytest.mark.parametrize("instance", range(20))
def test_backward_finite_difference(instance):
    rng = np.random.default_rng(instance)
    sizes = [int(rng.integers(2, 6)) for _ in range(int(rng.integers(2, 5)))]
    m = MlpModel.initialize(sizes, seed=instance)
    m.params += rng.normal(0, 0.05, m.n_params)  # nonzero biases move relu kinks off the data
    X = rng.normal(size=(5, sizes[0]))
    y = rng.integers(0, sizes[-1], 5)
    off = rng.normal(size=(5, sizes[-1]))

    def loss():
        return ce_loss_with_offset(forward(m, X), off, y)[0]

    logits, ctx = forward(m, X, return_context=True)
    _, dlogits = ce_loss_with_offset(logits, off, y)
    grad = backward(m, ctx, dlogits)
    assert _rel_err(grad, _fd_grad(loss, m.params)) < 1e-4


@pytest.mark.parametrize("instance", range(20))
def test_ce_loss_gradient_finite_difference(instance):
    rng = np.random.default_rng(100 + instance)
    B, K = 4, int(rng.integers(2, 7))
    z = rng.normal(size=(B, K)) * 3
    off = rng.normal(size=(B, K))
    y = rng.integers(0, K, B)
    w = rng.uniform(0.5, 2.0, B) if instance % 2 else None
    flat = z.reshape(-1)
    _, g = ce_loss_with_offset(z, off, y, w)
    fd = _fd_grad(lambda: ce_loss_with_offset(flat.reshape(B, K), off, y, w)[0], flat)
    assert _rel_err(g.reshape(-1), fd) < 1e-4


def test_backward_input_gradient():
    rng = np.random.default_rng(7)
    m = MlpModel.initialize([3, 4, 2], seed=1)
    X = rng.normal(size=(2, 3))
    y = np.array([0, 1])
    logits, ctx = forward(m, X, return_context=True)
    _, d = ce_loss_with_offset(logits, None, y)
    _, gx = backward(m, ctx, d, return_input_grad=True)
    flat = X.reshape(-1)
    fd = _fd_grad(lambda: ce_loss_with_offset(forward(m, flat.reshape(2, 3)), None, y)[0], flat)
    assert _rel_err(gx.reshape(-1), fd) < 1e-4


def test_backward_needs_context():
    m = MlpModel.initialize([2, 2], seed=0)
    with pytest.raises(ValueError):
        backward(m, None, np.zeros((1, 2)))


def test_ce_uniform_logits_is_log_k():
    loss, _ = ce_loss_with_offset(np.zeros((3, 10)), None, np.array([0, 4, 9]))
    assert loss == pytest.approx(math.log(10), abs=1e-12)


def test_ce_hard_mask_offset():
    # an offset of -inf-like magnitude removes a class from the softmax
    logits = np.zeros((1, 3))
    off = np.array([[0.0, 0.0, -1e4]])
    loss, g = ce_loss_with_offset(logits, off, np.array([0]))
    assert loss == pytest.approx(math.log(2), abs=1e-12)
    assert g[0, 2] == pytest.approx(0.0, abs=1e-12)


def test_ce_shift_invariance():
    rng = np.random.default_rng(3)
    z = rng.normal(size=(5, 4))
    y = rng.integers(0, 4, 5)
    a = ce_loss_with_offset(z, None, y)
    b = ce_loss_with_offset(z + 123.0, None, y)
    assert a[0] == pytest.approx(b[0], abs=1e-10)
    np.testing.assert_allclose(a[1], b[1], atol=1e-12)


def test_ce_reports_nonfinite_row():
    z = np.zeros((3, 2))
    z[1, 0] = np.nan
    with pytest.raises(DivergenceError) as info:
        ce_loss_with_offset(z, None, np.array([0, 0, 0]))
    assert info.value.index == 1


def test_ce_rejects_bad_labels():
    with pytest.raises(ConfigurationError):
        ce_loss_with_offset(np.zeros((2, 3)), None, np.array([0, 3]))


def test_adamw_first_step_by_hand():
    m = MlpModel([1, 1], ["identity"], params=np.array([0.0, 0.0]))
    state = OptimState.for_model(m, base_lr=0.1)
    adamw_step(m, state, np.array([1.0, -2.0]))
    # bias-corrected moments give g / (|g| + eps)
    np.testing.assert_allclose(m.params, [-0.1 / (1 + 1e-8), 0.1 * 2 / (2 + 1e-8)], rtol=1e-14)
    assert state.step_count == 1


def test_adamw_decay_is_decoupled():
    m = MlpModel([1, 1], ["identity"], params=np.array([2.0, -4.0]))
    state = OptimState.for_model(m, base_lr=0.1, weight_decay=0.5)
    adamw_step(m, state, np.zeros(2))
    np.testing.assert_allclose(m.params, [2.0 * 0.95, -4.0 * 0.95], rtol=1e-14)


def test_adamw_rejects_nonfinite_gradient():
    m = MlpModel([1, 1], ["identity"])
    with pytest.raises(DivergenceError):
        adamw_step(m, OptimState.for_model(m), np.array([np.inf, 0.0]))


def test_cosine_schedule_values():
    s = LrSchedule(1.0, 100)
    assert lr_at(s, 0) == 1.0
    assert lr_at(s, 50) == pytest.approx(0.5, abs=1e-15)
    assert lr_at(s, 100) == pytest.approx(0.0, abs=1e-15)
    assert lr_at(s, 250) == lr_at(s, 100)
    assert lr_at(LrSchedule(0.3, 10, "constant"), 7) == 0.3
    with pytest.raises(ConfigurationError):
        LrSchedule(1.0, 0)


def test_argmax_ties_take_lowest_index():
    np.testing.assert_array_equal(predict_labels(np.array([[1.0, 3.0, 3.0], [2.0, 2.0, 2.0]])), [1, 0])


def test_checkpoint_roundtrip(tmp_path):
    m = MlpModel.initialize([4, 3, 2], seed=5, dtype=np.float32)
    path = tmp_path / "m.ck"
    save_checkpoint(m, path, step=7, extra={"note": "x"})
    loaded, header = load_checkpoint(path)
    assert loaded == m
    assert header["step"] == 7 and header["extra"] == {"note": "x"}


def test_checkpoint_format_errors(tmp_path):
    path = tmp_path / "m.ck"
    save_checkpoint(MlpModel.initialize([4, 2], seed=0), path)
    raw = path.read_bytes()
    (tmp_path / "magic.ck").write_bytes(b"XXXX" + raw[4:])
    (tmp_path / "short.ck").write_bytes(raw[:-3])
    for name in ("magic.ck", "short.ck"):
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / name)


def test_stack_and_split_are_inverse():
    a = MlpModel.initialize([4, 3], seed=0)
    b = MlpModel.initialize([3, 2], ["identity"], seed=1)
    s = a.stack(b)
    first, rest = s.split(1)
    assert first.layer_sizes == (4, 3) and rest == b
    x = np.ones((1, 4))
    np.testing.assert_allclose(forward(s, x), forward(b, forward(a, x)))
