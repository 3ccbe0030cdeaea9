import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ulalab.biasproxy import (BiasProxy, calibrated_conditional, conditional_from_joint,
                              default_alpha, proxy_predict, soft_confusion, train_probe)
from ulalab.exceptions import ConfigurationError
from ulalab.numgrad import MlpModel
from ulalab.synthdata import gen_colored_patterns


def brute_force_joint(probs, y, K):
    # literal double sum over (label, proxy class) and samples
    N, J = probs.shape
    out = np.zeros((K, J))
    for k in range(K):
        for j in range(J):
            total = 0.0
            for i in range(N):
                if y[i] == k:
                    total += probs[i, j]
            out[k, j] = total / N
    return out


def test_soft_confusion_hand_examples():
    np.testing.assert_array_equal(soft_confusion([[1, 0], [0, 1]], [0, 1]), [[0.5, 0], [0, 0.5]])
    joint = soft_confusion([[0.8, 0.2], [0.6, 0.4], [0.1, 0.9]], [0, 0, 1])
    np.testing.assert_allclose(joint, [[0.46667, 0.2], [0.03333, 0.3]], atol=5e-6)
    np.testing.assert_allclose(joint, [[1.4 / 3, 0.6 / 3], [0.1 / 3, 0.9 / 3]], atol=1e-15)


def test_uniform_probe_on_balanced_data():
    K = 4
    y = np.repeat(np.arange(K), 5)
    joint = soft_confusion(np.full((y.size, K), 1 / K), y)
    np.testing.assert_allclose(joint, 1 / K**2, atol=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_soft_confusion_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    N, K = 300, 4
    probs = calibrated_conditional(rng.normal(size=(N, K)) * 2)
    y = rng.integers(0, K, N)
    joint = soft_confusion(probs, y)
    assert np.max(np.abs(joint - brute_force_joint(probs, y, K))) <= 1e-12
    # summing out the proxy axis recovers the label frequencies
    assert np.max(np.abs(joint.sum(axis=1) - np.bincount(y, minlength=K) / N)) <= 1e-12
    assert joint.sum() == pytest.approx(1.0, abs=1e-12)


def test_hard_mode_is_the_count_confusion_matrix():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 3, 50)
    logits = rng.normal(size=(50, 3))
    counts = np.zeros((3, 3))
    np.add.at(counts, (y, np.argmax(logits, axis=1)), 1)
    np.testing.assert_array_equal(soft_confusion(calibrated_conditional(logits), y, hard=True), counts / 50)


def test_conditional_examples():
    joint = np.array([[0.45, 0.05], [0.05, 0.45]])
    np.testing.assert_allclose(conditional_from_joint(joint), [[0.9, 0.1], [0.1, 0.9]], atol=1e-15)
    ident = np.eye(3) / 3
    np.testing.assert_array_equal(conditional_from_joint(ident), np.eye(3))
    # heavy smoothing drives every column to uniform
    np.testing.assert_allclose(conditional_from_joint(ident, alpha=1e9), 1 / 3, atol=1e-9)
    np.testing.assert_allclose(conditional_from_joint(ident, alpha=0.1).sum(axis=0), 1.0, atol=1e-15)


def test_empty_proxy_column_needs_smoothing():
    joint = np.array([[0.5, 0.0], [0.5, 0.0]])
    with pytest.raises(ConfigurationError):
        conditional_from_joint(joint)
    np.testing.assert_allclose(conditional_from_joint(joint, alpha=0.01)[:, 1], [0.5, 0.5])
    assert default_alpha(10, 100) == pytest.approx(1e-3)


def test_calibration_examples():
    np.testing.assert_allclose(calibrated_conditional([2.0, 0.0], tau=0.5), [[0.98201, 0.01799]], atol=5e-6)
    np.testing.assert_allclose(calibrated_conditional([3.0, -1.0, 0.5], tau=1e9), 1 / 3, atol=1e-6)
    p = calibrated_conditional(np.random.default_rng(0).normal(size=(10, 5)), tau=0.3)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    with pytest.raises(ConfigurationError):
        calibrated_conditional([1.0, 2.0], tau=0.0)


def test_tiny_temperature_reduces_to_hard_counts():
    rng = np.random.default_rng(1)
    logits = rng.normal(size=(50, 3))
    logits[np.arange(50), rng.integers(0, 3, 50)] += 1.0  # unique maxima with a clear gap
    y = rng.integers(0, 3, 50)
    soft = soft_confusion(calibrated_conditional(logits, tau=1e-4), y)
    np.testing.assert_array_equal(soft, soft_confusion(calibrated_conditional(logits), y, hard=True))


def test_proxy_predict_ties():
    np.testing.assert_array_equal(proxy_predict([[0.5, 0.5], [0.1, 0.9]]), [0, 1])


@pytest.fixture(scope="module")
def colored():
    return gen_colored_patterns(4, 0.0, 400, noise=0.1, seed=0)


def test_probe_learns_and_tau_is_post_hoc(colored):
    p = BiasProxy(None, T_stop=10, lr=1e-2).fit(colored.X, colored.y)
    assert np.mean(p.predict(colored.X) == colored.y) > 0.95
    q = BiasProxy(None, T_stop=10, lr=1e-2, tau=3.0).fit(colored.X, colored.y)
    np.testing.assert_array_equal(p.decision_function(colored.X), q.decision_function(colored.X))
    assert not np.allclose(p.predict_proba(colored.X), q.predict_proba(colored.X))


def test_zero_budget_leaves_head_at_initialisation(colored):
    a = BiasProxy(None, T_stop=0, random_state=3).fit(colored.X, colored.y)
    b = BiasProxy(None, T_stop=0, random_state=3).fit(colored.X[:10], colored.y[:10])
    assert a.head_ == b.head_


def test_joint_estimate_uses_labels_and_probe_only(colored):
    p = train_probe(None, colored.X, colored.y, T_stop=3, lr=1e-2)
    je = p.joint_estimate(colored.X, colored.y)
    np.testing.assert_allclose(je.joint.sum(axis=1), np.bincount(colored.y) / len(colored.y), atol=1e-12)
    np.testing.assert_allclose(je.conditional.sum(axis=0), 1.0, atol=1e-12)
    assert je.alpha == default_alpha(4, len(colored.y))


def test_save_load_roundtrip(tmp_path, colored):
    enc = MlpModel.initialize([432, 8], seed=0, dtype=np.float32)
    p = BiasProxy(enc, T_stop=2, lr=1e-2, tau=0.7).fit(colored.X, colored.y)
    p.save(tmp_path / "proxy")
    q = BiasProxy.load(tmp_path / "proxy")
    assert q.encoder == enc and q.tau == 0.7
    np.testing.assert_array_equal(p.predict_proba(colored.X), q.predict_proba(colored.X))


def test_negative_budget_rejected(colored):
    with pytest.raises(ConfigurationError):
        BiasProxy(None, T_stop=-1).fit(colored.X, colored.y)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 60), st.integers(2, 6), st.integers(0, 2**31 - 1))
def test_marginal_identity_property(n, K, seed):
    rng = np.random.default_rng(seed)
    probs = calibrated_conditional(rng.normal(size=(n, K)) * 4)
    y = rng.integers(0, K, n)
    joint = soft_confusion(probs, y, K)
    np.testing.assert_allclose(joint.sum(axis=1), np.bincount(y, minlength=K) / n, atol=1e-12)
    np.testing.assert_allclose(joint.sum(axis=0), probs.mean(axis=0), atol=1e-12)
