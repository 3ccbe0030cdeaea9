import numpy as np
import pytest
from sklearn.base import clone

from ulalab.adjust import (AdjustSpec, LogitAdjustedClassifier, finetune, group_conditional,
                           offset_table, predict_debiased, sla_offsets, ula_offsets)
from ulalab.biasproxy import BiasProxy, JointEstimate
from ulalab.exceptions import ConfigurationError
from ulalab.numgrad import (MlpModel, OptimState, adamw_step, backward, ce_loss_with_offset,
                            forward, predict_labels)
from ulalab.synthdata import gen_colored_patterns


def test_sla_offset_examples():
    np.testing.assert_allclose(sla_offsets([[0.9], [0.1]], 0), [-0.10536, -2.30259], atol=5e-6)
    np.testing.assert_array_equal(sla_offsets([[1.0], [0.0]], 0, log_floor=-20), [0.0, -20.0])
    np.testing.assert_allclose(sla_offsets(np.full((4, 2), 0.25), 1), np.log(0.25))
    with pytest.raises(ConfigurationError):
        sla_offsets([[0.9], [0.1]], 1)


def test_ula_adjusted_logits_flip_the_argmax():
    je = JointEstimate(None, np.array([[0.9, 0.5], [0.1, 0.5]]), 0.0)
    h = np.array([1.0, 2.0])
    adjusted = h + ula_offsets(je, 0, 1.0)
    np.testing.assert_allclose(adjusted, [0.89464, -0.30259], atol=5e-6)
    assert np.argmax(h) == 1 and np.argmax(adjusted) == 0
    # a uniform column is a constant shift
    assert np.argmax(h + ula_offsets(je, 1, 2.0)) == 1
    np.testing.assert_array_equal(ula_offsets(je, 0, 0.0), [0.0, 0.0])


def test_zero_eta_loss_equals_plain_loss():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(6, 3))
    y = rng.integers(0, 3, 6)
    cond = np.array([[0.7, 0.2, 0.1], [0.2, 0.7, 0.1], [0.1, 0.1, 0.8]])
    off = offset_table(cond, 0.0)[rng.integers(0, 3, 6)]
    assert ce_loss_with_offset(logits, off, y)[0] == ce_loss_with_offset(logits, None, y)[0]


def test_offset_table_rows_follow_bias_values():
    cond = np.array([[0.9, 0.3], [0.1, 0.7]])
    t = offset_table(cond, 1.5)
    np.testing.assert_allclose(t[1], 1.5 * np.log([0.3, 0.7]))


def test_group_conditional():
    cond = group_conditional(np.array([0, 0, 1, 0]), np.array([0, 0, 1, 1]), 2, 2)
    np.testing.assert_allclose(cond, [[1.0, 0.5], [0.0, 0.5]])


def test_adjust_spec_validation():
    with pytest.raises(ConfigurationError):
        AdjustSpec(mode="xla")
    with pytest.raises(ConfigurationError):
        AdjustSpec(eta=-1)


def test_erm_and_zero_eta_step_trajectories_are_identical():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(64, 5)).astype(np.float32)
    y = rng.integers(0, 3, 64)
    bias_hat = rng.integers(0, 3, 64)
    cond = np.array([[0.8, 0.1, 0.1], [0.1, 0.8, 0.1], [0.1, 0.1, 0.8]])
    off = offset_table(cond, 0.0)[bias_hat].astype(np.float32)
    models = [MlpModel.initialize([5, 8, 3], seed=1, dtype=np.float32) for _ in range(2)]
    states = [OptimState.for_model(m, 1e-2, 1e-4) for m in models]
    for step in range(100):
        idx = np.arange(16) + 16 * (step % 4)
        for m, s, o in zip(models, states, (None, off[idx])):
            logits, ctx = forward(m, X[idx], return_context=True)
            _, d = ce_loss_with_offset(logits, o, y[idx])
            adamw_step(m, s, backward(m, ctx, d))
        assert np.array_equal(models[0].params, models[1].params)


def _schedule_validator(scores):
    it = iter(scores)
    return lambda m: next(it)


def test_finetune_keeps_epoch_zero_when_no_epochs():
    m = MlpModel.initialize([3, 2], seed=0)
    res = finetune(m, np.zeros((4, 3)), np.array([0, 1, 0, 1]), max_epochs=0,
                   validate=lambda _: 0.25)
    assert res.best_epoch == 0 and res.model == m and res.best_score == 0.25
    assert len(res.curve) == 1


def test_finetune_ties_go_to_the_earliest_epoch():
    rng = np.random.default_rng(0)
    X, y = rng.normal(size=(20, 3)), rng.integers(0, 2, 20)
    m = MlpModel.initialize([3, 2], seed=0)
    res = finetune(m, X, y, validate=_schedule_validator([0.1, 0.5, 0.7, 0.7, 0.2]), max_epochs=4,
                   batch_size=5)
    assert res.best_epoch == 2 and res.best_score == 0.7
    assert [r["epoch"] for r in res.curve] == [0, 1, 2, 3, 4]
    res = finetune(m, X, y, validate=lambda _: 0.3, max_epochs=3, batch_size=5)
    assert res.best_epoch == 0


def test_divergence_marks_the_run_failed():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(50, 4)) * 100
    y = rng.integers(0, 3, 50)
    m = MlpModel.initialize([4, 16, 3], seed=0)
    res = finetune(m, X, y, lr=1e4, max_epochs=5, batch_size=10)
    assert res.status == "failed" and "loss" in res.message


def test_predict_debiased_uses_raw_logits():
    m = MlpModel.initialize([4, 3], seed=2)
    X = np.random.default_rng(1).normal(size=(10, 4))
    np.testing.assert_array_equal(predict_debiased(m, X), predict_labels(forward(m, X)))


@pytest.fixture(scope="module")
def biased():
    train = gen_colored_patterns(3, 0.05, 300, noise=0.1, seed=0)
    valid = gen_colored_patterns(3, 0.05, 120, noise=0.1, seed=1)
    return train, valid


def test_classifier_erm_equals_zero_eta_ula(biased):
    train, valid = biased
    proxy = BiasProxy(None, T_stop=3, lr=1e-2).fit(train.X, train.y)
    kw = dict(hidden=(16,), max_epochs=3, batch_size=64, validator="last", random_state=0)
    erm = LogitAdjustedClassifier(mode="erm", **kw).fit(train.X, train.y)
    ula = LogitAdjustedClassifier(mode="ula", eta=0.0, **kw).fit(train.X, train.y, proxy=proxy)
    assert erm.model_ == ula.model_
    assert [r["train_loss"] for r in erm.curve_[1:]] == [r["train_loss"] for r in ula.curve_[1:]]


def test_classifier_modes_and_validators(biased):
    train, valid = biased
    proxy = BiasProxy(None, T_stop=3, lr=1e-2).fit(train.X, train.y)
    kw = dict(hidden=(16,), max_epochs=2, batch_size=64, random_state=0)
    c = LogitAdjustedClassifier(mode="ula", **kw).fit(train.X, train.y, proxy=proxy,
                                                      X_valid=valid.X, y_valid=valid.y)
    assert c.validator_used_ == "balanced" and c.status_ == "ok"
    assert c.predict(valid.X).shape == (len(valid),)
    e = LogitAdjustedClassifier(mode="erm", **kw).fit(train.X, train.y, X_valid=valid.X, y_valid=valid.y)
    assert e.validator_used_ == "iid"
    s = LogitAdjustedClassifier(mode="sla", **kw).fit(train.X, train.y, bias=train.z)
    assert s.validator_used_ == "last" and s.best_epoch_ == 2
    with pytest.raises(ConfigurationError):
        LogitAdjustedClassifier(mode="sla", **kw).fit(train.X, train.y)
    with pytest.raises(ConfigurationError):
        LogitAdjustedClassifier(mode="ula", **kw).fit(train.X, train.y)


def test_head_only_keeps_the_encoder(biased):
    train, _ = biased
    enc = MlpModel.initialize([432, 8], seed=0, dtype=np.float32)
    c = LogitAdjustedClassifier(mode="erm", encoder=enc, head_only=True, max_epochs=2,
                                validator="last").fit(train.X, train.y)
    first, _ = c.model_.split(1)
    assert first == enc


def test_sklearn_clone_and_params():
    c = LogitAdjustedClassifier(mode="sla", eta=1.5, hidden=(8,))
    d = clone(c)
    assert d.get_params()["eta"] == 1.5 and d.get_params()["mode"] == "sla"
    assert not hasattr(d, "model_")
