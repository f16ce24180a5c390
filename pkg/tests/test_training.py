import numpy as np
import pytest

from lstmlab import data, lstm, network, training
from lstmlab.numerics import ConfigurationError, make_rng
from lstmlab.training import (EarlyStopping, TrainConfig, add_input_noise, clip_gradients,
                              nesterov_update)


def test_nesterov_scalar_trace():
    p, v = np.zeros(1), np.zeros(1)
    nesterov_update(p, v, np.ones(1), 0.1, 0.9)
    assert v[0] == pytest.approx(-0.1, abs=1e-15)
    assert p[0] == pytest.approx(-0.19, abs=1e-15)


def test_nesterov_without_momentum_is_sgd(rng):
    p = rng.normal(size=5)
    g = rng.normal(size=5)
    expected = p - 0.01 * g
    nesterov_update(p, np.zeros(5), g, 0.01, 0.0)
    np.testing.assert_allclose(p, expected, rtol=1e-15)


def test_nesterov_matches_lookahead_formulation(rng):
    # stored params theta + m v equal the classic look-ahead iterate
    A = np.diag([1.0, 3.0])
    grad = lambda th: A @ th
    lr, m = 0.05, 0.9
    theta, v_ref = np.array([1.0, -1.0]), np.zeros(2)
    p, v = theta.copy(), np.zeros(2)
    for _ in range(30):
        v_ref = m * v_ref - lr * grad(theta + m * v_ref)
        theta = theta + v_ref
        nesterov_update(p, v, grad(p), lr, m)
        np.testing.assert_allclose(p, theta + m * v_ref, atol=1e-14)


def test_learning_rate_rescaling():
    assert TrainConfig(learning_rate=1.0, momentum=0.9).effective_learning_rate == \
        pytest.approx(0.1, abs=1e-15)
    with pytest.raises(ConfigurationError):
        TrainConfig(momentum=1.0)


def test_input_noise(rng):
    x = rng.normal(size=(1000, 100))
    assert add_input_noise(x, 0.0, rng) is x or np.array_equal(add_input_noise(x, 0.0, rng), x)
    noisy = add_input_noise(x, 0.5, rng)
    assert abs((noisy - x).std() - 0.5) < 0.01
    again = add_input_noise(x, 0.5, rng)
    assert not np.array_equal(noisy, again)
    with pytest.raises(ConfigurationError):
        add_input_noise(x, -1.0, rng)


def test_clip_gradients():
    g = {"a": np.array([3.5, -2.0, 0.25]), "b": np.array([[0.5, -1.0]])}
    clip_gradients(g)
    np.testing.assert_array_equal(g["a"], [1.0, -1.0, 0.25])
    np.testing.assert_array_equal(g["b"], [[0.5, -1.0]])
    assert TrainConfig().clip_gradients is False


def test_patience_arithmetic():
    stop = EarlyStopping(15)
    history = [5, 4] + [4] * 16
    for epoch, value in enumerate(history, 1):
        stop.update(value)
        if stop.should_stop:
            break
    assert epoch == 17
    assert stop.best_epoch == 2


def _tiny_dataset(rng, n=4, T=5, task="nextstep_prediction"):
    def seqs(k):
        return tuple((rng.normal(size=(T, 2)), (rng.random((T, 2)) < 0.5).astype(float))
                     for _ in range(k))
    return data.Dataset("tiny", task, 2, 2, seqs(n), seqs(2), seqs(2))


def test_runs_full_max_epochs_when_always_improving(monkeypatch, rng):
    ds = _tiny_dataset(rng, n=1, T=3)
    cfg = network.NetworkConfig("nextstep_prediction", 2, 2, 2)
    scores = iter(np.linspace(100, 1, 1000))
    real = network.evaluate

    def improving(w, c, seqs):
        loss, metric, div = real(w, c, seqs)
        return loss, float(next(scores)), div

    monkeypatch.setattr(training.network, "evaluate", improving)
    res = training.train(ds, cfg, TrainConfig(learning_rate=1e-4))
    assert res.epochs_run == 150
    assert res.best_val_epoch == 150


def test_noise_only_touches_training_inputs(monkeypatch, rng):
    ds = _tiny_dataset(rng)
    calls = {"noise": 0}
    real_noise = training.add_input_noise
    clean_ids = {id(x) for split in (ds.val, ds.test) for x, _ in split}
    train_ids = {id(x) for x, _ in ds.train}

    def counting(x, sigma, r):
        calls["noise"] += 1
        assert id(x) in train_ids
        return real_noise(x, sigma, r)

    real_fb = network.network_forward_backward

    def checking(w, c, x, t, compute_grads=True):
        if not compute_grads:
            assert id(x) in clean_ids or id(x) in train_ids
        return real_fb(w, c, x, t, compute_grads)

    monkeypatch.setattr(training, "add_input_noise", counting)
    monkeypatch.setattr(training.network, "network_forward_backward", checking)
    cfg = network.NetworkConfig("nextstep_prediction", 2, 2, 2)
    res = training.train(ds, cfg, TrainConfig(input_noise_std=0.3, max_epochs=3, seed=1))
    assert calls["noise"] == res.epochs_run * len(ds.train)


def test_deterministic_curves_and_snapshot(rng):
    ds = _tiny_dataset(rng)
    cfg = network.NetworkConfig("nextstep_prediction", 3, 2, 2)
    tc = TrainConfig(learning_rate=0.05, momentum=0.0, max_epochs=6, seed=3)
    a = training.train(ds, cfg, tc)
    b = training.train(ds, cfg, tc)
    assert a.curves() == b.curves()
    _, test_metric, _ = network.evaluate(a.best_weights, cfg, ds.test)
    assert test_metric == a.test_metric
    assert a.best_val_metric == min(a.val_metric)
    assert a.val_metric[a.best_val_epoch - 1] == a.best_val_metric


def test_divergence_scored_worst(rng):
    def seqs(k):
        return tuple((np.ones((300, 2)), rng.integers(0, 2, size=300)) for _ in range(k))

    ds = data.Dataset("long", "framewise_classification", 2, 2, seqs(2), seqs(1), seqs(1))
    # unsquashed recurrence through R_z overflows the cell state geometrically
    spec = lstm.VariantSpec(input_activation="identity", output_activation="identity")
    cfg = network.NetworkConfig("framewise_classification", 2, 2, 2, spec)
    w = network.init_network(cfg, rng)
    for layer in (w.forward, w.backward):
        for k, v in layer.blocks.items():
            v[...] = 5.0 if k.startswith(("R_z", "b_")) else 0.0
    with np.errstate(all="ignore"):
        res = training.train(ds, cfg, TrainConfig(max_epochs=5), weights=w)
    assert res.diverged
    assert res.epochs_run == 1
    assert res.test_metric == 1.0 and res.best_val_metric == 1.0


def test_empty_split_rejected(rng):
    ds = _tiny_dataset(rng)
    empty = data.Dataset("e", ds.task, 2, 2, ds.train, (), ds.test)
    with pytest.raises(ConfigurationError):
        training.train(empty, network.NetworkConfig("nextstep_prediction", 2, 2, 2), TrainConfig())


def _integrator_sequences(rng, n, T=6):
    out = []
    for _ in range(n):
        x = rng.choice([-1.0, 1.0], size=(T, 1))
        x[0, 0] *= 0.5  # keeps every running sum at least 0.5 away from zero
        out.append((x, (np.cumsum(x[:, 0]) > 0).astype(float)[:, None]))
    return tuple(out)


def test_integrator_task_is_trainable():
    # the label is the sign of a running sum: solvable by one input-driven cell
    r = make_rng(0)
    ds = data.Dataset("integrator", "nextstep_prediction", 1, 1, _integrator_sequences(r, 100),
                      _integrator_sequences(r, 5), _integrator_sequences(r, 5))
    cfg = network.NetworkConfig("nextstep_prediction", 2, 1, 1, "NIAF")
    res = training.train(ds, cfg, TrainConfig(learning_rate=0.08, momentum=0.9, patience=150))
    assert not res.diverged
    assert res.epochs_run <= 150
    assert min(res.train_loss) < 1e-3
