import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lipvsr import lstm
from lipvsr.lstm import LstmParams, TrainConfig


def _random_instance(seed, T=5, D=6, H=4, C=3):
    rng = np.random.default_rng(seed)
    params = LstmParams.init(D, H, C, seed=seed)
    # larger weights than the default init so every gate is exercised
    for arr in params.tensors().values():
        arr += rng.normal(0, 0.5, arr.shape)
    x = rng.normal(size=(T, D))
    y = rng.integers(0, C, T)
    return params, x, y


def _objective(params, x, y):
    return lstm.loss(lstm.forward(params, x)[0], y)


def max_relative_fd_error(seed, eps=1e-4, bptt_horizon=None):
    """Largest |analytic - central difference| / max(|a|, |fd|, 1e-8) over all parameters."""
    params, x, y = _random_instance(seed)
    _, cache = lstm.forward(params, x)
    grads = lstm.backward(params, cache, y, bptt_horizon)
    worst = 0.0
    for name, arr in params.tensors().items():
        flat = arr.reshape(-1)
        g = grads[name].reshape(-1)
        for n in range(flat.size):
            keep = flat[n]
            flat[n] = keep + eps
            up = _objective(params, x, y)
            flat[n] = keep - eps
            down = _objective(params, x, y)
            flat[n] = keep
            fd = (up - down) / (2 * eps)
            worst = max(worst, abs(g[n] - fd) / max(abs(g[n]), abs(fd), 1e-8))
    return worst


@pytest.mark.parametrize("seed", range(20))
def test_gradient_matches_finite_differences(seed):
    assert max_relative_fd_error(seed) <= 1e-4


def test_truncated_bptt_differs_from_full():
    params, x, y = _random_instance(0)
    _, cache = lstm.forward(params, x)
    full = lstm.backward(params, cache, y)
    trunc = lstm.backward(params, cache, y, bptt_horizon=2)
    np.testing.assert_array_equal(full["Wy"], trunc["Wy"])
    assert not np.allclose(full["W"], trunc["W"])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 30.0))
def test_posterior_rows_sum_to_one(seed, spread):
    rng = np.random.default_rng(seed)
    params = LstmParams.init(5, 3, 4, seed=seed % 1000)
    for arr in params.tensors().values():
        arr += rng.normal(0, spread, arr.shape)
    p = lstm.posteriors(params, rng.normal(0, spread, size=(7, 5)))
    assert np.all(np.isfinite(p)) and p.min() >= 0
    assert np.abs(p.sum(axis=1) - 1).max() <= 1e-9


def test_zero_weights_uniform_posteriors():
    params = LstmParams.zeros(6, 4, 28)
    p = lstm.posteriors(params, np.random.default_rng(0).normal(size=(3, 6)))
    np.testing.assert_allclose(p, 1 / 28, rtol=0, atol=1e-15)
    assert lstm.loss(p, [0, 5, 27]) == pytest.approx(np.log(28), abs=1e-12)


def test_output_bias_controls_posteriors():
    params = LstmParams.zeros(2, 3, 3)
    params.by[:] = [0.0, np.log(2.0), np.log(5.0)]
    p = lstm.posteriors(params, np.ones((2, 2)))
    np.testing.assert_allclose(p[0], [1 / 8, 2 / 8, 5 / 8], atol=1e-15)


def test_perfect_prediction_has_zero_gradient():
    """Zero recurrent/input weights and a decisive output bias give ~0 gradients."""
    params = LstmParams.zeros(3, 2, 2)
    params.by[:] = [50.0, -50.0]
    x = np.random.default_rng(1).normal(size=(4, 3))
    _, cache = lstm.forward(params, x)
    grads = lstm.backward(params, cache, [0, 0, 0, 0])
    for g in grads.values():
        assert np.abs(g).max() < 1e-40


def test_forward_rejects_bad_input():
    params = LstmParams.zeros(4, 2, 3)
    with pytest.raises(ValueError, match="expected"):
        lstm.forward(params, np.zeros((3, 5)))
    with pytest.raises(ValueError, match="empty"):
        lstm.forward(params, np.zeros((0, 4)))
    bad = np.zeros((2, 4))
    bad[1, 2] = np.nan
    with pytest.raises(ValueError, match="non-finite"):
        lstm.forward(params, bad)


def test_init_invariants():
    p = LstmParams.init(10, 4, 3, seed=5)
    r = 1 / np.sqrt(14)
    assert np.abs(p.W).max() <= r
    np.testing.assert_array_equal(p.b[4:8], 1.0)
    np.testing.assert_array_equal(np.delete(p.b, range(4, 8)), 0.0)
    assert p.W_f.shape == (4, 14)
    np.testing.assert_array_equal(p.gate("f")[1], 1.0)
    q = LstmParams.init(10, 4, 3, seed=5)
    assert p.W.tobytes() == q.W.tobytes()


def test_model_file_roundtrip(tmp_path):
    p = LstmParams.init(7, 3, 4, seed=2, scaling=0.25)
    p.save(tmp_path / "m", {"config_hash": "abc"})
    q, meta = LstmParams.load(tmp_path / "m")
    assert meta["config_hash"] == "abc"
    assert q.scaling == 0.25 and q.seed == 2
    for name, arr in p.tensors().items():
        assert q.tensors()[name].tobytes() == arr.tobytes()


# ---------------------------------------------------------------- optimizer

def test_sgd_step_hand_computed():
    params = LstmParams.zeros(1, 1, 1)
    params.W[:] = 1.0
    params.b[:] = 1.0
    grads = {name: np.full_like(arr, 2.0) for name, arr in params.tensors().items()}
    vel = {name: np.full_like(arr, 0.5) for name, arr in params.tensors().items()}
    cfg = TrainConfig(learning_rate=0.5, weight_decay=0.1, momentum=0.8)
    lstm.sgd_step(params, grads, vel, cfg)
    # weights: v = 0.8*0.5 - 0.5*(2 + 0.1*1) = -0.65 ; biases skip decay: v = 0.4 - 1 = -0.6
    np.testing.assert_allclose(vel["W"], -0.65)
    np.testing.assert_allclose(params.W, 0.35)
    np.testing.assert_allclose(vel["b"], -0.6)
    np.testing.assert_allclose(params.b, 0.4)


def test_sgd_zero_gradient_pure_decay():
    params = LstmParams.zeros(1, 1, 1)
    params.Wy[:] = 2.0
    grads = {name: np.zeros_like(arr) for name, arr in params.tensors().items()}
    vel = {name: np.zeros_like(arr) for name, arr in params.tensors().items()}
    lstm.sgd_step(params, grads, vel, TrainConfig(learning_rate=0.5, weight_decay=0.001,
                                                  momentum=0.8))
    np.testing.assert_allclose(params.Wy, 2.0 - 0.5 * 0.001 * 2.0)


def _toy_dataset(seed, n_utts=20, D=4):
    """Two classes separated along the first input dimension."""
    rng = np.random.default_rng(seed)
    data = []
    for _ in range(n_utts):
        T = int(rng.integers(5, 15))
        y = rng.integers(0, 2, T)
        x = rng.normal(0, 0.3, size=(T, D))
        x[:, 0] += np.where(y == 1, 2.0, -2.0)
        data.append((x, y))
    return data


def test_separable_toy_reaches_99_percent():
    cfg = TrainConfig(max_iterations=2000, hidden_dim=8, n_classes=2, seed=0)
    params, trace = lstm.train(_toy_dataset(0), cfg)
    assert lstm.frame_accuracy(params, _toy_dataset(0)) >= 0.99
    assert trace[-100:].mean() < trace[:100].mean()


def test_training_is_deterministic():
    cfg = TrainConfig(max_iterations=60, hidden_dim=5, n_classes=2, seed=3)
    a, ta = lstm.train(_toy_dataset(1), cfg)
    b, tb = lstm.train(_toy_dataset(1), cfg)
    assert ta.tobytes() == tb.tobytes()
    for name in a.tensors():
        assert a.tensors()[name].tobytes() == b.tensors()[name].tobytes()
    c, _ = lstm.train(_toy_dataset(1), TrainConfig(max_iterations=60, hidden_dim=5,
                                                   n_classes=2, seed=4))
    assert c.W.tobytes() != a.W.tobytes()


def test_train_rejects_unlabelled():
    with pytest.raises(ValueError, match="no frame labels"):
        lstm.train([(np.zeros((2, 3)), None)], TrainConfig(max_iterations=1))


def test_scaling_applied_to_inputs():
    p = LstmParams.init(3, 2, 2, seed=0, scaling=0.5)
    q = p.copy()
    q.scaling = 1.0
    x = np.random.default_rng(0).normal(size=(4, 3))
    np.testing.assert_array_equal(lstm.posteriors(p, x), lstm.posteriors(q, 0.5 * x))
