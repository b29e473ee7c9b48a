"""
机器学习后端测试
"""
import math

import numpy as np
import pytest

from src.ml_backends import (
    ConstantModel, KNNModel, MLPModel, ReplayBuffer, activation_eval, evaluate, knn_predict,
    mlp_forward, mlp_train, split_dataset,
)
from src.models import TrainingError, TrainingSample


def _samples(X, y):
    return [TrainingSample(np.asarray(x, dtype=float), float(v), i, i + 1) for i, (x, v) in enumerate(zip(X, y))]


# ==================== 激活函数 ====================

def test_activation_closed_forms():
    assert activation_eval("softplus", 0.0) == pytest.approx(math.log(2))
    assert activation_eval("exponential", 0.0) == pytest.approx(1.0)
    assert activation_eval("identity", -3.5) == -3.5


def test_softplus_does_not_overflow():
    assert abs(activation_eval("softplus", 50.0) - 50.0) < 1e-9
    assert activation_eval("softplus", 1000.0) == pytest.approx(1000.0)
    assert 0.0 <= activation_eval("softplus", -1000.0) < 1e-12


def test_unknown_activation():
    with pytest.raises(ValueError):
        activation_eval("tanh", 0.0)


# ==================== 前向传播 ====================

def test_zero_network_predicts_zero():
    model = MLPModel(
        [3, 4, 1], "identity",
        weights=[np.zeros((3, 4)), np.zeros((4, 1))],
        biases=[np.zeros(4), np.zeros(1)],
    )
    for x in ([0.0, 0.0, 0.0], [1.0, -2.0, 3.0], [100.0, 5.0, -7.0]):
        assert model.predict(x) == 0.0


def test_bias_only_network():
    model = MLPModel(
        [2, 3, 1], "softplus",
        weights=[np.zeros((2, 3)), np.zeros((3, 1))],
        biases=[np.zeros(3), np.array([0.7])],
    )
    assert model.predict([0.3, -0.4]) == pytest.approx(math.log1p(math.exp(0.7)))


def test_forward_matches_straight_line_arithmetic():
    model = MLPModel([4, 5, 3, 1], "exponential", seed=7)
    x = [0.2, -0.5, 0.9, 0.1]

    h = list(x)
    for layer, (w, b) in enumerate(zip(model.weights, model.biases)):
        out = []
        for j in range(w.shape[1]):
            z = b[j] + sum(h[i] * w[i, j] for i in range(w.shape[0]))
            out.append(z if layer == len(model.weights) - 1 else max(z, 0.0))
        h = out
    expected = math.exp(h[0])

    assert mlp_forward(model, x) == pytest.approx(expected, rel=1e-12)


def test_forward_rejects_wrong_dimension():
    model = MLPModel([3, 2, 1], seed=0)
    with pytest.raises(ValueError):
        model.predict([1.0, 2.0])


def test_layer_sizes_must_end_with_scalar_output():
    with pytest.raises(ValueError):
        MLPModel([3, 2])


# ==================== 训练 ====================

def test_single_sgd_step_by_hand():
    model = MLPModel([1, 1], "identity", weights=[np.zeros((1, 1))], biases=[np.zeros(1)])
    trained = model.train(_samples([[1.0]], [1.0]), lr=0.1, epochs=1, batch_size=1, seed=0)

    assert trained.weights[0][0, 0] == pytest.approx(0.1)
    assert trained.biases[0][0] == pytest.approx(0.1)
    # 原模型不变
    assert model.weights[0][0, 0] == 0.0


def test_fits_a_line():
    xs = np.linspace(0.0, 1.0, 50)
    data = _samples(xs[:, None], 2 * xs + 1)
    model = MLPModel([1, 16, 1], "identity", seed=3)
    trained = mlp_train(model, data, lr=0.02, epochs=2000, batch_size=10, seed=0)

    pred = trained.forward_batch(xs[:, None])
    assert float(np.mean((pred - (2 * xs + 1)) ** 2)) < 1e-2


def test_training_is_deterministic():
    rng = np.random.default_rng(11)
    X = rng.random((40, 3))
    data = _samples(X, X.sum(axis=1))
    a = MLPModel([3, 8, 1], "softplus", seed=5).train(data, lr=0.05, epochs=20, batch_size=8, seed=9)
    b = MLPModel([3, 8, 1], "softplus", seed=5).train(data, lr=0.05, epochs=20, batch_size=8, seed=9)

    for wa, wb in zip(a.weights + a.biases, b.weights + b.biases):
        assert np.array_equal(wa, wb)


def test_training_rejects_empty_data():
    with pytest.raises(TrainingError):
        MLPModel([2, 3, 1]).train([], lr=0.1, epochs=1, batch_size=1, seed=0)


def test_training_rejects_divergence():
    data = _samples([[10.0]], [1.0])
    with pytest.raises(TrainingError):
        MLPModel([1, 1], "identity", weights=[np.ones((1, 1))], biases=[np.zeros(1)]).train(
            data, lr=1e6, epochs=100, batch_size=1, seed=0
        )


@pytest.mark.parametrize("activation", ["identity", "exponential", "softplus"])
def test_gradient_check(activation):
    """解析梯度与中心差分梯度一致（20 个随机网络）"""
    eps = 1e-6
    for seed in range(20):
        rng = np.random.default_rng(seed)
        model = MLPModel([3, 5, 4, 1], activation, seed=seed)
        for b in model.biases:
            b += rng.normal(0.0, 0.1, size=b.shape)
        X = rng.normal(size=(6, 3))
        y = rng.random(6)

        grads_w, grads_b = model.gradients(X, y)
        analytic, numeric = [], []
        for params, grads in ((model.weights, grads_w), (model.biases, grads_b)):
            for p, g in zip(params, grads):
                for idx in np.ndindex(p.shape):
                    old = p[idx]
                    p[idx] = old + eps
                    up = model.loss(X, y)
                    p[idx] = old - eps
                    down = model.loss(X, y)
                    p[idx] = old
                    numeric.append((up - down) / (2 * eps))
                    analytic.append(g[idx])

        analytic, numeric = np.array(analytic), np.array(numeric)
        denom = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12)
        assert np.linalg.norm(analytic - numeric) / denom < 1e-4, f"seed {seed}"


def test_state_arrays_layout():
    arrays = MLPModel([2, 3, 1], seed=0).state_arrays()
    assert list(arrays["layer_sizes"]) == [2, 3, 1]
    assert arrays["W0"].shape == (2, 3)
    assert arrays["b1"].shape == (1,)


# ==================== 常数模型 ====================

def test_constant_model():
    model = ConstantModel(100.0)
    assert model.predict([1, 2, 3]) == 100.0
    assert model.loss(_samples([[0.0], [0.0]], [100.0, 102.0])) == pytest.approx(2.0)
    with pytest.raises(ValueError):
        ConstantModel(float("nan"))


# ==================== k 近邻 ====================

def test_knn_two_nearest():
    model = KNNModel(np.array([[0.0], [1.0], [2.0]]), np.array([0.0, 1.0, 2.0]), k=2)
    assert knn_predict(model, [0.4]) == pytest.approx(0.5)


def test_knn_exact_match():
    X = np.array([[0.0, 0.0], [1.0, 0.5], [0.3, 0.9]])
    model = KNNModel(X, np.array([5.0, 6.0, 7.0]), k=1)
    assert model.predict([1.0, 0.5]) == 6.0


def test_knn_ties_prefer_stored_order():
    model = KNNModel(np.array([[0.0], [2.0]]), np.array([10.0, 20.0]), k=1, normalize=False)
    assert model.predict([1.0]) == 10.0


def test_knn_k_larger_than_store():
    model = KNNModel(np.array([[0.0], [1.0]]), np.array([1.0, 3.0]), k=5)
    assert model.predict([0.2]) == pytest.approx(2.0)


@pytest.mark.parametrize("normalize", [True, False])
def test_knn_matches_exhaustive_scan(normalize):
    rng = np.random.default_rng(2024)
    X = rng.random((500, 3)) * np.array([1.0, 10.0, 100.0])
    y = rng.normal(size=500)
    queries = rng.random((50, 3)) * np.array([1.0, 10.0, 100.0])
    model = KNNModel(X, y, k=5, normalize=normalize)

    lo = X.min(axis=0) if normalize else np.zeros(3)
    scale = (X.max(axis=0) - X.min(axis=0)) if normalize else np.ones(3)
    for q in queries:
        dists = []
        for i in range(len(X)):
            dists.append((sum(((q[j] - lo[j]) / scale[j] - (X[i, j] - lo[j]) / scale[j]) ** 2
                              for j in range(3)), i))
        nearest = [i for _, i in sorted(dists)[:5]]
        assert model.predict(q) == pytest.approx(float(np.mean(y[nearest])), rel=1e-12)


def test_knn_empty_model():
    model = KNNModel(np.zeros((0, 2)), np.zeros(0), k=3)
    assert len(model) == 0
    with pytest.raises(ValueError):
        model.predict([0.0, 0.0])


# ==================== 划分与评估 ====================

def test_split_sizes_and_determinism():
    data = list(range(10))
    train, test = split_dataset(data, 0.2, seed=4)
    assert (len(train), len(test)) == (8, 2)
    assert sorted(train + test) == data
    assert split_dataset(data, 0.2, seed=4) == (train, test)


@pytest.mark.parametrize("n, fraction, sizes", [(2, 0.9, (0, 2)), (3, 0.5, (1, 2)), (7, 0.1, (6, 1))])
def test_split_test_size_is_ceiling(n, fraction, sizes):
    train, test = split_dataset(list(range(n)), fraction, seed=0)
    assert (len(train), len(test)) == sizes


def test_split_needs_two_samples():
    with pytest.raises(ValueError):
        split_dataset([1], 0.2, seed=0)


def test_evaluate_examples():
    perfect = evaluate(ConstantModel(3.0), _samples([[0.0], [1.0]], [3.0, 3.0]))
    assert perfect.mse == 0.0

    report = evaluate(ConstantModel(0.0), _samples([[0.0], [1.0]], [1.0, -1.0]))
    assert report.mse == pytest.approx(1.0)
    assert report.mae == pytest.approx(1.0)
    assert report.scatter == [(0.0, 1.0), (0.0, -1.0)]


def test_evaluate_mae_squared_bounded_by_mse():
    rng = np.random.default_rng(8)
    X = rng.random((30, 2))
    model = MLPModel([2, 4, 1], "identity", seed=1)
    report = evaluate(model, _samples(X, rng.normal(size=30)))
    assert report.mae ** 2 <= report.mse + 1e-12


def test_evaluate_empty_test_set():
    with pytest.raises(ValueError):
        evaluate(ConstantModel(1.0), [])


# ==================== 回放缓冲区 ====================

def test_replay_buffer_keeps_last_window():
    buffer = ReplayBuffer(window=2)
    for k in range(3):
        buffer.append(_samples([[float(k)]] * 2, [float(k)] * 2))

    assert len(buffer) == 2
    assert buffer.total_batches == 3
    assert [s.label for s in buffer.samples()] == [1.0, 1.0, 2.0, 2.0]


def test_replay_buffer_window_must_be_positive():
    with pytest.raises(ValueError):
        ReplayBuffer(window=0)
