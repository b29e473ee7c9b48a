"""
机器学习后端
常数模型、多层感知机（小批量 SGD + 反向传播）、k 近邻回归、回放缓冲区、
数据集划分与模型评估
"""
import copy
import math
from collections import deque
from dataclasses import dataclass
from typing import Callable, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger

from .models import EvalReport, TrainingError, TrainingSample

OUTPUT_ACTIVATIONS = ("identity", "exponential", "softplus")

# softplus / exp 的安全区间
_SOFTPLUS_CUTOFF = 30.0
_EXP_CLIP = 700.0


# ==================== 激活函数 ====================

def activation_eval(kind: str, z):
    """
    输出层激活函数

    identity -> z; exponential -> e^z; softplus -> ln(1+e^z)
    softplus 在 |z| > 30 时使用渐近式，避免溢出
    """
    z_arr = np.asarray(z, dtype=float)
    if kind == "identity":
        out = z_arr.copy()
    elif kind == "exponential":
        out = np.exp(np.clip(z_arr, -_EXP_CLIP, _EXP_CLIP))
    elif kind == "softplus":
        mid = np.clip(z_arr, -_SOFTPLUS_CUTOFF, _SOFTPLUS_CUTOFF)
        out = np.where(
            z_arr > _SOFTPLUS_CUTOFF, z_arr,
            np.where(z_arr < -_SOFTPLUS_CUTOFF, np.exp(np.maximum(z_arr, -_EXP_CLIP)), np.log1p(np.exp(mid)))
        )
    else:
        raise ValueError(f"未知输出激活函数: {kind}")

    if np.ndim(z) == 0:
        return float(out)
    return out


def activation_derivative(kind: str, z: np.ndarray) -> np.ndarray:
    """输出激活函数对 z 的导数"""
    if kind == "identity":
        return np.ones_like(z)
    if kind == "exponential":
        return np.exp(np.clip(z, -_EXP_CLIP, _EXP_CLIP))
    if kind == "softplus":
        # sigmoid 的稳定形式
        return 0.5 * (1.0 + np.tanh(0.5 * z))
    raise ValueError(f"未知输出激活函数: {kind}")


# ==================== 样本工具 ====================

def samples_to_arrays(samples: Sequence[TrainingSample]) -> Tuple[np.ndarray, np.ndarray]:
    """样本列表 -> (X, y)"""
    if not samples:
        return np.zeros((0, 0)), np.zeros(0)
    X = np.vstack([np.asarray(s.input_vector, dtype=float) for s in samples])
    y = np.array([s.label for s in samples], dtype=float)
    return X, y


# ==================== 常数模型 ====================

@dataclass
class ConstantModel:
    """常数模型：对任意输入预测同一个值"""
    value: float

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise ValueError("常数模型的值必须有限")

    def predict(self, x) -> float:
        return float(self.value)

    def loss(self, samples: Sequence[TrainingSample]) -> float:
        """在样本上的均方误差（不训练）"""
        if not samples:
            return 0.0
        labels = np.array([s.label for s in samples], dtype=float)
        return float(np.mean((labels - self.value) ** 2))


# ==================== 多层感知机 ====================

class MLPModel:
    """
    多层感知机
    隐藏层使用 ReLU，输出层使用 identity / exponential / softplus，输出为标量
    """

    def __init__(
        self,
        layer_sizes: Sequence[int],
        output_activation: str = "softplus",
        seed: int = 0,
        weights: Optional[List[np.ndarray]] = None,
        biases: Optional[List[np.ndarray]] = None,
    ):
        if len(layer_sizes) < 2 or layer_sizes[-1] != 1:
            raise ValueError(f"layer_sizes 至少两层且输出维度为 1，实际 {list(layer_sizes)}")
        if output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"未知输出激活函数: {output_activation}")

        self.layer_sizes = [int(s) for s in layer_sizes]
        self.output_activation = output_activation
        self.seed = seed

        if weights is None:
            # He 初始化
            rng = np.random.default_rng(seed)
            weights = [
                rng.normal(0.0, math.sqrt(2.0 / n_in), size=(n_in, n_out))
                for n_in, n_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:])
            ]
        if biases is None:
            biases = [np.zeros(n_out) for n_out in self.layer_sizes[1:]]

        self.weights = [np.asarray(w, dtype=float) for w in weights]
        self.biases = [np.asarray(b, dtype=float) for b in biases]
        self._check_shapes()

    def _check_shapes(self) -> None:
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            expected = (self.layer_sizes[i], self.layer_sizes[i + 1])
            if w.shape != expected or b.shape != (expected[1],):
                raise ValueError(f"第 {i} 层参数形状不匹配: W{w.shape} b{b.shape}，应为 {expected}")

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    def copy(self) -> "MLPModel":
        return copy.deepcopy(self)

    def parameters_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for p in self.weights + self.biases)

    # ---------- 前向 ----------

    def _forward(self, X: np.ndarray):
        """返回 (各层激活, 最后一层预激活)"""
        activations = [X]
        h = X
        last = len(self.weights) - 1
        z = None
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            if i < last:
                h = np.maximum(z, 0.0)
                activations.append(h)
        return activations, z[:, 0]

    def forward_batch(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.input_dim:
            raise ValueError(f"输入维度不匹配: {X.shape[1]} != {self.input_dim}")
        _, z = self._forward(X)
        return activation_eval(self.output_activation, z)

    def predict(self, x) -> float:
        """单样本前向传播"""
        x = np.asarray(x, dtype=float)
        if x.ndim != 1 or x.shape[0] != self.input_dim:
            raise ValueError(f"输入维度不匹配: {x.shape} != ({self.input_dim},)")
        return float(self.forward_batch(x[None, :])[0])

    # ---------- 反向 ----------

    def loss(self, X: np.ndarray, y: np.ndarray) -> float:
        """0.5 * 均方误差（训练目标）"""
        pred = self.forward_batch(X)
        return float(0.5 * np.mean((pred - y) ** 2))

    def gradients(self, X: np.ndarray, y: np.ndarray) -> Tuple[List[np.ndarray], List[np.ndarray]]:
        """
        0.5 * mean((f(x) - y)^2) 对各层参数的梯度

        Returns:
            (dW 列表, db 列表)
        """
        X = np.atleast_2d(np.asarray(X, dtype=float))
        n = X.shape[0]
        activations, z = self._forward(X)
        pred = activation_eval(self.output_activation, z)

        # 输出层误差
        delta = ((pred - y) * activation_derivative(self.output_activation, z) / n)[:, None]

        grads_w: List[np.ndarray] = [None] * len(self.weights)
        grads_b: List[np.ndarray] = [None] * len(self.biases)
        for i in range(len(self.weights) - 1, -1, -1):
            grads_w[i] = activations[i].T @ delta
            grads_b[i] = delta.sum(axis=0)
            if i > 0:
                delta = (delta @ self.weights[i].T) * (activations[i] > 0)
        return grads_w, grads_b

    def train(
        self,
        samples: Sequence[TrainingSample],
        lr: float,
        epochs: int,
        batch_size: int,
        seed: int,
        labels: Optional[np.ndarray] = None,
    ) -> "MLPModel":
        """
        小批量 SGD 训练，返回新模型（不修改自身）

        Args:
            samples: 训练样本
            labels: 可选的替代标签（例如归一化后的标签），默认使用样本标签
            seed: 每个 epoch 的打乱顺序由该种子决定
        """
        if not samples:
            raise TrainingError("MLP 训练数据为空")
        if lr <= 0:
            raise TrainingError(f"学习率必须为正: {lr}")

        X, y = samples_to_arrays(samples)
        if labels is not None:
            y = np.asarray(labels, dtype=float)
        if X.shape[1] != self.input_dim:
            raise TrainingError(f"样本维度 {X.shape[1]} 与模型输入维度 {self.input_dim} 不一致")

        model = self.copy()
        rng = np.random.default_rng(seed)
        n = X.shape[0]
        batch_size = max(1, int(batch_size))

        for epoch in range(int(epochs)):
            order = rng.permutation(n)
            for start in range(0, n, batch_size):
                idx = order[start:start + batch_size]
                gw, gb = model.gradients(X[idx], y[idx])
                for i in range(len(model.weights)):
                    model.weights[i] -= lr * gw[i]
                    model.biases[i] -= lr * gb[i]

            epoch_loss = model.loss(X, y)
            if not math.isfinite(epoch_loss) or not model.parameters_finite():
                raise TrainingError(f"第 {epoch} 个 epoch 损失非有限: {epoch_loss}")

        return model

    def state_arrays(self) -> dict:
        """导出为 npz 可保存的数组字典"""
        arrays = {"layer_sizes": np.array(self.layer_sizes)}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            arrays[f"W{i}"] = w
            arrays[f"b{i}"] = b
        return arrays


def mlp_forward(model: MLPModel, x) -> float:
    """前向传播（函数形式）"""
    return model.predict(x)


def mlp_train(
    model: MLPModel,
    data: Sequence[TrainingSample],
    lr: float,
    epochs: int,
    batch_size: int,
    seed: int,
) -> MLPModel:
    """小批量 SGD 训练（函数形式）"""
    return model.train(data, lr=lr, epochs=epochs, batch_size=batch_size, seed=seed)


# ==================== k 近邻回归 ====================

class KNNModel:
    """
    k 近邻回归（暴力扫描）
    距离为归一化输入上的欧氏距离；并列时取存储顺序靠前者
    """

    def __init__(self, inputs: np.ndarray, labels: np.ndarray, k: int = 5, normalize: bool = True):
        inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
        labels = np.asarray(labels, dtype=float)
        if k < 1:
            raise ValueError("k 必须 >= 1")
        if inputs.shape[0] != labels.shape[0]:
            raise ValueError(f"输入数 {inputs.shape[0]} 与标签数 {labels.shape[0]} 不一致")

        self.k = int(k)
        self.normalize = normalize
        self.inputs = inputs
        self.labels = labels

        if normalize and inputs.shape[0] > 0:
            self._lo = inputs.min(axis=0)
            span = inputs.max(axis=0) - self._lo
            self._scale = np.where(span > 0, span, 1.0)
        else:
            self._lo = np.zeros(inputs.shape[1])
            self._scale = np.ones(inputs.shape[1])
        self._scaled = (inputs - self._lo) / self._scale

    @classmethod
    def fit(cls, samples: Sequence[TrainingSample], k: int = 5, normalize: bool = True,
            labels: Optional[np.ndarray] = None) -> "KNNModel":
        X, y = samples_to_arrays(samples)
        if labels is not None:
            y = np.asarray(labels, dtype=float)
        return cls(X, y, k=k, normalize=normalize)

    def __len__(self) -> int:
        return self.labels.shape[0]

    def neighbors(self, x) -> np.ndarray:
        """k 个最近邻的存储下标"""
        if len(self) == 0:
            raise ValueError("k 近邻模型为空")
        x = np.asarray(x, dtype=float)
        if x.shape != (self.inputs.shape[1],):
            raise ValueError(f"输入维度不匹配: {x.shape}")
        d2 = np.sum(((x - self._lo) / self._scale - self._scaled) ** 2, axis=1)
        k = min(self.k, len(self))
        return np.argsort(d2, kind="stable")[:k]

    def predict(self, x) -> float:
        return float(np.mean(self.labels[self.neighbors(x)]))


def knn_predict(model: KNNModel, x) -> float:
    """k 近邻预测（函数形式）"""
    return model.predict(x)


# ==================== 回放缓冲区 ====================

class ReplayBuffer:
    """
    回放缓冲区
    按迭代保存样本批次，只保留最近 W 批，防止灾难性遗忘
    """

    def __init__(self, window: int = 4):
        if window < 1:
            raise ValueError("回放窗口 W 必须 >= 1")
        self.window = int(window)
        self._batches: deque = deque(maxlen=self.window)
        self._total_batches = 0

    def append(self, batch: Iterable[TrainingSample]) -> None:
        self._batches.append(list(batch))
        self._total_batches += 1

    @property
    def batches(self) -> List[List[TrainingSample]]:
        return [list(b) for b in self._batches]

    def samples(self) -> List[TrainingSample]:
        """窗口内所有样本（按到达顺序）"""
        return [s for batch in self._batches for s in batch]

    def __len__(self) -> int:
        return len(self._batches)

    @property
    def total_batches(self) -> int:
        return self._total_batches


# ==================== 划分与评估 ====================

def split_dataset(data: Sequence, test_fraction: float, seed: int) -> Tuple[list, list]:
    """
    随机划分训练集/测试集

    测试集大小 ceil(n*f)，训练集为其余 n - ceil(n*f) 个（可能为空），排列由 seed 决定
    """
    n = len(data)
    if n < 2:
        raise ValueError(f"样本数不足以划分: {n}")
    if not 0 < test_fraction < 1:
        raise ValueError(f"test_fraction 必须在 (0,1): {test_fraction}")

    n_test = math.ceil(n * test_fraction)
    perm = np.random.default_rng(seed).permutation(n)
    test_idx = sorted(perm[:n_test].tolist())
    train_idx = sorted(perm[n_test:].tolist())
    return [data[i] for i in train_idx], [data[i] for i in test_idx]


Predictor = Union[Callable[[np.ndarray], float], object]


def _predict_fn(model: Predictor) -> Callable[[np.ndarray], float]:
    for attr in ("predict_vector", "predict"):
        fn = getattr(model, attr, None)
        if fn is not None:
            return fn
    if callable(model):
        return model
    raise TypeError(f"对象不可用于预测: {type(model).__name__}")


def evaluate(model: Predictor, test: Sequence[TrainingSample]) -> EvalReport:
    """
    在测试集上评估模型

    Args:
        model: 具有 predict_vector / predict 方法的模型，或可调用对象
        test: 测试样本
    """
    if not test:
        raise ValueError("测试集为空")

    fn = _predict_fn(model)
    preds = np.array([fn(s.input_vector) for s in test], dtype=float)
    labels = np.array([s.label for s in test], dtype=float)
    err = preds - labels
    report = EvalReport(
        mse=float(np.mean(err ** 2)),
        mae=float(np.mean(np.abs(err))),
        scatter=[(float(p), float(t)) for p, t in zip(preds, labels)],
    )
    logger.debug(f"评估完成: n={len(test)} mse={report.mse:.6g} mae={report.mae:.6g}")
    return report
