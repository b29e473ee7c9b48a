"""
估计器框架
声明估计器（输入、未来输出、时间范围、有效性守卫），
从运行中的仿真采集时间平移的训练样本，并通过可插拔后端提供预测
"""
import heapq
import math
from dataclasses import dataclass, replace
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from .config_manager import BackendConfig, EstimatorConfig, FeatureConfig
from .ml_backends import (
    ConstantModel, KNNModel, MLPModel, ReplayBuffer, evaluate, samples_to_arrays
)
from .models import (
    EstimatorError, EvalReport, PendingSample, TrainingError, TrainingReport, TrainingSample
)
from .snapshot_history import Snapshot, SnapshotHistory


# ==================== 声明类型 ====================

@dataclass(frozen=True)
class FeatureSpec:
    """
    特征声明
    extractor 为快照字段名；categories 非空时做 one-hot 编码
    """
    name: str
    extractor: str
    normalization: str = "none"              # none | minmax
    range: Tuple[float, float] = (0.0, 1.0)
    categories: Optional[Tuple[str, ...]] = None

    @property
    def dim(self) -> int:
        return len(self.categories) if self.categories else 1

    def encode(self, snapshot: Snapshot) -> List[float]:
        if self.extractor not in snapshot:
            raise EstimatorError(f"快照缺少字段 {self.extractor}（特征 {self.name}）")
        raw = snapshot[self.extractor]
        if self.categories:
            return [1.0 if raw == c else 0.0 for c in self.categories]
        return [self.normalize(float(raw))]

    def normalize(self, value: float) -> float:
        if self.normalization == "minmax":
            lo, hi = self.range
            return (value - lo) / (hi - lo)
        return value

    def denormalize(self, value: float) -> float:
        if self.normalization == "minmax":
            lo, hi = self.range
            return lo + value * (hi - lo)
        return value


@dataclass(frozen=True)
class ValidityGuard:
    """
    有效性守卫
    对 (t_observed, t_observed + Δ] 内的快照序列做纯判定
    """
    kind: str = "always_valid"               # always_valid | mode_never
    mode: Optional[str] = None

    @classmethod
    def always_valid(cls) -> "ValidityGuard":
        return cls("always_valid")

    @classmethod
    def mode_never(cls, mode: str) -> "ValidityGuard":
        return cls("mode_never", mode)

    def holds_over(self, snapshots: Sequence[Snapshot]) -> bool:
        """在显式快照序列上判定"""
        if self.kind == "always_valid":
            return True
        return all(s.get("mode") != self.mode for s in snapshots)

    def holds(self, history: SnapshotHistory, entity_id: str, t0: int, t1: int) -> bool:
        """在历史上判定 (t0, t1]，与 holds_over(history.window(t0+1, t1)) 等价"""
        if self.kind == "always_valid":
            return True
        return history.count_mode(entity_id, self.mode, t0, t1) == 0


@dataclass(frozen=True)
class LabelSpec:
    """
    标签来源
    future_value: t_observed + Δ 时刻的输出特征
    until_mode: 实体第一次进入 mode 时解析；value=elapsed 为经过的 tick 数，
                value=feature 为进入前最后一个 tick 的输出特征
    """
    kind: str = "future_value"
    mode: str = "CHARGING"
    value: str = "feature"


@dataclass(frozen=True)
class BackendSpec:
    """预测后端"""
    kind: str                                # constant | mlp | knn
    value: float = 0.0
    k: int = 5
    knn_normalize: bool = True
    hidden_layers: Tuple[int, ...] = (32, 32)
    output_activation: str = "softplus"
    learning_rate: float = 0.01
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0


@dataclass(frozen=True)
class EstimatorSpec:
    """估计器声明"""
    id: str
    inputs: Tuple[FeatureSpec, ...]
    output: FeatureSpec
    horizon: Tuple[int, int]
    guard: ValidityGuard = ValidityGuard()
    backend: BackendSpec = BackendSpec("constant")
    bootstrap_value: float = 0.0
    label: LabelSpec = LabelSpec()
    entity: str = "drone"                    # drone | field
    trigger: str = "tick"                    # tick | enqueue | release
    observe_every: int = 1

    @property
    def multi_horizon(self) -> bool:
        return self.label.kind == "future_value" and self.horizon[0] < self.horizon[1]


# ==================== 估计器句柄 ====================

class EstimatorHandle:
    """
    已声明的估计器
    包含后端模型、待解析样本账本、回放缓冲区；未训练时预测 bootstrap_value
    """

    def __init__(self, spec: EstimatorSpec, replay_window: int = 4):
        self.spec = spec
        self.model = None
        self.trained = False
        self.buffer = ReplayBuffer(replay_window)
        self.updates = 0

        # 待解析账本: 到期 tick 的最小堆 (due, seq, PendingSample)；until_mode 样本单独保存
        self._due_heap: List[Tuple[int, int, PendingSample]] = []
        self._event_pending: Dict[int, PendingSample] = {}
        self._seq = 0

        # 本次运行采集的样本
        self.collected: List[TrainingSample] = []

        # 统计
        self._stats = {
            "observed": 0,
            "resolved": 0,
            "discarded": 0,
            "timed_out": 0,
        }
        self._pred_sum = 0.0
        self._pred_count = 0

    # ---------- 属性 ----------

    @property
    def id(self) -> str:
        return self.spec.id

    @property
    def horizon(self) -> Tuple[int, int]:
        return self.spec.horizon

    @property
    def feature_dim(self) -> int:
        """声明输入的维度（one-hot 展开后）"""
        return sum(f.dim for f in self.spec.inputs)

    @property
    def input_dim(self) -> int:
        """模型输入维度（多时间范围时附加 Δ/Δmax）"""
        return self.feature_dim + (1 if self.spec.multi_horizon else 0)

    @property
    def pending(self) -> List[PendingSample]:
        items = [p for _, _, p in sorted(self._due_heap, key=lambda e: (e[0], e[1]))]
        items.extend(self._event_pending[k] for k in sorted(self._event_pending))
        return items

    @property
    def pending_count(self) -> int:
        return len(self._due_heap) + len(self._event_pending)

    def get_stats(self) -> Dict[str, int]:
        return dict(self._stats)

    @property
    def mean_prediction(self) -> Optional[float]:
        if self._pred_count == 0:
            return None
        return self._pred_sum / self._pred_count

    def reset_run_state(self) -> None:
        """开始新一次仿真前清空账本、采集样本和统计（模型保留）"""
        self._due_heap.clear()
        self._event_pending.clear()
        self.collected = []
        for key in self._stats:
            self._stats[key] = 0
        self._pred_sum = 0.0
        self._pred_count = 0

    # ---------- 输入编码 ----------

    def _check_delta(self, delta: Optional[int]) -> Optional[int]:
        if self.spec.label.kind != "future_value":
            return None
        lo, hi = self.spec.horizon
        if delta is None:
            if lo != hi:
                raise EstimatorError(f"估计器 {self.id} 需要指定 delta ∈ [{lo}, {hi}]")
            return lo
        if not lo <= delta <= hi:
            raise EstimatorError(f"估计器 {self.id} 的 delta={delta} 超出范围 [{lo}, {hi}]")
        return int(delta)

    def encode(self, snapshot: Snapshot, delta: Optional[int] = None) -> np.ndarray:
        """提取并归一化输入向量（多时间范围时附加 Δ/Δmax）"""
        values: List[float] = []
        for feature in self.spec.inputs:
            values.extend(feature.encode(snapshot))
        if self.spec.multi_horizon:
            values.append(delta / self.spec.horizon[1])
        return np.array(values, dtype=float)

    def input_feature(self, vector: np.ndarray, name: str) -> float:
        """从输入向量取回某个数值特征的原始值"""
        offset = 0
        for feature in self.spec.inputs:
            if feature.name == name:
                if feature.categories:
                    raise EstimatorError(f"特征 {name} 为分类特征")
                return feature.denormalize(float(vector[offset]))
            offset += feature.dim
        raise EstimatorError(f"估计器 {self.id} 没有特征 {name}")

    # ---------- observe ----------

    def observe(self, snapshot: Snapshot, t: int, delta: Optional[int] = None,
                entity_id: str = "") -> PendingSample:
        """
        记录一次观测，生成待解析样本

        Args:
            snapshot: 实体快照
            t: 观测 tick
            delta: 未来偏移（future_value 必须在 horizon 内；until_mode 忽略）
            entity_id: 实体标识（默认取快照中的 entity_id）
        """
        delta = self._check_delta(delta)
        entity = entity_id or str(snapshot.get("entity_id", ""))
        pending = PendingSample(
            input_vector=self.encode(snapshot, delta),
            delta=delta,
            t_observed=t,
            entity_id=entity,
            horizon_feature=self.spec.multi_horizon,
        )
        self._seq += 1
        if delta is None:
            self._event_pending[self._seq] = pending
        else:
            heapq.heappush(self._due_heap, (pending.due, self._seq, pending))
        self._stats["observed"] += 1
        return pending

    # ---------- resolve_pending ----------

    def resolve_pending(self, history: SnapshotHistory, t_now: int) -> List[TrainingSample]:
        """
        解析已到期的待解析样本

        守卫成立时生成训练样本，否则丢弃并计数；结果同时追加到本次运行的 collected
        """
        resolved: List[TrainingSample] = []

        while self._due_heap and self._due_heap[0][0] <= t_now:
            due, _, pending = self._due_heap[0]
            # 历史不完整时抛出异常，样本留在账本中
            sample = self._resolve_future_value(history, pending, due)
            heapq.heappop(self._due_heap)
            if sample is None:
                self._stats["discarded"] += 1
            else:
                resolved.append(sample)

        for key in sorted(self._event_pending):
            pending = self._event_pending[key]
            outcome = self._resolve_until_mode(history, pending, t_now)
            if outcome == "pending":
                continue
            del self._event_pending[key]
            if isinstance(outcome, TrainingSample):
                resolved.append(outcome)
            elif outcome == "timeout":
                self._stats["timed_out"] += 1
                self._stats["discarded"] += 1
            else:
                self._stats["discarded"] += 1

        self._stats["resolved"] += len(resolved)
        self.collected.extend(resolved)
        return resolved

    def _resolve_future_value(self, history: SnapshotHistory, pending: PendingSample,
                              due: int) -> Optional[TrainingSample]:
        entity = pending.entity_id
        if not history.covers(entity, pending.t_observed, due):
            raise EstimatorError(f"缺少实体 {entity} 在 [{pending.t_observed}, {due}] 的历史")
        if not self.spec.guard.holds(history, entity, pending.t_observed, due):
            return None
        label = float(history.get(entity, due)[self.spec.output.extractor])
        return TrainingSample(pending.input_vector, label, pending.t_observed, due, entity)

    def _resolve_until_mode(self, history: SnapshotHistory, pending: PendingSample, t_now: int):
        entity = pending.entity_id
        t0 = pending.t_observed
        if not history.covers(entity, t0, t_now):
            raise EstimatorError(f"缺少实体 {entity} 在 [{t0}, {t_now}] 的历史")

        target = self.spec.label.mode
        t_event = history.first_mode_tick(entity, target, t0, t_now)
        t_dead = history.first_mode_tick(entity, "TERMINATED", t0, t_now)
        if t_dead is not None and (t_event is None or t_dead < t_event):
            return "discard"
        if t_event is None:
            if t_now - t0 > self.spec.horizon[1]:
                return "timeout"
            return "pending"

        if self.spec.label.value == "elapsed":
            t_label, label = t_event, float(t_event - t0)
        else:
            # 进入目标模式前的最后一个 tick
            t_label = t_event - 1
            if t_label <= t0:
                return "discard"
            if not self.spec.guard.holds(history, entity, t0, t_label):
                return "discard"
            label = float(history.get(entity, t_label)[self.spec.output.extractor])

        if t_label - t0 > self.spec.horizon[1]:
            return "timeout"
        return TrainingSample(pending.input_vector, label, t0, t_label, entity)

    # ---------- predict ----------

    def predict_vector(self, x: np.ndarray) -> float:
        """在已编码输入向量上预测（原始输出单位）"""
        if not self.trained or self.model is None:
            return float(self.spec.bootstrap_value)
        if isinstance(self.model, ConstantModel):
            return self.model.predict(x)
        value = self.spec.output.denormalize(self.model.predict(x))
        if not math.isfinite(value):
            raise EstimatorError(f"估计器 {self.id} 输出非有限值")
        return value

    def predict(self, snapshot: Snapshot, delta: Optional[int] = None) -> float:
        """
        预测快照对应实体在 delta 之后的输出

        未训练时返回 bootstrap_value
        """
        delta = self._check_delta(delta)
        value = self.predict_vector(self.encode(snapshot, delta))
        self._pred_sum += value
        self._pred_count += 1
        return value

    # ---------- train_update ----------

    def _normalized_labels(self, samples: Sequence[TrainingSample]) -> np.ndarray:
        return np.array([self.spec.output.normalize(s.label) for s in samples], dtype=float)

    def train_update(self, new_data: Sequence[TrainingSample],
                     hyper: Optional[BackendSpec] = None) -> TrainingReport:
        """
        追加一轮数据到回放缓冲区，并在最近 W 轮数据上训练后端

        Args:
            new_data: 本轮新数据
            hyper: 覆盖声明中的后端超参数
        """
        backend = hyper or self.spec.backend
        if backend.kind != "constant" and not new_data:
            raise TrainingError(f"估计器 {self.id} 的 {backend.kind} 后端训练数据为空")

        self.buffer.append(new_data)
        data = self.buffer.samples()

        if backend.kind == "constant":
            self.model = ConstantModel(backend.value)
            self.trained = True
            self.updates += 1
            return TrainingReport(n_samples=len(data), final_loss=self.model.loss(data))

        labels = self._normalized_labels(data)
        if backend.kind == "knn":
            model = KNNModel.fit(data, k=backend.k, normalize=backend.knn_normalize, labels=labels)
            X, _ = samples_to_arrays(data)
            preds = np.array([model.predict(x) for x in X])
            loss = float(np.mean((preds - labels) ** 2))
        elif backend.kind == "mlp":
            # 每次更新都从同一初始化重新训练，模型只取决于回放窗口内的数据
            base = MLPModel(
                [self.input_dim, *backend.hidden_layers, 1],
                output_activation=backend.output_activation,
                seed=backend.seed,
            )
            model = base.train(
                data,
                lr=backend.learning_rate,
                epochs=backend.epochs,
                batch_size=backend.batch_size,
                seed=backend.seed + self.updates,
                labels=labels,
            )
            X, _ = samples_to_arrays(data)
            loss = float(np.mean((model.forward_batch(X) - labels) ** 2))
        else:
            raise EstimatorError(f"未知后端: {backend.kind}")

        self.model = model
        self.trained = True
        self.updates += 1
        logger.debug(f"估计器 {self.id} 第 {self.updates} 次更新: n={len(data)} loss={loss:.6g}")
        return TrainingReport(n_samples=len(data), final_loss=loss)

    def evaluate(self, test: Sequence[TrainingSample]) -> EvalReport:
        """在原始输出单位上评估"""
        return evaluate(self, test)

    def model_arrays(self) -> Dict[str, np.ndarray]:
        """导出模型参数（npz）"""
        arrays: Dict[str, np.ndarray] = {
            "trained": np.array(self.trained),
            "bootstrap_value": np.array(self.spec.bootstrap_value),
        }
        if isinstance(self.model, MLPModel):
            arrays.update(self.model.state_arrays())
        elif isinstance(self.model, KNNModel):
            arrays.update({"inputs": self.model.inputs, "labels": self.model.labels,
                           "k": np.array(self.model.k)})
        elif isinstance(self.model, ConstantModel):
            arrays["value"] = np.array(self.model.value)
        return arrays


def make_estimator(spec: EstimatorSpec, replay_window: int = 4) -> EstimatorHandle:
    """
    创建估计器句柄

    校验 1 <= Δmin <= Δmax、输入特征名唯一、bootstrap_value 有限
    """
    lo, hi = spec.horizon
    if not 1 <= lo <= hi:
        raise EstimatorError(f"估计器 {spec.id} 的 horizon 非法: {spec.horizon}")
    names = [f.name for f in spec.inputs]
    if len(names) != len(set(names)):
        raise EstimatorError(f"估计器 {spec.id} 的输入特征名重复: {names}")
    if not math.isfinite(spec.bootstrap_value):
        raise EstimatorError(f"估计器 {spec.id} 的 bootstrap_value 必须有限")
    if spec.backend.kind not in ("constant", "mlp", "knn"):
        raise EstimatorError(f"估计器 {spec.id} 的后端未知: {spec.backend.kind}")
    if spec.label.kind not in ("future_value", "until_mode"):
        raise EstimatorError(f"估计器 {spec.id} 的标签类型未知: {spec.label.kind}")
    return EstimatorHandle(spec, replay_window=replay_window)


# ==================== 从配置构建 ====================

def _feature_from_config(cfg: FeatureConfig) -> FeatureSpec:
    lo, hi = cfg.range
    if cfg.normalization == "minmax" and hi <= lo:
        raise EstimatorError(f"特征 {cfg.name} 的范围非法: {cfg.range}")
    return FeatureSpec(
        name=cfg.name,
        extractor=cfg.source or cfg.name,
        normalization=cfg.normalization,
        range=(float(lo), float(hi)),
        categories=tuple(cfg.categories) if cfg.categories else None,
    )


def backend_from_config(cfg: BackendConfig) -> BackendSpec:
    return BackendSpec(
        kind=cfg.kind,
        value=cfg.value,
        k=cfg.k,
        knn_normalize=cfg.knn_normalize,
        hidden_layers=tuple(cfg.mlp.hidden_layers),
        output_activation=cfg.mlp.output_activation,
        learning_rate=cfg.mlp.learning_rate,
        epochs=cfg.mlp.epochs,
        batch_size=cfg.mlp.batch_size,
        seed=cfg.mlp.seed,
    )


def spec_from_config(estimator_id: str, cfg: EstimatorConfig) -> EstimatorSpec:
    """由配置节构建估计器声明"""
    guard = (ValidityGuard.mode_never(cfg.guard.mode) if cfg.guard.kind == "mode_never"
             else ValidityGuard.always_valid())
    return EstimatorSpec(
        id=estimator_id,
        inputs=tuple(_feature_from_config(f) for f in cfg.inputs),
        output=_feature_from_config(cfg.output),
        horizon=(int(cfg.horizon[0]), int(cfg.horizon[1])),
        guard=guard,
        backend=backend_from_config(cfg.backend),
        bootstrap_value=cfg.bootstrap_value,
        label=LabelSpec(kind=cfg.label.kind, mode=cfg.label.mode, value=cfg.label.value),
        entity=cfg.entity,
        trigger=cfg.trigger,
        observe_every=cfg.observe_every,
    )


def build_estimator(estimator_id: str, estimators: Mapping[str, EstimatorConfig],
                    replay_window: int = 4, seed_offset: int = 0, **overrides) -> EstimatorHandle:
    """
    按 id 从配置创建估计器句柄

    Args:
        seed_offset: 加到后端种子上（模型初始化与打乱顺序）
        overrides: 替换 EstimatorSpec 的字段（例如 backend、guard、bootstrap_value）
    """
    if estimator_id not in estimators:
        raise EstimatorError(f"配置中没有估计器 {estimator_id}")
    spec = spec_from_config(estimator_id, estimators[estimator_id])
    if seed_offset:
        spec = replace(spec, backend=replace(spec.backend, seed=spec.backend.seed + seed_offset))
    if overrides:
        spec = replace(spec, **overrides)
    return make_estimator(spec, replay_window=replay_window)


def constant_estimator(estimator_id: str, value: float, horizon: Tuple[int, int] = (1, 1440),
                       inputs: Tuple[FeatureSpec, ...] = ()) -> EstimatorHandle:
    """常数估计器（基线）：bootstrap 与常数相同，训练不改变预测"""
    spec = EstimatorSpec(
        id=estimator_id,
        inputs=inputs,
        output=FeatureSpec(name="value", extractor="value"),
        horizon=horizon,
        backend=BackendSpec("constant", value=value),
        bootstrap_value=value,
        label=LabelSpec(kind="until_mode"),
    )
    return make_estimator(spec)


def dataset_header(handle: EstimatorHandle) -> List[str]:
    """数据集 CSV 表头: t_observed,t_resolved,<输入名...>,label"""
    names: List[str] = []
    for feature in handle.spec.inputs:
        if feature.categories:
            names.extend(f"{feature.name}_{c}" for c in feature.categories)
        else:
            names.append(feature.name)
    if handle.spec.multi_horizon:
        names.append("delta_fraction")
    return ["t_observed", "t_resolved", *names, "label"]
