"""
数据模型定义
定义仿真、估计器和实验中使用的所有数据结构
"""
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np


# ==================== 异常 ====================

class SFPSError(Exception):
    """所有领域异常的基类"""


class ConfigError(SFPSError, ValueError):
    """配置错误（CLI 返回码 2）"""


class EstimatorError(SFPSError, ValueError):
    """估计器声明或调用错误"""


class TrainingError(SFPSError, RuntimeError):
    """训练失败（空数据、损失非有限）"""


class SimulationError(SFPSError, RuntimeError):
    """仿真状态错误"""


# ==================== 枚举 ====================

class DroneMode(Enum):
    """无人机模式"""
    IDLE = "IDLE"
    PROTECTING = "PROTECTING"
    MOVING_TO_CHARGER = "MOVING_TO_CHARGER"
    CHARGING = "CHARGING"
    TERMINATED = "TERMINATED"


# 模式编码顺序（时间序列与 one-hot 使用）
MODE_ORDER: List[DroneMode] = list(DroneMode)
MODE_CODES: Dict[DroneMode, int] = {m: i for i, m in enumerate(MODE_ORDER)}

# 允许的模式转换
ALLOWED_TRANSITIONS = {
    (DroneMode.PROTECTING, DroneMode.MOVING_TO_CHARGER),
    (DroneMode.IDLE, DroneMode.MOVING_TO_CHARGER),
    (DroneMode.MOVING_TO_CHARGER, DroneMode.PROTECTING),
    (DroneMode.MOVING_TO_CHARGER, DroneMode.IDLE),
    (DroneMode.MOVING_TO_CHARGER, DroneMode.CHARGING),
    (DroneMode.CHARGING, DroneMode.PROTECTING),
} | {(m, DroneMode.TERMINATED) for m in DroneMode if m != DroneMode.TERMINATED}


class BirdState(Enum):
    """鸟状态"""
    IDLE = "IDLE"
    ATTACKING = "ATTACKING"
    FLEEING = "FLEEING"


class Decision(Enum):
    """适应规则的决策"""
    STAY = "STAY"
    ENQUEUE = "ENQUEUE"
    FLY_TO_CHARGER = "FLY_TO_CHARGER"
    PROTECT = "PROTECT"


# ==================== 仿真实体 ====================

@dataclass
class Drone:
    """
    无人机
    battery 始终在 [0,1]，TERMINATED 为吸收态
    """
    id: int
    position: Tuple[float, float]
    hover_point: Tuple[float, float]
    battery: float = 1.0
    mode: DroneMode = DroneMode.PROTECTING
    queued: bool = False
    enqueued_at: Optional[int] = None        # 进入队列的 tick

    @property
    def alive(self) -> bool:
        return self.mode != DroneMode.TERMINATED

    @property
    def at_hover_point(self) -> bool:
        return self.position == self.hover_point

    @property
    def guarding(self) -> bool:
        """是否在悬停点执行驱鸟（非充电、非移动）"""
        return self.mode in (DroneMode.PROTECTING, DroneMode.IDLE) and self.at_hover_point


@dataclass
class Bird:
    """鸟"""
    id: int
    state: BirdState = BirdState.IDLE
    target_cell: Optional[int] = None
    cooldown: int = 0


@dataclass
class Charger:
    """
    充电站
    queue: 等待中的无人机（仍在保护田地）
    arrivals: 已放行、正在前往/等待槽位的无人机（按放行顺序 FIFO）
    """
    position: Tuple[float, float]
    slots: int
    occupants: List[int] = field(default_factory=list)
    queue: List[int] = field(default_factory=list)
    arrivals: List[int] = field(default_factory=list)
    release_log: List[Tuple[int, int]] = field(default_factory=list)  # (tick, drone_id)
    grant_log: List[Tuple[int, int]] = field(default_factory=list)    # (tick, drone_id)

    @property
    def free_slots(self) -> int:
        return self.slots - len(self.occupants)

    def remove(self, drone_id: int) -> None:
        """从队列/到达列表/槽位中移除（终止时调用）"""
        for holder in (self.queue, self.arrivals, self.occupants):
            if drone_id in holder:
                holder.remove(drone_id)


# ==================== 估计器数据 ====================

@dataclass
class PendingSample:
    """已观测输入、尚未得到真实输出的样本"""
    input_vector: np.ndarray
    delta: Optional[int]                     # until_mode 标签为 None
    t_observed: int
    entity_id: str
    horizon_feature: bool = False            # 输入向量末尾是否已附加 delta/Δmax

    @property
    def due(self) -> Optional[int]:
        return None if self.delta is None else self.t_observed + self.delta


@dataclass
class TrainingSample:
    """一条 (输入向量, 未来标签) 训练样本"""
    input_vector: np.ndarray
    label: float
    t_observed: int
    t_resolved: int
    entity_id: str = ""

    @property
    def delta(self) -> int:
        return self.t_resolved - self.t_observed


@dataclass
class TrainingReport:
    """一次训练更新的报告"""
    n_samples: int
    final_loss: float


@dataclass
class EvalReport:
    """
    评估报告
    scatter: (预测值, 真实值) 对，按测试集顺序
    """
    mse: float
    mae: float
    scatter: List[Tuple[float, float]] = field(default_factory=list)


@dataclass
class DecisionRecord:
    """一次适应决策（decisions.csv 的一行）"""
    tick: int
    drone: int
    rule: str
    decision: Decision
    threshold: float
    prediction: float


# ==================== 仿真结果 ====================

@dataclass
class SimResult:
    """
    仿真结果
    包含效用指标、每 tick 时间序列、各估计器采集的数据集
    """
    seed: int
    n_drones: int
    damage_rate: float
    survived_drones: int
    series: Dict[str, np.ndarray] = field(default_factory=dict)
    drone_battery: Optional[np.ndarray] = None   # (ticks, n_drones)
    drone_mode: Optional[np.ndarray] = None      # (ticks, n_drones) MODE_CODES
    datasets: Dict[str, List[TrainingSample]] = field(default_factory=dict)
    discard_stats: Dict[str, Dict[str, int]] = field(default_factory=dict)
    mean_predictions: Dict[str, Optional[float]] = field(default_factory=dict)
    decisions: List[DecisionRecord] = field(default_factory=list)

    @property
    def utility(self) -> "UtilityPoint":
        return UtilityPoint(damage_rate=self.damage_rate, survived_drones=float(self.survived_drones))

    @property
    def composite_utility(self) -> float:
        """存活比例 - 损害率（选择“最佳”迭代用）"""
        return self.survived_drones / self.n_drones - self.damage_rate


# ==================== 实验结果 ====================

@dataclass
class UtilityPoint:
    """效用点：damage_rate 越小越好，survived_drones 越大越好"""
    damage_rate: float
    survived_drones: float


@dataclass
class SweepRow:
    """网格搜索的一行"""
    params: Dict[str, float]
    mean_damage: float
    sd_damage: float
    mean_survived: float
    sd_survived: float
    per_seed: List[Tuple[int, float, int]] = field(default_factory=list)  # (seed, damage, survived)
    pareto: bool = False

    @property
    def utility(self) -> UtilityPoint:
        return UtilityPoint(damage_rate=self.mean_damage, survived_drones=self.mean_survived)


@dataclass
class SweepResult:
    """网格搜索结果（按网格顺序）"""
    param_names: List[str]
    rows: List[SweepRow] = field(default_factory=list)

    def best_by_damage(self) -> Optional[SweepRow]:
        """平均损害最小的行"""
        if not self.rows:
            return None
        return min(self.rows, key=lambda r: r.mean_damage)


@dataclass
class IterationRow:
    """迭代训练报告的一行"""
    iteration: int
    mean_damage: float
    mean_survived: float
    composite_utility: float
    estimator_mse: Optional[float]
    discarded_samples: int
    details: Dict[str, dict] = field(default_factory=dict)
