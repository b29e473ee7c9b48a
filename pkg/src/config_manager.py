"""
配置管理模块
加载并校验 YAML 配置、环境变量和命令行覆盖项
"""
import math
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from .models import ConfigError

# 加载 .env 文件
load_dotenv()

DEFAULT_CONFIG_PATH = Path(__file__).parent.parent / "config" / "settings.yaml"

DRONE_MODES = ["IDLE", "PROTECTING", "MOVING_TO_CHARGER", "CHARGING", "TERMINATED"]


def _default_hover_points() -> List[Tuple[float, float]]:
    """默认 12 个悬停点：4 x 3 网格覆盖 100 x 100 的田地"""
    xs = [12.5, 37.5, 62.5, 87.5]
    ys = [100.0 / 6, 50.0, 500.0 / 6]
    return [(x, y) for y in ys for x in xs]


class ConfigSection(BaseModel):
    """配置节基类，拼错或未声明的键直接报错"""
    model_config = ConfigDict(extra="forbid")


class WorldConfig(ConfigSection):
    """仿真世界配置（1 tick = 1 分钟）"""
    ticks_per_day: int = 1440
    run_length: int = 1440                   # 仿真长度（tick）
    n_drones: int = 12
    n_birds: int = 100
    field_width: float = 100.0
    field_height: float = 100.0
    grid_cols: int = 10                      # 作物格子列数
    grid_rows: int = 10                      # 作物格子行数
    protection_positions: List[Tuple[float, float]] = Field(default_factory=_default_hover_points)
    charger_position: Tuple[float, float] = (0.0, 0.0)
    charger_slots: int = 6
    drone_speed: float = 2.0                 # 单位/tick
    moving_battery_consumption: float = 0.005
    hovering_battery_consumption: float = 0.0018
    charging_rate: float = 1.0 / 200         # 充满需要 200 tick
    scare_radius: float = 15.0
    bird_damage_per_tick: float = 0.001
    seed: int = 1

    @model_validator(mode="after")
    def _check_invariants(self):
        if self.hovering_battery_consumption >= self.moving_battery_consumption:
            raise ValueError("hovering_battery_consumption 必须小于 moving_battery_consumption")
        if self.charger_slots < 1:
            raise ValueError("charger_slots 必须 >= 1")
        if self.n_drones < 1:
            raise ValueError("n_drones 必须 >= 1")
        if self.n_birds < 0:
            raise ValueError("n_birds 不能为负")
        if self.drone_speed <= 0 or self.charging_rate <= 0:
            raise ValueError("drone_speed 与 charging_rate 必须为正")
        if self.ticks_per_day < 1 or self.run_length < 0:
            raise ValueError("ticks_per_day 必须 >= 1，run_length 不能为负")
        if self.grid_cols < 1 or self.grid_rows < 1:
            raise ValueError("作物网格至少 1 x 1")
        return self


class BirdConfig(ConfigSection):
    """鸟类行为与双峰攻击概率配置"""
    peak1_tick: float = 540.0                # 上午 9 点
    peak2_tick: float = 900.0                # 下午 3 点
    amplitude1: float = 0.9
    amplitude2: float = 0.5
    sigma1: float = 90.0
    sigma2: float = 90.0
    activity_coefficient: float = 0.02       # 每个空闲鸟每 tick 发起攻击概率 = p(t) * 系数
    flee_cooldown: int = 15
    leave_probability: float = 0.05          # 未被驱赶的攻击鸟每 tick 离开概率

    @model_validator(mode="after")
    def _check_peaks(self):
        if self.amplitude1 <= self.amplitude2:
            raise ValueError("amplitude1 必须大于 amplitude2（上午峰更高）")
        if self.sigma1 <= 0 or self.sigma2 <= 0:
            raise ValueError("sigma 必须为正")
        if not 0 <= self.leave_probability <= 1:
            raise ValueError("leave_probability 必须在 [0,1]")
        return self


class ChargingRuleConfig(ConfigSection):
    """充电规则配置"""
    safety_threshold: float = 0.2
    waiting_time_source: str = "estimator"   # constant | estimator
    waiting_time_constant: float = 35.0
    future_battery_source: str = "lower_bound"  # lower_bound | upper_bound | estimator

    @field_validator("safety_threshold")
    @classmethod
    def _check_threshold(cls, v):
        if not 0 < v < 1:
            raise ValueError("safety_threshold 必须在 (0,1)")
        return v

    @field_validator("waiting_time_source")
    @classmethod
    def _check_waiting_source(cls, v):
        if v not in ("constant", "estimator"):
            raise ValueError(f"未知 waiting_time_source: {v}")
        return v

    @field_validator("future_battery_source")
    @classmethod
    def _check_battery_source(cls, v):
        if v not in ("lower_bound", "upper_bound", "estimator"):
            raise ValueError(f"未知 future_battery_source: {v}")
        return v


class ProtectionRuleConfig(ConfigSection):
    """田地保护规则配置: threshold = b + c * current + f * predicted"""
    b: float = 0.2
    c: float = 0.0
    f: float = 0.3
    future_birds_horizon: int = 150

    @model_validator(mode="after")
    def _check_attainable(self):
        for name in ("b", "c", "f"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} 必须有限")
        if self.b + self.c + self.f >= 1:
            raise ValueError("b + c + f 必须 < 1（阈值需可达）")
        return self


class FeatureConfig(ConfigSection):
    """估计器输入/输出特征"""
    name: str
    source: Optional[str] = None             # 快照字段名，缺省与 name 相同
    normalization: str = "none"              # none | minmax
    range: Tuple[float, float] = (0.0, 1.0)
    categories: Optional[List[str]] = None   # 分类特征 -> one-hot

    @field_validator("normalization")
    @classmethod
    def _check_norm(cls, v):
        if v not in ("none", "minmax"):
            raise ValueError(f"未知 normalization: {v}")
        return v


class LabelConfig(ConfigSection):
    """标签来源"""
    kind: str = "future_value"               # future_value | until_mode
    mode: str = "CHARGING"                   # until_mode 的目标模式
    value: str = "feature"                   # feature | elapsed


class GuardConfig(ConfigSection):
    """有效性守卫"""
    kind: str = "always_valid"               # always_valid | mode_never
    mode: str = "CHARGING"


class MLPConfig(ConfigSection):
    """多层感知机超参数"""
    hidden_layers: List[int] = Field(default_factory=lambda: [32, 32])
    output_activation: str = "softplus"      # identity | exponential | softplus
    learning_rate: float = 0.01
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0

    @field_validator("output_activation")
    @classmethod
    def _check_activation(cls, v):
        if v not in ("identity", "exponential", "softplus"):
            raise ValueError(f"未知 output_activation: {v}")
        return v


class BackendConfig(ConfigSection):
    """预测后端配置"""
    kind: str = "mlp"                        # constant | mlp | knn
    value: float = 0.0                       # constant 后端的值
    k: int = 5
    knn_normalize: bool = True
    mlp: MLPConfig = Field(default_factory=MLPConfig)

    @field_validator("kind")
    @classmethod
    def _check_kind(cls, v):
        if v not in ("constant", "mlp", "knn"):
            raise ValueError(f"未知 backend: {v}")
        return v


class EstimatorConfig(ConfigSection):
    """单个估计器声明"""
    inputs: List[FeatureConfig]
    output: FeatureConfig
    label: LabelConfig = Field(default_factory=LabelConfig)
    horizon: Tuple[int, int] = (1, 200)
    guard: GuardConfig = Field(default_factory=GuardConfig)
    backend: BackendConfig = Field(default_factory=BackendConfig)
    bootstrap_value: float = 0.0
    entity: str = "drone"                    # drone | field
    trigger: str = "tick"                    # tick | enqueue | release
    observe_every: int = 1

    @model_validator(mode="after")
    def _check(self):
        lo, hi = self.horizon
        if not 1 <= lo <= hi:
            raise ValueError(f"horizon 必须满足 1 <= min <= max，实际 {self.horizon}")
        if not math.isfinite(self.bootstrap_value):
            raise ValueError("bootstrap_value 必须有限")
        if self.entity not in ("drone", "field"):
            raise ValueError(f"未知 entity: {self.entity}")
        if self.trigger not in ("tick", "enqueue", "release"):
            raise ValueError(f"未知 trigger: {self.trigger}")
        if self.observe_every < 1:
            raise ValueError("observe_every 必须 >= 1")
        return self


def _battery_inputs() -> List[FeatureConfig]:
    return [
        FeatureConfig(name="battery", normalization="minmax", range=(0.0, 1.0)),
        FeatureConfig(name="mode", categories=list(DRONE_MODES)),
    ]


def _default_estimators() -> Dict[str, EstimatorConfig]:
    """内置估计器声明"""
    battery_out = FeatureConfig(name="battery", normalization="minmax", range=(0.0, 1.0))

    def battery_mlp() -> BackendConfig:
        # 未来电量样本多，训练到收敛
        return BackendConfig(kind="mlp", mlp=MLPConfig(learning_rate=0.05, epochs=100))

    return {
        "future_battery": EstimatorConfig(
            inputs=_battery_inputs(),
            output=battery_out,
            horizon=(1, 200),
            guard=GuardConfig(kind="mode_never", mode="CHARGING"),
            backend=battery_mlp(),
            bootstrap_value=0.0,
            observe_every=5,
        ),
        "future_battery_unguarded": EstimatorConfig(
            inputs=_battery_inputs(),
            output=battery_out,
            horizon=(1, 200),
            guard=GuardConfig(kind="always_valid"),
            backend=battery_mlp(),
            bootstrap_value=0.0,
            observe_every=5,
        ),
        "approach_battery": EstimatorConfig(
            inputs=_battery_inputs(),
            output=battery_out,
            label=LabelConfig(kind="until_mode", mode="CHARGING", value="feature"),
            horizon=(1, 400),
            guard=GuardConfig(kind="mode_never", mode="CHARGING"),
            backend=BackendConfig(kind="mlp"),
            trigger="release",
        ),
        "waiting_time": EstimatorConfig(
            inputs=[
                FeatureConfig(name="queue_fraction"),
                FeatureConfig(name="frac_protecting"),
                FeatureConfig(name="frac_moving"),
                FeatureConfig(name="frac_charging"),
                FeatureConfig(name="battery", normalization="minmax", range=(0.0, 1.0)),
                FeatureConfig(name="time_of_day"),
            ],
            output=FeatureConfig(name="waiting_time", normalization="minmax", range=(0.0, 200.0)),
            label=LabelConfig(kind="until_mode", mode="CHARGING", value="elapsed"),
            horizon=(1, 1440),
            # 每轮只有几十个排队样本
            backend=BackendConfig(kind="mlp", mlp=MLPConfig(hidden_layers=[8, 8], learning_rate=0.05, epochs=200)),
            bootstrap_value=35.0,
            trigger="enqueue",
        ),
        "future_birds": EstimatorConfig(
            inputs=[FeatureConfig(name="tod_sin"), FeatureConfig(name="tod_cos")],
            output=FeatureConfig(name="detected_birds"),
            horizon=(150, 150),
            backend=BackendConfig(kind="knn", k=5),
            bootstrap_value=0.0,
            entity="field",
        ),
    }


class ExperimentConfig(ConfigSection):
    """实验驱动配置"""
    scenario: str = "charging"               # charging | protection
    n_iterations: int = 6
    runs_per_iteration: int = 3
    seeds: List[int] = Field(default_factory=lambda: [1, 2, 3, 4, 5])
    selection: str = "last"                  # last | best
    replay_window: int = 4
    test_fraction: float = 0.2
    split_seed: int = 0
    workers: int = 1                         # 扫描并行进程数

    @model_validator(mode="after")
    def _check(self):
        if self.scenario not in ("charging", "protection"):
            raise ValueError(f"未知 scenario: {self.scenario}")
        if self.n_iterations < 1:
            raise ValueError("n_iterations 必须 >= 1")
        if self.runs_per_iteration < 1:
            raise ValueError("runs_per_iteration 必须 >= 1")
        if not self.seeds:
            raise ValueError("seeds 不能为空")
        if self.selection not in ("last", "best"):
            raise ValueError(f"未知 selection: {self.selection}")
        if self.replay_window < 1:
            raise ValueError("replay_window 必须 >= 1")
        if not 0 < self.test_fraction < 1:
            raise ValueError("test_fraction 必须在 (0,1)")
        return self


class SweepConfig(ConfigSection):
    """网格搜索配置"""
    constant_values: List[float] = Field(default_factory=lambda: [float(v) for v in range(0, 101, 5)])
    b_values: List[float] = Field(default_factory=lambda: [round(0.05 * i, 2) for i in range(9)])
    c_values: List[float] = Field(default_factory=lambda: [round(0.1 * i, 1) for i in range(7)])
    f_values: List[float] = Field(default_factory=lambda: [round(0.1 * i, 1) for i in range(7)])
    backend_estimator: str = "waiting_time"
    backend_variants: List[str] = Field(
        default_factory=lambda: ["mlp:identity", "mlp:exponential", "mlp:softplus", "knn"]
    )


class OutputConfig(ConfigSection):
    """输出配置"""
    directory: str = "runs/latest"
    plots: bool = False
    log_decisions: bool = False


class LoggingConfig(ConfigSection):
    """日志配置"""
    level: str = "INFO"
    file_output: bool = False
    file_path: str = "logs/sfps.log"


class Settings(BaseSettings):
    """
    主配置类
    优先级: 命令行覆盖 > YAML 配置 > 环境变量(SFPS_*) > 默认值
    """
    model_config = SettingsConfigDict(env_prefix="SFPS_", env_nested_delimiter="__", extra="forbid")

    world: WorldConfig = Field(default_factory=WorldConfig)
    birds: BirdConfig = Field(default_factory=BirdConfig)
    charging_rule: ChargingRuleConfig = Field(default_factory=ChargingRuleConfig)
    protection_rule: ProtectionRuleConfig = Field(default_factory=ProtectionRuleConfig)
    estimators: Dict[str, EstimatorConfig] = Field(default_factory=_default_estimators)
    experiment: ExperimentConfig = Field(default_factory=ExperimentConfig)
    sweep: SweepConfig = Field(default_factory=SweepConfig)
    output: OutputConfig = Field(default_factory=OutputConfig)
    logging: LoggingConfig = Field(default_factory=LoggingConfig)

    @model_validator(mode="after")
    def _check_hover_points(self):
        if self.world.n_drones > len(self.world.protection_positions):
            raise ValueError(
                f"无人机数量 {self.world.n_drones} 超过悬停点数量 {len(self.world.protection_positions)}"
            )
        return self


def load_yaml_config(config_path: Optional[str] = None) -> dict:
    """加载 YAML 配置文件；'default' 或 None 使用内置配置"""
    if config_path is None or config_path == "default":
        config_path = DEFAULT_CONFIG_PATH

    config_path = Path(config_path)
    if not config_path.exists():
        raise ConfigError(f"配置文件不存在: {config_path}")

    try:
        with open(config_path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"配置文件解析失败: {e}") from e

    if not isinstance(data, dict):
        raise ConfigError("配置文件顶层必须是映射")
    return data


def _merge(base: dict, extra: dict) -> dict:
    """递归合并字典（extra 覆盖 base）"""
    out = dict(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def apply_overrides(data: dict, overrides: Optional[List[str]] = None) -> dict:
    """
    应用点分路径覆盖项

    Args:
        data: 原始配置字典
        overrides: ["world.n_drones=8", "experiment.seeds=[1,2]"]，值按 YAML 标量解析
    """
    result = dict(data)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"覆盖项格式应为 key=value: {item}")
        key, raw = item.split("=", 1)
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as e:
            raise ConfigError(f"覆盖值无法解析: {item}") from e

        patch: Dict[str, Any] = value
        for part in reversed(key.strip().split(".")):
            patch = {part: patch}
        result = _merge(result, patch)
    return result


def get_settings(config_path: Optional[str] = None, overrides: Optional[List[str]] = None) -> Settings:
    """
    获取配置实例
    合并 YAML 配置与命令行覆盖项，并执行校验
    """
    data = apply_overrides(load_yaml_config(config_path), overrides)
    # 估计器声明在默认值之上逐项合并
    if "estimators" in data and isinstance(data["estimators"], dict):
        defaults = {k: v.model_dump() for k, v in _default_estimators().items()}
        data["estimators"] = _merge(defaults, data["estimators"])

    try:
        return Settings(**data)
    except ValidationError as e:
        raise ConfigError(f"配置校验失败: {e}") from e


def dump_resolved(settings: Settings) -> str:
    """生成解析后的完整配置（YAML 文本，键有序，便于复现）"""
    data = settings.model_dump(mode="json")
    return yaml.safe_dump(data, sort_keys=True, allow_unicode=True, default_flow_style=False)
