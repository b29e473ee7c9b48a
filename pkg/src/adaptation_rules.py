"""
适应规则
充电规则（预测等待时间 + 未来电量）、田地保护规则（b + c*当前鸟 + f*预测鸟）、
充电队列放行规则，以及基于领域知识的电量上下界估计
"""
import heapq
import math
from typing import Mapping, Optional, Protocol, Tuple

from loguru import logger

from .config_manager import ChargingRuleConfig, ProtectionRuleConfig, Settings, WorldConfig
from .models import Charger, ConfigError, Decision, Drone, SimulationError
from .world import World, energy_to_fly_to_charger, time_to_fly_to_charger

_EPS = 1e-9


class Predictor(Protocol):
    """规则使用的估计器接口（EstimatorHandle 及下面的替代实现）"""
    horizon: Tuple[int, int]

    def predict(self, snapshot, delta: Optional[int] = None) -> float:
        ...


# ==================== 领域知识估计 ====================

def future_battery_bound(drone: Drone, target_time: int, kind: str, config: WorldConfig, now: int = 0) -> float:
    """
    未来电量的上/下界

    upper: 全程悬停消耗; lower: 全程移动消耗；结果截断到 [0,1]
    只要 [now, target_time] 内不充电，真实电量介于两者之间
    """
    if target_time < now:
        raise SimulationError(f"目标时刻 {target_time} 早于当前时刻 {now}")
    if kind == "upper":
        consumption = config.hovering_battery_consumption
    elif kind == "lower":
        consumption = config.moving_battery_consumption
    else:
        raise ValueError(f"未知边界类型: {kind}")
    return min(1.0, max(0.0, drone.battery - (target_time - now) * consumption))


class BatteryBoundEstimator:
    """把电量上/下界包装成估计器，供充电规则使用"""

    def __init__(self, kind: str, config: WorldConfig, horizon: Tuple[int, int] = (1, 200)):
        if kind not in ("upper", "lower"):
            raise ValueError(f"未知边界类型: {kind}")
        self.kind = kind
        self.config = config
        self.horizon = horizon
        self.id = f"{kind}_bound"

    def predict(self, snapshot, delta: Optional[int] = None) -> float:
        holder = Drone(id=-1, position=(0.0, 0.0), hover_point=(0.0, 0.0), battery=float(snapshot["battery"]))
        return future_battery_bound(holder, int(delta or 0), self.kind, self.config)


class ConstantWaitingTime:
    """常数等待时间（基线）"""

    def __init__(self, value: float):
        if not math.isfinite(value):
            raise ValueError("常数等待时间必须有限")
        self.value = float(value)
        self.horizon = (1, 1)
        self.id = f"constant_{value:g}"

    def predict(self, snapshot, delta: Optional[int] = None) -> float:
        return self.value


# ==================== 充电规则 ====================

def _clamp_horizon(value: float, horizon: Tuple[int, int]) -> int:
    lo, hi = horizon
    delta = int(round(value))
    if delta < lo or delta > hi:
        clamped = min(hi, max(lo, delta))
        logger.debug(f"时间范围 {delta} 超出 [{lo}, {hi}]，截断为 {clamped}")
        return clamped
    return delta


def evaluate_charging(drone: Drone, world: World, waiting_time_est: Predictor, future_battery_est: Predictor,
                      params: ChargingRuleConfig) -> Tuple[Decision, float, float]:
    """充电规则，返回 (决策, 阈值, 预测的未来电量)"""
    snapshot = world.drone_snapshot(drone)
    waiting = waiting_time_est.predict(snapshot)
    fly = time_to_fly_to_charger(drone, world.charger, world.config.drone_speed)
    delta = _clamp_horizon(max(0.0, waiting) + fly, future_battery_est.horizon)
    future_battery = future_battery_est.predict(snapshot, delta)

    decision = Decision.ENQUEUE if future_battery < params.safety_threshold else Decision.STAY
    return decision, params.safety_threshold, future_battery


def charging_decision(drone: Drone, world: World, waiting_time_est: Predictor, future_battery_est: Predictor,
                      params: ChargingRuleConfig) -> Decision:
    """
    充电规则

    timeTillChargingStarts = 预测等待时间 + 飞到充电站的时间（截断到未来电量估计器的时间范围），
    预测的未来电量低于安全阈值时排队
    """
    return evaluate_charging(drone, world, waiting_time_est, future_battery_est, params)[0]


# ==================== 放行规则 ====================

def expected_slot_free_time(charger: Charger, drone: Drone, world: World) -> float:
    """
    按 FIFO 顺序模拟充电站排程，估计轮到该无人机时槽位空出的时刻

    已占用槽位按剩余充电时间计算；已放行和排在前面的无人机依次占用最早空出的槽位
    """
    if drone.id not in charger.queue:
        raise SimulationError(f"无人机 {drone.id} 不在充电队列中")

    cfg = world.config
    now = world.clock
    rate = cfg.charging_rate

    free_at = [now + (1.0 - world.drone_by_id(i).battery) / rate for i in charger.occupants]
    free_at.extend([float(now)] * charger.free_slots)
    heapq.heapify(free_at)

    ahead = list(charger.arrivals) + charger.queue[:charger.queue.index(drone.id)]
    for other_id in ahead:
        other = world.drone_by_id(other_id)
        fly = time_to_fly_to_charger(other, charger, cfg.drone_speed)
        battery_on_arrival = max(0.0, other.battery - fly * cfg.moving_battery_consumption)
        start = max(heapq.heappop(free_at), now + fly)
        heapq.heappush(free_at, start + (1.0 - battery_on_arrival) / rate)

    return free_at[0]


def release_decision(charger: Charger, drone: Drone, world: World) -> Decision:
    """排队无人机的放行决策：预计槽位空出时刻 - 当前 <= 飞行时间时起飞"""
    expected = expected_slot_free_time(charger, drone, world)
    fly = time_to_fly_to_charger(drone, charger, world.config.drone_speed)
    if expected - world.clock <= fly + _EPS:
        return Decision.FLY_TO_CHARGER
    return Decision.STAY


# ==================== 田地保护规则 ====================

def predicted_birds(future_birds_est: Predictor, world: World, horizon: Optional[int] = None) -> float:
    """预测的未来鸟数量（占总数比例），截断到 [0,1]"""
    snapshot = world.field_snapshot()
    lo, hi = future_birds_est.horizon
    delta = _clamp_horizon(horizon if horizon is not None else hi, (lo, hi))
    return min(1.0, max(0.0, future_birds_est.predict(snapshot, delta)))


def evaluate_protection(drone: Drone, current_birds_fraction: float, future_birds_est: Optional[Predictor],
                        params: ProtectionRuleConfig, world: World,
                        predicted: Optional[float] = None) -> Tuple[Decision, float, float]:
    """保护规则，返回 (决策, 阈值, 预测鸟比例)"""
    if params.f == 0:
        # f=0 时不调用估计器
        predicted = 0.0
    elif predicted is None:
        if future_birds_est is None:
            raise ConfigError("f != 0 时需要 future_birds 估计器")
        predicted = predicted_birds(future_birds_est, world, params.future_birds_horizon)

    current = min(1.0, max(0.0, current_birds_fraction))
    threshold = params.b + params.c * current + params.f * predicted
    energy = energy_to_fly_to_charger(drone, world.charger, world.config.drone_speed, world.config)
    margin = max(0.0, drone.battery - energy)

    decision = Decision.ENQUEUE if margin < threshold else Decision.PROTECT
    return decision, threshold, predicted


def protection_decision(drone: Drone, current_birds_fraction: float, future_birds_est: Optional[Predictor],
                        params: ProtectionRuleConfig, world: World,
                        predicted: Optional[float] = None) -> Decision:
    """
    田地保护规则

    safetyThreshold = b + c * 当前鸟比例 + f * 预测鸟比例；
    currentBattery - energyToFlyToCharger < safetyThreshold 时排队，否则继续保护
    """
    return evaluate_protection(drone, current_birds_fraction, future_birds_est, params, world, predicted)[0]


# ==================== 策略 ====================

class AdaptationPolicy:
    """适应策略基类：排队决策由子类实现，放行统一使用 FIFO 排程规则"""
    name = "policy"

    def begin_tick(self, world: World) -> None:
        pass

    def decide(self, world: World, drone: Drone) -> Tuple[Decision, float, float]:
        raise NotImplementedError

    def release(self, world: World, drone: Drone) -> Decision:
        return release_decision(world.charger, drone, world)


class ChargingPolicy(AdaptationPolicy):
    """充电场景"""
    name = "charging"

    def __init__(self, params: ChargingRuleConfig, waiting_time: Predictor, future_battery: Predictor):
        self.params = params
        self.waiting_time = waiting_time
        self.future_battery = future_battery

    def decide(self, world: World, drone: Drone) -> Tuple[Decision, float, float]:
        return evaluate_charging(drone, world, self.waiting_time, self.future_battery, self.params)


class ProtectionPolicy(AdaptationPolicy):
    """田地保护场景；未来鸟数量每个 tick 只预测一次"""
    name = "protection"

    def __init__(self, params: ProtectionRuleConfig, future_birds: Optional[Predictor] = None):
        if params.f != 0 and future_birds is None:
            raise ConfigError("f != 0 时需要 future_birds 估计器")
        self.params = params
        self.future_birds = future_birds
        self._predicted: Optional[float] = None

    def begin_tick(self, world: World) -> None:
        self._predicted = None
        if self.params.f != 0:
            self._predicted = predicted_birds(self.future_birds, world, self.params.future_birds_horizon)

    def decide(self, world: World, drone: Drone) -> Tuple[Decision, float, float]:
        current = world.detected_birds / max(1, world.config.n_birds)
        return evaluate_protection(drone, current, self.future_birds, self.params, world, self._predicted)


def build_policy(settings: Settings, estimators: Optional[Mapping[str, object]] = None,
                 charging: Optional[ChargingRuleConfig] = None,
                 protection: Optional[ProtectionRuleConfig] = None) -> AdaptationPolicy:
    """
    按配置的场景创建策略

    Args:
        estimators: id -> 估计器句柄
        charging / protection: 覆盖配置中的规则参数（网格搜索使用）
    """
    estimators = estimators or {}
    scenario = settings.experiment.scenario

    if scenario == "charging":
        params = charging or settings.charging_rule
        if params.waiting_time_source == "constant":
            waiting = ConstantWaitingTime(params.waiting_time_constant)
        elif "waiting_time" in estimators:
            waiting = estimators["waiting_time"]
        else:
            raise ConfigError("waiting_time_source=estimator 但没有 waiting_time 估计器")

        if params.future_battery_source == "estimator":
            if "future_battery" not in estimators:
                raise ConfigError("future_battery_source=estimator 但没有 future_battery 估计器")
            future_battery = estimators["future_battery"]
        else:
            kind = "lower" if params.future_battery_source == "lower_bound" else "upper"
            horizon = tuple(settings.estimators["future_battery"].horizon) \
                if "future_battery" in settings.estimators else (1, 200)
            future_battery = BatteryBoundEstimator(kind, settings.world, horizon)
        return ChargingPolicy(params, waiting, future_battery)

    params = protection or settings.protection_rule
    return ProtectionPolicy(params, estimators.get("future_birds"))
