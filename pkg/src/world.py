"""
仿真世界
基于 tick 的确定性世界：田地作物格子、无人机电量与模式状态机、
多槽位 FIFO 充电站、双峰日活动概率驱动的鸟群、损害统计
"""
import math
import zlib
from typing import Dict, Iterable, List, Mapping, Optional, Tuple

import numpy as np
from loguru import logger

from .config_manager import BirdConfig, Settings, WorldConfig
from .estimator import EstimatorHandle
from .models import (
    ALLOWED_TRANSITIONS, MODE_CODES, Bird, BirdState, Charger, Decision, DecisionRecord,
    Drone, DroneMode, SimResult, SimulationError,
)
from .snapshot_history import SnapshotHistory

FIELD_ENTITY = "field"

# 时间序列列（timeseries.csv 顺序）
SERIES_COLUMNS = ["attacking_birds", "detected_birds", "drones_charging", "drones_protecting", "mean_battery"]

_BATTERY_EPS = 1e-9


def drone_entity(drone_id: int) -> str:
    return f"drone-{drone_id}"


# ==================== 几何与能量 ====================

def attack_probability(t: float, params: Optional[BirdConfig] = None, ticks_per_day: int = 1440) -> float:
    """
    一天内 tick t 的鸟类攻击概率

    两个高斯峰的混合（上午峰高于下午峰），截断到 [0,1]
    """
    if not 0 <= t < ticks_per_day:
        raise SimulationError(f"tick {t} 超出一天范围 [0, {ticks_per_day})")
    p = params or BirdConfig()
    value = (
        p.amplitude1 * math.exp(-((t - p.peak1_tick) ** 2) / (2 * p.sigma1 ** 2))
        + p.amplitude2 * math.exp(-((t - p.peak2_tick) ** 2) / (2 * p.sigma2 ** 2))
    )
    return min(1.0, max(0.0, value))


def _distance(a: Tuple[float, float], b: Tuple[float, float]) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


def time_to_fly_to_charger(drone: Drone, charger: Charger, speed: float) -> int:
    """飞到充电站所需 tick 数 = ceil(距离 / 速度)"""
    if speed <= 0:
        raise SimulationError(f"速度必须为正: {speed}")
    ratio = _distance(drone.position, charger.position) / speed
    return max(0, math.ceil(ratio - _BATTERY_EPS))


def energy_to_fly_to_charger(drone: Drone, charger: Charger, speed: float, config: WorldConfig) -> float:
    """飞到充电站消耗的电量"""
    return time_to_fly_to_charger(drone, charger, speed) * config.moving_battery_consumption


def _move_towards(position: Tuple[float, float], target: Tuple[float, float],
                  speed: float) -> Tuple[float, float]:
    dist = _distance(position, target)
    if dist <= speed:
        return target
    ratio = speed / dist
    return (position[0] + (target[0] - position[0]) * ratio,
            position[1] + (target[1] - position[1]) * ratio)


# ==================== 世界 ====================

class World:
    """
    仿真世界状态
    每个阶段内实体按 id 顺序处理；随机数只由 seed 决定
    """

    def __init__(self, config: WorldConfig, birds: Optional[BirdConfig] = None, seed: Optional[int] = None,
                 log_decisions: bool = False):
        if config.n_drones > len(config.protection_positions):
            raise SimulationError(
                f"无人机数量 {config.n_drones} 超过悬停点数量 {len(config.protection_positions)}"
            )

        self.config = config
        self.bird_config = birds or BirdConfig()
        self.seed = config.seed if seed is None else int(seed)
        self.rng = np.random.default_rng(self.seed)
        self.clock = 0
        self.log_decisions = log_decisions

        self.drones: List[Drone] = [
            Drone(id=i, position=tuple(config.protection_positions[i]),
                  hover_point=tuple(config.protection_positions[i]))
            for i in range(config.n_drones)
        ]
        self.birds: List[Bird] = [Bird(id=i) for i in range(config.n_birds)]
        self.charger = Charger(position=tuple(config.charger_position), slots=config.charger_slots)

        n_cells = config.grid_cols * config.grid_rows
        self.integrity = np.ones(n_cells)
        cols = np.arange(n_cells) % config.grid_cols
        rows = np.arange(n_cells) // config.grid_cols
        self.cell_centers = np.column_stack([
            (cols + 0.5) * config.field_width / config.grid_cols,
            (rows + 0.5) * config.field_height / config.grid_rows,
        ])

        self.history = SnapshotHistory()
        self._estimator_rngs: Dict[str, np.random.Generator] = {}

        # 当前 tick 的观测结果与事件
        self.attacking_birds = 0
        self.detected_birds = 0
        self._events: Dict[str, List[int]] = {"enqueue": [], "release": []}

        # 每 tick 记录
        self.series: Dict[str, List[float]] = {name: [] for name in SERIES_COLUMNS}
        self.battery_log: List[List[float]] = []
        self.mode_log: List[List[int]] = []
        self.decisions: List[DecisionRecord] = []
        self.transitions: List[Tuple[int, int, DroneMode, DroneMode]] = []  # (tick, drone, from, to)

    # ---------- 指标 ----------

    @property
    def damage_rate(self) -> float:
        return float(1.0 - self.integrity.mean())

    @property
    def live_drones(self) -> List[Drone]:
        return [d for d in self.drones if d.alive]

    @property
    def survived_drones(self) -> int:
        return len(self.live_drones)

    def mode_count(self, mode: DroneMode) -> int:
        return sum(1 for d in self.drones if d.mode == mode)

    @property
    def time_of_day(self) -> float:
        return (self.clock % self.config.ticks_per_day) / self.config.ticks_per_day

    def drone_by_id(self, drone_id: int) -> Drone:
        return self.drones[drone_id]

    def estimator_rng(self, estimator_id: str) -> np.random.Generator:
        """每个估计器独立的随机流，不影响世界轨迹"""
        if estimator_id not in self._estimator_rngs:
            key = zlib.crc32(estimator_id.encode("utf-8"))
            self._estimator_rngs[estimator_id] = np.random.default_rng([self.seed, key])
        return self._estimator_rngs[estimator_id]

    # ---------- 快照 ----------

    def mode_counts(self) -> Dict[DroneMode, int]:
        counts = {m: 0 for m in DroneMode}
        for d in self.drones:
            counts[d.mode] += 1
        return counts

    def drone_snapshot(self, drone: Drone, counts: Optional[Dict[DroneMode, int]] = None) -> Dict[str, object]:
        """无人机快照（估计器输入与标签的来源）"""
        n = self.config.n_drones
        tod = self.time_of_day
        counts = counts or self.mode_counts()
        return {
            "entity_id": drone_entity(drone.id),
            "battery": drone.battery,
            "mode": drone.mode.value,
            "queued": drone.queued,
            "queue_fraction": len(self.charger.queue) / n,
            "frac_protecting": counts[DroneMode.PROTECTING] / n,
            "frac_moving": counts[DroneMode.MOVING_TO_CHARGER] / n,
            "frac_charging": counts[DroneMode.CHARGING] / n,
            "frac_idle": counts[DroneMode.IDLE] / n,
            "frac_terminated": counts[DroneMode.TERMINATED] / n,
            "time_of_day": tod,
            "tod_sin": math.sin(2 * math.pi * tod),
            "tod_cos": math.cos(2 * math.pi * tod),
            "distance_to_charger": _distance(drone.position, self.charger.position),
        }

    def field_snapshot(self) -> Dict[str, object]:
        """田地快照（鸟类传感器）"""
        n_birds = max(1, self.config.n_birds)
        tod = self.time_of_day
        return {
            "entity_id": FIELD_ENTITY,
            "time_of_day": tod,
            "tod_sin": math.sin(2 * math.pi * tod),
            "tod_cos": math.cos(2 * math.pi * tod),
            "detected_birds": self.detected_birds / n_birds,
            "attacking_birds": self.attacking_birds / n_birds,
        }

    # ---------- 模式切换 ----------

    def set_mode(self, drone: Drone, mode: DroneMode) -> None:
        if drone.mode == mode:
            return
        if (drone.mode, mode) not in ALLOWED_TRANSITIONS:
            raise SimulationError(f"无人机 {drone.id} 非法模式转换: {drone.mode.value} -> {mode.value}")
        self.transitions.append((self.clock, drone.id, drone.mode, mode))
        drone.mode = mode

    def terminate(self, drone: Drone) -> None:
        drone.battery = 0.0
        self.set_mode(drone, DroneMode.TERMINATED)
        drone.queued = False
        drone.enqueued_at = None
        self.charger.remove(drone.id)
        logger.debug(f"[t={self.clock}] 无人机 {drone.id} 电量耗尽")

    def enqueue(self, drone: Drone) -> None:
        if drone.queued or drone.mode not in (DroneMode.PROTECTING, DroneMode.IDLE):
            raise SimulationError(f"无人机 {drone.id} 当前不能排队")
        drone.queued = True
        drone.enqueued_at = self.clock
        self.charger.queue.append(drone.id)
        self._events["enqueue"].append(drone.id)

    def release(self, drone: Drone) -> None:
        if not drone.queued or drone.id not in self.charger.queue:
            raise SimulationError(f"无人机 {drone.id} 不在队列中")
        self.charger.queue.remove(drone.id)
        drone.queued = False
        drone.enqueued_at = None
        self.set_mode(drone, DroneMode.MOVING_TO_CHARGER)
        self.charger.arrivals.append(drone.id)
        self.charger.release_log.append((self.clock, drone.id))
        self._events["release"].append(drone.id)

    # ==================== 各阶段 ====================

    def _guard_cover(self) -> np.ndarray:
        """被悬停无人机覆盖（在驱鸟半径内）的格子"""
        guards = [d.position for d in self.drones if d.guarding]
        if not guards:
            return np.zeros(len(self.integrity), dtype=bool)
        g = np.asarray(guards, dtype=float)
        d2 = ((self.cell_centers[:, None, :] - g[None, :, :]) ** 2).sum(axis=2)
        return (d2 <= self.config.scare_radius ** 2).any(axis=1)

    def bird_phase(self) -> None:
        cfg, bc = self.config, self.bird_config
        n = len(self.birds)
        # 每 tick 固定消耗随机数，顺序与鸟的状态无关
        u_attack = self.rng.random(n)
        cells = self.rng.integers(len(self.integrity), size=n)
        u_leave = self.rng.random(n)

        p_attack = attack_probability(self.clock % cfg.ticks_per_day, bc, cfg.ticks_per_day) \
            * bc.activity_coefficient

        for i, bird in enumerate(self.birds):
            if bird.state == BirdState.FLEEING:
                bird.cooldown = max(0, bird.cooldown - 1)
                if bird.cooldown == 0:
                    bird.state = BirdState.IDLE
            elif bird.state == BirdState.IDLE and u_attack[i] < p_attack:
                bird.state = BirdState.ATTACKING
                bird.target_cell = int(cells[i])

        self.attacking_birds = sum(1 for b in self.birds if b.state == BirdState.ATTACKING)

        covered = self._guard_cover()
        for i, bird in enumerate(self.birds):
            if bird.state != BirdState.ATTACKING:
                continue
            if covered[bird.target_cell]:
                bird.state = BirdState.FLEEING
                bird.cooldown = bc.flee_cooldown
                bird.target_cell = None
            elif u_leave[i] < bc.leave_probability:
                bird.state = BirdState.IDLE
                bird.target_cell = None
            else:
                cell = bird.target_cell
                self.integrity[cell] = max(0.0, self.integrity[cell] - cfg.bird_damage_per_tick)

        self.detected_birds = sum(1 for b in self.birds if b.state == BirdState.ATTACKING)

    def policy_phase(self, policy) -> None:
        policy.begin_tick(self)

        # 排队决策（id 顺序）
        for drone in self.drones:
            if not drone.alive or drone.queued:
                continue
            if drone.mode not in (DroneMode.PROTECTING, DroneMode.IDLE):
                continue
            decision, threshold, prediction = policy.decide(self, drone)
            if decision == Decision.ENQUEUE:
                self.enqueue(drone)
            self._log_decision(drone, policy.name, decision, threshold, prediction)

        # 放行决策：只放行队首，放行后继续检查新的队首
        while self.charger.queue:
            head = self.drone_by_id(self.charger.queue[0])
            decision = policy.release(self, head)
            self._log_decision(head, "release", decision, float("nan"), float("nan"))
            if decision != Decision.FLY_TO_CHARGER:
                break
            self.release(head)

    def _log_decision(self, drone: Drone, rule: str, decision: Decision,
                      threshold: float, prediction: float) -> None:
        if self.log_decisions:
            self.decisions.append(DecisionRecord(self.clock, drone.id, rule, decision, threshold, prediction))

    def drone_phase(self) -> None:
        cfg = self.config
        for drone in self.drones:
            if not drone.alive:
                continue

            if drone.mode == DroneMode.CHARGING:
                drone.battery = min(1.0, drone.battery + cfg.charging_rate)
                if drone.battery >= 1.0 - _BATTERY_EPS:
                    drone.battery = 1.0
                continue

            if drone.mode == DroneMode.MOVING_TO_CHARGER:
                target = self.charger.position
            else:
                target = drone.hover_point

            if drone.position != target:
                drone.position = _move_towards(drone.position, target, cfg.drone_speed)
                cost = cfg.moving_battery_consumption
            else:
                cost = cfg.hovering_battery_consumption

            drone.battery = max(0.0, drone.battery - cost)
            if drone.battery <= 0.0:
                self.terminate(drone)

    def charger_phase(self) -> None:
        charger = self.charger
        # 充满的无人机释放槽位，返回悬停点
        for drone_id in list(charger.occupants):
            drone = self.drone_by_id(drone_id)
            if drone.battery >= 1.0:
                charger.occupants.remove(drone_id)
                self.set_mode(drone, DroneMode.PROTECTING)

        # 空闲槽位按放行顺序分配给已到达的无人机
        while charger.free_slots > 0 and charger.arrivals:
            head = self.drone_by_id(charger.arrivals[0])
            if head.position != charger.position:
                break
            charger.arrivals.pop(0)
            charger.occupants.append(head.id)
            self.set_mode(head, DroneMode.CHARGING)
            charger.grant_log.append((self.clock, head.id))

    def record_snapshots(self) -> None:
        counts = self.mode_counts()
        for drone in self.drones:
            self.history.record(drone_entity(drone.id), self.clock, self.drone_snapshot(drone, counts))
        self.history.record(FIELD_ENTITY, self.clock, self.field_snapshot())

    def estimator_phase(self, estimators: Iterable[EstimatorHandle]) -> None:
        t = self.clock
        for handle in estimators:
            spec = handle.spec
            rng = self.estimator_rng(handle.id)
            if spec.trigger == "tick":
                if t % spec.observe_every == 0:
                    if spec.entity == FIELD_ENTITY:
                        entities = [FIELD_ENTITY]
                    else:
                        entities = [drone_entity(d.id) for d in self.drones if d.alive]
                    for entity in entities:
                        self._observe(handle, rng, entity)
            else:
                for drone_id in self._events[spec.trigger]:
                    if self.drone_by_id(drone_id).alive:
                        self._observe(handle, rng, drone_entity(drone_id))
            handle.resolve_pending(self.history, t)

    def _observe(self, handle: EstimatorHandle, rng: np.random.Generator, entity: str) -> None:
        lo, hi = handle.spec.horizon
        delta = None
        if handle.spec.label.kind == "future_value":
            delta = int(rng.integers(lo, hi + 1)) if lo < hi else lo
        handle.observe(self.history.get(entity, self.clock), self.clock, delta, entity)

    def record_series(self) -> None:
        self.series["attacking_birds"].append(self.attacking_birds)
        self.series["detected_birds"].append(self.detected_birds)
        self.series["drones_charging"].append(self.mode_count(DroneMode.CHARGING))
        self.series["drones_protecting"].append(self.mode_count(DroneMode.PROTECTING))
        self.series["mean_battery"].append(float(np.mean([d.battery for d in self.drones])))
        self.battery_log.append([d.battery for d in self.drones])
        self.mode_log.append([MODE_CODES[d.mode] for d in self.drones])


def world_init(config: WorldConfig, birds: Optional[BirdConfig] = None, seed: Optional[int] = None,
               log_decisions: bool = False) -> World:
    """创建初始世界：无人机满电位于悬停点，鸟空闲，作物完好，时钟为 0"""
    return World(config, birds=birds, seed=seed, log_decisions=log_decisions)


def world_step(world: World, policy, estimators: Iterable[EstimatorHandle] = ()) -> World:
    """
    推进一个 tick

    阶段顺序: 鸟 -> 决策 -> 无人机(结束时记录快照) -> 充电站 -> 估计器 -> 时钟 +1
    """
    if world.clock >= world.config.run_length:
        raise SimulationError(f"时钟 {world.clock} 已达到 run_length")

    world._events = {"enqueue": [], "release": []}
    world.bird_phase()
    world.policy_phase(policy)
    world.drone_phase()
    world.record_snapshots()
    world.record_series()
    world.charger_phase()
    world.estimator_phase(estimators)
    world.clock += 1
    return world


def _prune_history(world: World, estimators: List[EstimatorHandle]) -> None:
    """丢弃所有估计器都不再需要的旧快照"""
    if not estimators:
        keep_from = world.clock
    else:
        keep_from = world.clock - max(h.spec.horizon[1] for h in estimators) - 1
        pending = [p.t_observed for h in estimators for p in h.pending]
        if pending:
            keep_from = min(keep_from, min(pending))
    world.history.cleanup_old_data(keep_from)


def run_simulation(settings: Settings, policy, estimators: Optional[Mapping[str, EstimatorHandle]] = None,
                   seed: Optional[int] = None) -> SimResult:
    """
    执行一次完整仿真

    Args:
        settings: 完整配置
        policy: 适应策略（见 adaptation_rules）
        estimators: 参与数据采集的估计器（id -> 句柄），按 id 顺序处理
        seed: 覆盖 world.seed
    """
    handles = [estimators[k] for k in sorted(estimators)] if estimators else []
    for handle in handles:
        handle.reset_run_state()

    world = world_init(settings.world, settings.birds, seed=seed,
                       log_decisions=settings.output.log_decisions)
    day = settings.world.ticks_per_day
    for _ in range(settings.world.run_length):
        world_step(world, policy, handles)
        if world.clock % day == 0:
            _prune_history(world, handles)

    result = SimResult(
        seed=world.seed,
        n_drones=settings.world.n_drones,
        damage_rate=world.damage_rate,
        survived_drones=world.survived_drones,
        series={name: np.asarray(values, dtype=float) for name, values in world.series.items()},
        drone_battery=np.asarray(world.battery_log, dtype=float).reshape(-1, settings.world.n_drones),
        drone_mode=np.asarray(world.mode_log, dtype=int).reshape(-1, settings.world.n_drones),
        decisions=list(world.decisions),
    )
    for handle in handles:
        result.datasets[handle.id] = list(handle.collected)
        stats = handle.get_stats()
        stats["unresolved"] = handle.pending_count
        result.discard_stats[handle.id] = stats
        result.mean_predictions[handle.id] = handle.mean_prediction

    logger.debug(
        f"仿真结束 seed={world.seed}: 损害率 {result.damage_rate:.4f}，"
        f"存活 {result.survived_drones}/{result.n_drones}"
    )
    return result
