"""
实验驱动
迭代训练（引导估计器 -> 仿真 -> 采集 -> 训练 -> 重复）、常数与 (b,c,f) 网格搜索、
后端/激活函数扫描、估计器评估、Pareto 前沿
"""
import copy
import itertools
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple

import numpy as np
from loguru import logger

from .adaptation_rules import (
    BatteryBoundEstimator, ChargingPolicy, ConstantWaitingTime, ProtectionPolicy, build_policy,
)
from .config_manager import BackendConfig, MLPConfig, ProtectionRuleConfig, Settings
from .estimator import EstimatorHandle, build_estimator
from .ml_backends import split_dataset
from .models import (
    ConfigError, EvalReport, IterationRow, SimResult, SweepResult, SweepRow, TrainingError,
    TrainingSample, UtilityPoint,
)
from .world import run_simulation

# 每个场景参与训练的估计器，第一个用于报告 estimator_mse
SCENARIO_ESTIMATORS = {
    "charging": ["waiting_time", "future_battery"],
    "protection": ["future_birds"],
}


# ==================== 统计工具 ====================

def aggregate_over_seeds(values: Sequence[float]) -> Tuple[float, float]:
    """
    多个种子上的均值与样本标准差

    单个种子时标准差为 0
    """
    if not values:
        raise ValueError("没有可聚合的结果")
    arr = np.asarray(values, dtype=float)
    sd = float(np.std(arr, ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), sd


def pareto_front(points: Sequence[UtilityPoint]) -> Set[int]:
    """
    Pareto 前沿（damage_rate 越小越好，survived_drones 越大越好）

    按 damage_rate 排序后扫描，O(n log n)；完全相同的点同时保留
    """
    if not points:
        raise ValueError("pareto_front 需要至少一个点")

    order = sorted(range(len(points)), key=lambda i: (points[i].damage_rate, -points[i].survived_drones))
    front: Set[int] = set()
    best_lower = -np.inf      # 所有 damage 严格更小的点中的最大 survived
    pos = 0
    while pos < len(order):
        damage = points[order[pos]].damage_rate
        group = []
        while pos < len(order) and points[order[pos]].damage_rate == damage:
            group.append(order[pos])
            pos += 1
        group_best = max(points[i].survived_drones for i in group)
        if group_best > best_lower:
            front.update(i for i in group if points[i].survived_drones == group_best)
        best_lower = max(best_lower, group_best)
    return front


def parallel_map(fn: Callable, items: Iterable, workers: int = 1) -> list:
    """按输入顺序返回结果；workers > 1 时使用进程池"""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# ==================== 估计器与仿真 ====================

def build_estimators(settings: Settings, ids: Optional[Iterable[str]] = None) -> Dict[str, EstimatorHandle]:
    """
    按配置创建估计器句柄（默认为当前场景使用的估计器）

    模型的随机种子由实验的第一个种子派生，不同种子的实验得到不同的初始化
    """
    if ids is None:
        ids = SCENARIO_ESTIMATORS[settings.experiment.scenario]
    window = settings.experiment.replay_window
    offset = settings.experiment.seeds[0]
    return {
        eid: build_estimator(eid, settings.estimators, replay_window=window, seed_offset=offset)
        for eid in ids
    }


def seed_for_run(settings: Settings, run_index: int) -> int:
    seeds = settings.experiment.seeds
    return seeds[run_index % len(seeds)]


def _simulate(job) -> SimResult:
    settings, policy, estimators, seed = job
    return run_simulation(settings, policy, estimators, seed=seed)


def _concat_datasets(results: Sequence[SimResult], estimator_id: str) -> List[TrainingSample]:
    return [s for r in results for s in r.datasets.get(estimator_id, [])]


def _sum_stats(results: Sequence[SimResult], estimator_id: str) -> Dict[str, int]:
    total: Dict[str, int] = {}
    for r in results:
        for key, value in r.discard_stats.get(estimator_id, {}).items():
            total[key] = total.get(key, 0) + value
    return total


def _mean_prediction(results: Sequence[SimResult], estimator_id: str) -> Optional[float]:
    values = [r.mean_predictions.get(estimator_id) for r in results]
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


# ==================== 迭代训练 ====================

@dataclass
class TrainingOutcome:
    """迭代训练结果"""
    estimators: Dict[str, EstimatorHandle]
    report: List[IterationRow] = field(default_factory=list)
    selected_iteration: int = 0
    per_iteration: List[Dict[str, EstimatorHandle]] = field(default_factory=list)


def iterative_training(settings: Settings, estimators: Optional[Dict[str, EstimatorHandle]] = None) -> TrainingOutcome:
    """
    迭代训练

    第 i 行报告使用第 i 版模型的仿真效用，以及该模型在第 i 轮数据测试集上的误差；
    随后在训练集上更新模型（最后一轮之后不再训练）。每轮使用相同的种子序列
    """
    cfg = settings.experiment
    handles = estimators if estimators is not None else build_estimators(settings)
    if not handles:
        raise ConfigError("迭代训练至少需要一个估计器")
    order = [eid for eid in SCENARIO_ESTIMATORS[cfg.scenario] if eid in handles] or sorted(handles)
    primary = order[0]
    policy = build_policy(settings, handles)

    outcome = TrainingOutcome(estimators=handles)
    logger.info(f"开始迭代训练: 场景 {cfg.scenario}，{cfg.n_iterations} 轮 x {cfg.runs_per_iteration} 次仿真")

    for iteration in range(cfg.n_iterations):
        jobs = [(settings, policy, handles, seed_for_run(settings, r)) for r in range(cfg.runs_per_iteration)]
        results = parallel_map(_simulate, jobs, cfg.workers)

        damages = [r.damage_rate for r in results]
        survived = [r.survived_drones for r in results]
        composite = float(np.mean([r.composite_utility for r in results]))

        details: Dict[str, dict] = {}
        splits: Dict[str, Tuple[list, list]] = {}
        for eid in sorted(handles):
            data = _concat_datasets(results, eid)
            entry = {
                "n_samples": len(data),
                "discard_stats": _sum_stats(results, eid),
                "mean_prediction": _mean_prediction(results, eid),
                "mse": None,
                "mae": None,
            }
            if len(data) >= 2:
                train, test = split_dataset(data, cfg.test_fraction, cfg.split_seed + iteration)
                splits[eid] = (train, test)
                report = handles[eid].evaluate(test)
                entry["mse"], entry["mae"] = report.mse, report.mae
            elif data:
                splits[eid] = (data, [])
            details[eid] = entry

        row = IterationRow(
            iteration=iteration,
            mean_damage=float(np.mean(damages)),
            mean_survived=float(np.mean(survived)),
            composite_utility=composite,
            estimator_mse=details[primary]["mse"],
            discarded_samples=sum(d["discard_stats"].get("discarded", 0) for d in details.values()),
            details=details,
        )
        outcome.report.append(row)
        outcome.per_iteration.append(copy.deepcopy(handles))
        mse_text = "n/a" if row.estimator_mse is None else f"{row.estimator_mse:.6g}"
        logger.info(
            f"第 {iteration} 轮: 损害率 {row.mean_damage:.4f}，存活 {row.mean_survived:.2f}，"
            f"{primary} MSE {mse_text}"
        )

        if iteration == cfg.n_iterations - 1:
            break

        for eid in sorted(handles):
            train = splits.get(eid, ([], []))[0]
            try:
                handles[eid].train_update(train)
            except TrainingError as e:
                logger.warning(f"估计器 {eid} 第 {iteration} 轮训练失败，保留上一版模型: {e}")

    if cfg.selection == "best":
        best = 0
        for i, row in enumerate(outcome.report):
            if row.composite_utility >= outcome.report[best].composite_utility:
                best = i
        outcome.selected_iteration = best
        outcome.estimators = outcome.per_iteration[best]
    else:
        outcome.selected_iteration = len(outcome.report) - 1
    logger.info(f"选择第 {outcome.selected_iteration} 轮的估计器（{cfg.selection}）")
    return outcome


# ==================== 网格搜索 ====================

def _sweep(settings: Settings, param_names: List[str], points: List[Dict[str, float]],
           policies: List[object], seeds: Sequence[int]) -> SweepResult:
    jobs = [(settings, policy, None, seed) for policy in policies for seed in seeds]
    results = parallel_map(_simulate, jobs, settings.experiment.workers)

    rows: List[SweepRow] = []
    n_seeds = len(seeds)
    for i, params in enumerate(points):
        chunk = results[i * n_seeds:(i + 1) * n_seeds]
        mean_d, sd_d = aggregate_over_seeds([r.damage_rate for r in chunk])
        mean_s, sd_s = aggregate_over_seeds([r.survived_drones for r in chunk])
        rows.append(SweepRow(
            params=params,
            mean_damage=mean_d, sd_damage=sd_d,
            mean_survived=mean_s, sd_survived=sd_s,
            per_seed=[(r.seed, r.damage_rate, r.survived_drones) for r in chunk],
        ))

    for idx in pareto_front([r.utility for r in rows]):
        rows[idx].pareto = True
    return SweepResult(param_names=param_names, rows=rows)


def grid_search_constant(settings: Settings, values: Sequence[float], seeds: Optional[Sequence[int]] = None,
                         future_battery=None) -> SweepResult:
    """
    常数等待时间基线的网格搜索（充电场景）

    Args:
        values: 等待时间常数
        future_battery: 未来电量估计器，默认使用配置中的上/下界
    """
    if not values:
        raise ConfigError("常数列表不能为空")
    seeds = list(seeds or settings.experiment.seeds)
    params = settings.charging_rule
    if future_battery is None:
        kind = "upper" if params.future_battery_source == "upper_bound" else "lower"
        horizon = tuple(settings.estimators["future_battery"].horizon) \
            if "future_battery" in settings.estimators else (1, 200)
        future_battery = BatteryBoundEstimator(kind, settings.world, horizon)

    policies = [ChargingPolicy(params, ConstantWaitingTime(v), future_battery) for v in values]
    points = [{"waiting_time": float(v)} for v in values]
    logger.info(f"常数网格搜索: {len(values)} 个值 x {len(seeds)} 个种子")
    return _sweep(settings, ["waiting_time"], points, policies, seeds)


def bcf_grid(b_values: Sequence[float], c_values: Sequence[float],
             f_values: Sequence[float]) -> List[Tuple[float, float, float]]:
    """(b, c, f) 网格，去掉 b + c + f >= 1 的点"""
    grid = []
    for b, c, f in itertools.product(b_values, c_values, f_values):
        if b + c + f < 1:
            grid.append((float(b), float(c), float(f)))
        else:
            logger.debug(f"跳过不可达阈值 b={b} c={c} f={f}")
    return grid


def grid_search_bcf(settings: Settings, grid: Sequence[Tuple[float, float, float]],
                    seeds: Optional[Sequence[int]] = None, future_birds=None) -> SweepResult:
    """
    (b, c, f) 网格搜索（田地保护场景）

    Args:
        grid: (b, c, f) 点列表
        future_birds: 已训练的未来鸟数量估计器；f = 0 的点不使用
    """
    if not grid:
        raise ConfigError("(b, c, f) 网格为空")
    seeds = list(seeds or settings.experiment.seeds)
    horizon = settings.protection_rule.future_birds_horizon

    policies, points = [], []
    for b, c, f in grid:
        params = ProtectionRuleConfig(b=b, c=c, f=f, future_birds_horizon=horizon)
        policies.append(ProtectionPolicy(params, future_birds if f != 0 else None))
        points.append({"b": b, "c": c, "f": f})
    logger.info(f"(b,c,f) 网格搜索: {len(grid)} 个点 x {len(seeds)} 个种子")
    return _sweep(settings, ["b", "c", "f"], points, policies, seeds)


# ==================== 后端扫描 ====================

def backend_variant(base: BackendConfig, variant: str) -> Tuple[BackendConfig, Optional[float]]:
    """
    解析后端变体字符串

    mlp:<activation> | knn[:k] | constant:<value>；返回 (后端配置, 新的 bootstrap 值或 None)
    """
    kind, _, arg = variant.partition(":")
    if kind == "mlp":
        activation = arg or base.mlp.output_activation
        mlp = MLPConfig(**{**base.mlp.model_dump(), "output_activation": activation})
        return BackendConfig(**{**base.model_dump(), "kind": "mlp", "mlp": mlp}), None
    if kind == "knn":
        k = int(arg) if arg else base.k
        return BackendConfig(**{**base.model_dump(), "kind": "knn", "k": k}), None
    if kind == "constant":
        if not arg:
            raise ConfigError("constant 变体需要数值，例如 constant:35")
        value = float(arg)
        return BackendConfig(**{**base.model_dump(), "kind": "constant", "value": value}), value
    raise ConfigError(f"未知后端变体: {variant}")


def with_estimator_backend(settings: Settings, estimator_id: str, variant: str) -> Settings:
    """返回替换了某个估计器后端的新配置"""
    if estimator_id not in settings.estimators:
        raise ConfigError(f"配置中没有估计器 {estimator_id}")
    est = settings.estimators[estimator_id]
    backend, bootstrap = backend_variant(est.backend, variant)
    update = {"backend": backend}
    if bootstrap is not None:
        update["bootstrap_value"] = bootstrap
    estimators = dict(settings.estimators)
    estimators[estimator_id] = est.model_copy(update=update)
    return settings.model_copy(update={"estimators": estimators})


def sweep_backend(settings: Settings, variants: Optional[Sequence[str]] = None,
                  estimator_id: Optional[str] = None) -> List[dict]:
    """
    对同一估计器的不同后端/输出激活函数执行迭代训练，报告最终效用与测试误差
    """
    variants = list(variants or settings.sweep.backend_variants)
    estimator_id = estimator_id or settings.sweep.backend_estimator
    rows = []
    for variant in variants:
        variant_settings = with_estimator_backend(settings, estimator_id, variant)
        outcome = iterative_training(variant_settings)
        final = outcome.report[outcome.selected_iteration]
        mse = final.details.get(estimator_id, {}).get("mse")
        rows.append({
            "variant": variant,
            "mean_damage": final.mean_damage,
            "mean_survived": final.mean_survived,
            "composite_utility": final.composite_utility,
            "estimator_mse": mse,
        })
        logger.info(f"后端 {variant}: 损害率 {final.mean_damage:.4f}，存活 {final.mean_survived:.2f}")
    return rows


# ==================== 估计器评估 ====================

@dataclass
class EstimatorEvaluation:
    """估计器评估结果"""
    reports: Dict[str, EvalReport] = field(default_factory=dict)
    sample_counts: Dict[str, int] = field(default_factory=dict)
    bound_violations: Dict[str, int] = field(default_factory=dict)
    discard_stats: Dict[str, Dict[str, int]] = field(default_factory=dict)


def bound_reports(handle: EstimatorHandle, samples: Sequence[TrainingSample], settings: Settings
                  ) -> Tuple[Dict[str, EvalReport], Dict[str, int]]:
    """
    在到达充电站时的电量样本上评估上/下界，并统计夹逼违规次数
    """
    lower = BatteryBoundEstimator("lower", settings.world)
    upper = BatteryBoundEstimator("upper", settings.world)
    reports, violations = {}, {"lower": 0, "upper": 0}

    def as_predictor(bound: BatteryBoundEstimator):
        def fn(sample_vector, delta):
            battery = handle.input_feature(sample_vector, "battery")
            return bound.predict({"battery": battery}, delta)
        return fn

    for name, bound in (("lower", lower), ("upper", upper)):
        fn = as_predictor(bound)
        preds = np.array([fn(s.input_vector, s.delta) for s in samples], dtype=float)
        labels = np.array([s.label for s in samples], dtype=float)
        err = preds - labels
        reports[f"{name}_bound"] = EvalReport(
            mse=float(np.mean(err ** 2)),
            mae=float(np.mean(np.abs(err))),
            scatter=[(float(p), float(t)) for p, t in zip(preds, labels)],
        )
        if name == "lower":
            violations[name] = int(np.sum(preds > labels + 1e-9))
        else:
            violations[name] = int(np.sum(preds < labels - 1e-9))
    return reports, violations


def evaluate_estimators(settings: Settings) -> EstimatorEvaluation:
    """
    从相同的仿真中采集有守卫/无守卫的未来电量数据和到达充电站时的电量样本；
    分别训练 MLP 并在有守卫的测试集上评估，同时评估领域知识上/下界
    """
    cfg = settings.experiment
    ids = ["future_battery", "future_battery_unguarded", "approach_battery"]
    handles = build_estimators(settings, ids)

    # 采集阶段使用基线规则（常数等待时间 + 下界）
    charging = settings.charging_rule.model_copy(
        update={"waiting_time_source": "constant", "future_battery_source": "lower_bound"}
    )
    collect_settings = settings.model_copy(update={
        "charging_rule": charging,
        "experiment": cfg.model_copy(update={"scenario": "charging"}),
    })
    policy = build_policy(collect_settings, {})

    jobs = [(collect_settings, policy, handles, seed_for_run(settings, r)) for r in range(cfg.runs_per_iteration)]
    results = parallel_map(_simulate, jobs, cfg.workers)

    evaluation = EstimatorEvaluation()
    data = {eid: _concat_datasets(results, eid) for eid in ids}
    for eid in ids:
        evaluation.sample_counts[eid] = len(data[eid])
        evaluation.discard_stats[eid] = _sum_stats(results, eid)

    g_train, g_test = split_dataset(data["future_battery"], cfg.test_fraction, cfg.split_seed)
    u_train, _ = split_dataset(data["future_battery_unguarded"], cfg.test_fraction, cfg.split_seed)
    handles["future_battery"].train_update(g_train)
    handles["future_battery_unguarded"].train_update(u_train)
    evaluation.reports["guarded"] = handles["future_battery"].evaluate(g_test)
    evaluation.reports["unguarded"] = handles["future_battery_unguarded"].evaluate(g_test)

    approach = data["approach_battery"]
    a_train, a_test = split_dataset(approach, cfg.test_fraction, cfg.split_seed)
    handles["approach_battery"].train_update(a_train)
    evaluation.reports["approach_mlp"] = handles["approach_battery"].evaluate(a_test)
    bounds_test, _ = bound_reports(handles["approach_battery"], a_test, settings)
    evaluation.reports.update(bounds_test)
    _, violations = bound_reports(handles["approach_battery"], approach, settings)
    evaluation.bound_violations = violations

    logger.info(
        f"估计器评估: 有守卫 MSE {evaluation.reports['guarded'].mse:.6g}，"
        f"无守卫 MSE {evaluation.reports['unguarded'].mse:.6g}，"
        f"下界 MAE {evaluation.reports['lower_bound'].mae:.6g}，上界 MAE {evaluation.reports['upper_bound'].mae:.6g}"
    )
    return evaluation


def summarize_sweep(result: SweepResult) -> Mapping[str, object]:
    """网格搜索摘要（metrics.json 使用）"""
    best = result.best_by_damage()
    return {
        "n_points": len(result.rows),
        "pareto_points": [row.params for row in result.rows if row.pareto],
        "best_by_damage": None if best is None else {
            "params": best.params, "mean_damage": best.mean_damage, "mean_survived": best.mean_survived,
        },
    }
