"""
实验驱动测试
"""
import numpy as np
import pytest

from conftest import StayPolicy, small_settings
from src.adaptation_rules import BatteryBoundEstimator, ChargingPolicy, ConstantWaitingTime
from src.config_manager import BackendConfig
from src.experiment_runner import (
    aggregate_over_seeds, backend_variant, bcf_grid, build_estimators, evaluate_estimators,
    grid_search_bcf, grid_search_constant, iterative_training, pareto_front, summarize_sweep,
    with_estimator_backend,
)
from src.models import ConfigError, UtilityPoint
from src.world import run_simulation


def dominance_oracle(points):
    """O(n^2) 两两比较"""
    front = set()
    for i, p in enumerate(points):
        dominated = any(
            q.damage_rate <= p.damage_rate and q.survived_drones >= p.survived_drones
            and (q.damage_rate < p.damage_rate or q.survived_drones > p.survived_drones)
            for j, q in enumerate(points) if j != i
        )
        if not dominated:
            front.add(i)
    return front


# ==================== Pareto 与聚合 ====================

def test_pareto_single_point():
    assert pareto_front([UtilityPoint(0.3, 5)]) == {0}


def test_pareto_rejects_empty_input():
    with pytest.raises(ValueError):
        pareto_front([])


def test_pareto_hand_example():
    points = [UtilityPoint(0.2, 10), UtilityPoint(0.3, 12), UtilityPoint(0.4, 9)]
    assert pareto_front(points) == {0, 1}


def test_pareto_keeps_identical_points():
    points = [UtilityPoint(0.2, 10), UtilityPoint(0.2, 10), UtilityPoint(0.2, 9)]
    assert pareto_front(points) == {0, 1}


@pytest.mark.parametrize("n, seed", [(200, 0), (1000, 1)])
def test_pareto_matches_oracle(n, seed):
    rng = np.random.default_rng(seed)
    # 取整制造重复值与并列
    points = [UtilityPoint(float(d), float(s))
              for d, s in zip(np.round(rng.random(n), 2), rng.integers(0, 13, n))]
    assert pareto_front(points) == dominance_oracle(points)


def test_aggregate_over_seeds():
    assert aggregate_over_seeds([0.5]) == (0.5, 0.0)
    mean, sd = aggregate_over_seeds([0.2, 0.4])
    assert mean == pytest.approx(0.3)
    assert sd == pytest.approx(np.std([0.2, 0.4], ddof=1))
    assert aggregate_over_seeds([0.3, 0.3, 0.3])[1] == 0.0
    with pytest.raises(ValueError):
        aggregate_over_seeds([])


# ==================== 常数网格搜索 ====================

def test_single_constant_equals_direct_run():
    settings = small_settings("world.run_length=400")
    result = grid_search_constant(settings, [35.0], seeds=[3])

    policy = ChargingPolicy(settings.charging_rule, ConstantWaitingTime(35.0),
                            BatteryBoundEstimator("lower", settings.world, (1, 200)))
    direct = run_simulation(settings, policy, None, seed=3)

    assert len(result.rows) == 1
    row = result.rows[0]
    assert row.params == {"waiting_time": 35.0}
    assert row.mean_damage == direct.damage_rate
    assert row.mean_survived == direct.survived_drones
    assert row.sd_damage == 0.0
    assert row.pareto


def test_constant_sweep_rows_follow_values():
    settings = small_settings()
    result = grid_search_constant(settings, [0.0, 100.0])
    assert [r.params["waiting_time"] for r in result.rows] == [0.0, 100.0]
    assert all(len(r.per_seed) == 2 for r in result.rows)
    assert any(r.pareto for r in result.rows)
    summary = summarize_sweep(result)
    assert summary["n_points"] == 2

    with pytest.raises(ConfigError):
        grid_search_constant(settings, [])


# ==================== (b,c,f) 网格搜索 ====================

def test_bcf_grid_drops_unattainable_points():
    assert bcf_grid([0.5], [0.3], [0.1, 0.2]) == [(0.5, 0.3, 0.1)]
    assert len(bcf_grid([0.0, 0.1], [0.0], [0.0, 0.1])) == 4


def test_zero_point_equals_never_enqueue_run():
    settings = small_settings("experiment.scenario=protection", "world.run_length=450")
    result = grid_search_bcf(settings, [(0.0, 0.0, 0.0)], seeds=[1])
    direct = run_simulation(settings, StayPolicy(), seed=1)
    assert result.rows[0].mean_damage == direct.damage_rate
    assert result.rows[0].mean_survived == direct.survived_drones


def test_bcf_grid_order_does_not_matter():
    settings = small_settings("experiment.scenario=protection", "world.run_length=400")
    grid = [(0.0, 0.0, 0.0), (0.3, 0.1, 0.0), (0.5, 0.4, 0.0)]
    forward = grid_search_bcf(settings, grid)
    backward = grid_search_bcf(settings, list(reversed(grid)))

    def table(result):
        return {tuple(r.params.values()): (r.mean_damage, r.mean_survived, r.pareto) for r in result.rows}

    assert table(forward) == table(backward)
    assert forward.param_names == ["b", "c", "f"]


def test_bcf_requires_points():
    with pytest.raises(ConfigError):
        grid_search_bcf(small_settings("experiment.scenario=protection"), [])


# ==================== 迭代训练 ====================

def test_single_iteration_is_pure_bootstrap():
    settings = small_settings("experiment.n_iterations=1")
    outcome = iterative_training(settings)
    assert len(outcome.report) == 1
    assert outcome.selected_iteration == 0
    assert not any(h.trained for h in outcome.estimators.values())


def test_constant_backend_gives_identical_iterations():
    settings = small_settings("experiment.n_iterations=3", "world.run_length=400")
    settings = with_estimator_backend(settings, "waiting_time", "constant:35")
    outcome = iterative_training(settings)

    damages = {row.mean_damage for row in outcome.report}
    survived = {row.mean_survived for row in outcome.report}
    assert len(outcome.report) == 3
    assert len(damages) == 1 and len(survived) == 1
    assert outcome.estimators["waiting_time"].trained


def test_best_selection_returns_argmax_iteration():
    settings = small_settings("experiment.n_iterations=3", "experiment.selection=best", "world.run_length=400")
    outcome = iterative_training(settings)

    utilities = [row.composite_utility for row in outcome.report]
    best = max(i for i, u in enumerate(utilities) if u == max(utilities))
    assert outcome.selected_iteration == best
    assert outcome.estimators is outcome.per_iteration[best]


def test_iteration_report_details():
    settings = small_settings("world.run_length=400")
    outcome = iterative_training(settings)
    first = outcome.report[0]
    assert set(first.details) == {"waiting_time", "future_battery"}
    assert first.details["future_battery"]["n_samples"] > 0
    stats = first.details["future_battery"]["discard_stats"]
    assert stats["observed"] == stats["resolved"] + stats["discarded"] + stats["unresolved"]
    # 第 0 行使用引导估计器
    assert first.details["waiting_time"]["mean_prediction"] == pytest.approx(35.0)


def test_estimator_seeds_follow_experiment_seed():
    first = build_estimators(small_settings("experiment.seeds=[1,2]"))
    other = build_estimators(small_settings("experiment.seeds=[4,2]"))
    for eid, handle in first.items():
        assert other[eid].spec.backend.seed == handle.spec.backend.seed + 3


# ==================== 后端变体 ====================

def test_backend_variant_parsing():
    base = BackendConfig()
    backend, bootstrap = backend_variant(base, "mlp:identity")
    assert (backend.kind, backend.mlp.output_activation, bootstrap) == ("mlp", "identity", None)

    backend, _ = backend_variant(base, "knn:3")
    assert (backend.kind, backend.k) == ("knn", 3)

    backend, bootstrap = backend_variant(base, "constant:35")
    assert (backend.kind, backend.value, bootstrap) == ("constant", 35.0, 35.0)

    for bad in ("constant", "svm"):
        with pytest.raises(ConfigError):
            backend_variant(base, bad)


def test_with_estimator_backend_unknown_id():
    with pytest.raises(ConfigError):
        with_estimator_backend(small_settings(), "missing", "knn")


# ==================== 估计器评估 ====================

def test_evaluate_estimators_bounds_sandwich_observations():
    settings = small_settings("world.run_length=600", "experiment.runs_per_iteration=2")
    evaluation = evaluate_estimators(settings)

    assert {"guarded", "unguarded", "approach_mlp", "lower_bound", "upper_bound"} <= set(evaluation.reports)
    assert evaluation.sample_counts["approach_battery"] >= 2
    assert evaluation.bound_violations == {"lower": 0, "upper": 0}
    for predicted, observed in evaluation.reports["lower_bound"].scatter:
        assert predicted <= observed + 1e-9
    for predicted, observed in evaluation.reports["upper_bound"].scatter:
        assert predicted >= observed - 1e-9
