"""
测试公共夹具
"""
import sys
from typing import List

import pytest
from loguru import logger

from src.adaptation_rules import AdaptationPolicy
from src.config_manager import Settings, get_settings
from src.models import Decision

ESTIMATOR_IDS = ["future_battery", "future_battery_unguarded", "approach_battery", "waiting_time", "future_birds"]

# 小规模配置：短仿真、少迭代、MLP 只训练几个 epoch
SMALL_OVERRIDES: List[str] = [
    "world.run_length=300",
    "experiment.seeds=[1,2]",
    "experiment.n_iterations=2",
    "experiment.runs_per_iteration=1",
    "experiment.workers=1",
    "output.plots=false",
    "logging.level=WARNING",
] + [f"estimators.{eid}.backend.mlp.epochs=3" for eid in ESTIMATOR_IDS]


def small_settings(*extra: str) -> Settings:
    return get_settings("default", SMALL_OVERRIDES + list(extra))


class StayPolicy(AdaptationPolicy):
    """从不排队的策略（所有无人机一直保护田地）"""
    name = "stay"

    def decide(self, world, drone):
        return Decision.STAY, 0.0, 0.0


class FakeEstimator:
    """返回固定值并记录调用时的 delta"""

    def __init__(self, value: float, horizon=(1, 200)):
        self.value = value
        self.horizon = horizon
        self.deltas = []

    def predict(self, snapshot, delta=None):
        self.deltas.append(delta)
        return self.value


@pytest.fixture(autouse=True, scope="session")
def _quiet_logging():
    logger.remove()
    logger.add(sys.stderr, level="WARNING")
    yield


@pytest.fixture
def settings_factory():
    return small_settings


@pytest.fixture
def stay_policy():
    return StayPolicy()
