"""
结果输出
把仿真、迭代训练、网格搜索和估计器评估的结果写入输出目录（CSV / JSON / npz）
输出内容不含时间戳，浮点数格式固定，同样的输入得到逐字节相同的文件
"""
import csv
import json
import math
from pathlib import Path
from typing import Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from .config_manager import Settings, dump_resolved
from .estimator import EstimatorHandle, dataset_header
from .models import ConfigError, DecisionRecord, EvalReport, IterationRow, SimResult, SweepResult, UtilityPoint
from .world import SERIES_COLUMNS


def fmt(value) -> str:
    """固定格式的数值文本（空值写为空字符串）"""
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    value = float(value)
    if math.isnan(value):
        return "nan"
    return f"{value:.10g}"


def _json_ready(obj):
    """转换为可 JSON 序列化的结构，浮点数按 fmt 规整"""
    if isinstance(obj, Mapping):
        return {str(k): _json_ready(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_ready(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        value = float(obj)
        return None if not math.isfinite(value) else float(fmt(value))
    return obj


class ResultWriter:
    """输出目录写入器"""

    def __init__(self, directory: str):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self._written: List[Path] = []

    @property
    def written(self) -> List[Path]:
        return list(self._written)

    # ---------- 基础 ----------

    def _path(self, name: str) -> Path:
        path = self.directory / name
        path.parent.mkdir(parents=True, exist_ok=True)
        self._written.append(path)
        return path

    def write_csv(self, name: str, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
        path = self._path(name)
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(header)
            for row in rows:
                writer.writerow([v if isinstance(v, str) else fmt(v) for v in row])
        logger.debug(f"写入 {path}")
        return path

    def write_json(self, name: str, data) -> Path:
        path = self._path(name)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(_json_ready(data), f, indent=2, sort_keys=True, ensure_ascii=False)
            f.write("\n")
        logger.debug(f"写入 {path}")
        return path

    def write_config(self, settings: Settings) -> Path:
        """写出解析后的完整配置"""
        path = self._path("config.resolved")
        path.write_text(dump_resolved(settings), encoding="utf-8")
        return path

    # ---------- 仿真 ----------

    def write_simulation(self, result: SimResult, estimators: Optional[Mapping[str, EstimatorHandle]] = None) -> None:
        """metrics.json、timeseries.csv、各估计器数据集 CSV、decisions.csv"""
        self.write_json("metrics.json", {
            "seed": result.seed,
            "damage_rate": result.damage_rate,
            "survived_drones": result.survived_drones,
            "n_drones": result.n_drones,
            "discard_stats": result.discard_stats,
        })

        n_ticks = len(result.series.get(SERIES_COLUMNS[0], []))
        rows = ([t] + [result.series[c][t] for c in SERIES_COLUMNS] for t in range(n_ticks))
        self.write_csv("timeseries.csv", ["tick"] + SERIES_COLUMNS, rows)

        for eid in sorted(result.datasets):
            handle = (estimators or {}).get(eid)
            self.write_dataset(eid, result.datasets[eid], handle)

        if result.decisions:
            self.write_decisions(result.decisions)

    def write_dataset(self, estimator_id: str, samples, handle: Optional[EstimatorHandle] = None) -> Path:
        if handle is not None:
            header = dataset_header(handle)
        else:
            dim = len(samples[0].input_vector) if samples else 0
            header = ["t_observed", "t_resolved"] + [f"x{i}" for i in range(dim)] + ["label"]
        rows = ([s.t_observed, s.t_resolved, *[float(v) for v in s.input_vector], s.label] for s in samples)
        return self.write_csv(f"datasets/{estimator_id}.csv", header, rows)

    def write_decisions(self, decisions: Sequence[DecisionRecord]) -> Path:
        rows = ([d.tick, d.drone, d.rule, d.decision.value, d.threshold, d.prediction] for d in decisions)
        return self.write_csv("decisions.csv", ["tick", "drone", "rule", "decision", "threshold", "prediction"], rows)

    # ---------- 迭代训练 ----------

    def write_iteration_report(self, report: Sequence[IterationRow], selected: Optional[int] = None) -> None:
        rows = ([r.iteration, r.mean_damage, r.mean_survived, r.estimator_mse, r.discarded_samples] for r in report)
        self.write_csv(
            "iteration_report.csv",
            ["iteration", "mean_damage", "mean_survived", "estimator_mse", "discarded_samples"],
            rows,
        )
        self.write_json("iteration_details.json", {
            "selected_iteration": selected,
            "iterations": [
                {"iteration": r.iteration, "composite_utility": r.composite_utility, "estimators": r.details}
                for r in report
            ],
        })

    def save_models(self, estimators: Mapping[str, EstimatorHandle]) -> None:
        for eid in sorted(estimators):
            path = self._path(f"models/{eid}.npz")
            np.savez(path, **estimators[eid].model_arrays())

    # ---------- 网格搜索 ----------

    def write_sweep(self, result: SweepResult, name: str = "sweep.csv") -> Path:
        header = list(result.param_names) + ["mean_damage", "sd_damage", "mean_survived", "sd_survived", "pareto"]
        rows = (
            [row.params[p] for p in result.param_names]
            + [row.mean_damage, row.sd_damage, row.mean_survived, row.sd_survived, row.pareto]
            for row in result.rows
        )
        return self.write_csv(name, header, rows)

    def write_backend_sweep(self, rows: Sequence[dict]) -> Path:
        header = ["variant", "mean_damage", "mean_survived", "composite_utility", "estimator_mse"]
        return self.write_csv("backend_sweep.csv", header, ([r[h] for h in header] for r in rows))

    def write_pareto(self, labels: Sequence[str], points: Sequence[UtilityPoint], front: Iterable[int]) -> Path:
        front = set(front)
        rows = ([lab, p.damage_rate, p.survived_drones, i in front] for i, (lab, p) in enumerate(zip(labels, points)))
        return self.write_csv("pareto.csv", ["label", "damage", "survived", "pareto"], rows)

    # ---------- 估计器评估 ----------

    def write_evaluation(self, reports: Mapping[str, EvalReport], extra: Optional[dict] = None) -> None:
        summary = {name: {"mse": r.mse, "mae": r.mae, "n": len(r.scatter)} for name, r in reports.items()}
        self.write_json("eval_report.json", {"reports": summary, **(extra or {})})
        for name in sorted(reports):
            self.write_csv(f"scatter_{name}.csv", ["predicted", "true"], reports[name].scatter)


def read_pareto_input(path: str) -> Tuple[List[str], List[UtilityPoint]]:
    """
    读取 pareto 子命令的输入 CSV

    需要 damage 与 survived 两列；label 列可选，缺省使用行号
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"输入文件不存在: {path}")
    labels: List[str] = []
    points: List[UtilityPoint] = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        fields = reader.fieldnames or []
        if "damage" not in fields or "survived" not in fields:
            raise ConfigError(f"输入 CSV 需要 damage 和 survived 列，实际 {fields}")
        for i, row in enumerate(reader):
            try:
                points.append(UtilityPoint(float(row["damage"]), float(row["survived"])))
            except (TypeError, ValueError) as e:
                raise ConfigError(f"第 {i + 2} 行数值无效: {row}") from e
            labels.append(row.get("label") or str(i))
    if not points:
        raise ConfigError(f"输入文件没有数据行: {path}")
    return labels, points
