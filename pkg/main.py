"""
智能田地保护系统仿真器
主程序入口（命令行）
"""
import argparse
import sys
from pathlib import Path
from typing import List, Optional

from loguru import logger

# 添加项目根目录到路径
sys.path.insert(0, str(Path(__file__).parent))

from src.chart_generator import ChartGenerator
from src.config_manager import Settings, get_settings
from src.experiment_runner import (
    bcf_grid, build_estimators, evaluate_estimators, grid_search_bcf, grid_search_constant,
    iterative_training, pareto_front, summarize_sweep, sweep_backend,
)
from src.adaptation_rules import build_policy
from src.models import ConfigError, SFPSError
from src.result_writer import ResultWriter, read_pareto_input
from src.world import run_simulation

COMMANDS = ["simulate", "train", "sweep-constant", "sweep-bcf", "sweep-backend", "pareto", "eval-estimator"]


def _float_list(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"需要逗号分隔的数值列表: {text}")


def _int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"需要逗号分隔的整数列表: {text}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sfps", description="智能田地保护系统仿真与估计器训练")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default="default", help="YAML 配置文件，default 使用 config/settings.yaml")
    common.add_argument("--seed", type=int, default=None, help="仿真种子（覆盖 world.seed）")
    common.add_argument("--seeds", type=_int_list, default=None, help="实验种子列表，如 1,2,3")
    common.add_argument("--out", default=None, help="输出目录（覆盖 output.directory）")
    common.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="覆盖配置项，如 world.n_birds=50")

    sub.add_parser("simulate", parents=[common], help="执行一次仿真")
    sub.add_parser("train", parents=[common], help="迭代训练估计器")

    p = sub.add_parser("sweep-constant", parents=[common], help="常数等待时间网格搜索")
    p.add_argument("--values", type=_float_list, default=None, help="等待时间常数，如 0,5,10")

    p = sub.add_parser("sweep-bcf", parents=[common], help="(b,c,f) 网格搜索")
    p.add_argument("--b", type=_float_list, default=None)
    p.add_argument("--c", type=_float_list, default=None)
    p.add_argument("--f", type=_float_list, default=None)

    p = sub.add_parser("sweep-backend", parents=[common], help="后端/输出激活函数扫描")
    p.add_argument("--variants", default=None, help="如 mlp:softplus,knn,constant:35")
    p.add_argument("--estimator", default=None, help="被扫描的估计器 id")

    p = sub.add_parser("pareto", parents=[common], help="计算 CSV 中点的 Pareto 前沿")
    p.add_argument("--input", required=True, help="包含 damage,survived 列的 CSV")

    sub.add_parser("eval-estimator", parents=[common], help="评估有守卫/无守卫估计器与电量上下界")
    return parser


class SimulatorApp:
    """
    命令行应用
    负责配置、日志和各子命令的调度
    """

    def __init__(self, settings: Settings, args: argparse.Namespace):
        self.settings = settings
        self.args = args
        self.writer = ResultWriter(settings.output.directory)
        self.charts = ChartGenerator()

    def _setup_logging(self):
        """配置日志"""
        log_cfg = self.settings.logging

        # 移除默认处理器
        logger.remove()

        # 控制台输出
        logger.add(
            sys.stderr,
            level=log_cfg.level,
            format="<green>{time:HH:mm:ss}</green> | <level>{level: <8}</level> | <cyan>{message}</cyan>"
        )

        # 文件输出（按日期分割）
        if log_cfg.file_output:
            log_path = Path(log_cfg.file_path)
            log_path.parent.mkdir(parents=True, exist_ok=True)
            daily_log_path = log_path.parent / f"{log_path.stem}_{{time:YYYY-MM-DD}}{log_path.suffix}"

            logger.add(
                str(daily_log_path),
                level=log_cfg.level,
                rotation="00:00",       # 每天午夜轮转
                retention="30 days",    # 保留30天日志
                compression="gz",       # 旧日志压缩为 .gz
                format="{time:YYYY-MM-DD HH:mm:ss} | {level: <8} | {message}"
            )

    def _save_png(self, name: str, data: Optional[bytes]) -> None:
        if data:
            path = self.writer.directory / name
            path.write_bytes(data)
            logger.info(f"图表已保存: {path}")

    def run(self) -> int:
        self._setup_logging()
        command = self.args.command
        logger.info(f"执行 {command}，输出目录 {self.writer.directory}")
        self.writer.write_config(self.settings)
        handler = getattr(self, "cmd_" + command.replace("-", "_"))
        handler()
        logger.info(f"{command} 完成")
        return 0

    # ==================== 子命令 ====================

    def cmd_simulate(self):
        settings = self.settings
        estimators = build_estimators(settings)
        policy = build_policy(settings, estimators)
        result = run_simulation(settings, policy, estimators)
        self.writer.write_simulation(result, estimators)
        logger.info(f"损害率 {result.damage_rate:.4f}，存活无人机 {result.survived_drones}/{result.n_drones}")
        if settings.output.plots:
            self._save_png("birds.png", self.charts.birds_chart(
                result.series["detected_birds"], settings.world.n_birds, settings.birds, settings.world.ticks_per_day
            ))

    def cmd_train(self):
        outcome = iterative_training(self.settings)
        self.writer.write_iteration_report(outcome.report, outcome.selected_iteration)
        self.writer.save_models(outcome.estimators)

    def cmd_sweep_constant(self):
        values = self.args.values or self.settings.sweep.constant_values
        result = grid_search_constant(self.settings, values)
        self._finish_sweep(result, "Pareto: waiting-time constant")

    def cmd_sweep_bcf(self):
        sweep = self.settings.sweep
        grid = bcf_grid(self.args.b or sweep.b_values, self.args.c or sweep.c_values, self.args.f or sweep.f_values)
        future_birds = None
        if any(f != 0 for _, _, f in grid):
            logger.info("先迭代训练未来鸟数量估计器")
            outcome = iterative_training(self.settings)
            future_birds = outcome.estimators.get("future_birds")
            self.writer.write_iteration_report(outcome.report, outcome.selected_iteration)
        result = grid_search_bcf(self.settings, grid, future_birds=future_birds)
        self._finish_sweep(result, "Pareto: (b, c, f)")

    def _finish_sweep(self, result, title: str):
        self.writer.write_sweep(result)
        self.writer.write_json("metrics.json", summarize_sweep(result))
        best = result.best_by_damage()
        if best is not None:
            logger.info(f"最小平均损害 {best.mean_damage:.4f}，参数 {best.params}")
        if self.settings.output.plots:
            self._save_png("pareto.png", self.charts.pareto_chart(result, title))

    def cmd_sweep_backend(self):
        variants = self.args.variants.split(",") if self.args.variants else None
        rows = sweep_backend(self.settings, variants, self.args.estimator)
        self.writer.write_backend_sweep(rows)

    def cmd_pareto(self):
        labels, points = read_pareto_input(self.args.input)
        front = pareto_front(points)
        self.writer.write_pareto(labels, points, front)
        for i, label in enumerate(labels):
            print(f"{label},{1 if i in front else 0}")

    def cmd_eval_estimator(self):
        evaluation = evaluate_estimators(self.settings)
        self.writer.write_evaluation(evaluation.reports, {
            "sample_counts": evaluation.sample_counts,
            "bound_violations": evaluation.bound_violations,
            "discard_stats": evaluation.discard_stats,
        })
        if self.settings.output.plots:
            for name in ("guarded", "unguarded", "lower_bound", "upper_bound"):
                self._save_png(f"scatter_{name}.png", self.charts.scatter_chart(evaluation.reports[name].scatter, name))


def load_settings(args: argparse.Namespace) -> Settings:
    """合并配置文件、--set 覆盖项与常用命令行参数"""
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"world.seed={args.seed}")
    if args.seeds:
        overrides.append(f"experiment.seeds=[{','.join(str(s) for s in args.seeds)}]")
    if args.out:
        overrides.append(f"output.directory={args.out}")
    if args.command == "sweep-constant":
        overrides.append("experiment.scenario=charging")
    elif args.command == "sweep-bcf":
        overrides.append("experiment.scenario=protection")
    elif args.command == "sweep-backend" and not any(o.startswith("experiment.scenario") for o in overrides):
        overrides.append("experiment.scenario=charging")
    return get_settings(args.config, overrides)


def cli_main(argv: Optional[List[str]] = None) -> int:
    """
    命令行入口

    返回码: 0 成功；2 参数或配置错误；1 运行错误
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    try:
        settings = load_settings(args)
        return SimulatorApp(settings, args).run()
    except ConfigError as e:
        logger.error(f"配置错误: {e}")
        return 2
    except SFPSError as e:
        logger.error(f"运行出错: {e}")
        return 1
    except Exception as e:
        logger.exception(f"运行出错: {e}")
        return 1


def main():
    """主函数"""
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
