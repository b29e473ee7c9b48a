"""
图表生成模块
使用 matplotlib 生成 Pareto 图、预测-真实散点图、攻击概率与检测鸟数对比图
"""
import io
from typing import Optional, Sequence, Tuple

import matplotlib
matplotlib.use('Agg')  # 无头模式，不需要显示器

import matplotlib.pyplot as plt

# 配置中文字体支持
plt.rcParams['font.sans-serif'] = ['Noto Sans CJK SC', 'SimHei', 'DejaVu Sans']
plt.rcParams['axes.unicode_minus'] = False  # 解决负号显示问题
import numpy as np

from .config_manager import BirdConfig
from .models import SweepResult
from .world import attack_probability


class ChartGenerator:
    """实验图表生成器"""

    # 颜色配置（暗色主题）
    COLORS = {
        "background": "#1a1a2e",
        "grid": "#2d2d44",
        "text": "#e0e0e0",
        "point": "#00bfff",
        "front": "#ffd700",
        "line": "#00c853",
        "bound": "#ff1744",
    }

    def __init__(self, width: int = 8, height: int = 6):
        self.width = width
        self.height = height

    def _style(self, ax) -> None:
        """坐标轴暗色样式"""
        ax.set_facecolor(self.COLORS["background"])
        ax.tick_params(colors=self.COLORS["text"])
        for side in ("bottom", "top", "left", "right"):
            ax.spines[side].set_color(self.COLORS["grid"])
        ax.grid(True, color=self.COLORS["grid"], alpha=0.3, linestyle='--')

    def _legend(self, ax) -> None:
        legend = ax.legend(
            loc='best',
            facecolor=self.COLORS["background"],
            edgecolor=self.COLORS["grid"],
            fontsize=8
        )
        for text in legend.get_texts():
            text.set_color(self.COLORS["text"])

    def _render(self, fig) -> bytes:
        plt.tight_layout()
        buf = io.BytesIO()
        fig.savefig(
            buf,
            format='png',
            dpi=100,
            facecolor=self.COLORS["background"],
            edgecolor='none',
            bbox_inches='tight',
            metadata={"Software": None},  # 不写入版本信息，保证输出稳定
        )
        buf.seek(0)
        plt.close(fig)
        return buf.getvalue()

    def pareto_chart(self, result: SweepResult, title: str = "Pareto") -> Optional[bytes]:
        """
        网格搜索的效用散点图，Pareto 点高亮

        横轴为平均损害率，纵轴为平均存活无人机数
        """
        if not result.rows:
            return None

        try:
            fig, ax = plt.subplots(figsize=(self.width, self.height), facecolor=self.COLORS["background"])
            self._style(ax)

            damage = np.array([r.mean_damage for r in result.rows])
            survived = np.array([r.mean_survived for r in result.rows])
            on_front = np.array([r.pareto for r in result.rows])

            ax.scatter(damage[~on_front], survived[~on_front], color=self.COLORS["point"], s=18, label='points')
            order = np.argsort(damage[on_front])
            ax.plot(damage[on_front][order], survived[on_front][order], color=self.COLORS["front"],
                    marker='o', linewidth=1, label='Pareto')

            for row in result.rows:
                if row.pareto:
                    label = ",".join(f"{v:g}" for v in row.params.values())
                    ax.annotate(label, (row.mean_damage, row.mean_survived), color=self.COLORS["text"],
                                fontsize=7, xytext=(4, 4), textcoords='offset points')

            ax.set_xlabel('damage rate', color=self.COLORS["text"])
            ax.set_ylabel('survived drones', color=self.COLORS["text"])
            ax.set_title(title, color=self.COLORS["text"], fontsize=12, fontweight='bold')
            self._legend(ax)
            return self._render(fig)
        except Exception:
            plt.close('all')
            raise

    def scatter_chart(self, pairs: Sequence[Tuple[float, float]], title: str = "predicted vs true") -> Optional[bytes]:
        """预测值-真实值散点图（对角线为理想预测）"""
        if not pairs:
            return None

        try:
            fig, ax = plt.subplots(figsize=(self.width, self.height), facecolor=self.COLORS["background"])
            self._style(ax)

            pred = np.array([p for p, _ in pairs])
            true = np.array([t for _, t in pairs])
            ax.scatter(true, pred, color=self.COLORS["point"], s=6, alpha=0.6, label='samples')
            lo = float(min(pred.min(), true.min()))
            hi = float(max(pred.max(), true.max()))
            ax.plot([lo, hi], [lo, hi], color=self.COLORS["bound"], linewidth=1, label='y = x')

            ax.set_xlabel('true', color=self.COLORS["text"])
            ax.set_ylabel('predicted', color=self.COLORS["text"])
            ax.set_title(title, color=self.COLORS["text"], fontsize=12, fontweight='bold')
            self._legend(ax)
            return self._render(fig)
        except Exception:
            plt.close('all')
            raise

    def birds_chart(self, detected: Sequence[float], n_birds: int, params: Optional[BirdConfig] = None,
                    ticks_per_day: int = 1440) -> Optional[bytes]:
        """每分钟检测到的鸟数量（占比）与攻击概率曲线对比"""
        if len(detected) == 0:
            return None

        try:
            fig, ax = plt.subplots(figsize=(self.width, self.height), facecolor=self.COLORS["background"])
            self._style(ax)

            ticks = np.arange(len(detected))
            share = np.asarray(detected, dtype=float) / max(1, n_birds)
            prob = [attack_probability(t % ticks_per_day, params, ticks_per_day) for t in ticks]
            ax.plot(ticks, share, color=self.COLORS["point"], linewidth=0.8, label='detected birds / n_birds')
            ax.plot(ticks, prob, color=self.COLORS["line"], linewidth=1.2, label='attack probability')

            ax.set_xlabel('tick (minute)', color=self.COLORS["text"])
            ax.set_title('birds', color=self.COLORS["text"], fontsize=12, fontweight='bold')
            self._legend(ax)
            return self._render(fig)
        except Exception:
            plt.close('all')
            raise
