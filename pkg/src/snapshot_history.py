"""
快照历史
按实体记录每个 tick 的状态快照，供标签解析和有效性守卫使用
"""
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional

from .models import EstimatorError

Snapshot = Mapping[str, object]


@dataclass
class EntityTrack:
    """
    单个实体的快照序列
    snapshots[i] 对应 tick start + i；mode_counts 为各模式的累计计数（前缀和）
    """
    start: int = 0
    snapshots: List[Snapshot] = field(default_factory=list)
    mode_counts: Dict[str, List[int]] = field(default_factory=dict)

    @property
    def end(self) -> int:
        """最后一个已记录的 tick（无记录时为 start - 1）"""
        return self.start + len(self.snapshots) - 1


class SnapshotHistory:
    """
    多实体快照历史
    快照必须按 tick 连续追加
    """

    def __init__(self):
        # entity_id -> EntityTrack
        self._tracks: Dict[str, EntityTrack] = defaultdict(EntityTrack)

    def record(self, entity_id: str, t: int, snapshot: Snapshot) -> None:
        """
        追加实体在 tick t 的快照

        Args:
            entity_id: 实体标识
            t: 当前 tick，必须紧接上一条记录
            snapshot: 字段名 -> 值；含 "mode" 时维护模式计数
        """
        track = self._tracks[entity_id]
        if not track.snapshots:
            track.start = t
        elif t != track.end + 1:
            raise EstimatorError(f"实体 {entity_id} 的快照不连续: 期望 {track.end + 1}，实际 {t}")

        track.snapshots.append(snapshot)

        mode = snapshot.get("mode")
        seen = set(track.mode_counts)
        if mode is not None and mode not in seen:
            # 新出现的模式，以 0 补齐历史
            track.mode_counts[mode] = [0] * (len(track.snapshots) - 1)
        for m, counts in track.mode_counts.items():
            prev = counts[-1] if counts else 0
            counts.append(prev + (1 if m == mode else 0))

    # ==================== 查询 ====================

    def has(self, entity_id: str) -> bool:
        return entity_id in self._tracks and bool(self._tracks[entity_id].snapshots)

    def covers(self, entity_id: str, t0: int, t1: int) -> bool:
        """是否覆盖闭区间 [t0, t1]"""
        track = self._tracks.get(entity_id)
        if track is None or not track.snapshots:
            return False
        return track.start <= t0 and t1 <= track.end

    def _require(self, entity_id: str, t0: int, t1: int) -> EntityTrack:
        if not self.covers(entity_id, t0, t1):
            raise EstimatorError(f"缺少实体 {entity_id} 在 [{t0}, {t1}] 的历史")
        return self._tracks[entity_id]

    def get(self, entity_id: str, t: int) -> Snapshot:
        track = self._require(entity_id, t, t)
        return track.snapshots[t - track.start]

    def window(self, entity_id: str, t0: int, t1: int) -> List[Snapshot]:
        """闭区间 [t0, t1] 的快照列表"""
        if t1 < t0:
            return []
        track = self._require(entity_id, t0, t1)
        return track.snapshots[t0 - track.start:t1 - track.start + 1]

    def count_mode(self, entity_id: str, mode: str, t0: int, t1: int) -> int:
        """
        半开区间 (t0, t1] 内处于 mode 的快照数

        使用前缀和，O(1)
        """
        if t1 <= t0:
            return 0
        track = self._require(entity_id, t0, t1)
        counts = track.mode_counts.get(mode)
        if counts is None:
            return 0
        return counts[t1 - track.start] - counts[t0 - track.start]

    def first_mode_tick(self, entity_id: str, mode: str, t0: int, t1: int) -> Optional[int]:
        """半开区间 (t0, t1] 内第一次处于 mode 的 tick"""
        if self.count_mode(entity_id, mode, t0, t1) == 0:
            return None
        track = self._tracks[entity_id]
        for t in range(t0 + 1, t1 + 1):
            if track.snapshots[t - track.start].get("mode") == mode:
                return t
        return None

    def entities(self) -> List[str]:
        return list(self._tracks.keys())

    # ==================== 清理 ====================

    def cleanup_old_data(self, before: int) -> None:
        """
        丢弃 tick < before 的快照

        前缀和按绝对值保存，截断后差值仍然正确
        """
        for track in self._tracks.values():
            drop = min(max(0, before - track.start), len(track.snapshots))
            if drop == 0:
                continue
            del track.snapshots[:drop]
            for counts in track.mode_counts.values():
                del counts[:drop]
            track.start += drop
