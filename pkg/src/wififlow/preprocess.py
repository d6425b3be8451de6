"""Stay/take times, building-level merging and trajectory filters."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

from .model import DayTrajectory, TrajectoryEntry, building_of

MERGE_THRESHOLD = 21600  # 6 h
MIN_SPAN = 300  # 5 min
MAX_STAY = 57600  # 16 h


def compute_stay_take(traj: DayTrajectory) -> DayTrajectory:
    """Fill in stay and take times for every entry.

    Detections that overlap in time (neighbouring sensors with overlapping
    range) are resolved by cutting the earlier entry off where the later one
    starts, which leaves a take time of zero.
    """
    es = traj.entries
    n = len(es)
    out = []
    for i, e in enumerate(es):
        end = e.end_time
        take = 0
        if i + 1 < n:
            nxt_start = es[i + 1].start_time
            if nxt_start < end:
                end = max(nxt_start, e.start_time)
            take = nxt_start - end
        out.append(
            TrajectoryEntry(
                e.device,
                e.node,
                es[i + 1].node if i + 1 < n else None,
                e.start_time,
                end,
                end - e.start_time,
                take,
            )
        )
    return DayTrajectory(traj.device, traj.day, tuple(out))


def merge_to_building_level(traj: DayTrajectory, threshold: int = MERGE_THRESHOLD) -> DayTrajectory:
    """Rename sensors to buildings and collapse same-building runs.

    Consecutive entries at one building are fused while the take time
    between them is below ``threshold``. Runs of any length collapse, so the
    result is already a fixed point of the pairwise merge.
    """
    merged: list[list] = []
    for e in traj.entries:
        b = building_of(e.node)
        if merged and merged[-1][0] == b and merged[-1][4] < threshold:
            cur = merged[-1]
            cur[2] = e.end_time
            cur[3] = cur[3] + cur[4] + e.stay_time
            cur[4] = e.take_time
        else:
            merged.append([b, e.start_time, e.end_time, e.stay_time, e.take_time])
    n = len(merged)
    entries = tuple(
        TrajectoryEntry(traj.device, b, merged[i + 1][0] if i + 1 < n else None, s, en, st, tk)
        for i, (b, s, en, st, tk) in enumerate(merged)
    )
    return DayTrajectory(traj.device, traj.day, entries)


@dataclass
class FilterReport:
    total: int = 0
    too_short: int = 0
    anomalous: int = 0

    @property
    def kept(self) -> int:
        return self.total - self.too_short - self.anomalous

    def as_dict(self) -> dict:
        return {"total": self.total, "too_short": self.too_short,
                "anomalous": self.anomalous, "kept": self.kept}


def filter_trajectories(
    trajs: Iterable[DayTrajectory], min_span: int = MIN_SPAN, max_stay: int = MAX_STAY
) -> tuple[list[DayTrajectory], FilterReport]:
    report = FilterReport()
    kept = []
    for t in trajs:
        report.total += 1
        if t.span < min_span:
            report.too_short += 1
        elif any(e.stay_time > max_stay for e in t.entries):
            report.anomalous += 1
        else:
            kept.append(t)
    return kept, report


def preprocess(
    trajs: Sequence[DayTrajectory],
    merge_threshold: int = MERGE_THRESHOLD,
    min_span: int = MIN_SPAN,
    max_stay: int = MAX_STAY,
) -> tuple[list[DayTrajectory], FilterReport]:
    """Sensor-level trajectories in, filtered building-level trajectories out."""
    merged = (merge_to_building_level(compute_stay_take(t), merge_threshold) for t in trajs)
    return filter_trajectories(merged, min_span, max_stay)
