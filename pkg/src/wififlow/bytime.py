"""Clustering calendar days by each building's hourly device counts."""
from __future__ import annotations

import csv
import datetime as dt
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .cluster import KMeansResult, kmeans, minmax_normalize
from .model import DayWindow, RegistryError, day_index_of_date, day_window
from .tables import EntryTable, hourly_counts

DAY_LABELS = ("MonThu", "Fri", "PHEve", "Sat", "Sun", "PH")
# Day-type groups used when comparing per-cluster curves.
DAY_GROUPS = {
    "MonThu": ("MonThu",),
    "FriPHEve": ("Fri", "PHEve"),
    "Sat": ("Sat",),
    "SunPH": ("Sun", "PH"),
}
TIME_K = 4


@dataclass
class DayFeature:
    building: str
    day: DayWindow
    counts: np.ndarray
    normalized: np.ndarray


@dataclass
class CalendarAssignment:
    building: str
    days: list  # DayWindow per row
    clusters: np.ndarray  # 1-based, 1 = largest cluster
    result: Optional[KMeansResult] = None

    def by_day(self) -> dict[int, int]:
        return {d.index: int(c) for d, c in zip(self.days, self.clusters)}


def load_calendar(path: Path) -> dict[int, str]:
    """Read ``date,day_label`` rows into {day index: label}."""
    out = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            label = row["day_label"].strip()
            if label not in DAY_LABELS:
                raise ValueError(f"{path}: unknown day label {label!r}")
            out[day_index_of_date(dt.date.fromisoformat(row["date"].strip()))] = label
    return out


def group_of(label: str) -> str:
    for g, members in DAY_GROUPS.items():
        if label in members:
            return g
    raise KeyError(label)


def analysis_days(table: EntryTable) -> list[int]:
    return sorted(set(table.day.tolist()))


def hourly_count_features(
    trajs_or_table,
    building: str,
    days: Optional[Sequence[int]] = None,
    tz_offset: int = 0,
    registry=None,
) -> list[DayFeature]:
    """24 hourly unique-device counts at ``building`` for each day.

    ``days`` defaults to every day present in the data; days without any
    visitor at the building get all-zero counts.
    """
    if registry is not None and building not in registry:
        raise RegistryError(f"unknown building {building!r}")
    table = trajs_or_table if isinstance(trajs_or_table, EntryTable) else EntryTable.from_trajectories(trajs_or_table)
    if days is None:
        days = analysis_days(table)
    days = sorted(days)
    counts = hourly_counts(table.select(table.node == building), days)
    return [DayFeature(building, day_window(d, tz_offset), counts[i], minmax_normalize(counts[i]))
            for i, d in enumerate(days)]


def canonical_labels(labels: np.ndarray, k: int) -> np.ndarray:
    """Renumber 0-based labels 1..k by descending size, ties by first member."""
    sizes = np.bincount(labels, minlength=k)
    first = np.full(k, len(labels))
    for i, l in enumerate(labels):
        first[l] = min(first[l], i)
    order = sorted(range(k), key=lambda c: (-sizes[c], first[c]))
    remap = np.empty(k, dtype=np.int64)
    for new, old in enumerate(order):
        remap[old] = new + 1
    return remap[labels]


def cluster_days(features: Sequence[DayFeature], k: int = TIME_K, seed: int = 0,
                 restarts: int = 20, threads: int = 1, init: str = "k-means++") -> CalendarAssignment:
    X = np.array([f.normalized for f in features])
    res = kmeans(X, k, seed=seed, restarts=restarts, threads=threads, init=init)
    return CalendarAssignment(features[0].building, [f.day for f in features],
                              canonical_labels(res.labels, k), res)


def day_type_confusion(assignment: CalendarAssignment, labels: Mapping[int, str],
                       k: int = TIME_K) -> tuple[np.ndarray, list[str]]:
    """Percent of days of each label (rows, DAY_LABELS order) per cluster.

    Returns the 6 x k table and the labels whose row is empty.
    """
    counts = np.zeros((len(DAY_LABELS), k))
    for day, c in zip(assignment.days, assignment.clusters):
        lab = labels.get(day.index)
        if lab is None:
            raise KeyError(f"no day label for {day.date}")
        counts[DAY_LABELS.index(lab), c - 1] += 1
    tot = counts.sum(axis=1, keepdims=True)
    table = np.divide(100.0 * counts, tot, out=np.zeros_like(counts), where=tot > 0)
    empty = [DAY_LABELS[i] for i in np.flatnonzero(tot[:, 0] == 0)]
    return table, empty


def cluster_daily_curves(features: Sequence[DayFeature], assignment: CalendarAssignment) -> dict[int, list]:
    """{cluster: [(DayWindow, normalized curve), ...]} in day order."""
    by_day = assignment.by_day()
    out: dict[int, list] = {c: [] for c in sorted(set(assignment.clusters.tolist()))}
    for f in features:
        out[by_day[f.day.index]].append((f.day, f.normalized))
    return out
