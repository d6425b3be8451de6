"""Clustering day trajectories by where the device spent its time."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .bytime import DAY_GROUPS
from .cluster import KMeansResult, UndefinedMetricError, kmeans, silhouette
from .model import DayTrajectory, DayWindow, DeploymentRegistry, LocationCategory
from .tables import EntryTable, hourly_counts

FEATURES = (
    LocationCategory.HOSPITAL,
    LocationCategory.MALL,
    LocationCategory.INSTITUTE,
    LocationCategory.RESIDENTIAL_DAY,
    LocationCategory.RESIDENTIAL_NIGHT,
)
PERSON_K = 8
# Residential daytime is 07:00-19:00, i.e. 4 h to 16 h after the 03:00 day start.
RES_DAY_FROM = 4 * 3600
RES_DAY_TO = 16 * 3600
SILHOUETTE_SAMPLE = 2000


@dataclass
class PersonFeature:
    device: str
    day: DayWindow
    stay: np.ndarray  # seconds, in FEATURES order


def person_features(traj: DayTrajectory, registry: DeploymentRegistry) -> PersonFeature:
    stay = np.zeros(5, dtype=np.int64)
    d0 = traj.day.start + RES_DAY_FROM
    d1 = traj.day.start + RES_DAY_TO
    for e in traj.entries:
        cat = registry.category(e.node)
        dur = e.end_time - e.start_time
        if cat == LocationCategory.RESIDENTIAL:
            day_part = max(0, min(e.end_time, d1) - max(e.start_time, d0))
            stay[3] += day_part
            stay[4] += dur - day_part
        else:
            stay[FEATURES.index(cat)] += dur
    return PersonFeature(traj.device, traj.day, stay)


@dataclass
class PersonClustering:
    labels: np.ndarray  # 1-based CP number per feature row
    sizes: np.ndarray  # size of CP1..CPk
    centroids: np.ndarray  # CP order
    silhouette: Optional[float]
    result: KMeansResult

    @property
    def k(self) -> int:
        return len(self.sizes)


def canonical_cp_order(centroids: np.ndarray) -> list[int]:
    """Cluster indices sorted by descending mean Mall, Hospital, Institute,
    then Residential stay."""
    keys = [(-c[1], -c[0], -c[2], -(c[3] + c[4]), i) for i, c in enumerate(centroids)]
    return [k[-1] for k in sorted(keys)]


def cluster_persons(
    features: Sequence[PersonFeature],
    k: int = PERSON_K,
    seed: int = 0,
    restarts: int = 20,
    threads: int = 1,
    silhouette_sample: int = SILHOUETTE_SAMPLE,
    init: str = "k-means++",
) -> PersonClustering:
    """k-means on raw stay seconds, relabelled CP1..CPk canonically.

    The silhouette is computed on a seeded subsample of at most
    ``silhouette_sample`` points.
    """
    X = np.array([f.stay for f in features], dtype=float)
    res = kmeans(X, k, seed=seed, restarts=restarts, threads=threads, init=init)
    order = canonical_cp_order(res.centroids)
    remap = np.empty(k, dtype=np.int64)
    for new, old in enumerate(order):
        remap[old] = new + 1
    labels = remap[res.labels]
    sizes = np.bincount(labels, minlength=k + 1)[1:]
    sil = None
    if k >= 2:
        idx = np.arange(len(X))
        if len(X) > silhouette_sample:
            rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
            idx = np.sort(rng.choice(len(X), silhouette_sample, replace=False))
        try:
            sil = silhouette(X[idx], labels[idx])
        except UndefinedMetricError:
            sil = None
    return PersonClustering(labels, sizes, res.centroids[order], sil, res)


def cluster_transition_graph(trajs: Sequence[DayTrajectory]) -> list[tuple[str, str, int]]:
    """Undirected edge weights from consecutive-entry transitions.

    Returns ``(a, b, weight)`` with ``a < b``, heaviest first.
    """
    w: Counter = Counter()
    for t in trajs:
        es = t.entries
        for x, y in zip(es, es[1:]):
            if x.node != y.node:
                w[tuple(sorted((x.node, y.node)))] += 1
    return sorted(((a, b, n) for (a, b), n in w.items()), key=lambda r: (-r[2], r[0], r[1]))


def unique_location_histogram(trajs: Sequence[DayTrajectory], max_nodes: int = 20) -> np.ndarray:
    """Probability of visiting exactly u distinct buildings, u = 1..max_nodes."""
    hist = np.zeros(max_nodes)
    for t in trajs:
        u = len({e.node for e in t.entries})
        hist[min(u, max_nodes) - 1] += 1
    total = hist.sum()
    return hist / total if total else hist


def start_end_distributions(trajs: Sequence[DayTrajectory], tz_offset: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Clock-hour (0-23) distributions of trajectory start and end times."""
    start = np.zeros(24)
    end = np.zeros(24)
    for t in trajs:
        start[((t.entries[0].start_time + tz_offset) // 3600) % 24] += 1
        end[((t.entries[-1].end_time + tz_offset) // 3600) % 24] += 1
    n = len(trajs)
    if n:
        start /= n
        end /= n
    return start, end


@dataclass
class DayTypeCurve:
    group: str
    days: int
    avg: np.ndarray
    min: np.ndarray
    max: np.ndarray


def daytype_count_curves(
    trajs: Sequence[DayTrajectory],
    buildings: Sequence[str],
    labels: Mapping[int, str],
    days: Optional[Sequence[int]] = None,
) -> tuple[dict[str, DayTypeCurve], list[str]]:
    """Per day-type group, pointwise mean/min/max of hourly device counts.

    Counts are unique devices per hour bucket (0 = 03:00) over entries at any
    of ``buildings``. ``days`` lists the days to average over (default: days
    present in ``trajs``). Returns the curves and the groups left out
    because they had no days.
    """
    table = EntryTable.from_trajectories(trajs)
    if days is None:
        days = sorted(set(table.day.tolist()))
    days = sorted(days)
    counts = hourly_counts(table.select(np.isin(table.node, list(buildings))), days).astype(float)
    curves = {}
    missing = []
    for g, members in DAY_GROUPS.items():
        rows = [i for i, d in enumerate(days) if labels.get(d) in members]
        if not rows:
            missing.append(g)
            continue
        block = counts[rows]
        curves[g] = DayTypeCurve(g, len(rows), block.mean(axis=0), block.min(axis=0), block.max(axis=0))
    return curves, missing
