"""Flat numpy view of many trajectories, for the vectorised feature code."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .model import DayTrajectory


@dataclass
class EntryTable:
    traj: np.ndarray  # index of the owning trajectory
    device: np.ndarray  # integer code into ``devices``
    node: np.ndarray  # building id strings (object array)
    day: np.ndarray
    day_start: np.ndarray
    start: np.ndarray
    end: np.ndarray
    devices: np.ndarray  # sorted unique device ids

    @classmethod
    def from_trajectories(cls, trajs: Sequence[DayTrajectory]) -> "EntryTable":
        n = sum(len(t.entries) for t in trajs)
        traj = np.empty(n, dtype=np.int64)
        dev = np.empty(n, dtype=object)
        node = np.empty(n, dtype=object)
        day = np.empty(n, dtype=np.int64)
        dstart = np.empty(n, dtype=np.int64)
        start = np.empty(n, dtype=np.int64)
        end = np.empty(n, dtype=np.int64)
        i = 0
        for ti, t in enumerate(trajs):
            for e in t.entries:
                traj[i] = ti
                dev[i] = t.device
                node[i] = e.node
                day[i] = t.day.index
                dstart[i] = t.day.start
                start[i] = e.start_time
                end[i] = e.end_time
                i += 1
        if n:
            devices, codes = np.unique(dev, return_inverse=True)
        else:
            devices, codes = np.empty(0, dtype=object), np.empty(0, dtype=np.int64)
        return cls(traj, codes.astype(np.int64), node, day, dstart, start, end, devices)

    def __len__(self) -> int:
        return self.traj.size

    def select(self, mask: np.ndarray) -> "EntryTable":
        return EntryTable(self.traj[mask], self.device[mask], self.node[mask], self.day[mask],
                          self.day_start[mask], self.start[mask], self.end[mask], self.devices)


def hour_presence(table: EntryTable) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Expand entries into (day, hour bucket, device) presence triples.

    Bucket 0 is 03:00-04:00 of the day window. An entry touches every bucket
    it overlaps for a positive duration; a zero-length entry touches the
    bucket containing it. Duplicate triples are removed.
    """
    if len(table) == 0:
        z = np.empty(0, dtype=np.int64)
        return z, z, z
    lo = (table.start - table.day_start) // 3600
    hi = (np.maximum(table.end - 1, table.start) - table.day_start) // 3600
    lo = np.clip(lo, 0, 23)
    hi = np.clip(hi, 0, 23)
    reps = hi - lo + 1
    idx = np.repeat(np.arange(len(table)), reps)
    offs = np.arange(idx.size) - np.repeat(np.cumsum(reps) - reps, reps)
    hours = lo[idx] + offs
    days = table.day[idx]
    devs = table.device[idx]
    ndev = max(len(table.devices), 1)
    d0 = days.min()
    key = ((days - d0) * 24 + hours) * ndev + devs
    key = np.unique(key)
    devs = key % ndev
    rest = key // ndev
    return rest // 24 + d0, rest % 24, devs


def hourly_counts(table: EntryTable, days: Sequence[int]) -> np.ndarray:
    """Unique devices per (day, hour bucket); rows follow sorted ``days``."""
    days = np.asarray(sorted(days), dtype=np.int64)
    counts = np.zeros((days.size, 24), dtype=np.int64)
    pd_, ph, _ = hour_presence(table)
    if days.size and pd_.size:
        pos = np.minimum(np.searchsorted(days, pd_), days.size - 1)
        ok = days[pos] == pd_
        np.add.at(counts, (pos[ok], ph[ok]), 1)
    return counts
