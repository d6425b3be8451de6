"""On-disk interchange formats shared by the stages."""
from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path
from typing import Iterable, Iterator, Sequence

from .model import DAY_SECONDS, DayTrajectory, DayWindow, TrajectoryEntry


def trajectory_to_dict(t: DayTrajectory) -> dict:
    return {
        "device": t.device,
        "day": t.day.index,
        "date": t.day.date.isoformat(),
        "day_start": t.day.start,
        "entries": [
            {"node": e.node, "next": e.next, "start": e.start_time, "end": e.end_time,
             "stay": e.stay_time, "take": e.take_time}
            for e in t.entries
        ],
    }


def trajectory_from_dict(d: dict) -> DayTrajectory:
    dev = d["device"]
    day = DayWindow(d["day"], d["day_start"], d["day_start"] + DAY_SECONDS)
    entries = tuple(
        TrajectoryEntry(dev, e["node"], e["next"], e["start"], e["end"], e["stay"], e["take"])
        for e in d["entries"]
    )
    return DayTrajectory(dev, day, entries)


def write_trajectories(path: Path, trajs: Iterable[DayTrajectory]) -> int:
    n = 0
    with open(path, "w") as fh:
        for t in trajs:
            fh.write(json.dumps(trajectory_to_dict(t), separators=(",", ":")))
            fh.write("\n")
            n += 1
    return n


def iter_trajectories(path: Path) -> Iterator[DayTrajectory]:
    with open(path) as fh:
        for line in fh:
            if line.strip():
                yield trajectory_from_dict(json.loads(line))


def read_trajectories(path: Path) -> list[DayTrajectory]:
    return list(iter_trajectories(path))


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(x) for x in r])


def fmt(x) -> str:
    """Stable text form for CSV cells; floats get a fixed precision."""
    if isinstance(x, float):
        return f"{x:.6f}"
    if hasattr(x, "item"):  # numpy scalar
        return fmt(x.item())
    return str(x)


def read_csv_rows(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def file_sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
