"""Domain vocabulary shared by every pipeline stage.

Timestamps are integer Unix seconds. Local time is UTC shifted by a fixed
offset, so day boundaries never move with daylight saving.
"""
from __future__ import annotations

import csv
import datetime as dt
import enum
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

DAY_SECONDS = 86400
DAY_START_HOUR = 3
DAY_START_OFFSET = DAY_START_HOUR * 3600
EPOCH_DATE = dt.date(1970, 1, 1)


class MalformedInputError(ValueError):
    pass


class OutOfRangeError(ValueError):
    pass


class RegistryError(KeyError):
    pass


class LocationCategory(str, enum.Enum):
    HOSPITAL = "Hospital"
    MALL = "Mall"
    INSTITUTE = "Institute"
    RESIDENTIAL = "Residential"
    # Residential stays are split into day/night features by clock time.
    RESIDENTIAL_DAY = "ResidentialDay"
    RESIDENTIAL_NIGHT = "ResidentialNight"


class Area(str, enum.Enum):
    FACILITY = "Facility"
    RESIDENTIAL = "Residential"


def validate_device_id(value: str) -> str:
    if not isinstance(value, str) or not value:
        raise MalformedInputError(f"device id must be a non-empty string, got {value!r}")
    return value


def validate_sensor_id(value: str) -> str:
    if not isinstance(value, str) or len(value) < 2 or not value[0].isalpha():
        raise MalformedInputError(f"bad sensor id {value!r}")
    return value


def building_of(sensor: str) -> str:
    """Building id of a sensor: the first character of its name."""
    if not sensor:
        raise MalformedInputError("empty sensor id")
    return sensor[0]


@dataclass(frozen=True, slots=True)
class DayWindow:
    index: int
    start: int
    end: int

    @property
    def date(self) -> dt.date:
        """Local calendar date on which the window opens (at 03:00)."""
        return EPOCH_DATE + dt.timedelta(days=self.index)


_window_cache: dict[tuple[int, int], DayWindow] = {}


def day_window(index: int, tz_offset: int = 0) -> DayWindow:
    key = (index, tz_offset)
    w = _window_cache.get(key)
    if w is None:
        start = index * DAY_SECONDS + DAY_START_OFFSET - tz_offset
        w = DayWindow(index, start, start + DAY_SECONDS)
        _window_cache[key] = w
    return w


def day_index_of(t: int, tz_offset: int = 0) -> int:
    return (t + tz_offset - DAY_START_OFFSET) // DAY_SECONDS


def day_window_of(t: int, tz_offset: int = 0, span: Optional[tuple[int, int]] = None) -> DayWindow:
    """Return the 03:00-03:00 window containing ``t``.

    Windows are half-open, so 03:00:00 sharp opens the new day. ``span`` is an
    optional inclusive ``(first, last)`` timestamp range of the dataset.
    """
    if span is not None and not span[0] <= t <= span[1]:
        raise OutOfRangeError(f"timestamp {t} outside dataset span {span}")
    return day_window(day_index_of(t, tz_offset), tz_offset)


def day_index_of_date(date: dt.date) -> int:
    return (date - EPOCH_DATE).days


@dataclass(frozen=True, slots=True)
class TrajectoryEntry:
    device: str
    node: str
    next: Optional[str]
    start_time: int
    end_time: int
    stay_time: int = 0
    take_time: int = 0


@dataclass(frozen=True, slots=True)
class DayTrajectory:
    device: str
    day: DayWindow
    entries: tuple[TrajectoryEntry, ...]

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def span(self) -> int:
        return self.entries[-1].end_time - self.entries[0].start_time

    def nodes(self) -> list[str]:
        return [e.node for e in self.entries]


def link_entries(device: str, items: Sequence[tuple[str, int, int]]) -> tuple[TrajectoryEntry, ...]:
    """Build chained entries from ``(node, start, end)`` triples already in order.

    Stay and take times are left at zero; see ``preprocess.compute_stay_take``.
    """
    out = []
    n = len(items)
    for i, (node, start, end) in enumerate(items):
        nxt = items[i + 1][0] if i + 1 < n else None
        out.append(TrajectoryEntry(device, node, nxt, start, end))
    return tuple(out)


def check_chain(traj: DayTrajectory) -> None:
    """Raise AssertionError if the trajectory breaks its structural invariants."""
    es = traj.entries
    assert es, "empty trajectory"
    for i, e in enumerate(es):
        assert e.device == traj.device
        assert e.end_time >= e.start_time
        assert traj.day.start <= e.start_time and e.end_time < traj.day.end
        if i + 1 < len(es):
            assert e.next == es[i + 1].node, f"broken chain at {i}"
            assert es[i + 1].start_time >= e.start_time
        else:
            assert e.next is None and e.take_time == 0


@dataclass(frozen=True)
class Node:
    building: str
    category: LocationCategory
    area: Area


@dataclass(frozen=True)
class DeploymentRegistry:
    nodes: tuple[Node, ...]
    _by_id: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        ids = [n.building for n in self.nodes]
        if len(set(ids)) != len(ids):
            raise RegistryError("duplicate building ids in registry")
        for n in self.nodes:
            if len(n.building) != 1:
                raise RegistryError(f"building id must be one character: {n.building!r}")
            if n.category in (LocationCategory.RESIDENTIAL_DAY, LocationCategory.RESIDENTIAL_NIGHT):
                raise RegistryError("registry categories are Hospital, Mall, Institute or Residential")
        self._by_id.update({n.building: n for n in self.nodes})

    @property
    def buildings(self) -> list[str]:
        return [n.building for n in self.nodes]

    def __contains__(self, building: str) -> bool:
        return building in self._by_id

    def __len__(self) -> int:
        return len(self.nodes)

    def category(self, building: str) -> LocationCategory:
        try:
            return self._by_id[building].category
        except KeyError:
            raise RegistryError(f"unknown building {building!r}") from None

    def area(self, building: str) -> Area:
        try:
            return self._by_id[building].area
        except KeyError:
            raise RegistryError(f"unknown building {building!r}") from None

    def in_category(self, category: LocationCategory) -> list[str]:
        return [n.building for n in self.nodes if n.category == category]

    def in_area(self, area: Area) -> list[str]:
        return [n.building for n in self.nodes if n.area == area]

    def index(self, building: str) -> int:
        for i, n in enumerate(self.nodes):
            if n.building == building:
                return i
        raise RegistryError(f"unknown building {building!r}")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["building_id", "category", "area"])
        for n in self.nodes:
            w.writerow([n.building, n.category.value, n.area.value])
        return buf.getvalue()

    def save(self, path: Path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def from_rows(cls, rows: Iterable[Sequence[str]]) -> "DeploymentRegistry":
        nodes = []
        for row in rows:
            if len(row) != 3:
                raise RegistryError(f"registry row needs 3 fields: {row!r}")
            b, cat, area = (x.strip() for x in row)
            try:
                nodes.append(Node(b, LocationCategory(cat), Area(area)))
            except ValueError as exc:
                raise RegistryError(str(exc)) from None
        return cls(tuple(nodes))

    @classmethod
    def load(cls, path: Path) -> "DeploymentRegistry":
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r]
        if not rows or [c.strip() for c in rows[0]] != ["building_id", "category", "area"]:
            raise RegistryError(f"{path}: missing header 'building_id,category,area'")
        return cls.from_rows(rows[1:])


# Malls 1-4, institute and hospital in the facility area; 14 residential blocks a-n.
MALLS = ("W", "X", "Y", "Z")
HOSPITAL = "H"
INSTITUTE = "I"
RESIDENTIAL_BLOCKS = tuple("abcdefghijklmn")


def default_registry() -> DeploymentRegistry:
    nodes = [Node(b, LocationCategory.MALL, Area.FACILITY) for b in MALLS]
    nodes.append(Node(INSTITUTE, LocationCategory.INSTITUTE, Area.FACILITY))
    nodes.append(Node(HOSPITAL, LocationCategory.HOSPITAL, Area.FACILITY))
    nodes += [Node(b, LocationCategory.RESIDENTIAL, Area.RESIDENTIAL) for b in RESIDENTIAL_BLOCKS]
    return DeploymentRegistry(tuple(nodes))
