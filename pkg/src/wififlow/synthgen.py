"""Seeded synthetic probe logs with planted archetypes and day types.

Each device gets one archetype. On every day it is active it follows one of
the archetype's itinerary variants; each stay is emitted as a burst of
probes at one sensor of the building, spaced at most 120 s apart so that
coalescing recovers the stay exactly.
"""
from __future__ import annotations

import datetime as dt
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import polars as pl
import yaml

from .bylocation import WINDOWS
from .model import (
    DAY_SECONDS,
    DAY_START_HOUR,
    DeploymentRegistry,
    LocationCategory,
    default_registry,
    day_index_of_date,
    day_window,
)

GEN_DAY_TYPES = ("MonThu", "Fri", "Sat", "Sun")
PROBE_SPACING = 100  # nominal seconds between probes within a stay
PROBE_JITTER = 10
TRUNCATE_SIGMA = 2.5
MIN_STAY_H = 5 / 60


class ScenarioError(ValueError):
    pass


@dataclass
class Slot:
    place: str  # building id, category name, "home" or "neighbor"
    start: float  # clock hour; values past 24 mean after midnight
    start_jitter: float = 0.0
    stay: float = 1.0  # hours
    stay_jitter: float = 0.0


@dataclass
class Variant:
    weight: float
    slots: list


@dataclass
class DayModifier:
    active: float = 1.0
    shift: float = 0.0
    stay_scale: float = 1.0
    jitter_scale: float = 1.0
    weights: Optional[list] = None  # overrides variant weights


@dataclass
class ArchetypeSpec:
    name: str
    share: float
    variants: list
    modifiers: dict = field(default_factory=dict)

    def modifier(self, day_label: str) -> DayModifier:
        # holidays behave like Sundays, their eves like Fridays
        key = {"PH": "Sun", "PHEve": "Fri"}.get(day_label, day_label)
        return self.modifiers.get(key, DayModifier())


def validate_specs(specs: Sequence[ArchetypeSpec]) -> None:
    if not specs:
        raise ScenarioError("no archetypes")
    total = sum(s.share for s in specs)
    if abs(total - 1.0) > 1e-9 or any(not 0 <= s.share <= 1 for s in specs):
        raise ScenarioError(f"archetype shares must lie in [0, 1] and sum to 1 (got {total})")
    for s in specs:
        if not s.variants:
            raise ScenarioError(f"{s.name}: no itinerary variants")
        for v in s.variants:
            prev_end = -math.inf
            for slot in v.slots:
                if slot.start < DAY_START_HOUR or slot.start >= DAY_START_HOUR + 24:
                    raise ScenarioError(f"{s.name}: slot start {slot.start} outside the day window")
                if slot.stay <= 0:
                    raise ScenarioError(f"{s.name}: non-positive stay")
                if slot.start < prev_end - 1e-9:
                    raise ScenarioError(f"{s.name}: overlapping stays in itinerary")
                prev_end = slot.start + slot.stay
        for key, m in s.modifiers.items():
            if key not in GEN_DAY_TYPES:
                raise ScenarioError(f"{s.name}: unknown day type {key!r}")
            if m.weights is not None and len(m.weights) != len(s.variants):
                raise ScenarioError(f"{s.name}: {key} weights do not match variants")


def _slots(*rows) -> list:
    return [Slot(*r) for r in rows]


def default_scenario() -> list[ArchetypeSpec]:
    """Eight archetypes mirroring the by-person clusters, with weekday,
    Friday, Saturday and Sunday behaviour that shapes the by-time profiles."""
    M = DayModifier
    return [
        ArchetypeSpec(
            "mall_brief", 0.14,
            [Variant(0.4, _slots(("Mall", 8.0, 0.3, 0.45, 0.12))),
             Variant(0.35, _slots(("Mall", 12.0, 0.3, 0.45, 0.12))),
             Variant(0.25, _slots(("Mall", 18.0, 0.3, 0.45, 0.12)))],
            {"MonThu": M(0.6, weights=[0.45, 0.35, 0.2]),
             "Fri": M(0.6, weights=[0.15, 0.3, 0.55]),
             "Sat": M(0.5, 2.0, jitter_scale=3.0, weights=[0.2, 0.4, 0.4]),
             "Sun": M(0.5, 1.5, jitter_scale=3.0, weights=[0.3, 0.55, 0.15])},
        ),
        ArchetypeSpec(
            "mall_shopper", 0.12,
            [Variant(1.0, _slots(("Mall", 18.3, 0.4, 3.0, 0.35)))],
            {"MonThu": M(0.25), "Fri": M(1.0), "Sat": M(0.6, 0.6), "Sun": M(0.4, -4.0, jitter_scale=2.0)},
        ),
        ArchetypeSpec(
            "mall_shift", 0.12,
            [Variant(0.5, _slots(("Mall", 8.5, 0.4, 6.0, 0.5))),
             Variant(0.5, _slots(("Mall", 12.5, 0.4, 6.0, 0.5)))],
            {"MonThu": M(0.6), "Fri": M(0.6),
             "Sat": M(0.7, -1.0, jitter_scale=2.0, weights=[0.0, 1.0]),
             "Sun": M(0.7, -1.5, jitter_scale=2.0, weights=[0.0, 1.0])},
        ),
        ArchetypeSpec(
            "mall_worker", 0.11,
            [Variant(1.0, _slots(("Mall", 8.2, 0.25, 10.0, 0.7)))],
            {"MonThu": M(0.9), "Fri": M(0.9, 0.5), "Sat": M(0.4, 2.0), "Sun": M(0.2, 2.0)},
        ),
        ArchetypeSpec(
            "hospital_visitor", 0.12,
            [Variant(1.0, _slots(("Y", 11.6, 0.6, 0.25, 0.05), ("H", 12.0, 0.6, 4.5, 0.5),
                                 ("Mall", 16.9, 0.6, 0.5, 0.15)))],
            {"MonThu": M(0.5), "Fri": M(0.5, 2.0), "Sat": M(0.6, -2.0), "Sun": M(0.6, 1.0)},
        ),
        ArchetypeSpec(
            "hospital_worker", 0.12,
            [Variant(1.0, _slots(("Y", 8.3, 0.15, 0.2, 0.05), ("H", 8.65, 0.15, 9.2, 0.6),
                                 ("Z", 18.1, 0.2, 0.25, 0.05)))],
            {"MonThu": M(0.9), "Fri": M(0.9, -1.0), "Sat": M(0.3), "Sun": M(0.3, -1.0)},
        ),
        ArchetypeSpec(
            "institute_member", 0.11,
            [Variant(1.0, _slots(("Y", 8.25, 0.15, 0.15, 0.04), ("H", 8.55, 0.15, 0.2, 0.05),
                                 ("I", 8.9, 0.2, 9.0, 0.6)))],
            {"MonThu": M(0.85), "Fri": M(0.85, -1.0), "Sat": M(0.3, 2.0), "Sun": M(0.12, 3.0)},
        ),
        ArchetypeSpec(
            "resident", 0.16,
            [Variant(0.6, _slots(("home", 3.0, 0.0, 4.4, 0.25), ("home", 18.6, 0.25, 9.0, 0.0))),
             Variant(0.4, _slots(("home", 3.0, 0.0, 4.4, 0.25), ("neighbor", 19.2, 0.25, 2.8, 0.25),
                                 ("home", 22.3, 0.25, 5.0, 0.0)))],
            {"MonThu": M(0.95), "Fri": M(0.95), "Sat": M(0.95, 0.3), "Sun": M(0.95, 0.5)},
        ),
    ]


def flow_reversal_scenario() -> list[ArchetypeSpec]:
    """Commuters between a home block and a facility building: out in the
    morning, back in the evening."""
    return [
        ArchetypeSpec(
            "commuter", 1.0,
            [Variant(1.0, _slots(("home", 3.0, 0.0, 4.3, 0.3), ("Work", 7.8, 0.2, 10.8, 0.3),
                                 ("home", 19.0, 0.3, 8.0, 0.0)))],
        )
    ]


# ---- scenario files -------------------------------------------------------

def specs_to_dict(specs: Sequence[ArchetypeSpec]) -> dict:
    out = []
    for s in specs:
        out.append({
            "name": s.name,
            "share": s.share,
            "variants": [{"weight": v.weight, "slots": [vars(sl) for sl in v.slots]} for v in s.variants],
            "modifiers": {k: {kk: vv for kk, vv in vars(m).items() if vv is not None}
                          for k, m in s.modifiers.items()},
        })
    return {"archetypes": out}


def specs_from_dict(d: dict) -> list[ArchetypeSpec]:
    try:
        specs = []
        for a in d["archetypes"]:
            variants = [Variant(float(v["weight"]), [Slot(**sl) for sl in v["slots"]]) for v in a["variants"]]
            mods = {k: DayModifier(**m) for k, m in (a.get("modifiers") or {}).items()}
            specs.append(ArchetypeSpec(a["name"], float(a["share"]), variants, mods))
    except (KeyError, TypeError) as exc:
        raise ScenarioError(f"bad scenario: {exc}") from None
    validate_specs(specs)
    return specs


def load_scenario(path: Path) -> list[ArchetypeSpec]:
    with open(path) as fh:
        return specs_from_dict(yaml.safe_load(fh))


def save_scenario(path: Path, specs: Sequence[ArchetypeSpec]) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(specs_to_dict(specs), fh, sort_keys=False)


# ---- calendar ---------------------------------------------------------------

def make_calendar(start: dt.date, n_days: int, ph_days: Sequence[int] = ()) -> list[tuple[dt.date, str]]:
    """Day labels for ``n_days`` from ``start``; ``ph_days`` are offsets of
    public holidays. A weekday before a holiday becomes a holiday eve."""
    ph = set(ph_days)
    out = []
    for i in range(n_days):
        d = start + dt.timedelta(days=i)
        wd = d.weekday()
        if i in ph:
            lab = "PH"
        elif (i + 1) in ph and wd <= 4:
            lab = "PHEve"
        else:
            lab = ("MonThu",) * 4 + ("Fri", "Sat", "Sun")
            lab = lab[wd]
        out.append((d, lab))
    return out


# ---- generation ------------------------------------------------------------

@dataclass
class GroundTruth:
    archetypes: list  # archetype names, index = code
    device_archetype: np.ndarray  # archetype code per device
    device_ids: list
    calendar: list  # (date, label)
    active: pl.DataFrame  # device, date, archetype for every emitted device-day
    truth_N: dict  # window -> N over registry order, from the planned stays
    stays: Optional[pl.DataFrame] = None  # planned stays when kept

    def archetype_of(self) -> dict:
        """{(device, day index): archetype name}"""
        out = {}
        for dev, date, arch in self.active.iter_rows():
            out[(dev, day_index_of_date(dt.date.fromisoformat(date)))] = arch
        return out


@dataclass
class _Devices:
    archetype: np.ndarray
    home: np.ndarray
    neighbor: np.ndarray
    choice: dict  # category -> building code per device


def _truncnorm(rng, size, sigma) -> np.ndarray:
    z = rng.standard_normal(size)
    z = np.clip(z, -TRUNCATE_SIGMA, TRUNCATE_SIGMA)
    return z * sigma


def _resolve_place(place: str, dev: np.ndarray, devs: _Devices, bcode: dict) -> np.ndarray:
    if place == "home":
        return devs.home[dev]
    if place == "neighbor":
        return devs.neighbor[dev]
    if place in devs.choice:
        return devs.choice[place][dev]
    if place in bcode:
        return np.full(dev.size, bcode[place])
    raise ScenarioError(f"unknown place {place!r}")


def _assign_devices(specs, n_devices, registry, rng) -> _Devices:
    shares = np.array([s.share for s in specs])
    arche = rng.choice(len(specs), size=n_devices, p=shares / shares.sum())
    buildings = registry.buildings
    bcode = {b: i for i, b in enumerate(buildings)}
    res = [bcode[b] for b in registry.in_category(LocationCategory.RESIDENTIAL)]
    choice = {}
    for cat in (LocationCategory.HOSPITAL, LocationCategory.MALL, LocationCategory.INSTITUTE,
                LocationCategory.RESIDENTIAL):
        members = [bcode[b] for b in registry.in_category(cat)]
        if members:
            choice[cat.value] = np.asarray(members)[rng.integers(0, len(members), n_devices)]
    facility = [bcode[b] for b in registry.buildings if registry.category(b) != LocationCategory.RESIDENTIAL]
    if facility:
        choice["Work"] = np.asarray(facility)[rng.integers(0, len(facility), n_devices)]
    if res:
        hi = rng.integers(0, len(res), n_devices)
        home = np.asarray(res)[hi]
        step = rng.integers(1, max(len(res), 2), n_devices)
        neighbor = np.asarray(res)[(hi + step) % len(res)]
    else:
        home = neighbor = np.full(n_devices, -1)
    return _Devices(arche, home, neighbor, choice)


def _plan_day(specs, devs: _Devices, label: str, rng, bcode) -> tuple:
    """Planned stays for one day: arrays (device, building, rel_start, rel_end, archetype)."""
    out_dev, out_b, out_s, out_e = [], [], [], []
    active_dev, active_arch = [], []
    for a, spec in enumerate(specs):
        members = np.flatnonzero(devs.archetype == a)
        mod = spec.modifier(label)
        draws = rng.random(members.size)
        members = members[draws < mod.active]
        if members.size == 0:
            continue
        w = np.asarray(mod.weights if mod.weights is not None else [v.weight for v in spec.variants], float)
        var = rng.choice(len(spec.variants), size=members.size, p=w / w.sum())
        for vi, variant in enumerate(spec.variants):
            dev = members[var == vi]
            if dev.size == 0:
                continue
            prev_end = None
            alive = np.ones(dev.size, dtype=bool)
            for slot in variant.slots:
                js = slot.start_jitter * mod.jitter_scale
                start_h = slot.start + mod.shift + _truncnorm(rng, dev.size, js)
                stay_h = slot.stay * mod.stay_scale + _truncnorm(rng, dev.size, slot.stay_jitter)
                stay_h = np.maximum(stay_h, MIN_STAY_H)
                s = np.round((start_h - DAY_START_HOUR) * 3600).astype(np.int64)
                s = np.maximum(s, 0)
                if prev_end is not None:
                    travel = rng.integers(120, 601, dev.size)
                    s = np.maximum(s, prev_end + travel)
                e = s + np.round(stay_h * 3600).astype(np.int64)
                e = np.minimum(e, DAY_SECONDS - 1)
                alive &= s < DAY_SECONDS - 60
                b = _resolve_place(slot.place, dev, devs, bcode)
                ok = alive & (b >= 0)
                out_dev.append(dev[ok])
                out_b.append(b[ok])
                out_s.append(s[ok])
                out_e.append(e[ok])
                prev_end = e
            active_dev.append(dev)
            active_arch.append(np.full(dev.size, a))
    cat = lambda xs: np.concatenate(xs) if xs else np.empty(0, dtype=np.int64)
    return cat(out_dev), cat(out_b), cat(out_s), cat(out_e), cat(active_dev), cat(active_arch)


def _emit_probes(dev, b, s, e, sensors_per_building, rng):
    """Probe timestamps (relative to day start) for each planned stay."""
    n_stay = dev.size
    sensor_idx = (rng.random(n_stay) * sensors_per_building[b]).astype(np.int64)
    dur = e - s
    n_int = np.maximum(1, np.ceil(dur / PROBE_SPACING).astype(np.int64))
    n_int[dur == 0] = 0
    count = n_int + 1
    rows = np.repeat(np.arange(n_stay), count)
    k = np.arange(rows.size) - np.repeat(np.cumsum(count) - count, count)
    nn = np.maximum(n_int[rows], 1)
    t = s[rows] + (dur[rows] * k) // nn
    interior = (k > 0) & (k < n_int[rows])
    jit = rng.integers(-PROBE_JITTER, PROBE_JITTER + 1, rows.size)
    t = np.where(interior, np.clip(t + jit, s[rows], e[rows]), t)
    return dev[rows], b[rows], sensor_idx[rows], t


def generate(
    specs: Sequence[ArchetypeSpec],
    n_devices: int,
    n_days: int,
    seed: int,
    out_path: Optional[Path] = None,
    registry: Optional[DeploymentRegistry] = None,
    start_date: dt.date = dt.date(2024, 1, 1),
    ph_days: Sequence[int] = (10, 24),
    tz_offset: int = 0,
    sensors_per_building: Optional[dict] = None,
    keep_stays: bool = False,
) -> tuple[Optional[pl.DataFrame], GroundTruth]:
    """Generate a probe log and its ground truth.

    With ``out_path`` the log is streamed to that CSV file day by day and
    None is returned in place of the frame; otherwise the whole log is
    returned as a (device, sensor, timestamp) frame.
    """
    validate_specs(specs)
    registry = registry or default_registry()
    buildings = registry.buildings
    bcode = {bld: i for i, bld in enumerate(buildings)}
    if sensors_per_building is None:
        sensors_per_building = {bld: (2 if registry.category(bld) != LocationCategory.RESIDENTIAL else 1)
                                for bld in buildings}
    spb = np.array([sensors_per_building.get(bld, 1) for bld in buildings])
    sensor_names = [[f"{bld}{j + 1}" for j in range(spb[i])] for i, bld in enumerate(buildings)]
    flat_sensors = [name for names in sensor_names for name in names]
    sensor_base = np.concatenate([[0], np.cumsum(spb)[:-1]])

    root = np.random.SeedSequence(seed)
    assign_ss, *day_ss = root.spawn(n_days + 1)
    devs = _assign_devices(specs, n_devices, registry, np.random.default_rng(assign_ss))
    width = max(6, len(str(n_devices - 1)))
    device_ids = [f"d{i:0{width}d}" for i in range(n_devices)]
    dev_series = pl.Series("device", device_ids, dtype=pl.Utf8)
    sensor_series = pl.Series("sensor", flat_sensors, dtype=pl.Utf8)
    names = [s.name for s in specs]
    calendar = make_calendar(start_date, n_days, ph_days)
    day0 = day_index_of_date(start_date)

    nb = len(buildings)
    truth_N = {w: np.zeros((nb, nb), dtype=np.int64) for w in WINDOWS}
    active_frames, stay_frames, probe_frames = [], [], []
    fh = open(out_path, "wb") if out_path is not None else None
    try:
        for i, (date, label) in enumerate(calendar):
            rng = np.random.default_rng(day_ss[i])
            dev, b, s, e, adev, aarch = _plan_day(specs, devs, label, rng, bcode)
            win = day_window(day0 + i, tz_offset)
            order = np.lexsort((s, dev))
            dev, b, s, e = dev[order], b[order], s[order], e[order]
            _accumulate_truth(truth_N, dev, b, e, win.start, tz_offset)
            if adev.size:
                o = np.argsort(adev, kind="stable")
                active_frames.append(pl.DataFrame({
                    "device": dev_series.gather(adev[o]),
                    "date": [date.isoformat()] * adev.size,
                    "archetype": [names[x] for x in aarch[o]],
                }))
            if keep_stays:
                stay_frames.append(pl.DataFrame({
                    "device": dev_series.gather(dev), "day": np.full(dev.size, day0 + i),
                    "building": [buildings[x] for x in b], "start": s + win.start, "end": e + win.start,
                }))
            pdev, pb, psen, pt = _emit_probes(dev, b, s, e, spb, rng)
            frame = pl.DataFrame({
                "dev": pdev, "sen": sensor_base[pb] + psen, "timestamp": pt + win.start,
            }).sort(["timestamp", "dev", "sen"])
            frame = pl.DataFrame({
                "device": dev_series.gather(frame["dev"]),
                "sensor": sensor_series.gather(frame["sen"]),
                "timestamp": frame["timestamp"],
            })
            if fh is not None:
                frame.write_csv(fh, include_header=(i == 0))
            else:
                probe_frames.append(frame)
    finally:
        if fh is not None:
            fh.close()

    schema = {"device": pl.Utf8, "date": pl.Utf8, "archetype": pl.Utf8}
    active = pl.concat(active_frames) if active_frames else pl.DataFrame(schema=schema)
    truth = GroundTruth(
        names, devs.archetype, device_ids, calendar, active, truth_N,
        pl.concat(stay_frames) if keep_stays and stay_frames else None,
    )
    if fh is not None:
        if n_days == 0:
            Path(out_path).write_text("device,sensor,timestamp\n")
        return None, truth
    schema = {"device": pl.Utf8, "sensor": pl.Utf8, "timestamp": pl.Int64}
    return (pl.concat(probe_frames) if probe_frames else pl.DataFrame(schema=schema)), truth


def _accumulate_truth(truth_N, dev, b, e, day_start, tz_offset) -> None:
    if dev.size < 2:
        return
    same = dev[1:] == dev[:-1]
    moved = same & (b[1:] != b[:-1])
    sod = (e[:-1] + day_start + tz_offset) % DAY_SECONDS
    for w, (lo, hi) in WINDOWS.items():
        m = moved & (sod >= lo * 3600) & (sod < hi * 3600)
        np.add.at(truth_N[w], (b[:-1][m], b[1:][m]), 1)


def write_ground_truth(out_dir: Path, truth: GroundTruth, registry: DeploymentRegistry) -> None:
    out_dir = Path(out_dir)
    truth.active.write_csv(out_dir / "ground_truth.csv")
    with open(out_dir / "calendar.csv", "w") as fh:
        fh.write("date,day_label\n")
        for d, lab in truth.calendar:
            fh.write(f"{d.isoformat()},{lab}\n")
    nodes = registry.buildings
    for w, N in truth.truth_N.items():
        with open(out_dir / f"truth_N_{w}.csv", "w") as fh:
            fh.write("node," + ",".join(nodes) + "\n")
            for i, row in enumerate(N):
                fh.write(nodes[i] + "," + ",".join(str(int(x)) for x in row) + "\n")
