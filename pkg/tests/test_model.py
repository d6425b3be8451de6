import datetime as dt

import pytest
from hypothesis import given, strategies as st

from wififlow.model import (
    Area,
    DAY_SECONDS,
    DeploymentRegistry,
    LocationCategory,
    MalformedInputError,
    OutOfRangeError,
    RegistryError,
    building_of,
    check_chain,
    day_window_of,
    default_registry,
    validate_device_id,
    validate_sensor_id,
)

from conftest import DAY0, make_traj

T0 = DAY0 * DAY_SECONDS + 3 * 3600  # 2024-01-01 03:00 UTC


def test_day_window_boundaries():
    assert day_window_of(T0).index == DAY0
    assert day_window_of(T0).date == dt.date(2024, 1, 1)
    assert day_window_of(T0 - 1).index == DAY0 - 1
    assert day_window_of(T0 + DAY_SECONDS - 1).index == DAY0
    assert day_window_of(T0 + DAY_SECONDS).index == DAY0 + 1


def test_day_window_follows_local_offset():
    # 03:00 at UTC+8 is 19:00 UTC the previous day
    w = day_window_of(T0 - 8 * 3600, tz_offset=8 * 3600)
    assert w.index == DAY0 and w.start == T0 - 8 * 3600


def test_day_window_span_check():
    with pytest.raises(OutOfRangeError):
        day_window_of(T0 - 5, span=(T0, T0 + 100))
    assert day_window_of(T0 + 100, span=(T0, T0 + 100)).index == DAY0


@given(st.integers(-10**10, 10**10), st.sampled_from([0, 3600, -5 * 3600, 8 * 3600]))
def test_day_window_contains_timestamp(t, off):
    w = day_window_of(t, off)
    assert w.start <= t < w.end and w.end - w.start == DAY_SECONDS
    assert (w.start + off) % DAY_SECONDS == 3 * 3600


def test_building_of():
    assert building_of("W12") == "W"
    assert building_of("a3") == "a"
    assert building_of("b") == "b"
    with pytest.raises(MalformedInputError):
        building_of("")


def test_id_validation():
    assert validate_device_id("aa:bb") == "aa:bb"
    with pytest.raises(MalformedInputError):
        validate_device_id("")
    assert validate_sensor_id("H1") == "H1"
    for bad in ("", "1H", "H"):
        with pytest.raises(MalformedInputError):
            validate_sensor_id(bad)


def test_default_registry_layout():
    reg = default_registry()
    assert len(reg) == 20
    assert reg.in_category(LocationCategory.MALL) == ["W", "X", "Y", "Z"]
    assert reg.in_category(LocationCategory.HOSPITAL) == ["H"]
    assert reg.in_category(LocationCategory.INSTITUTE) == ["I"]
    assert reg.in_area(Area.RESIDENTIAL) == list("abcdefghijklmn")
    assert reg.area("H") == Area.FACILITY
    with pytest.raises(RegistryError):
        reg.category("Q")


def test_registry_roundtrip(tmp_path):
    reg = default_registry()
    reg.save(tmp_path / "r.csv")
    assert DeploymentRegistry.load(tmp_path / "r.csv") == reg


def test_registry_rejects_bad_rows(tmp_path):
    with pytest.raises(RegistryError):
        DeploymentRegistry.from_rows([["A", "Mall", "Facility"], ["A", "Mall", "Facility"]])
    with pytest.raises(RegistryError):
        DeploymentRegistry.from_rows([["AB", "Mall", "Facility"]])
    with pytest.raises(RegistryError):
        DeploymentRegistry.from_rows([["A", "Shop", "Facility"]])
    (tmp_path / "r.csv").write_text("A,Mall,Facility\n")
    with pytest.raises(RegistryError):
        DeploymentRegistry.load(tmp_path / "r.csv")


def test_chain_invariants_hold_for_linked_entries():
    t = make_traj([("W1", 0, 100), ("W2", 200, 300), ("H1", 400, 500)])
    check_chain(t)
    assert t.nodes() == ["W1", "W2", "H1"]
    assert [e.next for e in t.entries] == ["W2", "H1", None]
    assert t.span == 500
