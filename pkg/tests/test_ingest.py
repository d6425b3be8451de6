import gzip
import io
import json

import polars as pl
import pytest
from hypothesis import given, strategies as st

from wififlow.ingest import (
    CorruptInputError,
    DetectionInterval,
    ProbeEvent,
    build_sensor_trajectories,
    coalesce_frame,
    coalesce_probes,
    ingest,
    iter_parse,
    parse_probe_log,
)
from wififlow.model import DAY_SECONDS, check_chain

from conftest import DAY0
from oracles import brute_coalesce

T0 = DAY0 * DAY_SECONDS + 3 * 3600


def _csv(rows, header=True):
    text = ("device,sensor,timestamp\n" if header else "") + "".join(f"{r}\n" for r in rows)
    return io.BytesIO(text.encode())


def test_parse_csv_with_and_without_header():
    for header in (True, False):
        res = parse_probe_log(_csv(["d1,W1,100", "d2,H1,200"], header))
        assert res.events() == [ProbeEvent("d1", "W1", 100), ProbeEvent("d2", "H1", 200)]
        assert res.skipped == 0


def test_parse_skips_malformed_lines():
    rows = ["d1,W1,100"] * 19 + ["garbage"]
    res = parse_probe_log(_csv(rows))
    assert res.frame.height == 19 and res.skipped == 1 and res.lines == 20


def test_parse_skips_bad_fields():
    rows = ["d1,W1,100", ",W1,5", "d1,1W,5", "d1,W1,abc", "d1,W1,1,2"]
    res = parse_probe_log(_csv(rows))
    assert res.frame.height == 1 and res.skipped == 4


def test_parse_raises_when_too_much_is_malformed():
    rows = ["d1,W1,100"] * 17 + ["x"] * 3
    with pytest.raises(CorruptInputError):
        parse_probe_log(_csv(rows))


def test_parse_jsonl_and_gzip(tmp_path):
    lines = [json.dumps({"device": "d1", "sensor": "W1", "timestamp": 7}), "{oops"]
    res = parse_probe_log(io.BytesIO("\n".join(lines).encode()))
    assert res.events() == [ProbeEvent("d1", "W1", 7)] and res.skipped == 1
    p = tmp_path / "log.csv.gz"
    with gzip.open(p, "wt") as fh:
        fh.write("device,sensor,timestamp\nd1,W1,5\n")
    assert parse_probe_log(p).events() == [ProbeEvent("d1", "W1", 5)]


def test_parse_pre_coalesced_intervals():
    data = b"device,sensor,first_seen,last_seen\nd1,W1,0,50\nd1,W1,60,40\n"
    res = parse_probe_log(io.BytesIO(data), pre_coalesced=True)
    assert res.frame.height == 1 and res.skipped == 1


def test_parse_span_filter():
    res = parse_probe_log(_csv(["d1,W1,100", "d1,W1,900"]), span=(0, 500))
    assert res.frame.height == 1 and res.out_of_span == 1


def test_chunked_parse_matches_single_chunk():
    rows = [f"d{i % 7},W{i % 3 + 1},{i * 13}" for i in range(500)]
    whole = pl.concat([r.frame for r in iter_parse(_csv(rows))])
    parts = pl.concat([r.frame for r in iter_parse(_csv(rows), chunk_bytes=97)])
    assert whole.equals(parts)


def test_coalesce_examples():
    evs = [ProbeEvent("d", "W1", t) for t in (0, 100, 250)]
    assert coalesce_probes(evs) == [DetectionInterval("d", "W1", 0, 250, 3)]
    evs = [ProbeEvent("d", "W1", t) for t in (0, 181)]
    assert coalesce_probes(evs) == [DetectionInterval("d", "W1", 0, 0, 1),
                                    DetectionInterval("d", "W1", 181, 181, 1)]
    evs = [ProbeEvent("d", "W1", t) for t in (0, 180)]
    assert coalesce_probes(evs) == [DetectionInterval("d", "W1", 0, 180, 2)]


def test_coalesce_duplicate_probe_counts_once():
    evs = [ProbeEvent("d", "W1", t) for t in (0, 100, 100, 250)]
    assert coalesce_probes(evs) == [DetectionInterval("d", "W1", 0, 250, 3)]


def test_coalesce_keys_are_independent():
    evs = [ProbeEvent("d", "W1", 0), ProbeEvent("d", "W2", 60), ProbeEvent("e", "W1", 90)]
    out = coalesce_probes(evs)
    assert [(i.device, i.sensor, i.first_seen) for i in out] == [("d", "W1", 0), ("d", "W2", 60), ("e", "W1", 90)]


events_st = st.lists(
    st.tuples(st.sampled_from(["d1", "d2", "d3"]), st.sampled_from(["W1", "W2", "a1"]),
              st.integers(0, 3000)),
    min_size=1, max_size=80,
)


@given(events_st)
def test_coalesce_matches_brute_force(events):
    got = coalesce_probes([ProbeEvent(*e) for e in events])
    assert [(i.device, i.sensor, i.first_seen, i.last_seen, i.probes) for i in got] == brute_coalesce(events)


@given(events_st, st.integers(1, 79))
def test_coalesce_order_and_split_independent(events, cut):
    """Re-chaining coalesced halves equals coalescing everything at once."""
    df = pl.DataFrame(events, schema=["device", "sensor", "timestamp"], orient="row")
    whole = coalesce_frame(df)
    halves = pl.concat([coalesce_frame(df[:cut]), coalesce_frame(df[cut:])]) if cut < df.height else whole
    again = coalesce_frame(halves)
    assert again.select("device", "sensor", "first", "last").equals(whole.select("device", "sensor", "first", "last"))
    shuffled = coalesce_frame(df.reverse())
    assert shuffled.equals(whole)


@given(events_st)
def test_coalesce_gap_property(events):
    got = coalesce_probes([ProbeEvent(*e) for e in events])
    by_key = {}
    for i in got:
        by_key.setdefault((i.device, i.sensor), []).append(i)
    for ivs in by_key.values():
        for a, b in zip(ivs, ivs[1:]):
            assert b.first_seen - a.last_seen > 180


def test_trajectory_split_at_day_boundary():
    # 02:50 to 03:10 across the 03:00 boundary
    iv = DetectionInterval("d", "W1", T0 - 600, T0 + 600)
    trajs = build_sensor_trajectories([iv])
    assert [t.day.index for t in trajs] == [DAY0 - 1, DAY0]
    first, second = trajs[0].entries[0], trajs[1].entries[0]
    assert (first.start_time, first.end_time) == (T0 - 600, T0 - 1)
    assert (second.start_time, second.end_time) == (T0, T0 + 600)


def test_trajectories_are_chained_in_time_order():
    ivs = [DetectionInterval("d", "H1", T0 + 500, T0 + 900), DetectionInterval("d", "W1", T0 + 10, T0 + 300),
           DetectionInterval("e", "a1", T0 + 5, T0 + 50)]
    trajs = build_sensor_trajectories(ivs)
    assert [(t.device, t.nodes()) for t in trajs] == [("d", ["W1", "H1"]), ("e", ["a1"])]
    d = trajs[0]
    assert d.entries[0].stay_time == 290 and d.entries[0].take_time == 200
    for t in trajs:
        check_chain(t)


@given(st.lists(st.tuples(st.sampled_from(["d1", "d2"]), st.sampled_from(["W1", "H2", "b1"]),
                          st.integers(0, 3 * DAY_SECONDS), st.integers(0, 20000)), min_size=1, max_size=30))
def test_trajectories_cover_every_interval_day(rows):
    ivs = [DetectionInterval(d, s, T0 + a, T0 + a + b) for d, s, a, b in rows]
    trajs = build_sensor_trajectories(ivs)
    for t in trajs:
        check_chain(t)
    # one entry per (interval, day touched)
    pieces = sum((a + b) // DAY_SECONDS - a // DAY_SECONDS + 1 for *_, a, b in rows)
    assert sum(len(t) for t in trajs) == pieces
    assert len({(t.device, t.day.index) for t in trajs}) == len(trajs)


def test_ingest_end_to_end(tmp_path):
    p = tmp_path / "p.csv"
    rows = [f"d1,W1,{T0 + t}" for t in range(0, 1000, 100)] + [f"d1,H1,{T0 + 5000 + t}" for t in (0, 60)]
    p.write_text("device,sensor,timestamp\n" + "\n".join(rows) + "\n")
    trajs, rep = ingest(p)
    assert rep.probes == 12 and rep.intervals == 2 and rep.trajectories == 1
    assert trajs[0].nodes() == ["W1", "H1"]
