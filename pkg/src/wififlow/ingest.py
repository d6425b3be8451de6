"""Probe-log parsing, 3-minute coalescing and sensor-level trajectories.

Parsing and coalescing are columnar (polars) because raw logs run to
hundreds of millions of probes; trajectories come out as plain dataclasses.
"""
from __future__ import annotations

import gzip
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator, Optional, Sequence

import numpy as np
import polars as pl

from .model import (
    DAY_SECONDS,
    DAY_START_OFFSET,
    DayTrajectory,
    day_window,
    link_entries,
)
from .preprocess import compute_stay_take

log = logging.getLogger(__name__)

COALESCE_GAP = 180
MAX_MALFORMED_FRACTION = 0.10
# Below this many lines a malformed fraction says nothing about the file.
MIN_LINES_FOR_CORRUPT = 20
PROBE_COLUMNS = ("device", "sensor", "timestamp")
INTERVAL_COLUMNS = ("device", "sensor", "first_seen", "last_seen")
_CHUNK_BYTES = 32 << 20


class CorruptInputError(ValueError):
    pass


@dataclass(frozen=True, slots=True)
class ProbeEvent:
    device: str
    sensor: str
    timestamp: int


@dataclass(frozen=True, slots=True)
class DetectionInterval:
    device: str
    sensor: str
    first_seen: int
    last_seen: int
    probes: int = 1


@dataclass
class ParseResult:
    """Parsed records as a frame, plus line accounting."""

    frame: pl.DataFrame
    lines: int = 0
    skipped: int = 0
    out_of_span: int = 0

    def events(self) -> list[ProbeEvent]:
        return [ProbeEvent(d, s, t) for d, s, t in self.frame.select(PROBE_COLUMNS).iter_rows()]


@dataclass
class IngestReport:
    lines: int = 0
    records: int = 0
    skipped: int = 0
    out_of_span: int = 0
    probes: int = 0
    intervals: int = 0
    trajectories: int = 0
    extra: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        d = {k: getattr(self, k) for k in
             ("lines", "records", "skipped", "out_of_span", "probes", "intervals", "trajectories")}
        d.update(self.extra)
        return d


def _empty_frame(columns: Sequence[str]) -> pl.DataFrame:
    schema = {c: (pl.Utf8 if c in ("device", "sensor") else pl.Int64) for c in columns}
    return pl.DataFrame(schema=schema)


def _valid_expr(columns: Sequence[str]) -> pl.Expr:
    ok = (
        (pl.col("device").str.len_bytes() > 0)
        & ~pl.col("device").str.contains("\x00", literal=True)
        & pl.col("sensor").str.contains(r"^[A-Za-z].")
    )
    if "last_seen" in columns:
        ok = ok & (pl.col("last_seen") >= pl.col("first_seen"))
    return ok


def _parse_csv_fast(chunk: bytes, columns: Sequence[str]) -> Optional[pl.DataFrame]:
    """Strict columnar parse of a clean chunk; None when anything looks off."""
    if b'"' in chunk:
        return None
    schema = {c: (pl.Utf8 if c in ("device", "sensor") else pl.Int64) for c in columns}
    try:
        df = pl.read_csv(chunk, has_header=False, new_columns=list(columns), schema=schema)
    except pl.exceptions.PolarsError:
        return None
    df = df.with_columns(pl.col("device").str.strip_chars(), pl.col("sensor").str.strip_chars())
    if df.null_count().sum_horizontal().item() or not df.select(_valid_expr(columns).all()).item():
        return None
    return df


def _parse_csv_lines(lines: pl.Series, columns: Sequence[str]) -> tuple[pl.DataFrame, int]:
    """Split raw text lines into typed columns; returns (frame, malformed count)."""
    df = pl.DataFrame({"line": lines}).with_columns(pl.col("line").str.strip_chars_end("\r"))
    df = df.filter(pl.col("line").is_not_null() & (pl.col("line").str.strip_chars() != ""))
    n = df.height
    parts = pl.col("line").str.split(",")
    exprs = [parts.list.get(i, null_on_oob=True).str.strip_chars().alias(c) for i, c in enumerate(columns)]
    df = df.select(parts.list.len().alias("_n"), *exprs)
    ints = [c for c in columns if c not in ("device", "sensor")]
    ok = (pl.col("_n") == len(columns)) & _valid_expr(("device", "sensor"))
    for c in ints:
        ok = ok & pl.col(c).str.contains(r"^-?\d+$")
    df = df.filter(ok).select(
        pl.col("device"), pl.col("sensor"), *[pl.col(c).cast(pl.Int64) for c in ints]
    )
    if "last_seen" in columns:
        df = df.filter(pl.col("last_seen") >= pl.col("first_seen"))
    return df, n - df.height


def _parse_json_lines(raw: Iterable[str], columns: Sequence[str]) -> tuple[pl.DataFrame, int, int]:
    cols: dict[str, list] = {c: [] for c in columns}
    n = bad = 0
    for line in raw:
        if not line.strip():
            continue
        n += 1
        try:
            obj = json.loads(line)
            dev, sen = obj["device"], obj["sensor"]
            nums = [obj[c] for c in columns[2:]]
            if not (isinstance(dev, str) and dev and isinstance(sen, str) and len(sen) >= 2
                    and sen[0].isalpha()):
                raise ValueError
            nums = [int(x) if isinstance(x, int) and not isinstance(x, bool) else None for x in nums]
            if None in nums or (len(nums) == 2 and nums[1] < nums[0]):
                raise ValueError
        except (ValueError, KeyError, TypeError):
            bad += 1
            continue
        cols["device"].append(dev)
        cols["sensor"].append(sen)
        for c, v in zip(columns[2:], nums):
            cols[c].append(v)
    df = pl.DataFrame(cols, schema={c: (pl.Utf8 if c in ("device", "sensor") else pl.Int64) for c in columns})
    return df, n, bad


def _open(source) -> BinaryIO:
    if isinstance(source, (str, Path)):
        p = Path(source)
        return gzip.open(p, "rb") if p.name.endswith(".gz") else open(p, "rb")
    return source


def _apply_span(df: pl.DataFrame, span: Optional[tuple[int, int]]) -> tuple[pl.DataFrame, int]:
    if span is None or df.height == 0:
        return df, 0
    tcol = "timestamp" if "timestamp" in df.columns else "first_seen"
    lcol = "timestamp" if "timestamp" in df.columns else "last_seen"
    keep = (pl.col(tcol) >= span[0]) & (pl.col(lcol) <= span[1])
    out = df.filter(keep)
    return out, df.height - out.height


def iter_parse(
    source,
    pre_coalesced: bool = False,
    span: Optional[tuple[int, int]] = None,
    chunk_bytes: int = _CHUNK_BYTES,
) -> Iterator[ParseResult]:
    """Stream a probe (or interval) log in chunks.

    ``source`` is a path (``.gz`` is decompressed) or a binary stream. CSV or
    JSON-lines is chosen from the first byte.
    """
    columns = INTERVAL_COLUMNS if pre_coalesced else PROBE_COLUMNS
    header = ",".join(columns)
    fh = _open(source)
    try:
        first = fh.read(chunk_bytes)
        if not first:
            return
        if first.lstrip()[:1] == b"{":
            text = io.TextIOWrapper(io.BufferedReader(_Prefixed(first, fh)), encoding="utf-8", errors="replace")
            while True:
                block = text.readlines(chunk_bytes)
                if not block:
                    break
                df, n, bad = _parse_json_lines(block, columns)
                df, oos = _apply_span(df, span)
                yield ParseResult(df, n, bad, oos)
            return
        buf = first
        head_done = False
        while buf:
            nxt = fh.read(chunk_bytes)
            if nxt:
                cut = buf.rfind(b"\n") + 1
                if cut == 0:
                    buf += nxt
                    continue
                chunk, buf = buf[:cut], buf[cut:] + nxt
            else:
                chunk, buf = buf, b""
            if not head_done:
                head_done = True
                nl = chunk.find(b"\n")
                top = chunk if nl < 0 else chunk[:nl]
                if top.decode("utf-8", errors="replace").strip().replace(" ", "") == header:
                    chunk = b"" if nl < 0 else chunk[nl + 1:]
            df = _parse_csv_fast(chunk, columns) if chunk.strip() else None
            bad = 0
            if df is None:
                lines = chunk.decode("utf-8", errors="replace").split("\n")
                df, bad = _parse_csv_lines(pl.Series("line", lines, dtype=pl.Utf8), columns)
            n = df.height + bad
            df, oos = _apply_span(df, span)
            yield ParseResult(df, n, bad, oos)
    finally:
        if isinstance(source, (str, Path)):
            fh.close()


class _Prefixed(io.RawIOBase):
    """Raw stream that replays already-consumed bytes before the rest."""

    def __init__(self, prefix: bytes, rest: BinaryIO):
        self._prefix = prefix
        self._rest = rest

    def readable(self):
        return True

    def readinto(self, b):
        if self._prefix:
            n = min(len(b), len(self._prefix))
            b[:n] = self._prefix[:n]
            self._prefix = self._prefix[n:]
            return n
        data = self._rest.read(len(b))
        b[: len(data)] = data
        return len(data)


def _check_corrupt(lines: int, skipped: int) -> None:
    if lines >= MIN_LINES_FOR_CORRUPT and skipped / lines > MAX_MALFORMED_FRACTION:
        raise CorruptInputError(f"{skipped} of {lines} lines malformed (> {MAX_MALFORMED_FRACTION:.0%})")


def parse_probe_log(stream, pre_coalesced: bool = False, span=None) -> ParseResult:
    """Parse a whole log into one frame; events keep file order."""
    parts = list(iter_parse(stream, pre_coalesced, span))
    columns = INTERVAL_COLUMNS if pre_coalesced else PROBE_COLUMNS
    if not parts:
        return ParseResult(_empty_frame(columns))
    res = ParseResult(
        pl.concat([p.frame for p in parts]),
        sum(p.lines for p in parts),
        sum(p.skipped for p in parts),
        sum(p.out_of_span for p in parts),
    )
    _check_corrupt(res.lines, res.skipped)
    return res


def _segment_cummax(values: np.ndarray, seg: np.ndarray) -> np.ndarray:
    """Running maximum restarting at each segment; ``seg`` is sorted."""
    lo = values.min()
    width = int(values.max()) - int(lo) + 1
    if int(seg[-1]) * width < 2 ** 62:
        offset = seg.astype(np.int64) * width
        return np.maximum.accumulate(offset + (values - lo)) - offset + lo
    return pl.DataFrame({"v": values, "s": seg}).select(pl.col("v").cum_max().over("s"))["v"].to_numpy()


def _chain(df: pl.DataFrame, gap: int, dedup: bool = False) -> pl.DataFrame:
    """Greedy chaining of (first, last, n) records per (device, sensor).

    A record joins the current run when it starts no more than ``gap``
    seconds after the latest end seen so far in that run. Raw probes are the
    special case first == last, n == 1; with ``dedup`` a record repeating the
    previous one of its key counts zero probes.

    Keys are mapped to integer codes through a categorical so the ordering
    is a numeric lexsort rather than a sort of millions of string pairs.
    The output is sorted by (device, sensor, first).
    """
    if df.height == 0:
        return df
    g = df.select(
        pl.concat_str("device", "sensor", separator="\x00").cast(pl.Categorical).to_physical()
    ).to_series().to_numpy()
    first = df["first"].to_numpy()
    last = df["last"].to_numpy()
    n = df["n"].to_numpy()
    o = np.lexsort((last, first, g))
    g, first, last, n = g[o], first[o], last[o], n[o]
    new_key = np.ones(g.size, dtype=bool)
    new_key[1:] = g[1:] != g[:-1]
    prev_end = np.empty_like(last)
    prev_end[1:] = _segment_cummax(last, g)[:-1]
    new_run = new_key.copy()
    new_run[1:] |= first[1:] - prev_end[1:] > gap
    if dedup:
        repeat = np.zeros(g.size, dtype=bool)
        repeat[1:] = ~new_key[1:] & (first[1:] == first[:-1]) & (last[1:] == last[:-1])
        n = np.where(repeat, 0, n)
    starts = np.flatnonzero(new_run)
    rep = o[starts]
    return pl.DataFrame({
        "device": df["device"].gather(rep),
        "sensor": df["sensor"].gather(rep),
        "first": first[starts],
        "last": np.maximum.reduceat(last, starts),
        "n": np.add.reduceat(n, starts),
    }).sort(["device", "sensor", "first"])


def coalesce_frame(df: pl.DataFrame, gap: int = COALESCE_GAP) -> pl.DataFrame:
    """Coalesce a probe frame (or pre-coalesced interval frame) into intervals.

    Output columns: device, sensor, first, last, n; sorted by
    (device, sensor, first). Identical duplicate probes count once.
    """
    if "timestamp" in df.columns:
        df = df.select(
            "device", "sensor", pl.col("timestamp").alias("first"), pl.col("timestamp").alias("last"),
            pl.lit(1, dtype=pl.Int64).alias("n"),
        )
        return _chain(df, gap, dedup=True)
    if "first_seen" in df.columns:
        df = df.select("device", "sensor", pl.col("first_seen").alias("first"),
                       pl.col("last_seen").alias("last"), pl.lit(1, dtype=pl.Int64).alias("n"))
    return _chain(df, gap)


def coalesce_probes(events: Iterable[ProbeEvent], gap: int = COALESCE_GAP) -> list[DetectionInterval]:
    evs = list(events)
    df = pl.DataFrame(
        {"device": [e.device for e in evs], "sensor": [e.sensor for e in evs],
         "timestamp": [e.timestamp for e in evs]},
        schema={"device": pl.Utf8, "sensor": pl.Utf8, "timestamp": pl.Int64},
    )
    out = coalesce_frame(df, gap)
    return [DetectionInterval(*row) for row in out.iter_rows()]


def _interval_frame(intervals) -> pl.DataFrame:
    if isinstance(intervals, pl.DataFrame):
        return intervals
    ivs = list(intervals)
    return pl.DataFrame(
        {"device": [i.device for i in ivs], "sensor": [i.sensor for i in ivs],
         "first": [i.first_seen for i in ivs], "last": [i.last_seen for i in ivs]},
        schema={"device": pl.Utf8, "sensor": pl.Utf8, "first": pl.Int64, "last": pl.Int64},
    )


def build_sensor_trajectories(intervals, tz_offset: int = 0) -> list[DayTrajectory]:
    """Group intervals into per-(device, day) sensor-level trajectories.

    An interval crossing 03:00 is cut: the earlier piece ends at the last
    second of its day and the remainder starts the next day.
    """
    df = _interval_frame(intervals)
    if df.height == 0:
        return []
    first = df["first"].to_numpy()
    last = df["last"].to_numpy()
    d0 = (first + tz_offset - DAY_START_OFFSET) // DAY_SECONDS
    d1 = (last + tz_offset - DAY_START_OFFSET) // DAY_SECONDS
    pieces = (d1 - d0 + 1).astype(np.int64)
    rows = np.repeat(np.arange(df.height), pieces)
    offs = np.arange(rows.size) - np.repeat(np.cumsum(pieces) - pieces, pieces)
    day = d0[rows] + offs
    dstart = day * DAY_SECONDS + DAY_START_OFFSET - tz_offset
    start = np.maximum(first[rows], dstart)
    end = np.minimum(last[rows], dstart + DAY_SECONDS - 1)
    split = pl.DataFrame(
        {
            "device": df["device"].gather(rows),
            "sensor": df["sensor"].gather(rows),
            "day": day,
            "start": start,
            "end": end,
        }
    ).sort(["device", "day", "start", "end", "sensor"])

    trajs: list[DayTrajectory] = []
    cur_key = None
    items: list[tuple[str, int, int]] = []

    def flush():
        dev, d = cur_key
        t = DayTrajectory(dev, day_window(d, tz_offset), link_entries(dev, items))
        trajs.append(compute_stay_take(t))

    for dev, sen, d, s, e in split.iter_rows():
        key = (dev, d)
        if key != cur_key:
            if cur_key is not None:
                flush()
            cur_key, items = key, []
        items.append((sen, s, e))
    flush()
    return trajs


def ingest(
    source,
    gap: int = COALESCE_GAP,
    tz_offset: int = 0,
    pre_coalesced: bool = False,
    span: Optional[tuple[int, int]] = None,
) -> tuple[list[DayTrajectory], IngestReport]:
    """Parse, coalesce and assemble sensor-level day trajectories.

    Chunks are coalesced independently and the partial intervals chained
    again at the end; chaining intervals is exact regardless of how probes
    were split across chunks.
    """
    rep = IngestReport()
    partial = []
    for res in iter_parse(source, pre_coalesced, span):
        rep.lines += res.lines
        rep.skipped += res.skipped
        rep.out_of_span += res.out_of_span
        rep.records += res.frame.height
        if res.frame.height:
            partial.append(coalesce_frame(res.frame, gap))
        log.debug("parsed chunk: %d records", res.frame.height)
    _check_corrupt(rep.lines, rep.skipped)
    if not partial:
        return [], rep
    merged = _chain(pl.concat(partial), gap)
    rep.probes = int(merged["n"].sum())
    rep.intervals = merged.height
    trajs = build_sensor_trajectories(merged, tz_offset)
    rep.trajectories = len(trajs)
    return trajs, rep
