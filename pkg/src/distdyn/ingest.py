"""Raw record loading, calendar masking, and snapshot assembly.

The analysis operates on cross-sectional snapshots: at every 10-minute
grid time, the positive observable values of all entities trading in that
interval.  Overnight and after-hours records are masked out rather than
zero-filled (zeros would corrupt fits of positive-support families), and
days where any in-session bucket is implausibly thin are dropped whole as
recording errors.
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import jsonio
from .errors import DomainError, InsufficientDataError

SECONDS_PER_DAY = 86400


@dataclass(frozen=True)
class ObservationRecord:
    timestamp: int
    entity_id: str
    value: float


@dataclass(frozen=True)
class TradingCalendar:
    """Session geometry in exchange-local minutes.

    Defaults describe a 6h30 session of 39 ten-minute intervals opening at
    minute 540 (09:00).
    """

    session_open_minute: int = 540
    session_length_intervals: int = 39
    interval_minutes: int = 10

    def __post_init__(self):
        if self.session_open_minute < 0 or self.session_open_minute >= 1440:
            raise DomainError(f"session_open_minute out of range: {self.session_open_minute}")
        if self.session_length_intervals <= 0 or self.interval_minutes <= 0:
            raise DomainError("session length and interval must be positive")
        if self.session_length_intervals * self.interval_minutes > 1440 - self.session_open_minute:
            raise DomainError("session does not fit inside the day")

    @property
    def session_minutes(self) -> int:
        return self.session_length_intervals * self.interval_minutes

    @property
    def interval_seconds(self) -> int:
        return self.interval_minutes * 60


def intraday_minute(timestamp: int, cal: TradingCalendar) -> int:
    """Minutes since session open: (minutes-past-midnight mod 1440) - open."""
    return (int(timestamp) // 60) % 1440 - cal.session_open_minute


def is_trading_time(timestamp: int, cal: TradingCalendar) -> bool:
    td = intraday_minute(timestamp, cal)
    return 0 <= td < cal.session_minutes


@dataclass(frozen=True)
class RowError:
    line: int
    reason: str


@dataclass
class LoadResult:
    records: list
    errors: list
    total_rows: int


_HEADERS = {
    ("timestamp", "entity_id", "value"): "value",
    ("timestamp", "entity_id", "volume", "price"): "volume_price",
}


def load_records(source) -> LoadResult:
    """Parse a CSV of observations.

    Accepts `timestamp,entity_id,value` or `timestamp,entity_id,volume,price`
    (value is then volume times price).  Malformed rows are collected with
    their line numbers, never silently dropped; a bad header is fatal.
    """
    if isinstance(source, (str, Path)):
        with open(source, "r", encoding="utf-8", newline="") as fh:
            return _parse_csv(fh)
    if isinstance(source, (bytes, bytearray)):
        return _parse_csv(io.StringIO(source.decode("utf-8")))
    if hasattr(source, "read"):
        data = source.read()
        if isinstance(data, bytes):
            data = data.decode("utf-8")
        return _parse_csv(io.StringIO(data))
    raise DomainError(f"unsupported record source: {type(source).__name__}")


def _parse_csv(fh) -> LoadResult:
    reader = csv.reader(fh)
    header = None
    for row in reader:
        # '#' lines carry run provenance (config hash, seed); they are not data
        if row and row[0].lstrip().startswith("#"):
            continue
        header = row
        break
    if header is None:
        raise DomainError("empty input: missing CSV header") from None
    key = tuple(h.strip().lower() for h in header)
    if key not in _HEADERS:
        raise DomainError(f"unrecognized CSV header: {','.join(header)}")
    mode = _HEADERS[key]

    records: list[ObservationRecord] = []
    errors: list[RowError] = []
    total = 0
    for row in reader:
        if row and row[0].lstrip().startswith("#"):
            continue
        total += 1
        line = reader.line_num
        if not row or all(not c.strip() for c in row):
            errors.append(RowError(line, "blank row"))
            continue
        if len(row) != len(key):
            errors.append(RowError(line, f"expected {len(key)} fields, got {len(row)}"))
            continue
        try:
            ts = int(float(row[0]))
        except ValueError:
            errors.append(RowError(line, f"bad timestamp {row[0]!r}"))
            continue
        entity = row[1].strip()
        if not entity:
            errors.append(RowError(line, "empty entity_id"))
            continue
        try:
            if mode == "value":
                value = float(row[2])
            else:
                volume = float(row[2])
                price = float(row[3])
                if volume < 0 or price < 0:
                    errors.append(RowError(line, "negative volume or price"))
                    continue
                value = volume * price
        except ValueError:
            errors.append(RowError(line, f"bad numeric field in {row!r}"))
            continue
        if not np.isfinite(value) or value < 0:
            errors.append(RowError(line, f"invalid value {value!r}"))
            continue
        records.append(ObservationRecord(ts, entity, value))
    return LoadResult(records=records, errors=errors, total_rows=total)


@dataclass
class IngestReport:
    """Exact bookkeeping: kept + masked + dropped equals total records."""

    total_records: int = 0
    kept_records: int = 0
    masked_records: int = 0
    dropped_records: int = 0
    dropped_days: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "total_records": self.total_records,
            "kept_records": self.kept_records,
            "masked_records": self.masked_records,
            "dropped_records": self.dropped_records,
            "dropped_days": list(self.dropped_days),
        }


@dataclass
class SnapshotSeries:
    """Bucketed cross-sections on the regular grid.

    times are ascending bucket timestamps; snapshots[i] holds the positive
    values of all entities in that bucket (empty when mask[i] is False,
    i.e. the bucket falls outside the trading session).
    """

    times: list
    snapshots: list
    mask: list
    report: IngestReport | None = None

    def trading_indices(self) -> list:
        return [i for i, m in enumerate(self.mask) if m]

    def n_trading(self) -> int:
        return sum(1 for m in self.mask if m)


def assemble_snapshots(
    records,
    cal: TradingCalendar,
    interval_seconds: int | None = None,
    min_entities: int = 10,
) -> SnapshotSeries:
    """Bucket records to the grid, mask non-session buckets, drop bad days.

    A day is a recording error when any of its in-session buckets (that
    appear in the data) has fewer than min_entities entities with positive
    value; such days are removed whole.  Raises when nothing tradeable
    survives.
    """
    if not records:
        raise InsufficientDataError("no records to assemble", stage="ingest")
    dt = interval_seconds if interval_seconds is not None else cal.interval_seconds
    if dt <= 0:
        raise DomainError("interval_seconds must be positive")

    # bucket -> entity -> [summed value, record count]; values of one
    # entity within one interval add up
    buckets: dict[int, dict[str, list]] = {}
    for rec in records:
        t = rec.timestamp - (rec.timestamp % dt)
        ent = buckets.setdefault(t, {})
        cell = ent.get(rec.entity_id)
        if cell is None:
            ent[rec.entity_id] = [rec.value, 1]
        else:
            cell[0] += rec.value
            cell[1] += 1

    report = IngestReport(total_records=len(records))

    # find days to drop: any present in-session bucket under the threshold
    bad_days = set()
    for t, ent in buckets.items():
        if not is_trading_time(t, cal):
            continue
        n_positive = sum(1 for v, _ in ent.values() if v > 0.0)
        if n_positive < min_entities:
            bad_days.add(t // SECONDS_PER_DAY)
    report.dropped_days = sorted(bad_days)

    times: list[int] = []
    snapshots: list[np.ndarray] = []
    mask: list[bool] = []
    for t in sorted(buckets):
        ent = buckets[t]
        n_records = sum(c for _, c in ent.values())
        if t // SECONDS_PER_DAY in bad_days:
            report.dropped_records += n_records
            continue
        if not is_trading_time(t, cal):
            report.masked_records += n_records
            times.append(t)
            snapshots.append(np.empty(0))
            mask.append(False)
            continue
        values = np.array(
            [ent[e][0] for e in sorted(ent) if ent[e][0] > 0.0], dtype=float
        )
        # records whose entity never traded a positive value in this
        # bucket carry no usable observation: masked, like night records
        masked_here = sum(c for v, c in ent.values() if v <= 0.0)
        report.masked_records += masked_here
        report.kept_records += n_records - masked_here
        times.append(t)
        snapshots.append(values)
        mask.append(True)

    series = SnapshotSeries(times=times, snapshots=snapshots, mask=mask, report=report)
    if series.n_trading() == 0:
        raise InsufficientDataError("no trading snapshots after masking", stage="ingest")
    return series


def to_records(series: SnapshotSeries) -> list:
    """Flatten a SnapshotSeries back into records.

    Entity identity is not stored in snapshots, so synthetic ids are
    minted per position.  Closed buckets emit a single zero-value marker
    record so that reassembly reproduces the same series (idempotence).
    """
    width = max(4, len(str(max((len(s) for s in series.snapshots), default=0))))
    out: list[ObservationRecord] = []
    for t, values, trading in zip(series.times, series.snapshots, series.mask):
        if not trading:
            out.append(ObservationRecord(int(t), "e" + "0" * width, 0.0))
            continue
        for j, v in enumerate(values):
            out.append(ObservationRecord(int(t), f"e{j:0{width}d}", float(v)))
    return out


def write_records_csv(records, path, prelude: list[str] | None = None) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for text in prelude or []:
            fh.write(f"# {text}\n")
        writer = csv.writer(fh)
        writer.writerow(["timestamp", "entity_id", "value"])
        for rec in records:
            writer.writerow([rec.timestamp, rec.entity_id, jsonio.format_float(rec.value)])


def save_snapshot_store(series: SnapshotSeries, directory) -> list:
    """Write one JSON document per day: {date, times, snapshots, mask}."""
    directory = Path(directory)
    os.makedirs(directory, exist_ok=True)
    by_day: dict[int, list[int]] = {}
    for i, t in enumerate(series.times):
        by_day.setdefault(t // SECONDS_PER_DAY, []).append(i)
    paths = []
    for day in sorted(by_day):
        idxs = by_day[day]
        doc = {
            "date": day,
            "times": [int(series.times[i]) for i in idxs],
            "snapshots": [[float(v) for v in series.snapshots[i]] for i in idxs],
            "mask": ["trading" if series.mask[i] else "closed" for i in idxs],
        }
        path = directory / f"day_{day}.json"
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(jsonio.dumps(doc))
            fh.write("\n")
        paths.append(path)
    return paths


def load_snapshot_store(directory) -> SnapshotSeries:
    directory = Path(directory)
    files = sorted(directory.glob("day_*.json"))
    if not files:
        raise InsufficientDataError(f"no day files under {directory}", stage="ingest")
    times: list[int] = []
    snapshots: list[np.ndarray] = []
    mask: list[bool] = []
    for path in files:
        with open(path, "r", encoding="utf-8") as fh:
            doc = jsonio.loads(fh.read())
        for t, vals, flag in zip(doc["times"], doc["snapshots"], doc["mask"]):
            times.append(int(t))
            snapshots.append(np.asarray(vals, dtype=float))
            mask.append(flag == "trading")
    order = np.argsort(times, kind="stable")
    return SnapshotSeries(
        times=[times[i] for i in order],
        snapshots=[snapshots[i] for i in order],
        mask=[mask[i] for i in order],
    )
