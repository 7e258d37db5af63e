"""Parsing, validation and cleaning of raw parking and trip records.

Timestamps are naive wall-clock ISO-8601 strings and are stored as integer
seconds since 1970-01-01T00:00:00 (no timezone handling). Coordinates are
projected meters; longitude/latitude columns can be projected on the way in
with :func:`project_lonlat`.
"""

from __future__ import annotations

import csv
import datetime as dt
import math
import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence, TextIO

MODES = ("metro", "bus", "ride_hailing", "taxi")

PARKING_COLUMNS = {
    "lot_id": "lot_id",
    "arrival": "arrival",
    "departure": "departure",
    "date": "date",
    "capacity": "capacity",
}
TRIP_COLUMNS = {
    "mode": "mode",
    "o_x": "o_x",
    "o_y": "o_y",
    "d_x": "d_x",
    "d_y": "d_y",
    "depart_time": "depart_time",
    "arrive_time": "arrive_time",
}
_MANDATORY_PARKING = ("lot_id", "arrival", "departure", "date", "capacity")
_MANDATORY_TRIP = ("o_x", "o_y", "depart_time")
_NULLS = {"", "null", "NULL", "nan", "NaN", "None", "NA", "N/A"}

EARTH_RADIUS_M = 6_371_008.8


class SchemaError(ValueError):
    """A mandatory column is absent from the header."""


@dataclass(frozen=True)
class ParkingRecord:
    lot_id: str | None
    arrival: int | None
    departure: int | None
    date: dt.date | None
    capacity: int | None
    malformed: bool = field(default=False, compare=False)


@dataclass(frozen=True)
class TripRecord:
    mode: str
    origin: tuple[float, float] | None
    destination: tuple[float, float] | None
    depart_time: int | None
    arrive_time: int | None = None
    malformed: bool = field(default=False, compare=False)


@dataclass(frozen=True)
class DropReport:
    total_rows: int
    dropped_missing: int
    dropped_invalid: int
    retained: int


@dataclass(frozen=True)
class Schema:
    """Column map and dialect for a delimiter-separated file.

    ``columns`` maps field names to header names. With ``lonlat=True`` the
    x/y columns hold longitude/latitude in degrees and are projected around
    ``reference`` (lon, lat).
    """

    columns: dict[str, str]
    delimiter: str = ","
    lonlat: bool = False
    reference: tuple[float, float] = (0.0, 0.0)


def parking_schema(**overrides) -> Schema:
    return Schema(columns={**PARKING_COLUMNS, **overrides.pop("columns", {})}, **overrides)


def trip_schema(**overrides) -> Schema:
    return Schema(columns={**TRIP_COLUMNS, **overrides.pop("columns", {})}, **overrides)


# -- field conversion ------------------------------------------------------


_EPOCH = dt.datetime(1970, 1, 1)
_SECOND = dt.timedelta(seconds=1)


def to_seconds(value: dt.datetime) -> int:
    """Whole seconds since the epoch; sub-second parts are truncated toward the past."""
    return (value.replace(tzinfo=None) - _EPOCH) // _SECOND


def from_seconds(seconds: int) -> dt.datetime:
    return _EPOCH + dt.timedelta(seconds=int(seconds))


def format_timestamp(seconds: int) -> str:
    return from_seconds(seconds).isoformat(timespec="seconds")


_FRACTION = re.compile(r"(T?\d{2}:\d{2}:\d{2})\.\d+")


def parse_timestamp(text: str) -> int:
    """ISO-8601 text to integer seconds; fractional seconds are dropped."""
    return to_seconds(dt.datetime.fromisoformat(_FRACTION.sub(r"\1", text.strip())))


def project_lonlat(lon: float, lat: float, ref_lon: float, ref_lat: float) -> tuple[float, float]:
    """Equirectangular projection to meters east/north of the reference point."""
    x = math.radians(lon - ref_lon) * EARTH_RADIUS_M * math.cos(math.radians(ref_lat))
    y = math.radians(lat - ref_lat) * EARTH_RADIUS_M
    return x, y


class _Row:
    """Field access on one CSV row that tracks missing vs unparseable values."""

    def __init__(self, row: dict, columns: dict[str, str]):
        self.row = row
        self.columns = columns
        self.malformed = False

    def raw(self, name: str) -> str | None:
        header = self.columns.get(name)
        if header is None or header not in self.row:
            return None
        value = self.row[header]
        if value is None or value.strip() in _NULLS:
            return None
        return value.strip()

    def get(self, name: str, convert):
        value = self.raw(name)
        if value is None:
            return None
        try:
            return convert(value)
        except (ValueError, OverflowError):
            self.malformed = True
            return None


def _reader(source: TextIO, schema: Schema, mandatory: Sequence[str]) -> csv.DictReader:
    reader = csv.DictReader(source, delimiter=schema.delimiter)
    header = reader.fieldnames or []
    missing = [name for name in mandatory if schema.columns.get(name) not in header]
    if missing:
        raise SchemaError(
            f"header {header} lacks mandatory column(s): "
            + ", ".join(f"{m} (expected {schema.columns.get(m)!r})" for m in missing)
        )
    return reader


def _int(text: str) -> int:
    value = float(text)
    if not value.is_integer():
        raise ValueError(text)
    return int(value)


def parse_parking_records(source: TextIO, schema: Schema | None = None) -> list[ParkingRecord]:
    """Read parking stays, one record per data row, in file order.

    Rows with empty or unparseable fields are still returned (with ``None``
    in place of the bad value) so that :func:`validate_and_drop` can account
    for them.
    """
    schema = schema or parking_schema()
    reader = _reader(source, schema, _MANDATORY_PARKING)
    out = []
    for raw in reader:
        row = _Row(raw, schema.columns)
        lot = row.raw("lot_id")
        record = ParkingRecord(
            lot_id=lot,
            arrival=row.get("arrival", parse_timestamp),
            departure=row.get("departure", parse_timestamp),
            date=row.get("date", dt.date.fromisoformat),
            capacity=row.get("capacity", _int),
            malformed=row.malformed,
        )
        out.append(record)
    return out


def _point(row: _Row, xname: str, yname: str, schema: Schema) -> tuple[float, float] | None:
    x = row.get(xname, float)
    y = row.get(yname, float)
    if x is None or y is None:
        return None
    if not (math.isfinite(x) and math.isfinite(y)):
        row.malformed = True
        return None
    if schema.lonlat:
        return project_lonlat(x, y, *schema.reference)
    return (x, y)


def parse_trip_records(
    source: TextIO, mode: str | None = None, schema: Schema | None = None
) -> list[TripRecord]:
    """Read OD trip rows.

    ``mode`` tags every record; when omitted the file's mode column is used.
    Bus records never carry a destination or arrival time, since only
    boarding swipes exist for that mode.
    """
    schema = schema or trip_schema()
    if mode is not None and mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    mandatory = list(_MANDATORY_TRIP) + ([] if mode is not None else ["mode"])
    reader = _reader(source, schema, mandatory)
    out = []
    for raw in reader:
        row = _Row(raw, schema.columns)
        rec_mode = mode if mode is not None else (row.raw("mode") or "")
        if rec_mode not in MODES:
            row.malformed = True
        origin = _point(row, "o_x", "o_y", schema)
        depart = row.get("depart_time", parse_timestamp)
        if rec_mode == "bus":
            destination, arrive = None, None
        else:
            destination = _point(row, "d_x", "d_y", schema)
            arrive = row.get("arrive_time", parse_timestamp)
        out.append(TripRecord(rec_mode, origin, destination, depart, arrive, row.malformed))
    return out


# -- validation ------------------------------------------------------------


def _parking_status(rec: ParkingRecord, span) -> str:
    if rec.malformed:
        return "invalid"
    if any(getattr(rec, name) is None for name in _MANDATORY_PARKING):
        return "missing"
    if rec.departure <= rec.arrival or rec.capacity < 1:
        return "invalid"
    if span is not None:
        start, end = span
        if rec.arrival < start or rec.departure > end:
            return "invalid"
    return "ok"


def _trip_status(rec: TripRecord, span) -> str:
    if rec.malformed or rec.mode not in MODES:
        return "invalid"
    if rec.origin is None or rec.depart_time is None:
        return "missing"
    if rec.mode != "bus":
        if rec.destination is None or rec.arrive_time is None:
            return "invalid"
        if rec.arrive_time < rec.depart_time:
            return "invalid"
    elif rec.destination is not None or rec.arrive_time is not None:
        return "invalid"
    if span is not None:
        start, end = span
        last = rec.arrive_time if rec.arrive_time is not None else rec.depart_time
        if rec.depart_time < start or last > end:
            return "invalid"
    return "ok"


def validate_and_drop(
    records: Iterable, span: tuple[int, int] | None = None
) -> tuple[list, DropReport]:
    """Keep only records that satisfy their type invariants.

    ``span`` optionally bounds the dataset period as ``(start, end)`` seconds;
    records reaching outside it count as invalid.
    """
    kept = []
    missing = invalid = total = 0
    for rec in records:
        total += 1
        if isinstance(rec, ParkingRecord):
            status = _parking_status(rec, span)
        elif isinstance(rec, TripRecord):
            status = _trip_status(rec, span)
        else:
            raise TypeError(f"cannot validate {type(rec).__name__}")
        if status == "ok":
            kept.append(rec)
        elif status == "missing":
            missing += 1
        else:
            invalid += 1
    return kept, DropReport(total, missing, invalid, len(kept))


def parse_lot_locations(source: TextIO, delimiter: str = ",") -> dict[str, tuple[float, float]]:
    """Read ``lot_id,x,y`` rows (projected meters) into a lookup."""
    reader = csv.DictReader(source, delimiter=delimiter)
    missing = [c for c in ("lot_id", "x", "y") if c not in (reader.fieldnames or [])]
    if missing:
        raise SchemaError(f"lot location file lacks column(s): {', '.join(missing)}")
    out = {}
    for row in reader:
        out[row["lot_id"].strip()] = (float(row["x"]), float(row["y"]))
    return out


# -- serialization ---------------------------------------------------------


def _fmt_float(v: float) -> str:
    return repr(float(v))


def write_parking_records(records: Iterable[ParkingRecord], sink: TextIO, schema: Schema | None = None) -> None:
    schema = schema or parking_schema()
    cols = schema.columns
    writer = csv.writer(sink, delimiter=schema.delimiter, lineterminator="\n")
    writer.writerow([cols[n] for n in _MANDATORY_PARKING])
    for r in records:
        writer.writerow(
            [
                r.lot_id,
                format_timestamp(r.arrival),
                format_timestamp(r.departure),
                r.date.isoformat(),
                r.capacity,
            ]
        )


def write_trip_records(records: Iterable[TripRecord], sink: TextIO, schema: Schema | None = None) -> None:
    schema = schema or trip_schema()
    cols = schema.columns
    order = ("mode", "o_x", "o_y", "d_x", "d_y", "depart_time", "arrive_time")
    writer = csv.writer(sink, delimiter=schema.delimiter, lineterminator="\n")
    writer.writerow([cols[n] for n in order])
    for r in records:
        dest = r.destination
        writer.writerow(
            [
                r.mode,
                _fmt_float(r.origin[0]),
                _fmt_float(r.origin[1]),
                "" if dest is None else _fmt_float(dest[0]),
                "" if dest is None else _fmt_float(dest[1]),
                format_timestamp(r.depart_time),
                "" if r.arrive_time is None else format_timestamp(r.arrive_time),
            ]
        )


def write_lot_locations(locations: dict[str, tuple[float, float]], sink: TextIO) -> None:
    writer = csv.writer(sink, lineterminator="\n")
    writer.writerow(["lot_id", "x", "y"])
    for lot in sorted(locations):
        x, y = locations[lot]
        writer.writerow([lot, _fmt_float(x), _fmt_float(y)])
