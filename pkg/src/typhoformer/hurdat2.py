"""HURDAT2 best-track reader and writer.

Two line layouts are understood:

* the NHC file layout, a header line ``AL142024,  MILTON,  67,`` followed by
  that many data lines ``YYYYMMDD, HHMM, I, SS, LL.LH, LLL.LH, W, P, r34x4,
  r50x4, r64x4[, RMW]``;
* a merged single-line layout where the storm key is folded into the first
  field: ``AL142024_MILTON,20241010,0030,L,HU,27.4N,82.6W,...`` (22 fields).

Latitudes are stored north-positive, longitudes east-positive in (-180, 180].
The ``-999`` sentinel (or a blank field) becomes ``0.0`` with the field name
recorded in ``StormRecord.missing``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from datetime import datetime
from typing import Iterable, Sequence

BASINS = ("AL", "EP", "CP")
QUADRANTS = ("ne", "se", "sw", "nw")
MISSING_SENTINEL = -999

# Order of the numeric fields as they appear in a data line.
NUMERIC_FIELDS: tuple[str, ...] = (
    "max_wind_kt",
    "min_pressure_mb",
    *(f"r34_{q}" for q in QUADRANTS),
    *(f"r50_{q}" for q in QUADRANTS),
    *(f"r64_{q}" for q in QUADRANTS),
    "radius_max_wind",
)

_STORM_CODE = re.compile(r"^([A-Z]{2})(\d{2})(\d{4})$")
_LAT = re.compile(r"^(\d{1,2}(?:\.\d+)?)([NS])$")
_LON = re.compile(r"^(\d{1,3}(?:\.\d+)?)([EW])$")
_DATE = re.compile(r"^\d{8}$")
_TIME = re.compile(r"^\d{4}$")


class HurdatError(ValueError):
    """Base class for every parse failure; always carries a 1-based line number."""

    def __init__(self, line_no: int, message: str):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {message}")


class MalformedLine(HurdatError):
    def __init__(self, line_no: int, reason: str):
        self.reason = reason
        super().__init__(line_no, reason)


class CountMismatch(HurdatError):
    def __init__(self, storm_id: "StormId", declared: int, actual: int, line_no: int):
        self.storm_id = storm_id
        self.declared = declared
        self.actual = actual
        super().__init__(
            line_no, f"{storm_id.code} declares {declared} records, found {actual}"
        )


class NonChronological(HurdatError):
    def __init__(self, storm_id: "StormId", line_no: int):
        self.storm_id = storm_id
        super().__init__(line_no, f"{storm_id.code}: timestamp not strictly increasing")


@dataclass(frozen=True, order=True)
class StormId:
    basin: str
    number: int
    year: int
    name: str = "UNNAMED"

    def __post_init__(self):
        if self.basin not in BASINS:
            raise ValueError(f"unknown basin {self.basin!r}")
        if not 1 <= self.number <= 99:
            raise ValueError(f"storm number out of range: {self.number}")
        if not 1000 <= self.year <= 9999:
            raise ValueError(f"year must have 4 digits: {self.year}")

    @property
    def code(self) -> str:
        """ATCF-style identifier, e.g. ``AL142024``."""
        return f"{self.basin}{self.number:02d}{self.year:04d}"

    @property
    def key(self) -> str:
        """Code and name joined the way the merged layout writes them."""
        return f"{self.code}_{self.name}"

    def __str__(self) -> str:
        return self.key

    @classmethod
    def from_code(cls, code: str, name: str = "UNNAMED") -> "StormId":
        m = _STORM_CODE.match(code.strip())
        if not m:
            raise ValueError(f"bad storm code {code!r}")
        return cls(m.group(1), int(m.group(2)), int(m.group(3)), name.strip().upper())

    @classmethod
    def from_key(cls, key: str) -> "StormId":
        code, sep, name = key.strip().partition("_")
        return cls.from_code(code, name if sep else "UNNAMED")


@dataclass(frozen=True)
class StormRecord:
    timestamp: datetime
    record_id: str | None
    status: str
    lat_deg: float
    lon_deg: float
    max_wind_kt: float = 0.0
    min_pressure_mb: float = 0.0
    wind_radii_34: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)
    wind_radii_50: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)
    wind_radii_64: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)
    radius_max_wind: float = 0.0
    missing: frozenset[str] = field(default_factory=frozenset)

    def is_missing(self, name: str) -> bool:
        return name in self.missing

    @property
    def missing_mask(self) -> tuple[bool, ...]:
        """One flag per entry of ``NUMERIC_FIELDS``."""
        return tuple(name in self.missing for name in NUMERIC_FIELDS)

    def numeric_values(self) -> tuple[float, ...]:
        """Values in ``NUMERIC_FIELDS`` order (missing ones are 0.0)."""
        return (
            self.max_wind_kt,
            self.min_pressure_mb,
            *self.wind_radii_34,
            *self.wind_radii_50,
            *self.wind_radii_64,
            self.radius_max_wind,
        )

    @property
    def is_landfall(self) -> bool:
        return self.record_id == "L"

    @property
    def is_synoptic(self) -> bool:
        ts = self.timestamp
        return ts.minute == 0 and ts.hour % 6 == 0


@dataclass(frozen=True)
class StormTrack:
    id: StormId
    records: tuple[StormRecord, ...]

    def __post_init__(self):
        if not self.records:
            raise ValueError(f"{self.id.code}: track has no records")
        object.__setattr__(self, "records", tuple(self.records))

    def __len__(self) -> int:
        return len(self.records)


def _split_fields(line: str) -> list[str]:
    fields = [f.strip() for f in line.split(",")]
    # NHC lines end with a trailing comma.
    if fields and fields[-1] == "":
        fields.pop()
    return fields


def _parse_number(text: str, name: str, line_no: int) -> tuple[float, bool]:
    if text == "":
        return 0.0, True
    try:
        value = float(text)
    except ValueError:
        raise MalformedLine(line_no, f"unparseable {name}: {text!r}") from None
    if value != value or value in (float("inf"), float("-inf")):
        raise MalformedLine(line_no, f"non-finite {name}: {text!r}")
    if value == MISSING_SENTINEL:
        return 0.0, True
    return value, False


def _parse_lat(text: str, line_no: int) -> float:
    m = _LAT.match(text)
    if not m:
        raise MalformedLine(line_no, f"bad latitude {text!r}")
    value = float(m.group(1))
    if value > 90.0:
        raise MalformedLine(line_no, f"latitude out of range: {text!r}")
    return -value if m.group(2) == "S" else value


def _parse_lon(text: str, line_no: int) -> float:
    m = _LON.match(text)
    if not m:
        raise MalformedLine(line_no, f"bad longitude {text!r}")
    value = float(m.group(1))
    if value > 180.0:
        raise MalformedLine(line_no, f"longitude out of range: {text!r}")
    value = -value if m.group(2) == "W" else value
    return 180.0 if value == -180.0 else value


def _parse_data_fields(fields: Sequence[str], line_no: int) -> StormRecord:
    """Parse the 20 (no RMW) or 21 standard data fields."""
    if len(fields) not in (20, 21):
        raise MalformedLine(line_no, f"expected 20 or 21 data fields, got {len(fields)}")
    date, hhmm, rec_id, status, lat, lon = fields[:6]
    if not _DATE.match(date) or not _TIME.match(hhmm):
        raise MalformedLine(line_no, f"bad date/time {date!r} {hhmm!r}")
    try:
        timestamp = datetime(
            int(date[:4]), int(date[4:6]), int(date[6:]), int(hhmm[:2]), int(hhmm[2:])
        )
    except ValueError as exc:
        raise MalformedLine(line_no, f"invalid date/time: {exc}") from None
    if len(rec_id) > 1 or (rec_id and not rec_id.isalpha()):
        raise MalformedLine(line_no, f"bad record identifier {rec_id!r}")
    if not (len(status) == 2 and status.isalpha()):
        raise MalformedLine(line_no, f"bad status {status!r}")

    numbers = list(fields[6:])
    if len(numbers) == 14:
        numbers.append("")  # pre-RMW layout
    values: list[float] = []
    missing: set[str] = set()
    for name, text in zip(NUMERIC_FIELDS, numbers):
        value, is_missing = _parse_number(text, name, line_no)
        if is_missing:
            missing.add(name)
        elif name.startswith("r") and value < 0:
            raise MalformedLine(line_no, f"negative {name}: {text!r}")
        values.append(value)

    return StormRecord(
        timestamp=timestamp,
        record_id=rec_id.upper() or None,
        status=status.upper(),
        lat_deg=_parse_lat(lat.upper(), line_no),
        lon_deg=_parse_lon(lon.upper(), line_no),
        max_wind_kt=values[0],
        min_pressure_mb=values[1],
        wind_radii_34=tuple(values[2:6]),
        wind_radii_50=tuple(values[6:10]),
        wind_radii_64=tuple(values[10:14]),
        radius_max_wind=values[14],
        missing=frozenset(missing),
    )


def _parse_header(fields: Sequence[str], line_no: int) -> tuple[StormId, int]:
    if len(fields) != 3:
        raise MalformedLine(line_no, f"header needs 3 fields, got {len(fields)}")
    code, name, count = fields
    m = _STORM_CODE.match(code)
    if not m:
        raise MalformedLine(line_no, f"bad storm code {code!r}")
    if m.group(1) not in BASINS:
        raise MalformedLine(line_no, f"unknown basin {m.group(1)!r}")
    if not count.isdecimal():
        raise MalformedLine(line_no, f"bad record count {count!r}")
    try:
        storm = StormId(m.group(1), int(m.group(2)), int(m.group(3)), (name or "UNNAMED").upper())
    except ValueError as exc:
        raise MalformedLine(line_no, str(exc)) from None
    return storm, int(count)


def _looks_like_header(fields: Sequence[str]) -> bool:
    return len(fields) == 3 and bool(_STORM_CODE.match(fields[0]))


def _finish(storm: StormId, declared: int, records: list[tuple[int, StormRecord]],
            header_line: int, end_line: int) -> StormTrack:
    if len(records) != declared:
        raise CountMismatch(storm, declared, len(records), end_line)
    if not records:
        raise MalformedLine(header_line, f"{storm.code} declares no records")
    for (_, prev), (line_no, rec) in zip(records, records[1:]):
        if rec.timestamp <= prev.timestamp:
            raise NonChronological(storm, line_no)
    return StormTrack(storm, tuple(r for _, r in records))


def parse_hurdat2(text: str) -> list[StormTrack]:
    """Parse a HURDAT2 document into one track per header line."""
    tracks: list[StormTrack] = []
    current: tuple[StormId, int, int] | None = None
    records: list[tuple[int, StormRecord]] = []
    line_no = 0

    for line_no, raw in enumerate(text.splitlines(), start=1):
        if not raw.strip():
            continue
        fields = _split_fields(raw)
        if _looks_like_header(fields):
            if current is not None:
                tracks.append(_finish(*current[:2], records, current[2], line_no))
            storm, declared = _parse_header(fields, line_no)
            current = (storm, declared, line_no)
            records = []
            continue
        if current is None:
            raise MalformedLine(line_no, "data line before any storm header")
        records.append((line_no, _parse_data_fields(fields, line_no)))

    if current is not None:
        tracks.append(_finish(*current[:2], records, current[2], line_no + 1))
    return tracks


def parse_merged_line(line: str, line_no: int = 1) -> tuple[StormId, StormRecord]:
    """Parse the single-line ``AL142024_MILTON,20241010,0030,...`` layout."""
    fields = [f.strip() for f in line.strip().split(",")]
    if len(fields) != 22:
        raise MalformedLine(line_no, f"merged line needs 22 fields, got {len(fields)}")
    try:
        storm = StormId.from_key(fields[0].upper())
    except ValueError as exc:
        raise MalformedLine(line_no, str(exc)) from None
    return storm, _parse_data_fields(fields[1:], line_no)


def _fmt_number(value: float, is_missing: bool) -> str:
    if is_missing:
        return str(MISSING_SENTINEL)
    if float(value).is_integer():
        return str(int(value))
    return repr(float(value))


def _fmt_coord(value: float, pos: str, neg: str) -> str:
    hemi = neg if value < 0 else pos
    text = repr(abs(value)) if round(abs(value), 1) != abs(value) else f"{abs(value):.1f}"
    return f"{text}{hemi}"


def render_record(record: StormRecord) -> str:
    """Render one data line in NHC spacing (comma + padded field)."""
    numbers = [
        _fmt_number(v, record.is_missing(name))
        for name, v in zip(NUMERIC_FIELDS, record.numeric_values())
    ]
    ts = record.timestamp
    head = [
        f"{ts:%Y%m%d}",
        f" {ts:%H%M}",
        f" {record.record_id or ' ':>1}",
        f" {record.status:>2}",
        f" {_fmt_coord(record.lat_deg, 'N', 'S'):>5}",
        f" {_fmt_coord(record.lon_deg, 'E', 'W'):>6}",
        f" {numbers[0]:>3}",
        f" {numbers[1]:>4}",
    ]
    tail = [f" {n:>4}" for n in numbers[2:]]
    return ",".join(head + tail) + ","


def render_header(track: StormTrack) -> str:
    return f"{track.id.code},{track.id.name:>19},{len(track.records):>7},"


def render_hurdat2(tracks: Iterable[StormTrack]) -> str:
    lines: list[str] = []
    for track in tracks:
        lines.append(render_header(track))
        lines.extend(render_record(r) for r in track.records)
    return "\n".join(lines) + ("\n" if lines else "")


def render_merged_line(storm: StormId, record: StormRecord) -> str:
    fields = [f.strip() for f in render_record(record).rstrip(",").split(",")]
    return ",".join([storm.key, *fields])
