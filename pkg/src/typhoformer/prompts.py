"""Rule-based contextual prompts for storm records, plus the prompt cache file.

Radii are echoed as stored (nautical miles in HURDAT2) but labelled "km", so
the text matches the reference phrasing the model was designed around.

Cache file lines look like ``AL142024_MILTON|202410100030|<text>``.
"""

from __future__ import annotations

from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Iterable, Mapping

from .hurdat2 import QUADRANTS, StormId, StormRecord

STATUS_NAMES = {
    "HU": "Hurricane",
    "TS": "Tropical Storm",
    "TD": "Tropical Depression",
    "EX": "Extratropical Cyclone",
    "SS": "Subtropical Storm",
    "SD": "Subtropical Depression",
    "LO": "Low",
    "WV": "Tropical Wave",
    "DB": "Disturbance",
}
_QUAD_WORDS = {"ne": "northeast", "se": "southeast", "sw": "southwest", "nw": "northwest"}
_MONTHS = (
    "January", "February", "March", "April", "May", "June", "July",
    "August", "September", "October", "November", "December",
)
_TS_FORMAT = "%Y%m%d%H%M"


class PromptFileError(ValueError):
    pass


class MalformedPromptFile(PromptFileError):
    def __init__(self, line_no: int, reason: str):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {reason}")


class DuplicateKey(PromptFileError):
    def __init__(self, line_no: int, key: str):
        self.line_no = line_no
        self.key = key
        super().__init__(f"line {line_no}: duplicate prompt key {key}")


@dataclass(frozen=True)
class PromptText:
    storm: StormId
    timestamp: datetime
    text: str

    @property
    def key(self) -> tuple[StormId, datetime]:
        return (self.storm, self.timestamp)


def _num(value: float) -> str:
    return str(int(value)) if float(value).is_integer() else repr(float(value))


def _coord(value: float, pos: str, neg: str) -> str:
    text = f"{abs(value):.1f}"
    if float(text) != abs(value):
        text = repr(abs(value))
    return f"{text}°{neg if value < 0 else pos}"


def _quadrant_phrase(values: dict[str, float]) -> str:
    """Describe per-quadrant radii, collapsing equal neighbours."""
    q = {k: _num(v) for k, v in values.items()}
    if len(q) == 4:
        ne, se, sw, nw = (q[k] for k in QUADRANTS)
        if ne == se == sw == nw:
            return f"{ne} km in all four quadrants"
        if ne == se:
            if sw == nw:
                return (f"{ne} km in both the northeast and southeast, "
                        f"and {sw} km in both the southwest and northwest")
            return (f"{ne} km in both the northeast and southeast, and {sw} km and "
                    f"{nw} km in the southwest and northwest quadrants, respectively")
    parts = [f"{v} km in the {_QUAD_WORDS[k]}" for k, v in q.items()]
    parts[0] += " quadrant"
    if len(parts) == 1:
        return parts[0]
    if len(parts) == 2:
        return f"{parts[0]} and {parts[1]}"
    return ", ".join(parts[:-1]) + f", and {parts[-1]}"


def _radii(record: StormRecord, threshold: int) -> dict[str, float]:
    values = getattr(record, f"wind_radii_{threshold}")
    return {
        q: v for q, v in zip(QUADRANTS, values)
        if not record.is_missing(f"r{threshold}_{q}")
    }


def render_prompt_text(storm: StormId, record: StormRecord) -> str:
    ts = record.timestamp
    kind = STATUS_NAMES.get(record.status, record.status)
    sentences = [
        f"At {ts:%H:%M} UTC on {_MONTHS[ts.month - 1]} {ts.day}, {ts.year}, "
        f"{kind} {storm.name} ({storm.code}) was located at "
        f"{_coord(record.lat_deg, 'N', 'S')}, {_coord(record.lon_deg, 'E', 'W')}."
    ]

    clauses = []
    if not record.is_missing("max_wind_kt"):
        clauses.append(f"maximum sustained winds of {_num(record.max_wind_kt)} knots")
    if not record.is_missing("min_pressure_mb"):
        clauses.append(f"a central pressure of {_num(record.min_pressure_mb)} hPa")
    if clauses:
        sentences.append(f"The storm had {' and '.join(clauses)}.")

    r34, r50, r64 = _radii(record, 34), _radii(record, 50), _radii(record, 64)
    if r34:
        sentences.append(f"The radius of 34-knot winds extended {_quadrant_phrase(r34)}.")
    if r50:
        lead = "Meanwhile, the" if r34 else "The"
        sentences.append(f"{lead} radius of 50-knot winds reached {_quadrant_phrase(r50)}.")
    if r64:
        sentences.append(
            f"For 64-knot hurricane-force winds, the extent was {_quadrant_phrase(r64)}."
        )
    if not record.is_missing("radius_max_wind"):
        sentences.append(
            f"The radius of the eye was estimated at {_num(record.radius_max_wind)} km."
        )
    return " ".join(sentences)


def generate_prompt(storm: StormId, record: StormRecord) -> PromptText:
    return PromptText(storm, record.timestamp, render_prompt_text(storm, record))


def format_prompt_line(prompt: PromptText) -> str:
    text = " ".join(prompt.text.split())
    return f"{prompt.storm.key}|{prompt.timestamp:{_TS_FORMAT}}|{text}"


def parse_prompt_lines(lines: Iterable[str]) -> dict[tuple[StormId, datetime], PromptText]:
    prompts: dict[tuple[StormId, datetime], PromptText] = {}
    for line_no, raw in enumerate(lines, start=1):
        line = raw.rstrip("\r\n")
        if not line.strip():
            continue
        parts = line.split("|", 2)
        if len(parts) != 3:
            raise MalformedPromptFile(line_no, "expected KEY|YYYYMMDDHHMM|TEXT")
        key, stamp, text = (p.strip() for p in parts)
        try:
            storm = StormId.from_key(key)
            timestamp = datetime.strptime(stamp, _TS_FORMAT)
        except ValueError as exc:
            raise MalformedPromptFile(line_no, str(exc)) from None
        if len(stamp) != 12:
            raise MalformedPromptFile(line_no, f"bad timestamp {stamp!r}")
        if not text:
            raise MalformedPromptFile(line_no, "empty prompt text")
        if (storm, timestamp) in prompts:
            raise DuplicateKey(line_no, f"{key}|{stamp}")
        prompts[(storm, timestamp)] = PromptText(storm, timestamp, text)
    return prompts


def load_prompts(path: str | Path) -> dict[tuple[StormId, datetime], PromptText]:
    """Read a prompt cache file. An empty file yields an empty map."""
    with open(path, encoding="utf-8") as fh:
        return parse_prompt_lines(fh)


def write_prompts(path: str | Path, prompts: Iterable[PromptText]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for p in prompts:
            fh.write(format_prompt_line(p) + "\n")
            n += 1
    return n


def resolve_prompt(
    storm: StormId,
    record: StormRecord,
    cache: Mapping[tuple[StormId, datetime], PromptText] | None = None,
) -> PromptText:
    """Cached prompt if one was imported for this record, else the template."""
    if cache:
        hit = cache.get((storm, record.timestamp))
        if hit is not None:
            return hit
    return generate_prompt(storm, record)
