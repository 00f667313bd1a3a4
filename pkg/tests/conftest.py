from datetime import datetime
from pathlib import Path

import pytest

from typhoformer.hurdat2 import StormId, StormRecord, parse_hurdat2

FIXTURES = Path(__file__).parent / "fixtures"

# The published single-line MILTON record (landfall, 2024-10-10 00:30 UTC).
MILTON_LINE = (
    "AL142024_MILTON,20241010,0030,L,HU,27.4N,82.6W,100,"
    "958,180,170,110,220,60,60,70,90,30,30,30,30,20"
)
MILTON_ID = StormId("AL", 14, 2024, "MILTON")


@pytest.fixture(scope="session")
def fixture_text() -> str:
    return (FIXTURES / "hurdat2_fixture.txt").read_text()


@pytest.fixture(scope="session")
def fixture_tracks(fixture_text):
    return parse_hurdat2(fixture_text)


@pytest.fixture(scope="session")
def five_tracks():
    return parse_hurdat2((FIXTURES / "five_storms.txt").read_text())


@pytest.fixture(scope="session")
def milton_track(fixture_tracks):
    return next(t for t in fixture_tracks if t.id == MILTON_ID)


@pytest.fixture
def milton_record() -> StormRecord:
    return StormRecord(
        timestamp=datetime(2024, 10, 10, 0, 30),
        record_id="L",
        status="HU",
        lat_deg=27.4,
        lon_deg=-82.6,
        max_wind_kt=100.0,
        min_pressure_mb=958.0,
        wind_radii_34=(180.0, 170.0, 110.0, 220.0),
        wind_radii_50=(60.0, 60.0, 70.0, 90.0),
        wind_radii_64=(30.0, 30.0, 30.0, 30.0),
        radius_max_wind=20.0,
    )


@pytest.fixture(scope="session")
def golden_prompt() -> str:
    return (FIXTURES / "milton_prompt.txt").read_text(encoding="utf-8")
