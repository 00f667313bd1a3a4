import logging
import math
import random
from dataclasses import replace
from datetime import datetime, timedelta

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import MILTON_LINE
from typhoformer.features import (
    FEATURE_NAMES,
    N_FEATURES,
    EmptyTrainingSet,
    extract_features,
    fit_normalization,
    make_windows,
    split_by_year,
    wrap_lon,
)
from typhoformer.hurdat2 import StormId, StormTrack, parse_merged_line

STEP = timedelta(hours=6)


def track_of(n: int, base, storm=StormId("AL", 1, 2010, "TEST"), start=datetime(2010, 8, 1)) -> StormTrack:
    return StormTrack(storm, tuple(
        replace(base, timestamp=start + k * STEP, record_id=None, lat_deg=10 + 0.1 * k, lon_deg=-50 - 0.2 * k)
        for k in range(n)
    ))


def test_feature_layout():
    assert N_FEATURES == 22
    assert FEATURE_NAMES[:4] == ("lat", "lon", "max_wind", "min_pressure")
    assert FEATURE_NAMES[16] == "rmw"
    assert FEATURE_NAMES[-1] == "landfall_flag"


def test_milton_features(milton_record):
    v = extract_features(milton_record)
    assert v.shape == (22,)
    assert (v[0], v[1], v[2], v[3], v[16]) == (27.4, -82.6, 100, 958, 20)
    assert list(v[4:8]) == [180, 170, 110, 220]
    assert v[21] == 1.0


def test_phase_zero(milton_record):
    v = extract_features(replace(milton_record, timestamp=datetime(2021, 1, 1)))
    assert v[17] == 0.0 and v[18] == 1.0
    assert v[19] == pytest.approx(0.0, abs=1e-12) and v[20] == pytest.approx(1.0)


@given(st.datetimes(min_value=datetime(1900, 1, 1), max_value=datetime(2100, 1, 1)))
def test_cyclical_unit_circle(ts):
    _, rec = parse_merged_line(MILTON_LINE)
    v = extract_features(replace(rec, timestamp=ts))
    assert abs(v[17] ** 2 + v[18] ** 2 - 1) < 1e-9
    assert abs(v[19] ** 2 + v[20] ** 2 - 1) < 1e-9
    assert v[21] in (0.0, 1.0)


def test_missing_fields_contribute_zero(milton_record):
    r = replace(milton_record, min_pressure_mb=0.0, missing=frozenset({"min_pressure_mb"}))
    assert extract_features(r)[3] == 0.0


def test_normalization_degenerate(milton_record):
    t = StormTrack(StormId("AL", 1, 2010, "A"), (milton_record,))
    stats = fit_normalization([t])
    assert np.array_equal(stats.mean, extract_features(milton_record))
    assert np.all(stats.std == 1.0)


def test_normalization_population_std(milton_record):
    a = replace(milton_record, lat_deg=20.0)
    b = replace(milton_record, lat_deg=30.0, timestamp=milton_record.timestamp + STEP)
    stats = fit_normalization([StormTrack(StormId("AL", 1, 2010, "A"), (a, b))])
    assert stats.mean[0] == 25.0 and stats.std[0] == 5.0


def test_normalization_empty():
    with pytest.raises(EmptyTrainingSet):
        fit_normalization([])


def test_normalization_order_independent(fixture_tracks):
    stats = fit_normalization(fixture_tracks)
    shuffled = list(fixture_tracks)
    random.Random(5).shuffle(shuffled)
    other = fit_normalization(shuffled)
    assert np.max(np.abs(stats.mean - other.mean)) <= 1e-12
    assert np.max(np.abs(stats.std - other.std)) <= 1e-12
    assert np.all(stats.std > 0)


def test_normalize_round_trip(fixture_tracks):
    stats = fit_normalization(fixture_tracks)
    v = np.random.default_rng(0).normal(size=(5, 22)) * 50
    assert np.max(np.abs(stats.denormalize(stats.normalize(v)) - v)) <= 1e-12


@pytest.mark.parametrize("n, expected", [(10, 0), (11, 0), (12, 1), (13, 2), (67, 56)])
def test_window_counts(milton_record, n, expected):
    assert len(make_windows([track_of(n, milton_record)], 8, 4)) == expected


def test_window_contents(milton_record):
    t = track_of(14, milton_record)
    ws = make_windows([t], 8, 4)
    w = ws[1]
    assert w.inputs.shape == (8, 22) and w.targets.shape == (4, 2)
    assert w.input_records == t.records[1:9]
    assert np.array_equal(w.targets, [[r.lat_deg, r.lon_deg] for r in t.records[9:13]])
    assert np.array_equal(w.last_position, [t.records[8].lat_deg, t.records[8].lon_deg])


def test_windows_follow_cadence(fixture_tracks):
    for w in make_windows(fixture_tracks, 8, 4):
        recs = (*w.input_records, *w.target_records)
        assert all(r.is_synoptic for r in recs)
        last = w.last_record.timestamp
        assert [r.timestamp - last for r in w.target_records] == [k * STEP for k in range(1, 5)]


def test_milton_landfall_excluded(milton_track):
    # 66 synoptic records (the 00:30 landfall entry is off-cadence)
    assert len(make_windows([milton_track], 8, 4)) == 66 - 12 + 1


def test_gap_breaks_windows(milton_record):
    t = track_of(24, milton_record)
    gappy = StormTrack(t.id, t.records[:12] + t.records[13:])
    # 12 before the gap -> 1 window; 11 after -> 0
    assert len(make_windows([gappy], 8, 4)) == 1


def test_make_windows_rejects_bad_sizes():
    with pytest.raises(ValueError):
        make_windows([], 0, 4)


def test_split_by_year(milton_record, caplog):
    tracks = [track_of(3, milton_record, StormId("AL", 1, y, "A"), datetime(y, 8, 1)) for y in (1999, 2004, 2021, 2022, 2024, 2025)]
    with caplog.at_level(logging.WARNING):
        train, test, dropped = split_by_year(tracks)
    assert [t.id.year for t in train] == [2004, 2021]
    assert [t.id.year for t in test] == [2022, 2024]
    assert dropped == 2
    assert "dropped 2" in caplog.text


def test_fixture_split(fixture_tracks):
    train, test, dropped = split_by_year(fixture_tracks)
    assert (len(train), len(test), dropped) == (54, 9, 1)


@given(st.floats(min_value=-1000, max_value=1000, allow_nan=False))
def test_wrap_lon_range(x):
    w = float(wrap_lon(x))
    assert -180 < w <= 180
    assert math.isclose(math.cos(math.radians(w)), math.cos(math.radians(x)), abs_tol=1e-9)
    if -180 < x <= 180:
        assert w == x
