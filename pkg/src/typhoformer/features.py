"""Feature vectors, normalization, sliding windows and the year split."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from datetime import timedelta
from typing import Iterable, Sequence

import numpy as np

from .hurdat2 import QUADRANTS, StormId, StormRecord, StormTrack

log = logging.getLogger(__name__)

FEATURE_NAMES: tuple[str, ...] = (
    "lat",
    "lon",
    "max_wind",
    "min_pressure",
    *(f"r34_{q}" for q in QUADRANTS),
    *(f"r50_{q}" for q in QUADRANTS),
    *(f"r64_{q}" for q in QUADRANTS),
    "rmw",
    "sin_hour",
    "cos_hour",
    "sin_doy",
    "cos_doy",
    "landfall_flag",
)
N_FEATURES = len(FEATURE_NAMES)
LAT, LON = 0, 1

CADENCE = timedelta(hours=6)
DEFAULT_HISTORY = 8
DEFAULT_HORIZONS = 4
TRAIN_YEARS = (2004, 2021)
TEST_YEARS = (2022, 2024)

_DAYS_PER_YEAR = 365.25


class EmptyTrainingSet(ValueError):
    pass


def extract_features(record: StormRecord) -> np.ndarray:
    """Map a record to its 22 raw (unnormalized) feature values."""
    ts = record.timestamp
    hour = ts.hour + ts.minute / 60.0
    hour_angle = 2.0 * math.pi * hour / 24.0
    doy = ts.timetuple().tm_yday - 1 + hour / 24.0
    doy_angle = 2.0 * math.pi * doy / _DAYS_PER_YEAR
    values = [
        record.lat_deg,
        record.lon_deg,
        *record.numeric_values(),
        math.sin(hour_angle),
        math.cos(hour_angle),
        math.sin(doy_angle),
        math.cos(doy_angle),
        1.0 if record.is_landfall else 0.0,
    ]
    return np.asarray(values, dtype=np.float64)


@dataclass(frozen=True)
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray

    def normalize(self, values: np.ndarray) -> np.ndarray:
        return (values - self.mean) / self.std

    def denormalize(self, values: np.ndarray) -> np.ndarray:
        return values * self.std + self.mean

    @property
    def position_mean(self) -> np.ndarray:
        return self.mean[[LAT, LON]]

    @property
    def position_std(self) -> np.ndarray:
        return self.std[[LAT, LON]]


def fit_normalization(tracks: Iterable[StormTrack]) -> NormalizationStats:
    """Population mean/std per feature; zero-variance features get std 1.

    Records are sorted before reduction so the result does not depend on
    the order the tracks arrive in.
    """
    rows = sorted(
        (tuple(extract_features(r)) for t in tracks for r in t.records),
    )
    if not rows:
        raise EmptyTrainingSet("no records to fit normalization on")
    matrix = np.asarray(rows, dtype=np.float64)
    mean = matrix.mean(axis=0)
    std = matrix.std(axis=0)
    std[~(std > 0)] = 1.0
    return NormalizationStats(mean=mean, std=std)


@dataclass(frozen=True)
class Window:
    """T observed steps of one storm and the K positions that follow."""

    storm: StormId
    inputs: np.ndarray  # (T, N_FEATURES), raw
    input_records: tuple[StormRecord, ...]
    targets: np.ndarray  # (K, 2) lat/lon degrees
    target_records: tuple[StormRecord, ...] = ()

    @property
    def last_record(self) -> StormRecord:
        return self.input_records[-1]

    @property
    def last_position(self) -> np.ndarray:
        r = self.last_record
        return np.array([r.lat_deg, r.lon_deg])

    @property
    def input_positions(self) -> np.ndarray:
        return self.inputs[:, [LAT, LON]]

    @property
    def year(self) -> int:
        return self.last_record.timestamp.year


def wrap_lon(lon: np.ndarray) -> np.ndarray:
    """Map longitudes into (-180, 180]."""
    lon = np.asarray(lon, dtype=np.float64)
    wrapped = np.mod(lon + 180.0, 360.0) - 180.0
    wrapped = np.where(wrapped == -180.0, 180.0, wrapped)
    # in-range values pass through untouched (keeps persistence bit-exact)
    return np.where((lon > -180.0) & (lon <= 180.0), lon, wrapped)


def cadence_records(track: StormTrack) -> list[StormRecord]:
    """Records that fall on the synoptic 00/06/12/18 UTC cadence."""
    return [r for r in track.records if r.is_synoptic]


def make_windows(
    tracks: Iterable[StormTrack],
    T: int = DEFAULT_HISTORY,
    K: int = DEFAULT_HORIZONS,
) -> list[Window]:
    if T < 1 or K < 1:
        raise ValueError("T and K must be >= 1")
    windows: list[Window] = []
    span = T + K
    for track in tracks:
        recs = cadence_records(track)
        if len(recs) < span:
            continue
        # gap_ok[i] is True when recs[i+1] follows recs[i] by exactly one step
        gap_ok = [b.timestamp - a.timestamp == CADENCE for a, b in zip(recs, recs[1:])]
        feats = np.stack([extract_features(r) for r in recs])
        for start in range(len(recs) - span + 1):
            if not all(gap_ok[start:start + span - 1]):
                continue
            inp = recs[start:start + T]
            tgt = recs[start + T:start + span]
            windows.append(
                Window(
                    storm=track.id,
                    inputs=feats[start:start + T].copy(),
                    input_records=tuple(inp),
                    targets=np.array([[r.lat_deg, r.lon_deg] for r in tgt]),
                    target_records=tuple(tgt),
                )
            )
    return windows


def split_by_year(
    tracks: Sequence[StormTrack],
    train_years: tuple[int, int] = TRAIN_YEARS,
    test_years: tuple[int, int] = TEST_YEARS,
) -> tuple[list[StormTrack], list[StormTrack], int]:
    """Split on storm year (inclusive ranges). Returns ``(train, test, n_dropped)``."""
    train, test, dropped = [], [], 0
    for t in tracks:
        y = t.id.year
        if train_years[0] <= y <= train_years[1]:
            train.append(t)
        elif test_years[0] <= y <= test_years[1]:
            test.append(t)
        else:
            dropped += 1
    if dropped:
        log.warning("split_by_year: dropped %d storms outside %s/%s", dropped, train_years, test_years)
    return train, test, dropped
