"""Track-error metrics, reference forecasts and comparison tables.

MAE is in degrees: the mean of |dlat| and |dlon| per sample, averaged over
samples. Longitude differences are wrapped into [-180, 180].
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .features import CADENCE, Window, wrap_lon
from .hurdat2 import StormId

EARTH_RADIUS_KM = 6371.0
HOURS_PER_STEP = int(CADENCE.total_seconds() // 3600)

Forecaster = Callable[[Sequence[Window]], np.ndarray]


class NoData(ValueError):
    pass


class InsufficientHistory(ValueError):
    pass


def delta_r(pred, truth) -> float:
    """Great-circle distance in km between two (lat, lon) points in degrees.

    Spherical law of cosines with the cosine clamped to [-1, 1].
    """
    lat_p, lon_p = float(pred[0]), float(pred[1])
    lat_r, lon_r = float(truth[0]), float(truth[1])
    if lat_p == lat_r and lon_p == lon_r:
        return 0.0
    phi_p, phi_r = math.radians(lat_p), math.radians(lat_r)
    cos_c = (math.sin(phi_p) * math.sin(phi_r)
             + math.cos(phi_p) * math.cos(phi_r) * math.cos(math.radians(lon_p - lon_r)))
    return EARTH_RADIUS_KM * math.acos(min(1.0, max(-1.0, cos_c)))


def delta_r_array(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Vectorized ``delta_r`` over matching ``(..., 2)`` arrays."""
    pred, truth = np.asarray(pred, float), np.asarray(truth, float)
    phi_p, phi_r = np.radians(pred[..., 0]), np.radians(truth[..., 0])
    cos_c = (np.sin(phi_p) * np.sin(phi_r)
             + np.cos(phi_p) * np.cos(phi_r) * np.cos(np.radians(pred[..., 1] - truth[..., 1])))
    out = EARTH_RADIUS_KM * np.arccos(np.clip(cos_c, -1.0, 1.0))
    same = (pred[..., 0] == truth[..., 0]) & (pred[..., 1] == truth[..., 1])
    return np.where(same, 0.0, out)


def lon_diff(a, b):
    d = np.asarray(a, float) - np.asarray(b, float)
    return (d + 180.0) % 360.0 - 180.0


@dataclass(frozen=True)
class ForecastResult:
    storm: StormId
    issued: object  # datetime of the last observed record
    predicted: np.ndarray  # (K, 2) degrees
    truth: np.ndarray  # (K, 2) degrees

    @property
    def K(self) -> int:
        return self.predicted.shape[0]

    def abs_errors(self) -> np.ndarray:
        """(K,) mean of |dlat| and |dlon| per horizon."""
        dlat = np.abs(self.predicted[:, 0] - self.truth[:, 0])
        dlon = np.abs(lon_diff(self.predicted[:, 1], self.truth[:, 1]))
        return (dlat + dlon) / 2.0

    def distances(self) -> np.ndarray:
        return delta_r_array(self.predicted, self.truth)


def results_for(windows: Sequence[Window], predictions: np.ndarray) -> list[ForecastResult]:
    return [
        ForecastResult(w.storm, w.last_record.timestamp, np.asarray(p), w.targets)
        for w, p in zip(windows, predictions)
    ]


def mae(results: Sequence[ForecastResult]) -> np.ndarray:
    """Per-horizon MAE in degrees."""
    if not results:
        raise NoData("no forecasts to score")
    return np.mean([r.abs_errors() for r in results], axis=0)


def mean_delta_r(results: Sequence[ForecastResult]) -> np.ndarray:
    """Per-horizon mean great-circle error in km."""
    if not results:
        raise NoData("no forecasts to score")
    return np.mean([r.distances() for r in results], axis=0)


# -- reference forecasts ---------------------------------------------------

def persistence(window: Window, K: int | None = None) -> np.ndarray:
    """Every horizon at the last observed position."""
    K = window.targets.shape[0] if K is None else K
    return np.tile(window.last_position, (K, 1))


def cliper_lite(window: Window, K: int | None = None, max_steps: int = 4) -> np.ndarray:
    """Constant-motion extrapolation of the mean recent 6-hourly displacement.

    A motion-persistence stand-in for CLIPER: the real model's regression
    coefficients are not used here.
    """
    K = window.targets.shape[0] if K is None else K
    pos = window.input_positions
    if pos.shape[0] < 2:
        raise InsufficientHistory("cliper_lite needs at least 2 observed steps")
    n = min(max_steps, pos.shape[0] - 1)
    last = pos[-1]
    v = np.array([last[0] - pos[-1 - n][0], lon_diff(last[1], pos[-1 - n][1])]) / n
    steps = np.arange(1, K + 1)[:, None]
    out = last + steps * v
    out[:, 1] = wrap_lon(out[:, 1])
    return out


def per_window(fn: Callable[[Window], np.ndarray]) -> Forecaster:
    def run(windows: Sequence[Window]) -> np.ndarray:
        return np.stack([fn(w) for w in windows]) if windows else np.zeros((0, 0, 2))
    return run


# -- tables --------------------------------------------------------------------

@dataclass
class MetricTable:
    """Per model and horizon: MAE (degrees), mean delta R (km) and sample count."""

    horizons_h: list[int]
    mae: dict[str, list[float]] = field(default_factory=dict)
    delta_r: dict[str, list[float]] = field(default_factory=dict)
    n: dict[str, int] = field(default_factory=dict)
    split: str = "All"

    @property
    def models(self) -> list[str]:
        return list(self.mae)

    def add(self, name: str, results: Sequence[ForecastResult]) -> None:
        self.mae[name] = [float(v) for v in mae(results)]
        self.delta_r[name] = [float(v) for v in mean_delta_r(results)]
        self.n[name] = len(results)

    def rows(self) -> list[tuple[str, int, str, float, int]]:
        """Long format: ``(model, horizon_h, metric, value, n)``."""
        out = []
        for name in self.models:
            for metric, table in (("MAE_deg", self.mae), ("dR_km", self.delta_r)):
                for h, value in zip(self.horizons_h, table[name]):
                    out.append((name, h, metric, value, self.n[name]))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model", "horizon_h", "metric", "value", "n"])
        for name, h, metric, value, n in self.rows():
            w.writerow([name, h, metric, f"{value:.6f}", n])
        return buf.getvalue()

    def to_wide_csv(self) -> str:
        """One row per model: MAE at each horizon, then delta R at each horizon."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        hs = self.horizons_h
        w.writerow(["split", "model", *(f"MAE_{h}h" for h in hs), *(f"dR_km_{h}h" for h in hs), "n"])
        for name in self.models:
            w.writerow([self.split, name, *(f"{v:.3f}" for v in self.mae[name]),
                        *(f"{v:.3f}" for v in self.delta_r[name]), self.n[name]])
        return buf.getvalue()

    def to_text(self) -> str:
        """Fixed-width layout: models x horizons x {MAE, delta R}."""
        hs = self.horizons_h
        name_w = max([len("Models")] + [len(m) for m in self.models]) + 2
        head1 = (f"{'':<{name_w}}" + f"{'MAE (' + self.split + ', deg)':^{9 * len(hs)}}"
                 + f"{'dR (km) (' + self.split + ')':^{10 * len(hs)}}")
        head2 = (f"{'Models':<{name_w}}" + "".join(f"{str(h) + 'h':>9}" for h in hs)
                 + "".join(f"{str(h) + 'h':>10}" for h in hs))
        lines = [head1, head2, "-" * len(head2)]
        for name in self.models:
            lines.append(f"{name:<{name_w}}" + "".join(f"{v:>9.3f}" for v in self.mae[name])
                         + "".join(f"{v:>10.3f}" for v in self.delta_r[name]))
        return "\n".join(lines) + "\n"


def evaluate_models(
    models: Mapping[str, Forecaster],
    windows: Sequence[Window],
    years: Iterable[int] | None = None,
    split: str | None = None,
) -> MetricTable:
    """Score every forecaster on the same windows (optionally one set of years)."""
    if years is not None:
        keep = set(years)
        windows = [w for w in windows if w.storm.year in keep]
        split = split or ",".join(str(y) for y in sorted(keep))
    if not windows:
        raise NoData("no windows to evaluate")
    K = windows[0].targets.shape[0]
    table = MetricTable([HOURS_PER_STEP * k for k in range(1, K + 1)], split=split or "All")
    for name, fn in models.items():
        table.add(name, results_for(windows, fn(windows)))
    return table


def forecast_rows(windows: Sequence[Window], forecasts: Mapping[str, np.ndarray]) -> list[dict]:
    """Flat per-window, per-horizon rows for forecast dumps."""
    rows = []
    for i, w in enumerate(windows):
        for name, pred in forecasts.items():
            for k in range(pred.shape[1]):
                rows.append({
                    "storm": w.storm.key,
                    "issued": f"{w.last_record.timestamp:%Y%m%d%H%M}",
                    "model": name,
                    "horizon_h": HOURS_PER_STEP * (k + 1),
                    "lat": repr(float(pred[i, k, 0])),
                    "lon": repr(float(pred[i, k, 1])),
                    "true_lat": repr(float(w.targets[k, 0])),
                    "true_lon": repr(float(w.targets[k, 1])),
                })
    return rows
