"""Command-line entry point: parse, prompt, train, evaluate, forecast, export-geojson.

Runs are driven by a flat ``key = value`` config file. Unknown keys are
rejected. ``TYFO_SEED`` in the environment overrides ``seed``.

Exit codes: 0 ok, 2 usage/config, 3 data error, 4 numeric divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields, replace
from datetime import datetime
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .embedding import MalformedEmbeddingFile, load_embeddings
from .evaluation import (
    HOURS_PER_STEP,
    InsufficientHistory,
    MetricTable,
    NoData,
    cliper_lite,
    evaluate_models,
    forecast_rows,
    per_window,
    persistence,
)
from .features import (
    CADENCE,
    EmptyTrainingSet,
    Window,
    cadence_records,
    extract_features,
    fit_normalization,
    make_windows,
    split_by_year,
)
from .hurdat2 import HurdatError, StormId, StormTrack, parse_hurdat2, render_hurdat2
from .model import ModelConfig, TyphoFormer
from .prompt_bank import PromptBank
from .prompts import PromptFileError, load_prompts, resolve_prompt, write_prompts
from .training import DivergedLoss, NoTrainingData, TrainConfig, train

log = logging.getLogger("typhoformer")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4

DATA_ERRORS = (
    HurdatError,
    PromptFileError,
    MalformedEmbeddingFile,
    ad.CheckpointError,
    EmptyTrainingSet,
    NoTrainingData,
    NoData,
    InsufficientHistory,
    OSError,
)

BASELINES = {
    "persistence": per_window(persistence),
    "cliper_lite": per_window(cliper_lite),
}


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


# -- run config ------------------------------------------------------------

_MODEL_KEYS = ("d_txt", "d_model", "n_layers", "n_heads", "d_ff", "T", "K", "layer_norm_eps", "prompt_mode")
_TRAIN_KEYS = ("lr", "beta1", "beta2", "adam_eps", "batch_size", "epochs", "seed",
               "grad_clip_norm", "checkpoint_every")


@dataclass
class RunConfig:
    data: str = ""
    prompts: str = ""
    embeddings: str = ""
    output_dir: str = "."
    checkpoint: str = ""
    report: str = ""
    train_years: tuple[int, int] = (2004, 2021)
    test_years: tuple[int, int] = (2022, 2024)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    base_dir: Path = Path(".")

    def path(self, value: str) -> Path:
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def checkpoint_path(self) -> Path:
        return self.path(self.checkpoint) if self.checkpoint else self.out_dir / "model.tyfo"

    @property
    def report_path(self) -> Path:
        return self.path(self.report) if self.report else self.out_dir / "train_report.csv"

    @property
    def out_dir(self) -> Path:
        return self.path(self.output_dir)


def _years(text: str) -> tuple[int, int]:
    lo, sep, hi = text.partition("-")
    a = int(lo)
    b = int(hi) if sep else a
    if a > b:
        raise ValueError(f"empty year range {text!r}")
    return a, b


def _typed(kind, text: str):
    if kind is bool:
        if text.lower() in ("1", "true", "yes"):
            return True
        if text.lower() in ("0", "false", "no"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    return kind(text)


def parse_config(text: str, base_dir: Path = Path("."), env: dict | None = None) -> RunConfig:
    """Parse ``key = value`` lines. ``#`` starts a comment."""
    env = os.environ if env is None else env
    raw: dict[str, str] = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"line {line_no}: expected 'key = value'")
        if key in raw:
            raise ConfigError(f"line {line_no}: duplicate key {key!r}")
        raw[key] = value

    known = {"data", "prompts", "embeddings", "output_dir", "checkpoint", "report",
             "train_years", "test_years", *_MODEL_KEYS, *_TRAIN_KEYS}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    if "TYFO_SEED" in env:
        raw["seed"] = env["TYFO_SEED"]

    cfg = RunConfig(base_dir=base_dir)
    model_types = {f.name: f.type for f in fields(ModelConfig)}
    model_kw, train_kw = {}, {}
    try:
        for key, value in raw.items():
            if key in ("train_years", "test_years"):
                setattr(cfg, key, _years(value))
            elif key in _MODEL_KEYS:
                kind = {"int": int, "float": float, "str": str}[model_types[key]]
                model_kw[key] = _typed(kind, value)
            elif key in _TRAIN_KEYS:
                kind = int if key in ("batch_size", "epochs", "seed", "checkpoint_every") else float
                train_kw[key] = _typed(kind, value)
            else:
                setattr(cfg, key, value)
        beta1 = train_kw.pop("beta1", TrainConfig.betas[0])
        beta2 = train_kw.pop("beta2", TrainConfig.betas[1])
        cfg.model = ModelConfig(**model_kw)
        cfg.train = TrainConfig(betas=(beta1, beta2), **train_kw)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    return parse_config(path.read_text(encoding="utf-8"), base_dir=path.parent)


# -- shared plumbing -------------------------------------------------------

def _read_tracks(path: str | Path) -> list[StormTrack]:
    return parse_hurdat2(Path(path).read_text(encoding="ascii", errors="strict"))


def _data_tracks(cfg: RunConfig) -> list[StormTrack]:
    if not cfg.data:
        raise ConfigError("config has no 'data' path")
    return _read_tracks(cfg.path(cfg.data))


def _prompt_bank(cfg: RunConfig) -> PromptBank:
    cache = load_prompts(cfg.path(cfg.prompts)) if cfg.prompts else None
    embeddings = load_embeddings(cfg.path(cfg.embeddings)) if cfg.embeddings else None
    return PromptBank(prompt_cache=cache, embeddings=embeddings, dim=cfg.model.d_txt)


def _split(cfg: RunConfig, tracks):
    train_tracks, test_tracks, _ = split_by_year(tracks, cfg.train_years, cfg.test_years)
    return train_tracks, test_tracks


def _model_forecaster(model: TyphoFormer, bank: PromptBank):
    def run(windows: Sequence[Window]) -> np.ndarray:
        return model.predict(windows, bank.window_vectors(windows, model.config.prompt_mode))
    return run


def _parse_storm(text: str) -> StormId | str:
    """``AL142024_MILTON`` gives a full id; a bare ``AL142024`` matches on code."""
    return StormId.from_key(text) if "_" in text else text.upper()


def _find_storm(tracks: Sequence[StormTrack], wanted) -> StormTrack:
    for t in tracks:
        if (t.id == wanted) if isinstance(wanted, StormId) else (t.id.code == wanted):
            return t
    raise DataError(f"storm {wanted} not found")


def _window_at(track: StormTrack, issued: datetime, T: int, K: int) -> Window:
    """Window whose last observed record is at ``issued``.

    Missing future records (end of track) leave NaN truth.
    """
    recs = cadence_records(track)
    idx = next((i for i, r in enumerate(recs) if r.timestamp == issued), None)
    if idx is None:
        raise DataError(f"{track.id.key} has no synoptic record at {issued:%Y%m%d%H%M}")
    if idx + 1 < T:
        raise DataError(f"{track.id.key}: need {T} records up to {issued:%Y%m%d%H%M}, have {idx + 1}")
    inputs = recs[idx + 1 - T: idx + 1]
    for a, b in zip(inputs, inputs[1:]):
        if b.timestamp - a.timestamp != CADENCE:
            raise DataError(f"{track.id.key}: gap in 6-hourly records before {b.timestamp:%Y%m%d%H%M}")
    targets = np.full((K, 2), np.nan)
    future = []
    for k in range(1, K + 1):
        j = idx + k
        if j < len(recs) and recs[j].timestamp == issued + k * CADENCE:
            targets[k - 1] = (recs[j].lat_deg, recs[j].lon_deg)
            future.append(recs[j])
        else:
            break
    return Window(
        storm=track.id,
        inputs=np.stack([extract_features(r) for r in inputs]),
        input_records=tuple(inputs),
        targets=targets,
        target_records=tuple(future),
    )


# -- commands --------------------------------------------------------------

def cmd_parse(args) -> int:
    tracks = _read_tracks(args.input)
    Path(args.output).write_text(render_hurdat2(tracks), encoding="ascii")
    for t in tracks:
        print(f"{t.id.code} {t.id.name} {len(t.records)}")
    print(f"{len(tracks)} storms, {sum(len(t.records) for t in tracks)} records")
    return EXIT_OK


def cmd_prompt(args) -> int:
    tracks = _read_tracks(args.input)
    cache = load_prompts(args.import_cache) if args.import_cache else None
    prompts = [resolve_prompt(t.id, r, cache) for t in tracks for r in t.records]
    n = write_prompts(args.output, prompts)
    print(f"{n} prompts written to {args.output}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    tracks = _data_tracks(cfg)
    train_tracks, _ = _split(cfg, tracks)
    if not train_tracks:
        raise NoTrainingData(f"no storms in train years {cfg.train_years}")
    stats = fit_normalization(train_tracks)
    windows = make_windows(train_tracks, cfg.model.T, cfg.model.K)
    print(f"{len(train_tracks)} train storms, {len(windows)} windows")
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = cfg.checkpoint_path
    tc = replace(cfg.train, checkpoint_path=str(ckpt))

    def show(epoch: int, value: float) -> None:
        print(f"epoch {epoch:4d}  loss {value:.6e}", flush=True)

    _, report = train(windows, _prompt_bank(cfg), cfg.model, tc, stats=stats, on_epoch=show)
    report.write_csv(cfg.report_path)
    print(f"checkpoint {ckpt}")
    print(f"report {cfg.report_path}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config)
    tracks = _data_tracks(cfg)
    _, test_tracks = _split(cfg, tracks)
    windows = make_windows(test_tracks, cfg.model.T, cfg.model.K)
    model = TyphoFormer.load(args.checkpoint, cfg.model)
    bank = _prompt_bank(cfg)
    models = {"typhoformer": _model_forecaster(model, bank), **BASELINES}
    lo, hi = cfg.test_years
    split = "All" if args.years is None else None
    table = evaluate_models(models, windows, years=args.years, split=split)

    out = Path(args.out) if args.out else cfg.out_dir / "metrics"
    out.parent.mkdir(parents=True, exist_ok=True)
    Path(f"{out}.csv").write_text(table.to_csv())
    Path(f"{out}_wide.csv").write_text(table.to_wide_csv())
    text = _table_header(table, lo, hi) + table.to_text()
    Path(f"{out}.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


def _table_header(table: MetricTable, lo: int, hi: int) -> str:
    return (
        f"# test storms {lo}-{hi}, split {table.split}, n={next(iter(table.n.values()))} windows per model\n"
        "# MAE: mean of |dlat| and |dlon| in degrees; dR: great-circle km (R=6371)\n"
        "# cliper_lite: constant-motion surrogate, not the operational CLIPER model\n"
    )


def cmd_forecast(args) -> int:
    cfg = load_config(args.config)
    tracks = _data_tracks(cfg)
    track = _find_storm(tracks, _parse_storm(args.storm))
    try:
        issued = datetime.strptime(args.start, "%Y%m%d%H%M")
    except ValueError:
        raise ConfigError(f"start must be YYYYMMDDHHMM, got {args.start!r}") from None
    window = _window_at(track, issued, cfg.model.T, cfg.model.K)
    model = TyphoFormer.load(args.checkpoint, cfg.model)
    bank = _prompt_bank(cfg)
    forecasts = {"typhoformer": _model_forecaster(model, bank)([window])}
    forecasts.update({name: fn([window]) for name, fn in BASELINES.items()})
    rows = forecast_rows([window], forecasts)
    out = sys.stdout if args.out in (None, "-") else open(args.out, "w", newline="")
    try:
        w = csv.DictWriter(out, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def _line(coords, props) -> dict:
    return {"type": "Feature", "properties": props,
            "geometry": {"type": "LineString", "coordinates": coords}}


def _point(coord, props) -> dict:
    return {"type": "Feature", "properties": props,
            "geometry": {"type": "Point", "coordinates": coord}}


def _finite(*values) -> bool:
    return all(v == v for v in values)  # NaN check


def geojson_from_forecast_rows(rows: Sequence[dict]) -> dict:
    """One LineString per (storm, issue time, model) and one for the truth,
    plus a Point per horizon. Coordinates are ``[lon, lat]``."""
    groups: dict[tuple[str, str], dict[str, list[dict]]] = {}
    for row in rows:
        groups.setdefault((row["storm"], row["issued"]), {}).setdefault(row["model"], []).append(row)
    features = []
    for (storm, issued), by_model in groups.items():
        truth: dict[int, list[float]] = {}
        for model, mrows in by_model.items():
            mrows = sorted(mrows, key=lambda r: int(r["horizon_h"]))
            coords, hours = [], []
            for r in mrows:
                h = int(r["horizon_h"])
                lat, lon = float(r["lat"]), float(r["lon"])
                coords.append([lon, lat])
                hours.append(h)
                features.append(_point([lon, lat], {"storm": storm, "issued": issued,
                                                    "model": model, "horizon_h": h}))
                tlat, tlon = float(r["true_lat"]), float(r["true_lon"])
                if _finite(tlat, tlon):
                    truth[h] = [tlon, tlat]
            features.append(_line(coords, {"storm": storm, "issued": issued, "model": model,
                                           "horizon_h": hours}))
        if truth:
            hours = sorted(truth)
            features.append(_line([truth[h] for h in hours],
                                  {"storm": storm, "issued": issued, "model": "ground_truth",
                                   "horizon_h": hours}))
    return {"type": "FeatureCollection", "features": features}


def geojson_from_track(track: StormTrack) -> dict:
    """The observed best track as a LineString with one Point per record."""
    coords = [[r.lon_deg, r.lat_deg] for r in track.records]
    t0 = track.records[0].timestamp
    features = [_line(coords, {"storm": track.id.key, "model": "ground_truth",
                               "horizon_h": None})]
    for r in track.records:
        hours = (r.timestamp - t0).total_seconds() / 3600.0
        features.append(_point([r.lon_deg, r.lat_deg], {
            "storm": track.id.key, "model": "ground_truth",
            "time": f"{r.timestamp:%Y%m%d%H%M}", "hours_since_start": hours,
            "record_id": r.record_id, "status": r.status,
        }))
    return {"type": "FeatureCollection", "features": features}


def cmd_export_geojson(args) -> int:
    source = Path(args.source)
    if source.suffix.lower() == ".csv" or source.is_file():
        with open(source, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise DataError(f"{source}: no forecast rows")
        required = {"storm", "issued", "model", "horizon_h", "lat", "lon", "true_lat", "true_lon"}
        if not required <= set(rows[0]):
            raise DataError(f"{source}: missing columns {sorted(required - set(rows[0]))}")
        collection = geojson_from_forecast_rows(rows)
    else:
        if not (args.config or args.data):
            raise ConfigError("a storm id needs --config or --data to locate the track")
        data = Path(args.data) if args.data else None
        if data is None:
            cfg = load_config(args.config)
            tracks = _data_tracks(cfg)
        else:
            tracks = _read_tracks(data)
        collection = geojson_from_track(_find_storm(tracks, _parse_storm(args.source)))
    Path(args.output).write_text(json.dumps(collection, indent=2) + "\n")
    print(f"{len(collection['features'])} features written to {args.output}")
    return EXIT_OK


# -- argument parsing ------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="typhoformer", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("parse", help="parse HURDAT2 and write the canonical rendering")
    p.add_argument("input")
    p.add_argument("output")
    p.set_defaults(func=cmd_parse)

    p = sub.add_parser("prompt", help="write one prompt line per record")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--import", dest="import_cache", metavar="CACHE",
                   help="prompt cache whose entries override the template")
    p.set_defaults(func=cmd_prompt)

    p = sub.add_parser("train", help="train on the config's training years")
    p.add_argument("config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score model and baselines on the test years")
    p.add_argument("config")
    p.add_argument("checkpoint")
    p.add_argument("--years", type=int, nargs="+", help="restrict to these storm years")
    p.add_argument("--out", help="output prefix (writes PREFIX.csv, PREFIX_wide.csv, PREFIX.txt)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("forecast", help="per-horizon forecast for one storm and issue time")
    p.add_argument("config")
    p.add_argument("checkpoint")
    p.add_argument("storm", help="AL142024 or AL142024_MILTON")
    p.add_argument("start", help="issue time YYYYMMDDHHMM (last observed record)")
    p.add_argument("--out", help="CSV path (default stdout)")
    p.set_defaults(func=cmd_forecast)

    p = sub.add_parser("export-geojson", help="forecast CSV or storm id to GeoJSON")
    p.add_argument("source", help="forecast CSV path or storm id")
    p.add_argument("output")
    p.add_argument("--config", help="run config (locates the data for a storm id)")
    p.add_argument("--data", help="HURDAT2 file (alternative to --config)")
    p.set_defaults(func=cmd_export_geojson)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergedLoss as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, *DATA_ERRORS) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
