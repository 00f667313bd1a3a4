import csv
import io
import json
from pathlib import Path

import pytest

from typhoformer.cli import ConfigError, main, parse_config
from typhoformer.hurdat2 import parse_hurdat2

FIXTURES = Path(__file__).parent / "fixtures"

SMALL_CONFIG = """\
# tiny run on the bundled fixture
data = {data}
output_dir = out
train_years = 2004-2021
test_years = 2022-2024
d_model = 16
d_txt = 16
d_ff = 32
epochs = 1
batch_size = 64
seed = 3
"""


@pytest.fixture
def run_dir(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(SMALL_CONFIG.format(data=FIXTURES / "hurdat2_fixture.txt"))
    return tmp_path, cfg


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    d = tmp_path_factory.mktemp("trained")
    cfg = d / "run.cfg"
    cfg.write_text(SMALL_CONFIG.format(data=FIXTURES / "hurdat2_fixture.txt"))
    assert main(["train", str(cfg)]) == 0
    return d, cfg, d / "out" / "model.tyfo"


def test_parse_summary(tmp_path, capsys, fixture_tracks):
    out = tmp_path / "canon.txt"
    assert main(["parse", str(FIXTURES / "hurdat2_fixture.txt"), str(out)]) == 0
    lines = capsys.readouterr().out.splitlines()
    n_rec = sum(len(t.records) for t in fixture_tracks)
    assert lines[-1] == f"{len(fixture_tracks)} storms, {n_rec} records"
    assert "AL142024 MILTON 67" in lines
    assert parse_hurdat2(out.read_text()) == fixture_tracks


def test_parse_malformed_exits_3(tmp_path, capsys):
    bad = tmp_path / "bad.txt"
    bad.write_text("AL012004, ALEX, 1,\n20040731, 1800, , TD, 30.3N, 78.3W, xx, 1010,"
                   + " -999," * 12 + "\n")
    assert main(["parse", str(bad), str(tmp_path / "o.txt")]) == 3
    assert "line 2" in capsys.readouterr().err


def test_parse_empty_file(tmp_path, capsys):
    empty = tmp_path / "empty.txt"
    empty.write_text("")
    assert main(["parse", str(empty), str(tmp_path / "o.txt")]) == 0
    assert capsys.readouterr().out.strip() == "0 storms, 0 records"


def test_missing_input_exits_3(tmp_path):
    assert main(["parse", str(tmp_path / "nope.txt"), str(tmp_path / "o.txt")]) == 3


def test_usage_error_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2


def test_prompt_command(tmp_path, capsys, golden_prompt):
    out = tmp_path / "prompts.txt"
    assert main(["prompt", str(FIXTURES / "five_storms.txt"), str(out)]) == 0
    n = sum(len(t.records) for t in parse_hurdat2((FIXTURES / "five_storms.txt").read_text()))
    assert capsys.readouterr().out.startswith(f"{n} prompts")
    assert len(out.read_text().splitlines()) == n

    # importing a cache overrides the template text for matching records
    milton_only = tmp_path / "m.txt"
    fixture = (FIXTURES / "hurdat2_fixture.txt").read_text().splitlines()
    start = next(i for i, l in enumerate(fixture) if l.startswith("AL142024"))
    milton_only.write_text("\n".join(fixture[start:start + 68]) + "\n")
    cache = tmp_path / "cache.txt"
    cache.write_text("AL142024_MILTON|202410100030|custom landfall text\n")
    out2 = tmp_path / "p2.txt"
    assert main(["prompt", str(milton_only), str(out2), "--import", str(cache)]) == 0
    text = out2.read_text()
    assert "custom landfall text" in text
    assert text.count("\n") == 67


def test_config_parsing(tmp_path):
    cfg = parse_config("seed = 5\nepochs=7  # comment\nlr = 0.01\nd_model = 32\n", base_dir=tmp_path, env={})
    assert cfg.train.seed == 5 and cfg.train.epochs == 7 and cfg.train.lr == 0.01
    assert cfg.model.d_model == 32
    assert cfg.checkpoint_path == tmp_path / "model.tyfo"
    assert parse_config("seed = 5\n", env={"TYFO_SEED": "9"}).train.seed == 9
    for bad in ("bogus = 1\n", "seed = 1\nseed = 2\n", "seed\n", "seed = x\n", "train_years = 2020-2010\n"):
        with pytest.raises(ConfigError):
            parse_config(bad, env={})


def test_unknown_key_exits_2(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("bogus = 1\n")
    assert main(["train", str(cfg)]) == 2


def test_train_outputs(trained):
    d, _, ckpt = trained
    assert ckpt.exists()
    lines = (d / "out" / "train_report.csv").read_text().splitlines()
    assert lines[0] == "epoch,loss,seconds" and len(lines) == 2


def test_train_seed_override_changes_checkpoint(trained, tmp_path, monkeypatch):
    _, cfg, ckpt = trained
    other = tmp_path / "run.cfg"
    other.write_text(cfg.read_text().replace("output_dir = out", f"output_dir = {tmp_path / 'o'}"))
    monkeypatch.setenv("TYFO_SEED", "4")
    assert main(["train", str(other)]) == 0
    assert (tmp_path / "o" / "model.tyfo").read_bytes() != ckpt.read_bytes()


def test_evaluate(trained, tmp_path, capsys):
    _, cfg, ckpt = trained
    prefix = tmp_path / "m"
    assert main(["evaluate", str(cfg), str(ckpt), "--out", str(prefix)]) == 0
    text = capsys.readouterr().out
    assert text == Path(f"{prefix}.txt").read_text()
    rows = [l.split()[0] for l in text.splitlines() if not l.startswith("#")][3:]
    assert rows == ["typhoformer", "persistence", "cliper_lite"]
    long_rows = list(csv.DictReader(open(f"{prefix}.csv")))
    assert len(long_rows) == 3 * 4 * 2
    wide = Path(f"{prefix}_wide.csv").read_text().splitlines()
    assert len(wide) == 4 and wide[1].startswith("All,typhoformer,")

    assert main(["evaluate", str(cfg), str(ckpt), "--years", "2024", "--out", str(prefix)]) == 0
    assert Path(f"{prefix}_wide.csv").read_text().splitlines()[1].startswith("2024,")


def test_evaluate_bad_checkpoint(trained, tmp_path):
    _, cfg, _ = trained
    junk = tmp_path / "junk.tyfo"
    junk.write_bytes(b"not a checkpoint")
    assert main(["evaluate", str(cfg), str(junk)]) == 3


def test_forecast_and_geojson(trained, tmp_path, capsys):
    _, cfg, ckpt = trained
    out = tmp_path / "f.csv"
    assert main(["forecast", str(cfg), str(ckpt), "AL142024", "202410081200", "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out)))
    assert {r["model"] for r in rows} == {"typhoformer", "persistence", "cliper_lite"}
    assert sorted({int(r["horizon_h"]) for r in rows}) == [6, 12, 18, 24]

    gj = tmp_path / "f.geojson"
    assert main(["export-geojson", str(out), str(gj)]) == 0
    coll = json.loads(gj.read_text())
    lines = [f for f in coll["features"] if f["geometry"]["type"] == "LineString"]
    points = [f for f in coll["features"] if f["geometry"]["type"] == "Point"]
    assert {f["properties"]["model"] for f in lines} == {"typhoformer", "persistence", "cliper_lite", "ground_truth"}
    assert len(points) == 12
    lon, lat = lines[0]["geometry"]["coordinates"][0]
    assert -100 < lon < -60 and 15 < lat < 35

    capsys.readouterr()
    # forecast to stdout; unknown storm is a data error; bad time is a usage error
    assert main(["forecast", str(cfg), str(ckpt), "AL142024_MILTON", "202410081200"]) == 0
    assert capsys.readouterr().out.startswith("storm,")
    assert main(["forecast", str(cfg), str(ckpt), "AL992024", "202410081200"]) == 3
    assert main(["forecast", str(cfg), str(ckpt), "AL142024", "2024-10-08"]) == 2


def test_geojson_from_storm_id(tmp_path, milton_track):
    gj = tmp_path / "t.geojson"
    assert main(["export-geojson", "AL142024", str(gj), "--data", str(FIXTURES / "hurdat2_fixture.txt")]) == 0
    coll = json.loads(gj.read_text())
    line = coll["features"][0]
    assert len(line["geometry"]["coordinates"]) == len(milton_track.records) == len(coll["features"]) - 1
    assert main(["export-geojson", "AL142024", str(gj)]) == 2
