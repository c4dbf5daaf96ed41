import logging

import pandas as pd
import pytest

from engine.config import load_config, parse_config_text
from engine.errors import ConfigError, IngestError
from engine.ingest import parse_registry, parse_trajectories
from engine.models import CaseRegistry, MapCell, RiskMap
from engine.pipeline import (
    prepare_stays, risk_maps_for, run_detect, run_eval, run_export, run_riskmap, run_score, score_all, score_records,
)
from engine.storage import read_cells, write_cells

from conftest import SMALL_WORLD_CONFIG, rec


def config_with(workers=1):
    config = parse_config_text(SMALL_WORLD_CONFIG)
    config.workers = workers
    return config


@pytest.fixture(scope="module")
def stays(small_corpus):
    return prepare_stays(parse_trajectories(small_corpus["traj"]), config_with())


def test_stay_fractions_sum_to_one(stays):
    assert stays.table.days() == list(range(20))
    for day in stays.table.days():
        for user_id, fractions in stays.table.users_on(day).items():
            assert abs(sum(fractions.values()) - 1.0) <= 1e-12, (user_id, day)
            assert all(0.0 < f <= 1.0 for f in fractions.values())


def test_cleaning_report(stays):
    assert stays.segments_after <= stays.segments_before
    assert stays.suggested_speed_cut is not None and stays.suggested_speed_cut >= 0.0
    assert 0.0 <= stays.share_below_cut <= 1.0
    assert 0 < len(stays.cells) <= 64


def test_maps_cover_the_data_range(stays, small_corpus):
    registry = parse_registry(small_corpus["registry"], config_with().ingest.clock())
    maps = risk_maps_for(stays, registry, config_with())
    assert sorted(maps) == list(range(20))
    assert all(set(m.cells) == set(stays.cells) for m in maps.values())
    assert any(m.total() > 0.0 for m in maps.values())


def test_scoring_needs_maps(stays):
    with pytest.raises(IngestError):
        score_all(stays, {}, CaseRegistry(), config_with())


@pytest.mark.parametrize("workers", [2, 3])
def test_outputs_do_not_depend_on_workers(small_corpus, tmp_path, workers):
    traj, registry = small_corpus["traj"], small_corpus["registry"]
    runs = {}
    for n in (1, workers):
        out = tmp_path / f"w{n}"
        run_riskmap(traj, registry, out / "maps", config_with(n))
        run_score(out / "maps", traj, out / "scores.csv", config_with(n), registry)
        run_detect(out / "scores.csv", registry, "forest", out / "forest.csv", config_with(n), out / "forest.txt")
        runs[n] = {p.relative_to(out): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()}
    assert runs[1].keys() == runs[workers].keys()
    for name, content in runs[1].items():
        assert content == runs[workers][name], name


def test_stat_detection_report(small_corpus, tmp_path):
    config = config_with()
    traj, registry = small_corpus["traj"], small_corpus["registry"]
    run_riskmap(traj, registry, tmp_path / "maps", config)
    run_score(tmp_path / "maps", traj, tmp_path / "scores.csv", config, registry)
    report = run_detect(tmp_path / "scores.csv", registry, "stat", tmp_path / "stat.csv", config)
    with pytest.raises(ConfigError):
        run_detect(tmp_path / "scores.csv", registry, "stat", tmp_path / "x.csv", config, model_in=tmp_path / "m.txt")
    assert report.threshold is not None
    assert report.n_train > report.n_test > 0
    assert report.metrics.acc is not None and 0.0 <= report.metrics.acc <= 1.0

    geojson = run_export(tmp_path / "maps" / "riskmap_4.csv", tmp_path / "day4.geojson")
    assert geojson.day_index == 4
    with pytest.raises(ConfigError):
        run_export(tmp_path / "maps" / "riskmap_4.csv", tmp_path / "day4.kml", fmt="kml")


def test_eval_needs_paired_corpus_files(small_corpus, tmp_path):
    with pytest.raises(ConfigError):
        run_eval(config_with(), tmp_path / "sweep.csv", [0.1], registry_path=small_corpus["registry"])


def test_ad_hoc_records_are_checked_before_scoring():
    maps = {0: RiskMap(0, {"d1|l1|c1": MapCell(30.5, 114.3, 1.0)})}
    with pytest.raises(IngestError, match="invalid trajectory records"):
        score_records([rec("visitor", "c1", 0, lat=95.0, lng=500.0)], maps, config_with())


def test_simulation_writes_its_logs_and_config(small_corpus):
    sim = small_corpus["root"] / "sim"
    confirmed = len(small_corpus["result"].registry.confirmed())
    daily = pd.read_csv(sim / "daily.csv")
    events = pd.read_csv(sim / "events.csv", keep_default_na=False)
    assert list(daily["day"]) == list(range(20))
    assert int(daily["confirmed_total"].iloc[-1]) == confirmed
    assert list(events.columns) == ["day", "event_type", "description", "user_id", "severity"]
    assert int((events["event_type"] == "confirmed").sum()) == confirmed
    assert load_config(sim / "run.cfg") == parse_config_text(SMALL_WORLD_CONFIG)


def test_scoring_warns_about_cells_outside_the_maps(small_corpus, tmp_path, caplog):
    config = config_with()
    traj, registry = small_corpus["traj"], small_corpus["registry"]
    run_riskmap(traj, registry, tmp_path / "maps", config)
    cells = read_cells(tmp_path / "maps" / "cells.csv")
    dropped = sorted(cells)[0]
    write_cells({k: v for k, v in cells.items() if k != dropped}, tmp_path / "maps" / "cells.csv")
    with caplog.at_level(logging.WARNING, logger="engine.pipeline"):
        run_score(tmp_path / "maps", traj, tmp_path / "scores.csv", config)
    assert "1 trajectory cells are not in" in caplog.text
    assert dropped in caplog.text
