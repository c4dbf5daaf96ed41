import json

import pandas as pd
import pytest

from engine.config import parse_config_text
from engine.pipeline import run_riskmap, run_score
from engine.storage import load_risk_maps, read_risk_map, read_scores
from engine.trees import ForestModel, load_model

from conftest import SMALL_WORLD_CONFIG


@pytest.fixture(scope="module")
def scored(small_corpus):
    root = small_corpus["root"]
    config = parse_config_text(SMALL_WORLD_CONFIG)
    run_riskmap(small_corpus["traj"], small_corpus["registry"], root / "maps", config)
    run_score(root / "maps", small_corpus["traj"], root / "scores.csv", config, small_corpus["registry"])
    return dict(small_corpus, maps=root / "maps", scores=root / "scores.csv")


def invoke(runner, *args):
    return runner.invoke(args=[str(a) for a in args])


def test_simulate_is_reproducible(runner, small_corpus, tmp_path):
    config = small_corpus["config"]
    first = invoke(runner, "simulate", "--config", config, "--out", tmp_path / "a")
    second = invoke(runner, "simulate", "--config", config, "--out", tmp_path / "b")
    assert first.exit_code == 0, first.output
    assert second.exit_code == 0, second.output
    assert '"confirmed"' in first.output
    for name in ("trajectories.csv", "registry.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert (tmp_path / "a" / "registry.csv").read_bytes() == small_corpus["registry"].read_bytes()


def test_seed_option_changes_the_corpus(runner, small_corpus, tmp_path):
    result = invoke(runner, "simulate", "--config", small_corpus["config"], "--seed", 8, "--out", tmp_path)
    assert result.exit_code == 0, result.output
    assert (tmp_path / "trajectories.csv").read_bytes() != small_corpus["traj"].read_bytes()


def test_invalid_infection_rate_exits_with_error(runner, tmp_path):
    config = tmp_path / "bad.cfg"
    config.write_text("infection_rate = 1.5\n")
    result = invoke(runner, "simulate", "--config", config, "--out", tmp_path / "out")
    assert result.exit_code == 1
    assert "infection_rate" in result.output
    assert not (tmp_path / "out").exists()


def test_riskmap_writes_one_file_per_day(runner, scored, tmp_path):
    args = ("riskmap", "--config", scored["config"], "--traj", scored["traj"], "--registry", scored["registry"])
    result = invoke(runner, *args, "--out", tmp_path / "a")
    assert result.exit_code == 0, result.output
    files = sorted(p.name for p in (tmp_path / "a").glob("riskmap_*.csv"))
    assert len(files) == 20
    assert (tmp_path / "a" / "cells.csv").exists()

    invoke(runner, *args, "--days", "3..5", "--out", tmp_path / "b")
    for day in (3, 4, 5):
        name = f"riskmap_{day}.csv"
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert len(list((tmp_path / "b").glob("riskmap_*.csv"))) == 3


def test_riskmap_without_cases_is_all_zero(runner, scored, tmp_path):
    registry = tmp_path / "empty.csv"
    registry.write_text("user_id,label,confirmed_date,recovery_days\n")
    result = invoke(runner, "riskmap", "--config", scored["config"], "--traj", scored["traj"],
                    "--registry", registry, "--days", "0..4", "--out", tmp_path / "maps")
    assert result.exit_code == 0, result.output
    maps = load_risk_maps(tmp_path / "maps")
    assert sorted(maps) == [0, 1, 2, 3, 4]
    assert all(m.total() == 0.0 for m in maps.values())


def test_bad_day_range(runner, scored, tmp_path):
    result = invoke(runner, "riskmap", "--traj", scored["traj"], "--registry", scored["registry"],
                    "--days", "5..2", "--out", tmp_path)
    assert result.exit_code == 2


def test_score_command(runner, scored, tmp_path):
    out = tmp_path / "scores.csv"
    result = invoke(runner, "score", "--config", scored["config"], "--maps", scored["maps"],
                    "--traj", scored["traj"], "--registry", scored["registry"], "--out", out)
    assert result.exit_code == 0, result.output
    assert out.read_bytes() == scored["scores"].read_bytes()
    series = read_scores(out)
    assert len(series) == 300
    assert all(s.first_day == 0 and s.last_day == 19 for s in series.values())


def test_leave_one_out_needs_registry(runner, scored, tmp_path):
    result = invoke(runner, "score", "--maps", scored["maps"], "--traj", scored["traj"],
                    "--leave-one-out", "--out", tmp_path / "s.csv")
    assert result.exit_code == 1
    assert "registry" in result.output


def test_leave_one_out_lowers_confirmed_scores(runner, scored, tmp_path):
    out = tmp_path / "loo.csv"
    result = invoke(runner, "score", "--config", scored["config"], "--maps", scored["maps"],
                    "--traj", scored["traj"], "--registry", scored["registry"], "--leave-one-out", "--out", out)
    assert result.exit_code == 0, result.output
    plain = read_scores(scored["scores"])
    loo = read_scores(out)
    registry = pd.read_csv(scored["registry"], dtype=str, keep_default_na=False)
    for user_id, label in zip(registry["user_id"], registry["label"]):
        if label == "confirmed":
            assert sum(loo[user_id].base) <= sum(plain[user_id].base) + 1e-9
        else:
            assert loo[user_id].base == plain[user_id].base


def test_detect_stat_is_reproducible(runner, scored, tmp_path):
    args = ("detect", "--config", scored["config"], "--scores", scored["scores"],
            "--registry", scored["registry"], "--method", "stat")
    first = invoke(runner, *args, "--out", tmp_path / "a.csv")
    second = invoke(runner, *args, "--out", tmp_path / "b.csv")
    assert first.exit_code == 0, first.output
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    report = pd.read_csv(tmp_path / "a.csv")
    assert list(report.columns) == ["user_id", "label", "score", "p_value", "flag"]
    threshold = report.loc[report["flag"] == 0, "score"].max()
    assert (report.loc[report["flag"] == 1, "score"] > threshold).all()


def test_detect_forest_writes_model(runner, scored, tmp_path):
    result = invoke(runner, "detect", "--config", scored["config"], "--scores", scored["scores"],
                    "--registry", scored["registry"], "--method", "forest", "--seed", 3,
                    "--out", tmp_path / "forest.csv", "--model-out", tmp_path / "forest.txt")
    assert result.exit_code == 0, result.output
    model = load_model(tmp_path / "forest.txt")
    assert isinstance(model, ForestModel)
    assert len(model.trees) == 10
    report = pd.read_csv(tmp_path / "forest.csv")
    assert set(report["split"]) == {"train", "test"}
    assert set(report["prediction"]) <= {1, -1}


def test_detect_applies_a_stored_model(runner, scored, tmp_path):
    common = ["detect", "--config", scored["config"], "--scores", scored["scores"],
              "--registry", scored["registry"], "--seed", 3]
    trained = invoke(runner, *common, "--method", "tree", "--out", tmp_path / "trained.csv",
                     "--model-out", tmp_path / "tree.txt")
    assert trained.exit_code == 0, trained.output
    applied = invoke(runner, *common, "--method", "tree", "--out", tmp_path / "applied.csv",
                     "--model", tmp_path / "tree.txt")
    assert applied.exit_code == 0, applied.output
    assert (tmp_path / "applied.csv").read_bytes() == (tmp_path / "trained.csv").read_bytes()

    wrong = invoke(runner, *common, "--method", "forest", "--out", tmp_path / "wrong.csv",
                   "--model", tmp_path / "tree.txt")
    assert wrong.exit_code == 1
    assert "forest" in wrong.output


def test_unknown_method_is_rejected(runner, scored, tmp_path):
    result = invoke(runner, "detect", "--scores", scored["scores"], "--registry", scored["registry"],
                    "--method", "svm", "--out", tmp_path / "x.csv")
    assert result.exit_code != 0
    assert not (tmp_path / "x.csv").exists()


def test_export_geojson(runner, scored, tmp_path):
    out = tmp_path / "day5.geojson"
    result = invoke(runner, "export", "--map", scored["maps"] / "riskmap_5.csv", "--format", "geojson", "--out", out)
    assert result.exit_code == 0, result.output
    doc = json.loads(out.read_text())
    assert doc["type"] == "FeatureCollection"
    assert len(doc["features"]) == len(read_risk_map(scored["maps"] / "riskmap_5.csv").cells)


def test_eval_on_existing_corpus(runner, scored, tmp_path):
    out = tmp_path / "sweep.csv"
    result = invoke(runner, "eval", "--config", scored["config"], "--traj", scored["traj"],
                    "--registry", scored["registry"], "--sweep", "10,20", "--out", out)
    assert result.exit_code == 0, result.output
    table = pd.read_csv(out)
    assert len(table) == 6
    assert set(table["method"]) == {"stat", "tree", "forest"}
    assert sorted(set(table["rate"])) == [0.1, 0.2]

    summary = json.loads((tmp_path / "sweep.json").read_text())
    assert set(summary["comparison"]["acc"]) == {"stat", "tree", "forest"}
    assert len(summary["comparison"]["deltas"]["stat"]) == 1
    corpus = summary["corpus"]
    assert set(corpus["risk_case_correlation"]) == {"active", "cumulative"}
    spread = corpus["risk_spread"]
    assert 0 < spread["sites"] <= 100
    assert len(spread["days"]) == 20
    for five in spread["days"].values():
        assert five == sorted(five)
    stat = corpus["stat"]
    assert stat["detection_rate_by_day"]
    assert all(0.0 <= rate <= 1.0 for rate in stat["detection_rate_by_day"].values())
    assert all(int(day) >= 1 for day in stat["detection_rate_by_day"])


def test_eval_needs_both_corpus_files(runner, scored, tmp_path):
    result = invoke(runner, "eval", "--traj", scored["traj"], "--out", tmp_path / "sweep.csv")
    assert result.exit_code == 1


def test_eval_rejects_unreadable_sweep(runner, scored, tmp_path):
    result = invoke(runner, "eval", "--config", scored["config"], "--traj", scored["traj"],
                    "--registry", scored["registry"], "--sweep", "ten", "--out", tmp_path / "sweep.csv")
    assert result.exit_code == 1
    assert "rates" in result.output
