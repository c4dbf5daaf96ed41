import datetime as dt
import logging

import pytest

from engine.config import dump_config, load_config, parse_config_text, parse_rates
from engine.errors import ConfigError
from engine.models import RunConfig


def test_defaults():
    config = load_config(None)
    assert config.decay.outdoor_weights == (200.0, 100.0, 50.0)
    assert config.decay.incubation_T == 14
    assert config.cleaning.speed_cut_kmh == 38.0
    assert config.cleaning.min_dwell_s == 300
    assert config.detection.q == 0.95
    assert config.world.n_agents == 20000


def test_values_are_typed():
    config = parse_config_text(
        "seed = 9  # comment\n"
        "q = 0.9\n"
        "workers = 4\n"
        "include_diagnosis_day = yes\n"
        "epoch_date = 2020-02-01\n"
        "outdoor_weights = 4, 2, 1\n"
        "viral_weights = 1, 0.5, 0.25\n"
        "recovery_by_district = D1:14, D2:7\n"
    )
    assert config.seed == 9
    assert config.world.rng_seed == 9
    assert config.detection.q == 0.9
    assert config.workers == 4
    assert config.decay.include_diagnosis_day is True
    assert config.ingest.epoch_date == dt.date(2020, 2, 1)
    assert config.decay.outdoor_weights == (4.0, 2.0, 1.0)
    assert config.decay.recovery_by_district == {"D1": 14, "D2": 7}


def test_sweep_rates_accept_percentages():
    assert parse_config_text("sweep_rates = 1,3,10,23,50\n").detection.sweep_rates == (0.01, 0.03, 0.1, 0.23, 0.5)
    assert parse_config_text("sweep_rates = 0.05\n").detection.sweep_rates == (0.05,)


def test_rate_lists_are_percent_as_a_whole():
    assert parse_rates("0.5, 1") == (0.005, 0.01)
    assert parse_rates("3%, 10%") == (0.03, 0.1)
    assert parse_rates("0.05,0.5") == (0.05, 0.5)
    assert parse_config_text("sweep_rates = 0.5, 1\n").detection.sweep_rates == parse_rates("0.5, 1")
    for text in ("", "ten", "1,,x"):
        with pytest.raises(ConfigError):
            parse_rates(text)


def test_unknown_key_warns(caplog):
    with caplog.at_level(logging.WARNING, logger="engine.config"):
        config = parse_config_text("colour = blue\n")
    assert "colour" in caplog.text
    assert config.seed == RunConfig().seed


@pytest.mark.parametrize("text", [
    "q = lots\n",
    "q = 1.5\n",
    "infection_rate = 1.5\n",
    "outdoor_weights = 1, 2, 3\n",
    "reducer = median\n",
    "workers = 0\n",
    "just some words\n",
])
def test_invalid_config(text):
    with pytest.raises(ConfigError):
        parse_config_text(text)


def test_missing_file_falls_back_to_defaults(tmp_path, caplog):
    with caplog.at_level(logging.WARNING, logger="engine.config"):
        config = load_config(tmp_path / "absent.cfg")
    assert "not found" in caplog.text
    assert config.detection.q == 0.95


def test_dumped_config_reads_back(tmp_path):
    config = parse_config_text("seed = 5\nn_agents = 50\nrecovery_by_district = D3:12\nreducer = mean\n")
    path = tmp_path / "run.cfg"
    path.write_text(dump_config(config))
    assert load_config(path) == config
