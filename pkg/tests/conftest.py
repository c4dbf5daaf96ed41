import datetime as dt

import pytest

from app import app as flask_app
from engine.models import (
    CONFIRMED, NORMAL,
    CaseEntry, CaseRegistry, DayClock, DwellSegment, StayFractionTable, TrajectoryRecord, WorldConfig,
)

CLOCK = DayClock(dt.date(2020, 1, 1), 8 * 3600)

SMALL_WORLD_CONFIG = """\
seed = 7
grid_rows = 8
grid_cols = 8
n_agents = 300
n_days = 20
infection_rate = 0.1
hubs_per_district = 2
n_trees = 10
"""


@pytest.fixture
def clock():
    return CLOCK


def seg(cell, start, end, lat=30.0, lng=114.0, user="u1"):
    return DwellSegment(user, cell, lat, lng, start, end)


def rec(user, cell, t, lat=30.5, lng=114.3, district="d1", lac="l1"):
    return TrajectoryRecord(user, district, lac, cell, lat, lng, t)


def registry_of(*entries):
    registry = CaseRegistry()
    for user_id, day in entries:
        if day is None:
            registry.add(CaseEntry(user_id, NORMAL))
        else:
            registry.add(CaseEntry(user_id, CONFIRMED, day))
    return registry


def table_of(rows):
    """rows: iterable of (user, day, {cell: fraction})."""
    table = StayFractionTable()
    for user_id, day, fractions in rows:
        table.set(user_id, day, dict(fractions))
    return table


@pytest.fixture
def small_world_config():
    return WorldConfig(
        grid_rows=8, grid_cols=8, n_agents=300, n_days=20, infection_rate=0.1,
        hubs_per_district=2, rng_seed=7,
    )


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """A simulated 300-agent corpus written to disk, with its config file."""
    from engine.config import parse_config_text
    from engine.pipeline import run_simulate

    root = tmp_path_factory.mktemp("corpus")
    config_path = root / "run.cfg"
    config_path.write_text(SMALL_WORLD_CONFIG)
    result = run_simulate(parse_config_text(SMALL_WORLD_CONFIG), root / "sim")
    return {
        "root": root,
        "config": config_path,
        "traj": root / "sim" / "trajectories.csv",
        "registry": root / "sim" / "registry.csv",
        "result": result,
    }


@pytest.fixture
def app(tmp_path):
    flask_app.config.update(TESTING=True, MAPS_DIR=str(tmp_path), RUN_CONFIG=None)
    yield flask_app


@pytest.fixture
def client(app):
    return app.test_client()


@pytest.fixture
def runner(app):
    return app.test_cli_runner()
