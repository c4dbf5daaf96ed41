"""On-disk formats: per-day risk maps, cell table, scores, detection reports, GeoJSON."""

from __future__ import annotations
import io
import json
import logging
import re
from dataclasses import asdict, fields
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .errors import IngestError
from .ingest import write_registry, write_trajectories
from .models import (
    CaseRegistry, DailySnapshot, DayClock, DetectionOutcome, MapCell, PersonScoreSeries, RiskMap,
    SimulationEvent, SimulationResult,
)

log = logging.getLogger(__name__)

PathLike = Union[str, Path]

RISKMAP_COLUMNS = ("cell_key", "lat", "lng", "risk")
CELL_COLUMNS = ("cell_key", "lat", "lng")
SCORE_COLUMNS = ("user_id", "day", "base_score", "window_score", "missing")
STAT_COLUMNS = ("user_id", "label", "score", "p_value", "flag")
MODEL_COLUMNS = ("user_id", "split", "label", "prediction")
DAILY_COLUMNS = tuple(f.name for f in fields(DailySnapshot))
EVENT_COLUMNS = tuple(f.name for f in fields(SimulationEvent))

_RISKMAP_NAME = re.compile(r"^riskmap_(-?\d+)\.csv$")


def _to_csv(frame: pd.DataFrame, dest: Union[PathLike, io.StringIO]) -> None:
    frame.to_csv(dest, index=False, lineterminator="\n")


def _read_csv(source: PathLike, columns: Sequence[str], dtype: Optional[dict] = None) -> pd.DataFrame:
    try:
        frame = pd.read_csv(source, dtype=dtype, keep_default_na=False, float_precision="round_trip")
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise IngestError(f"cannot read {source}: {exc}") from exc
    if list(frame.columns) != list(columns):
        raise IngestError(f"{source}: expected header {','.join(columns)}")
    return frame


# ---------------------------------------------------------------------------
# Risk maps
# ---------------------------------------------------------------------------

def riskmap_path(out_dir: PathLike, day_index: int) -> Path:
    return Path(out_dir) / f"riskmap_{day_index}.csv"


def risk_map_frame(risk_map: RiskMap) -> pd.DataFrame:
    keys = sorted(risk_map.cells)
    return pd.DataFrame({
        "cell_key": keys,
        "lat": [risk_map.cells[k].lat for k in keys],
        "lng": [risk_map.cells[k].lng for k in keys],
        "risk": [risk_map.cells[k].risk for k in keys],
    }, columns=list(RISKMAP_COLUMNS))


def write_risk_map(risk_map: RiskMap, out_dir: PathLike) -> Path:
    path = riskmap_path(out_dir, risk_map.day_index)
    _to_csv(risk_map_frame(risk_map), path)
    return path


def write_risk_maps(maps: Mapping[int, RiskMap], out_dir: PathLike) -> List[Path]:
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    paths = [write_risk_map(maps[day], out_dir) for day in sorted(maps)]
    log.info(f"Wrote {len(paths)} risk maps to {out_dir}")
    return paths


def read_risk_map(path: PathLike, day_index: Optional[int] = None) -> RiskMap:
    if day_index is None:
        match = _RISKMAP_NAME.match(Path(path).name)
        if match is None:
            raise IngestError(f"cannot tell the day of {path}; expected riskmap_<day>.csv")
        day_index = int(match.group(1))
    frame = _read_csv(path, RISKMAP_COLUMNS, dtype={"cell_key": str})
    cells = {
        key: MapCell(float(lat), float(lng), float(risk))
        for key, lat, lng, risk in frame.itertuples(index=False, name=None)
    }
    return RiskMap(day_index, cells)


def load_risk_maps(maps_dir: PathLike) -> Dict[int, RiskMap]:
    directory = Path(maps_dir)
    if not directory.is_dir():
        raise IngestError(f"maps directory {maps_dir} does not exist")
    maps: Dict[int, RiskMap] = {}
    for path in sorted(directory.iterdir()):
        match = _RISKMAP_NAME.match(path.name)
        if match:
            day = int(match.group(1))
            maps[day] = read_risk_map(path, day)
    log.info(f"Loaded {len(maps)} risk maps from {maps_dir}")
    return maps


def write_cells(cells: Mapping[str, Tuple[float, float]], dest: PathLike) -> None:
    keys = sorted(cells)
    frame = pd.DataFrame({
        "cell_key": keys,
        "lat": [cells[k][0] for k in keys],
        "lng": [cells[k][1] for k in keys],
    }, columns=list(CELL_COLUMNS))
    _to_csv(frame, dest)


def read_cells(source: PathLike) -> Dict[str, Tuple[float, float]]:
    frame = _read_csv(source, CELL_COLUMNS, dtype={"cell_key": str})
    return {key: (float(lat), float(lng)) for key, lat, lng in frame.itertuples(index=False, name=None)}


# ---------------------------------------------------------------------------
# GeoJSON
# ---------------------------------------------------------------------------

def risk_map_geojson(risk_map: RiskMap) -> dict:
    """RFC 7946 FeatureCollection with one Point per cell, coordinates [lng, lat]."""
    return {
        "type": "FeatureCollection",
        "features": [
            {
                "type": "Feature",
                "geometry": {"type": "Point", "coordinates": [cell.lng, cell.lat]},
                "properties": {"cell_key": key, "risk": cell.risk, "day": risk_map.day_index},
            }
            for key, cell in sorted(risk_map.cells.items())
        ],
    }


def write_geojson(risk_map: RiskMap, dest: PathLike) -> None:
    Path(dest).write_text(json.dumps(risk_map_geojson(risk_map)), encoding="utf-8")
    log.info(f"Exported {len(risk_map.cells)} cells of day {risk_map.day_index} to {dest}")


# ---------------------------------------------------------------------------
# Scores
# ---------------------------------------------------------------------------

def scores_frame(series: Mapping[str, PersonScoreSeries]) -> pd.DataFrame:
    rows = []
    for user_id in sorted(series):
        s = series[user_id]
        for offset, (base, window) in enumerate(zip(s.base, s.window)):
            rows.append((user_id, s.first_day + offset, base, window, int(s.missing)))
    return pd.DataFrame(rows, columns=list(SCORE_COLUMNS))


def write_scores(series: Mapping[str, PersonScoreSeries], dest: PathLike) -> None:
    _to_csv(scores_frame(series), dest)
    log.info(f"Wrote scores of {len(series)} users to {dest}")


def read_scores(source: PathLike, window_T: int = 14) -> Dict[str, PersonScoreSeries]:
    """Rebuild score series; each user's days must be contiguous and share one `missing` flag."""
    frame = _read_csv(source, SCORE_COLUMNS, dtype={"user_id": str})
    frame = frame.sort_values(["user_id", "day"], kind="stable")
    series: Dict[str, PersonScoreSeries] = {}
    for user_id, group in frame.groupby("user_id", sort=True):
        days = group["day"].to_numpy(dtype=np.int64)
        if np.any(np.diff(days) != 1):
            raise IngestError(f"{source}: score days for {user_id} are not contiguous")
        flags = set(group["missing"].astype(str))
        if not flags <= {"0", "1"} or len(flags) != 1:
            raise IngestError(f"{source}: missing flag for {user_id} must be one of 0 or 1 on every row")
        series[user_id] = PersonScoreSeries(
            user_id=user_id,
            first_day=int(days[0]),
            base=tuple(float(v) for v in group["base_score"]),
            window=tuple(float(v) for v in group["window_score"]),
            window_T=window_T,
            missing=flags == {"1"},
        )
    return series


# ---------------------------------------------------------------------------
# Detection reports
# ---------------------------------------------------------------------------

def write_stat_report(outcomes: Sequence[DetectionOutcome], registry: CaseRegistry, dest: PathLike) -> None:
    frame = pd.DataFrame(
        [(o.user_id, registry.label_of(o.user_id), o.score, o.p_value, int(o.suspected)) for o in outcomes],
        columns=list(STAT_COLUMNS),
    )
    _to_csv(frame, dest)


def write_model_report(
    user_ids: Sequence[str],
    splits: Sequence[str],
    labels: Sequence[int],
    predictions: Sequence[int],
    dest: PathLike,
) -> None:
    frame = pd.DataFrame(
        {"user_id": list(user_ids), "split": list(splits),
         "label": [int(v) for v in labels], "prediction": [int(v) for v in predictions]},
        columns=list(MODEL_COLUMNS),
    )
    _to_csv(frame, dest)


def write_table(rows: Sequence[dict], dest: PathLike) -> None:
    _to_csv(pd.DataFrame(list(rows)), dest)


def write_json(doc: Mapping[str, object], dest: PathLike) -> None:
    Path(dest).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Simulated corpora
# ---------------------------------------------------------------------------

def write_simulation(result: SimulationResult, out_dir: PathLike, clock: DayClock) -> Dict[str, Path]:
    """trajectories.csv and registry.csv, plus the daily counts and the event log."""
    directory = Path(out_dir)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {name: directory / f"{name}.csv" for name in ("trajectories", "registry", "daily", "events")}
    write_trajectories(result.trajectories, paths["trajectories"])
    write_registry(result.registry, paths["registry"], clock)
    _to_csv(pd.DataFrame([asdict(d) for d in result.daily_data], columns=list(DAILY_COLUMNS)), paths["daily"])
    _to_csv(pd.DataFrame([asdict(e) for e in result.events], columns=list(EVENT_COLUMNS)), paths["events"])
    log.info(f"Wrote {len(result.trajectories)} records, {len(result.registry)} registry rows "
             f"and {len(result.events)} events to {out_dir}")
    return paths
