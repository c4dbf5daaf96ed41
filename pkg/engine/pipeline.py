"""End-to-end runs shared by the CLI commands and the HTTP API."""

from __future__ import annotations
import dataclasses
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .cleaning import clean_corpus, collect_speeds, remove_aba_switches, suggest_speed_cut
from .config import dump_config
from .detect import (
    NEGATIVE, POSITIVE,
    critical_value, detect_stat, fit_ecdf, metrics, stratified_split,
)
from .errors import ConfigError, DetectionError, IngestError
from .evaluation import METHODS, SweepRow, build_cohort, compare_rates, corpus_summary, evaluate_sweep, sweep_table
from .ingest import (
    Source, cell_table, parse_registry, parse_trajectories, segments_by_user, validate_records, write_trajectories,
)
from .models import (
    CaseRegistry, DetectionMetrics, PersonScoreSeries, RiskMap, RunConfig, SimulationResult,
    StayFractionTable, TrajectoryBatch, TrajectoryRecord,
)
from .riskfield import build_risk_maps, build_stay_table, home_districts, resolve_recovery
from .score import score_cohort
from .simulator import generate_world, simulate
from .storage import (
    load_risk_maps, read_cells, read_risk_map, read_scores, write_cells, write_geojson, write_model_report,
    write_json, write_risk_maps, write_scores, write_simulation, write_stat_report, write_table,
)
from .trees import ForestModel, TreeModel, dump_model, load_model, train_forest, train_tree

log = logging.getLogger(__name__)

PathLike = Union[str, Path]


@dataclass
class StayData:
    table: StayFractionTable
    cells: Dict[str, Tuple[float, float]]
    suggested_speed_cut: Optional[float] = None
    share_below_cut: Optional[float] = None
    segments_before: int = 0
    segments_after: int = 0


@dataclass
class RiskmapReport:
    maps: Dict[int, RiskMap]
    paths: List[Path] = field(default_factory=list)
    stays: Optional[StayData] = None


@dataclass
class DetectReport:
    method: str
    metrics: DetectionMetrics
    threshold: Optional[float] = None
    n_train: int = 0
    n_test: int = 0


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def prepare_stays(batch: TrajectoryBatch, config: RunConfig) -> StayData:
    """Dwell segments, cleaning and stay fractions for every user in the batch.

    Also clusters the observed switching speeds and reports the upper edge
    of the slow cluster next to the configured cut.
    """
    clock = config.ingest.clock()
    cleaning = config.cleaning
    raw = segments_by_user(batch, clock, config.ingest.terminal_dwell_s)
    merged = {u: remove_aba_switches(s, cleaning.aba_window_s) for u, s in raw.items()}
    speeds = collect_speeds(merged)
    suggestion = suggest_speed_cut(speeds, cleaning.kmeans_k, cleaning.kmeans_max_iter)
    share = float(np.mean(speeds <= cleaning.speed_cut_kmh)) if speeds.size else None
    if suggestion is not None:
        log.info(f"k-means speed cut suggestion {suggestion:.1f} km/h (configured {cleaning.speed_cut_kmh} km/h, "
                 f"{share:.1%} of switches below it)")

    cleaned = clean_corpus(raw, cleaning, config.workers)
    table = build_stay_table(cleaned, clock)
    return StayData(
        table=table,
        cells=cell_table(batch.records),
        suggested_speed_cut=suggestion,
        share_below_cut=share,
        segments_before=sum(len(s) for s in raw.values()),
        segments_after=sum(len(s) for s in cleaned.values()),
    )


def recovery_horizons(table: StayFractionTable, registry: CaseRegistry, config: RunConfig) -> Dict[str, int]:
    districts = home_districts(table) if config.decay.recovery_by_district else None
    return resolve_recovery(registry, config.decay, districts)


def risk_maps_for(
    stays: StayData,
    registry: CaseRegistry,
    config: RunConfig,
    days: Optional[Sequence[int]] = None,
) -> Dict[int, RiskMap]:
    data_days = stays.table.days()
    if days is None:
        if not data_days:
            raise IngestError("no trajectory data to build risk maps from")
        days = range(data_days[0], data_days[-1] + 1)
    days = list(days)
    if data_days and (min(days) < data_days[0] or max(days) > data_days[-1]):
        log.warning(f"Days {min(days)}..{max(days)} reach outside the data ({data_days[0]}..{data_days[-1]}); "
                    f"those maps are zero")
    horizons = recovery_horizons(stays.table, registry, config)
    maps, _ = build_risk_maps(stays.table, registry, config.decay, days, stays.cells, horizons, config.workers)
    return maps


def score_all(
    stays: StayData,
    maps: Mapping[int, RiskMap],
    registry: CaseRegistry,
    config: RunConfig,
    user_ids: Optional[Sequence[str]] = None,
) -> Dict[str, PersonScoreSeries]:
    if not maps:
        raise IngestError("no risk maps to score against")
    users = set(user_ids) if user_ids is not None else set(stays.table.user_ids())
    users.update(e.user_id for e in registry)
    horizons = recovery_horizons(stays.table, registry, config)
    return score_cohort(sorted(users), stays.table, registry, maps, config.decay, config.score,
                        sorted(maps), horizons, config.workers)


def _batch_from_frame(result: SimulationResult) -> TrajectoryBatch:
    buffer = io.StringIO()
    write_trajectories(result.trajectories, buffer)
    return parse_trajectories(buffer.getvalue().encode("utf-8"))


def score_corpus(batch: TrajectoryBatch, registry: CaseRegistry, config: RunConfig) -> Dict[str, PersonScoreSeries]:
    """Risk maps over the whole data range, then every user's score series."""
    stays = prepare_stays(batch, config)
    maps = risk_maps_for(stays, registry, config)
    return score_all(stays, maps, registry, config, batch.user_ids())


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def run_simulate(config: RunConfig, out_dir: PathLike) -> SimulationResult:
    """Simulated corpus files, plus run.cfg holding the configuration that produced them."""
    world = generate_world(config.world)
    result = simulate(world, config.ingest.clock())
    paths = write_simulation(result, out_dir, config.ingest.clock())
    (Path(out_dir) / "run.cfg").write_text(dump_config(config), encoding="utf-8")
    log.debug(f"Simulation files: {', '.join(str(p) for p in paths.values())}")
    return result


def run_riskmap(
    traj: Source,
    registry_path: Source,
    out_dir: PathLike,
    config: RunConfig,
    days: Optional[Sequence[int]] = None,
) -> RiskmapReport:
    batch = parse_trajectories(traj)
    registry = parse_registry(registry_path, config.ingest.clock())
    stays = prepare_stays(batch, config)
    maps = risk_maps_for(stays, registry, config, days)
    paths = write_risk_maps(maps, out_dir)
    write_cells(stays.cells, Path(out_dir) / "cells.csv")
    return RiskmapReport(maps, paths, stays)


def _check_cells(cells: Mapping[str, Tuple[float, float]], cells_path: Path) -> None:
    """Warn about trajectory cells the stored maps were not built over."""
    if not cells_path.exists():
        log.warning(f"{cells_path} not found; cannot check the trajectories against the map cells")
        return
    known = read_cells(cells_path)
    unknown = sorted(set(cells) - known.keys())
    if unknown:
        log.warning(f"{len(unknown)} trajectory cells are not in {cells_path} and score as zero risk, "
                    f"e.g. {unknown[:3]}")


def run_score(
    maps_dir: PathLike,
    traj: Source,
    out: PathLike,
    config: RunConfig,
    registry_path: Optional[Source] = None,
    leave_one_out: Optional[bool] = None,
) -> Dict[str, PersonScoreSeries]:
    if leave_one_out is not None:
        config.score.leave_one_out = leave_one_out
    if config.score.leave_one_out and registry_path is None:
        raise ConfigError("leave-one-out scoring needs the case registry")
    maps = load_risk_maps(maps_dir)
    batch = parse_trajectories(traj)
    registry = parse_registry(registry_path, config.ingest.clock()) if registry_path is not None else CaseRegistry()
    stays = prepare_stays(batch, config)
    _check_cells(stays.cells, Path(maps_dir) / "cells.csv")
    series = score_all(stays, maps, registry, config, batch.user_ids())
    write_scores(series, out)
    return series


def score_records(
    records: Sequence[TrajectoryRecord],
    maps: Mapping[int, RiskMap],
    config: RunConfig,
) -> Dict[str, PersonScoreSeries]:
    """Score ad-hoc trajectories against stored maps, without a registry."""
    validate_records(records)
    batch = TrajectoryBatch(sorted(records, key=lambda r: (r.user_id, r.timestamp, r.cell_key)), len(records))
    stays = prepare_stays(batch, config)
    return score_all(stays, maps, CaseRegistry(), config, batch.user_ids())


def run_detect(
    scores_path: PathLike,
    registry_path: Source,
    method: str,
    out: PathLike,
    config: RunConfig,
    model_out: Optional[PathLike] = None,
    model_in: Optional[PathLike] = None,
) -> DetectReport:
    """Detect on a stratified split; metrics are computed on the held-out part.

    With `model_in` a stored tree or forest is applied instead of training one.
    """
    if method not in METHODS:
        raise DetectionError(f"unknown method {method!r}; expected one of {', '.join(METHODS)}")
    if model_in is not None and method == "stat":
        raise ConfigError("a stored model only applies to the tree and forest methods")
    det = config.detection
    series = read_scores(scores_path, config.score.window_T)
    registry = parse_registry(registry_path, config.ingest.clock())
    feature_days = 1 if method == "stat" else det.feature_days
    cohort = build_cohort(series, registry, feature_days, config.seed)
    train, test = stratified_split(cohort.labels, det.split_fraction, config.seed)
    in_test = np.zeros(len(cohort), dtype=bool)
    in_test[test] = True
    test_labels = {cohort.user_ids[i]: int(cohort.labels[i]) for i in test}

    threshold = None
    if method == "stat":
        normals = train[cohort.labels[train] == NEGATIVE]
        if normals.size == 0:
            raise DetectionError("training split holds no normal users")
        cdf = fit_ecdf(cohort.scores[normals])
        threshold = critical_value(cdf, det.q)
        outcomes = detect_stat(dict(zip(cohort.user_ids, cohort.scores.tolist())), threshold, cdf)
        held_out = [o for o in outcomes if o.user_id in test_labels]
        write_stat_report(outcomes, registry, out)
        log.info(f"ECDF threshold {threshold!r} at q={det.q} from {normals.size} normal scores")
    else:
        if model_in is not None:
            model = load_model(model_in)
            if not isinstance(model, TreeModel if method == "tree" else ForestModel):
                raise DetectionError(f"{model_in} does not hold a {method} model")
            log.info(f"Applying stored {method} model from {model_in}")
        elif method == "tree":
            model = train_tree(cohort.features[train], cohort.labels[train], det.max_depth, det.min_leaf)
        else:
            model = train_forest(cohort.features[train], cohort.labels[train], det.n_trees, det.max_depth,
                                 det.min_leaf, det.max_features, seed=config.seed, workers=config.workers)
        predictions = model.predict(cohort.features)
        held_out = {cohort.user_ids[i]: bool(predictions[i] == POSITIVE) for i in test}
        splits = np.where(in_test, "test", "train")
        write_model_report(cohort.user_ids, splits, cohort.labels, predictions, out)
        if model_out is not None:
            dump_model(model, model_out)

    scored = metrics(held_out, test_labels)
    log.info(f"{method} on {test.size} held-out users: DR={scored.dr} FAR={scored.far} ACC={scored.acc}")
    return DetectReport(method, scored, threshold, int(train.size), int(test.size))


def run_export(map_path: PathLike, out: PathLike, fmt: str = "geojson") -> RiskMap:
    if fmt != "geojson":
        raise ConfigError(f"unsupported export format {fmt!r}")
    risk_map = read_risk_map(map_path)
    write_geojson(risk_map, out)
    return risk_map


def summary_path(out: PathLike) -> Path:
    """Where run_eval writes its JSON summary next to the sweep table."""
    return Path(out).with_suffix(".json")


def run_eval(
    config: RunConfig,
    out: PathLike,
    rates: Optional[Sequence[float]] = None,
    traj: Optional[Source] = None,
    registry_path: Optional[Source] = None,
) -> List[SweepRow]:
    """Infection-rate sweep, on simulated corpora or on one existing corpus.

    Besides the sweep table, writes a JSON summary comparing the rates and,
    for an existing corpus, describing how its risk maps track its cases.
    """
    rates = list(rates) if rates is not None else list(config.detection.sweep_rates)
    if (traj is None) != (registry_path is None):
        raise ConfigError("--traj and --registry must be given together")

    summary: Dict[str, object] = {}
    if traj is not None:
        batch = parse_trajectories(traj)
        registry = parse_registry(registry_path, config.ingest.clock())
        stays = prepare_stays(batch, config)
        maps = risk_maps_for(stays, registry, config)
        series = score_all(stays, maps, registry, config, batch.user_ids())
        horizons = recovery_horizons(stays.table, registry, config)
        summary["corpus"] = corpus_summary(maps, series, registry, stays.cells, config, horizons)

        def corpus_for(rate: float):
            return series, registry
    else:
        def corpus_for(rate: float):
            world_config = dataclasses.replace(config.world, infection_rate=rate)
            result = simulate(generate_world(world_config), config.ingest.clock())
            return score_corpus(_batch_from_frame(result), result.registry, config), result.registry

    rows = evaluate_sweep(rates, corpus_for, config.detection, config.seed, METHODS, config.workers)
    write_table(sweep_table(rows), out)
    summary["comparison"] = compare_rates(rows)
    write_json(summary, summary_path(out))
    log.info(f"Wrote sweep report for {len(rates)} rates to {out} and its summary to {summary_path(out)}")
    return rows
