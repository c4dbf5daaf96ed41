"""Flask server and command line for the trajectory risk engine."""

import functools
import json
import logging
import os
from pathlib import Path

import click
from flask import Flask, jsonify, request
from flask.cli import FlaskGroup

from engine.config import load_config, parse_rates
from engine.errors import EngineError
from engine.geo import category_radius
from engine.ingest import records_from_items
from engine.models import RunConfig
from engine.pipeline import (
    run_detect, run_eval, run_export, run_riskmap, run_score, run_simulate, score_records, summary_path,
)
from engine.riskfield import region_risk
from engine.storage import load_risk_maps, read_risk_map, risk_map_geojson, riskmap_path

app = Flask(__name__)
app.config.setdefault("MAPS_DIR", os.environ.get("RISK_MAPS_DIR", "maps"))
app.config.setdefault("RUN_CONFIG", None)


def _run_config() -> RunConfig:
    config = app.config.get("RUN_CONFIG")
    if config is None:
        config = load_config(None)
        app.config["RUN_CONFIG"] = config
    return config


def _maps_dir() -> Path:
    return Path(app.config["MAPS_DIR"])


def _error(message: str, status: int = 400):
    return jsonify({"error": message}), status


@app.errorhandler(EngineError)
def _engine_error(exc: EngineError):
    return _error(str(exc))


# ---------------------------------------------------------------------------
# HTTP API
# ---------------------------------------------------------------------------

@app.route("/api/riskmap/<int(signed=True):day>")
def riskmap(day: int):
    path = riskmap_path(_maps_dir(), day)
    if not path.exists():
        return _error(f"no risk map stored for day {day}", 404)
    return jsonify(risk_map_geojson(read_risk_map(path, day)))


@app.route("/api/region-risk", methods=["POST"])
def region_risk_endpoint():
    data = request.get_json(silent=True)
    if not isinstance(data, dict) or not data:
        return _error("No JSON data provided")
    try:
        day = int(data["day"])
        lat = float(data["lat"])
        lng = float(data["lng"])
        if "radius_m" in data:
            radius = float(data["radius_m"])
        else:
            radius = category_radius(data.get("category", "random"))
    except (KeyError, TypeError, ValueError) as exc:
        return _error(f"invalid request: {exc}")

    path = riskmap_path(_maps_dir(), day)
    if not path.exists():
        return _error(f"no risk map stored for day {day}", 404)
    risk_map = read_risk_map(path, day)
    try:
        risk = region_risk(risk_map, lat, lng, radius)
    except ValueError as exc:
        return _error(str(exc))
    return jsonify({"day": day, "radius_m": radius, "risk": risk, "cells": len(risk_map.cells)})


@app.route("/api/score", methods=["POST"])
def score_endpoint():
    data = request.get_json(silent=True)
    if not isinstance(data, dict) or not data:
        return _error("No JSON data provided")
    records = records_from_items(data.get("records", []))
    try:
        first, last = (int(d) for d in data["days"])
    except (KeyError, TypeError, ValueError) as exc:
        return _error(f"invalid request: {exc}")
    if not records:
        return _error("no trajectory records given")

    maps = load_risk_maps(_maps_dir())
    series = score_records(records, maps, _run_config())
    return jsonify({
        "users": [
            {
                "user_id": user_id,
                "days": [
                    {"day": day, "base_score": s.base_at(day), "window_score": s.window_at(day)}
                    for day in range(first, last + 1) if s.covers(day)
                ],
            }
            for user_id, s in sorted(series.items())
        ],
    })


# ---------------------------------------------------------------------------
# Command line
# ---------------------------------------------------------------------------

def _configure_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        force=True,
    )


def engine_command(name: str):
    """Register a CLI command taking --config/--verbose; engine errors exit with status 1."""

    def decorator(func):
        @app.cli.command(name)
        @click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
                      help="Flat key = value run configuration.")
        @click.option("--verbose", is_flag=True, help="Log at DEBUG level.")
        @functools.wraps(func)
        def command(config_path, verbose, **kwargs):
            _configure_logging(verbose)
            try:
                config = load_config(config_path)
                func(config, **kwargs)
            except EngineError as exc:
                raise click.ClickException(str(exc))

        return command

    return decorator


def _parse_days(text):
    if text is None:
        return None
    first, sep, last = text.partition("..")
    try:
        a = int(first)
        b = int(last) if sep else a
    except ValueError:
        raise click.BadParameter(f"expected A..B, got {text!r}")
    if b < a:
        raise click.BadParameter(f"empty day range {text!r}")
    return list(range(a, b + 1))


@engine_command("simulate")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--seed", type=int, default=None, help="Override the configured seed.")
def simulate_command(config, out_dir, seed):
    """Generate a synthetic labelled corpus (trajectories.csv, registry.csv)."""
    if seed is not None:
        config.seed = config.world.rng_seed = seed
    result = run_simulate(config, out_dir)
    click.echo(json.dumps(result.summary, indent=2))


@engine_command("riskmap")
@click.option("--traj", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--registry", "registry_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--days", default=None, help="Day range A..B (default: every day with data).")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
def riskmap_command(config, traj, registry_path, days, out_dir):
    """Build one riskmap_DAY.csv per day."""
    report = run_riskmap(traj, registry_path, out_dir, config, _parse_days(days))
    click.echo(f"Wrote {len(report.paths)} risk maps to {out_dir}")
    if report.stays is not None and report.stays.suggested_speed_cut is not None:
        click.echo(f"Suggested speed cut: {report.stays.suggested_speed_cut:.1f} km/h "
                   f"(configured {config.cleaning.speed_cut_kmh} km/h)")


@engine_command("score")
@click.option("--maps", "maps_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--traj", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--registry", "registry_path", default=None, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--leave-one-out", is_flag=True, help="Remove each case's own field contribution.")
def score_command(config, maps_dir, traj, registry_path, out, leave_one_out):
    """Daily base and windowed personal scores for every user."""
    series = run_score(maps_dir, traj, out, config, registry_path, leave_one_out or None)
    click.echo(f"Scored {len(series)} users into {out}")


@engine_command("detect")
@click.option("--scores", "scores_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--registry", "registry_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--method", type=click.Choice(["stat", "tree", "forest"]), default="stat", show_default=True)
@click.option("--q", type=float, default=None, help="Quantile of the normal-score ECDF (default 0.95).")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--seed", type=int, default=None, help="Override the configured seed.")
@click.option("--model-out", default=None, type=click.Path(dir_okay=False), help="Write the trained model here.")
@click.option("--model", "model_in", default=None, type=click.Path(exists=True, dir_okay=False),
              help="Apply a stored tree or forest instead of training one.")
def detect_command(config, scores_path, registry_path, method, q, out, seed, model_out, model_in):
    """Flag suspected cases with the ECDF test, a decision tree or a random forest."""
    if q is not None:
        config.detection.q = q
    if seed is not None:
        config.seed = seed
    config.validate()
    report = run_detect(scores_path, registry_path, method, out, config, model_out, model_in)
    m = report.metrics
    click.echo(json.dumps({
        "method": report.method,
        "threshold": report.threshold,
        "train": report.n_train,
        "test": report.n_test,
        "dr": m.dr,
        "far": m.far,
        "acc": m.acc,
    }, indent=2))


@engine_command("export")
@click.option("--map", "map_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--format", "fmt", type=click.Choice(["geojson"]), default="geojson", show_default=True)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def export_command(config, map_path, fmt, out):
    """Convert a risk-map CSV to a GeoJSON FeatureCollection."""
    risk_map = run_export(map_path, out, fmt)
    click.echo(f"Exported {len(risk_map.cells)} cells to {out}")


@engine_command("eval")
@click.option("--sweep", "rates", default=None, help="Infection rates, e.g. 1,3,10,23,50 (percent) or 0.01,0.03.")
@click.option("--traj", default=None, type=click.Path(exists=True, dir_okay=False))
@click.option("--registry", "registry_path", default=None, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def eval_command(config, rates, traj, registry_path, out):
    """ACC, DR, FAR and wall time of every detector across infection rates."""
    rows = run_eval(config, out, list(parse_rates(rates)) if rates else None, traj, registry_path)
    for row in rows:
        click.echo(f"{row.rate:>6.2%} {row.method:<7} ACC={row.acc} DR={row.dr} FAR={row.far} "
                   f"({row.seconds:.2f}s)")
    click.echo(f"Summary written to {summary_path(out)}")


@engine_command("serve")
@click.option("--maps", "maps_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--port", type=int, default=5000, show_default=True)
def serve_command(config, maps_dir, port):
    """Serve the JSON API over stored risk maps."""
    app.config["MAPS_DIR"] = maps_dir
    app.config["RUN_CONFIG"] = config
    app.run(port=port)


if __name__ == "__main__":
    FlaskGroup(create_app=lambda: app)()
