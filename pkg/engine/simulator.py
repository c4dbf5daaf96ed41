"""Synthetic world and day-by-day agent simulation producing labelled corpora."""

from __future__ import annotations
import logging
import math
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from .geo import EARTH_RADIUS_M
from .ingest import TRAJECTORY_COLUMNS
from .models import (
    CONFIRMED, NORMAL,
    AgentProfile, CaseEntry, CaseRegistry, DailySnapshot, DayClock, GridCell,
    SimulationEvent, SimulationResult, World, WorldConfig,
)

log = logging.getLogger(__name__)

HOURS = 24
WORK_HOURS = (8, 17)
ERRAND_HOURS = (17, 19)
DISTRICT_BLOCK = 10  # cells per district side

WORKER_SCHEDULE = ((0, 8, "home"), (8, 17, "work"), (17, 24, "home"))
HOME_SCHEDULE = ((0, 24, "home"),)

# Noise lands 900..2690 s past the hour, clear of jittered hour boundaries.
SAFE_WINDOW = (900, 2600)
PINGPONG_DWELL_S = (20, 90)


def user_id_of(agent_id: int) -> str:
    return f"u{agent_id:06d}"


def grid_steps(config: WorldConfig) -> Tuple[float, float]:
    """Degrees of latitude and longitude per cell step at the grid origin."""
    dlat = math.degrees(config.cell_spacing_m / EARTH_RADIUS_M)
    dlng = math.degrees(config.cell_spacing_m / (EARTH_RADIUS_M * math.cos(math.radians(config.origin_lat))))
    return dlat, dlng


def hub_weights(k: int) -> np.ndarray:
    w = 1.0 / np.sqrt(np.arange(1, k + 1, dtype=np.float64))
    return w / w.sum()


def generate_world(config: WorldConfig) -> World:
    """Lay cells on a lat/lng grid and draw every agent's home, work and noise level.

    Districts are 10x10 blocks of cells, LACs runs of `cells_per_lac`
    consecutive cell indices. Each district ranks a few hub cells that
    its residents visit for errands.
    """
    config.validate()
    rng = np.random.default_rng(config.rng_seed)
    dlat, dlng = grid_steps(config)
    blocks_per_row = -(-config.grid_cols // DISTRICT_BLOCK)

    cells: List[GridCell] = []
    for idx in range(config.n_cells):
        row, col = divmod(idx, config.grid_cols)
        district = (row // DISTRICT_BLOCK) * blocks_per_row + col // DISTRICT_BLOCK
        cells.append(GridCell(
            index=idx,
            row=row,
            col=col,
            district_id=f"D{district}",
            lac_id=f"L{idx // config.cells_per_lac}",
            cell_id=f"C{idx}",
            lat=round(config.origin_lat + row * dlat, 6),
            lng=round(config.origin_lng + col * dlng, 6),
        ))

    members: Dict[str, List[int]] = {}
    for cell in cells:
        members.setdefault(cell.district_id, []).append(cell.index)
    hubs: Dict[str, Tuple[int, ...]] = {}
    for district in sorted(members, key=lambda d: int(d[1:])):
        pool = np.asarray(members[district])
        k = min(config.hubs_per_district, pool.size)
        hubs[district] = tuple(int(c) for c in rng.choice(pool, size=k, replace=False))

    n = config.n_agents
    homes = rng.integers(0, config.n_cells, size=n)
    works = rng.random(n) < config.work_fraction
    work_cells = np.where(works, rng.integers(0, config.n_cells, size=n), homes)
    noise = rng.integers(0, config.jitter_s + 1, size=n)
    agents = [
        AgentProfile(
            agent_id=i,
            home_cell=int(homes[i]),
            work_cell=int(work_cells[i]),
            schedule=WORKER_SCHEDULE if works[i] else HOME_SCHEDULE,
            noise_s=int(noise[i]),
        )
        for i in range(n)
    ]
    log.info(f"Generated world: {config.n_cells} cells, {len(hubs)} districts, {n} agents")
    return World(config=config, cells=cells, agents=agents, hubs=hubs)


# ---------------------------------------------------------------------------
# Simulation helpers
# ---------------------------------------------------------------------------

def _hub_tables(world: World) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-district hub matrix, cumulative weights, and each cell's district row."""
    districts = list(world.hubs)
    row_of = {d: i for i, d in enumerate(districts)}
    width = max(len(h) for h in world.hubs.values())
    table = np.zeros((len(districts), width), dtype=np.int64)
    cumw = np.ones((len(districts), width), dtype=np.float64)
    for d, cells in world.hubs.items():
        r = row_of[d]
        table[r, :len(cells)] = cells
        table[r, len(cells):] = cells[-1]
        cumw[r, :len(cells)] = np.cumsum(hub_weights(len(cells)))
    cumw[:, -1] = 1.0
    district_row = np.asarray([row_of[c.district_id] for c in world.cells], dtype=np.int64)
    return table, cumw, district_row


def _seed_infections(rng: np.random.Generator, config: WorldConfig) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Index cases with diagnosis lag and an infection day weighted by exp(growth_rate * t).

    The infection day is drawn inside [0, n_days - 1 - lag], so every
    index case is diagnosed within the horizon.
    """
    n_seed = math.ceil(config.infection_rate * config.n_agents)
    agents = np.sort(rng.choice(config.n_agents, size=n_seed, replace=False))
    lags = rng.integers(config.diagnosis_lag_min, config.diagnosis_lag_max + 1, size=n_seed)
    u = rng.random(n_seed)
    span = (config.n_days - lags).astype(np.float64)  # days 0 .. n_days-1-lag
    g = config.growth_rate
    if g > 0:
        t = np.log1p(u * np.expm1(g * span)) / g
    else:
        t = u * span
    days = np.minimum(np.floor(t).astype(np.int64), config.n_days - 1 - lags)
    return agents, days, lags


def _hourly_cells(
    rng: np.random.Generator,
    world: World,
    homes: np.ndarray,
    work_cells: np.ndarray,
    workers: np.ndarray,
    isolated: np.ndarray,
    weekday: bool,
    hub_table: np.ndarray,
    hub_cumw: np.ndarray,
    district_row: np.ndarray,
) -> np.ndarray:
    """(n_agents, 24) matrix of the cell each agent occupies in each hour."""
    n = homes.size
    loc = np.repeat(homes[:, None], HOURS, axis=1)
    if weekday:
        commuting = workers & ~isolated
        loc[commuting, WORK_HOURS[0]:WORK_HOURS[1]] = work_cells[commuting, None]

    errand = (rng.random(n) < world.config.errand_probability) & ~isolated
    rows = district_row[homes]
    pick = (rng.random(n)[:, None] > hub_cumw[rows]).sum(axis=1)
    pick = np.minimum(pick, hub_table.shape[1] - 1)
    hub = hub_table[rows, pick]
    loc[errand, ERRAND_HOURS[0]:ERRAND_HOURS[1]] = hub[errand, None]
    return loc


def colocation_exposure(loc: np.ndarray, infectious: np.ndarray, n_cells: int) -> np.ndarray:
    """Sum over hours of the number of infectious agents sharing each agent's cell."""
    exposure = np.zeros(loc.shape[0], dtype=np.float64)
    if not infectious.any():
        return exposure
    for h in range(loc.shape[1]):
        counts = np.bincount(loc[infectious, h], minlength=n_cells)
        exposure += counts[loc[:, h]]
    return exposure


def infection_hazard(exposure: np.ndarray, config: WorldConfig) -> np.ndarray:
    return -np.expm1(-config.hazard_per_hour * config.contact_probability * exposure)


def _neighbour(cells: np.ndarray, direction: np.ndarray, config: WorldConfig) -> np.ndarray:
    rows, cols = np.divmod(cells, config.grid_cols)
    dr = np.asarray([-1, 1, 0, 0])[direction]
    dc = np.asarray([0, 0, -1, 1])[direction]
    nr = rows + dr
    nc = cols + dc
    nr = np.where((nr < 0) | (nr >= config.grid_rows), rows - dr, nr)
    nc = np.where((nc < 0) | (nc >= config.grid_cols), cols - dc, nc)
    nr = np.clip(nr, 0, config.grid_rows - 1)
    nc = np.clip(nc, 0, config.grid_cols - 1)
    return nr * config.grid_cols + nc


def _day_records(
    rng: np.random.Generator,
    loc: np.ndarray,
    noise: np.ndarray,
    day_start: int,
    config: WorldConfig,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(agent, cell, timestamp) rows for one day: a day-start record, one per cell
    change, and injected noise (same-cell pings and short A-B-A handovers)."""
    n = loc.shape[0]
    agents = [np.arange(n)]
    cells = [loc[:, 0]]
    times = [day_start + np.floor(rng.random(n) * (noise + 1)).astype(np.int64)]

    changed_agent, changed_hour = np.nonzero(loc[:, 1:] != loc[:, :-1])
    changed_hour = changed_hour + 1
    jitter = np.rint((rng.random(changed_agent.size) * 2 - 1) * noise[changed_agent]).astype(np.int64)
    agents.append(changed_agent)
    cells.append(loc[changed_agent, changed_hour])
    times.append(day_start + changed_hour * 3600 + jitter)

    ping = rng.random(n) < config.ping_probability
    ping_hour = rng.integers(0, HOURS, size=n)
    ping_offset = rng.integers(SAFE_WINDOW[0], SAFE_WINDOW[1] + 1, size=n)
    pong = rng.random(n) < config.pingpong_probability
    pong_hour = rng.integers(0, HOURS, size=n)
    pong_offset = rng.integers(SAFE_WINDOW[0], SAFE_WINDOW[1] + 1, size=n)
    pong_dwell = rng.integers(PINGPONG_DWELL_S[0], PINGPONG_DWELL_S[1] + 1, size=n)
    direction = rng.integers(0, 4, size=n)

    ping &= ~(pong & (ping_hour == pong_hour))
    who = np.flatnonzero(ping)
    agents.append(who)
    cells.append(loc[who, ping_hour[who]])
    times.append(day_start + ping_hour[who] * 3600 + ping_offset[who])

    here = loc[np.arange(n), pong_hour]
    other = _neighbour(here, direction, config)
    pong &= other != here
    who = np.flatnonzero(pong)
    t_out = day_start + pong_hour[who] * 3600 + pong_offset[who]
    agents += [who, who]
    cells += [other[who], here[who]]
    times += [t_out, t_out + pong_dwell[who]]

    return np.concatenate(agents), np.concatenate(cells), np.concatenate(times)


def _trajectory_frame(world: World, agents: np.ndarray, cells: np.ndarray, times: np.ndarray) -> pd.DataFrame:
    order = np.lexsort((times, agents))
    agents, cells, times = agents[order], cells[order], times[order]
    user_ids = np.asarray([user_id_of(i) for i in range(len(world.agents))], dtype=object)
    districts = np.asarray([c.district_id for c in world.cells], dtype=object)
    lacs = np.asarray([c.lac_id for c in world.cells], dtype=object)
    cell_ids = np.asarray([c.cell_id for c in world.cells], dtype=object)
    lats = np.asarray([c.lat for c in world.cells], dtype=np.float64)
    lngs = np.asarray([c.lng for c in world.cells], dtype=np.float64)
    frame = pd.DataFrame({
        "user_id": user_ids[agents],
        "district_id": districts[cells],
        "lac_id": lacs[cells],
        "cell_id": cell_ids[cells],
        "lat": lats[cells],
        "lng": lngs[cells],
        "timestamp": times.astype(np.int64),
    })
    return frame[list(TRAJECTORY_COLUMNS)]


# ---------------------------------------------------------------------------
# Simulation loop
# ---------------------------------------------------------------------------

def simulate(world: World, clock: Optional[DayClock] = None) -> SimulationResult:
    """Run the day-by-day simulation.

    Per day:
        1. Place every agent hour by hour (home, work on weekdays, errands);
           agents diagnosed on or before today stay home.
        2. Count co-location hours with currently infectious agents.
        3. Infect susceptible agents with probability 1 - exp(-rate * exposure)
           and draw their diagnosis lag.
        4. Emit the day's trajectory records with noise.
        5. Record a daily snapshot.

    An agent is infectious from the day after infection until the day
    before diagnosis. Agents whose diagnosis falls after the horizon are
    labelled normal.
    """
    config = world.config
    clock = clock or DayClock()
    rng = np.random.default_rng(config.rng_seed + 1)
    n = len(world.agents)
    last_day = config.n_days - 1

    homes = np.asarray([a.home_cell for a in world.agents], dtype=np.int64)
    work_cells = np.asarray([a.work_cell for a in world.agents], dtype=np.int64)
    workers = np.asarray([a.works for a in world.agents], dtype=bool)
    noise = np.asarray([a.noise_s for a in world.agents], dtype=np.int64)
    hub_table, hub_cumw, district_row = _hub_tables(world)

    infected = np.zeros(n, dtype=bool)
    infection_day = np.full(n, -1, dtype=np.int64)
    confirmed_day = np.full(n, np.iinfo(np.int64).max, dtype=np.int64)

    events: List[SimulationEvent] = []
    seeds, seed_days, seed_lags = _seed_infections(rng, config)
    infected[seeds] = True
    infection_day[seeds] = seed_days
    confirmed_day[seeds] = seed_days + seed_lags
    for agent, day, lag in zip(seeds, seed_days, seed_lags):
        events.append(SimulationEvent(
            day=int(day),
            event_type="seed",
            description=f"Index infection, diagnosed after {int(lag)} days",
            user_id=user_id_of(int(agent)),
        ))

    daily_data: List[DailySnapshot] = []
    parts: List[Tuple[np.ndarray, np.ndarray, np.ndarray]] = []

    for day in range(config.n_days):
        # ---- Step 1: Hourly placement ----
        isolated = confirmed_day <= day
        weekday = clock.date_of(day).weekday() < 5
        loc = _hourly_cells(rng, world, homes, work_cells, workers, isolated, weekday,
                            hub_table, hub_cumw, district_row)

        # ---- Step 2: Exposure ----
        infectious = infected & (infection_day < day) & (day < confirmed_day)
        exposure = colocation_exposure(loc, infectious, config.n_cells)

        # ---- Step 3: Transmission (index cases are never reinfected) ----
        draws = rng.random(n)
        lags = rng.integers(config.diagnosis_lag_min, config.diagnosis_lag_max + 1, size=n)
        new = ~infected & (draws < infection_hazard(exposure, config))
        infected[new] = True
        infection_day[new] = day
        confirmed_day[new] = day + lags[new]
        for agent in np.flatnonzero(new):
            diagnosed = confirmed_day[agent] <= last_day
            events.append(SimulationEvent(
                day=day,
                event_type="infection",
                description=f"Infected after {exposure[agent]:.0f} co-located infectious hours"
                            + ("" if diagnosed else "; diagnosis falls after the horizon"),
                user_id=user_id_of(int(agent)),
                severity="warning" if diagnosed else "info",
            ))

        diagnosed_today = np.flatnonzero(confirmed_day == day)
        for agent in diagnosed_today:
            events.append(SimulationEvent(
                day=day,
                event_type="confirmed",
                description="Diagnosed; isolating at home",
                user_id=user_id_of(int(agent)),
                severity="danger",
            ))

        # ---- Step 4: Trajectory records ----
        part = _day_records(rng, loc, noise, clock.day_start(day), config)
        parts.append(part)

        # ---- Step 5: Snapshot ----
        snapshot = DailySnapshot(
            day=day,
            susceptible=int(np.sum(~infected)),
            infectious=int(np.sum(infectious)),
            new_infections=int(np.sum(new) + np.sum(infection_day[seeds] == day)),
            new_confirmed=int(diagnosed_today.size),
            confirmed_total=int(np.sum(confirmed_day <= day)),
            isolated=int(np.sum(isolated)),
            records=int(part[0].size),
        )
        daily_data.append(snapshot)
        log.debug(f"Day {day}: {snapshot.infectious} infectious, {snapshot.new_infections} new, "
                  f"{snapshot.new_confirmed} diagnosed")

    trajectories = _trajectory_frame(world, *(np.concatenate(p) for p in zip(*parts)))

    registry = CaseRegistry()
    for agent in range(n):
        user_id = user_id_of(agent)
        if confirmed_day[agent] <= last_day:
            registry.add(CaseEntry(user_id, CONFIRMED, int(confirmed_day[agent])))
        else:
            registry.add(CaseEntry(user_id, NORMAL))

    summary = _summarize(world, seeds, infected, daily_data, registry, len(trajectories))
    log.info(f"Simulated {config.n_days} days: {summary['confirmed']} confirmed of {n} agents "
             f"({summary['secondary_infections']} secondary infections), {summary['records']} records")
    return SimulationResult(
        trajectories=trajectories,
        registry=registry,
        daily_data=daily_data,
        events=sorted(events, key=lambda e: (e.day, e.user_id, e.event_type)),
        summary=summary,
    )


def _summarize(
    world: World,
    seeds: np.ndarray,
    infected: np.ndarray,
    daily_data: List[DailySnapshot],
    registry: CaseRegistry,
    records: int,
) -> dict:
    n = len(world.agents)
    confirmed = len(registry.confirmed())
    peak = max(daily_data, key=lambda s: s.infectious) if daily_data else None
    return {
        "agents": n,
        "cells": world.config.n_cells,
        "days": world.config.n_days,
        "seeded": int(seeds.size),
        "secondary_infections": int(infected.sum() - seeds.size),
        "infected": int(infected.sum()),
        "confirmed": confirmed,
        "confirmed_rate": round(confirmed / max(1, n), 6),
        "peak_infectious": peak.infectious if peak else 0,
        "peak_infectious_day": peak.day if peak else None,
        "records": records,
    }
