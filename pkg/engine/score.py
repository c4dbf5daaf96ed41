"""Personal risk scores: daily base score and windowed score over the incubation period."""

from __future__ import annotations
import logging
from concurrent.futures import ProcessPoolExecutor
from functools import partial
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

from .models import (
    CaseRegistry, DecayParams, PersonScoreSeries, RiskMap, ScoreConfig, StayFractionTable,
)
from .riskfield import case_weight

log = logging.getLogger(__name__)

RiskLookup = Mapping[int, Mapping[str, float]]  # day -> cell -> Fbar


def _mean(values: Sequence[float]) -> float:
    return sum(values) / len(values)


REDUCERS: Dict[str, Callable[[Sequence[float]], float]] = {
    "max": max,
    "sum": sum,
    "mean": _mean,
}


def risk_lookup(maps: Mapping[int, RiskMap]) -> Dict[int, Dict[str, float]]:
    return {day: m.risk_by_cell() for day, m in maps.items()}


def daily_score(
    table: StayFractionTable,
    user_id: str,
    risk: RiskLookup,
    gammas: Sequence[float],
    day_index: int,
    own: Optional[RiskLookup] = None,
) -> float:
    """y_p(k) = sum_i gamma_i sum_cell f_p(cell, k-i) * Fbar(cell, k-i).

    Missing days count as zero. `own` is subtracted from Fbar (clamped at
    zero) for leave-one-out scoring.
    """
    total = 0.0
    for i, gamma in enumerate(gammas):
        day = day_index - i
        fractions = table.get(user_id, day)
        field = risk.get(day)
        if not fractions or not field:
            continue
        own_field = own.get(day, {}) if own is not None else {}
        inner = 0.0
        for cell in sorted(fractions):
            value = field.get(cell, 0.0)
            if own_field:
                value = max(0.0, value - own_field.get(cell, 0.0))
            inner += fractions[cell] * value
        total += gamma * inner
    return total


def windowed_score(daily: Sequence[float], T: int = 14, reducer: str = "max") -> List[float]:
    """Reduce each trailing window of T + 1 daily scores, truncated at the start."""
    reduce = REDUCERS[reducer]
    return [reduce(daily[max(0, k - T):k + 1]) for k in range(len(daily))]


def own_contribution(
    table: StayFractionTable,
    registry: CaseRegistry,
    user_id: str,
    params: DecayParams,
    days: Sequence[int],
    horizons: Optional[Mapping[str, int]] = None,
) -> Dict[int, Dict[str, float]]:
    """The aggregated field one confirmed user adds to each day's map.

    Uses the same arithmetic order as the map itself, so a case that alone
    generates the field cancels exactly.
    """
    entry = registry.get(user_id)
    if entry is None or not entry.is_confirmed:
        return {}
    window = params.window
    lo, hi = min(days) - window + 1 - (len(params.viral_weights) - 1), max(days)
    base: Dict[int, Dict[str, float]] = {}
    for day in range(lo, hi + 1):
        weight = case_weight(entry, day, params, horizons)
        fractions = table.get(user_id, day)
        if weight == 0.0 or not fractions:
            continue
        base[day] = {cell: 0.0 + weight * fractions[cell] for cell in sorted(fractions)}

    own: Dict[int, Dict[str, float]] = {}
    for day in range(lo, hi + 1):
        cells = set()
        for i in range(window):
            cells.update(base.get(day - i, {}))
        if not cells:
            continue
        agg: Dict[str, float] = {}
        for cell in sorted(cells):
            total = 0.0
            for i, gamma in enumerate(params.outdoor_weights):
                total += gamma * base.get(day - i, {}).get(cell, 0.0)
            agg[cell] = total
        own[day] = agg
    return own


def score_user(
    table: StayFractionTable,
    user_id: str,
    risk: RiskLookup,
    params: DecayParams,
    config: ScoreConfig,
    days: Sequence[int],
    own: Optional[RiskLookup] = None,
    missing: bool = False,
) -> PersonScoreSeries:
    first, last = min(days), max(days)
    base = [daily_score(table, user_id, risk, params.viral_weights, day, own)
            for day in range(first, last + 1)]
    window = windowed_score(base, config.window_T, config.reducer)
    return PersonScoreSeries(user_id, first, tuple(base), tuple(window), config.window_T, missing)


def _score_chunk(
    user_ids: List[str],
    table: StayFractionTable,
    registry: CaseRegistry,
    risk: RiskLookup,
    params: DecayParams,
    config: ScoreConfig,
    days: Tuple[int, ...],
    horizons: Optional[Mapping[str, int]],
) -> List[PersonScoreSeries]:
    known = set(table.user_ids())
    out: List[PersonScoreSeries] = []
    for user_id in user_ids:
        own = None
        if config.leave_one_out and registry.is_confirmed(user_id):
            own = own_contribution(table, registry, user_id, params, days, horizons)
        out.append(score_user(table, user_id, risk, params, config, days, own,
                              missing=user_id not in known))
    return out


def _sub_table(table: StayFractionTable, user_ids: Sequence[str]) -> StayFractionTable:
    wanted = set(user_ids)
    part = StayFractionTable()
    for day in table.days():
        for user_id, fractions in table.users_on(day).items():
            if user_id in wanted:
                part.set(user_id, day, fractions)
    return part


def score_cohort(
    user_ids: Sequence[str],
    table: StayFractionTable,
    registry: CaseRegistry,
    maps: Mapping[int, RiskMap],
    params: DecayParams,
    config: ScoreConfig,
    days: Sequence[int],
    horizons: Optional[Mapping[str, int]] = None,
    workers: int = 1,
) -> Dict[str, PersonScoreSeries]:
    """Score series for every user over `days`.

    Users without any trajectory data get an all-zero series flagged as
    missing. With `config.leave_one_out` a confirmed user's own field
    contribution is removed before scoring them.
    """
    users = sorted(set(user_ids))
    if not users or not days:
        return {}
    risk = risk_lookup(maps)
    days = tuple(range(min(days), max(days) + 1))
    task = partial(_score_chunk, registry=registry, risk=risk, params=params,
                   config=config, days=days, horizons=horizons)

    if workers <= 1 or len(users) < 2 * workers:
        series = task(users, table)
    else:
        size = -(-len(users) // (workers * 4))
        chunks = [users[i:i + size] for i in range(0, len(users), size)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = pool.map(_run_score_job, [(task, c, _sub_table(table, c)) for c in chunks])
            series = [s for part in parts for s in part]

    missing = sum(1 for s in series if s.missing)
    if missing:
        log.warning(f"{missing} users have no trajectory data; scored as zero and flagged")
    log.info(f"Scored {len(series)} users over days {days[0]}..{days[-1]}")
    return {s.user_id: s for s in series}


def _run_score_job(job: Tuple[Callable, List[str], StayFractionTable]) -> List[PersonScoreSeries]:
    task, chunk, part = job
    return task(chunk, part)
