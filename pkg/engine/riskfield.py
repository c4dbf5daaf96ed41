"""Risk field: stay fractions, decay weights, base and aggregated maps, region risk."""

from __future__ import annotations
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from functools import partial
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import RegistryError
from .geo import haversine_many
from .ingest import split_at_midnight
from .models import (
    CaseEntry, CaseRegistry, DayClock, DecayParams, DwellSegment,
    MapCell, RiskMap, StayFractionTable,
)

log = logging.getLogger(__name__)

BaseField = Dict[str, float]


# ---------------------------------------------------------------------------
# Stay fractions
# ---------------------------------------------------------------------------

def stay_fractions(segments: Iterable[DwellSegment], day_index: int, clock: DayClock) -> Dict[str, float]:
    """Share of one user's dwell time on `day_index` spent in each cell.

    Segments are clipped to the day, so unsplit segments work too. Empty when
    the user has no dwell that day.
    """
    bucket = clock.bucket(day_index)
    dwell: Dict[str, int] = {}
    for seg in segments:
        start = max(seg.start, bucket.start)
        end = min(seg.end, bucket.end)
        if end > start:
            dwell[seg.cell_key] = dwell.get(seg.cell_key, 0) + (end - start)
    return _normalize(dwell)


def _normalize(dwell: Mapping[str, int]) -> Dict[str, float]:
    total = sum(dwell.values())
    if total <= 0:
        return {}
    return {cell: dwell[cell] / total for cell in sorted(dwell)}


def build_stay_table(segments_by_user: Mapping[str, Sequence[DwellSegment]], clock: DayClock) -> StayFractionTable:
    table = StayFractionTable()
    for user_id in sorted(segments_by_user):
        per_day: Dict[int, List[DwellSegment]] = {}
        for piece in split_at_midnight(segments_by_user[user_id], clock):
            per_day.setdefault(clock.day_of(piece.start), []).append(piece)
        for day, pieces in per_day.items():
            table.set(user_id, day, stay_fractions(pieces, day, clock))
    log.info(f"Stay fractions for {len(segments_by_user)} users over {len(table.days())} days")
    return table


def home_districts(table: StayFractionTable) -> Dict[str, str]:
    """District of the cell each user spends most of their time in."""
    totals: Dict[str, Dict[str, float]] = {}
    for day in table.days():
        for user_id, fractions in table.users_on(day).items():
            acc = totals.setdefault(user_id, {})
            for cell, f in fractions.items():
                acc[cell] = acc.get(cell, 0.0) + f
    homes: Dict[str, str] = {}
    for user_id, acc in totals.items():
        cell = max(sorted(acc), key=lambda c: acc[c])
        homes[user_id] = cell.split("|", 1)[0]
    return homes


# ---------------------------------------------------------------------------
# Decay and case activity
# ---------------------------------------------------------------------------

def incubation_decay(s: int, T: int = 14, include_diagnosis_day: bool = False) -> float:
    """delta_s = exp(-1 / (T + 1 - s)) for 1 <= s <= T, zero outside.

    s = 0 (the diagnosis day) only counts when `include_diagnosis_day` is set.
    """
    if 1 <= s <= T:
        return math.exp(-1.0 / (T + 1 - s))
    if s == 0 and include_diagnosis_day:
        return math.exp(-1.0 / (T + 1))
    return 0.0


def days_to_diagnosis(entry: CaseEntry, day_index: int) -> int:
    if not entry.is_confirmed or entry.confirmed_day is None:
        raise RegistryError(f"user {entry.user_id} is not a confirmed case")
    return entry.confirmed_day - day_index


def resolve_recovery(
    registry: CaseRegistry,
    params: DecayParams,
    districts: Optional[Mapping[str, str]] = None,
) -> Dict[str, int]:
    """Recovery horizon per confirmed case: registry value, then district override, then default."""
    horizons: Dict[str, int] = {}
    for entry in registry.confirmed():
        if entry.recovery_days is not None:
            horizons[entry.user_id] = entry.recovery_days
            continue
        district = (districts or {}).get(entry.user_id)
        horizons[entry.user_id] = params.recovery_by_district.get(district, params.recovery_days)
    return horizons


def apply_recovery(
    registry: CaseRegistry,
    day_index: int,
    recovery_days: int = 10,
    horizons: Optional[Mapping[str, int]] = None,
) -> List[CaseEntry]:
    """Confirmed cases still counted on `day_index`, in canonical order.

    A case drops out once day_index >= confirmed_day + its recovery horizon;
    a per-case entry in `horizons` or on the registry entry wins over the default.
    """
    active: List[CaseEntry] = []
    for entry in registry.confirmed():
        horizon = entry.recovery_days or recovery_days
        if horizons is not None and entry.user_id in horizons:
            horizon = horizons[entry.user_id]
        if day_index < entry.confirmed_day + horizon:
            active.append(entry)
    return active


# ---------------------------------------------------------------------------
# Fields
# ---------------------------------------------------------------------------

def case_weight(entry: CaseEntry, day_index: int, params: DecayParams,
                horizons: Optional[Mapping[str, int]] = None) -> float:
    """delta_s for one case on one day, zero once the case has recovered."""
    horizon = entry.recovery_days or params.recovery_days
    if horizons is not None and entry.user_id in horizons:
        horizon = horizons[entry.user_id]
    if day_index >= entry.confirmed_day + horizon:
        return 0.0
    s = days_to_diagnosis(entry, day_index)
    return incubation_decay(s, params.incubation_T, params.include_diagnosis_day)


def base_field(
    table: StayFractionTable,
    registry: CaseRegistry,
    params: DecayParams,
    day_index: int,
    horizons: Optional[Mapping[str, int]] = None,
) -> BaseField:
    """F(cell, k) = sum over active confirmed p of delta_s(p,k) * f_p(cell, k).

    Accumulates in sorted case id, then sorted cell order.
    """
    field: BaseField = {}
    for entry in apply_recovery(registry, day_index, params.recovery_days, horizons):
        weight = case_weight(entry, day_index, params, horizons)
        if weight == 0.0:
            continue
        fractions = table.get(entry.user_id, day_index)
        for cell in sorted(fractions):
            field[cell] = field.get(cell, 0.0) + weight * fractions[cell]
    return field


def aggregate_field(
    base_fields: Sequence[Optional[BaseField]],
    gammas: Sequence[float],
    day_index: int,
    cells: Mapping[str, Tuple[float, float]],
) -> RiskMap:
    """Fbar(cell, k) = sum_i Gamma_i F(cell, k - i).

    `base_fields[i]` is the base field of day k - i; missing or None entries
    count as zero fields. Every cell of `cells` appears in the map.
    """
    present = [f for f in base_fields if f]
    unknown = set().union(*present) - cells.keys() if present else set()
    if unknown:
        raise ValueError(f"cells without coordinates: {sorted(unknown)[:5]}")

    risk_map = RiskMap(day_index)
    for cell in sorted(cells):
        total = 0.0
        for i, gamma in enumerate(gammas):
            f = base_fields[i] if i < len(base_fields) else None
            total += gamma * (f.get(cell, 0.0) if f else 0.0)
        lat, lng = cells[cell]
        risk_map.cells[cell] = MapCell(lat, lng, total)
    return risk_map


def _confirmed_slice(table: StayFractionTable, registry: CaseRegistry, day_index: int) -> StayFractionTable:
    part = StayFractionTable()
    for entry in registry.confirmed():
        fractions = table.get(entry.user_id, day_index)
        if fractions:
            part.set(entry.user_id, day_index, fractions)
    return part


def _base_field_task(item: Tuple[int, StayFractionTable], registry: CaseRegistry,
                     params: DecayParams, horizons: Optional[Mapping[str, int]]) -> Tuple[int, BaseField]:
    day_index, part = item
    return day_index, base_field(part, registry, params, day_index, horizons)


def build_base_fields(
    table: StayFractionTable,
    registry: CaseRegistry,
    params: DecayParams,
    days: Sequence[int],
    horizons: Optional[Mapping[str, int]] = None,
    workers: int = 1,
) -> Dict[int, BaseField]:
    items = [(day, _confirmed_slice(table, registry, day)) for day in sorted(set(days))]
    task = partial(_base_field_task, registry=registry, params=params, horizons=horizons)
    if workers <= 1 or len(items) < 2:
        results = [task(item) for item in items]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(task, items))
    return dict(results)


def build_risk_maps(
    table: StayFractionTable,
    registry: CaseRegistry,
    params: DecayParams,
    days: Sequence[int],
    cells: Mapping[str, Tuple[float, float]],
    horizons: Optional[Mapping[str, int]] = None,
    workers: int = 1,
) -> Tuple[Dict[int, RiskMap], Dict[int, BaseField]]:
    """Risk maps for `days`, computing base fields for the look-back days too."""
    if not days:
        return {}, {}
    window = params.window
    needed = range(min(days) - window + 1, max(days) + 1)
    fields = build_base_fields(table, registry, params, needed, horizons, workers)
    maps = {
        day: aggregate_field([fields.get(day - i) for i in range(window)],
                             params.outdoor_weights, day, cells)
        for day in sorted(set(days))
    }
    log.info(f"Built {len(maps)} risk maps over {len(cells)} cells "
             f"from {len(registry.confirmed())} confirmed cases")
    return maps, fields


# ---------------------------------------------------------------------------
# Regional analysis
# ---------------------------------------------------------------------------

def region_risk(risk_map: RiskMap, lat: float, lng: float, radius_m: float) -> float:
    """Sum of cell risk within `radius_m` of (lat, lng)."""
    if radius_m <= 0:
        raise ValueError("radius_m must be positive")
    cells = [risk_map.cells[k] for k in sorted(risk_map.cells)]
    if not cells:
        return 0.0
    distances = haversine_many(lat, lng, np.asarray([c.lat for c in cells]), np.asarray([c.lng for c in cells]))
    total = 0.0
    for cell, distance in zip(cells, distances):
        if distance <= radius_m:
            total += cell.risk
    return total


def regional_series(maps: Mapping[int, RiskMap], lat: float, lng: float, radius_m: float) -> List[Tuple[int, float]]:
    return [(day, region_risk(maps[day], lat, lng, radius_m)) for day in sorted(maps)]


def confirmed_counts(
    registry: CaseRegistry,
    days: Sequence[int],
    mode: str = "active",
    recovery_days: int = 10,
    horizons: Optional[Mapping[str, int]] = None,
) -> List[int]:
    """Daily confirmed counts: cumulative, or active (diagnosed, not yet recovered)."""
    if mode not in ("active", "cumulative"):
        raise ValueError(f"unknown count mode {mode!r}")
    cases = registry.confirmed()
    counts: List[int] = []
    for day in days:
        n = 0
        for entry in cases:
            if entry.confirmed_day > day:
                continue
            if mode == "active":
                horizon = (horizons or {}).get(entry.user_id, entry.recovery_days or recovery_days)
                if day >= entry.confirmed_day + horizon:
                    continue
            n += 1
        counts.append(n)
    return counts


def risk_case_correlation(
    maps: Mapping[int, RiskMap],
    registry: CaseRegistry,
    mode: str = "active",
    recovery_days: int = 10,
    center: Optional[Tuple[float, float, float]] = None,
    horizons: Optional[Mapping[str, int]] = None,
) -> Optional[float]:
    """Pearson correlation of daily (regional) risk against confirmed counts.

    `center` is (lat, lng, radius_m); the whole map is summed when None.
    `horizons` are the per-case recovery horizons the maps were built with.
    Returns None when either series is constant or fewer than two days exist.
    """
    days = sorted(maps)
    if len(days) < 2:
        return None
    if center is None:
        risk = [maps[d].total() for d in days]
    else:
        risk = [value for _, value in regional_series(maps, *center)]
    counts = confirmed_counts(registry, days, mode, recovery_days, horizons)
    x = np.asarray(risk, dtype=np.float64)
    y = np.asarray(counts, dtype=np.float64)
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        return None
    return float(np.corrcoef(x, y)[0, 1])


def risk_spread(
    maps: Mapping[int, RiskMap],
    sites: Sequence[Tuple[float, float]],
    radius_m: float,
) -> Dict[int, Tuple[float, float, float, float, float]]:
    """Per-day five-number summary (min, q1, median, q3, max) of region risk over sites."""
    if not sites:
        return {}
    spread: Dict[int, Tuple[float, float, float, float, float]] = {}
    for day in sorted(maps):
        values = np.asarray([region_risk(maps[day], lat, lng, radius_m) for lat, lng in sites])
        q = np.percentile(values, [0, 25, 50, 75, 100])
        spread[day] = tuple(float(v) for v in q)
    return spread
