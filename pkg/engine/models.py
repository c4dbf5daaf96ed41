"""Data models for the trajectory risk engine."""

from __future__ import annotations
import datetime as _dt
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Dict, Iterator, List, NamedTuple, Optional, Tuple

from .errors import ConfigError

if TYPE_CHECKING:
    import pandas as pd

SECONDS_PER_DAY = 86400
UNIX_EPOCH = _dt.date(1970, 1, 1)

CONFIRMED = "confirmed"
NORMAL = "normal"
LABELS = (CONFIRMED, NORMAL)


# ---------------------------------------------------------------------------
# Trajectories
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrajectoryRecord:
    user_id: str
    district_id: str
    lac_id: str
    cell_id: str
    lat: float
    lng: float
    timestamp: int  # seconds since Unix epoch, UTC

    @property
    def cell_key(self) -> str:
        return make_cell_key(self.district_id, self.lac_id, self.cell_id)


def make_cell_key(district_id: str, lac_id: str, cell_id: str) -> str:
    return f"{district_id}|{lac_id}|{cell_id}"


@dataclass
class TrajectoryBatch:
    """Parsed trajectory rows, sorted by (user_id, timestamp, cell_key)."""
    records: List[TrajectoryRecord] = field(default_factory=list)
    rows_read: int = 0
    rejected: int = 0

    def by_user(self) -> Dict[str, List[TrajectoryRecord]]:
        grouped: Dict[str, List[TrajectoryRecord]] = {}
        for rec in self.records:
            grouped.setdefault(rec.user_id, []).append(rec)
        return grouped

    def user_ids(self) -> List[str]:
        return sorted({r.user_id for r in self.records})


@dataclass(frozen=True)
class DwellSegment:
    user_id: str
    cell_key: str
    lat: float
    lng: float
    start: int
    end: int

    @property
    def dwell(self) -> int:
        return self.end - self.start


@dataclass(frozen=True)
class TimeBucket:
    day_index: int
    utc_offset_seconds: int
    start: int  # epoch seconds of local midnight
    end: int

    @property
    def length(self) -> int:
        return self.end - self.start


@dataclass(frozen=True)
class DayClock:
    """Maps epoch seconds and calendar dates onto integer day indices.

    Day 0 is `epoch_date`; a day starts at local midnight for the fixed
    `utc_offset_seconds` (default +08:00).
    """
    epoch_date: _dt.date = _dt.date(2020, 1, 1)
    utc_offset_seconds: int = 8 * 3600

    @property
    def _epoch_days(self) -> int:
        return (self.epoch_date - UNIX_EPOCH).days

    def day_of(self, timestamp: int) -> int:
        return (timestamp + self.utc_offset_seconds) // SECONDS_PER_DAY - self._epoch_days

    def day_start(self, day_index: int) -> int:
        return (day_index + self._epoch_days) * SECONDS_PER_DAY - self.utc_offset_seconds

    def bucket(self, day_index: int) -> TimeBucket:
        start = self.day_start(day_index)
        return TimeBucket(day_index, self.utc_offset_seconds, start, start + SECONDS_PER_DAY)

    def day_of_date(self, date: _dt.date) -> int:
        return (date - self.epoch_date).days

    def date_of(self, day_index: int) -> _dt.date:
        return self.epoch_date + _dt.timedelta(days=day_index)


# ---------------------------------------------------------------------------
# Case registry
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CaseEntry:
    user_id: str
    label: str  # confirmed | normal
    confirmed_day: Optional[int] = None
    recovery_days: Optional[int] = None  # None -> DecayParams default

    @property
    def is_confirmed(self) -> bool:
        return self.label == CONFIRMED


@dataclass
class CaseRegistry:
    entries: Dict[str, CaseEntry] = field(default_factory=dict)
    rejected: int = 0

    def add(self, entry: CaseEntry) -> None:
        self.entries[entry.user_id] = entry

    def get(self, user_id: str) -> Optional[CaseEntry]:
        return self.entries.get(user_id)

    def confirmed(self) -> List[CaseEntry]:
        """Confirmed entries in canonical (sorted user id) order."""
        return [self.entries[u] for u in sorted(self.entries) if self.entries[u].is_confirmed]

    def normals(self) -> List[CaseEntry]:
        return [self.entries[u] for u in sorted(self.entries) if not self.entries[u].is_confirmed]

    def label_of(self, user_id: str) -> str:
        entry = self.entries.get(user_id)
        return entry.label if entry is not None else NORMAL

    def is_confirmed(self, user_id: str) -> bool:
        return self.label_of(user_id) == CONFIRMED

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[CaseEntry]:
        for user_id in sorted(self.entries):
            yield self.entries[user_id]


# ---------------------------------------------------------------------------
# Risk field
# ---------------------------------------------------------------------------

class StayFractionTable:
    """f_p(cell, day): per-user, per-day share of dwell time spent in each cell."""

    def __init__(self) -> None:
        self._days: Dict[int, Dict[str, Dict[str, float]]] = {}

    def set(self, user_id: str, day_index: int, fractions: Dict[str, float]) -> None:
        if not fractions:
            return
        self._days.setdefault(day_index, {})[user_id] = fractions

    def get(self, user_id: str, day_index: int) -> Dict[str, float]:
        return self._days.get(day_index, {}).get(user_id, {})

    def users_on(self, day_index: int) -> Dict[str, Dict[str, float]]:
        return self._days.get(day_index, {})

    def days(self) -> List[int]:
        return sorted(self._days)

    def user_ids(self) -> List[str]:
        users = set()
        for per_user in self._days.values():
            users.update(per_user)
        return sorted(users)

    def __contains__(self, key: Tuple[str, int]) -> bool:
        user_id, day_index = key
        return user_id in self._days.get(day_index, {})


class MapCell(NamedTuple):
    lat: float
    lng: float
    risk: float


@dataclass
class RiskMap:
    day_index: int
    cells: Dict[str, MapCell] = field(default_factory=dict)

    def risk(self, cell_key: str) -> float:
        cell = self.cells.get(cell_key)
        return cell.risk if cell is not None else 0.0

    def risk_by_cell(self) -> Dict[str, float]:
        return {key: cell.risk for key, cell in self.cells.items()}

    def total(self) -> float:
        return sum(self.cells[k].risk for k in sorted(self.cells))


# ---------------------------------------------------------------------------
# Personal scores and detection
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PersonScoreSeries:
    user_id: str
    first_day: int
    base: Tuple[float, ...]
    window: Tuple[float, ...]
    window_T: int
    missing: bool = False  # user had no trajectory data at all

    @property
    def last_day(self) -> int:
        return self.first_day + len(self.base) - 1

    def covers(self, day_index: int) -> bool:
        return self.first_day <= day_index <= self.last_day

    def base_at(self, day_index: int) -> float:
        return self.base[day_index - self.first_day]

    def window_at(self, day_index: int) -> float:
        return self.window[day_index - self.first_day]


@dataclass(frozen=True)
class DetectionOutcome:
    user_id: str
    score: float
    p_value: float
    suspected: bool
    threshold: float


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class DetectionMetrics:
    """DR, FAR and ACC; None where the denominator is zero."""
    dr: Optional[float]
    far: Optional[float]
    acc: Optional[float]
    counts: ConfusionCounts = ConfusionCounts()


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass
class IngestConfig:
    epoch_date: _dt.date = _dt.date(2020, 1, 1)
    utc_offset_seconds: int = 8 * 3600
    terminal_dwell_s: int = 3600

    def clock(self) -> DayClock:
        return DayClock(self.epoch_date, self.utc_offset_seconds)

    def validate(self) -> None:
        if self.terminal_dwell_s <= 0:
            raise ConfigError("terminal_dwell_s must be positive")
        if abs(self.utc_offset_seconds) >= SECONDS_PER_DAY:
            raise ConfigError("utc_offset_seconds must be within one day")


@dataclass
class CleaningConfig:
    aba_window_s: int = 120
    speed_cut_kmh: float = 38.0
    min_dwell_s: int = 300
    kmeans_k: int = 2
    kmeans_max_iter: int = 100

    def validate(self) -> None:
        for name in ("aba_window_s", "speed_cut_kmh", "min_dwell_s", "kmeans_k", "kmeans_max_iter"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")


def outdoor_weights(window: int = 3, base: float = 50.0) -> Tuple[float, ...]:
    """Gamma_i = base * 2^(window - 1 - i): viable virus halves each day."""
    return tuple(base * 2.0 ** (window - 1 - i) for i in range(window))


def viral_weights(window: int = 3) -> Tuple[float, ...]:
    """gamma_i = 10^-i."""
    return tuple(1.0 / 10 ** i for i in range(window))


@dataclass
class DecayParams:
    incubation_T: int = 14
    outdoor_weights: Tuple[float, ...] = field(default_factory=outdoor_weights)
    viral_weights: Tuple[float, ...] = field(default_factory=viral_weights)
    recovery_days: int = 10
    include_diagnosis_day: bool = False
    recovery_by_district: Dict[str, int] = field(default_factory=dict)

    @property
    def window(self) -> int:
        return len(self.outdoor_weights)

    def validate(self) -> None:
        if self.incubation_T < 1:
            raise ConfigError("incubation_T must be >= 1")
        if self.recovery_days <= 0:
            raise ConfigError("recovery_days must be positive")
        if len(self.viral_weights) != len(self.outdoor_weights):
            raise ConfigError("outdoor_weights and viral_weights must have the same length")
        for name in ("outdoor_weights", "viral_weights"):
            weights = getattr(self, name)
            if not weights or any(w <= 0 for w in weights):
                raise ConfigError(f"{name} must be non-empty and positive")
            if any(a <= b for a, b in zip(weights, weights[1:])):
                raise ConfigError(f"{name} must be strictly decreasing")
        if any(d <= 0 for d in self.recovery_by_district.values()):
            raise ConfigError("recovery_by_district values must be positive")


@dataclass
class ScoreConfig:
    window_T: int = 14
    reducer: str = "max"  # max | sum | mean
    leave_one_out: bool = False

    def validate(self) -> None:
        if self.window_T < 0:
            raise ConfigError("window_T must be >= 0")
        if self.reducer not in ("max", "sum", "mean"):
            raise ConfigError(f"unknown reducer {self.reducer!r}")


@dataclass
class DetectionConfig:
    q: float = 0.95
    feature_days: int = 8
    max_depth: int = 8
    min_leaf: int = 5
    n_trees: int = 100
    max_features: int = 0  # 0 -> ceil(sqrt(d)) for forests
    split_fraction: float = 0.8
    sweep_rates: Tuple[float, ...] = (0.01, 0.03, 0.10, 0.23, 0.50)

    def validate(self) -> None:
        if not 0.0 < self.q < 1.0:
            raise ConfigError("q must lie in (0, 1)")
        if not 0.0 < self.split_fraction < 1.0:
            raise ConfigError("split_fraction must lie in (0, 1)")
        for name in ("feature_days", "max_depth", "min_leaf", "n_trees"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.max_features < 0:
            raise ConfigError("max_features must be >= 0")
        if any(not 0.0 < r < 1.0 for r in self.sweep_rates):
            raise ConfigError("sweep_rates must lie in (0, 1)")


@dataclass
class WorldConfig:
    grid_rows: int = 120
    grid_cols: int = 120
    cell_spacing_m: float = 800.0
    origin_lat: float = 30.5
    origin_lng: float = 114.3
    cells_per_lac: int = 10
    n_agents: int = 20000
    n_days: int = 28
    infection_rate: float = 0.03
    diagnosis_lag_min: int = 2
    diagnosis_lag_max: int = 14
    hazard_per_hour: float = 0.5
    contact_probability: float = 1e-4
    growth_rate: float = 0.1
    work_fraction: float = 0.7
    hubs_per_district: int = 2
    errand_probability: float = 0.4
    ping_probability: float = 0.3
    pingpong_probability: float = 0.1
    jitter_s: int = 600
    rng_seed: int = 42

    @property
    def n_cells(self) -> int:
        return self.grid_rows * self.grid_cols

    def validate(self) -> None:
        for name in ("grid_rows", "grid_cols", "cell_spacing_m", "cells_per_lac", "n_agents", "n_days"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not 0.0 < self.infection_rate < 1.0:
            raise ConfigError(f"infection_rate must lie in (0, 1), got {self.infection_rate}")
        if not 1 <= self.diagnosis_lag_min <= self.diagnosis_lag_max:
            raise ConfigError("diagnosis lag range must satisfy 1 <= min <= max")
        if self.n_days <= self.diagnosis_lag_max:
            raise ConfigError("n_days must exceed diagnosis_lag_max")
        for name in ("work_fraction", "errand_probability", "ping_probability", "pingpong_probability"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.hazard_per_hour < 0 or self.contact_probability < 0:
            raise ConfigError("hazard_per_hour and contact_probability must be >= 0")
        if not 0 <= self.jitter_s < 1800:
            raise ConfigError("jitter_s must lie in [0, 1800)")
        if self.hubs_per_district < 1:
            raise ConfigError("hubs_per_district must be >= 1")


@dataclass(frozen=True)
class AgentProfile:
    agent_id: int
    home_cell: int
    work_cell: int  # == home_cell for agents who stay home
    schedule: Tuple[Tuple[int, int, str], ...]  # (start_hour, end_hour, place)
    noise_s: int

    @property
    def works(self) -> bool:
        return any(place == "work" for _, _, place in self.schedule)


@dataclass(frozen=True)
class GridCell:
    index: int
    row: int
    col: int
    district_id: str
    lac_id: str
    cell_id: str
    lat: float
    lng: float

    @property
    def cell_key(self) -> str:
        return make_cell_key(self.district_id, self.lac_id, self.cell_id)


@dataclass
class World:
    config: "WorldConfig"
    cells: List[GridCell] = field(default_factory=list)
    agents: List[AgentProfile] = field(default_factory=list)
    hubs: Dict[str, Tuple[int, ...]] = field(default_factory=dict)  # district -> cells, by rank

    def cell_table(self) -> Dict[str, Tuple[float, float]]:
        table = {c.cell_key: (c.lat, c.lng) for c in self.cells}
        return {k: table[k] for k in sorted(table)}


@dataclass
class DailySnapshot:
    day: int
    susceptible: int
    infectious: int
    new_infections: int
    new_confirmed: int
    confirmed_total: int
    isolated: int
    records: int


@dataclass
class SimulationEvent:
    day: int
    event_type: str  # seed, infection, confirmed
    description: str
    user_id: str = ""
    severity: str = "info"  # info, warning, danger


@dataclass
class SimulationResult:
    trajectories: "pd.DataFrame"
    registry: "CaseRegistry"
    daily_data: List[DailySnapshot] = field(default_factory=list)
    events: List[SimulationEvent] = field(default_factory=list)
    summary: dict = field(default_factory=dict)


@dataclass
class RunConfig:
    ingest: IngestConfig = field(default_factory=IngestConfig)
    cleaning: CleaningConfig = field(default_factory=CleaningConfig)
    decay: DecayParams = field(default_factory=DecayParams)
    score: ScoreConfig = field(default_factory=ScoreConfig)
    detection: DetectionConfig = field(default_factory=DetectionConfig)
    world: WorldConfig = field(default_factory=WorldConfig)
    seed: int = 42
    workers: int = 1

    def validate(self) -> None:
        for section in (self.ingest, self.cleaning, self.decay, self.score, self.detection, self.world):
            section.validate()
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
