"""Evaluation cohorts, data splitting, the infection-rate sweep and corpus summaries."""

from __future__ import annotations
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .detect import (
    NEGATIVE, POSITIVE,
    build_features, critical_value, detect_stat, detection_rate_by_day, fit_ecdf, metrics, stratified_split,
)
from .errors import DetectionError
from .geo import category_radius
from .models import (
    CaseEntry, CaseRegistry, DetectionConfig, DetectionMetrics, DetectionOutcome, PersonScoreSeries, RiskMap,
    RunConfig,
)
from .riskfield import risk_case_correlation, risk_spread
from .trees import train_forest, train_tree

log = logging.getLogger(__name__)

METHODS = ("stat", "tree", "forest")

CorpusSource = Callable[[float], Tuple[Mapping[str, PersonScoreSeries], CaseRegistry]]


@dataclass
class Cohort:
    """Users eligible for evaluation, each with a reference day."""
    user_ids: List[str] = field(default_factory=list)
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    scores: np.ndarray = field(default_factory=lambda: np.zeros(0))  # windowed score on the reference day
    features: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    reference_day: Dict[str, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.user_ids)

    @property
    def n_confirmed(self) -> int:
        return int(np.sum(self.labels == POSITIVE))

    @property
    def n_normal(self) -> int:
        return int(np.sum(self.labels == NEGATIVE))

    def subset(self, rows: Sequence[int]) -> "Cohort":
        rows = np.sort(np.asarray(rows, dtype=np.int64))
        users = [self.user_ids[i] for i in rows]
        return Cohort(
            user_ids=users,
            labels=self.labels[rows],
            scores=self.scores[rows],
            features=self.features[rows],
            reference_day={u: self.reference_day[u] for u in users},
        )


@dataclass
class MethodResult:
    method: str
    metrics: DetectionMetrics
    seconds: float
    threshold: Optional[float] = None


@dataclass
class SweepRow:
    rate: float
    method: str
    acc: Optional[float]
    dr: Optional[float]
    far: Optional[float]
    seconds: float
    confirmed: int
    normal: int
    n_train: int
    n_test: int


# ---------------------------------------------------------------------------
# Reference days and cohorts
# ---------------------------------------------------------------------------

def _covered(s: PersonScoreSeries, day: int, feature_days: int) -> bool:
    return s.covers(day - feature_days + 1) and s.covers(day)


def reference_days(
    series: Mapping[str, PersonScoreSeries],
    registry: CaseRegistry,
    seed: int,
    feature_days: int = 1,
) -> Dict[str, int]:
    """Evaluation day per user.

    A confirmed user is evaluated the day before diagnosis. Each normal user
    gets a day drawn from the confirmed users' reference days, so both groups
    are scored over the same stretch of the outbreak. Users whose feature
    window falls outside their score series are left out.
    """
    days: Dict[str, int] = {}
    for entry in registry.confirmed():
        s = series.get(entry.user_id)
        if s is None:
            continue
        day = entry.confirmed_day - 1
        if _covered(s, day, feature_days):
            days[entry.user_id] = day
    if not days:
        raise DetectionError("no confirmed user has scores covering the day before diagnosis")

    pool = np.asarray(sorted(days.values()), dtype=np.int64)
    normals = [u for u in sorted(series) if not registry.is_confirmed(u)]
    rng = np.random.default_rng(seed)
    draws = rng.choice(pool, size=len(normals), replace=True)
    dropped = 0
    for user_id, day in zip(normals, draws):
        if _covered(series[user_id], int(day), feature_days):
            days[user_id] = int(day)
        else:
            dropped += 1
    if dropped:
        log.warning(f"{dropped} normal users lack score coverage at their reference day; left out")
    return days


def build_cohort(
    series: Mapping[str, PersonScoreSeries],
    registry: CaseRegistry,
    feature_days: int,
    seed: int,
) -> Cohort:
    ref = reference_days(series, registry, seed, feature_days)
    users, features, labels = build_features(series, registry, feature_days, ref, sorted(ref))
    scores = np.asarray([series[u].window_at(ref[u]) for u in users], dtype=np.float64)
    cohort = Cohort(users, labels, scores, features, ref)
    log.info(f"Cohort: {cohort.n_confirmed} confirmed, {cohort.n_normal} normal")
    return cohort


def subsample_to_rate(cohort: Cohort, rate: float, seed: int) -> Cohort:
    """Drop normal users (or, failing that, confirmed users) until confirmed/total == rate."""
    if not 0.0 < rate < 1.0:
        raise DetectionError(f"rate must lie in (0, 1), got {rate}")
    pos = np.flatnonzero(cohort.labels == POSITIVE)
    neg = np.flatnonzero(cohort.labels == NEGATIVE)
    rng = np.random.default_rng(seed)
    want_neg = int(round(pos.size * (1.0 - rate) / rate))
    if want_neg <= neg.size:
        keep_neg = rng.choice(neg, size=want_neg, replace=False)
        keep_pos = pos
    else:
        want_pos = int(round(neg.size * rate / (1.0 - rate)))
        if want_pos < 2:
            raise DetectionError(f"rate {rate} leaves fewer than 2 confirmed users")
        keep_pos = rng.choice(pos, size=want_pos, replace=False)
        keep_neg = neg
    if keep_pos.size < 2 or keep_neg.size < 2:
        raise DetectionError(f"rate {rate} cannot be reached with {pos.size} confirmed and {neg.size} normal users")
    return cohort.subset(np.concatenate([keep_pos, keep_neg]))


def split_by_confirmed_date(registry: CaseRegistry, cutoff_day: int) -> Tuple[List[CaseEntry], List[CaseEntry]]:
    """Confirmed cases diagnosed on or before `cutoff_day`, and those after."""
    confirmed = registry.confirmed()
    before = [e for e in confirmed if e.confirmed_day <= cutoff_day]
    after = [e for e in confirmed if e.confirmed_day > cutoff_day]
    return before, after


def stratified_sample(
    user_ids: Sequence[str],
    strata: Mapping[str, str],
    n: int,
    seed: int,
) -> List[str]:
    """`n` users spread over strata in proportion to stratum size (largest remainder)."""
    groups: Dict[str, List[str]] = {}
    for user_id in sorted(user_ids):
        groups.setdefault(strata.get(user_id, ""), []).append(user_id)
    total = sum(len(g) for g in groups.values())
    if n > total:
        raise DetectionError(f"cannot sample {n} of {total} users")
    keys = sorted(groups)
    quotas = {k: n * len(groups[k]) / total for k in keys}
    alloc = {k: int(math.floor(quotas[k])) for k in keys}
    short = n - sum(alloc.values())
    for k in sorted(keys, key=lambda k: (-(quotas[k] - alloc[k]), k))[:short]:
        alloc[k] += 1

    rng = np.random.default_rng(seed)
    picked: List[str] = []
    for k in keys:
        if alloc[k]:
            idx = rng.choice(len(groups[k]), size=alloc[k], replace=False)
            picked.extend(groups[k][i] for i in idx)
    return sorted(picked)


# ---------------------------------------------------------------------------
# Methods
# ---------------------------------------------------------------------------

def run_methods(
    cohort: Cohort,
    config: DetectionConfig,
    seed: int,
    methods: Sequence[str] = METHODS,
    workers: int = 1,
) -> Dict[str, MethodResult]:
    """Train on a stratified split and report held-out metrics per method."""
    train, test = stratified_split(cohort.labels, config.split_fraction, seed)
    if not np.any(cohort.labels[train] == NEGATIVE):
        raise DetectionError("training split holds no normal users")
    results: Dict[str, MethodResult] = {}
    test_labels = {cohort.user_ids[i]: int(cohort.labels[i]) for i in test}

    for method in methods:
        started = time.perf_counter()
        threshold = None
        if method == "stat":
            normals = train[cohort.labels[train] == NEGATIVE]
            cdf = fit_ecdf(cohort.scores[normals])
            threshold = critical_value(cdf, config.q)
            scores = {cohort.user_ids[i]: float(cohort.scores[i]) for i in test}
            flags = detect_stat(scores, threshold, cdf)
        elif method == "tree":
            model = train_tree(cohort.features[train], cohort.labels[train], config.max_depth, config.min_leaf)
            flags = _flags(cohort, test, model.predict(cohort.features[test]))
        elif method == "forest":
            model = train_forest(cohort.features[train], cohort.labels[train], config.n_trees,
                                 config.max_depth, config.min_leaf, config.max_features,
                                 seed=seed, workers=workers)
            flags = _flags(cohort, test, model.predict(cohort.features[test]))
        else:
            raise DetectionError(f"unknown method {method!r}")
        scored = metrics(flags, test_labels)
        results[method] = MethodResult(method, scored, time.perf_counter() - started, threshold)
        log.info(f"{method}: ACC={_pct(scored.acc)} DR={_pct(scored.dr)} FAR={_pct(scored.far)}")
    return results


def _flags(cohort: Cohort, rows: np.ndarray, predictions: np.ndarray) -> Dict[str, bool]:
    return {cohort.user_ids[i]: bool(p == POSITIVE) for i, p in zip(rows, predictions)}


def _pct(value: Optional[float]) -> str:
    return "n/a" if value is None else f"{value * 100:.2f}%"


# ---------------------------------------------------------------------------
# Sweep
# ---------------------------------------------------------------------------

def evaluate_sweep(
    rates: Sequence[float],
    corpus_for: CorpusSource,
    config: DetectionConfig,
    seed: int,
    methods: Sequence[str] = METHODS,
    workers: int = 1,
) -> List[SweepRow]:
    """Per infection rate: build a cohort, bring it to the exact rate, and score every method.

    `corpus_for(rate)` returns (score series, registry) for a corpus simulated
    at (or containing enough cases for) that rate.
    """
    rows: List[SweepRow] = []
    for rate in rates:
        if not 0.0 < rate < 1.0:
            raise DetectionError(f"rate must lie in (0, 1), got {rate}")
        series, registry = corpus_for(rate)
        cohort = build_cohort(series, registry, config.feature_days, seed)
        cohort = subsample_to_rate(cohort, rate, seed)
        train, test = stratified_split(cohort.labels, config.split_fraction, seed)
        for method, result in run_methods(cohort, config, seed, methods, workers).items():
            m = result.metrics
            rows.append(SweepRow(rate, method, m.acc, m.dr, m.far, round(result.seconds, 3),
                                 cohort.n_confirmed, cohort.n_normal, int(train.size), int(test.size)))
        log.info(f"Rate {rate:.0%}: {cohort.n_confirmed} confirmed, {cohort.n_normal} normal")
    return rows


def sweep_table(rows: Sequence[SweepRow]) -> List[Dict[str, Any]]:
    return [asdict(r) for r in rows]


def compare_rates(rows: Sequence[SweepRow]) -> Dict[str, Any]:
    """ACC per method by rate, with the change between consecutive rates."""

    def _safe_diff(a: Optional[float], b: Optional[float]) -> Optional[float]:
        if a is None or b is None:
            return None
        return round(b - a, 6)

    by_method: Dict[str, List[SweepRow]] = {}
    for row in rows:
        by_method.setdefault(row.method, []).append(row)
    comparison: Dict[str, Any] = {"acc": {}, "deltas": {}, "inversions": {}}
    for method, method_rows in sorted(by_method.items()):
        ordered = sorted(method_rows, key=lambda r: r.rate)
        comparison["acc"][method] = {r.rate: r.acc for r in ordered}
        deltas = [_safe_diff(a.acc, b.acc) for a, b in zip(ordered, ordered[1:])]
        comparison["deltas"][method] = deltas
        comparison["inversions"][method] = sum(1 for d in deltas if d is not None and d > 0)
    return comparison


# ---------------------------------------------------------------------------
# Corpus summary
# ---------------------------------------------------------------------------

SPREAD_SITES = 100


def _share_flagged(outcomes: Sequence[DetectionOutcome], entries: Sequence[CaseEntry]) -> Optional[float]:
    ids = {e.user_id for e in entries}
    hits = [o.suspected for o in outcomes if o.user_id in ids]
    return sum(hits) / len(hits) if hits else None


def corpus_summary(
    maps: Mapping[int, RiskMap],
    series: Mapping[str, PersonScoreSeries],
    registry: CaseRegistry,
    cells: Mapping[str, Tuple[float, float]],
    config: RunConfig,
    horizons: Optional[Mapping[str, int]] = None,
) -> Dict[str, Any]:
    """How one corpus's risk maps track its cases, and when the ECDF test catches them.

    The ECDF threshold is fitted on every normal user's windowed score at the
    reference day; confirmed users are tested the day before diagnosis.
    Region risk is summed over up to SPREAD_SITES cells drawn across districts.
    """
    correlation = {
        mode: risk_case_correlation(maps, registry, mode, config.decay.recovery_days, horizons=horizons)
        for mode in ("active", "cumulative")
    }
    districts = {key: key.split("|", 1)[0] for key in cells}
    sites = stratified_sample(list(cells), districts, min(SPREAD_SITES, len(cells)), config.seed)
    radius = category_radius("random")
    spread = risk_spread(maps, [cells[key] for key in sites], radius)

    cohort = build_cohort(series, registry, 1, config.seed)
    normals = cohort.labels == NEGATIVE
    cdf = fit_ecdf(cohort.scores[normals])
    threshold = critical_value(cdf, config.detection.q)
    confirmed = {cohort.user_ids[i]: float(cohort.scores[i]) for i in np.flatnonzero(~normals)}
    outcomes = detect_stat(confirmed, threshold, cdf)

    diagnosis_days = sorted(e.confirmed_day for e in registry.confirmed())
    cutoff = diagnosis_days[(len(diagnosis_days) - 1) // 2]
    early, late = split_by_confirmed_date(registry, cutoff)
    return {
        "risk_case_correlation": correlation,
        "risk_spread": {
            "radius_m": radius,
            "sites": len(sites),
            "days": {day: list(summary) for day, summary in spread.items()},
        },
        "stat": {
            "threshold": threshold,
            "q": config.detection.q,
            "normals": int(np.sum(normals)),
            "detection_rate_by_day": detection_rate_by_day(outcomes, registry),
            "cutoff_day": cutoff,
            "detection_rate_early": _share_flagged(outcomes, early),
            "detection_rate_late": _share_flagged(outcomes, late),
        },
    }
