"""Suspected-case detection by an empirical-CDF test, plus DR/FAR/ACC bookkeeping."""

from __future__ import annotations
import logging
import math
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import DetectionError
from .models import (
    CaseRegistry, ConfusionCounts, DetectionMetrics, DetectionOutcome, PersonScoreSeries,
)

log = logging.getLogger(__name__)

POSITIVE = 1   # diagnosed
NEGATIVE = -1  # healthy


class EmpiricalCdf:
    """F0_hat(x) = (# samples <= x) / n over normal-group scores."""

    def __init__(self, sample: Sequence[float]):
        values = np.sort(np.asarray(sample, dtype=np.float64), kind="stable")
        if values.size == 0:
            raise DetectionError("empirical CDF needs a non-empty sample")
        self.sample = values

    @property
    def n(self) -> int:
        return int(self.sample.size)

    def __call__(self, x: float) -> float:
        return float(np.searchsorted(self.sample, x, side="right")) / self.n

    def evaluate(self, xs: Sequence[float]) -> np.ndarray:
        return np.searchsorted(self.sample, np.asarray(xs, dtype=np.float64), side="right") / self.n


def fit_ecdf(scores: Sequence[float]) -> EmpiricalCdf:
    return EmpiricalCdf(scores)


def critical_value(cdf: EmpiricalCdf, q: float = 0.95) -> float:
    """The ceil(q * n)-th order statistic of the sample, no interpolation."""
    if not 0.0 < q < 1.0:
        raise DetectionError(f"q must lie in (0, 1), got {q}")
    rank = math.ceil(round(q * cdf.n, 9))
    rank = min(max(rank, 1), cdf.n)
    return float(cdf.sample[rank - 1])


def p_value(cdf: EmpiricalCdf, score: float) -> float:
    return 1.0 - cdf(score)


def detect_stat(scores: Mapping[str, float], threshold: float, cdf: EmpiricalCdf) -> List[DetectionOutcome]:
    """Flag a user as suspected iff their score is strictly above `threshold`."""
    if not math.isfinite(threshold):
        raise DetectionError("threshold must be finite")
    users = sorted(scores)
    values = np.asarray([scores[u] for u in users], dtype=np.float64)
    p_values = 1.0 - cdf.evaluate(values)
    return [
        DetectionOutcome(u, float(v), float(p), bool(v > threshold), threshold)
        for u, v, p in zip(users, values, p_values)
    ]


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def confusion_counts(predicted: Sequence[bool], actual: Sequence[bool]) -> ConfusionCounts:
    pred = np.asarray(predicted, dtype=bool)
    act = np.asarray(actual, dtype=bool)
    if pred.shape != act.shape:
        raise DetectionError("predictions and labels differ in length")
    return ConfusionCounts(
        tp=int(np.sum(pred & act)),
        fp=int(np.sum(pred & ~act)),
        tn=int(np.sum(~pred & ~act)),
        fn=int(np.sum(~pred & act)),
    )


def metrics_from_counts(counts: ConfusionCounts) -> DetectionMetrics:
    """DR = tp/(tp+fn), FAR = fp/(fp+tn), ACC = (tp+tn)/total; None when undefined."""
    positives = counts.tp + counts.fn
    negatives = counts.fp + counts.tn
    dr = counts.tp / positives if positives else None
    far = counts.fp / negatives if negatives else None
    acc = (counts.tp + counts.tn) / counts.total if counts.total else None
    return DetectionMetrics(dr, far, acc, counts)


def metrics(
    outcomes: Union[Sequence[DetectionOutcome], Mapping[str, bool]],
    labels: Union[CaseRegistry, Mapping[str, int]],
) -> DetectionMetrics:
    """DR, FAR and ACC of detection outcomes against labels (+1 diagnosed, -1 healthy).

    `outcomes` is a list of DetectionOutcome or a user_id -> suspected mapping.
    """
    if isinstance(outcomes, Mapping):
        flagged = [(u, bool(outcomes[u])) for u in sorted(outcomes)]
    else:
        flagged = [(o.user_id, o.suspected) for o in outcomes]
    actual: List[bool] = []
    for user_id, _ in flagged:
        if isinstance(labels, CaseRegistry):
            actual.append(labels.is_confirmed(user_id))
        else:
            if user_id not in labels:
                raise DetectionError(f"no label for user {user_id}")
            actual.append(labels[user_id] == POSITIVE)
    return metrics_from_counts(confusion_counts([s for _, s in flagged], actual))


def detection_rate_by_day(outcomes: Sequence[DetectionOutcome], registry: CaseRegistry) -> Dict[int, float]:
    """Detection rate among confirmed users, grouped by diagnosis day."""
    hits: Dict[int, List[bool]] = {}
    for outcome in outcomes:
        entry = registry.get(outcome.user_id)
        if entry is None or not entry.is_confirmed:
            continue
        hits.setdefault(entry.confirmed_day, []).append(outcome.suspected)
    return {day: sum(v) / len(v) for day, v in sorted(hits.items())}


# ---------------------------------------------------------------------------
# Features
# ---------------------------------------------------------------------------

def label_vector(user_ids: Sequence[str], registry: CaseRegistry) -> np.ndarray:
    return np.asarray([POSITIVE if registry.is_confirmed(u) else NEGATIVE for u in user_ids], dtype=np.int64)


def build_features(
    series: Mapping[str, PersonScoreSeries],
    registry: CaseRegistry,
    feature_days: int,
    end_day: Union[int, Mapping[str, int]],
    user_ids: Optional[Sequence[str]] = None,
) -> Tuple[List[str], np.ndarray, np.ndarray]:
    """One row per user: the daily base scores of the `feature_days` days ending at `end_day`.

    `end_day` is one day for everyone or a per-user mapping.

    Raises:
        DetectionError: a requested window is not covered by a user's series.
    """
    users = sorted(series) if user_ids is None else list(user_ids)
    rows = np.zeros((len(users), feature_days), dtype=np.float64)
    for r, user_id in enumerate(users):
        s = series[user_id]
        end = end_day[user_id] if isinstance(end_day, Mapping) else end_day
        start = end - feature_days + 1
        if not (s.covers(start) and s.covers(end)):
            raise DetectionError(
                f"feature window {start}..{end} outside score coverage "
                f"{s.first_day}..{s.last_day} for user {user_id}"
            )
        rows[r] = s.base[start - s.first_day:end - s.first_day + 1]
    return users, rows, label_vector(users, registry)


def stratified_split(labels: Sequence[int], fraction: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Train/test row indices keeping each label's share; sorted, seeded."""
    y = np.asarray(labels)
    rng = np.random.default_rng(seed)
    train: List[np.ndarray] = []
    test: List[np.ndarray] = []
    for label in np.unique(y):
        idx = np.flatnonzero(y == label)
        idx = idx[rng.permutation(idx.size)]
        cut = int(round(fraction * idx.size))
        train.append(idx[:cut])
        test.append(idx[cut:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))
