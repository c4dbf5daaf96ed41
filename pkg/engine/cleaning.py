"""Signal cleaning: ping-pong handovers, switching speeds, speed and dwell filters."""

from __future__ import annotations
import logging
from concurrent.futures import ProcessPoolExecutor
from functools import partial
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ClusteringError
from .geo import haversine_m
from .models import CleaningConfig, DwellSegment

log = logging.getLogger(__name__)


def _joined(a: DwellSegment, b: DwellSegment) -> DwellSegment:
    return DwellSegment(a.user_id, a.cell_key, a.lat, a.lng, a.start, b.end)


def _aba_pass(segments: Sequence[DwellSegment], aba_window_s: int) -> List[DwellSegment]:
    stack: List[DwellSegment] = []
    for seg in segments:
        stack.append(seg)
        while True:
            if len(stack) >= 2:
                a, b = stack[-2], stack[-1]
                if a.cell_key == b.cell_key and a.end == b.start:
                    stack[-2:] = [_joined(a, b)]
                    continue
            if len(stack) >= 3:
                a, b, c = stack[-3], stack[-2], stack[-1]
                if (
                    a.cell_key == c.cell_key != b.cell_key
                    and b.dwell <= aba_window_s
                    and a.end == b.start
                    and b.end == c.start
                ):
                    stack[-3:] = [_joined(a, c)]
                    continue
            break
    return stack


def remove_aba_switches(segments: Sequence[DwellSegment], aba_window_s: int = 120) -> List[DwellSegment]:
    """Drop the short middle stay of every A-B-A pattern, merging the two A stays.

    Only time-contiguous stays take part, so merging never adds dwell time.
    Applied until nothing changes.
    """
    current = list(segments)
    while True:
        merged = _aba_pass(current, aba_window_s)
        if len(merged) == len(current):
            return merged
        current = merged


def switch_speeds(segments: Sequence[DwellSegment], contiguous_only: bool = True) -> List[Tuple[int, float]]:
    """Speed (km/h) at which each segment was entered from its predecessor.

    Returns (index, speed) pairs. Pairs with no elapsed time are skipped, and
    with `contiguous_only` so are pairs separated by a gap, since no switch
    was observed there.
    """
    speeds: List[Tuple[int, float]] = []
    for i in range(1, len(segments)):
        prev, seg = segments[i - 1], segments[i]
        if contiguous_only and prev.end != seg.start:
            continue
        elapsed = seg.start - prev.start
        if elapsed <= 0:
            continue
        metres = haversine_m(prev.lat, prev.lng, seg.lat, seg.lng)
        speeds.append((i, metres / elapsed * 3.6))
    return speeds


def speed_filter(
    segments: Sequence[DwellSegment],
    speeds: Sequence[Tuple[int, float]],
    speed_cut_kmh: float = 38.0,
) -> List[DwellSegment]:
    too_fast = {i for i, kmh in speeds if kmh > speed_cut_kmh}
    return [seg for i, seg in enumerate(segments) if i not in too_fast]


def dwell_filter(segments: Sequence[DwellSegment], min_dwell_s: int = 300) -> List[DwellSegment]:
    return [seg for seg in segments if seg.dwell >= min_dwell_s]


def clean_segments(segments: Sequence[DwellSegment], config: CleaningConfig) -> List[DwellSegment]:
    """A-B-A removal, then the speed cut, then the dwell cut, for one user."""
    merged = remove_aba_switches(segments, config.aba_window_s)
    fast_checked = speed_filter(merged, switch_speeds(merged), config.speed_cut_kmh)
    return dwell_filter(fast_checked, config.min_dwell_s)


def _clean_chunk(chunk: List[Tuple[str, List[DwellSegment]]], config: CleaningConfig) -> List[Tuple[str, List[DwellSegment]]]:
    return [(user_id, clean_segments(segs, config)) for user_id, segs in chunk]


def clean_corpus(
    segments_by_user: Dict[str, List[DwellSegment]],
    config: CleaningConfig,
    workers: int = 1,
) -> Dict[str, List[DwellSegment]]:
    items = sorted(segments_by_user.items())
    if workers <= 1 or len(items) < 2 * workers:
        cleaned = _clean_chunk(items, config)
    else:
        size = -(-len(items) // (workers * 4))
        chunks = [items[i:i + size] for i in range(0, len(items), size)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            cleaned = [pair for part in pool.map(partial(_clean_chunk, config=config), chunks) for pair in part]

    before = sum(len(s) for _, s in items)
    after = sum(len(s) for _, s in cleaned)
    log.info(f"Cleaned {len(items)} users: {before} segments -> {after}")
    return dict(cleaned)


# ---------------------------------------------------------------------------
# Speed clustering
# ---------------------------------------------------------------------------

def kmeans_1d(values: Sequence[float], k: int = 2, max_iter: int = 100) -> Tuple[np.ndarray, np.ndarray]:
    """Deterministic Lloyd's k-means on scalars.

    Centroid j starts at the (2j+1)/(2k) quantile of the values (of the
    distinct values if those quantiles coincide). An empty cluster keeps its
    previous centroid.

    Returns:
        (centroids sorted ascending, cluster index per value)
    """
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0:
        raise ClusteringError("kmeans_1d needs at least one value")
    distinct = np.unique(x)
    if k < 1 or k > distinct.size:
        raise ClusteringError(f"k={k} exceeds the {distinct.size} distinct values")

    probs = (2 * np.arange(k) + 1) / (2 * k)
    centroids = np.quantile(x, probs)
    if np.unique(centroids).size < k:
        centroids = np.quantile(distinct, probs)

    assign = np.argmin(np.abs(x[:, None] - centroids[None, :]), axis=1)
    for _ in range(max_iter):
        updated = centroids.copy()
        for j in range(k):
            members = x[assign == j]
            if members.size:
                updated[j] = members.mean()
        if np.array_equal(updated, centroids):
            break
        centroids = updated
        assign = np.argmin(np.abs(x[:, None] - centroids[None, :]), axis=1)

    order = np.argsort(centroids, kind="stable")
    rank = np.empty(k, dtype=np.int64)
    rank[order] = np.arange(k)
    return centroids[order], rank[assign]


def collect_speeds(segments_by_user: Dict[str, List[DwellSegment]]) -> np.ndarray:
    speeds = [kmh for user_id in sorted(segments_by_user)
              for _, kmh in switch_speeds(segments_by_user[user_id])]
    return np.asarray(speeds, dtype=np.float64)


def suggest_speed_cut(speeds: Sequence[float], k: int = 2, max_iter: int = 100) -> Optional[float]:
    """Upper edge of the slowest k-means cluster, or None when it cannot be formed."""
    x = np.asarray(speeds, dtype=np.float64)
    if x.size == 0 or np.unique(x).size < k:
        return None
    _, assign = kmeans_1d(x, k, max_iter)
    return float(x[assign == 0].max())
