import itertools
import math

import numpy as np
import pytest

from engine.cleaning import (
    clean_corpus, clean_segments, collect_speeds, dwell_filter, kmeans_1d, remove_aba_switches,
    speed_filter, suggest_speed_cut, switch_speeds,
)
from engine.errors import ClusteringError
from engine.geo import EARTH_RADIUS_M
from engine.models import CleaningConfig

from conftest import seg

# 1000 m of latitude
KM_LAT = math.degrees(1000.0 / EARTH_RADIUS_M)


def spans(segments):
    return [(s.cell_key, s.start, s.end) for s in segments]


def test_aba_merges_short_middle_stay():
    merged = remove_aba_switches([seg("A", 0, 100), seg("B", 100, 130), seg("A", 130, 400)], 120)
    assert spans(merged) == [("A", 0, 400)]


def test_aba_keeps_long_middle_stay():
    segments = [seg("A", 0, 100), seg("B", 100, 300), seg("A", 300, 400)]
    assert spans(remove_aba_switches(segments, 120)) == spans(segments)


def test_aba_window_is_inclusive():
    merged = remove_aba_switches([seg("A", 0, 100), seg("B", 100, 220), seg("A", 220, 400)], 120)
    assert spans(merged) == [("A", 0, 400)]


def test_aba_needs_contiguous_stays():
    segments = [seg("A", 0, 100), seg("B", 150, 180), seg("A", 180, 400)]
    assert spans(remove_aba_switches(segments, 120)) == spans(segments)


def test_aba_cascades():
    segments = [
        seg("A", 0, 100), seg("B", 100, 130), seg("A", 130, 200),
        seg("C", 200, 250), seg("A", 250, 500),
    ]
    assert spans(remove_aba_switches(segments, 120)) == [("A", 0, 500)]


def test_switch_speed_one_km_per_minute():
    segments = [seg("A", 0, 60, lat=30.0), seg("B", 60, 600, lat=30.0 + KM_LAT)]
    ((index, kmh),) = switch_speeds(segments)
    assert index == 1
    assert kmh == pytest.approx(60.0, rel=1e-6)


def test_switch_speed_same_place_is_zero():
    ((_, kmh),) = switch_speeds([seg("A", 0, 60), seg("B", 60, 600)])
    assert kmh == 0.0


def test_switch_speed_skips_zero_elapsed_and_gaps():
    assert switch_speeds([seg("A", 0, 0), seg("B", 0, 600, lat=31.0)]) == []
    assert switch_speeds([seg("A", 0, 60), seg("B", 90, 600, lat=31.0)]) == []


def test_speed_filter_drops_fast_entries():
    segments = [seg("A", 0, 60), seg("B", 60, 600, lat=30.0 + KM_LAT), seg("C", 600, 1200, lat=30.0 + KM_LAT)]
    kept = speed_filter(segments, switch_speeds(segments), 38.0)
    assert spans(kept) == [("A", 0, 60), ("C", 600, 1200)]


def test_speed_filter_keeps_first_segment():
    segments = [seg("A", 0, 600)]
    assert speed_filter(segments, switch_speeds(segments)) == segments


def test_dwell_filter_boundary():
    kept = dwell_filter([seg("A", 0, 299), seg("B", 299, 599)], 300)
    assert spans(kept) == [("B", 299, 599)]


def noisy_day():
    return [
        seg("H", 0, 3000),
        seg("N", 3000, 3040, lat=30.0 + KM_LAT),
        seg("H", 3040, 8000),
        seg("X", 8000, 8100, lat=30.0 + 20 * KM_LAT),
        seg("W", 8100, 9000, lat=30.0 + 2 * KM_LAT),
        seg("Y", 9000, 9200, lat=30.0 + 2 * KM_LAT),
        seg("W", 9200, 20000, lat=30.0 + 2 * KM_LAT),
    ]


def test_cleaning_is_idempotent():
    config = CleaningConfig()
    once = clean_segments(noisy_day(), config)
    assert clean_segments(once, config) == once


def test_cleaning_never_adds_dwell():
    raw = noisy_day()
    cleaned = clean_segments(raw, CleaningConfig())
    assert sum(s.dwell for s in cleaned) <= sum(s.dwell for s in raw)
    assert all(s.dwell >= 300 for s in cleaned)


def test_clean_corpus_matches_per_user_cleaning():
    corpus = {f"u{i}": [seg("H", 0, 3000 + i, user=f"u{i}")] + noisy_day()[1:] for i in range(6)}
    config = CleaningConfig()
    assert clean_corpus(corpus, config, workers=2) == clean_corpus(corpus, config, workers=1)
    assert clean_corpus(corpus, config)["u3"] == clean_segments(corpus["u3"], config)


def test_kmeans_two_pairs():
    centroids, assign = kmeans_1d([0, 2, 10, 12], k=2)
    np.testing.assert_allclose(centroids, [1.0, 11.0])
    assert assign.tolist() == [0, 0, 1, 1]


def test_kmeans_two_plateaus():
    centroids, _ = kmeans_1d([1, 1, 1, 100, 100, 100], k=2)
    np.testing.assert_allclose(centroids, [1.0, 100.0])


def test_kmeans_needs_enough_distinct_values():
    with pytest.raises(ClusteringError):
        kmeans_1d([5, 5, 5], k=2)
    with pytest.raises(ClusteringError):
        kmeans_1d([], k=2)


def best_two_way_sse(values):
    x = np.sort(np.asarray(values, dtype=np.float64))
    best = math.inf
    for cut in range(1, x.size):
        lo, hi = x[:cut], x[cut:]
        best = min(best, float(((lo - lo.mean()) ** 2).sum() + ((hi - hi.mean()) ** 2).sum()))
    return best


@pytest.mark.parametrize("seed", range(20))
def test_kmeans_matches_best_partition_on_separated_groups(seed):
    rng = np.random.default_rng(seed)
    slow = rng.uniform(0, 10, size=rng.integers(2, 6))
    fast = rng.uniform(50, 60, size=rng.integers(2, 6))
    values = np.concatenate([slow, fast])
    rng.shuffle(values)
    centroids, assign = kmeans_1d(values, k=2)
    x = np.asarray(values, dtype=np.float64)
    sse = float(np.sum((x - centroids[assign]) ** 2))
    assert sse == pytest.approx(best_two_way_sse(values), rel=1e-9)


def test_kmeans_brute_force_small_sets():
    for values in ([0, 1, 9, 10], [3, 4, 5, 40, 41], [0.5, 0.7, 30, 31, 33, 35]):
        labels = min(
            (labels for labels in itertools.product((0, 1), repeat=len(values)) if len(set(labels)) == 2),
            key=lambda labels: sum(
                (v - np.mean([w for w, l in zip(values, labels) if l == g])) ** 2
                for g in (0, 1) for v, l in zip(values, labels) if l == g
            ),
        )
        centroids, assign = kmeans_1d(values, k=2)
        # same partition up to a relabelling
        assert len({(a, b) for a, b in zip(assign.tolist(), labels)}) == 2


def test_suggest_speed_cut():
    assert suggest_speed_cut([5, 6, 7, 80, 90]) == 7.0
    assert suggest_speed_cut([]) is None
    assert suggest_speed_cut([12, 12]) is None


def test_collect_speeds_over_users():
    corpus = {
        "u1": [seg("A", 0, 60), seg("B", 60, 600, lat=30.0 + KM_LAT)],
        "u2": [seg("A", 0, 600, user="u2")],
    }
    speeds = collect_speeds(corpus)
    assert speeds.shape == (1,)
    assert speeds[0] == pytest.approx(60.0, rel=1e-6)
