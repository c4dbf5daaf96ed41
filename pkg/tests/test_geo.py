import numpy as np
import pytest

from engine.geo import category_radius, haversine_m, haversine_many


def test_one_degree_on_the_equator():
    assert haversine_m(0.0, 0.0, 0.0, 1.0) == pytest.approx(111195, abs=1)


def test_equator_to_pole():
    assert haversine_m(0.0, 0.0, 90.0, 0.0) == pytest.approx(10007543, abs=1)


def test_vectorized_matches_scalar():
    lats = np.array([30.5, 30.51, 29.0])
    lngs = np.array([114.3, 114.32, 120.0])
    expected = [haversine_m(30.5, 114.3, a, b) for a, b in zip(lats, lngs)]
    np.testing.assert_allclose(haversine_many(30.5, 114.3, lats, lngs), expected, rtol=1e-12)


def test_category_radius():
    assert category_radius("Hospital") == 300.0
    assert category_radius("market") == 100.0
    with pytest.raises(ValueError):
        category_radius("stadium")
