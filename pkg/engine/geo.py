"""Geographic helpers: great-circle distance and location-category radii."""

from __future__ import annotations
from math import asin, cos, radians, sin, sqrt
from typing import Dict

import numpy as np

EARTH_RADIUS_M = 6_371_000.0

# Coverage radius (metres) used when summing cell risk around a location.
LOCATION_RADII: Dict[str, float] = {
    "hospital": 300.0,
    "market": 100.0,
    "school": 500.0,  # observed range 20-500 m; the upper bound is the default
    "station": 500.0,
    "residence": 100.0,
    "random": 100.0,
}


def haversine_m(lat1: float, lng1: float, lat2: float, lng2: float) -> float:
    """Great-circle distance in metres between two points given in degrees."""
    phi1, phi2 = radians(lat1), radians(lat2)
    d_phi = radians(lat2 - lat1)
    d_lambda = radians(lng2 - lng1)
    a = sin(d_phi / 2) ** 2 + cos(phi1) * cos(phi2) * sin(d_lambda / 2) ** 2
    return 2 * EARTH_RADIUS_M * asin(min(1.0, sqrt(a)))


def haversine_many(lat: float, lng: float, lats: np.ndarray, lngs: np.ndarray) -> np.ndarray:
    """Vectorized distances from one point to arrays of points."""
    phi1 = np.radians(lat)
    phi2 = np.radians(lats)
    d_phi = phi2 - phi1
    d_lambda = np.radians(lngs - lng)
    a = np.sin(d_phi / 2) ** 2 + np.cos(phi1) * np.cos(phi2) * np.sin(d_lambda / 2) ** 2
    return 2 * EARTH_RADIUS_M * np.arcsin(np.minimum(1.0, np.sqrt(a)))


def category_radius(category: str) -> float:
    try:
        return LOCATION_RADII[category.lower()]
    except KeyError:
        known = ", ".join(sorted(LOCATION_RADII))
        raise ValueError(f"unknown location category {category!r} (known: {known})") from None
