"""Small-scale geographic helpers (equirectangular approximation)."""

from __future__ import annotations

import math

# Meters per degree of latitude; longitude scales with cos(latitude).
METERS_PER_DEGREE = 111_320.0


def distance_m(lat1: float, lon1: float, lat2: float, lon2: float) -> float:
    """Equirectangular distance in meters between two lat/lon points.

    Accurate to well under 1% at city scale, which is all the pipeline
    ever needs (stop radii, dwell detection, GPS jitter thresholds).
    """
    mean_lat = math.radians((lat1 + lat2) / 2.0)
    dy = (lat2 - lat1) * METERS_PER_DEGREE
    dx = (lon2 - lon1) * METERS_PER_DEGREE * math.cos(mean_lat)
    return math.hypot(dx, dy)


def meters_to_deg_lat(meters: float) -> float:
    return meters / METERS_PER_DEGREE


def meters_to_deg_lon(meters: float, at_lat: float) -> float:
    return meters / (METERS_PER_DEGREE * math.cos(math.radians(at_lat)))


def offset_point(lat: float, lon: float, north_m: float, east_m: float) -> tuple[float, float]:
    """Shift a point by the given meter offsets."""
    return lat + meters_to_deg_lat(north_m), lon + meters_to_deg_lon(east_m, lat)
