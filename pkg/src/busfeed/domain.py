"""Shared vocabulary types for the feed-reconstruction pipeline.

Everything here is an immutable value object: construction validates,
after which instances are safe to share between threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from datetime import datetime
from typing import Optional, Sequence


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ValueError(message)


@dataclass(frozen=True)
class GpsRecord:
    """One raw tracker reading: position, speed (km/h), device id, local time."""

    latitude: float
    longitude: float
    speed: float
    unit_id: str
    timestamp: datetime

    def __post_init__(self) -> None:
        for name in ("latitude", "longitude", "speed"):
            object.__setattr__(self, name, float(getattr(self, name)))
        _require(math.isfinite(self.latitude) and -90.0 <= self.latitude <= 90.0,
                 f"latitude out of range: {self.latitude!r}")
        _require(math.isfinite(self.longitude) and -180.0 <= self.longitude <= 180.0,
                 f"longitude out of range: {self.longitude!r}")
        _require(math.isfinite(self.speed) and self.speed >= 0.0,
                 f"speed must be non-negative: {self.speed!r}")
        _require(bool(self.unit_id), "unit_id must be non-empty")
        _require(isinstance(self.timestamp, datetime), "timestamp must be a datetime")


@dataclass(frozen=True)
class FeatureTuple:
    """<lat, lon, sp> data unit fed to / produced by the network.

    Values may be raw degrees & km/h or normalized, depending on whether a
    scaler has been applied; only finiteness is enforced here.
    """

    lat: float
    lon: float
    sp: float

    def __post_init__(self) -> None:
        for name in ("lat", "lon", "sp"):
            object.__setattr__(self, name, float(getattr(self, name)))
            _require(math.isfinite(getattr(self, name)), f"{name} must be finite")

    @staticmethod
    def from_record(record: GpsRecord) -> "FeatureTuple":
        return FeatureTuple(record.latitude, record.longitude, record.speed)


@dataclass(frozen=True)
class LabeledTuple:
    """A feature tuple carrying the bus-stop flag used in stop mode."""

    tuple: FeatureTuple
    is_stop: int

    def __post_init__(self) -> None:
        _require(self.is_stop in (0, 1), f"is_stop must be 0 or 1, got {self.is_stop!r}")


@dataclass(frozen=True)
class Block:
    """One training window: k-1 feature tuples plus the k-th as label."""

    features: tuple
    label: object  # FeatureTuple, or LabeledTuple in stop mode
    unit_id: str
    start_time: datetime
    end_time: datetime

    def __post_init__(self) -> None:
        object.__setattr__(self, "features", tuple(self.features))
        _require(len(self.features) >= 2, "a block needs at least 2 feature tuples (k >= 3)")
        _require(all(isinstance(t, FeatureTuple) for t in self.features),
                 "features must be FeatureTuples")
        _require(isinstance(self.label, (FeatureTuple, LabeledTuple)),
                 "label must be a FeatureTuple or LabeledTuple")
        _require(self.start_time < self.end_time, "block start_time must precede end_time")
        _require(bool(self.unit_id), "unit_id must be non-empty")

    @property
    def k(self) -> int:
        return len(self.features) + 1

    @property
    def label_tuple(self) -> FeatureTuple:
        return self.label.tuple if isinstance(self.label, LabeledTuple) else self.label

    @property
    def stop_flag(self) -> Optional[int]:
        return self.label.is_stop if isinstance(self.label, LabeledTuple) else None


@dataclass(frozen=True)
class ScalerParams:
    """Per-feature min/max for [0,1] normalization, fitted on training data."""

    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float
    sp_min: float
    sp_max: float

    def __post_init__(self) -> None:
        for name in ("lat_min", "lat_max", "lon_min", "lon_max", "sp_min", "sp_max"):
            object.__setattr__(self, name, float(getattr(self, name)))
        for name in ("lat", "lon", "sp"):
            lo = getattr(self, f"{name}_min")
            hi = getattr(self, f"{name}_max")
            _require(math.isfinite(lo) and math.isfinite(hi),
                     f"scaler bounds for {name} must be finite")
            _require(hi > lo, f"degenerate scaler: {name} is constant (min == max == {lo!r})")

    def bounds(self) -> tuple:
        return ((self.lat_min, self.lat_max),
                (self.lon_min, self.lon_max),
                (self.sp_min, self.sp_max))


@dataclass(frozen=True)
class BusStop:
    """A canonical boarding location, one stops.txt row."""

    stop_id: str
    name: str
    latitude: float
    longitude: float
    location_type: int = 0
    parent_station: Optional[str] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "latitude", float(self.latitude))
        object.__setattr__(self, "longitude", float(self.longitude))
        _require(bool(self.stop_id), "stop_id must be non-empty")
        _require(-90.0 <= self.latitude <= 90.0, f"latitude out of range: {self.latitude!r}")
        _require(-180.0 <= self.longitude <= 180.0, f"longitude out of range: {self.longitude!r}")


@dataclass(frozen=True)
class Trip:
    """One traversal of a route: ordered stops with pass times."""

    trip_id: str
    stop_ids: tuple
    pass_times: tuple
    unit_id: str
    service_id: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "stop_ids", tuple(self.stop_ids))
        object.__setattr__(self, "pass_times", tuple(self.pass_times))
        _require(len(self.stop_ids) >= 2, "a trip needs at least two stops")
        _require(len(self.stop_ids) == len(self.pass_times),
                 "stop_ids and pass_times must align")
        _require(all(a < b for a, b in zip(self.pass_times, self.pass_times[1:])),
                 "pass times must be strictly increasing")


@dataclass(frozen=True)
class Route:
    """A group of trips sharing one ordered stop sequence."""

    route_id: str
    stop_ids: tuple
    short_name: str
    long_name: str
    trip_ids: tuple

    def __post_init__(self) -> None:
        object.__setattr__(self, "stop_ids", tuple(self.stop_ids))
        object.__setattr__(self, "trip_ids", tuple(self.trip_ids))
        _require(len(self.stop_ids) >= 2, "a route needs at least two stops")
        _require(len(self.trip_ids) >= 1, "a route needs at least one member trip")


@dataclass(frozen=True)
class TransitGraph:
    """Inferred network: stops, trips, and routes grouping those trips."""

    stops: tuple
    trips: tuple
    routes: tuple

    def __post_init__(self) -> None:
        object.__setattr__(self, "stops", tuple(self.stops))
        object.__setattr__(self, "trips", tuple(self.trips))
        object.__setattr__(self, "routes", tuple(self.routes))
        stop_ids = [s.stop_id for s in self.stops]
        _require(len(stop_ids) == len(set(stop_ids)), "stop_ids must be unique")
        trip_ids = [t.trip_id for t in self.trips]
        _require(len(trip_ids) == len(set(trip_ids)), "trip_ids must be unique")
        route_ids = [r.route_id for r in self.routes]
        _require(len(route_ids) == len(set(route_ids)), "route_ids must be unique")
        known = set(stop_ids)
        membership: dict = {}
        for route in self.routes:
            for trip_id in route.trip_ids:
                _require(trip_id not in membership,
                         f"trip {trip_id} belongs to more than one route")
                membership[trip_id] = route.route_id
        for trip in self.trips:
            _require(trip.trip_id in membership,
                     f"trip {trip.trip_id} belongs to no route")
            for sid in trip.stop_ids:
                _require(sid in known, f"trip {trip.trip_id} references unknown stop {sid}")
