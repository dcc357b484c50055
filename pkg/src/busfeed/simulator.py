"""Synthetic fleet generator: scripted routes, GPS noise, glitches, ground truth."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from typing import Optional, Sequence

import numpy as np

from . import geo
from .domain import BusStop, GpsRecord, Route, Trip
from .transitgraph import service_label

# Tags attached to every emitted record for oracle bookkeeping.
TAG_CLEAN = "clean"
TAG_DUPLICATE = "duplicate"
TAG_ZERO_GLITCH = "zero_speed_glitch"

_DWELL_SPEED_RANGE = (0.2, 2.0)  # km/h reported while held at a stop
_DRIVE_SPEED_NOISE = 0.3  # km/h jitter on the nominal cruise speed
_GLITCH_DISPLACEMENT_M = (30.0, 200.0)


@dataclass(frozen=True)
class RouteScript:
    """A scripted service: waypoints, which of them are stops, pacing."""

    name: str
    waypoints: tuple
    stop_indices: tuple
    speed_kmh: float
    dwell_s: float = 25.0
    terminal_dwell_s: float = 120.0
    loop: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "waypoints",
                           tuple((float(lat), float(lon)) for lat, lon in self.waypoints))
        object.__setattr__(self, "stop_indices", tuple(int(i) for i in self.stop_indices))
        if len(self.waypoints) < 2:
            raise ValueError("a route needs at least 2 waypoints")
        if not self.speed_kmh > 0:
            raise ValueError("speed must be positive")
        if self.dwell_s < 0 or self.terminal_dwell_s < 0:
            raise ValueError("dwell times must be non-negative")
        n = len(self.waypoints)
        if any(not 0 <= i < n for i in self.stop_indices):
            raise ValueError("stop index out of range")
        if len(set(self.stop_indices)) != len(self.stop_indices):
            raise ValueError("duplicate stop index")
        if any(a >= b for a, b in zip(self.stop_indices, self.stop_indices[1:])):
            raise ValueError("stop indices must be increasing")


@dataclass(frozen=True)
class SimConfig:
    """Fleet simulation parameters."""

    routes: tuple
    buses_per_route: tuple
    duration_h: float
    report_interval_s: int = 10
    gps_noise_sigma_m: float = 5.0
    duplicate_rate: float = 0.0
    zero_speed_glitch_rate: float = 0.0
    seed: int = 0
    start: datetime = datetime(2026, 3, 2, 6, 0, 0)

    def __post_init__(self) -> None:
        object.__setattr__(self, "routes", tuple(self.routes))
        object.__setattr__(self, "buses_per_route", tuple(self.buses_per_route))
        if not self.routes:
            raise ValueError("need at least one route")
        if len(self.buses_per_route) != len(self.routes):
            raise ValueError("buses_per_route must align with routes")
        if any(n < 1 for n in self.buses_per_route):
            raise ValueError("each route needs at least one bus")
        if not self.duration_h > 0:
            raise ValueError("duration must be positive")
        if self.report_interval_s < 1:
            raise ValueError("report interval must be >= 1 s")
        if self.gps_noise_sigma_m < 0:
            raise ValueError("noise sigma must be non-negative")
        for name in ("duplicate_rate", "zero_speed_glitch_rate"):
            rate = getattr(self, name)
            if not 0.0 <= rate < 1.0:
                raise ValueError(f"{name} must be in [0,1), got {rate}")


@dataclass(frozen=True)
class GroundTruth:
    """Exact stops/trips/routes behind a simulated trace, plus per-record tags."""

    stops: tuple
    trips: tuple
    routes: tuple
    tags: tuple


@dataclass(frozen=True)
class _Timeline:
    """One lap of a route flattened into timed events."""

    period: float
    starts: np.ndarray
    ends: np.ndarray
    from_lat: np.ndarray
    from_lon: np.ndarray
    dlat: np.ndarray
    dlon: np.ndarray
    is_dwell: np.ndarray
    arrivals: tuple  # (offset_s, stop ordinal, is_terminal)


def _build_timeline(script: RouteScript) -> _Timeline:
    wp = script.waypoints
    n = len(wp)
    stop_set = set(script.stop_indices)
    stop_ordinal = {idx: pos + 1 for pos, idx in enumerate(script.stop_indices)}
    speed_ms = script.speed_kmh / 3.6

    if script.loop:
        legs = [(i, (i + 1) % n) for i in range(n)]
        endpoints = {0}
    else:
        legs = [(i, i + 1) for i in range(n - 1)]
        legs += [(i, i - 1) for i in range(n - 1, 0, -1)]
        endpoints = {0, n - 1}

    rows = []
    arrivals = []
    cursor = 0.0
    for i, j in legs:
        dist = geo.distance_m(*wp[i], *wp[j])
        if dist > 0:
            dur = dist / speed_ms
            rows.append((cursor, cursor + dur, wp[i][0], wp[i][1],
                         wp[j][0] - wp[i][0], wp[j][1] - wp[i][1], False))
            cursor += dur
        if j in stop_set:
            is_terminal = j in endpoints
            arrivals.append((cursor, stop_ordinal[j], is_terminal))
            dur = script.terminal_dwell_s if is_terminal else script.dwell_s
            if dur > 0:
                rows.append((cursor, cursor + dur, wp[j][0], wp[j][1],
                             0.0, 0.0, True))
                cursor += dur
    if cursor <= 0:
        raise ValueError(f"route {script.name!r} has zero length")
    arr = np.asarray([r[:6] for r in rows])
    return _Timeline(period=cursor,
                     starts=arr[:, 0], ends=arr[:, 1],
                     from_lat=arr[:, 2], from_lon=arr[:, 3],
                     dlat=arr[:, 4], dlon=arr[:, 5],
                     is_dwell=np.asarray([r[6] for r in rows]),
                     arrivals=tuple(arrivals))


def _truth_for_route(route_index: int, script: RouteScript) -> tuple:
    """Ground-truth BusStops for one script, ordered by stop ordinal."""
    stops = []
    for pos, idx in enumerate(script.stop_indices, 1):
        lat, lon = script.waypoints[idx]
        stops.append(BusStop(stop_id=f"R{route_index}S{pos}",
                             name=f"Route {route_index} Stop {pos}",
                             latitude=lat, longitude=lon))
    return tuple(stops)


def _emit_bus(unit_id: str, timeline: _Timeline, script: RouteScript,
              cfg: SimConfig, offset_s: int, rng: np.random.Generator) -> tuple:
    """All records and tags for one bus, in emission order."""
    duration_s = cfg.duration_h * 3600.0
    horizon = duration_s - offset_s
    if horizon <= 0:
        return [], []
    n = int(math.ceil(horizon / cfg.report_interval_s))
    times_s = offset_s + np.arange(n) * cfg.report_interval_s
    times_s = times_s[times_s < duration_s]
    n = len(times_s)
    if n == 0:
        return [], []

    phase = (times_s - offset_s) % timeline.period
    idx = np.searchsorted(timeline.ends, phase, side="right")
    idx = np.minimum(idx, len(timeline.ends) - 1)
    dur = timeline.ends[idx] - timeline.starts[idx]
    frac = np.where(dur > 0, (phase - timeline.starts[idx]) / np.where(dur > 0, dur, 1.0), 0.0)
    lat_true = timeline.from_lat[idx] + frac * timeline.dlat[idx]
    lon_true = timeline.from_lon[idx] + frac * timeline.dlon[idx]
    dwelling = timeline.is_dwell[idx]

    dwell_sigma = min(cfg.gps_noise_sigma_m, 1.5)
    dwell_speeds = rng.uniform(*_DWELL_SPEED_RANGE, size=n)
    drive_speeds = np.maximum(
        script.speed_kmh + rng.normal(0.0, _DRIVE_SPEED_NOISE, size=n), 0.1)
    speeds = np.where(dwelling, dwell_speeds, drive_speeds)

    noise = rng.normal(size=(n, 2))
    sigma = np.where(dwelling, dwell_sigma, cfg.gps_noise_sigma_m)
    noise = noise * sigma[:, None]
    # Held buses never jitter far from their stop (bounded dwell noise).
    cap = 4.0 * dwell_sigma
    noise[dwelling] = np.clip(noise[dwelling], -cap, cap)
    lat = lat_true + noise[:, 0] / geo.METERS_PER_DEGREE
    lon = lon_true + noise[:, 1] / (geo.METERS_PER_DEGREE
                                    * np.cos(np.radians(lat_true)))

    dup_mask = rng.random(n) < cfg.duplicate_rate
    zero_mask = rng.random(n) < cfg.zero_speed_glitch_rate
    angles = rng.uniform(0.0, 2.0 * math.pi, size=n)
    dists = rng.uniform(*_GLITCH_DISPLACEMENT_M, size=n)

    records = []
    tags = []
    for i in range(n):
        ts = cfg.start + timedelta(seconds=int(times_s[i]))
        record = GpsRecord(latitude=float(lat[i]), longitude=float(lon[i]),
                           speed=float(speeds[i]), unit_id=unit_id, timestamp=ts)
        records.append(record)
        tags.append(TAG_CLEAN)
        if dup_mask[i]:
            records.append(record)
            tags.append(TAG_DUPLICATE)
        if zero_mask[i]:
            north = dists[i] * math.cos(angles[i])
            east = dists[i] * math.sin(angles[i])
            glat, glon = geo.offset_point(record.latitude, record.longitude,
                                          north, east)
            records.append(GpsRecord(latitude=glat, longitude=glon, speed=0.0,
                                     unit_id=unit_id, timestamp=ts))
            tags.append(TAG_ZERO_GLITCH)
    return records, tags


def _truth_trips(unit_id: str, timeline: _Timeline, route_index: int,
                 cfg: SimConfig, offset_s: int) -> list:
    """Trips this bus actually drove, cut at terminal arrivals."""
    duration_s = cfg.duration_h * 3600.0
    trips = []
    current: list = []
    ordinal = 0

    def close() -> None:
        nonlocal current, ordinal
        if len(current) >= 2:
            ordinal += 1
            trips.append(Trip(
                trip_id=f"GT{unit_id}-{ordinal}",
                stop_ids=tuple(s for s, _ in current),
                pass_times=tuple(t for _, t in current),
                unit_id=unit_id,
                service_id=service_label(current[0][1].date()),
            ))
        current = []

    lap = 0
    while offset_s + lap * timeline.period < duration_s:
        base = offset_s + lap * timeline.period
        for arr_off, stop_ordinal, is_terminal in timeline.arrivals:
            t_abs = base + arr_off
            if t_abs >= duration_s:
                break
            ts = cfg.start + timedelta(seconds=t_abs)
            current.append((f"R{route_index}S{stop_ordinal}", ts))
            if is_terminal:
                close()
        lap += 1
    close()
    return trips


def simulate(cfg: SimConfig) -> tuple:
    """Drive the fleet and return (records, GroundTruth).

    Records are merged in (unit_id, timestamp) order; `truth.tags` stays
    aligned with them so cleaning can be scored against what was injected.
    Identical configs (seed included) reproduce identical output.
    """
    rng = np.random.default_rng(cfg.seed)
    tagged = []
    truth_stops: list = []
    truth_trips: list = []
    truth_routes: list = []
    bus_number = 0
    for r, (script, n_buses) in enumerate(zip(cfg.routes, cfg.buses_per_route), 1):
        timeline = _build_timeline(script)
        stops = _truth_for_route(r, script)
        truth_stops.extend(stops)
        route_trips: list = []
        for b in range(n_buses):
            unit_id = str(844850 + bus_number)
            bus_number += 1
            offset_s = int(round(b * timeline.period / n_buses))
            records, tags = _emit_bus(unit_id, timeline, script, cfg, offset_s, rng)
            tagged.extend(zip(records, tags))
            route_trips.extend(_truth_trips(unit_id, timeline, r, cfg, offset_s))
        truth_trips.extend(route_trips)
        if route_trips:
            canonical = route_trips[0].stop_ids
            names = {s.stop_id: s.name for s in stops}
            truth_routes.append(Route(
                route_id=f"GR{r}", stop_ids=canonical, short_name=str(r),
                long_name=f"{names[canonical[0]]} - {names[canonical[-1]]}",
                trip_ids=tuple(t.trip_id for t in route_trips),
            ))
    tagged.sort(key=lambda pair: (pair[0].unit_id, pair[0].timestamp))
    records = [record for record, _ in tagged]
    tags = tuple(tag for _, tag in tagged)
    truth = GroundTruth(stops=tuple(truth_stops), trips=tuple(truth_trips),
                        routes=tuple(truth_routes), tags=tags)
    return records, truth


def write_truth_stops(stream, stops: Sequence[BusStop]) -> None:
    stream.write("stop_id,name,latitude,longitude\n")
    for s in stops:
        stream.write(f"{s.stop_id},{s.name},{s.latitude!r},{s.longitude!r}\n")


def write_truth_trips(stream, trips: Sequence[Trip]) -> None:
    stream.write("trip_id,unit_id,service_id,stop_ids,pass_times\n")
    for t in trips:
        stops = "|".join(t.stop_ids)
        times = "|".join(ts.strftime("%Y-%m-%d %H:%M:%S") for ts in t.pass_times)
        stream.write(f"{t.trip_id},{t.unit_id},{t.service_id},{stops},{times}\n")
