"""Infer the transit network from traces: stop clustering, trip cuts, route grouping."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from datetime import date
from typing import Optional, Sequence

import numpy as np

from . import geo
from .domain import BusStop, GpsRecord, Route, TransitGraph, Trip


@dataclass(frozen=True)
class StopCluster:
    """A canonical stop candidate: running-mean centroid of nearby points."""

    stop_id: str
    latitude: float
    longitude: float
    member_count: int

    def __post_init__(self) -> None:
        if self.member_count < 1:
            raise ValueError("cluster needs at least one member")


def service_label(day: date) -> str:
    """Weekday service class: Mon-Sat runs as Feriali, Sunday as Festivi."""
    return "Festivi" if day.weekday() == 6 else "Feriali"


def _distances_m(lat: float, lon: float, lats: np.ndarray, lons: np.ndarray):
    mean_lat = np.radians((lats + lat) / 2.0)
    dy = (lats - lat) * geo.METERS_PER_DEGREE
    dx = (lons - lon) * geo.METERS_PER_DEGREE * np.cos(mean_lat)
    return np.hypot(dx, dy)


def cluster_stops(points: Sequence, radius_m: float = 25.0,
                  min_cluster_size: int = 1) -> list:
    """Greedy radius clustering in input order.

    Each point joins the first existing cluster whose centroid lies within
    `radius_m` (centroid updated as a running mean), otherwise it seeds a
    new cluster. Clusters smaller than `min_cluster_size` are dropped;
    survivors get ids S1, S2, ... in seeding order.
    """
    if not radius_m > 0:
        raise ValueError("radius must be positive")
    lats = np.empty(0)
    lons = np.empty(0)
    counts: list = []
    for point in points:
        lat, lon = float(point[0]), float(point[1])
        if counts:
            dist = _distances_m(lat, lon, lats, lons)
            inside = np.flatnonzero(dist <= radius_m)
        else:
            inside = ()
        if len(inside):
            i = int(inside[0])
            n = counts[i]
            lats[i] = (lats[i] * n + lat) / (n + 1)
            lons[i] = (lons[i] * n + lon) / (n + 1)
            counts[i] = n + 1
        else:
            lats = np.append(lats, lat)
            lons = np.append(lons, lon)
            counts.append(1)
    clusters = []
    ordinal = 0
    for lat, lon, count in zip(lats, lons, counts):
        if count < min_cluster_size:
            continue
        ordinal += 1
        clusters.append(StopCluster(stop_id=f"S{ordinal}", latitude=float(lat),
                                    longitude=float(lon), member_count=count))
    return clusters


def clusters_to_stops(clusters: Sequence[StopCluster]) -> list:
    """Promote clusters to BusStops (the id doubles as the name)."""
    return [BusStop(stop_id=c.stop_id, name=c.stop_id,
                    latitude=c.latitude, longitude=c.longitude)
            for c in clusters]


def segment_trips(trace: Sequence[GpsRecord], stops: Sequence,
                  dwell_threshold_s: float = 60.0,
                  terminal_stops: Optional[set] = None,
                  stop_radius_m: float = 25.0,
                  max_gap_s: float = 120.0,
                  dwell_speed_kmh: float = 3.0) -> list:
    """Cut one unit's time-ordered trace into trips.

    A boundary falls after any dwell (speed below `dwell_speed_kmh` inside
    one stop's radius) lasting at least `dwell_threshold_s`, and at any
    reporting gap longer than `max_gap_s`. When `terminal_stops` is given,
    only dwells at those stop ids cut. A segment becomes a Trip when it
    enters at least two stop radii; the entry instants are the pass times.
    Only observed outside-to-inside transitions count as entries, so the
    stop a segment starts inside of (where the previous trip ended) is not
    recounted.
    """
    if not trace:
        return []
    unit_id = trace[0].unit_id
    stops = list(stops)
    for record in trace:
        if record.unit_id != unit_id:
            raise ValueError("segment_trips expects a single unit's trace")

    # Nearest stop within radius per record, vectorized over the trace.
    nearest: list = [None] * len(trace)
    if stops:
        rec_lat = np.asarray([r.latitude for r in trace])
        rec_lon = np.asarray([r.longitude for r in trace])
        stop_lat = np.asarray([s.latitude for s in stops])
        stop_lon = np.asarray([s.longitude for s in stops])
        mean_lat = np.radians((rec_lat[:, None] + stop_lat[None, :]) / 2.0)
        dy = (stop_lat[None, :] - rec_lat[:, None]) * geo.METERS_PER_DEGREE
        dx = ((stop_lon[None, :] - rec_lon[:, None]) * geo.METERS_PER_DEGREE
              * np.cos(mean_lat))
        dist = np.hypot(dx, dy)
        best = np.argmin(dist, axis=1)
        in_range = dist[np.arange(len(trace)), best] <= stop_radius_m
        ids = [s.stop_id for s in stops]
        nearest = [ids[b] if ok else None for b, ok in zip(best, in_range)]

    trips: list = []
    entries: list = []  # (stop_id, timestamp) for the open segment
    ordinal = 0

    def close_segment() -> None:
        nonlocal entries, ordinal
        collapsed = []
        for stop_id, ts in entries:
            if not collapsed or collapsed[-1][0] != stop_id:
                collapsed.append((stop_id, ts))
        if len(collapsed) >= 2:
            ordinal += 1
            trips.append(Trip(
                trip_id=f"T{unit_id}-{ordinal}",
                stop_ids=tuple(s for s, _ in collapsed),
                pass_times=tuple(t for _, t in collapsed),
                unit_id=unit_id,
                service_id=service_label(collapsed[0][1].date()),
            ))
        entries = []

    inside: Optional[str] = None  # stop id whose radius we are currently in
    fresh = True  # at a segment start the current radius is not an entry
    dwell_stop: Optional[str] = None
    dwell_start = None
    dwell_pending = False  # a qualifying dwell ended; cut before next record
    prev_ts = None

    for record, here in zip(trace, nearest):
        if prev_ts is not None:
            gap = (record.timestamp - prev_ts).total_seconds()
            if gap > max_gap_s:
                close_segment()
                fresh = True
                dwell_stop = None
                dwell_pending = False
        prev_ts = record.timestamp

        dwelling_here = (here is not None and record.speed < dwell_speed_kmh
                         and (terminal_stops is None or here in terminal_stops))

        if dwell_stop is not None and (not dwelling_here or here != dwell_stop):
            # The dwell run ended with the previous record.
            if dwell_pending:
                close_segment()
                dwell_pending = False
            dwell_stop = None

        if fresh:
            inside = here
            fresh = False
        elif here != inside:
            if here is not None:
                entries.append((here, record.timestamp))
            inside = here

        if dwelling_here:
            if dwell_stop is None:
                dwell_stop = here
                dwell_start = record.timestamp
            duration = (record.timestamp - dwell_start).total_seconds()
            if duration >= dwell_threshold_s:
                dwell_pending = True

    close_segment()
    return trips


def group_routes(trips: Sequence[Trip], stops: Optional[Sequence] = None) -> list:
    """Group trips sharing one ordered stop sequence into routes.

    Direction matters: A->B->C and C->B->A are distinct routes. Route ids
    run L1, L2, ... by first appearance; the long name joins the first and
    last stop names (ids when no stops are given for lookup).
    """
    names = {s.stop_id: getattr(s, "name", s.stop_id) for s in stops or ()}
    order: list = []
    members: dict = {}
    for trip in trips:
        key = tuple(trip.stop_ids)
        if key not in members:
            members[key] = []
            order.append(key)
        members[key].append(trip.trip_id)
    routes = []
    for ordinal, key in enumerate(order, 1):
        first = names.get(key[0], key[0])
        last = names.get(key[-1], key[-1])
        routes.append(Route(route_id=f"L{ordinal}", stop_ids=key,
                            short_name=str(ordinal),
                            long_name=f"{first} - {last}",
                            trip_ids=tuple(members[key])))
    return routes


def _drop_rare_sequences(trips: Sequence[Trip], min_share: float) -> list:
    """Keep trips whose stop sequence is common enough to be a real line.

    A recording that starts or ends mid-route leaves one truncated lap per
    unit; those one-off sequences would each surface as a route of their
    own. Sequences seen fewer than `min_share` times relative to the most
    common one are treated as fragments and dropped.
    """
    trips = list(trips)
    if not trips or min_share <= 0:
        return trips
    counts = Counter(t.stop_ids for t in trips)
    floor = max(counts.values()) * min_share
    return [t for t in trips if counts[t.stop_ids] >= floor]


def build_transit_graph(records: Sequence[GpsRecord],
                        cluster_radius_m: float = 25.0,
                        min_cluster_size: int = 5,
                        dwell_threshold_s: float = 60.0,
                        stop_radius_m: float = 25.0,
                        max_gap_s: float = 120.0,
                        dwell_speed_kmh: float = 3.0,
                        min_route_share: float = 0.05) -> TransitGraph:
    """Full graph inference from cleaned records.

    Stop candidates are the positions of dwell records (speed below the
    dwell threshold); clustering them yields canonical stops, per-unit
    segmentation yields trips, and shared stop sequences yield routes.
    Trip fragments cut short by the recording window are discarded via
    `min_route_share` before grouping.
    """
    dwell_points = [(r.latitude, r.longitude) for r in records
                    if r.speed < dwell_speed_kmh]
    clusters = cluster_stops(dwell_points, radius_m=cluster_radius_m,
                             min_cluster_size=min_cluster_size)
    stops = clusters_to_stops(clusters)

    by_unit: dict = {}
    for record in records:
        by_unit.setdefault(record.unit_id, []).append(record)
    trips: list = []
    for unit_id in sorted(by_unit):
        trace = sorted(by_unit[unit_id], key=lambda r: r.timestamp)
        trips.extend(segment_trips(trace, stops,
                                   dwell_threshold_s=dwell_threshold_s,
                                   stop_radius_m=stop_radius_m,
                                   max_gap_s=max_gap_s,
                                   dwell_speed_kmh=dwell_speed_kmh))
    trips = _drop_rare_sequences(trips, min_route_share)
    routes = group_routes(trips, stops)
    # Drop clusters no trip ever touched (stray dwell noise far off route).
    used = {sid for trip in trips for sid in trip.stop_ids}
    kept_stops = tuple(s for s in stops if s.stop_id in used)
    return TransitGraph(stops=kept_stops, trips=tuple(trips), routes=tuple(routes))
