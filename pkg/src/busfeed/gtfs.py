"""GTFS serialization: build a feed from a transit graph, write/parse/validate/zip it."""

from __future__ import annotations

import csv
import io
import math
import os
import re
import zipfile
from dataclasses import dataclass, field
from datetime import datetime, time
from pathlib import Path
from typing import Optional, Sequence, Union

from .domain import TransitGraph

_TIME_RE = re.compile(r"^(\d{2,}):([0-5]\d):([0-5]\d)$")
_DATE_RE = re.compile(r"^\d{8}$")
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)
_WEEKDAYS = ("monday", "tuesday", "wednesday", "thursday", "friday",
             "saturday", "sunday")


def format_coord(value: float) -> str:
    """Shortest text that parses back to the exact float, with >= 6 decimals.

    repr already round-trips; values with fewer than six decimal places are
    zero-padded, which does not change the parsed value.
    """
    text = repr(float(value))
    if "e" in text or "E" in text:
        return text
    if "." in text:
        whole, frac = text.split(".", 1)
        return f"{whole}.{frac.ljust(6, '0')}"
    return text + ".000000"


@dataclass(frozen=True)
class AgencyInfo:
    """The single operating agency of a feed."""

    agency_id: str = "AMA"
    name: str = "Azienda Mobilità L'Aquila"
    url: str = "http://www.ama.laquila.it/"
    timezone: str = "Europe/Rome"


@dataclass(frozen=True)
class StopRow:
    stop_id: str
    name: str
    lat: float
    lon: float
    location_type: int = 0
    parent_station: Optional[str] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "lat", float(self.lat))
        object.__setattr__(self, "lon", float(self.lon))


@dataclass(frozen=True)
class RouteRow:
    route_id: str
    agency_id: str
    short_name: str
    long_name: str
    route_type: int = 3  # bus


@dataclass(frozen=True)
class TripRow:
    trip_id: str
    route_id: str
    service_id: str
    headsign: str = ""
    block_id: str = ""


@dataclass(frozen=True)
class StopTimeRow:
    trip_id: str
    arrival: str
    departure: str
    stop_id: str
    sequence: int


@dataclass(frozen=True)
class CalendarRow:
    service_id: str
    monday: int
    tuesday: int
    wednesday: int
    thursday: int
    friday: int
    saturday: int
    sunday: int
    start_date: str
    end_date: str


@dataclass(frozen=True)
class GtfsFeed:
    """In-memory image of the six text files."""

    agency: AgencyInfo
    stops: tuple
    routes: tuple
    trips: tuple
    stop_times: tuple
    calendar: tuple

    def __post_init__(self) -> None:
        for name in ("stops", "routes", "trips", "stop_times", "calendar"):
            object.__setattr__(self, name, tuple(getattr(self, name)))


@dataclass(frozen=True)
class Finding:
    rule: str
    location: str
    message: str


@dataclass(frozen=True)
class ValidationReport:
    errors: tuple
    warnings: tuple

    @property
    def is_valid(self) -> bool:
        return not self.errors

    def to_text(self) -> str:
        lines = []
        for finding in self.errors:
            lines.append(f"ERROR {finding.rule} {finding.location}: {finding.message}")
        for finding in self.warnings:
            lines.append(f"WARNING {finding.rule} {finding.location}: {finding.message}")
        lines.append(f"errors={len(self.errors)} warnings={len(self.warnings)}")
        return "\n".join(lines) + "\n"


def _fmt_time(seconds: int) -> str:
    h, rem = divmod(int(seconds), 3600)
    m, s = divmod(rem, 60)
    return f"{h:02d}:{m:02d}:{s:02d}"


def build_feed(graph: TransitGraph, agency: AgencyInfo = AgencyInfo()) -> GtfsFeed:
    """Map a transit graph onto GTFS rows.

    Each trip's times are written relative to the calendar day of its first
    stop, so trips running past midnight keep non-decreasing times (25:10:00
    style). Arrival equals departure: only pass instants are observed.
    """
    if not graph.routes:
        raise ValueError("nothing to export: the graph has no routes")
    stop_names = {s.stop_id: s.name for s in graph.stops}
    stops = tuple(StopRow(stop_id=s.stop_id, name=s.name, lat=s.latitude,
                          lon=s.longitude, location_type=s.location_type,
                          parent_station=s.parent_station)
                  for s in graph.stops)
    routes = tuple(RouteRow(route_id=r.route_id, agency_id=agency.agency_id,
                            short_name=r.short_name, long_name=r.long_name)
                   for r in graph.routes)

    route_of = {}
    for route in graph.routes:
        for trip_id in route.trip_ids:
            route_of[trip_id] = route.route_id

    trips = []
    stop_times = []
    service_days: dict = {}
    for trip in graph.trips:
        trips.append(TripRow(trip_id=trip.trip_id, route_id=route_of[trip.trip_id],
                             service_id=trip.service_id,
                             headsign=stop_names.get(trip.stop_ids[-1],
                                                     trip.stop_ids[-1]),
                             block_id=trip.unit_id))
        day = trip.pass_times[0].date()
        service_days.setdefault(trip.service_id, []).append(day)
        midnight = datetime.combine(day, time())
        for seq, (stop_id, ts) in enumerate(zip(trip.stop_ids, trip.pass_times), 1):
            hms = _fmt_time((ts - midnight).total_seconds())
            stop_times.append(StopTimeRow(trip_id=trip.trip_id, arrival=hms,
                                          departure=hms, stop_id=stop_id,
                                          sequence=seq))

    calendar = []
    for service_id in sorted(service_days):
        days = service_days[service_id]
        if service_id == "Feriali":
            flags = (1, 1, 1, 1, 1, 1, 0)
        elif service_id == "Festivi":
            flags = (0, 0, 0, 0, 0, 0, 1)
        else:
            flags = (1, 1, 1, 1, 1, 1, 1)
        calendar.append(CalendarRow(service_id, *flags,
                                    start_date=min(days).strftime("%Y%m%d"),
                                    end_date=max(days).strftime("%Y%m%d")))
    return GtfsFeed(agency=agency, stops=stops, routes=routes,
                    trips=tuple(trips), stop_times=tuple(stop_times),
                    calendar=tuple(calendar))


# ---------------------------------------------------------------------------
# Rendering and parsing. File order is fixed; every writer uses LF endings.

def _render(feed: GtfsFeed) -> list:
    def table(header, rows):
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
        return out.getvalue()

    a = feed.agency
    files = [
        ("agency.txt", table(
            ["agency_id", "agency_name", "agency_url", "agency_timezone"],
            [[a.agency_id, a.name, a.url, a.timezone]])),
        ("stops.txt", table(
            ["stop_id", "stop_name", "stop_lat", "stop_lon", "location_type",
             "parent_station"],
            [[s.stop_id, s.name, format_coord(s.lat), format_coord(s.lon),
              str(s.location_type), s.parent_station or ""]
             for s in feed.stops])),
        ("routes.txt", table(
            ["route_id", "agency_id", "route_short_name", "route_long_name",
             "route_type"],
            [[r.route_id, r.agency_id, r.short_name, r.long_name,
              str(r.route_type)] for r in feed.routes])),
        ("trips.txt", table(
            ["trip_id", "route_id", "service_id", "trip_headsign", "block_id"],
            [[t.trip_id, t.route_id, t.service_id, t.headsign, t.block_id]
             for t in feed.trips])),
        ("stop_times.txt", table(
            ["trip_id", "arrival_time", "departure_time", "stop_id",
             "stop_sequence"],
            [[st.trip_id, st.arrival, st.departure, st.stop_id,
              str(st.sequence)] for st in feed.stop_times])),
        ("calendar.txt", table(
            ["service_id", *_WEEKDAYS, "start_date", "end_date"],
            [[c.service_id] + [str(getattr(c, d)) for d in _WEEKDAYS]
             + [c.start_date, c.end_date] for c in feed.calendar])),
    ]
    return files


def write_feed(feed: GtfsFeed, destination) -> list:
    """Write the six text files into a directory; returns their paths."""
    dest = Path(destination)
    dest.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, content in _render(feed):
        path = dest / name
        path.write_text(content, encoding="utf-8", newline="")
        paths.append(path)
    return paths


def package(feed: GtfsFeed) -> bytes:
    """Zip the feed deterministically: fixed file order, epoch timestamps."""
    buffer = io.BytesIO()
    with zipfile.ZipFile(buffer, "w") as archive:
        for name, content in _render(feed):
            info = zipfile.ZipInfo(name, date_time=_ZIP_EPOCH)
            info.compress_type = zipfile.ZIP_DEFLATED
            info.create_system = 3
            info.external_attr = 0o644 << 16
            archive.writestr(info, content.encode("utf-8"), compresslevel=6)
    return buffer.getvalue()


_REQUIRED_FILES = ("agency.txt", "stops.txt", "routes.txt", "trips.txt",
                   "stop_times.txt", "calendar.txt")


def _read_source(source) -> dict:
    if isinstance(source, (bytes, bytearray)):
        with zipfile.ZipFile(io.BytesIO(source)) as archive:
            names = set(archive.namelist())
            return {n: archive.read(n).decode("utf-8")
                    for n in _REQUIRED_FILES if n in names}
    path = Path(source)
    if path.is_dir():
        return {n: (path / n).read_text(encoding="utf-8")
                for n in _REQUIRED_FILES if (path / n).exists()}
    with zipfile.ZipFile(path) as archive:
        names = set(archive.namelist())
        return {n: archive.read(n).decode("utf-8")
                for n in _REQUIRED_FILES if n in names}


def _rows(text: str, filename: str, required: Sequence[str]) -> list:
    reader = csv.DictReader(io.StringIO(text))
    fields = reader.fieldnames or []
    for column in required:
        if column not in fields:
            raise ValueError(f"{filename} is missing column {column}")
    return list(reader)


def parse_feed(source) -> GtfsFeed:
    """Read a feed from a zip blob, zip path, or directory.

    Unknown columns are ignored; structural problems inside the data are
    left for validate, not raised here.
    """
    files = _read_source(source)
    missing = [n for n in _REQUIRED_FILES if n not in files]
    if missing:
        raise ValueError(f"feed is missing required file: {', '.join(missing)}")

    arow = _rows(files["agency.txt"], "agency.txt",
                 ["agency_id", "agency_name", "agency_url", "agency_timezone"])
    if not arow:
        raise ValueError("agency.txt has no rows")
    agency = AgencyInfo(agency_id=arow[0]["agency_id"],
                        name=arow[0]["agency_name"],
                        url=arow[0]["agency_url"],
                        timezone=arow[0]["agency_timezone"])

    stops = tuple(
        StopRow(stop_id=r["stop_id"], name=r["stop_name"],
                lat=float(r["stop_lat"]), lon=float(r["stop_lon"]),
                location_type=int(r["location_type"] or 0),
                parent_station=r.get("parent_station") or None)
        for r in _rows(files["stops.txt"], "stops.txt",
                       ["stop_id", "stop_name", "stop_lat", "stop_lon",
                        "location_type"]))
    routes = tuple(
        RouteRow(route_id=r["route_id"], agency_id=r["agency_id"],
                 short_name=r["route_short_name"],
                 long_name=r["route_long_name"],
                 route_type=int(r["route_type"]))
        for r in _rows(files["routes.txt"], "routes.txt",
                       ["route_id", "agency_id", "route_short_name",
                        "route_long_name", "route_type"]))
    trips = tuple(
        TripRow(trip_id=r["trip_id"], route_id=r["route_id"],
                service_id=r["service_id"],
                headsign=r.get("trip_headsign", ""),
                block_id=r.get("block_id", ""))
        for r in _rows(files["trips.txt"], "trips.txt",
                       ["trip_id", "route_id", "service_id"]))
    stop_times = tuple(
        StopTimeRow(trip_id=r["trip_id"], arrival=r["arrival_time"],
                    departure=r["departure_time"], stop_id=r["stop_id"],
                    sequence=int(r["stop_sequence"]))
        for r in _rows(files["stop_times.txt"], "stop_times.txt",
                       ["trip_id", "arrival_time", "departure_time", "stop_id",
                        "stop_sequence"]))
    calendar = tuple(
        CalendarRow(service_id=r["service_id"],
                    **{d: int(r[d]) for d in _WEEKDAYS},
                    start_date=r["start_date"], end_date=r["end_date"])
        for r in _rows(files["calendar.txt"], "calendar.txt",
                       ["service_id", *_WEEKDAYS, "start_date", "end_date"]))
    return GtfsFeed(agency=agency, stops=stops, routes=routes, trips=trips,
                    stop_times=stop_times, calendar=calendar)


def _time_seconds(text: str) -> Optional[int]:
    match = _TIME_RE.match(text)
    if not match:
        return None
    h, m, s = (int(g) for g in match.groups())
    return h * 3600 + m * 60 + s


def validate(feed: GtfsFeed) -> ValidationReport:
    """FeedValidator-style structural checks; findings, never exceptions."""
    errors = []
    warnings = []

    def err(rule, location, message):
        errors.append(Finding(rule, location, message))

    if not feed.routes:
        err("NO_ROUTES", "routes.txt", "feed declares no routes")

    def check_unique(rows, key, rule_file, label):
        seen = set()
        for row in rows:
            value = key(row)
            if value in seen:
                err("PK_DUPLICATE", f"{rule_file} {label}={value}",
                    f"duplicate {label}")
            seen.add(value)
        return seen

    stop_ids = check_unique(feed.stops, lambda s: s.stop_id, "stops.txt", "stop_id")
    route_ids = check_unique(feed.routes, lambda r: r.route_id, "routes.txt",
                             "route_id")
    trip_ids = check_unique(feed.trips, lambda t: t.trip_id, "trips.txt", "trip_id")
    service_ids = check_unique(feed.calendar, lambda c: c.service_id,
                               "calendar.txt", "service_id")
    check_unique(feed.stop_times, lambda st: (st.trip_id, st.sequence),
                 "stop_times.txt", "trip_id,stop_sequence")

    for row in feed.calendar:
        loc = f"calendar.txt service_id={row.service_id}"
        for label, value in (("start_date", row.start_date),
                             ("end_date", row.end_date)):
            if not _DATE_RE.match(value):
                err("DATE_FORMAT", loc, f"bad {label} {value!r}")

    for stop in feed.stops:
        loc = f"stops.txt stop_id={stop.stop_id}"
        if not (math.isfinite(stop.lat) and -90.0 <= stop.lat <= 90.0):
            err("COORD_RANGE", loc, f"stop_lat {stop.lat!r} out of range")
        if not (math.isfinite(stop.lon) and -180.0 <= stop.lon <= 180.0):
            err("COORD_RANGE", loc, f"stop_lon {stop.lon!r} out of range")
        if stop.parent_station and stop.parent_station not in stop_ids:
            err("FK_PARENT", loc,
                f"parent_station {stop.parent_station} is not a stop")

    for route in feed.routes:
        if route.agency_id != feed.agency.agency_id:
            err("FK_AGENCY", f"routes.txt route_id={route.route_id}",
                f"unknown agency_id {route.agency_id}")

    for trip in feed.trips:
        loc = f"trips.txt trip_id={trip.trip_id}"
        if trip.route_id not in route_ids:
            err("FK_ROUTE", loc, f"unknown route_id {trip.route_id}")
        if trip.service_id not in service_ids:
            err("FK_SERVICE", loc, f"unknown service_id {trip.service_id}")

    by_trip: dict = {}
    for st in feed.stop_times:
        loc = f"stop_times.txt trip_id={st.trip_id} seq={st.sequence}"
        if st.trip_id not in trip_ids:
            err("FK_TRIP", loc, f"unknown trip_id {st.trip_id}")
        if st.stop_id not in stop_ids:
            err("FK_STOP", loc, f"unknown stop_id {st.stop_id}")
        for label, value in (("arrival_time", st.arrival),
                             ("departure_time", st.departure)):
            if _time_seconds(value) is None:
                err("TIME_FORMAT", loc, f"bad {label} {value!r}")
        by_trip.setdefault(st.trip_id, []).append(st)

    for trip in feed.trips:
        rows = by_trip.get(trip.trip_id, [])
        loc = f"stop_times.txt trip_id={trip.trip_id}"
        if len(rows) < 2:
            err("TRIP_MIN_STOPS", loc,
                f"trip has {len(rows)} stop_times, needs at least 2")
        for prev, cur in zip(rows, rows[1:]):
            if cur.sequence <= prev.sequence:
                err("SEQ_ORDER", loc,
                    f"stop_sequence {cur.sequence} after {prev.sequence}")
        clock = None
        for row in rows:
            arr = _time_seconds(row.arrival)
            dep = _time_seconds(row.departure)
            if arr is None or dep is None:
                continue  # already reported as TIME_FORMAT
            if dep < arr:
                err("TIME_ORDER", f"{loc} seq={row.sequence}",
                    "departure before arrival")
            if clock is not None and arr < clock:
                err("TIME_ORDER", f"{loc} seq={row.sequence}",
                    "times decrease along the trip")
            clock = max(dep, arr if clock is None else clock)

    served = {tr.route_id for tr in feed.trips}
    for route in feed.routes:
        if route.route_id not in served:
            err("ROUTE_NO_TRIPS", f"routes.txt route_id={route.route_id}",
                "route has no trips")

    referenced = {st.stop_id for st in feed.stop_times}
    parents = {s.parent_station for s in feed.stops if s.parent_station}
    for stop in feed.stops:
        if stop.stop_id not in referenced and stop.stop_id not in parents:
            warnings.append(Finding("STOP_UNUSED",
                                    f"stops.txt stop_id={stop.stop_id}",
                                    "stop is never served"))
    return ValidationReport(errors=tuple(errors), warnings=tuple(warnings))
