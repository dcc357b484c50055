"""GTFS serialization: build, render, parse, validate, zip determinism."""

import dataclasses
import zipfile
from datetime import datetime, timedelta
from io import BytesIO

import pytest
from hypothesis import given, settings, strategies as st

from busfeed.domain import BusStop, Route, TransitGraph, Trip
from busfeed.gtfs import (AgencyInfo, CalendarRow, GtfsFeed, RouteRow,
                          StopRow, StopTimeRow, TripRow, build_feed,
                          format_coord, package, parse_feed, validate,
                          write_feed)

MON = datetime(2026, 3, 2)  # a Monday
SUN = datetime(2026, 3, 8)


def small_graph():
    """Two stops, two routes; one trip crosses midnight, one runs Sundays."""
    stops = (
        BusStop(stop_id="S1", name="Università Coppito",
                latitude=42.367679, longitude=13.352023),
        BusStop(stop_id="S2", name="Collemaggio", latitude=42.3499,
                longitude=13.4023),
    )
    trips = (
        Trip(trip_id="T1", stop_ids=("S1", "S2"),
             pass_times=(MON.replace(hour=8),
                         MON.replace(hour=8, minute=7, second=30)),
             unit_id="844850", service_id="Feriali"),
        Trip(trip_id="T2", stop_ids=("S2", "S1"),
             pass_times=(MON.replace(hour=23, minute=50),
                         MON + timedelta(hours=25)),
             unit_id="844850", service_id="Feriali"),
        Trip(trip_id="T3", stop_ids=("S1", "S2"),
             pass_times=(SUN.replace(hour=9),
                         SUN.replace(hour=9, minute=7)),
             unit_id="844851", service_id="Festivi"),
    )
    routes = (
        Route(route_id="L1", stop_ids=("S1", "S2"), short_name="1",
              long_name="Università Coppito - Collemaggio",
              trip_ids=("T1", "T3")),
        Route(route_id="L2", stop_ids=("S2", "S1"), short_name="2",
              long_name="Collemaggio - Università Coppito",
              trip_ids=("T2",)),
    )
    return TransitGraph(stops=stops, trips=trips, routes=routes)


@pytest.fixture
def feed():
    return build_feed(small_graph())


class TestFormatCoord:
    @pytest.mark.parametrize("value,expected", [
        (42.367679, "42.367679"),
        (13.352023, "13.352023"),
        (42.5, "42.500000"),
        (42.0, "42.000000"),
        (-0.25, "-0.250000"),
        (42.3724250793457, "42.3724250793457"),
    ])
    def test_known_values(self, value, expected):
        assert format_coord(value) == expected

    def test_scientific_notation_passes_through(self):
        assert format_coord(1e-07) == "1e-07"
        assert float(format_coord(1e-07)) == 1e-07

    @given(st.floats(min_value=-180.0, max_value=180.0, allow_nan=False))
    def test_round_trips_and_has_six_decimals(self, value):
        text = format_coord(value)
        assert float(text) == value
        if "e" not in text and "E" not in text:
            assert len(text.split(".")[1]) >= 6


class TestBuildFeed:
    def test_refuses_empty_graph(self):
        empty = TransitGraph(stops=(), trips=(), routes=())
        with pytest.raises(ValueError, match="nothing to export"):
            build_feed(empty)

    def test_default_agency(self, feed):
        assert feed.agency == AgencyInfo()
        assert feed.agency.agency_id == "AMA"
        assert feed.agency.name == "Azienda Mobilità L'Aquila"
        assert feed.agency.url == "http://www.ama.laquila.it/"
        assert feed.agency.timezone == "Europe/Rome"

    def test_stops_keep_exact_coordinates(self, feed):
        s1 = next(s for s in feed.stops if s.stop_id == "S1")
        assert s1.name == "Università Coppito"
        assert s1.lat == 42.367679
        assert s1.lon == 13.352023
        assert s1.location_type == 0
        assert s1.parent_station is None

    def test_routes_are_bus_routes_under_the_agency(self, feed):
        assert {r.route_id for r in feed.routes} == {"L1", "L2"}
        for route in feed.routes:
            assert route.route_type == 3
            assert route.agency_id == "AMA"

    def test_trip_headsign_is_last_stop_name(self, feed):
        by_id = {t.trip_id: t for t in feed.trips}
        assert by_id["T1"].headsign == "Collemaggio"
        assert by_id["T2"].headsign == "Università Coppito"

    def test_block_id_is_the_vehicle(self, feed):
        by_id = {t.trip_id: t for t in feed.trips}
        assert by_id["T1"].block_id == "844850"
        assert by_id["T3"].block_id == "844851"

    def test_two_stop_trip_yields_two_stop_times(self, feed):
        rows = [st for st in feed.stop_times if st.trip_id == "T1"]
        assert [r.sequence for r in rows] == [1, 2]
        assert [r.stop_id for r in rows] == ["S1", "S2"]
        assert [r.arrival for r in rows] == ["08:00:00", "08:07:30"]

    def test_arrival_equals_departure(self, feed):
        for row in feed.stop_times:
            assert row.arrival == row.departure

    def test_times_past_midnight_stay_on_the_service_day(self, feed):
        rows = [st for st in feed.stop_times if st.trip_id == "T2"]
        assert [r.arrival for r in rows] == ["23:50:00", "25:00:00"]

    def test_calendar_rows(self, feed):
        assert [c.service_id for c in feed.calendar] == ["Feriali", "Festivi"]
        feriali, festivi = feed.calendar
        assert (feriali.monday, feriali.tuesday, feriali.wednesday,
                feriali.thursday, feriali.friday, feriali.saturday,
                feriali.sunday) == (1, 1, 1, 1, 1, 1, 0)
        assert (festivi.monday, festivi.saturday, festivi.sunday) == (0, 0, 1)
        assert feriali.start_date == "20260302"
        assert feriali.end_date == "20260302"
        assert festivi.start_date == "20260308"

    def test_unknown_service_label_runs_every_day(self):
        graph = small_graph()
        trip = Trip(trip_id="T9", stop_ids=("S1", "S2"),
                    pass_times=(MON.replace(hour=6),
                                MON.replace(hour=6, minute=9)),
                    unit_id="844852", service_id="Sperimentale")
        route = Route(route_id="L9", stop_ids=("S1", "S2"), short_name="9",
                      long_name="x", trip_ids=("T9",))
        graph = TransitGraph(stops=graph.stops, trips=graph.trips + (trip,),
                             routes=graph.routes + (route,))
        feed = build_feed(graph)
        row = next(c for c in feed.calendar if c.service_id == "Sperimentale")
        assert (row.monday, row.sunday) == (1, 1)

    def test_built_feed_validates_clean(self, feed):
        report = validate(feed)
        assert report.is_valid
        assert report.errors == ()


class TestRendering:
    def test_write_feed_emits_six_files(self, feed, tmp_path):
        paths = write_feed(feed, tmp_path)
        assert [p.name for p in paths] == [
            "agency.txt", "stops.txt", "routes.txt", "trips.txt",
            "stop_times.txt", "calendar.txt"]
        for path in paths:
            assert path.parent == tmp_path

    def test_headers_are_canonical(self, feed, tmp_path):
        write_feed(feed, tmp_path)
        expected = {
            "agency.txt": "agency_id,agency_name,agency_url,agency_timezone",
            "stops.txt": ("stop_id,stop_name,stop_lat,stop_lon,"
                          "location_type,parent_station"),
            "routes.txt": ("route_id,agency_id,route_short_name,"
                           "route_long_name,route_type"),
            "trips.txt": "trip_id,route_id,service_id,trip_headsign,block_id",
            "stop_times.txt": ("trip_id,arrival_time,departure_time,"
                               "stop_id,stop_sequence"),
            "calendar.txt": ("service_id,monday,tuesday,wednesday,thursday,"
                             "friday,saturday,sunday,start_date,end_date"),
        }
        for name, header in expected.items():
            text = (tmp_path / name).read_text(encoding="utf-8")
            assert text.splitlines()[0] == header

    def test_agency_file_content(self, feed, tmp_path):
        write_feed(feed, tmp_path)
        text = (tmp_path / "agency.txt").read_text(encoding="utf-8")
        assert text == ("agency_id,agency_name,agency_url,agency_timezone\n"
                        "AMA,Azienda Mobilità L'Aquila,"
                        "http://www.ama.laquila.it/,Europe/Rome\n")

    def test_lf_line_endings(self, feed, tmp_path):
        write_feed(feed, tmp_path)
        for name in ("agency.txt", "stop_times.txt"):
            raw = (tmp_path / name).read_bytes()
            assert b"\r" not in raw
            assert raw.endswith(b"\n")

    def test_coordinates_survive_as_text(self, feed, tmp_path):
        write_feed(feed, tmp_path)
        text = (tmp_path / "stops.txt").read_text(encoding="utf-8")
        assert "42.367679" in text
        assert "13.352023" in text
        # the short coordinate is padded, not truncated
        assert "42.349900" in text

    def test_every_file_has_header_plus_rows(self, feed, tmp_path):
        write_feed(feed, tmp_path)
        for name in ("agency.txt", "stops.txt", "routes.txt", "trips.txt",
                     "stop_times.txt", "calendar.txt"):
            lines = (tmp_path / name).read_text(encoding="utf-8").splitlines()
            assert len(lines) >= 2, name


class TestRoundTrip:
    def test_directory_round_trip(self, feed, tmp_path):
        write_feed(feed, tmp_path)
        assert parse_feed(tmp_path) == feed

    def test_zip_bytes_round_trip(self, feed):
        assert parse_feed(package(feed)) == feed

    def test_zip_file_round_trip(self, feed, tmp_path):
        target = tmp_path / "feed.zip"
        target.write_bytes(package(feed))
        assert parse_feed(target) == feed

    def test_packaging_is_deterministic(self, feed):
        assert package(feed) == package(feed)

    def test_zip_layout_and_timestamps(self, feed):
        blob = package(feed)
        with zipfile.ZipFile(BytesIO(blob)) as archive:
            assert archive.namelist() == [
                "agency.txt", "stops.txt", "routes.txt", "trips.txt",
                "stop_times.txt", "calendar.txt"]
            for info in archive.infolist():
                assert info.date_time == (1980, 1, 1, 0, 0, 0)

    def test_unknown_columns_are_ignored(self, feed, tmp_path):
        write_feed(feed, tmp_path)
        path = tmp_path / "trips.txt"
        lines = path.read_text(encoding="utf-8").splitlines()
        lines[0] += ",wheelchair_accessible"
        lines[1:] = [line + ",1" for line in lines[1:]]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        assert parse_feed(tmp_path) == feed

    def test_dangling_reference_parses_then_fails_validation(self, feed,
                                                             tmp_path):
        write_feed(feed, tmp_path)
        path = tmp_path / "trips.txt"
        text = path.read_text(encoding="utf-8").replace("L2", "GHOST")
        path.write_text(text, encoding="utf-8")
        reparsed = parse_feed(tmp_path)
        report = validate(reparsed)
        assert any(f.rule == "FK_ROUTE" for f in report.errors)


class TestParseErrors:
    def test_missing_file_in_directory(self, feed, tmp_path):
        write_feed(feed, tmp_path)
        (tmp_path / "routes.txt").unlink()
        with pytest.raises(ValueError,
                           match="missing required file: routes.txt"):
            parse_feed(tmp_path)

    def test_missing_file_in_zip(self, feed):
        blob = package(feed)
        rebuilt = BytesIO()
        with zipfile.ZipFile(BytesIO(blob)) as src, \
                zipfile.ZipFile(rebuilt, "w") as dst:
            for name in src.namelist():
                if name != "stop_times.txt":
                    dst.writestr(name, src.read(name))
        with pytest.raises(ValueError, match="stop_times.txt"):
            parse_feed(rebuilt.getvalue())

    def test_missing_column(self, feed, tmp_path):
        write_feed(feed, tmp_path)
        path = tmp_path / "stops.txt"
        lines = path.read_text(encoding="utf-8").splitlines()
        header = lines[0].replace("stop_lat", "latitude")
        path.write_text("\n".join([header] + lines[1:]) + "\n",
                        encoding="utf-8")
        with pytest.raises(ValueError,
                           match="stops.txt is missing column stop_lat"):
            parse_feed(tmp_path)

    def test_empty_agency(self, feed, tmp_path):
        write_feed(feed, tmp_path)
        (tmp_path / "agency.txt").write_text(
            "agency_id,agency_name,agency_url,agency_timezone\n",
            encoding="utf-8")
        with pytest.raises(ValueError, match="agency.txt has no rows"):
            parse_feed(tmp_path)


def _with(feed, **changes):
    return dataclasses.replace(feed, **changes)


class TestValidate:
    def test_clean_feed_report(self, feed):
        report = validate(feed)
        assert report.is_valid
        assert report.warnings == ()
        assert report.to_text() == "errors=0 warnings=0\n"

    def test_empty_feed_flags_no_routes_only_once(self, feed):
        empty = GtfsFeed(agency=feed.agency, stops=(), routes=(), trips=(),
                         stop_times=(), calendar=())
        report = validate(empty)
        rules = [f.rule for f in report.errors]
        assert rules == ["NO_ROUTES"]

    @pytest.mark.parametrize("field", ["stops", "routes", "trips", "calendar"])
    def test_duplicate_primary_keys(self, feed, field):
        rows = getattr(feed, field)
        broken = _with(feed, **{field: rows + (rows[0],)})
        report = validate(broken)
        assert any(f.rule == "PK_DUPLICATE" and
                   f.location.startswith(f"{field}.txt")
                   for f in report.errors)

    def test_duplicate_stop_time_key(self, feed):
        broken = _with(feed, stop_times=feed.stop_times + (feed.stop_times[0],))
        report = validate(broken)
        assert any(f.rule == "PK_DUPLICATE" and
                   f.location.startswith("stop_times.txt")
                   for f in report.errors)

    def test_coordinates_out_of_range(self, feed):
        bad = (StopRow(stop_id="S9", name="nowhere", lat=91.0, lon=-190.0),)
        report = validate(_with(feed, stops=feed.stops + bad))
        findings = [f for f in report.errors if f.rule == "COORD_RANGE"]
        assert len(findings) == 2
        assert all("stop_id=S9" in f.location for f in findings)

    def test_unknown_parent_station(self, feed):
        bad = (StopRow(stop_id="S9", name="platform", lat=42.3, lon=13.4,
                       parent_station="NOPE"),)
        report = validate(_with(feed, stops=feed.stops + bad))
        assert any(f.rule == "FK_PARENT" for f in report.errors)

    def test_unknown_agency(self, feed):
        bad = (RouteRow(route_id="L9", agency_id="XX", short_name="9",
                        long_name="x"),)
        report = validate(_with(feed, routes=feed.routes + bad))
        assert any(f.rule == "FK_AGENCY" and "L9" in f.location
                   for f in report.errors)
        assert any(f.rule == "ROUTE_NO_TRIPS" and "L9" in f.location
                   for f in report.errors)

    def test_unknown_route_and_service(self, feed):
        bad = (TripRow(trip_id="T9", route_id="GHOST", service_id="Never"),)
        report = validate(_with(feed, trips=feed.trips + bad))
        rules = {f.rule for f in report.errors}
        assert "FK_ROUTE" in rules
        assert "FK_SERVICE" in rules

    def test_unknown_trip_and_stop(self, feed):
        bad = (StopTimeRow(trip_id="TX", arrival="08:00:00",
                           departure="08:00:00", stop_id="ZZ", sequence=1),)
        report = validate(_with(feed, stop_times=feed.stop_times + bad))
        rules = {f.rule for f in report.errors}
        assert "FK_TRIP" in rules
        assert "FK_STOP" in rules

    @pytest.mark.parametrize("value", ["8:00:00", "08:61:00", "08:00:61",
                                       "08:00", "noon", ""])
    def test_bad_time_format(self, feed, value):
        rows = list(feed.stop_times)
        rows[0] = dataclasses.replace(rows[0], arrival=value)
        report = validate(_with(feed, stop_times=tuple(rows)))
        assert any(f.rule == "TIME_FORMAT" for f in report.errors)

    def test_hours_past_midnight_are_legal(self, feed):
        rows = [f for f in validate(feed).errors if f.rule == "TIME_FORMAT"]
        assert rows == []  # the 25:00:00 row above must not be flagged

    def test_trip_needs_two_stop_times(self, feed):
        pruned = tuple(st for st in feed.stop_times
                       if not (st.trip_id == "T1" and st.sequence == 2))
        report = validate(_with(feed, stop_times=pruned))
        assert any(f.rule == "TRIP_MIN_STOPS" and "T1" in f.location
                   for f in report.errors)

    def test_sequence_must_increase(self, feed):
        rows = []
        for row in feed.stop_times:
            if row.trip_id == "T1":
                row = dataclasses.replace(row, sequence=3 - row.sequence)
            rows.append(row)
        report = validate(_with(feed, stop_times=tuple(rows)))
        assert any(f.rule == "SEQ_ORDER" for f in report.errors)

    def test_departure_before_arrival(self, feed):
        rows = list(feed.stop_times)
        rows[0] = dataclasses.replace(rows[0], arrival="08:00:00",
                                      departure="07:59:59")
        report = validate(_with(feed, stop_times=tuple(rows)))
        assert any(f.rule == "TIME_ORDER" and
                   f.message == "departure before arrival"
                   for f in report.errors)

    def test_times_must_not_decrease_along_trip(self, feed):
        rows = []
        for row in feed.stop_times:
            if row.trip_id == "T1" and row.sequence == 2:
                row = dataclasses.replace(row, arrival="07:00:00",
                                          departure="07:00:00")
            rows.append(row)
        report = validate(_with(feed, stop_times=tuple(rows)))
        assert any(f.rule == "TIME_ORDER" and
                   f.message == "times decrease along the trip"
                   for f in report.errors)

    def test_route_without_trips(self, feed):
        bad = (RouteRow(route_id="L9", agency_id="AMA", short_name="9",
                        long_name="x"),)
        report = validate(_with(feed, routes=feed.routes + bad))
        assert any(f.rule == "ROUTE_NO_TRIPS" for f in report.errors)

    @pytest.mark.parametrize("value", ["2026-03-02", "202603", "tomorrow"])
    def test_bad_calendar_date(self, feed, value):
        rows = list(feed.calendar)
        rows[0] = dataclasses.replace(rows[0], start_date=value)
        report = validate(_with(feed, calendar=tuple(rows)))
        assert any(f.rule == "DATE_FORMAT" for f in report.errors)

    def test_unused_stop_is_a_warning_not_an_error(self, feed):
        extra = (StopRow(stop_id="S9", name="spare", lat=42.3, lon=13.4),)
        report = validate(_with(feed, stops=feed.stops + extra))
        assert report.is_valid
        assert [f.rule for f in report.warnings] == ["STOP_UNUSED"]

    def test_parent_station_counts_as_use(self, feed):
        extra = (StopRow(stop_id="HUB", name="hub", lat=42.3, lon=13.4,
                         location_type=1),
                 StopRow(stop_id="S9", name="bay", lat=42.3, lon=13.4,
                         parent_station="HUB"))
        report = validate(_with(feed, stops=feed.stops + extra))
        warned = {f.location for f in report.warnings}
        assert "stops.txt stop_id=HUB" not in warned
        assert "stops.txt stop_id=S9" in warned

    def test_report_rendering(self, feed):
        bad = (StopTimeRow(trip_id="T1", arrival="08:09:00",
                           departure="08:09:00", stop_id="ZZ", sequence=3),)
        report = validate(_with(feed, stop_times=feed.stop_times + bad))
        text = report.to_text()
        assert ("ERROR FK_STOP stop_times.txt trip_id=T1 seq=3: "
                "unknown stop_id ZZ\n") in text
        assert text.endswith("errors=1 warnings=0\n")


# ---------------------------------------------------------------------------
# Randomized feeds: anything structurally valid must survive a byte round
# trip unchanged and validate cleanly.

_NAME_ALPHABET = ("abcdefghijklmnopqrstuvwxyz"
                  "ABCDEFGHIJKLMNOPQRSTUVWXYZ"
                  "àèìòùé' ,\"-0123456789")


def _names():
    return st.text(alphabet=_NAME_ALPHABET, min_size=1, max_size=20)


def _times(hour_cap=30):
    return st.tuples(st.integers(0, hour_cap), st.integers(0, 59),
                     st.integers(0, 59))


@st.composite
def valid_feeds(draw):
    agency = AgencyInfo(agency_id=draw(st.sampled_from(["AMA", "OP1"])),
                        name=draw(_names()), url="http://example.com/",
                        timezone="Europe/Rome")
    n_stops = draw(st.integers(2, 5))
    stops = tuple(
        StopRow(stop_id=f"S{i}", name=draw(_names()),
                lat=draw(st.floats(min_value=-90, max_value=90,
                                   allow_nan=False)),
                lon=draw(st.floats(min_value=-180, max_value=180,
                                   allow_nan=False)))
        for i in range(n_stops))
    services = tuple(
        CalendarRow(service_id=sid, monday=1, tuesday=1, wednesday=1,
                    thursday=1, friday=1, saturday=1, sunday=0,
                    start_date="20260302", end_date="20260331")
        for sid in draw(st.sampled_from([("Feriali",),
                                         ("Feriali", "Festivi")])))
    n_routes = draw(st.integers(1, 3))
    routes = tuple(
        RouteRow(route_id=f"L{i}", agency_id=agency.agency_id,
                 short_name=str(i + 1), long_name=draw(_names()))
        for i in range(n_routes))
    trips = []
    stop_times = []
    for i in range(draw(st.integers(n_routes, 6))):
        trip_id = f"T{i}"
        trips.append(TripRow(
            trip_id=trip_id, route_id=f"L{i % n_routes}",
            service_id=services[i % len(services)].service_id,
            headsign=draw(_names()), block_id=str(844850 + i)))
        h, m, s = draw(_times(hour_cap=25))
        clock = h * 3600 + m * 60 + s
        for seq in range(1, draw(st.integers(2, 4)) + 1):
            hms = "{:02d}:{:02d}:{:02d}".format(clock // 3600,
                                                clock % 3600 // 60,
                                                clock % 60)
            stop_times.append(StopTimeRow(
                trip_id=trip_id, arrival=hms, departure=hms,
                stop_id=f"S{draw(st.integers(0, n_stops - 1))}",
                sequence=seq))
            clock += draw(st.integers(0, 900))
    return GtfsFeed(agency=agency, stops=stops, routes=routes,
                    trips=tuple(trips), stop_times=tuple(stop_times),
                    calendar=services)


class TestRandomizedFeeds:
    @given(valid_feeds())
    @settings(max_examples=60, deadline=None)
    def test_zip_round_trip_is_lossless(self, feed):
        assert parse_feed(package(feed)) == feed

    @given(valid_feeds())
    @settings(max_examples=60, deadline=None)
    def test_generated_feeds_validate(self, feed):
        assert validate(feed).is_valid

    @given(valid_feeds())
    @settings(max_examples=30, deadline=None)
    def test_packaging_deterministic(self, feed):
        assert package(feed) == package(feed)
