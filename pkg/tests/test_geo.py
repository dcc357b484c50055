import math

from hypothesis import given, strategies as st

from busfeed import geo


def test_distance_zero_for_identical_points():
    assert geo.distance_m(42.35, 13.40, 42.35, 13.40) == 0.0


def test_pure_latitude_offset_scales_by_meters_per_degree():
    # 50 m north of a point differs by exactly 50/111320 degrees latitude.
    # 42.0 + d_lat rounds the small offset into 42's ulp grid, so allow a
    # correspondingly tiny relative error.
    d_lat = 50.0 / geo.METERS_PER_DEGREE
    assert math.isclose(geo.distance_m(42.0, 13.0, 42.0 + d_lat, 13.0), 50.0,
                        rel_tol=1e-9)


def test_pure_longitude_offset_shrinks_with_cosine():
    lat = 42.0
    d_lon = 100.0 / (geo.METERS_PER_DEGREE * math.cos(math.radians(lat)))
    got = geo.distance_m(lat, 13.0, lat, 13.0 + d_lon)
    # The formula evaluates the cosine at the mean latitude, which equals
    # lat here, so the round trip is exact up to float error.
    assert math.isclose(got, 100.0, rel_tol=1e-12)


def test_matches_independent_equirectangular_evaluation():
    lat1, lon1 = 42.367679, 13.352023
    lat2, lon2 = 42.372425, 13.283948
    mean = math.radians((lat1 + lat2) / 2.0)
    dy = (lat2 - lat1) * 111320.0
    dx = (lon2 - lon1) * 111320.0 * math.cos(mean)
    expected = math.sqrt(dx * dx + dy * dy)
    assert geo.distance_m(lat1, lon1, lat2, lon2) == expected


@given(st.floats(-80, 80), st.floats(-179, 179),
       st.floats(-80, 80), st.floats(-179, 179))
def test_symmetry(lat1, lon1, lat2, lon2):
    assert geo.distance_m(lat1, lon1, lat2, lon2) == geo.distance_m(
        lat2, lon2, lat1, lon1)


@given(st.floats(-60, 60), st.floats(-170, 170),
       st.floats(-400, 400), st.floats(-400, 400))
def test_offset_point_round_trips_within_projection_error(lat, lon, north, east):
    lat2, lon2 = geo.offset_point(lat, lon, north, east)
    dist = geo.distance_m(lat, lon, lat2, lon2)
    want = math.hypot(north, east)
    # offset_point converts at the origin latitude while distance_m uses the
    # mean latitude; at a few hundred meters the disagreement stays tiny.
    assert abs(dist - want) <= max(1e-9, want * 1e-4)


def test_meters_to_degrees_inverts_scale():
    assert geo.meters_to_deg_lat(geo.METERS_PER_DEGREE) == 1.0
    lat = 45.0
    one_deg_m = geo.METERS_PER_DEGREE * math.cos(math.radians(lat))
    assert math.isclose(geo.meters_to_deg_lon(one_deg_m, lat), 1.0,
                        rel_tol=1e-12)
