import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from geoproof.geo import (EARTH_RADIUS_KM, CoincidentPoints, GeoPoint, PlanarPoint, bearing,
                          destination, distance, normalize_angle)

lats = st.floats(-80, 80)
lons = st.floats(-179.9, 179.9)
geo_points = st.builds(GeoPoint, lats, lons)


def test_quarter_meridian():
    assert distance(GeoPoint(0, 0), GeoPoint(90, 0)) == pytest.approx(math.pi / 2 * EARTH_RADIUS_KM)


def test_one_degree_equator_matches_arc_length():
    # independent oracle: arc length R * dlambda on the equator
    assert distance(GeoPoint(0, 0), GeoPoint(0, 1)) == pytest.approx(EARTH_RADIUS_KM * math.radians(1), rel=1e-12)


def test_antipodal_is_half_circumference():
    assert distance(GeoPoint(10, 20), GeoPoint(-10, -160)) == pytest.approx(math.pi * EARTH_RADIUS_KM)


def test_bearings_cardinal():
    o = GeoPoint(0, 0)
    assert bearing(o, GeoPoint(1, 0)) == pytest.approx(0.0, abs=1e-12)
    assert bearing(o, GeoPoint(0, 1)) == pytest.approx(math.pi / 2)
    assert bearing(o, GeoPoint(-1, 0)) == pytest.approx(math.pi)
    assert bearing(o, GeoPoint(0, -1)) == pytest.approx(3 * math.pi / 2)


def test_bearing_coincident_raises():
    with pytest.raises(CoincidentPoints):
        bearing(GeoPoint(3, 4), GeoPoint(3, 4))


def test_destination_zero_distance():
    p = GeoPoint(12.5, -33.0)
    q = destination(p, 1.234, 0.0)
    assert (q.lat, q.lon) == pytest.approx((p.lat, p.lon))


def test_destination_equatorial_quarter_turn():
    q = destination(GeoPoint(0, 0), math.pi / 2, math.pi / 2 * EARTH_RADIUS_KM)
    assert q.lat == pytest.approx(0.0, abs=1e-6)
    assert q.lon == pytest.approx(90.0, abs=1e-6)


def test_latitude_validated_and_longitude_wrapped():
    with pytest.raises(ValueError):
        GeoPoint(91, 0)
    assert GeoPoint(0, 190).lon == pytest.approx(-170)
    assert GeoPoint.from_list([1.5, 2.5]).to_list() == [1.5, 2.5]


def test_mixed_worlds_rejected():
    with pytest.raises(TypeError):
        distance(GeoPoint(0, 0), PlanarPoint(0, 0))


def test_planar_conventions():
    o = PlanarPoint(0, 0)
    assert distance(o, PlanarPoint(3, 4)) == 5.0
    # clockwise from north (+y)
    assert bearing(o, PlanarPoint(0, 1)) == pytest.approx(0.0)
    assert bearing(o, PlanarPoint(1, 0)) == pytest.approx(math.pi / 2)
    q = destination(o, math.pi, 2.0)
    assert (q.x, q.y) == pytest.approx((0.0, -2.0))


def test_normalize_angle_range():
    assert normalize_angle(-0.1) == pytest.approx(2 * math.pi - 0.1)
    assert normalize_angle(2 * math.pi) == 0.0


@given(geo_points, geo_points)
def test_distance_symmetric(a, b):
    assert distance(a, b) == distance(b, a)


@given(geo_points, geo_points, geo_points)
def test_triangle_inequality(a, b, c):
    assert distance(a, c) <= (distance(a, b) + distance(b, c)) * (1 + 1e-9) + 1e-9


@given(geo_points, st.floats(0, 2 * math.pi - 1e-9), st.floats(0.01, 5000))
def test_destination_round_trip(p, b, d):
    q = destination(p, b, d)
    assert distance(p, q) == pytest.approx(d, rel=1e-6)
    back = bearing(p, q)
    diff = abs(math.remainder(back - b, 2 * math.pi))
    assert diff < 1e-6


@given(st.floats(-100, 100), st.floats(-100, 100), st.floats(0, 2 * math.pi), st.floats(0, 50))
def test_planar_round_trip(x, y, b, d):
    p = PlanarPoint(x, y)
    q = destination(p, b, d)
    assert distance(p, q) == pytest.approx(d, rel=1e-9, abs=1e-9)
