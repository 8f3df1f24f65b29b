import math

import pytest
from hypothesis import example, given, settings
from hypothesis import strategies as st

from conftest import BELGRADE, NIS, NOVI_SAD
from oracles import central_angle_distance_km
from ztiam.geo import EARTH_RADIUS_KM, GeoPoint, geo_distance_km

lat = st.floats(-90, 90, allow_nan=False)
lon = st.floats(-180, 180, allow_nan=False)
points = st.builds(GeoPoint, lat, lon)


def test_coincident_points_are_zero():
    assert geo_distance_km(NOVI_SAD, NOVI_SAD) == 0.0


def test_novi_sad_to_belgrade_matches_oracle():
    d = geo_distance_km(NOVI_SAD, BELGRADE)
    ref = central_angle_distance_km(NOVI_SAD.lat, NOVI_SAD.lon, BELGRADE.lat, BELGRADE.lon)
    assert abs(d - ref) / ref < 0.005
    assert 71.6 < d < 72.5


def test_far_point_is_about_200_km():
    d = geo_distance_km(NIS, BELGRADE)
    assert abs(d - 200) / 200 < 0.01


def test_antipodes_are_half_circumference():
    d = geo_distance_km(GeoPoint(0, 0), GeoPoint(0, 180))
    assert d == pytest.approx(math.pi * EARTH_RADIUS_KM, abs=0.01)
    assert round(d, 1) == 20015.1


@pytest.mark.parametrize("lat_, lon_", [(91, 0), (-90.5, 0), (0, 180.01), (0, -181), (float("nan"), 0)])
def test_out_of_range_points_rejected(lat_, lon_):
    with pytest.raises(ValueError):
        GeoPoint(lat_, lon_)


@settings(max_examples=500)
@given(points, points)
@example(GeoPoint(1.192092896e-07, 0.0), GeoPoint(1.192092896e-07, 180.0))
def test_agrees_with_oracle(a, b):
    ref = central_angle_distance_km(a.lat, a.lon, b.lat, b.lon)
    # haversine loses ~sqrt(eps) * R near antipodes, hence the 1 m floor
    assert geo_distance_km(a, b) == pytest.approx(ref, rel=1e-9, abs=1e-3)


@given(points, points)
def test_symmetric_and_non_negative(a, b):
    d = geo_distance_km(a, b)
    assert d >= 0
    assert d == geo_distance_km(b, a)
    assert d <= math.pi * EARTH_RADIUS_KM + 1e-9


@settings(max_examples=500)
@given(points, points, points)
def test_triangle_inequality(a, b, c):
    assert geo_distance_km(a, c) <= geo_distance_km(a, b) + geo_distance_km(b, c) + 1e-6
