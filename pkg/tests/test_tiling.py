import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from osmforge.errors import RangeError
from osmforge.tiling import (
    MAX_LATITUDE,
    GeoBounds,
    GeoPoint,
    PixelCoord,
    TileRef,
    geo_to_pixel,
    meters_per_pixel,
    pixel_to_geo,
    tile_bounds,
    tile_center,
    tile_index,
)

lons = st.floats(-180.0, 180.0, allow_nan=False)
lats = st.floats(-85.0, 85.0, allow_nan=False)
zooms = st.integers(0, 19)


def test_white_house_tile():
    # oracle: 40-digit mpmath evaluation of the slippy-map formulas
    assert tile_index(GeoPoint(-77.0365, 38.8977), 18) == TileRef(18, 74975, 100281)


def test_tile_bounds_match_high_precision_oracle():
    b = tile_bounds(TileRef(18, 74975, 100281))
    assert b.west == pytest.approx(-77.037506103515625, abs=1e-12)
    assert b.east == pytest.approx(-77.0361328125, abs=1e-12)
    assert b.north == pytest.approx(38.89851465734589082, abs=1e-11)
    assert b.south == pytest.approx(38.89744587262310832, abs=1e-11)


def test_world_tile():
    assert tile_index(GeoPoint(0.0, 0.0), 0) == TileRef(0, 0, 0)
    b = tile_bounds(TileRef(0, 0, 0))
    assert (b.west, b.east) == (-180.0, 180.0)
    assert b.north == pytest.approx(MAX_LATITUDE, abs=1e-12)
    assert b.south == pytest.approx(-MAX_LATITUDE, abs=1e-12)
    assert MAX_LATITUDE == pytest.approx(85.0511287798066, abs=1e-12)


def test_edges_clamp_into_grid():
    assert tile_index(GeoPoint(180.0, 0.0), 3).x == 7
    assert tile_index(GeoPoint(-180.0, 0.0), 3).x == 0
    assert tile_index(GeoPoint(0.0, MAX_LATITUDE), 5).y == 0
    assert tile_index(GeoPoint(0.0, -MAX_LATITUDE), 5).y == 31


def test_shared_edge_belongs_to_east_and_south_tile():
    t = TileRef(10, 300, 400)
    b = tile_bounds(t)
    assert tile_index(GeoPoint(b.east, (b.north + b.south) / 2), 10).x == 301
    assert tile_index(GeoPoint(b.west, (b.north + b.south) / 2), 10).x == 300


@pytest.mark.parametrize("lon,lat,z", [(0, 86, 3), (0, -90, 3), (181, 0, 3), (0, 0, 23), (0, 0, -1),
                                       (math.nan, 0, 3)])
def test_invalid_inputs(lon, lat, z):
    with pytest.raises(RangeError):
        tile_index(GeoPoint(lon, lat), z)


def test_invalid_tiles():
    with pytest.raises(RangeError):
        tile_bounds(TileRef(2, 4, 0))
    with pytest.raises(RangeError):
        TileRef.parse("1/2")


def test_parse_and_slug():
    t = TileRef.parse("18/74975/100281")
    assert t == TileRef(18, 74975, 100281)
    assert str(t) == "18/74975/100281"
    assert TileRef.parse(t.slug) == t


def test_meters_per_pixel():
    # 2*pi*6378137/256, mpmath
    assert meters_per_pixel(0.0, 0) == pytest.approx(156543.03392804096, rel=1e-14)
    assert meters_per_pixel(60.0, 1) == pytest.approx(156543.03392804096 / 4, rel=1e-12)


def test_pixel_corners():
    t = TileRef(12, 1200, 1500)
    b = tile_bounds(t)
    nw = geo_to_pixel(GeoPoint(b.west, b.north), t)
    se = geo_to_pixel(GeoPoint(b.east, b.south), t)
    assert (nw.col, nw.row) == pytest.approx((0.0, 0.0), abs=1e-7)
    assert (se.col, se.row) == pytest.approx((256.0, 256.0), abs=1e-7)


def test_bounds_validate():
    with pytest.raises(RangeError):
        GeoBounds(10, 0, 5, 1).validate()
    assert GeoBounds(-1, -1, 1, 1).contains(GeoPoint(0, 0))


@settings(max_examples=300, deadline=None)
@given(lons, lats, zooms)
def test_point_inside_its_tile(lon, lat, z):
    t = tile_index(GeoPoint(lon, lat), z)
    b = tile_bounds(t)
    assert b.west <= lon <= b.east and b.south <= lat <= b.north
    assert tile_index(tile_center(t), z) == t


@settings(max_examples=300, deadline=None)
@given(lons, lats, zooms)
def test_geo_pixel_round_trip(lon, lat, z):
    t = tile_index(GeoPoint(lon, lat), z)
    px = geo_to_pixel(GeoPoint(lon, lat), t)
    assert -1e-6 <= px.col <= 256 + 1e-6 and -1e-6 <= px.row <= 256 + 1e-6
    q = pixel_to_geo(px, t)
    assert abs(q.lon - lon) < 1e-9 and abs(q.lat - lat) < 1e-9


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 19), st.data())
def test_pixel_geo_round_trip(z, data):
    n = 1 << z
    t = TileRef(z, data.draw(st.integers(0, n - 1)), data.draw(st.integers(0, n - 1)))
    col, row = data.draw(st.floats(0, 256)), data.draw(st.floats(0, 256))
    back = geo_to_pixel(pixel_to_geo(PixelCoord(col, row), t), t)
    assert np.allclose((back.col, back.row), (col, row), atol=1e-6)
