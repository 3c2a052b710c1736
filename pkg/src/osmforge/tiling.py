"""Web Mercator (slippy map) tile math.

Tiles follow the usual z/x/y scheme: ``x`` grows eastwards from the
antimeridian, ``y`` grows southwards from the northern Mercator limit.
Tile extents are half-open, so a point sitting exactly on the east or south
edge of a tile belongs to the neighbouring tile.

See https://wiki.openstreetmap.org/wiki/Slippy_map_tilenames
"""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np

from .errors import RangeError

TILE_SIZE = 256
MAX_ZOOM = 22
# atan(sinh(pi)): latitude where the square Mercator world ends.
MAX_LATITUDE = math.degrees(math.atan(math.sinh(math.pi)))


class GeoPoint(NamedTuple):
    lon: float
    lat: float

    def validate(self) -> GeoPoint:
        check_lonlat(self.lon, self.lat)
        return self


class TileRef(NamedTuple):
    z: int
    x: int
    y: int

    def __str__(self):
        return f"{self.z}/{self.x}/{self.y}"

    @classmethod
    def parse(cls, text: str) -> TileRef:
        """Parse ``"z/x/y"`` (also accepts ``_`` or ``,`` as separator)."""
        parts = text.replace("_", "/").replace(",", "/").split("/")
        if len(parts) != 3:
            raise RangeError(f"cannot parse tile reference {text!r}")
        return check_tile(cls(*(int(p) for p in parts)))

    @property
    def slug(self) -> str:
        return f"{self.z}_{self.x}_{self.y}"


class GeoBounds(NamedTuple):
    west: float
    south: float
    east: float
    north: float

    def validate(self) -> GeoBounds:
        if not (self.west < self.east and self.south < self.north):
            raise RangeError(f"degenerate bounds {tuple(self)}")
        return self

    def center(self) -> GeoPoint:
        # Geographic midpoint of a Mercator tile is not its pixel centre;
        # use the projected midpoint so the centre maps to (size/2, size/2).
        y0 = _lat_to_merc_unit(self.north)
        y1 = _lat_to_merc_unit(self.south)
        return GeoPoint((self.west + self.east) / 2.0, _merc_unit_to_lat((y0 + y1) / 2.0))

    def contains(self, p: GeoPoint) -> bool:
        return self.west <= p.lon <= self.east and self.south <= p.lat <= self.north


class PixelCoord(NamedTuple):
    col: float
    row: float
    tile_size: int = TILE_SIZE


def check_lonlat(lon: float, lat: float) -> None:
    if not (math.isfinite(lon) and math.isfinite(lat)):
        raise RangeError(f"non-finite coordinate ({lon}, {lat})")
    if not -180.0 <= lon <= 180.0:
        raise RangeError(f"longitude {lon} outside [-180, 180]")
    if not -MAX_LATITUDE <= lat <= MAX_LATITUDE:
        raise RangeError(f"latitude {lat} outside the Web Mercator range ±{MAX_LATITUDE:.5f}")


def check_tile(t: TileRef) -> TileRef:
    if not 0 <= t.z <= MAX_ZOOM:
        raise RangeError(f"zoom {t.z} outside [0, {MAX_ZOOM}]")
    n = 1 << t.z
    if not (0 <= t.x < n and 0 <= t.y < n):
        raise RangeError(f"tile {t} outside the {n}x{n} grid at zoom {t.z}")
    return t


def _lat_to_merc_unit(lat):
    """Latitude in degrees -> Mercator y in [0, 1] (0 = north edge)."""
    phi = np.radians(lat)
    return (1.0 - np.log(np.tan(phi) + 1.0 / np.cos(phi)) / np.pi) / 2.0


def _merc_unit_to_lat(y):
    return np.degrees(np.arctan(np.sinh(np.pi * (1.0 - 2.0 * y))))


def tile_index(p: GeoPoint, z: int) -> TileRef:
    """Tile containing ``p`` at zoom ``z``."""
    lon, lat = p
    check_lonlat(lon, lat)
    if not 0 <= z <= MAX_ZOOM:
        raise RangeError(f"zoom {z} outside [0, {MAX_ZOOM}]")
    n = 1 << z
    x = min(max(math.floor((lon + 180.0) / 360.0 * n), 0), n - 1)
    y = min(max(math.floor(float(_lat_to_merc_unit(lat)) * n), 0), n - 1)
    # Rounding can land one tile off right at an edge; settle it against
    # tile_bounds so index and bounds always agree (west/north edges inclusive).
    b = tile_bounds(TileRef(z, x, y))
    if lon < b.west and x > 0:
        x -= 1
    elif lon >= b.east and x < n - 1:
        x += 1
    if lat > b.north and y > 0:
        y -= 1
    elif lat <= b.south and y < n - 1:
        y += 1
    return TileRef(z, x, y)


def tile_bounds(t: TileRef) -> GeoBounds:
    check_tile(t)
    n = float(1 << t.z)
    west = t.x / n * 360.0 - 180.0
    east = (t.x + 1) / n * 360.0 - 180.0
    north = float(_merc_unit_to_lat(t.y / n))
    south = float(_merc_unit_to_lat((t.y + 1) / n))
    return GeoBounds(west, south, east, north)


def tile_center(t: TileRef) -> GeoPoint:
    return tile_bounds(t).center()


def geo_to_pixel(p: GeoPoint, t: TileRef, tile_size: int = TILE_SIZE) -> PixelCoord:
    """Fractional pixel position of ``p`` in the frame of tile ``t``.

    Points outside the tile produce coordinates outside ``[0, tile_size)``.
    """
    check_lonlat(*p)
    cols, rows = lonlat_to_pixels(np.array([p[0]]), np.array([p[1]]), t, tile_size)
    return PixelCoord(float(cols[0]), float(rows[0]), tile_size)


def pixel_to_geo(px: PixelCoord, t: TileRef) -> GeoPoint:
    lons, lats = pixels_to_lonlat(np.array([px.col]), np.array([px.row]), t, px.tile_size)
    return GeoPoint(float(lons[0]), float(lats[0]))


def lonlat_to_pixels(lon, lat, t: TileRef, tile_size: int = TILE_SIZE):
    """Vectorised projection of degree arrays into tile pixel space.

    No range checking; callers validate coordinates up front.
    """
    if tile_size < 1:
        raise RangeError("tile_size must be at least 1")
    n = float(1 << t.z)
    lon = np.asarray(lon, dtype=np.float64)
    lat = np.asarray(lat, dtype=np.float64)
    cols = ((lon + 180.0) / 360.0 * n - t.x) * tile_size
    rows = (_lat_to_merc_unit(lat) * n - t.y) * tile_size
    return cols, rows


def pixels_to_lonlat(cols, rows, t: TileRef, tile_size: int = TILE_SIZE):
    if tile_size < 1:
        raise RangeError("tile_size must be at least 1")
    n = float(1 << t.z)
    cols = np.asarray(cols, dtype=np.float64)
    rows = np.asarray(rows, dtype=np.float64)
    lon = (t.x + cols / tile_size) / n * 360.0 - 180.0
    lat = _merc_unit_to_lat((t.y + rows / tile_size) / n)
    return lon, lat


def meters_per_pixel(lat: float, z: int, tile_size: int = TILE_SIZE) -> float:
    """Ground resolution at latitude ``lat`` (WGS84 equatorial radius)."""
    return 2 * math.pi * 6378137.0 * math.cos(math.radians(lat)) / (tile_size * (1 << z))
