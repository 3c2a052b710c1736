"""Assemble point, line and polygon geometries from document elements."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Union

import shapely

from .errors import GeometryError, MissingNodeError
from .osm import WAY, Node, OsmDocument, Relation, Way
from .taxonomy import ClassificationRules, is_area

log = logging.getLogger(__name__)

Coord = tuple[float, float]
Ring = tuple[Coord, ...]


@dataclass(frozen=True)
class Point:
    lon: float
    lat: float


@dataclass(frozen=True)
class Polyline:
    vertices: tuple[Coord, ...]


@dataclass(frozen=True)
class Polygon:
    """Outer ring plus holes; every ring is closed and simple."""

    outer: Ring
    holes: tuple[Ring, ...] = ()

    def __post_init__(self):
        for ring in (self.outer, *self.holes):
            validate_ring(ring)

    @property
    def rings(self) -> tuple[Ring, ...]:
        return (self.outer, *self.holes)


Geometry = Union[Point, Polyline, Polygon]


def shoelace_area(ring) -> float:
    """Signed area of a closed ring (positive when counter-clockwise in x/y)."""
    total = 0.0
    for (x0, y0), (x1, y1) in zip(ring[:-1], ring[1:]):
        total += x0 * y1 - x1 * y0
    return total / 2.0


def validate_ring(ring: Ring) -> None:
    if len(ring) < 4:
        raise GeometryError(f"ring has {len(ring)} vertices; a closed ring needs at least 4")
    if ring[0] != ring[-1]:
        raise GeometryError("ring is not closed")
    if not shapely.LinearRing(ring).is_simple:
        raise GeometryError("ring self-intersects")


def dedupe(coords) -> list[Coord]:
    """Drop consecutive duplicate vertices."""
    out: list[Coord] = []
    for c in coords:
        if not out or out[-1] != c:
            out.append(c)
    return out


def _way_coords(doc: OsmDocument, way: Way) -> list[Coord]:
    coords = []
    for ref in way.nodes:
        node = doc.node(ref)
        if node is None:
            raise MissingNodeError(ref, way.id)
        coords.append((node.lon, node.lat))
    return dedupe(coords)


def _join_rings(chains: list[list[Coord]], rel_id: int) -> list[list[Coord]]:
    """Stitch open member ways into closed rings by matching endpoints."""
    rings = []
    pending = [c for c in chains if len(c) >= 2]
    while pending:
        ring = list(pending.pop(0))
        while ring[0] != ring[-1]:
            for i, chain in enumerate(pending):
                if chain[0] == ring[-1]:
                    ring.extend(chain[1:])
                elif chain[-1] == ring[-1]:
                    ring.extend(reversed(chain[:-1]))
                elif chain[-1] == ring[0]:
                    ring[:0] = chain[:-1]
                elif chain[0] == ring[0]:
                    ring[:0] = list(reversed(chain[1:]))
                else:
                    continue
                pending.pop(i)
                break
            else:
                raise GeometryError(f"relation {rel_id}: member ways do not form a closed ring")
        rings.append(dedupe(ring))
    return rings


def multipolygon_parts(doc: OsmDocument, rel: Relation) -> list[Polygon]:
    """Every outer ring of a multipolygon with the inner rings that fall inside it."""
    outer_chains, inner_chains = [], []
    for m in rel.members:
        if m.type != WAY:
            continue
        way = doc.get(WAY, m.ref)
        if way is None:
            log.warning("relation %d: member way %d not in document", rel.id, m.ref)
            continue
        (inner_chains if m.role == "inner" else outer_chains).append(_way_coords(doc, way))
    outers = _join_rings(outer_chains, rel.id)
    if not outers:
        raise GeometryError(f"relation {rel.id} has no valid outer ring")
    inners = _join_rings(inner_chains, rel.id)
    parts = []
    for outer in outers:
        shell = shapely.Polygon(outer)
        holes = tuple(tuple(r) for r in inners if shell.contains(shapely.Point(r[0])))
        parts.append(Polygon(tuple(outer), holes))
    return parts


def _multipolygon(doc: OsmDocument, rel: Relation) -> Polygon:
    parts = multipolygon_parts(doc, rel)
    if len(parts) > 1:
        log.warning("relation %d has %d outer rings; returning the largest", rel.id, len(parts))
    return max(parts, key=lambda p: abs(shoelace_area(p.outer)))


def resolve_geometry(doc: OsmDocument, id: int, kind: str,
                     rules: Optional[ClassificationRules] = None) -> Geometry:
    """Geometry of element ``(kind, id)``.

    Closed ways whose tags carry area semantics become polygons, every other
    way a polyline. Multipolygon relations are assembled from their
    outer/inner members; other relation types raise :class:`GeometryError`.
    """
    el = doc.get(kind, id)
    if el is None:
        raise KeyError((kind, id))
    if isinstance(el, Node):
        return Point(el.lon, el.lat)
    if isinstance(el, Way):
        coords = _way_coords(doc, el)
        if el.is_closed and len(coords) >= 4 and is_area(el.tags, rules):
            return Polygon(tuple(coords))
        if len(coords) < 2:
            raise GeometryError(f"way {el.id} collapses to a single vertex")
        return Polyline(tuple(coords))
    if el.tags.get("type") != "multipolygon":
        raise GeometryError(f"relation {el.id}: only multipolygon relations have geometry")
    return _multipolygon(doc, el)

