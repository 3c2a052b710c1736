import pytest

from osmforge.errors import GeometryError, MissingNodeError
from osmforge.geometry import Point, Polygon, Polyline, dedupe, resolve_geometry, shoelace_area
from osmforge.osm import Member, Node, OsmDocument, Relation, TagMap, Way


def _square_doc(tags, closed=True):
    nodes = [Node(1, 0.0, 0.0), Node(2, 0.001, 0.0), Node(3, 0.001, 0.001), Node(4, 0.0, 0.001)]
    refs = (1, 2, 3, 4, 1) if closed else (1, 2, 3, 4)
    return OsmDocument.from_elements([*nodes, Way(10, refs, TagMap(tags))])


def test_shoelace():
    assert shoelace_area([(0, 0), (2, 0), (2, 3), (0, 3), (0, 0)]) == 6.0
    assert shoelace_area([(0, 0), (0, 3), (2, 3), (2, 0), (0, 0)]) == -6.0


def test_node_is_point():
    doc = _square_doc({"building": "yes"})
    assert resolve_geometry(doc, 1, "node") == Point(0.0, 0.0)


def test_closed_area_way_is_polygon():
    g = resolve_geometry(_square_doc({"building": "yes"}), 10, "way")
    assert isinstance(g, Polygon) and len(g.outer) == 5 and g.holes == ()


def test_closed_highway_is_polyline():
    g = resolve_geometry(_square_doc({"highway": "residential"}), 10, "way")
    assert isinstance(g, Polyline) and len(g.vertices) == 5


def test_open_way_is_polyline():
    g = resolve_geometry(_square_doc({"building": "yes"}, closed=False), 10, "way")
    assert isinstance(g, Polyline)


def test_missing_node():
    doc = OsmDocument.from_elements([Node(1, 0, 0), Way(10, (1, 99), TagMap({"highway": "path"}))])
    with pytest.raises(MissingNodeError) as exc:
        resolve_geometry(doc, 10, "way")
    assert exc.value.node_id == 99


def test_missing_element():
    with pytest.raises(KeyError):
        resolve_geometry(OsmDocument({}), 5, "way")


def test_bowtie_rejected():
    with pytest.raises(GeometryError):
        Polygon(((0, 0), (1, 1), (1, 0), (0, 1), (0, 0)))


def test_multipolygon_with_hole(main_doc, fixture_ids):
    g = resolve_geometry(main_doc, fixture_ids["park"], "relation")
    assert isinstance(g, Polygon) and len(g.holes) == 1


def test_multipolygon_from_split_ways():
    nodes = [Node(i, x, y) for i, (x, y) in enumerate([(0, 0), (1, 0), (1, 1), (0, 1)], start=1)]
    w1 = Way(10, (1, 2, 3))
    w2 = Way(11, (1, 4, 3))  # runs the other way round
    rel = Relation(20, (Member(10, "way", "outer"), Member(11, "way", "outer")),
                   TagMap({"type": "multipolygon", "landuse": "grass"}))
    g = resolve_geometry(OsmDocument.from_elements([*nodes, w1, w2, rel]), 20, "relation")
    assert abs(shoelace_area(g.outer)) == 1.0


def test_open_multipolygon_ring_rejected():
    nodes = [Node(i, x, y) for i, (x, y) in enumerate([(0, 0), (1, 0), (1, 1)], start=1)]
    rel = Relation(20, (Member(10, "way", "outer"),), TagMap({"type": "multipolygon"}))
    with pytest.raises(GeometryError):
        resolve_geometry(OsmDocument.from_elements([*nodes, Way(10, (1, 2, 3)), rel]), 20, "relation")


def test_other_relation_types_rejected():
    rel = Relation(20, (Member(1, "node"),), TagMap({"type": "route"}))
    with pytest.raises(GeometryError):
        resolve_geometry(OsmDocument.from_elements([Node(1, 0, 0), rel]), 20, "relation")


def test_dedupe():
    assert dedupe([(0, 0), (0, 0), (1, 1), (1, 1), (0, 0)]) == [(0, 0), (1, 1), (0, 0)]
