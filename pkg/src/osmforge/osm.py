"""Immutable document model for OSM JSON (Overpass ``elements`` convention)."""

from __future__ import annotations

import hashlib
import json
import logging
from collections.abc import Iterable, Iterator, Mapping
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Any, Optional, Union

from .errors import ParseError, RangeError, SchemaError
from .tiling import GeoBounds
from .timestamps import TimeStamp6D

log = logging.getLogger(__name__)

NODE, WAY, RELATION = "node", "way", "relation"
KINDS = (NODE, WAY, RELATION)


class TagMap(Mapping):
    """Ordered, immutable key/value tag set.

    Keys are unique and both keys and values must be non-empty strings.
    Equality ignores order, iteration preserves it.
    """

    __slots__ = ("_items", "_index")

    def __init__(self, entries: Union[Mapping[str, str], Iterable[tuple[str, str]], None] = None):
        if entries is None:
            entries = ()
        elif isinstance(entries, Mapping):
            entries = entries.items()
        items = []
        index = {}
        for key, value in entries:
            if not isinstance(key, str) or not key:
                raise SchemaError(f"tag key must be a non-empty string, got {key!r}")
            if not isinstance(value, str) or not value:
                raise SchemaError(f"tag {key!r} must have a non-empty string value, got {value!r}")
            if key in index:
                raise SchemaError(f"duplicate tag key {key!r}")
            index[key] = value
            items.append((key, value))
        self._items = tuple(items)
        self._index = index

    def __getitem__(self, key):
        return self._index[key]

    def __iter__(self):
        return (k for k, _ in self._items)

    def __len__(self):
        return len(self._items)

    def __hash__(self):
        return hash(frozenset(self._items))

    def __repr__(self):
        return f"TagMap({dict(self._items)!r})"

    def replace(self, changes: Mapping[str, Optional[str]]) -> TagMap:
        """New map with ``changes`` applied; a ``None`` value deletes the key."""
        out = dict(self._items)
        for key, value in changes.items():
            if value is None:
                out.pop(key, None)
            else:
                out[key] = value
        return TagMap(out)


EMPTY_TAGS = TagMap()


@dataclass(frozen=True)
class Node:
    id: int
    lon: float
    lat: float
    tags: TagMap = EMPTY_TAGS
    kind = NODE

    def __post_init__(self):
        if not (-180.0 <= self.lon <= 180.0) or not (-90.0 <= self.lat <= 90.0):
            raise RangeError(f"node {self.id} has out-of-range coordinate ({self.lon}, {self.lat})")


@dataclass(frozen=True)
class Way:
    id: int
    nodes: tuple[int, ...]
    tags: TagMap = EMPTY_TAGS
    kind = WAY

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        if len(self.nodes) < 2:
            raise SchemaError(f"way {self.id} has {len(self.nodes)} node reference(s); need at least 2")

    @property
    def is_closed(self) -> bool:
        return self.nodes[0] == self.nodes[-1]


@dataclass(frozen=True)
class Member:
    ref: int
    type: str
    role: str = ""


@dataclass(frozen=True)
class Relation:
    id: int
    members: tuple[Member, ...]
    tags: TagMap = EMPTY_TAGS
    kind = RELATION

    def __post_init__(self):
        object.__setattr__(self, "members", tuple(self.members))
        if not self.members:
            raise SchemaError(f"relation {self.id} has no members")


OsmElement = Union[Node, Way, Relation]
ElementKey = tuple[str, int]


def element_key(el: OsmElement) -> ElementKey:
    return (el.kind, el.id)


def element_to_dict(el: OsmElement) -> dict[str, Any]:
    """Overpass-style dict for one element (the inverse of element parsing)."""
    out: dict[str, Any] = {"type": el.kind, "id": el.id}
    if isinstance(el, Node):
        out["lat"] = el.lat
        out["lon"] = el.lon
    elif isinstance(el, Way):
        out["nodes"] = list(el.nodes)
    else:
        out["members"] = [{"type": m.type, "ref": m.ref, "role": m.role} for m in el.members]
    if el.tags:
        out["tags"] = dict(el.tags.items())
    return out


def element_to_json(el: OsmElement) -> str:
    """Canonical serialisation; equal elements always give equal strings."""
    d = element_to_dict(el)
    if "tags" in d:
        d["tags"] = dict(sorted(d["tags"].items()))
    return json.dumps(d, sort_keys=True, separators=(",", ":"))


def fingerprint(el: OsmElement) -> str:
    return hashlib.sha256(element_to_json(el).encode()).hexdigest()


@dataclass(frozen=True, eq=False)
class OsmDocument:
    """Immutable, id-indexed set of OSM elements.

    Elements keep their input order (rendering relies on it for
    tie-breaking), but equality compares content only.
    """

    elements: Mapping[ElementKey, OsmElement] = field(default_factory=dict)
    capture_timestamp: Optional[TimeStamp6D] = None
    source_bounds: Optional[GeoBounds] = None

    def __post_init__(self):
        object.__setattr__(self, "elements", MappingProxyType(dict(self.elements)))

    @classmethod
    def from_elements(cls, elements: Iterable[OsmElement], **kwargs) -> OsmDocument:
        table: dict[ElementKey, OsmElement] = {}
        for el in elements:
            key = element_key(el)
            if key in table:
                raise SchemaError(f"duplicate {el.kind} id {el.id}")
            table[key] = el
        return cls(table, **kwargs)

    def __len__(self):
        return len(self.elements)

    def __iter__(self) -> Iterator[OsmElement]:
        return iter(self.elements.values())

    def __contains__(self, key):
        return key in self.elements

    def __eq__(self, other):
        if not isinstance(other, OsmDocument):
            return NotImplemented
        return (
            dict(self.elements) == dict(other.elements)
            and self.capture_timestamp == other.capture_timestamp
            and self.source_bounds == other.source_bounds
        )

    def __hash__(self):
        return hash(self.fingerprint())

    def get(self, kind: str, id: int) -> Optional[OsmElement]:
        return self.elements.get((kind, id))

    def node(self, id: int) -> Optional[Node]:
        return self.elements.get((NODE, id))

    def of_kind(self, kind: str) -> list[OsmElement]:
        return [el for el in self if el.kind == kind]

    @property
    def nodes(self) -> list[Node]:
        return self.of_kind(NODE)

    @property
    def ways(self) -> list[Way]:
        return self.of_kind(WAY)

    @property
    def relations(self) -> list[Relation]:
        return self.of_kind(RELATION)

    def counts(self) -> dict[str, int]:
        out = dict.fromkeys(KINDS, 0)
        for key in self.elements:
            out[key[0]] += 1
        return out

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for el in self:
            h.update(element_to_json(el).encode())
            h.update(b"\n")
        h.update(repr((self.capture_timestamp, self.source_bounds)).encode())
        return h.hexdigest()

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"version": 0.6, "generator": "osmforge"}
        if self.capture_timestamp is not None:
            out["osm3s"] = {"timestamp_osm_base": self.capture_timestamp.isoformat() + "Z"}
        if self.source_bounds is not None:
            b = self.source_bounds
            out["bounds"] = {"minlat": b.south, "minlon": b.west, "maxlat": b.north, "maxlon": b.east}
        out["elements"] = [element_to_dict(el) for el in self]
        return out

    def to_json(self) -> bytes:
        return json.dumps(self.to_dict(), separators=(",", ":")).encode()


def _decode(data: Union[bytes, str]) -> Any:
    if isinstance(data, (bytes, bytearray)):
        try:
            text = bytes(data).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError(f"invalid UTF-8: {exc.reason}", exc.start) from None
    else:
        text = data
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode("utf-8"))
        raise ParseError(f"malformed JSON: {exc.msg}", offset) from None


def _require(raw: dict, name: str, index: int):
    if name not in raw:
        raise SchemaError(f"missing mandatory field {name!r}", index)
    return raw[name]


def _as_int(value, name, index) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise SchemaError(f"field {name!r} must be an integer, got {value!r}", index)
    return value


def _parse_tags(raw: dict, index: int) -> TagMap:
    tags = raw.get("tags") or {}
    if not isinstance(tags, dict):
        raise SchemaError("'tags' must be an object", index)
    try:
        # OSM occasionally carries empty values; they carry no semantics.
        return TagMap((str(k), str(v)) for k, v in tags.items() if k != "" and v != "")
    except SchemaError as exc:
        raise SchemaError(str(exc), index) from None


def _parse_element(raw: Any, index: int) -> Optional[OsmElement]:
    if not isinstance(raw, dict):
        raise SchemaError("element is not an object", index)
    kind = _require(raw, "type", index)
    el_id = _as_int(_require(raw, "id", index), "id", index)
    if kind not in KINDS:
        log.warning("element %d: skipping unsupported type %r", index, kind)
        return None
    tags = _parse_tags(raw, index)
    try:
        if kind == NODE:
            lat, lon = _require(raw, "lat", index), _require(raw, "lon", index)
            if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in (lat, lon)):
                raise SchemaError("node coordinates must be numbers", index)
            return Node(el_id, float(lon), float(lat), tags)
        if kind == WAY:
            refs = _require(raw, "nodes", index)
            if not isinstance(refs, list):
                raise SchemaError("'nodes' must be an array", index)
            return Way(el_id, tuple(_as_int(r, "nodes", index) for r in refs), tags)
        members = _require(raw, "members", index)
        if not isinstance(members, list):
            raise SchemaError("'members' must be an array", index)
        parsed = []
        for m in members:
            if not isinstance(m, dict):
                raise SchemaError("relation member is not an object", index)
            parsed.append(Member(
                _as_int(_require(m, "ref", index), "ref", index),
                str(_require(m, "type", index)),
                str(m.get("role", "")),
            ))
        return Relation(el_id, tuple(parsed), tags)
    except RangeError as exc:
        raise RangeError(f"element {index}: {exc}") from None
    except SchemaError as exc:
        if exc.index is None:
            raise SchemaError(str(exc), index) from None
        raise


def _same_shape(a: OsmElement, b: OsmElement) -> bool:
    if isinstance(a, Node):
        return (a.lon, a.lat) == (b.lon, b.lat)
    if isinstance(a, Way):
        return a.nodes == b.nodes
    return a.members == b.members


def _parse_timestamp(top: dict) -> Optional[TimeStamp6D]:
    meta = top.get("osm3s")
    if isinstance(meta, dict) and isinstance(meta.get("timestamp_osm_base"), str):
        return TimeStamp6D.parse(meta["timestamp_osm_base"])
    return None


def _parse_bounds(top: dict) -> Optional[GeoBounds]:
    b = top.get("bounds")
    if not isinstance(b, dict):
        return None
    try:
        return GeoBounds(float(b["minlon"]), float(b["minlat"]), float(b["maxlon"]), float(b["maxlat"])).validate()
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"invalid 'bounds' object: {exc}") from None


def parse_osm_json(data: Union[bytes, str]) -> OsmDocument:
    """Parse an Overpass/OSM JSON response into an :class:`OsmDocument`.

    Unknown top-level fields are ignored. Overpass answers built with
    ``out body; >; out skel;`` may list the same element twice (once with
    tags, once bare); such duplicates are merged keeping the tagged copy.
    Duplicates whose geometry disagrees raise :class:`SchemaError`.
    """
    top = _decode(data)
    if not isinstance(top, dict):
        raise SchemaError("top-level JSON value must be an object")
    raw_elements = top.get("elements")
    if not isinstance(raw_elements, list):
        raise SchemaError("top-level object has no 'elements' array")

    table: dict[ElementKey, OsmElement] = {}
    for index, raw in enumerate(raw_elements):
        el = _parse_element(raw, index)
        if el is None:
            continue
        key = element_key(el)
        prev = table.get(key)
        if prev is not None:
            if not _same_shape(prev, el):
                raise SchemaError(f"conflicting duplicate of {el.kind} {el.id}", index)
            if len(el.tags) > len(prev.tags):
                table[key] = el
            continue
        table[key] = el
    return OsmDocument(table, capture_timestamp=_parse_timestamp(top), source_bounds=_parse_bounds(top))


def load_osm_json(path) -> OsmDocument:
    with open(path, "rb") as fh:
        return parse_osm_json(fh.read())
