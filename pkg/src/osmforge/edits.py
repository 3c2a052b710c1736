"""Structured edits on OSM documents and document diffs.

Edit scripts serialise as a JSON array of op objects::

    [
      {"op": "add", "elements": [<Overpass-style element>, ...]},
      {"op": "remove", "type": "way", "id": 42},
      {"op": "change", "type": "way", "id": 7, "tags": {"natural": null, "landuse": "grass"}}
    ]

``add`` elements use the same layout as Overpass output; new objects
conventionally get negative ids. In ``change`` a ``null`` value deletes the
tag and any other value sets it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Optional, Union

from .errors import EditError, ParseError, SchemaError
from .osm import (
    KINDS,
    OsmDocument,
    OsmElement,
    TagMap,
    _parse_element,
    element_key,
    element_to_dict,
    fingerprint,
)


@dataclass(frozen=True)
class AddFeature:
    elements: tuple[OsmElement, ...]

    def __post_init__(self):
        object.__setattr__(self, "elements", tuple(self.elements))


@dataclass(frozen=True)
class RemoveFeature:
    kind: str
    id: int


@dataclass(frozen=True)
class ChangeTags:
    kind: str
    id: int
    changes: tuple[tuple[str, Optional[str]], ...]

    def __post_init__(self):
        changes = self.changes.items() if isinstance(self.changes, dict) else self.changes
        object.__setattr__(self, "changes", tuple(changes))


EditOp = Union[AddFeature, RemoveFeature, ChangeTags]


@dataclass(frozen=True)
class EditScript:
    ops: tuple[EditOp, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "ops", tuple(self.ops))

    def __len__(self):
        return len(self.ops)

    def to_json(self) -> list:
        out = []
        for op in self.ops:
            if isinstance(op, AddFeature):
                out.append({"op": "add", "elements": [element_to_dict(e) for e in op.elements]})
            elif isinstance(op, RemoveFeature):
                out.append({"op": "remove", "type": op.kind, "id": op.id})
            else:
                out.append({"op": "change", "type": op.kind, "id": op.id, "tags": dict(op.changes)})
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2)

    @classmethod
    def from_json(cls, raw) -> EditScript:
        if not isinstance(raw, list):
            raise SchemaError("edit script must be a JSON array")
        ops: list[EditOp] = []
        for i, item in enumerate(raw):
            if not isinstance(item, dict):
                raise SchemaError("edit op must be an object", i)
            kind = item.get("op")
            if kind == "add":
                elements = [_parse_element(e, i) for e in item.get("elements", [])]
                if not elements or any(e is None for e in elements):
                    raise SchemaError("'add' needs a non-empty list of node/way/relation elements", i)
                ops.append(AddFeature(tuple(elements)))
            elif kind in ("remove", "change"):
                el_type, el_id = item.get("type"), item.get("id")
                if el_type not in KINDS or not isinstance(el_id, int):
                    raise SchemaError(f"'{kind}' needs 'type' and integer 'id'", i)
                if kind == "remove":
                    ops.append(RemoveFeature(el_type, el_id))
                else:
                    tags = item.get("tags")
                    if not isinstance(tags, dict):
                        raise SchemaError("'change' needs a 'tags' object", i)
                    ops.append(ChangeTags(el_type, el_id, tuple(tags.items())))
            else:
                raise SchemaError(f"unknown op {kind!r}", i)
        return cls(tuple(ops))

    @classmethod
    def loads(cls, text: Union[str, bytes]) -> EditScript:
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ParseError(f"malformed edit script: {exc.msg}", exc.pos) from None
        return cls.from_json(raw)


def apply_edit(doc: OsmDocument, script: EditScript) -> OsmDocument:
    """Return a new document with ``script`` applied op by op.

    Added elements are appended after the existing ones; untouched elements
    keep their position and identity.
    """
    table = dict(doc.elements)
    for i, op in enumerate(script.ops):
        if isinstance(op, AddFeature):
            keys = [element_key(e) for e in op.elements]
            if len(set(keys)) != len(keys):
                raise EditError("add op lists the same element twice", i)
            for el, key in zip(op.elements, keys):
                if key in table:
                    raise EditError(f"{key[0]} id {key[1]} already exists", i)
                table[key] = el
        elif isinstance(op, RemoveFeature):
            if table.pop((op.kind, op.id), None) is None:
                raise EditError(f"cannot remove missing {op.kind} {op.id}", i)
        elif isinstance(op, ChangeTags):
            el = table.get((op.kind, op.id))
            if el is None:
                raise EditError(f"cannot retag missing {op.kind} {op.id}", i)
            try:
                new_tags = el.tags.replace(dict(op.changes))
            except SchemaError as exc:
                raise EditError(str(exc), i) from None
            table[(op.kind, op.id)] = _with_tags(el, new_tags)
        else:
            raise EditError(f"unsupported op {op!r}", i)
    return OsmDocument(table, capture_timestamp=doc.capture_timestamp, source_bounds=doc.source_bounds)


def _with_tags(el: OsmElement, tags: TagMap) -> OsmElement:
    return replace(el, tags=tags)


@dataclass(frozen=True)
class ChangeSet:
    """Element-level difference between two documents.

    ``modified`` holds elements whose geometry (coordinates, node list or
    members) changed; a pure tag change lands in ``retagged`` instead.
    """

    added: tuple[OsmElement, ...] = ()
    removed: tuple[OsmElement, ...] = ()
    retagged: tuple[tuple[tuple[str, int], TagMap, TagMap], ...] = ()
    modified: tuple[tuple[OsmElement, OsmElement], ...] = field(default=())

    @property
    def added_ids(self) -> list[tuple[str, int]]:
        return [element_key(e) for e in self.added]

    @property
    def removed_ids(self) -> list[tuple[str, int]]:
        return [element_key(e) for e in self.removed]

    @property
    def retagged_ids(self) -> list[tuple[str, int]]:
        return [key for key, _, _ in self.retagged]

    @property
    def modified_ids(self) -> list[tuple[str, int]]:
        return [element_key(new) for _, new in self.modified]

    def touched(self) -> set[tuple[str, int]]:
        return set(self.added_ids) | set(self.removed_ids) | set(self.retagged_ids) | set(self.modified_ids)

    def is_empty(self) -> bool:
        return not (self.added or self.removed or self.retagged or self.modified)

    def to_script(self) -> EditScript:
        """Script that turns the ``before`` document into ``after``."""
        ops: list[EditOp] = []
        for key, old, new in self.retagged:
            changes = {k: None for k in old if k not in new}
            changes.update({k: v for k, v in new.items() if old.get(k) != v})
            ops.append(ChangeTags(key[0], key[1], tuple(changes.items())))
        for old, new in self.modified:
            ops.append(RemoveFeature(old.kind, old.id))
            ops.append(AddFeature((new,)))
        for el in self.removed:
            ops.append(RemoveFeature(el.kind, el.id))
        if self.added:
            ops.append(AddFeature(self.added))
        return EditScript(tuple(ops))


def diff_documents(before: OsmDocument, after: OsmDocument) -> ChangeSet:
    added, removed, retagged, modified = [], [], [], []
    for key, old in before.elements.items():
        new = after.elements.get(key)
        if new is None:
            removed.append(old)
        elif fingerprint(old) != fingerprint(new):
            if _with_tags(old, new.tags) == new:
                retagged.append((key, old.tags, new.tags))
            else:
                modified.append((old, new))
    for key, new in after.elements.items():
        if key not in before.elements:
            added.append(new)
    return ChangeSet(tuple(added), tuple(removed), tuple(retagged), tuple(modified))
