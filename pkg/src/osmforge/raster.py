"""Rasterise classified OSM geometries into general/specific class-index masks.

Membership is decided at pixel centres: pixel ``(row, col)`` is sampled at
``(col + 0.5, row + 0.5)`` in tile pixel space. Polygons use the even-odd
rule (so holes stay empty); lines are stroked as the set of centres within
``width / 2`` of the centreline, which gives round caps and joins.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import GeometryError, MissingNodeError, ShapeError
from .edits import diff_documents
from .geometry import Point, Polygon, Polyline, multipolygon_parts, resolve_geometry, shoelace_area
from .osm import NODE, RELATION, WAY, OsmDocument
from .taxonomy import ClassificationRules, classify_general, classify_specific, default_rules
from .tiling import TILE_SIZE, TileRef, check_tile, lonlat_to_pixels

log = logging.getLogger(__name__)

GENERAL, SPECIFIC = "general", "specific"


@dataclass(eq=False)
class MaskGrid:
    """Square row-major grid of 8-bit class indices."""

    data: np.ndarray
    palette: str = GENERAL
    palette_version: str = ""

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.uint8)
        if self.data.ndim != 2 or self.data.shape[0] != self.data.shape[1]:
            raise ShapeError(f"mask grid must be square 2-D, got shape {self.data.shape}")

    @classmethod
    def blank(cls, size: int = TILE_SIZE, palette: str = GENERAL, palette_version: str = "") -> MaskGrid:
        return cls(np.zeros((size, size), dtype=np.uint8), palette, palette_version)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    def copy(self) -> MaskGrid:
        return MaskGrid(self.data.copy(), self.palette, self.palette_version)

    def __eq__(self, other):
        if not isinstance(other, MaskGrid):
            return NotImplemented
        return (self.palette == other.palette and self.palette_version == other.palette_version
                and np.array_equal(self.data, other.data))

    def sha256(self) -> str:
        return hashlib.sha256(self.data.tobytes()).hexdigest()


@dataclass(eq=False)
class MaskPair:
    general: MaskGrid
    specific: MaskGrid
    tile: TileRef

    def __post_init__(self):
        if self.general.data.shape != self.specific.data.shape:
            raise ShapeError("general and specific masks differ in size")

    def __eq__(self, other):
        if not isinstance(other, MaskPair):
            return NotImplemented
        return self.tile == other.tile and self.general == other.general and self.specific == other.specific

    @property
    def id(self) -> str:
        h = hashlib.sha256(str(tuple(self.tile)).encode())
        h.update(self.general.data.tobytes())
        h.update(self.specific.data.tobytes())
        return h.hexdigest()[:16]

    def stacked(self) -> np.ndarray:
        """``(2, H, W)`` array: general then specific channel."""
        return np.stack([self.general.data, self.specific.data])


@dataclass(eq=False)
class ChangeMask:
    data: np.ndarray
    provenance: tuple[str, str] = field(default=("", ""))

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def count(self) -> int:
        return int(self.data.sum())

    def bbox(self) -> Optional[tuple[int, int, int, int]]:
        """``(row0, col0, row1, col1)`` inclusive, or ``None`` when nothing changed."""
        rows, cols = np.nonzero(self.data)
        if rows.size == 0:
            return None
        return int(rows.min()), int(cols.min()), int(rows.max()), int(cols.max())


# -- coverage primitives (pixel space) ----------------------------------------

def polygon_coverage(rings, width: int, height: int) -> np.ndarray:
    """Even-odd scanline fill of ``rings`` (each an ``(N, 2)`` closed col/row array).

    For every row the crossings of the horizontal line through the pixel
    centres are found; a pixel is inside when an odd number of crossings lie
    at or left of its centre. Edges use the half-open rule
    ``min(y0, y1) <= yc < max(y0, y1)`` so shared vertices count once.
    """
    edges = []
    for ring in rings:
        ring = np.asarray(ring, dtype=np.float64)
        edges.append(np.concatenate([ring[:-1], ring[1:]], axis=1))
    if not edges:
        return np.zeros((height, width), dtype=bool)
    e = np.concatenate(edges)
    x0, y0, x1, y1 = e[:, 0], e[:, 1], e[:, 2], e[:, 3]
    keep = y0 != y1
    x0, y0, x1, y1 = x0[keep], y0[keep], x1[keep], y1[keep]

    yc = np.arange(height, dtype=np.float64)[:, None] + 0.5
    lo, hi = np.minimum(y0, y1), np.maximum(y0, y1)
    hit = (lo <= yc) & (yc < hi)
    r_idx, e_idx = np.nonzero(hit)
    yy = yc[r_idx, 0]
    xs = x0[e_idx] + (yy - y0[e_idx]) * (x1[e_idx] - x0[e_idx]) / (y1[e_idx] - y0[e_idx])
    # first pixel whose centre is at or right of the crossing
    start = np.clip(np.ceil(xs - 0.5), 0, width).astype(np.int64)
    toggles = np.zeros((height, width + 1), dtype=np.int32)
    np.add.at(toggles, (r_idx, start), 1)
    return (np.cumsum(toggles[:, :width], axis=1) & 1).astype(bool)


def stroke_coverage(vertices, width_px: float, width: int, height: int) -> np.ndarray:
    """Pixels whose centre lies within ``width_px / 2`` of the polyline."""
    out = np.zeros((height, width), dtype=bool)
    v = np.asarray(vertices, dtype=np.float64)
    r = width_px / 2.0
    if len(v) == 1:
        v = np.concatenate([v, v])
    for (ax, ay), (bx, by) in zip(v[:-1], v[1:]):
        c0 = max(int(np.floor(min(ax, bx) - r - 0.5)), 0)
        c1 = min(int(np.ceil(max(ax, bx) + r + 0.5)), width)
        r0 = max(int(np.floor(min(ay, by) - r - 0.5)), 0)
        r1 = min(int(np.ceil(max(ay, by) + r + 0.5)), height)
        if c0 >= c1 or r0 >= r1:
            continue
        px = np.arange(c0, c1, dtype=np.float64)[None, :] + 0.5
        py = np.arange(r0, r1, dtype=np.float64)[:, None] + 0.5
        dx, dy = bx - ax, by - ay
        seg2 = dx * dx + dy * dy
        if seg2 == 0.0:
            t = 0.0
        else:
            t = np.clip(((px - ax) * dx + (py - ay) * dy) / seg2, 0.0, 1.0)
        qx = ax + t * dx - px
        qy = ay + t * dy - py
        out[r0:r1, c0:c1] |= qx * qx + qy * qy <= r * r
    return out


def disc_coverage(center, diameter: float, width: int, height: int) -> np.ndarray:
    return stroke_coverage(np.asarray([center]), diameter, width, height)


# -- geometry -> pixel space --------------------------------------------------

def _to_px(coords, tile: TileRef, size: int) -> np.ndarray:
    arr = np.asarray(coords, dtype=np.float64)
    cols, rows = lonlat_to_pixels(arr[:, 0], arr[:, 1], tile, size)
    return np.stack([cols, rows], axis=1)


def polygon_pixel_rings(poly: Polygon, tile: TileRef, size: int = TILE_SIZE) -> list[np.ndarray]:
    return [_to_px(ring, tile, size) for ring in poly.rings]


def projected_area_px(poly: Polygon, tile: TileRef, size: int = TILE_SIZE) -> float:
    """Shoelace area in square pixels, holes subtracted."""
    rings = polygon_pixel_rings(poly, tile, size)
    return abs(shoelace_area(rings[0])) - sum(abs(shoelace_area(h)) for h in rings[1:])


def _check_target(grid: MaskGrid, tile: TileRef):
    check_tile(tile)
    return grid.width, grid.height


def rasterize_polygon(poly: Polygon, class_index: int, grid: MaskGrid, tile: TileRef) -> MaskGrid:
    """Return a copy of ``grid`` with ``poly`` filled with ``class_index``."""
    w, h = _check_target(grid, tile)
    out = grid.copy()
    rings = polygon_pixel_rings(poly, tile, w)
    if abs(shoelace_area(rings[0])) < 1e-12:
        log.warning("degenerate polygon (zero projected area) skipped")
        return out
    out.data[polygon_coverage(rings, w, h)] = class_index
    return out


def rasterize_polyline(line: Polyline, class_index: int, width_px: float, grid: MaskGrid,
                       tile: TileRef) -> MaskGrid:
    if width_px < 1:
        raise ValueError("stroke width must be at least 1 pixel")
    w, h = _check_target(grid, tile)
    out = grid.copy()
    if line.vertices:
        out.data[stroke_coverage(_to_px(line.vertices, tile, w), width_px, w, h)] = class_index
    return out


# -- whole-document rendering -------------------------------------------------

@dataclass
class _DrawItem:
    order: tuple
    shape: object
    general: int
    specific: int
    key: tuple


def _draw_items(doc: OsmDocument, tile: TileRef, rules: ClassificationRules, size: int) -> list[_DrawItem]:
    """Classified, pixel-space draw list in z-order.

    Polygons are drawn largest first, then lines (widest first), then POI
    points; ties keep document order.
    """
    items = []
    for seq, el in enumerate(doc):
        if not el.tags:
            continue
        gen = classify_general(el.tags, rules)
        spec = classify_specific(el.tags, rules)
        if gen is None:
            continue
        g_idx, s_idx = gen.index, spec.index if spec is not None else 0
        key = (el.kind, el.id)
        try:
            if el.kind == NODE:
                if spec is None:
                    continue  # only POI nodes are drawn
                geoms = [resolve_geometry(doc, el.id, el.kind, rules)]
            elif el.kind == RELATION:
                if el.tags.get("type") != "multipolygon":
                    log.warning("relation %d (type=%s) ignored: only multipolygons are drawn",
                                el.id, el.tags.get("type"))
                    continue
                geoms = multipolygon_parts(doc, el)
            else:
                geoms = [resolve_geometry(doc, el.id, el.kind, rules)]
        except (GeometryError, MissingNodeError) as exc:
            log.warning("%s %d skipped: %s", el.kind, el.id, exc)
            continue

        for geom in geoms:
            if isinstance(geom, Polygon):
                rings = polygon_pixel_rings(geom, tile, size)
                area = abs(shoelace_area(rings[0]))
                if area < 1e-12:
                    log.warning("%s %d skipped: zero projected area", el.kind, el.id)
                    continue
                items.append(_DrawItem((0, -area, seq), ("polygon", rings), g_idx, s_idx, key))
            elif isinstance(geom, Polyline):
                width = rules.stroke_width(gen, spec, tile.z)
                items.append(_DrawItem((1, -width, seq), ("stroke", _to_px(geom.vertices, tile, size), width),
                                       g_idx, s_idx, key))
            elif isinstance(geom, Point):
                center = _to_px([(geom.lon, geom.lat)], tile, size)
                items.append(_DrawItem((2, 0.0, seq), ("stroke", center, rules.point_width(tile.z)),
                                       g_idx, s_idx, key))
    items.sort(key=lambda it: it.order)
    return items


def _coverage(item: _DrawItem, size: int) -> np.ndarray:
    kind = item.shape[0]
    if kind == "polygon":
        return polygon_coverage(item.shape[1], size, size)
    return stroke_coverage(item.shape[1], item.shape[2], size, size)


def element_footprints(doc: OsmDocument, tile: TileRef, rules: Optional[ClassificationRules] = None,
                       size: int = TILE_SIZE) -> dict[tuple[str, int], np.ndarray]:
    """Pixel footprint of every drawn element, ignoring occlusion."""
    rules = rules or default_rules()
    out: dict[tuple[str, int], np.ndarray] = {}
    for item in _draw_items(doc, tile, rules, size):
        cov = _coverage(item, size)
        out[item.key] = out[item.key] | cov if item.key in out else cov
    return out


def render_masks(doc: OsmDocument, tile: TileRef, rules: Optional[ClassificationRules] = None,
                 size: int = TILE_SIZE) -> MaskPair:
    """Render the general and specific class masks of ``doc`` for ``tile``.

    Every drawn element writes both masks, the specific mask getting 0 when
    the element has no POI subtype, so a specific pixel always sits on its
    parent general class.
    """
    check_tile(tile)
    rules = rules or default_rules()
    general = MaskGrid.blank(size, GENERAL, rules.version)
    specific = MaskGrid.blank(size, SPECIFIC, rules.version)
    for item in _draw_items(doc, tile, rules, size):
        cov = _coverage(item, size)
        general.data[cov] = item.general
        specific.data[cov] = item.specific
    return MaskPair(general, specific, tile)


def mask_diff(before: MaskPair, after: MaskPair) -> ChangeMask:
    if before.tile != after.tile:
        raise ShapeError(f"mask pairs belong to different tiles ({before.tile} vs {after.tile})")
    if before.general.data.shape != after.general.data.shape:
        raise ShapeError(f"mask sizes differ: {before.general.data.shape} vs {after.general.data.shape}")
    changed = (before.general.data != after.general.data) | (before.specific.data != after.specific.data)
    return ChangeMask(changed, (before.id, after.id))


def _dependents(doc: OsmDocument, keys: set) -> set:
    """Ways and relations whose geometry depends on any element in ``keys``."""
    out = set(keys)
    for _ in range(3):  # node -> way -> relation -> super-relation
        grown = set(out)
        for el in doc:
            if el.kind == WAY and any((NODE, n) in out for n in el.nodes):
                grown.add((WAY, el.id))
            elif el.kind == RELATION and any((m.type, m.ref) in out for m in el.members):
                grown.add((RELATION, el.id))
        if grown == out:
            break
        out = grown
    return out


def edit_region(before: OsmDocument, after: OsmDocument, tile: TileRef,
                rules: Optional[ClassificationRules] = None, size: int = TILE_SIZE,
                margin: Optional[float] = None) -> np.ndarray:
    """Pixels an edit may legitimately change.

    The union of the footprints, in either document, of every element the
    edit touches (directly or through a referenced node/way), dilated by
    ``margin`` pixels; the default margin is the widest stroke at this zoom.
    """
    rules = rules or default_rules()
    keys = diff_documents(before, after).touched()
    keys = _dependents(before, keys) | _dependents(after, keys)
    region = np.zeros((size, size), dtype=bool)
    for doc in (before, after):
        for key, cov in element_footprints(doc, tile, rules, size).items():
            if key in keys:
                region |= cov
    margin = rules.max_stroke_width(tile.z) if margin is None else margin
    if margin > 0 and region.any():
        region = ndimage.distance_transform_edt(~region) <= margin
    return region


def locality_report(change: ChangeMask, region: np.ndarray) -> dict:
    """Compare changed pixels with the allowed edit region."""
    outside = change.data & ~region
    rows, cols = np.nonzero(region)
    return {
        "changed_pixels": change.count,
        "changed_bbox": change.bbox(),
        "region_pixels": int(region.sum()),
        "region_bbox": None if rows.size == 0 else
        (int(rows.min()), int(cols.min()), int(rows.max()), int(cols.max())),
        "outside_pixels": int(outside.sum()),
        "local": not outside.any(),
    }


def class_pixel_counts(grid: MaskGrid) -> dict[int, int]:
    values, counts = np.unique(grid.data, return_counts=True)
    return {int(v): int(c) for v, c in zip(values, counts) if v != 0}


def specific_class_areas(doc: OsmDocument, rules: Optional[ClassificationRules] = None) -> dict[str, float]:
    """Projected area per POI subtype over the whole document (world-tile pixels²)."""
    rules = rules or default_rules()
    world = TileRef(0, 0, 0)
    areas: dict[str, float] = {}
    for el in doc:
        spec = classify_specific(el.tags, rules) if el.tags else None
        if spec is None:
            continue
        area = 0.0
        try:
            if el.kind == RELATION:
                if el.tags.get("type") == "multipolygon":
                    area = sum(projected_area_px(p, world) for p in multipolygon_parts(doc, el))
            else:
                geom = resolve_geometry(doc, el.id, el.kind, rules)
                if isinstance(geom, Polygon):
                    area = projected_area_px(geom, world)
        except (GeometryError, MissingNodeError) as exc:
            log.warning("%s %d skipped: %s", el.kind, el.id, exc)
            continue
        areas[spec.name] = areas.get(spec.name, 0.0) + area
    return areas


# -- export -------------------------------------------------------------------

def _flat_palette(rules: ClassificationRules, palette: str) -> list[int]:
    colors = rules.general_palette() if palette == GENERAL else rules.specific_palette()
    return [c for rgb in colors for c in rgb]


def mask_to_png_bytes(grid: MaskGrid, rules: Optional[ClassificationRules] = None) -> bytes:
    """8-bit indexed PNG; palette taken from the taxonomy."""
    rules = rules or default_rules()
    img = Image.frombytes("P", (grid.width, grid.height), grid.data.tobytes())
    img.putpalette(_flat_palette(rules, grid.palette))
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def change_mask_png_bytes(change: ChangeMask) -> bytes:
    """Grayscale PNG, 255 where either mask changed."""
    img = Image.fromarray(change.data.astype(np.uint8) * 255)
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def write_mask_png(grid: MaskGrid, path, rules: Optional[ClassificationRules] = None) -> Path:
    path = Path(path)
    path.write_bytes(mask_to_png_bytes(grid, rules))
    return path


def read_mask_png(path, palette: str = GENERAL, palette_version: str = "") -> MaskGrid:
    with Image.open(path) as img:
        if img.mode != "P":
            raise ShapeError(f"{path}: expected an indexed (mode P) PNG, got mode {img.mode}")
        data = np.array(img, dtype=np.uint8)
    return MaskGrid(data, palette, palette_version)


def write_mask_raw(grid: MaskGrid, path, tile: TileRef) -> tuple[Path, Path]:
    """Raw row-major bytes plus a ``.json`` sidecar describing them."""
    path = Path(path)
    raw = grid.data.tobytes()
    path.write_bytes(raw)
    sidecar = path.with_suffix(path.suffix + ".json")
    meta = {
        "format": "osmforge-mask",
        "kind": grid.palette,
        "width": grid.width,
        "height": grid.height,
        "dtype": "uint8",
        "order": "row-major",
        "palette_version": grid.palette_version,
        "tile": {"z": tile.z, "x": tile.x, "y": tile.y},
        "sha256": hashlib.sha256(raw).hexdigest(),
    }
    sidecar.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path, sidecar


def read_mask_raw(path) -> tuple[MaskGrid, TileRef]:
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    raw = path.read_bytes()
    if hashlib.sha256(raw).hexdigest() != meta["sha256"]:
        raise ShapeError(f"{path}: checksum mismatch")
    data = np.frombuffer(raw, dtype=np.uint8).reshape(meta["height"], meta["width"]).copy()
    tile = TileRef(meta["tile"]["z"], meta["tile"]["x"], meta["tile"]["y"])
    return MaskGrid(data, meta["kind"], meta["palette_version"]), tile
