"""Tag-based classification into general surface classes and POI subtypes.

The rule table lives in a JSON file (``data/taxonomy.json`` ships as the
default). Each rule holds a list of *predicates*; a predicate is a mapping of
tag key to value spec and matches when every key matches:

* ``"*"`` -- key present with any value
* ``"value"`` -- exact value
* ``["a", "b"]`` -- any of the listed values
* ``{"not": ["a", "b"]}`` -- key present with any value except those listed

Rules are evaluated in file order and the first match wins.
"""

from __future__ import annotations

import json
import logging
import re
from collections.abc import Mapping
from dataclasses import dataclass, field
from importlib import resources
from typing import Optional

from .errors import ConfigError

log = logging.getLogger(__name__)

_HEX = re.compile(r"^#[0-9a-fA-F]{6}$")
GEOMETRY_KINDS = ("area", "line", "point")


@dataclass(frozen=True)
class ValueSpec:
    any: bool = False
    values: frozenset = frozenset()
    negated: bool = False

    @classmethod
    def parse(cls, raw) -> ValueSpec:
        if raw == "*":
            return cls(any=True)
        if isinstance(raw, str):
            return cls(values=frozenset([raw]))
        if isinstance(raw, list) and raw and all(isinstance(v, str) for v in raw):
            return cls(values=frozenset(raw))
        if isinstance(raw, dict) and set(raw) == {"not"} and isinstance(raw["not"], list):
            return cls(values=frozenset(raw["not"]), negated=True)
        raise ConfigError(f"invalid tag value spec {raw!r}")

    def __call__(self, value: Optional[str]) -> bool:
        if value is None:
            return False
        if self.any:
            return True
        return (value in self.values) != self.negated

    def covers(self, other: ValueSpec) -> bool:
        """True when every value accepted by ``other`` is accepted by ``self``."""
        if self.any:
            return True
        if other.any:
            return False
        if self.negated:
            if other.negated:
                return self.values <= other.values
            return not (self.values & other.values)
        if other.negated:
            return False
        return other.values <= self.values


@dataclass(frozen=True)
class TagPredicate:
    conditions: tuple[tuple[str, ValueSpec], ...]

    @classmethod
    def parse(cls, raw) -> TagPredicate:
        if not isinstance(raw, dict) or not raw:
            raise ConfigError(f"predicate must be a non-empty object, got {raw!r}")
        return cls(tuple((k, ValueSpec.parse(v)) for k, v in raw.items()))

    def __call__(self, tags: Mapping[str, str]) -> bool:
        return all(spec(tags.get(key)) for key, spec in self.conditions)

    def covers(self, other: TagPredicate) -> bool:
        """True when ``self`` matches every tag set that ``other`` matches."""
        theirs = dict(other.conditions)
        return all(key in theirs and spec.covers(theirs[key]) for key, spec in self.conditions)


def _match_any(predicates, tags) -> bool:
    return any(p(tags) for p in predicates)


@dataclass(frozen=True)
class GeneralClass:
    name: str
    index: int
    color: str

    @property
    def rgb(self) -> tuple[int, int, int]:
        return hex_to_rgb(self.color)


@dataclass(frozen=True)
class SpecificClass:
    name: str
    index: int
    color: str
    parent: GeneralClass
    geometry: str
    predicates: tuple[TagPredicate, ...] = field(repr=False)

    @property
    def rgb(self) -> tuple[int, int, int]:
        return hex_to_rgb(self.color)

    def matches(self, tags: Mapping[str, str]) -> bool:
        return _match_any(self.predicates, tags)


def hex_to_rgb(color: str) -> tuple[int, int, int]:
    return tuple(int(color[i:i + 2], 16) for i in (1, 3, 5))


@dataclass(frozen=True)
class ClassificationRules:
    version: str
    general_classes: tuple[GeneralClass, ...]
    specific_classes: tuple[SpecificClass, ...]
    general_rules: tuple[tuple[tuple[TagPredicate, ...], GeneralClass], ...]
    area_rules: tuple[tuple[tuple[TagPredicate, ...], bool], ...]
    line_widths: Mapping[str, float]
    default_line_width: float = 3.0
    reference_zoom: int = 18
    point_diameter: float = 5.0

    @property
    def background(self) -> GeneralClass:
        return self.general_classes[0]

    def general(self, name: str) -> GeneralClass:
        for c in self.general_classes:
            if c.name == name:
                return c
        raise KeyError(name)

    def specific(self, name: str) -> SpecificClass:
        for c in self.specific_classes:
            if c.name == name:
                return c
        raise KeyError(name)

    def general_palette(self) -> list[tuple[int, int, int]]:
        return _palette(self.general_classes, self.background.color)

    def specific_palette(self) -> list[tuple[int, int, int]]:
        return _palette(self.specific_classes, self.background.color)

    def general_rule_class(self, tags: Mapping[str, str]) -> Optional[GeneralClass]:
        """First general rule matching ``tags``, ignoring the specific registry."""
        for predicates, cls in self.general_rules:
            if _match_any(predicates, tags):
                return cls
        return None

    def stroke_width(self, general: Optional[GeneralClass], specific: Optional[SpecificClass], zoom: int) -> float:
        """Line width in pixels at ``zoom``; never below one pixel."""
        width = self.default_line_width
        for cls in (general, specific):
            if cls is not None and cls.name in self.line_widths:
                width = self.line_widths[cls.name]
        return max(1.0, width * 2.0 ** (zoom - self.reference_zoom))

    def point_width(self, zoom: int) -> float:
        return max(1.0, self.point_diameter * 2.0 ** (zoom - self.reference_zoom))

    def max_stroke_width(self, zoom: int) -> float:
        widths = [self.default_line_width, self.point_diameter, *self.line_widths.values()]
        return max(1.0, max(widths) * 2.0 ** (zoom - self.reference_zoom))


def _palette(classes, background_color):
    size = max(c.index for c in classes) + 1
    pal = [(0, 0, 0)] * max(size, 1)
    pal[0] = hex_to_rgb(background_color)
    for c in classes:
        pal[c.index] = c.rgb
    return pal


def _check_palette(entries, what):
    seen_idx, seen_col, seen_name = {}, {}, set()
    for name, index, color in entries:
        if not isinstance(index, int) or not 0 <= index <= 255:
            raise ConfigError(f"{what} class {name!r}: index must be an integer in [0, 255]")
        if not isinstance(color, str) or not _HEX.match(color):
            raise ConfigError(f"{what} class {name!r}: color must be #rrggbb, got {color!r}")
        if name in seen_name:
            raise ConfigError(f"{what} class {name!r} defined twice")
        if index in seen_idx:
            raise ConfigError(f"{what} classes {seen_idx[index]!r} and {name!r} share index {index}")
        if color.lower() in seen_col:
            raise ConfigError(f"{what} classes {seen_col[color.lower()]!r} and {name!r} share color {color}")
        seen_name.add(name)
        seen_idx[index] = name
        seen_col[color.lower()] = name


def _parse_predicates(raw, where) -> tuple[TagPredicate, ...]:
    if not isinstance(raw, list) or not raw:
        raise ConfigError(f"{where}: 'match' must be a non-empty array")
    return tuple(TagPredicate.parse(p) for p in raw)


def rules_from_dict(cfg: dict) -> ClassificationRules:
    """Build and validate rules from an already-decoded config object."""
    try:
        raw_general = cfg["general_classes"]
        raw_specific = cfg["specific_classes"]
    except (KeyError, TypeError):
        raise ConfigError("taxonomy config needs 'general_classes' and 'specific_classes'") from None

    general = tuple(GeneralClass(g["name"], g["index"], g["color"]) for g in raw_general)
    if not general or general[0].name != "background" or general[0].index != 0:
        raise ConfigError("the first general class must be 'background' with index 0")
    _check_palette([(g.name, g.index, g.color) for g in general], "general")
    by_name = {g.name: g for g in general}

    specific = []
    for s in raw_specific:
        name = s.get("name", "")
        if not name or "," in name:
            raise ConfigError(f"specific class name {name!r} must be non-empty and comma-free")
        if s.get("parent") not in by_name or s["parent"] == "background":
            raise ConfigError(f"specific class {name!r}: unknown parent {s.get('parent')!r}")
        if s.get("geometry", "area") not in GEOMETRY_KINDS:
            raise ConfigError(f"specific class {name!r}: geometry must be one of {GEOMETRY_KINDS}")
        specific.append(SpecificClass(
            name, s.get("index"), s.get("color"), by_name[s["parent"]], s.get("geometry", "area"),
            _parse_predicates(s.get("match"), f"specific class {name!r}"),
        ))
    if any(s.index == 0 for s in specific):
        raise ConfigError("specific index 0 is reserved for background")
    _check_palette([("background", 0, general[0].color)] + [(s.name, s.index, s.color) for s in specific], "specific")
    _check_shadowing([(s.name, s.predicates) for s in specific], "specific")

    general_rules = []
    for i, rule in enumerate(cfg.get("general_rules", [])):
        if rule.get("class") not in by_name:
            raise ConfigError(f"general rule {i}: unknown class {rule.get('class')!r}")
        general_rules.append((_parse_predicates(rule.get("match"), f"general rule {i}"), by_name[rule["class"]]))

    area_rules = []
    for i, rule in enumerate(cfg.get("area_rules", [])):
        if not isinstance(rule.get("area"), bool):
            raise ConfigError(f"area rule {i}: 'area' must be true or false")
        area_rules.append((_parse_predicates(rule.get("match"), f"area rule {i}"), rule["area"]))

    widths = cfg.get("line_widths", {})
    by_class = dict(widths.get("by_class", {}))
    known = set(by_name) | {s.name for s in specific}
    unknown = set(by_class) - known
    if unknown:
        raise ConfigError(f"line widths name unknown classes: {sorted(unknown)}")
    if any(w <= 0 for w in by_class.values()):
        raise ConfigError("line widths must be positive")

    return ClassificationRules(
        version=str(cfg.get("version", "unversioned")),
        general_classes=general,
        specific_classes=tuple(specific),
        general_rules=tuple(general_rules),
        area_rules=tuple(area_rules),
        line_widths=by_class,
        default_line_width=float(widths.get("default", 3.0)),
        reference_zoom=int(widths.get("reference_zoom", 18)),
        point_diameter=float(cfg.get("point_diameter", 5.0)),
    )


def _check_shadowing(entries, what):
    # A predicate fully covered by an earlier one can never fire.
    seen = []
    for name, predicates in entries:
        for p in predicates:
            for earlier_name, q in seen:
                if q.covers(p):
                    raise ConfigError(
                        f"{what} class {name!r} has a predicate that can never match: "
                        f"it is shadowed by an earlier predicate of {earlier_name!r}"
                    )
        seen.extend((name, p) for p in predicates)


def load_rules(path=None) -> ClassificationRules:
    """Load a taxonomy config; ``None`` loads the shipped default."""
    if path is None:
        text = resources.files("osmforge").joinpath("data/taxonomy.json").read_text("utf-8")
    else:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"taxonomy config is not valid JSON: {exc}") from None
    return rules_from_dict(cfg)


_DEFAULT: Optional[ClassificationRules] = None


def default_rules() -> ClassificationRules:
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = load_rules()
    return _DEFAULT


def classify_specific(tags: Mapping[str, str], rules: Optional[ClassificationRules] = None) -> Optional[SpecificClass]:
    rules = rules or default_rules()
    if not tags:
        return None
    for cls in rules.specific_classes:
        if cls.matches(tags):
            return cls
    return None


def classify_general(tags: Mapping[str, str], rules: Optional[ClassificationRules] = None) -> Optional[GeneralClass]:
    """General class for ``tags``, or ``None`` when the element is not drawn.

    A matching POI subtype takes precedence and contributes its parent class,
    which keeps the general and specific masks consistent.
    """
    rules = rules or default_rules()
    if not tags:
        return None
    spec = classify_specific(tags, rules)
    if spec is not None:
        return spec.parent
    return rules.general_rule_class(tags)


def is_area(tags: Mapping[str, str], rules: Optional[ClassificationRules] = None) -> bool:
    """Whether a closed way with ``tags`` denotes a surface rather than a loop."""
    rules = rules or default_rules()
    for predicates, area in rules.area_rules:
        if _match_any(predicates, tags):
            return area
    return False


def summarize_categories(doc, rules: Optional[ClassificationRules] = None, tile=None, top_k: int = 5,
                         masks=None) -> list[str]:
    """Names of the POI subtypes in ``doc`` ordered by descending area.

    Area is the rasterised pixel count when ``masks`` or ``tile`` is given
    (subtypes with no pixels in the tile are dropped); otherwise the projected
    geometric area of each element, with lines and points counting zero.
    Ties are broken alphabetically.
    """
    from . import raster  # raster imports this module

    rules = rules or default_rules()
    if masks is None and tile is not None:
        masks = raster.render_masks(doc, tile, rules)
    if masks is not None:
        counts = raster.class_pixel_counts(masks.specific)
        area = {c.name: float(counts.get(c.index, 0)) for c in rules.specific_classes}
        present = [name for name, a in area.items() if a > 0]
    else:
        area = raster.specific_class_areas(doc, rules)
        present = list(area)
    present.sort(key=lambda name: (-area[name], name))
    return present[:top_k]

