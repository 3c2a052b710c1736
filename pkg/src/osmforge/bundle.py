"""Conditioning bundles: masks, embeddings and prompt for one tile.

A bundle is stored as a directory holding ``manifest.json`` plus the files
it references by relative path::

    manifest.json
    general.png / specific.png         8-bit indexed masks
    general.raw / specific.raw (+.json) raw row-major masks with sidecars
    e_loc.f32 / e_time.f32 [/ e_text.f32]  embeddings (array file format)
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .encoders import (
    EncoderWeights,
    Embedding,
    build_prompt,
    default_weights,
    encode_location,
    encode_time,
)
from .errors import SchemaError
from .osm import OsmDocument
from .raster import (
    GENERAL,
    SPECIFIC,
    MaskGrid,
    MaskPair,
    mask_to_png_bytes,
    render_masks,
)
from .taxonomy import ClassificationRules, default_rules, summarize_categories
from .tiling import TileRef, tile_center
from .timestamps import TimeStamp6D

BUNDLE_FORMAT = "osmforge-bundle"
BUNDLE_VERSION = 1


@dataclass(eq=False)
class ConditioningBundle:
    masks: MaskPair
    e_loc: Embedding
    e_time: Embedding
    prompt: str
    tile: TileRef
    timestamp: TimeStamp6D
    country: str
    e_text: Optional[Embedding] = None
    summary: tuple[str, ...] = field(default=())

    def __post_init__(self):
        if tuple(self.masks.tile) != tuple(self.tile):
            raise SchemaError(f"bundle masks belong to tile {self.masks.tile}, not {self.tile}")

    def __eq__(self, other):
        if not isinstance(other, ConditioningBundle):
            return NotImplemented
        return (self.masks == other.masks and self.e_loc == other.e_loc and self.e_time == other.e_time
                and self.prompt == other.prompt and tuple(self.tile) == tuple(other.tile)
                and tuple(self.timestamp) == tuple(other.timestamp) and self.country == other.country
                and self.e_text == other.e_text and tuple(self.summary) == tuple(other.summary))


def assemble_bundle(doc: OsmDocument, tile: TileRef, ts: TimeStamp6D, country: str,
                    rules: Optional[ClassificationRules] = None, weights: Optional[EncoderWeights] = None,
                    e_text: Optional[Embedding] = None, top_k: int = 5) -> ConditioningBundle:
    """Render masks, encode tile centre and timestamp, and build the prompt."""
    rules = rules or default_rules()
    weights = weights if weights is not None else default_weights()
    masks = render_masks(doc, tile, rules)
    summary = summarize_categories(doc, rules, masks=masks, top_k=top_k)
    return ConditioningBundle(
        masks=masks,
        e_loc=encode_location(tile_center(tile), weights),
        e_time=encode_time(ts, weights),
        prompt=build_prompt(summary, country),
        tile=tile,
        timestamp=TimeStamp6D(*ts),
        country=country,
        e_text=e_text,
        summary=tuple(summary),
    )


def _sha(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()


def bundle_files(bundle: ConditioningBundle, rules: Optional[ClassificationRules] = None) -> dict[str, bytes]:
    """Every file of the serialised bundle, keyed by relative path."""
    rules = rules or default_rules()
    files: dict[str, bytes] = {}
    masks_meta = {}
    for name, grid in (("general", bundle.masks.general), ("specific", bundle.masks.specific)):
        raw = grid.data.tobytes()
        sidecar = {
            "format": "osmforge-mask", "kind": grid.palette, "width": grid.width, "height": grid.height,
            "dtype": "uint8", "order": "row-major", "palette_version": grid.palette_version,
            "tile": {"z": bundle.tile.z, "x": bundle.tile.x, "y": bundle.tile.y}, "sha256": _sha(raw),
        }
        files[f"{name}.png"] = mask_to_png_bytes(grid, rules)
        files[f"{name}.raw"] = raw
        files[f"{name}.raw.json"] = (json.dumps(sidecar, indent=2, sort_keys=True) + "\n").encode()
        masks_meta[name] = {"png": f"{name}.png", "raw": f"{name}.raw", "sha256": _sha(raw)}
    masks_meta["palette_version"] = bundle.masks.general.palette_version

    emb_meta: dict[str, Optional[dict]] = {}
    for key, emb in (("location", bundle.e_loc), ("time", bundle.e_time), ("text", bundle.e_text)):
        if emb is None:
            emb_meta[key] = None
            continue
        fname = {"location": "e_loc.f32", "time": "e_time.f32", "text": "e_text.f32"}[key]
        blob = emb.to_bytes()
        files[fname] = blob
        emb_meta[key] = {"path": fname, "dim": emb.dim, "sha256": _sha(blob)}

    manifest = {
        "format": BUNDLE_FORMAT,
        "version": BUNDLE_VERSION,
        "tile": {"z": bundle.tile.z, "x": bundle.tile.x, "y": bundle.tile.y},
        "timestamp": list(bundle.timestamp),
        "country": bundle.country,
        "prompt": bundle.prompt,
        "summary": list(bundle.summary),
        "masks": masks_meta,
        "embeddings": emb_meta,
    }
    files["manifest.json"] = (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode()
    return files


def write_bundle(bundle: ConditioningBundle, directory, rules: Optional[ClassificationRules] = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, blob in bundle_files(bundle, rules).items():
        (directory / name).write_bytes(blob)
    return directory / "manifest.json"


def read_bundle(path) -> ConditioningBundle:
    """Load a bundle from its directory or its ``manifest.json``."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    root = path.parent
    manifest = json.loads(path.read_text())
    if manifest.get("format") != BUNDLE_FORMAT:
        raise SchemaError(f"{path}: not a bundle manifest")
    tile = TileRef(**manifest["tile"])
    grids = {}
    for name, palette in (("general", GENERAL), ("specific", SPECIFIC)):
        meta = manifest["masks"][name]
        raw = (root / meta["raw"]).read_bytes()
        if _sha(raw) != meta["sha256"]:
            raise SchemaError(f"{root / meta['raw']}: checksum mismatch")
        sidecar = json.loads((root / (meta["raw"] + ".json")).read_text())
        data = np.frombuffer(raw, dtype=np.uint8).reshape(sidecar["height"], sidecar["width"]).copy()
        grids[name] = MaskGrid(data, palette, manifest["masks"]["palette_version"])

    def _emb(key):
        meta = manifest["embeddings"].get(key)
        if meta is None:
            return None
        blob = (root / meta["path"]).read_bytes()
        if _sha(blob) != meta["sha256"]:
            raise SchemaError(f"{root / meta['path']}: checksum mismatch")
        return Embedding.from_bytes(blob)

    return ConditioningBundle(
        masks=MaskPair(grids["general"], grids["specific"], tile),
        e_loc=_emb("location"),
        e_time=_emb("time"),
        prompt=manifest["prompt"],
        tile=tile,
        timestamp=TimeStamp6D(*manifest["timestamp"]),
        country=manifest["country"],
        e_text=_emb("text"),
        summary=tuple(manifest["summary"]),
    )


def load_text_embedding(path) -> Embedding:
    """Externally computed text embedding: array file or ``.npy``."""
    path = Path(path)
    if path.suffix == ".npy":
        return Embedding("text", np.load(path))
    return Embedding.from_bytes(path.read_bytes())
