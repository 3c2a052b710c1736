"""From a point on the map to a pair of class masks.

Walks one tile of the bundled synthetic fixture through the pipeline:
locate the tile, parse the Overpass JSON, classify what is in it and paint
the general and specific masks. Writes PNGs to ``demo-out/01``.

    python demos/01_tile_to_masks.py
"""

from pathlib import Path

from osmforge.osm import load_osm_json
from osmforge.raster import class_pixel_counts, render_masks, write_mask_png
from osmforge.taxonomy import classify_general, classify_specific, default_rules, summarize_categories
from osmforge.tiling import GeoPoint, meters_per_pixel, tile_bounds, tile_index

ROOT = Path(__file__).resolve().parent.parent
FIXTURES = ROOT / "tests" / "data" / "fixtures" / "osm"
OUT = ROOT / "demo-out" / "01"


def main():
    # A point near the White House falls into one zoom-18 tile.
    here = GeoPoint(-77.0365, 38.8977)
    tile = tile_index(here, 18)
    b = tile_bounds(tile)
    print(f"tile {tile}: west {b.west:.6f} east {b.east:.6f} south {b.south:.6f} north {b.north:.6f}")
    print(f"ground resolution at this latitude: {meters_per_pixel(here.lat, 18):.3f} m/pixel")

    # The fixture stands in for what Overpass would return for that tile.
    doc = load_osm_json(FIXTURES / str(tile.z) / str(tile.x) / f"{tile.y}.json")
    print(f"\nparsed {doc.counts()} elements")

    rules = default_rules()
    print("\nclassified features:")
    for key, el in doc.elements.items():
        g = classify_general(el.tags, rules)
        if g is None:
            continue
        s = classify_specific(el.tags, rules)
        print(f"  {key[0]:8s} {key[1]:6d}  {g.name:14s} {s.name if s else '-'}")

    masks = render_masks(doc, tile, rules)
    names = {c.index: c.name for c in rules.general_classes}
    print("\ngeneral mask pixel counts:")
    for idx, n in sorted(class_pixel_counts(masks.general).items()):
        print(f"  {names.get(idx, 'background'):14s} {n:6d}")
    print("\nprompt summary:", ", ".join(summarize_categories(doc, rules, masks=masks)))

    OUT.mkdir(parents=True, exist_ok=True)
    write_mask_png(masks.general, OUT / "general.png", rules)
    write_mask_png(masks.specific, OUT / "specific.png", rules)
    print(f"\nwrote {OUT / 'general.png'} and {OUT / 'specific.png'}")


if __name__ == "__main__":
    main()
