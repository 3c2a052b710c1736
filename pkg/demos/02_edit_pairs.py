"""Counterfactual map edits and where they land in the masks.

Applies each bundled edit script to the fixture tile, renders before and
after, and checks that every changed pixel lies inside the edited
elements' footprints (dilated by the widest road stroke). Change masks go
to ``demo-out/02``.

    python demos/02_edit_pairs.py
"""

from pathlib import Path

from osmforge.edits import EditScript, apply_edit, diff_documents
from osmforge.osm import load_osm_json
from osmforge.raster import change_mask_png_bytes, edit_region, locality_report, mask_diff, render_masks
from osmforge.taxonomy import default_rules, summarize_categories
from osmforge.tiling import TileRef

ROOT = Path(__file__).resolve().parent.parent
DATA = ROOT / "tests" / "data"
OUT = ROOT / "demo-out" / "02"
TILE = TileRef(18, 74975, 100281)


def main():
    rules = default_rules()
    before = load_osm_json(DATA / "fixtures" / "osm" / "18" / "74975" / "100281.json")
    masks_before = render_masks(before, TILE, rules)
    print("before:", ", ".join(summarize_categories(before, rules, masks=masks_before)))
    OUT.mkdir(parents=True, exist_ok=True)

    for path in sorted((DATA / "edits").glob("*.json")):
        script = EditScript.loads(path.read_text())
        after = apply_edit(before, script)
        cs = diff_documents(before, after)
        masks_after = render_masks(after, TILE, rules)
        change = mask_diff(masks_before, masks_after)
        report = locality_report(change, edit_region(before, after, TILE, rules))
        (OUT / f"{path.stem}.png").write_bytes(change_mask_png_bytes(change))
        print(f"\n{path.stem}: {len(cs.added)} added, {len(cs.removed)} removed, {len(cs.retagged)} retagged")
        print(f"  {report['changed_pixels']} pixels changed, bbox {report['changed_bbox']}, "
              f"{report['outside_pixels']} outside the edit region")
        print("  after:", ", ".join(summarize_categories(after, rules, masks=masks_after)))

        # the diff is itself a script that reproduces the edit
        assert apply_edit(before, cs.to_script()) == after

    print(f"\nchange masks written to {OUT}")


if __name__ == "__main__":
    main()
