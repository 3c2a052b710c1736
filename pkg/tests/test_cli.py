import json

import pytest

from osmforge.bundle import read_bundle
from osmforge.cli import main
from osmforge.raster import read_mask_png, render_masks
from osmforge.tiling import TileRef

SLUG = "18_74975_100281"


@pytest.fixture
def common(tmp_path, data_dir):
    return ["--out", str(tmp_path / "out"), "--fixtures", str(data_dir / "fixtures")]


def _manifest(tmp_path, command):
    return json.loads((tmp_path / "out" / f"manifest.{command}.json").read_text())


@pytest.fixture
def fetched(tmp_path, data_dir, common):
    assert main(["fetch", "--points", str(data_dir / "points.csv"), *common]) == 0
    return common


def test_fetch_three_points(tmp_path, fetched):
    m = _manifest(tmp_path, "fetch")
    assert len(m["outputs"]) == 3 and m["errors"] == [] and m["exit_code"] == 0
    assert (tmp_path / "out" / "cache" / "overpass-de" / "18" / "74975" / "100281.json").exists()


def test_fetch_empty_points(tmp_path, common):
    pts = tmp_path / "empty.csv"
    pts.write_text("lon,lat,zoom,date,country\n")
    assert main(["fetch", "--points", str(pts), *common]) == 0
    assert _manifest(tmp_path, "fetch")["outputs"] == {}


def test_fetch_skips_bad_row(tmp_path, data_dir, common):
    pts = tmp_path / "pts.csv"
    lines = (data_dir / "points.csv").read_text().splitlines()
    pts.write_text("\n".join([lines[0], lines[1], "-77.0,95.0,18,2024-05-01,United States"]) + "\n")
    assert main(["fetch", "--points", str(pts), *common]) == 1
    m = _manifest(tmp_path, "fetch")
    assert len(m["outputs"]) == 1
    assert any(f"{pts}:3:" in e for e in m["errors"])


def test_fetch_missing_fixture(tmp_path, common):
    pts = tmp_path / "pts.csv"
    pts.write_text("lon,lat,zoom,date,country\n10.0,10.0,18,2024-05-01,Chad\n")
    assert main(["fetch", "--points", str(pts), *common]) == 1


def test_render(tmp_path, fetched, main_doc, main_tile):
    assert main(["render", "--all", *fetched]) == 0
    out = tmp_path / "out" / "masks" / SLUG
    assert read_mask_png(out / "general.png").data.tolist() == render_masks(main_doc, main_tile).general.data.tolist()
    assert len(_manifest(tmp_path, "render")["outputs"]) >= 6


def test_render_uncached_tile_fails(tmp_path, common):
    assert main(["render", "--tile", "18/1/1", *common]) == 1
    assert _manifest(tmp_path, "render")["errors"]


def test_encode_points(tmp_path, data_dir, fetched):
    assert main(["encode", "--points", str(data_dir / "points.csv"), *fetched]) == 0
    b = read_bundle(tmp_path / "out" / "bundles" / f"{SLUG}_20240501")
    assert b.tile == TileRef(18, 74975, 100281) and b.country == "United States"
    assert b.summary[0] == "grass"


def test_encode_tile(tmp_path, fetched):
    assert main(["encode", "--tile", "18/74975/100281", "--date", "2024-05-01", "--country", "US",
                 *fetched]) == 0


def test_usage_errors(tmp_path, common, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["render", *common])
    assert exc.value.code == 2
    assert main(["render", "--tile", "18/74975", *common]) == 2
    assert main(["render", "--tile", "18/a/b", *common]) == 2
    assert main(["encode", "--tile", "18/1/1", "--date", "2023-02-30", "--country", "X", *common]) == 2
    assert main(["render", "--all", "--jobs", "0", *common]) == 2
    cfg = tmp_path / "bad.json"
    cfg.write_text('{"ingest": {"nope": 1}}')
    assert main(["render", "--all", "--config", str(cfg), *common]) == 2


def test_pair(tmp_path, data_dir, fetched):
    assert main(["pair", "--tile", "18/74975/100281", "--edit", str(data_dir / "edits" / "add_stadium.json"),
                 "--date", "2024-05-01", "--country", "United States", *fetched]) == 0
    d = tmp_path / "out" / "pairs" / f"{SLUG}_add_stadium"
    loc = json.loads((d / "locality.json").read_text())
    assert loc["local"] and loc["outside_pixels"] == 0 and loc["changed_pixels"] > 0
    before, after = read_bundle(d / "before"), read_bundle(d / "after")
    assert before.masks != after.masks
    assert (d / "change.png").exists() and (d / "change.raw").exists()


def test_empty_edit_gives_zero_change(tmp_path, fetched):
    script = tmp_path / "noop.json"
    script.write_text("[]")
    assert main(["pair", "--tile", "18/74975/100281", "--edit", str(script),
                 "--date", "2024-05-01", "--country", "US", *fetched]) == 0
    loc = json.loads((tmp_path / "out" / "pairs" / f"{SLUG}_noop" / "locality.json").read_text())
    assert loc["changed_pixels"] == 0


def test_failing_edit(tmp_path, fetched):
    script = tmp_path / "bad.json"
    script.write_text('[{"op": "remove", "type": "way", "id": 1}]')
    assert main(["pair", "--tile", "18/74975/100281", "--edit", str(script),
                 "--date", "2024-05-01", "--country", "US", *fetched]) == 1
    assert _manifest(tmp_path, "pair")["errors"]


def test_invert_demo(tmp_path):
    out = tmp_path / "out"
    args = ["invert-demo", "--out", str(out), "--samples", "8", "--dim", "3"]
    assert main([*args, *[f"--t-star={t}" for t in (0, 100, 300, 600, 1000)], "--plot"]) == 0
    m = json.loads((out / "invert-demo" / "metrics.json").read_text())
    errs = [r["reconstruction_error"] for r in m["sweep"]]
    assert errs[0] == 0.0 and m["monotone_non_decreasing"]
    assert all(a <= b + 1e-12 for a, b in zip(errs, errs[1:]))
    shifts = [r["edit_shift"] for r in m["sweep"]]
    assert shifts[0] == 0.0 and shifts[-1] > shifts[1]
    assert (out / "invert-demo" / "error_vs_tstar.png").read_bytes()[:4] == b"\x89PNG"


def test_invert_demo_constant_mode(tmp_path):
    out = tmp_path / "out"
    assert main(["invert-demo", "--out", str(out), "--mode", "constant", "--samples", "4",
                 "--t-star", "1000"]) == 0
    m = json.loads((out / "invert-demo" / "metrics.json").read_text())
    assert m["max_reconstruction_error"] < 1e-10
