"""``forge`` command line: fetch, render, encode, pair and invert-demo.

Config file (JSON, all keys optional)::

    {
      "ingest": {"overpass": {"id": "...", "url": "..."},
                 "imagery": {"id": "...", "url": "https://.../{z}/{x}/{y}.png"},
                 "requests_per_second": 1.0,
                 "retry": {"max_attempts": 4, "backoff_base": 1.0},
                 "cache_root": "cache", "offline": false, "fixtures_dir": null,
                 "jobs": 4},
      "taxonomy": null,          # path to a taxonomy JSON, null = shipped one
      "weights": null,           # encoder weight file, null = seeded stand-ins
      "weights_seed": 0,
      "top_k": 5,
      "text_embedding": "none"   # or "pseudo"
    }

Flags override the file. Every run writes ``manifest.<command>.json`` to the
``--out`` root with input and output hashes. Exit codes: 0 success,
1 partial or total failure of the work items, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .bundle import assemble_bundle, bundle_files, load_text_embedding
from .diffusion import (
    DDIM,
    Condition,
    ConstantDenoiser,
    GaussianDenoiser,
    ddim_invert,
    make_schedule,
    make_timesteps,
    redenoise,
    relative_error,
)
from .edits import EditScript, apply_edit
from .encoders import default_weights, load_weights, pseudo_text_embedding
from .errors import ConfigError, EditError, FixtureMissError, ForgeError
from .ingest import OSM, Cache, Fetcher, FetchRequest, IngestConfig, resolve_cache_root
from .osm import parse_osm_json
from .raster import (
    change_mask_png_bytes,
    edit_region,
    locality_report,
    mask_diff,
    mask_to_png_bytes,
    render_masks,
)
from .taxonomy import load_rules
from .tiling import MAX_ZOOM, GeoPoint, TileRef, check_lonlat, tile_index
from .timestamps import TimeStamp6D

log = logging.getLogger("osmforge")

EXIT_OK, EXIT_PARTIAL, EXIT_USAGE = 0, 1, 2


# -- config and manifest ------------------------------------------------------------

@dataclass(frozen=True)
class ForgeConfig:
    ingest: IngestConfig = field(default_factory=IngestConfig)
    taxonomy: Optional[str] = None
    weights: Optional[str] = None
    weights_seed: int = 0
    top_k: int = 5
    text_embedding: str = "none"

    def __post_init__(self):
        if self.text_embedding not in ("none", "pseudo"):
            raise ConfigError("text_embedding must be 'none' or 'pseudo'")
        if self.top_k < 1:
            raise ConfigError("top_k must be at least 1")

    def to_dict(self) -> dict:
        return asdict(self)


def load_config(path: Optional[str], out: Path) -> ForgeConfig:
    raw, base = {}, out
    if path:
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        base = Path(path).resolve().parent
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    raw = dict(raw)
    ingest_raw = dict(raw.pop("ingest", {}))
    ingest_raw.setdefault("cache_root", "cache")
    unknown = set(raw) - set(ForgeConfig.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for key in ("taxonomy", "weights"):
        if raw.get(key) and not Path(raw[key]).is_absolute():
            raw[key] = str(base / raw[key])
    return ForgeConfig(ingest=IngestConfig.from_dict(ingest_raw, base), **raw)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    errors: list[str] = field(default_factory=list)
    version: str = __version__
    started_at: float = field(default_factory=time.time)
    wall_clock_s: float = 0.0
    exit_code: int = 0

    def add_input(self, path) -> None:
        self.inputs[str(path)] = sha256_file(path)

    def write(self, out: Path) -> Path:
        self.wall_clock_s = round(time.time() - self.started_at, 6)
        path = out / f"manifest.{self.command}.json"
        body = asdict(self)
        body["outputs"] = dict(sorted(self.outputs.items()))
        path.write_text(json.dumps(body, indent=2, sort_keys=True, default=str) + "\n")
        return path


class Outputs:
    """Writes files under the out root and records their hashes."""

    def __init__(self, root: Path, manifest: RunManifest):
        self.root = root
        self.manifest = manifest

    def write(self, rel, data: bytes) -> Path:
        path = self.root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
        self.manifest.outputs[Path(rel).as_posix()] = hashlib.sha256(data).hexdigest()
        return path

    def write_json(self, rel, obj) -> Path:
        return self.write(rel, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


# -- points file -----------------------------------------------------------------------

@dataclass(frozen=True)
class PointRow:
    row: int
    point: GeoPoint
    zoom: int
    date: TimeStamp6D
    country: str

    @property
    def tile(self) -> TileRef:
        return tile_index(self.point, self.zoom)


POINT_COLUMNS = ("lon", "lat", "zoom", "date", "country")


def read_points(path) -> tuple[list[PointRow], list[str]]:
    """Parse a ``lon,lat,zoom,date,country`` CSV; bad rows become error lines."""
    rows, errors = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            return rows, errors
        missing = [c for c in POINT_COLUMNS if c not in reader.fieldnames]
        if missing:
            raise ConfigError(f"{path}: missing columns {missing}")
        for i, rec in enumerate(reader, start=2):  # header is line 1
            try:
                lon, lat, zoom = float(rec["lon"]), float(rec["lat"]), int(rec["zoom"])
                check_lonlat(lon, lat)
                if not 0 <= zoom <= MAX_ZOOM:
                    raise ValueError(f"zoom {zoom} outside [0, {MAX_ZOOM}]")
                country = (rec["country"] or "").strip()
                if not country:
                    raise ValueError("empty country")
                pr = PointRow(i, GeoPoint(lon, lat), zoom, TimeStamp6D.parse(rec["date"]).validate(), country)
                pr.tile  # latitude beyond the Mercator limit fails here
            except (ValueError, TypeError, ForgeError) as exc:
                errors.append(f"{path}:{i}: {exc}")
                continue
            rows.append(pr)
    return rows, errors


# -- shared pipeline pieces ----------------------------------------------------------------

class Context:
    def __init__(self, args, config: ForgeConfig, out: Path, manifest: RunManifest):
        self.args = args
        self.config = config
        self.out = out
        self.manifest = manifest
        self.outputs = Outputs(out, manifest)
        self.rules = load_rules(config.taxonomy)
        self._weights = None

    @property
    def weights(self):
        if self._weights is None:
            self._weights = (load_weights(self.config.weights) if self.config.weights
                             else default_weights(self.config.weights_seed))
        return self._weights

    def cache(self) -> Cache:
        return Cache(resolve_cache_root(self.config.ingest))

    def load_doc(self, tile: TileRef):
        req = FetchRequest(tile, OSM)
        entry = self.cache().get(self.config.ingest.overpass, req)
        if entry is None:
            raise FixtureMissError(f"no cached OSM data for tile {tile}; run 'forge fetch' first")
        return parse_osm_json(entry.body)

    def text_embedding(self, prompt: str):
        if getattr(self.args, "text_embedding", None):
            return load_text_embedding(self.args.text_embedding)
        if self.config.text_embedding == "pseudo":
            return pseudo_text_embedding(prompt)
        return None

    def bundle(self, doc, tile, ts, country):
        b = assemble_bundle(doc, tile, ts, country, self.rules, self.weights, top_k=self.config.top_k)
        b.e_text = self.text_embedding(b.prompt)
        return b

    def write_bundle(self, rel: Path, b) -> None:
        for name, blob in bundle_files(b, self.rules).items():
            self.outputs.write(rel / name, blob)

    def map_jobs(self, fn, items):
        jobs = self.args.jobs or self.config.ingest.jobs
        if jobs <= 1 or len(items) <= 1:
            return [fn(it) for it in items]
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, items))


def _date_slug(ts: TimeStamp6D) -> str:
    return f"{ts.year:04d}{ts.month:02d}{ts.day:02d}"


def _run_items(ctx: Context, fn, items, label) -> int:
    """Run ``fn`` per item, logging failures; returns the number of failures."""
    def guarded(item):
        try:
            fn(item)
            return None
        except (ForgeError, OSError, ValueError) as exc:
            return f"{label(item)}: {type(exc).__name__}: {exc}"

    errors = [e for e in ctx.map_jobs(guarded, items) if e]
    for e in errors:
        log.error(e)
    ctx.manifest.errors.extend(errors)
    return len(errors)


def _status(failures: int) -> int:
    return EXIT_OK if failures == 0 else EXIT_PARTIAL


# -- commands ---------------------------------------------------------------------------------

def cmd_fetch(ctx: Context) -> int:
    ctx.manifest.add_input(ctx.args.points)
    rows, bad = read_points(ctx.args.points)
    for e in bad:
        log.error(e)
    ctx.manifest.errors.extend(bad)
    kinds = [OSM] + (["imagery"] if ctx.args.imagery else [])
    reqs = [FetchRequest(r.tile, k) for r in rows for k in kinds]
    fetcher = Fetcher(ctx.config.ingest, cache=ctx.cache())
    results = fetcher.fetch_many(reqs, ctx.args.jobs)
    ok = 0
    for req, res in zip(reqs, results):
        if isinstance(res, Exception):
            msg = f"{req.kind} {req.target}: {type(res).__name__}: {res}"
            log.error(msg)
            ctx.manifest.errors.append(msg)
            continue
        ok += 1
        ep = ctx.config.ingest.endpoint(req.kind)
        path = fetcher.cache.path_for(ep, req).resolve()
        if path.is_relative_to(ctx.out.resolve()):
            path = path.relative_to(ctx.out.resolve())
        ctx.manifest.outputs[path.as_posix()] = hashlib.sha256(res).hexdigest()
    failed = len(bad) + len(reqs) - ok
    print(f"fetch: {len(rows)} points, {ok} fetched, {failed} failed")
    return _status(failed)


def _tile_arg(text: str) -> TileRef:
    try:
        return TileRef.parse(text)
    except ValueError as exc:
        raise ConfigError(f"bad --tile {text!r}: {exc}") from None


def _date_arg(text: str) -> TimeStamp6D:
    try:
        return TimeStamp6D.parse(text).validate()
    except ValueError as exc:
        raise ConfigError(f"bad --date {text!r}: {exc}") from None


def _targets(ctx: Context) -> list[TileRef]:
    if ctx.args.all:
        root = resolve_cache_root(ctx.config.ingest) / ctx.config.ingest.overpass.id
        tiles = set()
        for p in root.glob("*/*/*.json"):
            try:
                tiles.add(TileRef(int(p.parent.parent.name), int(p.parent.name), int(p.stem)))
            except ValueError:
                continue
        return sorted(tiles)
    return [_tile_arg(t) for t in ctx.args.tile]


def cmd_render(ctx: Context) -> int:
    tiles = _targets(ctx)
    if not tiles:
        raise ConfigError("render needs --tile or --all")

    def one(tile):
        masks = render_masks(ctx.load_doc(tile), tile, ctx.rules)
        rel = Path("masks") / tile.slug
        for name, grid in (("general", masks.general), ("specific", masks.specific)):
            ctx.outputs.write(rel / f"{name}.png", mask_to_png_bytes(grid, ctx.rules))
            ctx.outputs.write(rel / f"{name}.raw", grid.data.tobytes())
            ctx.outputs.write_json(rel / f"{name}.raw.json", {
                "format": "osmforge-mask", "kind": grid.palette, "width": grid.width, "height": grid.height,
                "dtype": "uint8", "order": "row-major", "palette_version": grid.palette_version,
                "tile": {"z": tile.z, "x": tile.x, "y": tile.y}, "sha256": grid.sha256()})

    failures = _run_items(ctx, one, tiles, str)
    print(f"render: {len(tiles) - failures}/{len(tiles)} tiles")
    return _status(failures)


def _encode_jobs(ctx: Context) -> tuple[list[tuple[TileRef, TimeStamp6D, str]], list[str]]:
    if ctx.args.points:
        ctx.manifest.add_input(ctx.args.points)
        rows, bad = read_points(ctx.args.points)
        return [(r.tile, r.date, r.country) for r in rows], bad
    if not (ctx.args.tile and ctx.args.date and ctx.args.country):
        raise ConfigError("encode needs --points, or --tile with --date and --country")
    ts = _date_arg(ctx.args.date)
    return [(_tile_arg(t), ts, ctx.args.country) for t in ctx.args.tile], []


def cmd_encode(ctx: Context) -> int:
    jobs, bad = _encode_jobs(ctx)
    for e in bad:
        log.error(e)
    ctx.manifest.errors.extend(bad)

    def one(job):
        tile, ts, country = job
        b = ctx.bundle(ctx.load_doc(tile), tile, ts, country)
        ctx.write_bundle(Path("bundles") / f"{tile.slug}_{_date_slug(ts)}", b)

    failures = _run_items(ctx, one, jobs, lambda j: f"{j[0]} {j[1].isoformat()}")
    print(f"encode: {len(jobs) - failures}/{len(jobs)} bundles")
    return _status(failures + len(bad))


def cmd_pair(ctx: Context) -> int:
    tile = _tile_arg(ctx.args.tile)
    ts = _date_arg(ctx.args.date)
    ctx.manifest.add_input(ctx.args.edit)
    script = EditScript.loads(Path(ctx.args.edit).read_bytes())
    before_doc = ctx.load_doc(tile)
    after_doc = apply_edit(before_doc, script)
    before = ctx.bundle(before_doc, tile, ts, ctx.args.country)
    after = ctx.bundle(after_doc, tile, ts, ctx.args.country)
    change = mask_diff(before.masks, after.masks)
    region = edit_region(before_doc, after_doc, tile, ctx.rules)
    report = locality_report(change, region)
    report.update({"tile": str(tile), "edit_script": Path(ctx.args.edit).name, "ops": len(script),
                   "general_changed": int((before.masks.general.data != after.masks.general.data).sum()),
                   "specific_changed": int((before.masks.specific.data != after.masks.specific.data).sum()),
                   "margin_px": ctx.rules.max_stroke_width(tile.z)})
    rel = Path("pairs") / f"{tile.slug}_{Path(ctx.args.edit).stem}"
    ctx.write_bundle(rel / "before", before)
    ctx.write_bundle(rel / "after", after)
    ctx.outputs.write(rel / "change.png", change_mask_png_bytes(change))
    ctx.outputs.write(rel / "change.raw", change.data.astype(np.uint8).tobytes())
    ctx.outputs.write_json(rel / "locality.json", report)
    print(f"pair: {report['changed_pixels']} pixels changed, "
          f"{report['outside_pixels']} outside the edit region")
    return EXIT_OK


def invert_demo_metrics(dim: int = 2, t_stars=None, steps: int = 50, seed: int = 0, mode: str = "analytic",
                        samples: int = 64, T: int = 1000, s2: float = 0.25, shift: float = 2.0) -> dict:
    """Round trip and conditional-shift experiments with a closed-form denoiser."""
    if dim < 1 or samples < 1 or steps < 1:
        raise ConfigError("dim, samples and steps must be positive")
    s = make_schedule(T)
    t_stars = sorted({T // 10, T // 4, T // 2, T} if t_stars is None else set(t_stars))
    if any(not 0 <= t <= T for t in t_stars):
        raise ConfigError(f"t-star values must lie in [0, {T}]")
    grid = np.union1d(make_timesteps(s, steps), t_stars)
    rng = np.random.default_rng(seed)
    c_ref, c_new = Condition("ref"), Condition("new")
    mu_ref, mu_new = np.zeros(dim), np.full(dim, shift)
    if mode == "constant":
        d = ConstantDenoiser(0.3)
    elif mode == "analytic":
        d = GaussianDenoiser(s, s2, {c_ref: mu_ref, c_new: mu_new})
    else:
        raise ConfigError(f"unknown mode {mode!r}")
    x_obs = mu_ref + np.sqrt(s2) * rng.standard_normal((samples, dim))

    rows = []
    for t_star in t_stars:
        state, _ = ddim_invert(x_obs, c_ref, t_star, d, s, grid)
        back = redenoise(state, c_ref, d, s, DDIM, grid)
        edited = redenoise(state, c_new, d, s, DDIM, grid)
        rows.append({
            "t_star": int(t_star),
            "reconstruction_error": relative_error(back, x_obs),
            "edit_shift": float(np.mean(edited - x_obs)),
        })
    errs = [r["reconstruction_error"] for r in rows]
    return {
        "mode": mode, "dim": dim, "samples": samples, "steps": int(grid.size - 1), "seed": seed,
        "T": T, "s2": s2, "target_shift": shift if mode == "analytic" else None,
        "sweep": rows,
        "monotone_non_decreasing": bool(all(a <= b for a, b in zip(errs, errs[1:]))),
        "max_reconstruction_error": max(errs),
    }


def plot_metrics(metrics: dict) -> bytes:
    import io

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ts = [r["t_star"] for r in metrics["sweep"]]
    errs = [max(r["reconstruction_error"], 1e-18) for r in metrics["sweep"]]
    fig, ax = plt.subplots(figsize=(5, 3.5), dpi=100)
    ax.semilogy(ts, errs, "o-")
    ax.set_xlabel("t*")
    ax.set_ylabel("relative reconstruction error")
    ax.set_title(f"{metrics['mode']} denoiser, {metrics['steps']} steps")
    fig.tight_layout()
    buf = io.BytesIO()
    fig.savefig(buf, format="png", metadata={"Software": None})
    plt.close(fig)
    return buf.getvalue()


def cmd_invert_demo(ctx: Context) -> int:
    a = ctx.args
    metrics = invert_demo_metrics(a.dim, a.t_star, a.steps, a.seed, a.mode, a.samples)
    ctx.outputs.write_json(Path("invert-demo") / "metrics.json", metrics)
    if a.plot:
        ctx.outputs.write(Path("invert-demo") / "error_vs_tstar.png", plot_metrics(metrics))
    for r in metrics["sweep"]:
        print(f"t*={r['t_star']:5d}  error={r['reconstruction_error']:.3e}  shift={r['edit_shift']:+.4f}")
    return EXIT_OK


# -- argument parsing --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="forge", description="OSM conditioning-data pipeline.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--out", default="forge-out", help="output root (default: forge-out)")
    common.add_argument("--jobs", type=int, default=None, help="parallel work items")
    common.add_argument("--cache", help="cache root (overrides config)")
    common.add_argument("--fixtures", help="offline fixtures directory (implies --offline)")
    common.add_argument("--offline", action="store_true", help="never touch the network")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fetch", parents=[common], help="fetch OSM JSON (and imagery) for points")
    f.add_argument("--points", required=True, help="CSV with lon,lat,zoom,date,country")
    f.add_argument("--imagery", action="store_true", help="also fetch imagery tiles")

    r = sub.add_parser("render", parents=[common], help="render class masks from cached OSM data")
    g = r.add_mutually_exclusive_group(required=True)
    g.add_argument("--tile", action="append", help="z/x/y (repeatable)")
    g.add_argument("--all", action="store_true", help="every tile in the cache")

    e = sub.add_parser("encode", parents=[common], help="assemble conditioning bundles")
    e.add_argument("--points", help="CSV with lon,lat,zoom,date,country")
    e.add_argument("--tile", action="append", help="z/x/y (repeatable)")
    e.add_argument("--date", help="ISO date for --tile")
    e.add_argument("--country", help="country name for --tile")
    e.add_argument("--text-embedding", help="precomputed text embedding (.npy or array file)")

    pr = sub.add_parser("pair", parents=[common], help="before/after bundles for an edit script")
    pr.add_argument("--tile", required=True, help="z/x/y")
    pr.add_argument("--edit", required=True, help="edit script JSON")
    pr.add_argument("--date", required=True)
    pr.add_argument("--country", required=True)
    pr.add_argument("--text-embedding", help="precomputed text embedding (.npy or array file)")

    d = sub.add_parser("invert-demo", parents=[common], help="DDIM inversion experiments on a Gaussian toy")
    d.add_argument("--dim", type=int, default=2)
    d.add_argument("--t-star", type=int, action="append", help="t* to evaluate (repeatable)")
    d.add_argument("--steps", type=int, default=50, help="DDIM grid size")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--samples", type=int, default=64)
    d.add_argument("--mode", choices=("analytic", "constant"), default="analytic")
    d.add_argument("--plot", action="store_true", help="write an error-vs-t* PNG (needs matplotlib)")
    return p


COMMANDS = {
    "fetch": cmd_fetch,
    "render": cmd_render,
    "encode": cmd_encode,
    "pair": cmd_pair,
    "invert-demo": cmd_invert_demo,
}


def _resolve(args, out: Path) -> ForgeConfig:
    cfg = load_config(args.config, out)
    ingest = cfg.ingest
    if args.cache:
        ingest = replace(ingest, cache_root=args.cache)
    elif not args.config:
        ingest = replace(ingest, cache_root=str(out / "cache"))
    if args.fixtures:
        ingest = replace(ingest, fixtures_dir=args.fixtures, offline=True)
    elif args.offline:
        ingest = replace(ingest, offline=True)
    if args.jobs is not None:
        if args.jobs < 1:
            raise ConfigError("--jobs must be at least 1")
        ingest = replace(ingest, jobs=args.jobs)
    return replace(cfg, ingest=ingest)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        config = _resolve(args, out)
    except (ConfigError, OSError) as exc:
        print(f"forge: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    manifest = RunManifest(args.command, config.to_dict())
    try:
        ctx = Context(args, config, out, manifest)
        if args.config:
            manifest.add_input(args.config)
        code = COMMANDS[args.command](ctx)
    except ConfigError as exc:
        print(f"forge: configuration error: {exc}", file=sys.stderr)
        manifest.errors.append(str(exc))
        code = EXIT_USAGE
    except EditError as exc:
        print(f"forge: edit script failed at op {exc.op_index}: {exc}", file=sys.stderr)
        manifest.errors.append(str(exc))
        code = EXIT_PARTIAL
    except (ForgeError, OSError) as exc:
        print(f"forge: {type(exc).__name__}: {exc}", file=sys.stderr)
        manifest.errors.append(f"{type(exc).__name__}: {exc}")
        code = EXIT_PARTIAL
    manifest.exit_code = code
    manifest.write(out)
    return code


if __name__ == "__main__":
    sys.exit(main())
