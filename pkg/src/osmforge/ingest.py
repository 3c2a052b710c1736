"""Overpass and imagery fetching with an on-disk cache.

Every HTTP call goes through a ``Transport``: a callable taking
``(method, url, body, headers)`` and returning ``(status, body_bytes)``.
Tests inject scripted transports; the default one wraps ``urllib``.

Cache layout under the cache root::

    <endpoint-id>/<z>/<x>/<y>.<ext>            tile targets
    <endpoint-id>/bbox/<digest>.<ext>          bounding-box targets
    ... plus a ``.meta.json`` sidecar next to each body

Offline fixtures mirror the layout with the kind in place of the endpoint
id (``osm/18/74975/100281.json``).
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
import threading
import time
import urllib.error
import urllib.parse
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Union

from .errors import ConfigError, FetchError, FixtureMissError, HttpError, RangeError
from .tiling import GeoBounds, TileRef, check_tile, tile_bounds

log = logging.getLogger(__name__)

OSM = "osm"
IMAGERY = "imagery"
CACHE_ENV = "OSMFORGE_CACHE"
RETRYABLE_STATUS = frozenset({429, 500, 502, 503, 504})

Transport = Callable[[str, str, Optional[bytes], dict], tuple[int, bytes]]
Target = Union[TileRef, GeoBounds]


def build_overpass_query(b: GeoBounds, timeout: int = 60) -> str:
    """Overpass QL for everything intersecting ``b``, recursing down to nodes.

    >>> print(build_overpass_query(GeoBounds(-1, -1, 1, 1)).splitlines()[2])
      node(-1.000000000,-1.000000000,1.000000000,1.000000000);
    """
    b = GeoBounds(*b).validate()
    if not (b.east > b.west and b.north > b.south):
        raise RangeError(f"bounds {tuple(b)} have zero area")
    bbox = f"{b.south:.9f},{b.west:.9f},{b.north:.9f},{b.east:.9f}"
    return (
        f"[out:json][timeout:{timeout}];\n"
        "(\n"
        f"  node({bbox});\n"
        f"  way({bbox});\n"
        f"  relation({bbox});\n"
        ");\n"
        "out body;\n"
        ">;\n"
        "out skel qt;\n"
    )


# -- config -------------------------------------------------------------------------

@dataclass(frozen=True)
class EndpointConfig:
    id: str
    url: str  # Overpass interpreter URL, or an imagery template with {z} {x} {y}
    ext: str = "json"


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 4
    backoff_base: float = 1.0
    backoff_factor: float = 2.0
    max_backoff: float = 30.0

    def delay(self, attempt: int) -> float:
        """Sleep before retry number ``attempt`` (1-based)."""
        return min(self.max_backoff, self.backoff_base * self.backoff_factor ** (attempt - 1))


@dataclass(frozen=True)
class IngestConfig:
    overpass: EndpointConfig = EndpointConfig("overpass-de", "https://overpass-api.de/api/interpreter")
    imagery: Optional[EndpointConfig] = None
    requests_per_second: float = 1.0
    retry: RetryPolicy = RetryPolicy()
    cache_root: str = "cache"
    offline: bool = False
    fixtures_dir: Optional[str] = None
    timeout: float = 60.0
    jobs: int = 4

    def __post_init__(self):
        if self.requests_per_second <= 0:
            raise ConfigError("requests_per_second must be positive")
        if self.retry.max_attempts < 1:
            raise ConfigError("retry.max_attempts must be at least 1")
        if self.jobs < 1:
            raise ConfigError("jobs must be at least 1")
        if self.offline and not self.fixtures_dir:
            raise ConfigError("offline mode needs fixtures_dir")
        if self.imagery is not None and not all(k in self.imagery.url for k in ("{z}", "{x}", "{y}")):
            raise ConfigError("imagery url must contain {z}, {x} and {y}")

    @classmethod
    def from_dict(cls, raw: dict, base_dir: Optional[Path] = None) -> IngestConfig:
        """Build from the ``ingest`` section of a config file.

        Relative ``cache_root``/``fixtures_dir`` paths resolve against ``base_dir``.
        """
        raw = dict(raw)
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown ingest keys: {sorted(unknown)}")
        try:
            if "overpass" in raw:
                raw["overpass"] = EndpointConfig(**raw["overpass"])
            if raw.get("imagery") is not None:
                raw["imagery"] = EndpointConfig(**{"ext": "png", **raw["imagery"]})
            if "retry" in raw:
                raw["retry"] = RetryPolicy(**raw["retry"])
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        if base_dir is not None:
            for key in ("cache_root", "fixtures_dir"):
                if raw.get(key) and not Path(raw[key]).is_absolute():
                    raw[key] = str(Path(base_dir) / raw[key])
        return cls(**raw)

    def to_dict(self) -> dict:
        return asdict(self)

    def endpoint(self, kind: str) -> EndpointConfig:
        if kind == OSM:
            return self.overpass
        if kind == IMAGERY:
            if self.imagery is None:
                raise ConfigError("no imagery endpoint configured")
            return self.imagery
        raise ConfigError(f"unknown fetch kind {kind!r}")


def resolve_cache_root(config: IngestConfig) -> Path:
    return Path(os.environ.get(CACHE_ENV) or config.cache_root)


# -- requests and cache -------------------------------------------------------------

@dataclass(frozen=True)
class FetchRequest:
    target: Target
    kind: str = OSM

    def __post_init__(self):
        if self.kind not in (OSM, IMAGERY):
            raise ConfigError(f"unknown fetch kind {self.kind!r}")
        if isinstance(self.target, TileRef):
            check_tile(self.target)
        else:
            b = GeoBounds(*self.target).validate()
            if not (b.east > b.west and b.north > b.south):
                raise RangeError(f"bounds {tuple(b)} have zero area")
            object.__setattr__(self, "target", b)
        if self.kind == IMAGERY and not isinstance(self.target, TileRef):
            raise ConfigError("imagery requests need a tile target")

    def bounds(self) -> GeoBounds:
        return tile_bounds(self.target) if isinstance(self.target, TileRef) else self.target

    def rel_path(self, ext: str) -> Path:
        t = self.target
        if isinstance(t, TileRef):
            return Path(str(t.z)) / str(t.x) / f"{t.y}.{ext}"
        digest = hashlib.sha256(",".join(f"{v:.9f}" for v in t).encode()).hexdigest()[:16]
        return Path("bbox") / f"{digest}.{ext}"


@dataclass(frozen=True)
class CacheEntry:
    endpoint_id: str
    request: FetchRequest
    body: bytes = field(repr=False)
    fetched_at: float
    sha256: str

    def __post_init__(self):
        if hashlib.sha256(self.body).hexdigest() != self.sha256:
            raise FetchError(f"cache entry for {self.request.target} fails its checksum")

    @property
    def key(self) -> tuple:
        return (self.endpoint_id, tuple(self.request.target), self.request.kind)


class Cache:
    """Content-hashed file cache; writes are atomic and serialised per key."""

    def __init__(self, root):
        self.root = Path(root)
        self._locks: dict[Path, threading.Lock] = {}
        self._guard = threading.Lock()

    def path_for(self, endpoint: EndpointConfig, req: FetchRequest) -> Path:
        return self.root / endpoint.id / req.rel_path(endpoint.ext)

    def _lock(self, path: Path) -> threading.Lock:
        with self._guard:
            return self._locks.setdefault(path, threading.Lock())

    def get(self, endpoint: EndpointConfig, req: FetchRequest) -> Optional[CacheEntry]:
        path = self.path_for(endpoint, req)
        meta_path = path.with_name(path.name + ".meta.json")
        if not path.exists() or not meta_path.exists():
            return None
        meta = json.loads(meta_path.read_text())
        return CacheEntry(endpoint.id, req, path.read_bytes(), meta["fetched_at"], meta["sha256"])

    def put(self, endpoint: EndpointConfig, req: FetchRequest, body: bytes, fetched_at: float) -> CacheEntry:
        entry = CacheEntry(endpoint.id, req, body, fetched_at, hashlib.sha256(body).hexdigest())
        path = self.path_for(endpoint, req)
        meta = {"endpoint": endpoint.id, "kind": req.kind, "target": list(req.target),
                "fetched_at": fetched_at, "sha256": entry.sha256, "size": len(body)}
        with self._lock(path):
            path.parent.mkdir(parents=True, exist_ok=True)
            _atomic_write(path, body)
            _atomic_write(path.with_name(path.name + ".meta.json"),
                          (json.dumps(meta, indent=2, sort_keys=True) + "\n").encode())
        return entry

    def invalidate(self, endpoint: EndpointConfig, req: FetchRequest) -> bool:
        path = self.path_for(endpoint, req)
        found = False
        with self._lock(path):
            for p in (path, path.with_name(path.name + ".meta.json")):
                if p.exists():
                    p.unlink()
                    found = True
        return found


def _atomic_write(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- transport and rate limiting -------------------------------------------------------

class UrllibTransport:
    def __init__(self, timeout: float = 60.0, user_agent: str = "osmforge"):
        self.timeout = timeout
        self.user_agent = user_agent

    def __call__(self, method: str, url: str, body: Optional[bytes], headers: dict) -> tuple[int, bytes]:
        req = urllib.request.Request(url, data=body, method=method,
                                     headers={"User-Agent": self.user_agent, **headers})
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                return resp.status, resp.read()
        except urllib.error.HTTPError as exc:
            return exc.code, exc.read() or b""
        except urllib.error.URLError as exc:
            raise OSError(str(exc.reason)) from None


class RateLimiter:
    """Spaces transport calls at least ``1 / rate`` seconds apart across threads."""

    def __init__(self, rate: float, clock: Callable[[], float] = time.monotonic,
                 sleep: Callable[[float], None] = time.sleep):
        if rate <= 0:
            raise ConfigError("rate must be positive")
        self.interval = 1.0 / rate
        self.clock = clock
        self.sleep = sleep
        self._next = None
        self._lock = threading.Lock()

    def acquire(self) -> None:
        with self._lock:
            now = self.clock()
            slot = now if self._next is None else max(now, self._next)
            self._next = slot + self.interval
        if slot > now:
            self.sleep(slot - now)


# -- fetcher -------------------------------------------------------------------------------

class Fetcher:
    """Cache-first fetching with retries, backoff and an optional offline mode."""

    def __init__(self, config: IngestConfig, transport: Optional[Transport] = None,
                 cache: Optional[Cache] = None, limiter: Optional[RateLimiter] = None,
                 sleep: Callable[[float], None] = time.sleep, clock: Callable[[], float] = time.time):
        self.config = config
        self.transport = transport or UrllibTransport(config.timeout)
        self.cache = cache or Cache(resolve_cache_root(config))
        self.limiter = limiter or RateLimiter(config.requests_per_second, sleep=sleep)
        self.sleep = sleep
        self.clock = clock

    def _http_call(self, req: FetchRequest, ep: EndpointConfig) -> tuple[str, str, Optional[bytes], dict]:
        if req.kind == OSM:
            body = urllib.parse.urlencode({"data": build_overpass_query(req.bounds())}).encode()
            return "POST", ep.url, body, {"Content-Type": "application/x-www-form-urlencoded"}
        t = req.target
        return "GET", ep.url.format(z=t.z, x=t.x, y=t.y), None, {}

    def _fixture(self, req: FetchRequest, ep: EndpointConfig) -> bytes:
        path = Path(self.config.fixtures_dir) / req.kind / req.rel_path(ep.ext)
        if not path.exists():
            raise FixtureMissError(f"offline mode: no fixture at {path}")
        return path.read_bytes()

    def _download(self, req: FetchRequest, ep: EndpointConfig) -> bytes:
        method, url, body, headers = self._http_call(req, ep)
        policy = self.config.retry
        last: Optional[BaseException] = None
        for attempt in range(1, policy.max_attempts + 1):
            if attempt > 1:
                self.sleep(policy.delay(attempt - 1))
            self.limiter.acquire()
            try:
                status, payload = self.transport(method, url, body, headers)
            except OSError as exc:
                log.warning("fetch %s attempt %d failed: %s", url, attempt, exc)
                last = exc
                continue
            if 200 <= status < 300:
                return payload
            if status not in RETRYABLE_STATUS:
                raise HttpError(status, url)
            log.warning("fetch %s attempt %d got HTTP %d", url, attempt, status)
            last = HttpError(status, url)
        if isinstance(last, HttpError):
            raise last
        raise FetchError(f"{url}: giving up after {policy.max_attempts} attempts ({last})")

    def fetch_entry(self, req: FetchRequest) -> tuple[CacheEntry, bool]:
        """Return the cache entry and whether it was already cached."""
        ep = self.config.endpoint(req.kind)
        hit = self.cache.get(ep, req)
        if hit is not None:
            return hit, True
        body = self._fixture(req, ep) if self.config.offline else self._download(req, ep)
        return self.cache.put(ep, req, body, self.clock()), False

    def fetch(self, req: FetchRequest) -> bytes:
        return self.fetch_entry(req)[0].body

    def fetch_many(self, reqs, jobs: Optional[int] = None) -> list:
        """Fetch concurrently; each slot holds the body bytes or the raised exception."""
        jobs = jobs or self.config.jobs

        def one(r):
            try:
                return self.fetch(r)
            except Exception as exc:  # reported per request
                return exc

        reqs = list(reqs)
        if jobs == 1 or len(reqs) <= 1:
            return [one(r) for r in reqs]
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(one, reqs))
