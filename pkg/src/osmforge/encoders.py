"""Non-mask conditions: time and location embeddings and prompt text.

The pretrained SatCLIP / Date2Vec / CLIP weights are not available here, so
both embedding encoders take their parameters from an :class:`EncoderWeights`
object. ``default_weights()`` builds a deterministic seeded set;
``load_weights`` reads the binary format below.

Array file format (used for weights and stored embeddings)::

    bytes 0..7   magic  b"OSMFARR1"
    bytes 8..11  uint32 little-endian header length N
    next N bytes UTF-8 JSON header:
                 {"arrays": [{"name", "shape", "offset", "count"}, ...],
                  "dtype": "<f4", "sha256": <hex digest of payload>, "meta": {...}}
    payload      concatenated little-endian float32 arrays
"""

from __future__ import annotations

import hashlib
import json
import math
import re
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .errors import DateError, RangeError, ShapeError, WeightsError
from .tiling import GeoPoint
from .timestamps import TimeStamp6D

MAGIC = b"OSMFARR1"
TIME_CHANNELS = ("hour", "minute", "second", "year", "month", "day")
# channel scales; year is centred on 2000 and measured in centuries
_TIME_SCALE = np.array([24.0, 60.0, 60.0, 100.0, 12.0, 31.0])
_TIME_OFFSET = np.array([0.0, 0.0, 0.0, 2000.0, 0.0, 0.0])
NONLINEARITIES = {
    "identity": lambda x: x,
    "relu": lambda x: np.maximum(x, 0.0),
    "tanh": np.tanh,
    "sin": np.sin,
}

PROMPT_HEAD = "Generate a high-resolution satellite image in {country}"
PROMPT_TAIL = ", using semantic masks highlighting {pois}"
PROMPT_PATTERN = re.compile(
    r"^Generate a high-resolution satellite image in (?P<country>[^\n]+?)"
    r"(?:, using semantic masks highlighting (?P<pois>[^,\n]+(?:, [^,\n]+)*))?\.$"
)


# -- array files ---------------------------------------------------------------

def write_arrays(path, arrays: dict[str, np.ndarray], meta: Optional[dict] = None) -> Path:
    path = Path(path)
    path.write_bytes(arrays_to_bytes(arrays, meta))
    return path


def arrays_to_bytes(arrays: dict[str, np.ndarray], meta: Optional[dict] = None) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f4")
        raw = a.tobytes()
        entries.append({"name": name, "shape": list(a.shape), "offset": offset, "count": int(a.size)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {"arrays": entries, "dtype": "<f4", "sha256": hashlib.sha256(payload).hexdigest(),
              "meta": meta or {}}
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<I", len(head)) + head + payload


def arrays_from_bytes(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if blob[:8] != MAGIC:
        raise WeightsError("not an osmforge array file (bad magic)")
    (n,) = struct.unpack("<I", blob[8:12])
    try:
        header = json.loads(blob[12:12 + n])
    except json.JSONDecodeError as exc:
        raise WeightsError(f"corrupt array header: {exc}") from None
    payload = blob[12 + n:]
    if hashlib.sha256(payload).hexdigest() != header.get("sha256"):
        raise WeightsError("array payload checksum mismatch")
    arrays = {}
    for e in header["arrays"]:
        a = np.frombuffer(payload, dtype="<f4", count=e["count"], offset=e["offset"])
        arrays[e["name"]] = a.reshape(e["shape"]).copy()
    return arrays, header.get("meta", {})


def read_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    return arrays_from_bytes(Path(path).read_bytes())


# -- weights -------------------------------------------------------------------

@dataclass(eq=False)
class EncoderWeights:
    """Parameters for the time and location encoders.

    Time: unit ``i`` computes ``a_i = omega[i] @ tau + phi[i]`` over the six
    normalised timestamp channels; the first ``time_linear_units`` units emit
    ``a_i`` as is and the rest emit ``sin(a_i)``.

    Location: ``loc_scales`` holds the frequency ladder of the sinusoidal
    basis; ``w1, b1, w2, b2`` are the two affine layers with
    ``nonlinearity`` applied between them.
    """

    time_omega: np.ndarray
    time_phi: np.ndarray
    loc_scales: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    time_linear_units: int = 1
    nonlinearity: str = "relu"

    def __post_init__(self):
        for name in ("time_omega", "time_phi", "loc_scales", "w1", "b1", "w2", "b2"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float32))
        d_time = self.time_omega.shape[0]
        if self.time_omega.shape != (d_time, len(TIME_CHANNELS)) or self.time_phi.shape != (d_time,):
            raise ShapeError("time weights must be omega (D, 6) and phi (D,)")
        if not 0 <= self.time_linear_units <= d_time:
            raise ShapeError("time_linear_units out of range")
        basis = 4 * self.loc_scales.shape[0]
        hidden = self.w1.shape[0]
        if self.w1.shape != (hidden, basis) or self.b1.shape != (hidden,):
            raise ShapeError(f"first location layer must be ({hidden}, {basis}) with bias ({hidden},)")
        if self.w2.ndim != 2 or self.w2.shape[1] != hidden or self.b2.shape != (self.w2.shape[0],):
            raise ShapeError("second location layer does not match the hidden width")
        if self.nonlinearity not in NONLINEARITIES:
            raise WeightsError(f"unknown nonlinearity {self.nonlinearity!r}")

    @property
    def time_dim(self) -> int:
        return self.time_omega.shape[0]

    @property
    def loc_dim(self) -> int:
        return self.w2.shape[0]

    @property
    def basis_size(self) -> int:
        return self.loc_scales.shape[0]

    def to_bytes(self) -> bytes:
        arrays = {name: getattr(self, name) for name in
                  ("time_omega", "time_phi", "loc_scales", "w1", "b1", "w2", "b2")}
        meta = {"kind": "encoder-weights", "time_linear_units": self.time_linear_units,
                "nonlinearity": self.nonlinearity}
        return arrays_to_bytes(arrays, meta)

    def sha256(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def save(self, path) -> Path:
        path = Path(path)
        path.write_bytes(self.to_bytes())
        return path


def load_weights(path) -> EncoderWeights:
    arrays, meta = read_arrays(path)
    if meta.get("kind") != "encoder-weights":
        raise WeightsError(f"{path}: not an encoder weight file")
    try:
        return EncoderWeights(**arrays, time_linear_units=int(meta["time_linear_units"]),
                              nonlinearity=meta["nonlinearity"])
    except (KeyError, TypeError) as exc:
        raise WeightsError(f"{path}: incomplete weight file ({exc})") from None


def default_weights(seed: int = 0, time_dim: int = 256, loc_dim: int = 256, basis_size: int = 16,
                    hidden: int = 256, nonlinearity: str = "relu") -> EncoderWeights:
    """Deterministic stand-in weights (not pretrained)."""
    rng = np.random.default_rng(seed)
    omega = rng.normal(0.0, 2.0 * np.pi, size=(time_dim, len(TIME_CHANNELS)))
    phi = rng.uniform(-np.pi, np.pi, size=time_dim)
    scales = 2.0 ** np.arange(basis_size)
    basis = 4 * basis_size
    w1 = rng.normal(0.0, 1.0 / np.sqrt(basis), size=(hidden, basis))
    w2 = rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(loc_dim, hidden))
    return EncoderWeights(omega, phi, scales, w1, np.zeros(hidden), w2, np.zeros(loc_dim),
                          time_linear_units=1, nonlinearity=nonlinearity)


def identity_location_weights(basis_size: int = 16, time_dim: int = 8) -> EncoderWeights:
    """Weights whose location encoder returns its sinusoidal basis unchanged."""
    n = 4 * basis_size
    eye = np.eye(n)
    return EncoderWeights(np.zeros((time_dim, 6)), np.zeros(time_dim), 2.0 ** np.arange(basis_size),
                          eye, np.zeros(n), eye, np.zeros(n), nonlinearity="identity")


# -- embeddings ------------------------------------------------------------------

@dataclass(eq=False)
class Embedding:
    kind: str
    values: np.ndarray

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float32).reshape(-1)
        if not np.all(np.isfinite(self.values)):
            raise ValueError(f"{self.kind} embedding has non-finite values")

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    def __eq__(self, other):
        if not isinstance(other, Embedding):
            return NotImplemented
        return self.kind == other.kind and self.values.tobytes() == other.values.tobytes()

    def to_bytes(self) -> bytes:
        return arrays_to_bytes({"values": self.values}, {"kind": "embedding", "embedding": self.kind})

    @classmethod
    def from_bytes(cls, blob: bytes) -> Embedding:
        arrays, meta = arrays_from_bytes(blob)
        if meta.get("kind") != "embedding":
            raise WeightsError("not an embedding file")
        return cls(meta["embedding"], arrays["values"])


def normalize_timestamp(ts: TimeStamp6D) -> np.ndarray:
    """Six channels ``(hour, minute, second, year, month, day)`` scaled to O(1)."""
    ts = TimeStamp6D(*ts).validate()
    raw = np.array([ts.hour, ts.minute, ts.second, ts.year, ts.month, ts.day], dtype=np.float64)
    return (raw - _TIME_OFFSET) / _TIME_SCALE


def time2vec(tau: np.ndarray, w: EncoderWeights) -> np.ndarray:
    """Encoder core on an already-normalised channel vector."""
    a = w.time_omega.astype(np.float64) @ np.asarray(tau, dtype=np.float64) + w.time_phi.astype(np.float64)
    out = np.sin(a)
    k = w.time_linear_units
    out[:k] = a[:k]
    return out


def encode_time(ts: TimeStamp6D, w: EncoderWeights) -> Embedding:
    try:
        tau = normalize_timestamp(ts)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, DateError):
            raise
        raise DateError(str(exc)) from None
    return Embedding("time", time2vec(tau, w))


def _wrap_lon(lon: float) -> float:
    return lon - 360.0 * math.floor((lon + 180.0) / 360.0)


def location_basis(lon: float, lat: float, scales: np.ndarray) -> np.ndarray:
    """Interleaved ``sin, cos`` of ``scale * lon`` then of ``scale * lat`` (radians)."""
    lam = math.radians(_wrap_lon(lon))
    phi = math.radians(lat)
    s = np.asarray(scales, dtype=np.float64)
    out = np.empty(4 * len(s))
    out[0:2 * len(s):2] = np.sin(s * lam)
    out[1:2 * len(s):2] = np.cos(s * lam)
    out[2 * len(s)::2] = np.sin(s * phi)
    out[2 * len(s) + 1::2] = np.cos(s * phi)
    return out


def encode_location(p: Union[GeoPoint, tuple[float, float]], w: EncoderWeights) -> Embedding:
    """Location embedding of ``(lon, lat)``.

    Longitude is wrapped to ``[-180, 180)`` first, so ``lon`` and
    ``lon + 360`` give the same embedding.
    """
    lon, lat = float(p[0]), float(p[1])
    if not (math.isfinite(lon) and math.isfinite(lat)):
        raise RangeError("non-finite coordinate")
    if abs(lat) > 90.0:
        raise RangeError(f"latitude {lat} outside [-90, 90]")
    b = location_basis(lon, lat, w.loc_scales)
    act = NONLINEARITIES[w.nonlinearity]
    h = act(w.w1.astype(np.float64) @ b + w.b1)
    return Embedding("location", w.w2.astype(np.float64) @ h + w.b2)


def pseudo_text_embedding(prompt: str, dim: int = 512) -> Embedding:
    """Hash-seeded unit vector standing in for a frozen text encoder."""
    seed = int.from_bytes(hashlib.sha256(prompt.encode("utf-8")).digest()[:8], "little")
    v = np.random.default_rng(seed).normal(size=dim)
    return Embedding("text", v / np.linalg.norm(v))


def build_prompt(summary, country: str) -> str:
    """Instantiate the prompt template.

    >>> build_prompt(["lake"], "Canada")
    'Generate a high-resolution satellite image in Canada, using semantic masks highlighting lake.'
    """
    country = country.strip()
    if not country:
        raise ValueError("country must be non-empty")
    text = PROMPT_HEAD.format(country=country)
    names = [s.strip() for s in summary]
    if names:
        text += PROMPT_TAIL.format(pois=", ".join(names))
    return text + "."
