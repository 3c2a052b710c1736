import math

import numpy as np
import pytest

from osmforge.encoders import (
    PROMPT_PATTERN,
    Embedding,
    EncoderWeights,
    arrays_from_bytes,
    arrays_to_bytes,
    build_prompt,
    default_weights,
    encode_location,
    encode_time,
    identity_location_weights,
    load_weights,
    location_basis,
    normalize_timestamp,
    pseudo_text_embedding,
    time2vec,
)
from osmforge.errors import DateError, RangeError, ShapeError, WeightsError
from osmforge.timestamps import TimeStamp6D


def test_array_round_trip():
    arrays = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.array([1.5], np.float32)}
    back, meta = arrays_from_bytes(arrays_to_bytes(arrays, {"k": 1}))
    assert meta == {"k": 1}
    assert all(np.array_equal(back[k], arrays[k]) for k in arrays)


def test_corrupt_arrays_rejected():
    blob = bytearray(arrays_to_bytes({"a": np.ones(4)}))
    blob[-1] ^= 0xFF
    with pytest.raises(WeightsError):
        arrays_from_bytes(bytes(blob))
    with pytest.raises(WeightsError):
        arrays_from_bytes(b"NOTMAGIC" + bytes(blob[8:]))


def test_weights_save_load(tmp_path):
    w = default_weights(seed=3, time_dim=16, loc_dim=8, basis_size=4, hidden=12)
    back = load_weights(w.save(tmp_path / "w.bin"))
    assert back.sha256() == w.sha256()
    blob = bytearray((tmp_path / "w.bin").read_bytes())
    blob[-2] ^= 1
    (tmp_path / "w.bin").write_bytes(bytes(blob))
    with pytest.raises(WeightsError):
        load_weights(tmp_path / "w.bin")


def test_default_weights_are_seeded():
    assert default_weights(1).sha256() == default_weights(1).sha256() != default_weights(2).sha256()


def test_weight_shapes_checked():
    w = default_weights(time_dim=4, loc_dim=4, basis_size=2, hidden=3)
    with pytest.raises(ShapeError):
        EncoderWeights(w.time_omega, w.time_phi, w.loc_scales, w.w1[:, :5], w.b1, w.w2, w.b2)
    with pytest.raises(WeightsError):
        EncoderWeights(w.time_omega, w.time_phi, w.loc_scales, w.w1, w.b1, w.w2, w.b2, nonlinearity="gelu")


def test_time2vec_matches_loop():
    rng = np.random.default_rng(0)
    omega, phi = rng.normal(size=(5, 6)), rng.normal(size=5)
    w = EncoderWeights(omega, phi, [1.0], np.eye(4), np.zeros(4), np.eye(4), np.zeros(4), time_linear_units=2)
    tau = normalize_timestamp(TimeStamp6D(2021, 6, 1, 10, 30, 0))
    expected = []
    for i in range(5):
        a = sum(float(w.time_omega[i, j]) * tau[j] for j in range(6)) + float(w.time_phi[i])
        expected.append(a if i < 2 else math.sin(a))
    assert np.allclose(time2vec(tau, w), expected, atol=1e-12)


def test_normalized_channels():
    tau = normalize_timestamp(TimeStamp6D(2050, 12, 31, 12, 30, 15))
    assert np.allclose(tau, [0.5, 0.5, 0.25, 0.5, 1.0, 1.0])


@pytest.mark.parametrize("ts", [(2023, 2, 29), (2021, 13, 1), (2021, 6, 1, 24)])
def test_invalid_dates(ts):
    with pytest.raises(DateError):
        encode_time(TimeStamp6D(*ts), default_weights(time_dim=8))


def test_leap_day_is_valid():
    e = encode_time(TimeStamp6D(2024, 2, 29), default_weights(time_dim=8))
    assert e.dim == 8 and e.kind == "time"


def test_identity_weights_return_basis():
    w = identity_location_weights(basis_size=4)
    e = encode_location((12.5, -33.0), w)
    assert np.allclose(e.values, location_basis(12.5, -33.0, w.loc_scales), atol=1e-6)


def test_basis_at_origin():
    b = location_basis(0.0, 0.0, np.array([1.0, 2.0]))
    assert np.array_equal(b, [0, 1, 0, 1, 0, 1, 0, 1])


def test_longitude_wraps():
    w = default_weights(loc_dim=16, basis_size=4, hidden=8)
    assert encode_location((10.0, 5.0), w) == encode_location((370.0, 5.0), w)
    assert np.allclose(encode_location((-180.0, 0), w).values, encode_location((180.0, 0), w).values, atol=1e-5)


@pytest.mark.parametrize("p", [(0, 91), (0, -90.5), (float("nan"), 0)])
def test_bad_location(p):
    with pytest.raises(RangeError):
        encode_location(p, default_weights(loc_dim=4, basis_size=2, hidden=4))


def test_pseudo_text_embedding():
    a = pseudo_text_embedding("hello", 64)
    assert a == pseudo_text_embedding("hello", 64) and a != pseudo_text_embedding("hello!", 64)
    assert abs(np.linalg.norm(a.values) - 1) < 1e-6


def test_embedding_bytes_round_trip():
    e = Embedding("location", np.linspace(-1, 1, 7))
    assert Embedding.from_bytes(e.to_bytes()) == e
    with pytest.raises(ValueError):
        Embedding("x", [np.inf])


def test_prompts():
    assert build_prompt([], "Japan") == "Generate a high-resolution satellite image in Japan."
    p = build_prompt(["grass", "crop field", "lake"], " United States ")
    m = PROMPT_PATTERN.match(p)
    assert m and m["country"] == "United States" and m["pois"] == "grass, crop field, lake"
    with pytest.raises(ValueError):
        build_prompt(["lake"], "  ")
