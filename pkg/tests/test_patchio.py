import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from uav_ssl.errors import CorruptionError, FormatError, GeometryError, PreconditionError
from uav_ssl.patchio import (
    RawInput, TokenSequence, decode_tensor, encode_tensor, inflate_channels, load_tensor,
    patchify, read_manifest, save_tensor, tokenize, unpatchify, write_manifest,
)


def raw(h, w, c, modality="visual", seed=0):
    return RawInput(modality, np.random.default_rng(seed).standard_normal((h, w, c)).astype(np.float32))


# -- UAVT files --------------------------------------------------------------

def test_round_trip_audio(tmp_path):
    x = RawInput("audio", np.array([[[1.5], [-2.0]], [[0.25], [3.0]]], dtype=np.float32))
    save_tensor(tmp_path / "a.uavt", x)
    y = load_tensor(tmp_path / "a.uavt", "audio")
    assert y.modality == "audio" and y.data.shape == (2, 2, 1)
    assert y.data.tobytes() == x.data.tobytes()


def test_byte_layout():
    blob = encode_tensor(np.array([[1.0, 2.0]], dtype=np.float32))
    assert blob[:4] == b"UAVT"
    assert blob[4:8] == bytes([1, 0, 2, 0])
    assert struct.unpack("<2I", blob[8:16]) == (1, 2)
    assert struct.unpack("<2f", blob[16:]) == (1.0, 2.0)


def test_truncated_payload(tmp_path):
    blob = encode_tensor(np.zeros((2, 2, 1), dtype=np.float32))
    (tmp_path / "t.uavt").write_bytes(blob[:-1])
    with pytest.raises(CorruptionError):
        load_tensor(tmp_path / "t.uavt", "audio")


def test_bad_magic_and_version():
    blob = bytearray(encode_tensor(np.zeros(3, dtype=np.float32)))
    with pytest.raises(FormatError):
        decode_tensor(b"XXXX" + bytes(blob[4:]))
    blob[4] = 2
    with pytest.raises(FormatError):
        decode_tensor(bytes(blob))


def test_three_channels_with_audio_flag_accepted(tmp_path):
    save_tensor(tmp_path / "x.uavt", raw(4, 4, 3))
    x = load_tensor(tmp_path / "x.uavt", "audio")
    assert x.modality == "audio" and x.channels == 3
    # downstream tokenization treats it as already inflated
    assert tokenize(x, 2).tokens.shape == (4, 12)


def test_manifest_round_trip(tmp_path):
    rows = [{"id": "a", "speaker": "s1", "image": "data/a.img", "spectrogram": "data/a.spec"}]
    write_manifest(tmp_path / "m.jsonl", rows)
    back = read_manifest(tmp_path / "m.jsonl")
    assert back[0]["image"] == str(tmp_path / "data/a.img")
    (tmp_path / "bad.jsonl").write_text(json.dumps({"id": "a"}) + "\n")
    with pytest.raises(FormatError):
        read_manifest(tmp_path / "bad.jsonl")


# -- channel inflation ---------------------------------------------------------

def test_inflate_repeats_values():
    x = raw(3, 5, 1, "audio", seed=1)
    y = inflate_channels(x)
    assert y.data.shape == (3, 5, 3)
    for c in range(3):
        np.testing.assert_array_equal(y.data[:, :, c], x.data[:, :, 0])


def test_inflate_zero_and_sum():
    z = inflate_channels(RawInput("audio", np.zeros((4, 4, 1), dtype=np.float32)))
    assert not z.data.any()
    x = raw(4, 6, 1, "audio", seed=2).data.astype(np.float64)
    y = inflate_channels(RawInput("audio", x)).data
    assert y.sum() == pytest.approx(3 * x.sum(), rel=1e-12)


def test_inflate_precondition():
    with pytest.raises(PreconditionError):
        inflate_channels(raw(2, 2, 3, "audio"))


# -- patchify ------------------------------------------------------------------

def test_patchify_vit_geometry():
    t = patchify(raw(32, 32, 3), 16)
    assert t.tokens.shape == (4, 768) and t.grid == (2, 2)


def test_single_patch_is_flattened_input():
    x = raw(4, 4, 3, seed=3)
    t = patchify(x, 4)
    np.testing.assert_array_equal(t.tokens[0], x.data.reshape(-1))


def test_patch_contents_row_major():
    x = raw(4, 6, 3, seed=4)
    t = patchify(x, 2)
    # token (r, c) of the 2x3 grid holds pixels [2r:2r+2, 2c:2c+2]
    for r in range(2):
        for c in range(3):
            np.testing.assert_array_equal(t.tokens[r * 3 + c], x.data[2 * r:2 * r + 2, 2 * c:2 * c + 2].reshape(-1))


def test_non_divisible_raises():
    with pytest.raises(GeometryError):
        patchify(raw(30, 32, 3), 16)


def test_unpatchify_single_token():
    t = TokenSequence("visual", np.arange(12, dtype=np.float32)[None], (1, 1), 2)
    assert unpatchify(t).data.shape == (2, 2, 3)


def test_unpatchify_detects_bad_grid():
    t = patchify(raw(4, 4, 3), 2)
    t.grid = (1, 3)
    with pytest.raises(GeometryError):
        unpatchify(t)


def test_permuted_tokens_change_image():
    x = raw(4, 4, 3, seed=5)
    t = patchify(x, 2)
    t.tokens = t.tokens[[1, 0, 2, 3]]
    assert not np.array_equal(unpatchify(t).data, x.data)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 4), st.integers(0, 1000))
def test_round_trip_and_token_count(gh, gw, p, seed):
    x = raw(gh * p, gw * p, 3, seed=seed)
    t = patchify(x, p)
    assert t.num_tokens == (x.height // p) * (x.width // p)
    assert t.tokens.shape[1] == p * p * 3
    back = unpatchify(t)
    assert back.data.tobytes() == x.data.tobytes()
    again = patchify(back, p)
    assert again.tokens.tobytes() == t.tokens.tobytes()


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 1000))
def test_inflation_preserves_order_property(h, w, seed):
    x = raw(h, w, 1, "audio", seed=seed)
    y = inflate_channels(x).data
    assert np.array_equal(y.reshape(-1, 3)[:, 0], x.data.reshape(-1))
    assert np.array_equal(y[..., 0], y[..., 1]) and np.array_equal(y[..., 1], y[..., 2])
