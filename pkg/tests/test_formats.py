import json
import struct

import numpy as np
import pytest

from conftest import small_config
from skipformer.formats import (
    FormatError,
    load_masks,
    load_model,
    load_perceptual,
    model_from_bytes,
    model_to_bytes,
    perceptual_from_bytes,
    perceptual_to_bytes,
    save_masks,
    save_model,
    save_perceptual,
)
from skipformer.model import LINEAR_NAMES, synth_model


def split(data):
    hlen = struct.unpack_from("<Q", data, 8)[0]
    return json.loads(data[16 : 16 + hlen]), data[16 + hlen :]


def join(header, payload, version=1):
    blob = json.dumps(header).encode()
    return b"MLLW" + struct.pack("<IQ", version, len(blob)) + blob + payload


def test_round_trip_bitwise(tmp_path):
    m = synth_model(small_config(), 7)
    save_model(m, tmp_path / "m.mllw")
    back = load_model(tmp_path / "m.mllw")
    assert back.config == m.config
    for (n1, a), (n2, b) in zip(m.tensors(), back.tensors()):
        assert n1 == n2 and a.tobytes() == b.tobytes() and b.dtype == np.float32
    assert model_to_bytes(back) == model_to_bytes(m)


def test_layout_is_little_endian_contiguous():
    m = synth_model(small_config(n_layers=1), 1)
    data = model_to_bytes(m)
    assert data[:4] == b"MLLW" and struct.unpack_from("<I", data, 4)[0] == 1
    header, payload = split(data)
    assert header["config"]["n_layers"] == 1 and header["n_blocks"] == 1
    offset = 0
    for entry, (name, arr) in zip(header["tensors"], m.tensors()):
        assert entry["name"] == name and entry["byte_offset"] == offset
        assert payload[offset : offset + arr.nbytes] == arr.astype("<f4").tobytes()
        offset += arr.nbytes
    assert offset == len(payload)


def _corrupt(fn):
    data = model_to_bytes(synth_model(small_config(), 3))
    header, payload = split(data)
    return fn(data, header, payload)


@pytest.mark.parametrize(
    "mutate, message",
    [
        (lambda d, h, p: b"XXXX" + d[4:], "magic"),
        (lambda d, h, p: join(h, p, version=2), "version"),
        (lambda d, h, p: d[: len(d) - 10], "unembedding.*exceed"),
        (lambda d, h, p: join({**h, "n_blocks": 5}, p), "5 blocks"),
        (lambda d, h, p: d[:20], "header length"),
        (lambda d, h, p: join({**h, "tensors": h["tensors"][:-1]}, p), "unembedding"),
        (lambda d, h, p: join({**h, "tensors": [{**h["tensors"][2], "shape": [8, 7]}] + h["tensors"][3:]
                                                + h["tensors"][:2]}, p), "blocks.0.wq"),
        (lambda d, h, p: d[:16] + b"{not json" + d[25:], "JSON"),
    ],
)
def test_rejects_corrupted_models(mutate, message):
    with pytest.raises(FormatError, match=message):
        model_from_bytes(_corrupt(mutate))


def test_rejects_extra_block_tensor():
    def extra(d, h, p):
        t = dict(h["tensors"][0])
        t["name"] = "blocks.4.ln1_gamma"
        return join({**h, "tensors": h["tensors"] + [t]}, p)

    with pytest.raises(FormatError, match="blocks.4"):
        model_from_bytes(_corrupt(extra))


def test_mask_round_trip(tmp_path):
    cfg = small_config()
    m = synth_model(cfg, 2)
    rng = np.random.default_rng(0)
    masks = {(l, n): rng.integers(0, 2, getattr(m.blocks[l], n).shape).astype(np.uint8)
             for l in range(cfg.n_layers) for n in LINEAR_NAMES}
    save_masks(masks, cfg, tmp_path / "k.mllw", 0.5)
    back, cfg2, s = load_masks(tmp_path / "k.mllw")
    assert cfg2 == cfg and s == 0.5
    assert all(np.array_equal(back[k], masks[k]) for k in masks)
    header, _ = split((tmp_path / "k.mllw").read_bytes())
    assert header["dtype"] == "mask-u8"
    with pytest.raises(FormatError, match="dtype"):
        load_model(tmp_path / "k.mllw")


def test_perceptual_round_trip_and_layout(tmp_path):
    rows = np.arange(12, dtype=np.float32).reshape(3, 4)
    save_perceptual(rows, tmp_path / "p.pemb")
    data = (tmp_path / "p.pemb").read_bytes()
    assert data[:4] == b"PEMB" and struct.unpack_from("<III", data, 4) == (1, 3, 4)
    assert np.array_equal(load_perceptual(tmp_path / "p.pemb", 4), rows)


@pytest.mark.parametrize(
    "mutate, message",
    [
        (lambda d: b"PEMX" + d[4:], "magic"),
        (lambda d: d[:4] + struct.pack("<I", 9) + d[8:], "version"),
        (lambda d: d[:-4], "payload"),
        (lambda d: d[:10], "too short"),
    ],
)
def test_perceptual_rejects_corruption(mutate, message):
    data = perceptual_to_bytes(np.ones((2, 4), np.float32))
    with pytest.raises(FormatError, match=message):
        perceptual_from_bytes(mutate(data), 4)


def test_perceptual_dim_must_match_model():
    with pytest.raises(FormatError, match="d_model"):
        perceptual_from_bytes(perceptual_to_bytes(np.ones((2, 4), np.float32)), 8)
