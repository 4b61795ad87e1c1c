import json
import struct

import numpy as np
import pytest

from skipformer.model import ModelConfig, synth_model
from skipformer.runtime import PromptInput


def small_config(n_layers=4, d_model=8, n_heads=2, d_ff=16, vocab_size=32, max_positions=32, **kw):
    return ModelConfig(n_layers, d_model, n_heads, d_ff, vocab_size, max_positions, **kw)


def random_prompt(d_model, n_perceptual=4, text_ids=(1, 2, 3), seed=0):
    rng = np.random.default_rng(seed)
    rows = rng.uniform(-1.0, 1.0, size=(n_perceptual, d_model)).astype(np.float32)
    return PromptInput.make(rows, text_ids, d_model)


@pytest.fixture
def cfg():
    return small_config()


@pytest.fixture
def model(cfg):
    return synth_model(cfg, 11)


@pytest.fixture
def prompt(cfg):
    return random_prompt(cfg.d_model)


def write_run(tmp_path, *, n_layers=8, d_model=16, policy=None, perceptual=True, max_new=4, seed=7,
              model_path=None, perceptual_path=None, name="run.json"):
    """Write a run config (plus a 4-row perceptual file) and return its path."""
    from skipformer.formats import save_perceptual

    raw = {
        "model": {"path": str(model_path)} if model_path else {"synthetic": {
            "n_layers": n_layers, "d_model": d_model, "n_heads": 2, "d_ff": 2 * d_model,
            "vocab_size": 32, "max_positions": 32, "seed": seed}},
        "policy": policy or {"mode": "dense"},
        "prompt": {"text_ids": [1, 2, 3]},
        "generation": {"max_new_tokens": max_new},
    }
    if perceptual_path is not None:
        raw["prompt"]["perceptual_path"] = str(perceptual_path)
    elif perceptual:
        rows = np.random.default_rng(seed).uniform(-1, 1, (4, d_model)).astype(np.float32)
        save_perceptual(rows, tmp_path / "image.pemb")
        raw["prompt"]["perceptual_path"] = "image.pemb"
    path = tmp_path / name
    path.write_text(json.dumps(raw))
    return path


def corrupted_fixtures(tmp_path, d_model=8):
    """Five damaged containers: (label, kind, path) with kind ``model`` or ``perceptual``."""
    from skipformer.formats import model_to_bytes, perceptual_to_bytes

    good = model_to_bytes(synth_model(small_config(d_model=d_model), 3))
    hlen = struct.unpack_from("<Q", good, 8)[0]
    header = json.loads(good[16 : 16 + hlen])
    header["tensors"][0]["shape"] = [d_model + 1, d_model]
    blob = json.dumps(header).encode()
    reshaped = good[:4] + struct.pack("<IQ", 1, len(blob)) + blob + good[16 + hlen :]
    pemb = perceptual_to_bytes(np.ones((3, d_model), np.float32))
    nan_pemb = bytearray(pemb)
    nan_pemb[16:20] = np.float32(np.nan).tobytes()
    cases = [
        ("mllw-bad-magic", "model", b"MLLX" + good[4:]),
        ("mllw-truncated", "model", good[:-7]),
        ("mllw-shape-mismatch", "model", reshaped),
        ("pemb-truncated", "perceptual", pemb[:-3]),
        ("pemb-nan", "perceptual", bytes(nan_pemb)),
    ]
    out = []
    for label, kind, data in cases:
        path = tmp_path / f"{label}.{'mllw' if kind == 'model' else 'pemb'}"
        path.write_bytes(data)
        out.append((label, kind, path))
    return out


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
