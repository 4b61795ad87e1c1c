"""Binary containers: ``MLLW`` (model weights and prune masks) and ``PEMB`` (perceptual embeddings).

MLLW layout::

    b"MLLW" | version u32 LE | header length u64 LE | header JSON (UTF-8) | payload

The header carries the model config and an ordered tensor table of
``{"name", "shape", "byte_offset"}``; offsets are relative to the payload
start.  Model payloads are little-endian float32, mask payloads one byte per
element (``"dtype": "mask-u8"``).

PEMB layout::

    b"PEMB" | version u32 LE | rows u32 LE | dim u32 LE | rows*dim float32 LE
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .model import BLOCK_TENSORS, LINEAR_NAMES, BlockWeights, Model, ModelConfig

MLLW_MAGIC = b"MLLW"
PEMB_MAGIC = b"PEMB"
VERSION = 1
_F32 = np.dtype("<f4")
_U8 = np.dtype("u1")


class FormatError(ValueError):
    """A container failed validation."""


def _encode(header: dict, arrays: list[np.ndarray]) -> bytes:
    blob = json.dumps(header, separators=(",", ":")).encode("utf-8")
    return MLLW_MAGIC + struct.pack("<IQ", VERSION, len(blob)) + blob + b"".join(a.tobytes() for a in arrays)


def _tensor_table(named: list[tuple[str, np.ndarray]]) -> list[dict]:
    table, offset = [], 0
    for name, arr in named:
        table.append({"name": name, "shape": list(arr.shape), "byte_offset": offset})
        offset += arr.nbytes
    return table


def _decode(data: bytes, what: str) -> tuple[dict, memoryview]:
    if len(data) < 16:
        raise FormatError(f"{what}: file too short for an MLLW preamble ({len(data)} bytes)")
    if data[:4] != MLLW_MAGIC:
        raise FormatError(f"{what}: bad magic {data[:4]!r}, expected {MLLW_MAGIC!r}")
    version, hlen = struct.unpack_from("<IQ", data, 4)
    if version != VERSION:
        raise FormatError(f"{what}: unsupported format version {version}")
    if 16 + hlen > len(data):
        raise FormatError(f"{what}: header length {hlen} runs past end of file")
    try:
        header = json.loads(bytes(data[16 : 16 + hlen]).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{what}: header is not valid UTF-8 JSON ({exc})") from None
    if not isinstance(header, dict):
        raise FormatError(f"{what}: header must be a JSON object")
    return header, memoryview(data)[16 + hlen :]


def _read_tensors(header: dict, payload: memoryview, expected: dict[str, tuple], dtype: np.dtype) -> dict:
    table = header.get("tensors")
    if not isinstance(table, list):
        raise FormatError("header has no tensor table")
    seen: dict[str, np.ndarray] = {}
    spans = []
    for entry in table:
        try:
            name, shape, offset = entry["name"], tuple(entry["shape"]), int(entry["byte_offset"])
        except (KeyError, TypeError, ValueError):
            raise FormatError(f"malformed tensor table entry {entry!r}") from None
        if name not in expected:
            raise FormatError(f"tensor {name!r}: not part of this model layout")
        if name in seen:
            raise FormatError(f"tensor {name!r}: listed twice")
        if shape != expected[name]:
            raise FormatError(f"tensor {name!r}: shape {list(shape)} != expected {list(expected[name])}")
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if offset < 0 or offset + nbytes > len(payload):
            raise FormatError(
                f"tensor {name!r}: bytes [{offset}, {offset + nbytes}) exceed payload of {len(payload)} bytes"
            )
        spans.append((offset, offset + nbytes, name))
        seen[name] = np.frombuffer(payload[offset : offset + nbytes], dtype=dtype).reshape(shape)
    missing = [n for n in expected if n not in seen]
    if missing:
        raise FormatError(f"tensor {missing[0]!r}: missing from tensor table")
    spans.sort()
    for (_, end, a), (start, _, b) in zip(spans, spans[1:]):
        if start < end:
            raise FormatError(f"tensor {b!r}: overlaps tensor {a!r}")
    return seen


def _config_from_header(header: dict) -> ModelConfig:
    try:
        cfg = ModelConfig.from_dict(header["config"])
    except KeyError:
        raise FormatError("header has no config") from None
    except (TypeError, ValueError) as exc:
        raise FormatError(f"invalid config in header: {exc}") from None
    n_blocks = header.get("n_blocks")
    if n_blocks != cfg.n_layers:
        raise FormatError(f"header declares {n_blocks} blocks but config says n_layers={cfg.n_layers}")
    return cfg


def _expected_model_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    shapes = {}
    for i in range(cfg.n_layers):
        for name, shape in cfg.block_shapes().items():
            shapes[f"blocks.{i}.{name}"] = shape
    shapes["token_embedding"] = (cfg.vocab_size, cfg.d_model)
    shapes["position_embedding"] = (cfg.max_positions, cfg.d_model)
    shapes["final_ln.gamma"] = (cfg.d_model,)
    shapes["final_ln.beta"] = (cfg.d_model,)
    shapes["unembedding"] = (cfg.d_model, cfg.vocab_size)
    return shapes


# --- models -----------------------------------------------------------------


def model_to_bytes(model: Model) -> bytes:
    named = model.tensors()
    header = {
        "format": "MLLW",
        "dtype": "f32",
        "config": model.config.to_dict(),
        "n_blocks": model.config.n_layers,
        "tensors": _tensor_table(named),
    }
    return _encode(header, [a.astype(_F32) for _, a in named])


def model_from_bytes(data: bytes) -> Model:
    header, payload = _decode(data, "model")
    if header.get("dtype", "f32") != "f32":
        raise FormatError(f"model container has dtype {header.get('dtype')!r}, expected 'f32'")
    cfg = _config_from_header(header)
    t = _read_tensors(header, payload, _expected_model_shapes(cfg), _F32)
    for name, arr in t.items():
        if not np.all(np.isfinite(arr)):
            raise FormatError(f"tensor {name!r}: contains non-finite values")
    f32 = {k: v.astype(np.float32) for k, v in t.items()}
    blocks = tuple(
        BlockWeights(**{n: f32[f"blocks.{i}.{n}"] for n in BLOCK_TENSORS}) for i in range(cfg.n_layers)
    )
    return Model(
        cfg,
        blocks,
        f32["token_embedding"],
        f32["position_embedding"],
        f32["final_ln.gamma"],
        f32["final_ln.beta"],
        f32["unembedding"],
    )


def save_model(model: Model, path: str | os.PathLike) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path: str | os.PathLike) -> Model:
    return model_from_bytes(Path(path).read_bytes())


# --- masks ------------------------------------------------------------------
# Masks are keyed (layer, linear name) and shaped like the model weight.


def save_masks(masks: dict, cfg: ModelConfig, path: str | os.PathLike, sparsity: float) -> None:
    named = [
        (f"blocks.{layer}.{name}", np.asarray(masks[layer, name], dtype=_U8))
        for layer in range(cfg.n_layers)
        for name in LINEAR_NAMES
    ]
    header = {
        "format": "MLLW",
        "dtype": "mask-u8",
        "config": cfg.to_dict(),
        "n_blocks": cfg.n_layers,
        "sparsity": sparsity,
        "tensors": _tensor_table(named),
    }
    Path(path).write_bytes(_encode(header, [a for _, a in named]))


def load_masks(path: str | os.PathLike) -> tuple[dict, ModelConfig, float]:
    header, payload = _decode(Path(path).read_bytes(), "mask")
    if header.get("dtype") != "mask-u8":
        raise FormatError(f"mask container has dtype {header.get('dtype')!r}, expected 'mask-u8'")
    cfg = _config_from_header(header)
    shapes = cfg.block_shapes()
    expected = {f"blocks.{i}.{n}": shapes[n] for i in range(cfg.n_layers) for n in LINEAR_NAMES}
    t = _read_tensors(header, payload, expected, _U8)
    masks = {}
    for key, arr in t.items():
        if np.any(arr > 1):
            raise FormatError(f"tensor {key!r}: mask values must be 0 or 1")
        _, layer, name = key.split(".")
        masks[int(layer), name] = arr.copy()
    return masks, cfg, float(header.get("sparsity", 0.0))


# --- perceptual embeddings ---------------------------------------------------


def perceptual_to_bytes(rows: np.ndarray) -> bytes:
    rows = np.asarray(rows, dtype=_F32)
    if rows.ndim != 2:
        raise ValueError("perceptual embeddings must be a 2-D matrix")
    return PEMB_MAGIC + struct.pack("<III", VERSION, rows.shape[0], rows.shape[1]) + rows.tobytes()


def perceptual_from_bytes(data: bytes, d_model: int | None = None) -> np.ndarray:
    if len(data) < 16:
        raise FormatError(f"perceptual: file too short for a PEMB preamble ({len(data)} bytes)")
    if data[:4] != PEMB_MAGIC:
        raise FormatError(f"perceptual: bad magic {data[:4]!r}, expected {PEMB_MAGIC!r}")
    version, rows, dim = struct.unpack_from("<III", data, 4)
    if version != VERSION:
        raise FormatError(f"perceptual: unsupported format version {version}")
    need = rows * dim * 4
    if len(data) - 16 != need:
        raise FormatError(f"perceptual: payload is {len(data) - 16} bytes, header implies {need}")
    if d_model is not None and rows and dim != d_model:
        raise FormatError(f"perceptual: dim {dim} != model d_model {d_model}")
    arr = np.frombuffer(data, dtype=_F32, offset=16).reshape(rows, dim).astype(np.float32)
    if not np.all(np.isfinite(arr)):
        raise FormatError("perceptual: contains non-finite values")
    return arr


def save_perceptual(rows: np.ndarray, path: str | os.PathLike) -> None:
    Path(path).write_bytes(perceptual_to_bytes(rows))


def load_perceptual(path: str | os.PathLike, d_model: int | None = None) -> np.ndarray:
    return perceptual_from_bytes(Path(path).read_bytes(), d_model)
