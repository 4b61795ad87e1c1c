"""Pre-LN decoder-only transformer: weights, block variants and embeddings.

Projection matrices are stored ``(in_features, out_features)`` so a row
vector is projected as ``x @ W``.  Attention projections carry no bias; FC1
and FC2 do.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .numerics import (
    DTYPE,
    ActivationKind,
    ShapeError,
    activation,
    as_f32,
    layer_norm,
    matmul,
    softmax,
)

BLOCK_TENSORS = (
    "ln1_gamma",
    "ln1_beta",
    "wq",
    "wk",
    "wv",
    "wo",
    "ln2_gamma",
    "ln2_beta",
    "fc1",
    "fc1_bias",
    "fc2",
    "fc2_bias",
)
LINEAR_NAMES = ("wq", "wk", "wv", "wo", "fc1", "fc2")


class ContractError(RuntimeError):
    """An internal invariant of the engine was violated."""


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    d_model: int
    n_heads: int
    d_ff: int
    vocab_size: int
    max_positions: int
    activation: ActivationKind = ActivationKind.RELU
    ln_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "activation", ActivationKind(self.activation))
        for name in ("n_layers", "d_model", "n_heads", "d_ff", "vocab_size", "max_positions"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value < 1:
                raise ValueError(f"{name} must be an integer >= 1, got {value!r}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if not self.ln_eps > 0:
            raise ValueError("ln_eps must be > 0")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["activation"] = self.activation.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**d)

    def block_shapes(self) -> dict[str, tuple[int, ...]]:
        d, f = self.d_model, self.d_ff
        return {
            "ln1_gamma": (d,),
            "ln1_beta": (d,),
            "wq": (d, d),
            "wk": (d, d),
            "wv": (d, d),
            "wo": (d, d),
            "ln2_gamma": (d,),
            "ln2_beta": (d,),
            "fc1": (d, f),
            "fc1_bias": (f,),
            "fc2": (f, d),
            "fc2_bias": (d,),
        }


@dataclass(frozen=True)
class BlockWeights:
    ln1_gamma: np.ndarray
    ln1_beta: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    ln2_gamma: np.ndarray
    ln2_beta: np.ndarray
    fc1: np.ndarray
    fc1_bias: np.ndarray
    fc2: np.ndarray
    fc2_bias: np.ndarray

    def replace(self, **changes) -> "BlockWeights":
        return dataclasses.replace(self, **{k: as_f32(v) for k, v in changes.items()})

    def check(self, cfg: ModelConfig) -> None:
        for name, shape in cfg.block_shapes().items():
            arr = getattr(self, name)
            if arr.shape != shape or arr.dtype != DTYPE:
                raise ShapeError(f"{name}: expected float32 {shape}, got {arr.dtype} {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")


@dataclass(frozen=True)
class Model:
    config: ModelConfig
    blocks: tuple[BlockWeights, ...]
    token_embedding: np.ndarray
    position_embedding: np.ndarray
    final_ln_gamma: np.ndarray
    final_ln_beta: np.ndarray
    unembedding: np.ndarray

    def __post_init__(self):
        cfg = self.config
        if len(self.blocks) != cfg.n_layers:
            raise ShapeError(f"model has {len(self.blocks)} blocks, config says {cfg.n_layers}")
        for b in self.blocks:
            b.check(cfg)
        expected = {
            "token_embedding": (cfg.vocab_size, cfg.d_model),
            "position_embedding": (cfg.max_positions, cfg.d_model),
            "final_ln_gamma": (cfg.d_model,),
            "final_ln_beta": (cfg.d_model,),
            "unembedding": (cfg.d_model, cfg.vocab_size),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ShapeError(f"{name}: expected {shape}, got {getattr(self, name).shape}")

    def tensors(self) -> list[tuple[str, np.ndarray]]:
        """All tensors in canonical order with their container names."""
        out = []
        for i, b in enumerate(self.blocks):
            out.extend((f"blocks.{i}.{n}", getattr(b, n)) for n in BLOCK_TENSORS)
        out += [
            ("token_embedding", self.token_embedding),
            ("position_embedding", self.position_embedding),
            ("final_ln.gamma", self.final_ln_gamma),
            ("final_ln.beta", self.final_ln_beta),
            ("unembedding", self.unembedding),
        ]
        return out

    def with_blocks(self, blocks) -> "Model":
        return dataclasses.replace(self, blocks=tuple(blocks))


# --- attention --------------------------------------------------------------


class KvWrite(NamedTuple):
    position: int
    key: np.ndarray
    value: np.ndarray


@dataclass(frozen=True)
class AttentionContext:
    """Keys/values visible to one query at one layer.

    ``keys`` and ``values`` are ``(entries, d_model)``; head ``h`` owns columns
    ``h*d_head:(h+1)*d_head``.
    """

    positions: tuple[int, ...]
    keys: np.ndarray
    values: np.ndarray
    query_position: int

    @classmethod
    def empty(cls, d_model: int, query_position: int) -> "AttentionContext":
        z = np.zeros((0, d_model), dtype=DTYPE)
        return cls((), z, z, query_position)

    def __len__(self) -> int:
        return len(self.positions)

    def with_entry(self, kv: KvWrite) -> "AttentionContext":
        return AttentionContext(
            self.positions + (kv.position,),
            np.concatenate([self.keys, kv.key[None, :]]),
            np.concatenate([self.values, kv.value[None, :]]),
            self.query_position,
        )


def kv_project(block: BlockWeights, x_norm: np.ndarray, position: int) -> KvWrite:
    return KvWrite(position, matmul(x_norm, block.wk), matmul(x_norm, block.wv))


def self_attention(
    block: BlockWeights,
    x_norm: np.ndarray,
    ctx: AttentionContext,
    cfg: ModelConfig,
    taps: dict | None = None,
) -> np.ndarray:
    """Multi-head causal attention of one query over ``ctx``; returns the residual branch."""
    if len(ctx) == 0:
        raise ContractError("self-attention over an empty context")
    if any(p > ctx.query_position for p in ctx.positions):
        raise ContractError(f"context holds a position after query {ctx.query_position}")
    dh = cfg.d_head
    scale = DTYPE(np.sqrt(DTYPE(dh)))
    q = matmul(x_norm, block.wq)
    heads = []
    for h in range(cfg.n_heads):
        cols = slice(h * dh, (h + 1) * dh)
        scores = matmul(q[cols], ctx.keys[:, cols].T) / scale
        heads.append(matmul(softmax(scores), ctx.values[:, cols]))
    concat = np.concatenate(heads)
    if taps is not None:
        taps["wo"] = concat
    return matmul(concat, block.wo)


def ffn(block: BlockWeights, x_norm: np.ndarray, cfg: ModelConfig, taps: dict | None = None) -> np.ndarray:
    if x_norm.shape[-1] != cfg.d_model:
        raise ShapeError(f"ffn input has {x_norm.shape[-1]} features, expected {cfg.d_model}")
    hidden = activation(matmul(x_norm, block.fc1) + block.fc1_bias, cfg.activation)
    if taps is not None:
        taps["fc1"] = x_norm
        taps["fc2"] = hidden
    return matmul(hidden, block.fc2) + block.fc2_bias


# --- block variants ---------------------------------------------------------
#
# ``ctx`` holds the entries written by earlier tokens at this layer; variants
# that run SA append this token's own entry before attending and return it.


def _attend(block, x, ctx, cfg, taps):
    h = layer_norm(x, block.ln1_gamma, block.ln1_beta, cfg.ln_eps)
    if taps is not None:
        taps["wq"] = taps["wk"] = taps["wv"] = h
    kv = kv_project(block, h, ctx.query_position)
    return self_attention(block, h, ctx.with_entry(kv), cfg, taps), kv


def block_standard(block, x, ctx, cfg, taps=None) -> tuple[np.ndarray, KvWrite]:
    sa, kv = _attend(block, x, ctx, cfg, taps)
    x1 = x + sa
    return x1 + ffn(block, layer_norm(x1, block.ln2_gamma, block.ln2_beta, cfg.ln_eps), cfg, taps), kv


def block_skip_ffn(block, x, ctx, cfg, taps=None) -> tuple[np.ndarray, KvWrite]:
    sa, kv = _attend(block, x, ctx, cfg, taps)
    return x + sa, kv


def block_skip_sa(block, x, cfg, taps=None) -> tuple[np.ndarray, None]:
    # LN2 applied on top of LN1, as the skip-SA formulation is written
    h = layer_norm(x, block.ln1_gamma, block.ln1_beta, cfg.ln_eps)
    h = layer_norm(h, block.ln2_gamma, block.ln2_beta, cfg.ln_eps)
    return x + ffn(block, h, cfg, taps), None


def block_parallel_ffn_sa(block, x, ctx, cfg, taps=None) -> tuple[np.ndarray, KvWrite]:
    sa, kv = _attend(block, x, ctx, cfg, taps)
    f = ffn(block, layer_norm(x, block.ln2_gamma, block.ln2_beta, cfg.ln_eps), cfg, taps)
    # (x + sa) + f: equals block_standard when sa == 0 and block_skip_ffn when f == 0
    return (x + sa) + f, kv


def block_residual(block, x, ctx, cfg, taps=None) -> tuple[np.ndarray, KvWrite]:
    out, kv = block_standard(block, x, ctx, cfg, taps)
    return out - x, kv


# --- embeddings -------------------------------------------------------------


def embed(model: Model, token_id: int, position: int) -> np.ndarray:
    cfg = model.config
    if not 0 <= token_id < cfg.vocab_size:
        raise IndexError(f"token id {token_id} outside vocabulary of {cfg.vocab_size}")
    if not 0 <= position < cfg.max_positions:
        raise IndexError(f"position {position} outside max_positions={cfg.max_positions}")
    return model.token_embedding[token_id] + model.position_embedding[position]


def embed_perceptual(model: Model, row: np.ndarray, position: int) -> np.ndarray:
    """Perceptual rows arrive in model space; they get the same position embedding as text."""
    cfg = model.config
    if not 0 <= position < cfg.max_positions:
        raise IndexError(f"position {position} outside max_positions={cfg.max_positions}")
    row = as_f32(row)
    if row.shape != (cfg.d_model,):
        raise ShapeError(f"perceptual row has shape {row.shape}, expected ({cfg.d_model},)")
    return row + model.position_embedding[position]


def unembed(model: Model, x: np.ndarray) -> np.ndarray:
    if x.shape[-1] != model.config.d_model:
        raise ShapeError(f"unembed input has {x.shape[-1]} features")
    h = layer_norm(x, model.final_ln_gamma, model.final_ln_beta, model.config.ln_eps)
    return matmul(h, model.unembedding)


# --- deterministic synthetic weights ---------------------------------------

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


class SplitMix64:
    """SplitMix64 stream; ``next()`` for scalars, ``take(n)`` for a vectorized block."""

    def __init__(self, seed: int):
        self.state = int(seed) & _MASK64

    def next(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def take(self, n: int) -> np.ndarray:
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * _GOLDEN
            z = (z ^ (z >> np.uint64(30))) * _MIX1
            z = (z ^ (z >> np.uint64(27))) * _MIX2
        self.state = (self.state + n * 0x9E3779B97F4A7C15) & _MASK64
        return z ^ (z >> np.uint64(31))


def uniform_weights(u: np.ndarray, offset: float = 0.0) -> np.ndarray:
    """Map 64-bit draws to ``[-0.1, 0.1) + offset``; arithmetic in float64, stored as float32."""
    unit = (u >> np.uint64(11)).astype(np.float64) / 2.0**53
    return (unit * 0.2 - 0.1 + offset).astype(DTYPE)


def synth_model(cfg: ModelConfig, seed: int) -> Model:
    rng = SplitMix64(seed)

    def draw(shape, offset=0.0):
        n = int(np.prod(shape))
        return uniform_weights(rng.take(n), offset).reshape(shape)

    blocks = []
    for _ in range(cfg.n_layers):
        arrays = {
            name: draw(shape, 1.0 if name.endswith("gamma") else 0.0)
            for name, shape in cfg.block_shapes().items()
        }
        blocks.append(BlockWeights(**arrays))
    tok = draw((cfg.vocab_size, cfg.d_model))
    pos = draw((cfg.max_positions, cfg.d_model))
    gamma = draw((cfg.d_model,), 1.0)
    beta = draw((cfg.d_model,))
    unemb = draw((cfg.d_model, cfg.vocab_size))
    return Model(cfg, tuple(blocks), tok, pos, gamma, beta, unemb)
