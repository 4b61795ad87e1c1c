"""Incremental generation engine with a ragged per-layer KV cache.

Tokens are processed one at a time through every layer.  A token that skips
self-attention at a layer (skip_block, skip_sa) writes no K/V there, so later
tokens simply see fewer entries at that layer.  A token that runs SA always
appends its own entry before attending, so its context is never empty.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .model import (
    AttentionContext,
    ContractError,
    KvWrite,
    Model,
    block_parallel_ffn_sa,
    block_residual,
    block_skip_ffn,
    block_skip_sa,
    block_standard,
    embed,
    embed_perceptual,
    unembed,
)
from .numerics import DTYPE, as_f32
from .policy import (
    ActionKind,
    ComputePolicy,
    LayerAction,
    LayerSchedule,
    PolicyError,
    TokenClass,
    action_for,
    resolve_schedule,
)

log = logging.getLogger(__name__)

# observer(layer, linear_name, input_vector, token_class)
Observer = Callable[[int, str, np.ndarray, TokenClass], None]


class CapacityError(ValueError):
    """Prompt plus generation does not fit in max_positions."""


@dataclass(frozen=True)
class PromptInput:
    perceptual: np.ndarray
    text_ids: tuple[int, ...]

    @classmethod
    def make(cls, perceptual=None, text_ids=(), d_model: int = 0) -> "PromptInput":
        if perceptual is None or np.size(perceptual) == 0:
            perceptual = np.zeros((0, d_model), dtype=DTYPE)
        perceptual = as_f32(perceptual)
        if perceptual.ndim != 2:
            raise ValueError(f"perceptual embeddings must be 2-D, got shape {perceptual.shape}")
        return cls(perceptual, tuple(int(t) for t in text_ids))

    def __len__(self) -> int:
        return self.perceptual.shape[0] + len(self.text_ids)


def classify_tokens(prompt: PromptInput, n_generated: int = 0) -> list[TokenClass]:
    return (
        [TokenClass.PERCEPTUAL] * prompt.perceptual.shape[0]
        + [TokenClass.TEXT] * len(prompt.text_ids)
        + [TokenClass.GENERATED] * n_generated
    )


def embed_prompt(model: Model, prompt: PromptInput) -> list[np.ndarray]:
    n_p = prompt.perceptual.shape[0]
    rows = [embed_perceptual(model, prompt.perceptual[i], i) for i in range(n_p)]
    rows += [embed(model, t, n_p + j) for j, t in enumerate(prompt.text_ids)]
    return rows


class RaggedKvCache:
    """Per-layer ordered (position, K, V) entries; K/V rows span all heads."""

    def __init__(self, n_layers: int, d_model: int):
        self.d_model = d_model
        self.positions: list[list[int]] = [[] for _ in range(n_layers)]
        self.keys: list[list[np.ndarray]] = [[] for _ in range(n_layers)]
        self.values: list[list[np.ndarray]] = [[] for _ in range(n_layers)]

    def __len__(self) -> int:
        return len(self.positions)

    def append(self, layer: int, kv: KvWrite) -> None:
        pos = self.positions[layer]
        if pos and kv.position <= pos[-1]:
            raise ContractError(f"layer {layer}: position {kv.position} after {pos[-1]} breaks ordering")
        pos.append(kv.position)
        self.keys[layer].append(kv.key)
        self.values[layer].append(kv.value)

    def context(self, layer: int, query_position: int) -> AttentionContext:
        if not self.positions[layer]:
            return AttentionContext.empty(self.d_model, query_position)
        return AttentionContext(
            tuple(self.positions[layer]),
            np.stack(self.keys[layer]),
            np.stack(self.values[layer]),
            query_position,
        )

    def entry_count(self, layer: int) -> int:
        return len(self.positions[layer])


@dataclass(frozen=True)
class TraceRow:
    position: int
    layer: int
    token_class: TokenClass
    action: LayerAction
    # entries seen by each SA call made while handling this row (lead rows make two)
    context_sizes: tuple[int, ...]
    writes_kv: bool


@dataclass
class GenerationResult:
    output_token_ids: list[int]
    step_logits: list[np.ndarray]
    trace: list[TraceRow]
    cache: RaggedKvCache
    token_classes: list[TokenClass]
    final_hidden: list[np.ndarray]
    # per position, hidden state after each layer; only when record_hidden=True
    layer_hidden: list[list[np.ndarray]] | None = None


@dataclass
class _Session:
    model: Model
    schedule: LayerSchedule
    scope: frozenset
    cache: RaggedKvCache
    trace: list[TraceRow] = field(default_factory=list)
    observer: Observer | None = None
    layer_hidden: list[list[np.ndarray]] | None = None

    def taps(self, layer: int, cls: TokenClass):
        if self.observer is None:
            return None
        return _Taps(self.observer, layer, cls)

    def run_token(self, x: np.ndarray, position: int, cls: TokenClass) -> np.ndarray:
        cfg = self.model.config
        blocks = self.model.blocks
        cache = self.cache
        per_layer = [] if self.layer_hidden is not None else None
        layer = 0
        while layer < cfg.n_layers:
            action = action_for(self.schedule, layer, cls, self.scope)
            kind = action.kind
            block = blocks[layer]
            row = lambda sizes, writes: TraceRow(position, layer, cls, action, sizes, writes)  # noqa: E731

            if kind is ActionKind.PARALLEL_LEAD:
                nxt = action.partner
                ctx_a = cache.context(layer, position)
                ctx_b = cache.context(nxt, position)
                r_a, kv_a = block_residual(block, x, ctx_a, cfg, self.taps(layer, cls))
                r_b, kv_b = block_residual(blocks[nxt], x, ctx_b, cfg, self.taps(nxt, cls))
                cache.append(layer, kv_a)
                cache.append(nxt, kv_b)
                x = (x + r_a) + r_b
                self.trace.append(row((len(ctx_a) + 1, len(ctx_b) + 1), True))
                self.trace.append(
                    TraceRow(position, nxt, cls, action_for(self.schedule, nxt, cls, self.scope), (), True)
                )
                if per_layer is not None:
                    per_layer += [x, x]
                layer = nxt + 1
                continue
            if kind is ActionKind.PARALLEL_ABSORBED:
                raise ContractError(f"layer {layer} absorbed without a preceding lead")

            if kind is ActionKind.SKIP_BLOCK:
                self.trace.append(row((), False))
            elif kind is ActionKind.SKIP_SA:
                x, _ = block_skip_sa(block, x, cfg, self.taps(layer, cls))
                self.trace.append(row((), False))
            else:
                fn = {
                    ActionKind.EXECUTE: block_standard,
                    ActionKind.SKIP_FFN: block_skip_ffn,
                    ActionKind.PARALLEL_FFN_SA: block_parallel_ffn_sa,
                }[kind]
                ctx = cache.context(layer, position)
                x, kv = fn(block, x, ctx, cfg, self.taps(layer, cls))
                cache.append(layer, kv)
                self.trace.append(row((len(ctx) + 1,), True))
            if per_layer is not None:
                per_layer.append(x)
            layer += 1
        if per_layer is not None:
            self.layer_hidden.append(per_layer)
        return x


class _Taps(dict):
    """Forwards block intermediates to an observer as they are recorded."""

    def __init__(self, observer: Observer, layer: int, cls: TokenClass):
        super().__init__()
        self._observer, self._layer, self._cls = observer, layer, cls

    def __setitem__(self, name, value):
        super().__setitem__(name, value)
        self._observer(self._layer, name, value, self._cls)


def _check_schedule(model: Model, schedule: LayerSchedule) -> None:
    if schedule.n_layers != model.config.n_layers:
        raise PolicyError(f"schedule covers {schedule.n_layers} layers, model has {model.config.n_layers}")


def greedy(logits: np.ndarray) -> int:
    # np.argmax returns the first maximum: lowest index wins ties
    return int(np.argmax(logits))


def prefill(model, schedule, policy, prompt, *, cache=None, trace=None, observer=None, layer_hidden=None):
    """Run every prompt position; returns ``(cache, last_hidden, trace, hidden_per_position)``."""
    _check_schedule(model, schedule)
    cfg = model.config
    if len(prompt) < 1:
        raise ValueError("prompt must contain at least one token")
    if len(prompt) > cfg.max_positions:
        raise CapacityError(f"prompt of {len(prompt)} tokens exceeds max_positions={cfg.max_positions}")
    if prompt.perceptual.shape[0] and prompt.perceptual.shape[1] != cfg.d_model:
        raise ValueError(f"perceptual rows have dim {prompt.perceptual.shape[1]}, model d_model={cfg.d_model}")
    session = _Session(
        model,
        schedule,
        policy.scope,
        cache if cache is not None else RaggedKvCache(cfg.n_layers, cfg.d_model),
        trace if trace is not None else [],
        observer,
        layer_hidden,
    )
    hidden = []
    for pos, (x, cls) in enumerate(zip(embed_prompt(model, prompt), classify_tokens(prompt))):
        hidden.append(session.run_token(x, pos, cls))
    return session.cache, hidden[-1], session.trace, hidden


def decode_step(model, schedule, policy, cache, position, prev_token, *, trace=None, observer=None,
                layer_hidden=None):
    """Embed ``prev_token`` at ``position`` and run it as a generated token.

    Returns ``(next_token, logits, trace_rows, hidden)``.
    """
    _check_schedule(model, schedule)
    if position >= model.config.max_positions:
        raise CapacityError(f"position {position} exceeds max_positions={model.config.max_positions}")
    rows: list[TraceRow] = []
    session = _Session(model, schedule, policy.scope, cache, rows, observer, layer_hidden)
    x = session.run_token(embed(model, prev_token, position), position, TokenClass.GENERATED)
    if trace is not None:
        trace.extend(rows)
    logits = unembed(model, x)
    return greedy(logits), logits, rows, x


def generate(
    model: Model,
    policy: ComputePolicy,
    prompt: PromptInput,
    max_new_tokens: int,
    eos_id: int | None = None,
    *,
    record_hidden: bool = False,
    observer: Observer | None = None,
    cache_hook: Callable[[RaggedKvCache], None] | None = None,
) -> GenerationResult:
    """Greedy generation.  ``cache_hook`` runs once after prefill (diagnostics only)."""
    cfg = model.config
    if max_new_tokens < 0:
        raise ValueError("max_new_tokens must be >= 0")
    if len(prompt) + max_new_tokens > cfg.max_positions:
        raise CapacityError(
            f"prompt ({len(prompt)}) + max_new_tokens ({max_new_tokens}) exceeds max_positions={cfg.max_positions}"
        )
    schedule = resolve_schedule(policy, cfg.n_layers)
    layer_hidden = [] if record_hidden else None
    trace: list[TraceRow] = []
    cache, last, trace, hidden = prefill(
        model, schedule, policy, prompt, trace=trace, observer=observer, layer_hidden=layer_hidden
    )
    if cache_hook is not None:
        cache_hook(cache)
    tokens: list[int] = []
    logits_per_step: list[np.ndarray] = []
    n_generated_positions = 0
    if max_new_tokens > 0:
        logits = unembed(model, last)
        tokens.append(greedy(logits))
        logits_per_step.append(logits)
        position = len(prompt)
        while len(tokens) < max_new_tokens and tokens[-1] != eos_id:
            tok, logits, _, x = decode_step(
                model, schedule, policy, cache, position, tokens[-1],
                trace=trace, observer=observer, layer_hidden=layer_hidden,
            )
            hidden.append(x)
            tokens.append(tok)
            logits_per_step.append(logits)
            position += 1
            n_generated_positions += 1
    log.debug("generated %d tokens under %s", len(tokens), policy)
    return GenerationResult(
        tokens,
        logits_per_step,
        trace,
        cache,
        classify_tokens(prompt, n_generated_positions),
        hidden,
        layer_hidden,
    )
