"""FLOPs accounting for block work.

Convention: a multiply-add is 2 FLOPs.  Softmax, layer norm, activations,
bias adds, embeddings and the logit head are not counted.  Sequential depth
counts dependent sub-layer stages (SA and FFN are one stage each; a fused
SA+FFN or a fused block pair counts as the stages of one block).
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

from .model import ModelConfig
from .policy import ActionKind, ComputePolicy, LayerSchedule, TokenClass, action_for
from .runtime import TraceRow


class TraceError(ValueError):
    """The execution trace does not cover every (position, layer) pair."""


STAGE_DEPTH = {
    ActionKind.EXECUTE: 2,
    ActionKind.SKIP_BLOCK: 0,
    ActionKind.SKIP_FFN: 1,
    ActionKind.SKIP_SA: 1,
    ActionKind.PARALLEL_FFN_SA: 1,
    ActionKind.PARALLEL_LEAD: 2,
    ActionKind.PARALLEL_ABSORBED: 0,
}


def linear_flops(out_dim: int, in_dim: int, tokens: int) -> int:
    return 2 * out_dim * in_dim * tokens


def attention_flops(d_model: int, n_heads: int, ctx_entries: int) -> int:
    """Per query token: Q/K/V and output projections plus scores and weighted sum over ``ctx_entries``."""
    d = d_model
    projections = 3 * linear_flops(d, d, 1) + linear_flops(d, d, 1)
    return projections + 2 * d * ctx_entries + 2 * d * ctx_entries


def ffn_flops(cfg: ModelConfig) -> int:
    return linear_flops(cfg.d_ff, cfg.d_model, 1) + linear_flops(cfg.d_model, cfg.d_ff, 1)


def action_flops(kind: ActionKind, context_sizes: tuple[int, ...], cfg: ModelConfig) -> int:
    attn = lambda c: attention_flops(cfg.d_model, cfg.n_heads, c)  # noqa: E731
    if kind in (ActionKind.EXECUTE, ActionKind.PARALLEL_FFN_SA):
        return attn(context_sizes[0]) + ffn_flops(cfg)
    if kind is ActionKind.SKIP_FFN:
        return attn(context_sizes[0])
    if kind is ActionKind.SKIP_SA:
        return ffn_flops(cfg)
    if kind is ActionKind.PARALLEL_LEAD:
        return sum(attn(c) + ffn_flops(cfg) for c in context_sizes)
    return 0


@dataclass
class FlopsReport:
    layer_flops: list[int]
    action_flops: dict[str, int]
    prefill_flops: int
    decode_flops: int
    dense_flops: int
    sequential_depth: int
    dense_depth: int
    layer_depth: list[int] = field(default_factory=list)

    @property
    def total_flops(self) -> int:
        return self.prefill_flops + self.decode_flops

    @property
    def reduction_ratio(self) -> float:
        if self.dense_flops == 0:
            return 0.0
        return 1.0 - self.total_flops / self.dense_flops

    def to_dict(self) -> dict:
        return {
            "total_flops": self.total_flops,
            "prefill_flops": self.prefill_flops,
            "decode_flops": self.decode_flops,
            "dense_flops": self.dense_flops,
            "reduction_ratio": self.reduction_ratio,
            "sequential_depth": self.sequential_depth,
            "dense_depth": self.dense_depth,
            "layer_flops": list(self.layer_flops),
            "layer_depth": list(self.layer_depth),
            "action_flops": dict(sorted(self.action_flops.items())),
        }

    def to_table(self) -> str:
        lines = [f"{'layer':>5}  {'flops':>14}  {'depth':>5}"]
        for l, (f, d) in enumerate(zip(self.layer_flops, self.layer_depth)):
            lines.append(f"{l:>5}  {f:>14,}  {d:>5}")
        lines.append(f"{'total':>5}  {self.total_flops:>14,}  {self.sequential_depth:>5}")
        lines.append(f"{'dense':>5}  {self.dense_flops:>14,}  {self.dense_depth:>5}")
        lines.append(f"reduction ratio: {self.reduction_ratio:.6f}")
        return "\n".join(lines)


def dense_flops(cfg: ModelConfig, n_positions: int) -> int:
    """Dense block work for positions ``0..n_positions-1`` (query at p sees p+1 entries)."""
    per_layer = sum(attention_flops(cfg.d_model, cfg.n_heads, p + 1) + ffn_flops(cfg) for p in range(n_positions))
    return per_layer * cfg.n_layers


def _report(cfg, n_positions, rows_by_position) -> FlopsReport:
    """``rows_by_position[p]`` is a list of (layer, kind, context_sizes, token_class)."""
    layer_flops = [0] * cfg.n_layers
    by_action: Counter = Counter()
    prefill = decode = 0
    for rows in rows_by_position:
        for layer, kind, sizes, cls in rows:
            f = action_flops(kind, sizes, cfg)
            layer_flops[layer] += f
            by_action[kind.value] += f
            if cls is TokenClass.GENERATED:
                decode += f
            else:
                prefill += f
    layer_depth = [0] * cfg.n_layers
    if rows_by_position:
        for layer, kind, _, _ in rows_by_position[-1]:
            layer_depth[layer] = STAGE_DEPTH[kind]
    return FlopsReport(
        layer_flops,
        dict(by_action),
        prefill,
        decode,
        dense_flops(cfg, n_positions),
        sum(layer_depth) if rows_by_position else 0,
        2 * cfg.n_layers,
        layer_depth,
    )


def trace_flops(trace: list[TraceRow], cfg: ModelConfig) -> FlopsReport:
    """Count the work actually recorded by the engine.  Depth is that of the last position."""
    positions: dict[int, dict[int, TraceRow]] = {}
    for row in trace:
        layers = positions.setdefault(row.position, {})
        if row.layer in layers:
            raise TraceError(f"duplicate trace row for position {row.position}, layer {row.layer}")
        layers[row.layer] = row
    n = len(positions)
    if sorted(positions) != list(range(n)):
        raise TraceError("trace positions are not contiguous from 0")
    ordered = []
    for p in range(n):
        layers = positions[p]
        if sorted(layers) != list(range(cfg.n_layers)):
            missing = sorted(set(range(cfg.n_layers)) - set(layers))
            raise TraceError(f"position {p} is missing layers {missing}")
        ordered.append([(l, layers[l].action.kind, layers[l].context_sizes, layers[l].token_class)
                        for l in range(cfg.n_layers)])
    return _report(cfg, n, ordered)


def predict_flops(
    schedule: LayerSchedule,
    policy: ComputePolicy,
    cfg: ModelConfig,
    n_prompt: int,
    n_generated: int,
    n_perceptual: int = 0,
) -> FlopsReport:
    """Analytic count from the schedule alone.

    ``n_generated`` is the number of generated positions run through the
    stack (a run emitting k tokens without EOS processes k-1 of them).
    Context sizes follow from counting which earlier tokens wrote K/V.
    """
    classes = (
        [TokenClass.PERCEPTUAL] * n_perceptual
        + [TokenClass.TEXT] * (n_prompt - n_perceptual)
        + [TokenClass.GENERATED] * n_generated
    )
    writers = [0] * cfg.n_layers
    rows_by_position = []
    for cls in classes:
        rows = []
        kinds = [action_for(schedule, l, cls, policy.scope).kind for l in range(cfg.n_layers)]
        for l, kind in enumerate(kinds):
            if kind is ActionKind.PARALLEL_LEAD:
                sizes = (writers[l] + 1, writers[l + 1] + 1)
            elif kind in (ActionKind.EXECUTE, ActionKind.SKIP_FFN, ActionKind.PARALLEL_FFN_SA):
                sizes = (writers[l] + 1,)
            else:
                sizes = ()
            rows.append((l, kind, sizes, cls))
        for l, kind in enumerate(kinds):
            if kind not in (ActionKind.SKIP_BLOCK, ActionKind.SKIP_SA):
                writers[l] += 1
        rows_by_position.append(rows)
    return _report(cfg, len(classes), rows_by_position)
