"""Full-recompute reference executor.

No cache: every step re-runs the whole sequence layer by layer with dense
masked attention.  A token that does not run SA at a layer contributes no
key/value column there, which is the same rule the incremental engine
enforces through its ragged cache.  Only the numeric kernels are shared with
the engine; scheduling and caching are reimplemented here on purpose.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import BlockWeights, Model, ModelConfig, embed, unembed
from .numerics import DTYPE, activation, layer_norm, matmul, softmax
from .policy import ActionKind, ComputePolicy, LayerSchedule, TokenClass, resolve_schedule
from .runtime import PromptInput, classify_tokens, embed_prompt, greedy

_NO_SA = (ActionKind.SKIP_BLOCK, ActionKind.SKIP_SA)


@dataclass
class OracleResult:
    step_logits: list[np.ndarray]
    output_token_ids: list[int]
    prompt_logits: np.ndarray


def _ffn(block: BlockWeights, h: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    a = activation(matmul(h, block.fc1) + block.fc1_bias, cfg.activation)
    return matmul(a, block.fc2) + block.fc2_bias


def _masked_attention(block: BlockWeights, h: np.ndarray, writes: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    n = h.shape[0]
    dh = cfg.d_head
    q, k, v = matmul(h, block.wq), matmul(h, block.wk), matmul(h, block.wv)
    causal = np.tril(np.ones((n, n), dtype=bool))
    mask = causal & writes[None, :]
    # rows that do not run SA get a dummy self column; their output is discarded
    mask |= np.eye(n, dtype=bool)
    scale = DTYPE(np.sqrt(DTYPE(dh)))
    heads = []
    for hd in range(cfg.n_heads):
        cols = slice(hd * dh, (hd + 1) * dh)
        scores = matmul(q[:, cols], k[:, cols].T) / scale
        heads.append(matmul(softmax(scores, mask), v[:, cols]))
    return matmul(np.concatenate(heads, axis=1), block.wo)


def _layer(block: BlockWeights, x: np.ndarray, kinds: list[ActionKind], cfg: ModelConfig) -> np.ndarray:
    writes = np.array([k not in _NO_SA for k in kinds])
    eps = cfg.ln_eps
    h1 = layer_norm(x, block.ln1_gamma, block.ln1_beta, eps)
    sa = _masked_attention(block, h1, writes, cfg)
    x1 = x + sa
    dense = x1 + _ffn(block, layer_norm(x1, block.ln2_gamma, block.ln2_beta, eps), cfg)
    out = np.empty_like(x)
    for i, kind in enumerate(kinds):
        if kind is ActionKind.EXECUTE:
            out[i] = dense[i]
        elif kind is ActionKind.SKIP_BLOCK:
            out[i] = x[i]
        elif kind is ActionKind.SKIP_FFN:
            out[i] = x1[i]
        elif kind is ActionKind.SKIP_SA:
            h = layer_norm(h1[i], block.ln2_gamma, block.ln2_beta, eps)
            out[i] = x[i] + _ffn(block, h, cfg)
        elif kind is ActionKind.PARALLEL_FFN_SA:
            f = _ffn(block, layer_norm(x[i], block.ln2_gamma, block.ln2_beta, eps), cfg)
            out[i] = x1[i] + f
        else:
            raise ValueError(f"oracle layer cannot evaluate {kind}")
    return out


def _token_actions(schedule: LayerSchedule, policy: ComputePolicy, classes) -> list[list]:
    return [
        [schedule.in_scope_actions[l] if c in policy.scope else None for l in range(schedule.n_layers)]
        for c in classes
    ]


def oracle_forward(
    model: Model,
    schedule: LayerSchedule,
    policy: ComputePolicy,
    token_classes: list[TokenClass],
    embedded: np.ndarray,
    return_hidden: bool = False,
):
    """Logits at the last position; with ``return_hidden`` also the hidden matrix after every layer."""
    cfg = model.config
    x = np.asarray(embedded, dtype=DTYPE)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError("oracle_forward needs a non-empty (tokens, d_model) sequence")
    if len(token_classes) != x.shape[0]:
        raise ValueError("one token class per sequence row is required")
    acts = _token_actions(schedule, policy, token_classes)
    kinds_at = lambda l: [a[l].kind if a[l] is not None else ActionKind.EXECUTE for a in acts]  # noqa: E731
    hidden = []
    l = 0
    while l < cfg.n_layers:
        kinds = kinds_at(l)
        if ActionKind.PARALLEL_LEAD in kinds:
            fused = np.array([k is ActionKind.PARALLEL_LEAD for k in kinds])
            everyone = [ActionKind.EXECUTE] * len(kinds)
            y = _layer(model.blocks[l], x, everyone, cfg)
            z = np.where(fused[:, None], x, y)
            w = _layer(model.blocks[l + 1], z, everyone, cfg)
            x = np.where(fused[:, None], (x + (y - x)) + (w - z), w)
            hidden += [x, x]
            l += 2
            continue
        x = _layer(model.blocks[l], x, kinds, cfg)
        hidden.append(x)
        l += 1
    logits = unembed(model, x[-1])
    return (logits, hidden) if return_hidden else logits


def oracle_generate(
    model: Model,
    policy: ComputePolicy,
    prompt: PromptInput,
    max_new: int,
    eos_id: int | None = None,
) -> OracleResult:
    schedule = resolve_schedule(policy, model.config.n_layers)
    rows = embed_prompt(model, prompt)
    classes = classify_tokens(prompt)
    prompt_logits = oracle_forward(model, schedule, policy, classes, np.stack(rows))
    tokens: list[int] = []
    steps: list[np.ndarray] = []
    logits = prompt_logits
    while len(tokens) < max_new:
        if tokens:
            if tokens[-1] == eos_id:
                break
            rows.append(embed(model, tokens[-1], len(rows)))
            classes.append(TokenClass.GENERATED)
            logits = oracle_forward(model, schedule, policy, classes, np.stack(rows))
        steps.append(logits)
        tokens.append(greedy(logits))
    return OracleResult(steps, tokens, prompt_logits)
