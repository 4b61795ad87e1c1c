"""Float64 reference evaluations used as independent oracles in tests."""

import math

import numpy as np


def ln(x, g, b, eps):
    x = np.asarray(x, np.float64)
    m = x.mean(axis=-1, keepdims=True)
    v = ((x - m) ** 2).mean(axis=-1, keepdims=True)
    return g * (x - m) / np.sqrt(v + eps) + b


def act(x, kind):
    if kind == "relu":
        return np.maximum(x, 0)
    return 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))


def ffn(blk, h, kind="relu"):
    w = {k: np.asarray(getattr(blk, k), np.float64) for k in ("fc1", "fc1_bias", "fc2", "fc2_bias")}
    return act(h @ w["fc1"] + w["fc1_bias"], kind) @ w["fc2"] + w["fc2_bias"]


def masked_attention(blk, h, mask, n_heads):
    """Dense attention for every row of ``h`` (S, d) with boolean ``mask`` (S, S)."""
    h = np.asarray(h, np.float64)
    q, k, v = (h @ np.asarray(getattr(blk, n), np.float64) for n in ("wq", "wk", "wv"))
    d = h.shape[1]
    dh = d // n_heads
    out = np.zeros_like(h)
    for hd in range(n_heads):
        c = slice(hd * dh, (hd + 1) * dh)
        s = q[:, c] @ k[:, c].T / math.sqrt(dh)
        s = np.where(mask, s, -np.inf)
        p = np.exp(s - s.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        out[:, c] = p @ v[:, c]
    return out @ np.asarray(blk.wo, np.float64)


def splitmix64(seed):
    mask = (1 << 64) - 1
    state = seed & mask
    while True:
        state = (state + 0x9E3779B97F4A7C15) & mask
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & mask
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & mask
        yield z ^ (z >> 31)


def dense_logits(model, embedded):
    """Float64 dense forward over a full sequence; logits for every position."""
    cfg = model.config
    x = np.asarray(embedded, np.float64)
    n = x.shape[0]
    causal = np.tril(np.ones((n, n), bool))
    for blk in model.blocks:
        g = lambda name: np.asarray(getattr(blk, name), np.float64)  # noqa: E731
        x1 = x + masked_attention(blk, ln(x, g("ln1_gamma"), g("ln1_beta"), cfg.ln_eps), causal, cfg.n_heads)
        x = x1 + ffn(blk, ln(x1, g("ln2_gamma"), g("ln2_beta"), cfg.ln_eps), cfg.activation.value)
    h = ln(x, model.final_ln_gamma.astype(np.float64), model.final_ln_beta.astype(np.float64), cfg.ln_eps)
    return h @ model.unembedding.astype(np.float64)
