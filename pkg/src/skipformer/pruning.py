"""Post-training unstructured pruning with per-output-row comparison groups.

Scores and masks in the per-layer functions use the ``(out, in)``
orientation: row ``i`` holds the incoming weights of output unit ``i``.
Model weights are stored ``(in, out)``, so the model-level helpers transpose
on the way in and out; masks returned for a model have the weight's shape.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from .model import LINEAR_NAMES, Model, SplitMix64
from .numerics import DTYPE, ShapeError
from .policy import ComputePolicy, TokenClass
from .runtime import PromptInput, generate

CALIBRATION_DECODE_STEPS = 8

CALIBRATION_SCOPES = {
    "P": frozenset({TokenClass.PERCEPTUAL}),
    "T": frozenset({TokenClass.TEXT, TokenClass.GENERATED}),
    "P+T": frozenset(TokenClass),
}

METHODS = ("wanda", "magnitude", "random")


class CalibrationError(ValueError):
    """Calibration saw no tokens in the requested scope."""


@dataclass
class CalibrationStats:
    norms: dict[tuple[int, str], np.ndarray]  # (layer, linear) -> per-input-feature L2 norm
    token_count: int
    scope: str


class NormAccumulator:
    """Per-feature sums of squares, reported as L2 norms."""

    def __init__(self):
        self.sums: dict = {}

    def add(self, key, vec: np.ndarray) -> None:
        sq = np.square(np.asarray(vec, dtype=np.float64))
        self.sums[key] = self.sums[key] + sq if key in self.sums else sq

    def norms(self) -> dict:
        return {k: np.sqrt(v) for k, v in sorted(self.sums.items())}


def collect_calibration(model: Model, prompts: list[PromptInput], scope: str) -> CalibrationStats:
    if scope not in CALIBRATION_SCOPES:
        raise ValueError(f"calibration scope must be one of {sorted(CALIBRATION_SCOPES)}, got {scope!r}")
    if not prompts:
        raise CalibrationError("calibration needs at least one prompt")
    classes = CALIBRATION_SCOPES[scope]
    acc = NormAccumulator()
    tokens = 0

    def observe(layer, name, vec, cls):
        nonlocal tokens
        if cls not in classes:
            return
        acc.add((layer, name), vec)
        # every token runs layer 0 under the dense policy: count it there once
        if layer == 0 and name == "wq":
            tokens += 1

    # the last emitted token is never run, hence the +1
    max_new = CALIBRATION_DECODE_STEPS + 1 if TokenClass.GENERATED in classes else 0
    for prompt in prompts:
        generate(model, ComputePolicy(), prompt, max_new, observer=observe)
    if tokens == 0:
        raise CalibrationError(f"calibration scope {scope!r} selected no tokens across {len(prompts)} prompts")
    return CalibrationStats(acc.norms(), tokens, scope)


def wanda_scores(weight: np.ndarray, norms: np.ndarray) -> np.ndarray:
    weight = np.asarray(weight)
    norms = np.asarray(norms)
    if weight.ndim != 2 or norms.shape != (weight.shape[1],):
        raise ShapeError(f"wanda_scores: weight {weight.shape} vs norms {norms.shape}")
    return np.abs(weight).astype(np.float64) * norms.astype(np.float64)[None, :]


def prune_count(sparsity: float, in_dim: int) -> int:
    if not 0.0 <= sparsity < 1.0:
        raise ValueError(f"sparsity must be in [0, 1), got {sparsity}")
    return math.floor(sparsity * in_dim)


def prune_per_output(scores: np.ndarray, sparsity: float) -> np.ndarray:
    """Zero the ``floor(s*in)`` lowest scores of every row.

    Among equal scores the higher column index is pruned first.
    """
    scores = np.asarray(scores)
    out_dim, in_dim = scores.shape
    k = prune_count(sparsity, in_dim)
    mask = np.ones((out_dim, in_dim), dtype=np.uint8)
    if k == 0:
        return mask
    cols = np.arange(in_dim)
    for i in range(out_dim):
        order = np.lexsort((-cols, scores[i]))
        mask[i, order[:k]] = 0
    return mask


def magnitude_mask(weight: np.ndarray, sparsity: float) -> np.ndarray:
    return prune_per_output(np.abs(weight), sparsity)


def random_mask(weight: np.ndarray, sparsity: float, seed: int) -> np.ndarray:
    """Fisher-Yates over column indices per row, one SplitMix64 stream across rows."""
    out_dim, in_dim = np.shape(weight)
    k = prune_count(sparsity, in_dim)
    mask = np.ones((out_dim, in_dim), dtype=np.uint8)
    if k == 0:
        return mask
    rng = SplitMix64(seed)
    for i in range(out_dim):
        perm = list(range(in_dim))
        for j in range(in_dim - 1, 0, -1):
            r = rng.next() % (j + 1)
            perm[j], perm[r] = perm[r], perm[j]
        mask[i, perm[:k]] = 0
    return mask


def model_masks(
    model: Model,
    method: str,
    sparsity: float,
    stats: CalibrationStats | None = None,
    seed: int = 0,
) -> dict[tuple[int, str], np.ndarray]:
    """Masks for all six linears of every block, shaped like the stored weights."""
    if method not in METHODS:
        raise ValueError(f"unknown pruning method {method!r}")
    if method == "wanda" and stats is None:
        raise ValueError("wanda needs calibration statistics")
    seeds = SplitMix64(seed)
    masks = {}
    for layer, block in enumerate(model.blocks):
        for name in LINEAR_NAMES:
            w = getattr(block, name).T  # (out, in)
            if method == "wanda":
                m = prune_per_output(wanda_scores(w, stats.norms[layer, name]), sparsity)
            elif method == "magnitude":
                m = magnitude_mask(w, sparsity)
            else:
                m = random_mask(w, sparsity, seeds.next())
            masks[layer, name] = np.ascontiguousarray(m.T)
    return masks


@dataclass
class PrunedModel:
    model: Model
    layer_sparsity: dict[tuple[int, str], float]

    @property
    def overall_sparsity(self) -> float:
        sizes = {k: getattr(self.model.blocks[k[0]], k[1]).size for k in self.layer_sparsity}
        zeros = sum(self.layer_sparsity[k] * sizes[k] for k in sizes)
        return zeros / sum(sizes.values()) if sizes else 0.0

    def report(self) -> dict:
        return {
            "overall_sparsity": self.overall_sparsity,
            "layers": {f"blocks.{l}.{n}": s for (l, n), s in sorted(self.layer_sparsity.items())},
        }


_BIAS = {"fc1": "fc1_bias", "fc2": "fc2_bias"}


def apply_masks(model: Model, masks: dict[tuple[int, str], np.ndarray]) -> PrunedModel:
    """``W * M`` for every masked linear.

    An output unit whose whole mask column is zero is removed together with
    its bias; for any sparsity below 1 no such unit exists.
    """
    blocks = []
    report = {}
    for layer, block in enumerate(model.blocks):
        changes = {}
        for name in LINEAR_NAMES:
            if (layer, name) not in masks:
                continue
            w = getattr(block, name)
            m = np.asarray(masks[layer, name])
            if m.shape != w.shape:
                raise ShapeError(f"mask for blocks.{layer}.{name} has shape {m.shape}, weight {w.shape}")
            if np.any((m != 0) & (m != 1)):
                raise ValueError(f"mask for blocks.{layer}.{name} is not binary")
            changes[name] = (w * m.astype(DTYPE)).astype(DTYPE)
            if name in _BIAS:
                dead = ~m.astype(bool).any(axis=0)
                if dead.any():
                    bias = changes.get(_BIAS[name], getattr(block, _BIAS[name])).copy()
                    bias[dead] = 0
                    changes[_BIAS[name]] = bias
            report[layer, name] = float(np.count_nonzero(m == 0)) / m.size
        blocks.append(dataclasses.replace(block, **changes) if changes else block)
    return PrunedModel(model.with_blocks(blocks), report)
