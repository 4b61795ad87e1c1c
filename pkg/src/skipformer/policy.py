"""Static compute policies resolved into per-layer action tables.

A policy picks the affected layers ``{l : sl <= l < N, (l - sl) % I == 0}``
and the action applied there.  Token scope decides which token classes see
the scheduled action; every other token executes the dense block.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass


class PolicyError(ValueError):
    """The policy is invalid for the model it is applied to."""


class TokenClass(str, enum.Enum):
    PERCEPTUAL = "perceptual"
    TEXT = "text"
    GENERATED = "generated"


GENERATED_ONLY = frozenset({TokenClass.GENERATED})
ALL_TOKENS = frozenset(TokenClass)
SCOPES = {"generated": GENERATED_ONLY, "all": ALL_TOKENS}


class Mode(str, enum.Enum):
    DENSE = "dense"
    SKIP_BLOCK = "skip_block"
    SKIP_FFN = "skip_ffn"
    SKIP_SA = "skip_sa"
    PARALLEL_FFN_SA = "parallel_ffn_sa"
    PARALLEL_BLOCKS = "parallel_blocks"


class ActionKind(str, enum.Enum):
    EXECUTE = "execute"
    SKIP_BLOCK = "skip_block"
    SKIP_FFN = "skip_ffn"
    SKIP_SA = "skip_sa"
    PARALLEL_FFN_SA = "parallel_ffn_sa"
    PARALLEL_LEAD = "parallel_lead"
    PARALLEL_ABSORBED = "parallel_absorbed"


@dataclass(frozen=True)
class LayerAction:
    kind: ActionKind
    partner: int | None = None  # set only for PARALLEL_LEAD

    def __str__(self) -> str:
        if self.kind in (ActionKind.PARALLEL_LEAD, ActionKind.PARALLEL_ABSORBED):
            return f"{self.kind.value}({self.partner})"
        return self.kind.value

    @property
    def runs_sa(self) -> bool:
        """Whether a token taking this action writes K/V at this layer."""
        return self.kind not in (ActionKind.SKIP_BLOCK, ActionKind.SKIP_SA)


EXECUTE = LayerAction(ActionKind.EXECUTE)
_MODE_ACTION = {
    Mode.SKIP_BLOCK: LayerAction(ActionKind.SKIP_BLOCK),
    Mode.SKIP_FFN: LayerAction(ActionKind.SKIP_FFN),
    Mode.SKIP_SA: LayerAction(ActionKind.SKIP_SA),
    Mode.PARALLEL_FFN_SA: LayerAction(ActionKind.PARALLEL_FFN_SA),
}
SKIP_MODES = (Mode.SKIP_BLOCK, Mode.SKIP_FFN, Mode.SKIP_SA)


@dataclass(frozen=True)
class ComputePolicy:
    mode: Mode = Mode.DENSE
    start_layer: int = 0
    interval: int = 1
    scope: frozenset = GENERATED_ONLY

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        object.__setattr__(self, "scope", frozenset(TokenClass(c) for c in self.scope))
        if not self.scope:
            raise PolicyError("scope must contain at least one token class")
        if self.start_layer < 0:
            raise PolicyError(f"start_layer must be >= 0, got {self.start_layer}")
        if self.interval < 1:
            raise PolicyError(f"interval must be >= 1, got {self.interval}")
        if self.mode is Mode.PARALLEL_BLOCKS and self.interval < 2:
            raise PolicyError("parallel_blocks needs interval >= 2 so pairs cannot overlap")

    @classmethod
    def from_dict(cls, d: dict) -> "ComputePolicy":
        unknown = set(d) - {"mode", "start_layer", "interval", "scope"}
        if unknown:
            raise PolicyError(f"unknown policy fields: {sorted(unknown)}")
        try:
            mode = Mode(d.get("mode", "dense"))
        except ValueError:
            raise PolicyError(f"policy.mode: unknown mode {d.get('mode')!r}") from None
        scope_name = d.get("scope", "generated")
        if scope_name not in SCOPES:
            raise PolicyError(f"policy.scope: expected 'generated' or 'all', got {scope_name!r}")
        for key in ("start_layer", "interval"):
            if key in d and (not isinstance(d[key], int) or isinstance(d[key], bool)):
                raise PolicyError(f"policy.{key}: expected an integer, got {d[key]!r}")
        return cls(mode, d.get("start_layer", 0), d.get("interval", 1), SCOPES[scope_name])

    def to_dict(self) -> dict:
        scope = next((name for name, s in SCOPES.items() if s == self.scope), None)
        return {
            "mode": self.mode.value,
            "start_layer": self.start_layer,
            "interval": self.interval,
            "scope": scope if scope is not None else sorted(c.value for c in self.scope),
        }


@dataclass(frozen=True)
class LayerSchedule:
    n_layers: int
    mode: Mode
    in_scope_actions: tuple[LayerAction, ...]

    def affected_layers(self) -> list[int]:
        return [l for l, a in enumerate(self.in_scope_actions) if a.kind is not ActionKind.EXECUTE]


def affected_set(policy: ComputePolicy, n_layers: int) -> list[int]:
    if policy.mode is Mode.DENSE:
        return []
    return [l for l in range(policy.start_layer, n_layers) if (l - policy.start_layer) % policy.interval == 0]


def resolve_schedule(policy: ComputePolicy, n_layers: int) -> LayerSchedule:
    if n_layers < 1:
        raise PolicyError("n_layers must be >= 1")
    if policy.mode is not Mode.DENSE and policy.start_layer > n_layers:
        raise PolicyError(f"start_layer {policy.start_layer} exceeds n_layers {n_layers}")
    actions = [EXECUTE] * n_layers
    affected = affected_set(policy, n_layers)
    if policy.mode is Mode.PARALLEL_BLOCKS:
        absorbed: set[int] = set()
        for l in affected:
            # a lead without a successor layer stays a plain block
            if l in absorbed or l + 1 >= n_layers:
                continue
            actions[l] = LayerAction(ActionKind.PARALLEL_LEAD, l + 1)
            actions[l + 1] = LayerAction(ActionKind.PARALLEL_ABSORBED, l)
            absorbed.add(l + 1)
    elif policy.mode is not Mode.DENSE:
        for l in affected:
            actions[l] = _MODE_ACTION[policy.mode]
    return LayerSchedule(n_layers, policy.mode, tuple(actions))


def action_for(schedule: LayerSchedule, layer: int, token_class: TokenClass, scope) -> LayerAction:
    if not 0 <= layer < schedule.n_layers:
        raise IndexError(f"layer {layer} outside 0..{schedule.n_layers - 1}")
    if token_class not in scope:
        return EXECUTE
    return schedule.in_scope_actions[layer]


def skipped_fraction(schedule: LayerSchedule) -> float:
    """Share of blocks (or of FFN / SA sub-layers) removed; 0 for dense and parallel modes."""
    if schedule.mode not in SKIP_MODES:
        return 0.0
    return len(schedule.affected_layers()) / schedule.n_layers
