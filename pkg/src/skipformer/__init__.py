"""Structural compute skipping and pruning for decoder-only transformer inference."""

from .model import Model, ModelConfig, synth_model
from .policy import ALL_TOKENS, GENERATED_ONLY, ComputePolicy, Mode, TokenClass, resolve_schedule
from .runtime import PromptInput, generate

__all__ = [
    "ALL_TOKENS",
    "GENERATED_ONLY",
    "ComputePolicy",
    "Mode",
    "Model",
    "ModelConfig",
    "PromptInput",
    "TokenClass",
    "generate",
    "resolve_schedule",
    "synth_model",
]
