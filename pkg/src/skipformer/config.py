"""Run configuration files (JSON).

Example::

    {
      "model": {"synthetic": {"n_layers": 8, "d_model": 16, "n_heads": 2, "d_ff": 64,
                              "vocab_size": 32, "max_positions": 64, "seed": 7}},
      "policy": {"mode": "skip_block", "start_layer": 0, "interval": 2, "scope": "all"},
      "prompt": {"perceptual_path": "image.pemb", "text_ids": [1, 5, 9]},
      "generation": {"max_new_tokens": 8, "eos_id": null},
      "output": {"path": "run.json"}
    }

Relative paths resolve against the directory of the config file.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .formats import load_model, load_perceptual
from .model import Model, ModelConfig, synth_model
from .policy import ComputePolicy, PolicyError
from .runtime import PromptInput


class ConfigError(ValueError):
    """The run configuration is invalid; the message names the field."""


@dataclass
class RunConfig:
    model_path: Path | None = None
    synthetic: ModelConfig | None = None
    seed: int = 0
    policy: ComputePolicy = field(default_factory=ComputePolicy)
    perceptual_path: Path | None = None
    text_ids: tuple[int, ...] = (1,)
    max_new_tokens: int = 8
    eos_id: int | None = None
    output_path: Path | None = None

    def load_model(self) -> Model:
        if self.model_path is not None:
            return load_model(self.model_path)
        return synth_model(self.synthetic, self.seed)

    def load_prompt(self, model: Model) -> PromptInput:
        d = model.config.d_model
        perceptual = None
        if self.perceptual_path is not None:
            if not self.perceptual_path.is_file():
                raise FileNotFoundError(f"prompt.perceptual_path: no such file {str(self.perceptual_path)!r}")
            perceptual = load_perceptual(self.perceptual_path, d)
        vocab = model.config.vocab_size
        bad = [t for t in self.text_ids if not 0 <= t < vocab]
        if bad:
            raise ConfigError(f"prompt.text_ids: ids {bad} outside vocabulary of {vocab}")
        return PromptInput.make(perceptual, self.text_ids, d)


def _int(section: dict, key: str, where: str, default=None, allow_none=False):
    value = section.get(key, default)
    if value is None and allow_none:
        return None
    if not isinstance(value, int) or isinstance(value, bool):
        raise ConfigError(f"{where}.{key}: expected an integer, got {value!r}")
    return value


def parse_config(raw: dict, base_dir: Path = Path(".")) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config: top level must be a JSON object")
    unknown = set(raw) - {"model", "policy", "prompt", "generation", "output"}
    if unknown:
        raise ConfigError(f"config: unknown sections {sorted(unknown)}")
    rc = RunConfig()

    model = raw.get("model")
    if not isinstance(model, dict):
        raise ConfigError("model: required object with either 'path' or 'synthetic'")
    if ("path" in model) == ("synthetic" in model):
        raise ConfigError("model: exactly one of 'path' or 'synthetic' must be given")
    if "path" in model:
        if not isinstance(model["path"], str):
            raise ConfigError("model.path: expected a string")
        rc.model_path = base_dir / model["path"]
    else:
        syn = dict(model["synthetic"]) if isinstance(model["synthetic"], dict) else None
        if syn is None:
            raise ConfigError("model.synthetic: expected an object")
        rc.seed = _int(syn, "seed", "model.synthetic", 0)
        syn.pop("seed", None)
        try:
            rc.synthetic = ModelConfig.from_dict(syn)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"model.synthetic: {exc}") from None

    try:
        rc.policy = ComputePolicy.from_dict(raw.get("policy", {}))
    except PolicyError as exc:
        raise ConfigError(str(exc) if str(exc).startswith("policy") else f"policy: {exc}") from None

    prompt = raw.get("prompt", {})
    if not isinstance(prompt, dict):
        raise ConfigError("prompt: expected an object")
    if prompt.get("perceptual_path") is not None:
        if not isinstance(prompt["perceptual_path"], str):
            raise ConfigError("prompt.perceptual_path: expected a string")
        rc.perceptual_path = base_dir / prompt["perceptual_path"]
    ids = prompt.get("text_ids", [1])
    if not isinstance(ids, list) or any(not isinstance(t, int) or isinstance(t, bool) for t in ids):
        raise ConfigError("prompt.text_ids: expected a list of integers")
    rc.text_ids = tuple(ids)
    if not rc.text_ids and rc.perceptual_path is None:
        raise ConfigError("prompt: needs text_ids or perceptual_path")

    gen = raw.get("generation", {})
    rc.max_new_tokens = _int(gen, "max_new_tokens", "generation", 8)
    if rc.max_new_tokens < 0:
        raise ConfigError("generation.max_new_tokens: must be >= 0")
    rc.eos_id = _int(gen, "eos_id", "generation", None, allow_none=True)

    out = raw.get("output", {})
    if out.get("path") is not None:
        rc.output_path = base_dir / out["path"]
    return rc


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: {path} is not valid JSON ({exc})") from None
    return parse_config(raw, path.parent)
