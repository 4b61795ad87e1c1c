"""``skipformer`` command line.

Exit codes: 0 success, 1 validation error, 2 runtime or file-format error,
3 runtime/oracle comparison failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config
from .cost import predict_flops, trace_flops
from .formats import FormatError, load_model, load_perceptual, save_masks, save_model
from .model import ContractError, Model, ModelConfig, synth_model, unembed
from .numerics import NumericError
from .oracle import oracle_forward
from .policy import (
    ComputePolicy,
    Mode,
    PolicyError,
    SCOPES,
    resolve_schedule,
    skipped_fraction,
)
from .pruning import CALIBRATION_SCOPES, CalibrationError, apply_masks, collect_calibration, model_masks
from .runtime import CapacityError, PromptInput, classify_tokens, embed, embed_prompt, generate

log = logging.getLogger("skipformer")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_MISMATCH = 0, 1, 2, 3


class ComparisonFailure(Exception):
    pass


def _configure_logging() -> None:
    level = os.environ.get("SKIPFORMER_LOG", "error").lower()
    logging.basicConfig(
        level={"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}.get(level, logging.ERROR),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2) + "\n"


def _emit(text: str, path: Path | None) -> None:
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def _run_config(args) -> RunConfig:
    if args.config is None:
        raise ConfigError("--config: this command needs a run config file")
    rc = load_config(args.config)
    if args.seed is not None:
        rc.seed = args.seed
    if args.output is not None:
        rc.output_path = Path(args.output)
    return rc


def _trace_json(trace) -> list[dict]:
    return [
        {
            "position": r.position,
            "layer": r.layer,
            "class": r.token_class.value,
            "action": str(r.action),
            "context_sizes": list(r.context_sizes),
            "writes_kv": r.writes_kv,
        }
        for r in trace
    ]


# --- subcommands ------------------------------------------------------------


def cmd_synth(args) -> int:
    if args.config is not None:
        rc = _run_config(args)
        if rc.synthetic is None:
            raise ConfigError("model.synthetic: synth needs a synthetic model section")
        cfg, seed = rc.synthetic, rc.seed
    else:
        try:
            cfg = ModelConfig(
                args.n_layers, args.d_model, args.n_heads, args.d_ff, args.vocab_size,
                args.max_positions, args.activation,
            )
        except ValueError as exc:
            raise ConfigError(f"synth: {exc}") from None
        seed = args.seed or 0
    if args.output is None:
        raise ConfigError("--output: synth needs an output path")
    save_model(synth_model(cfg, seed), args.output)
    print(f"wrote {cfg.n_layers}-layer model (seed {seed}) to {args.output}")
    return EXIT_OK


def cmd_generate(args) -> int:
    rc = _run_config(args)
    model = rc.load_model()
    prompt = rc.load_prompt(model)
    result = generate(model, rc.policy, prompt, rc.max_new_tokens, rc.eos_id)
    report = trace_flops(result.trace, model.config)
    schedule = resolve_schedule(rc.policy, model.config.n_layers)
    doc = {
        "policy": rc.policy.to_dict(),
        "tokens": result.output_token_ids,
        "skipped_fraction": skipped_fraction(schedule),
        "flops": report.to_dict(),
        "trace": _trace_json(result.trace),
    }
    text = _dumps(doc)
    if rc.output_path is not None:
        _emit(text, rc.output_path)
    if args.json and rc.output_path is None:
        _emit(text, None)
    else:
        print(f"tokens: {' '.join(map(str, result.output_token_ids))}")
        print(f"skipped fraction: {skipped_fraction(schedule):.4f}")
        print(report.to_table())
    return EXIT_OK


def _cli_policy(args) -> tuple[ComputePolicy, int]:
    if args.config is not None:
        rc = _run_config(args)
        n_layers = rc.synthetic.n_layers if rc.synthetic is not None else rc.load_model().config.n_layers
        policy = rc.policy
    else:
        policy = ComputePolicy(Mode(args.mode), args.start_layer, args.interval, SCOPES[args.scope])
        n_layers = args.n_layers
    if args.n_layers is not None:
        n_layers = args.n_layers
    if n_layers is None:
        raise ConfigError("--n-layers: required without --config")
    return policy, n_layers


def cmd_schedule(args) -> int:
    policy, n_layers = _cli_policy(args)
    schedule = resolve_schedule(policy, n_layers)
    frac = skipped_fraction(schedule)
    if args.json:
        _emit(_dumps({
            "policy": policy.to_dict(),
            "n_layers": n_layers,
            "actions": [str(a) for a in schedule.in_scope_actions],
            "skipped_fraction": frac,
        }), None)
        return EXIT_OK
    print(f"{'layer':>5}  action")
    for l, a in enumerate(schedule.in_scope_actions):
        label = str(a).upper().replace("SKIP_BLOCK", "SKIP")
        print(f"{l:>5}  {label}")
    print(f"skipped fraction: {frac:.4f}")
    return EXIT_OK


def _calibration_prompts(directory: Path, d_model: int) -> list[PromptInput]:
    if not directory.is_dir():
        raise FileNotFoundError(f"--calib-dir: {directory} is not a directory")
    prompts = []
    for path in sorted(directory.glob("*.json")):
        entry = json.loads(path.read_text(encoding="utf-8"))
        perceptual = None
        if entry.get("perceptual_path"):
            perceptual = load_perceptual(directory / entry["perceptual_path"], d_model)
        prompts.append(PromptInput.make(perceptual, entry.get("text_ids", []), d_model))
    if not prompts:
        raise ConfigError(f"--calib-dir: no *.json prompt files in {directory}")
    return prompts


def cmd_prune(args) -> int:
    rc = _run_config(args)
    if rc.output_path is None:
        raise ConfigError("--output: prune needs an output path for the pruned model")
    model = rc.load_model()
    stats = None
    if args.method == "wanda":
        if args.calib_dir is None:
            raise ConfigError("--calib-dir: wanda needs calibration prompts")
        stats = collect_calibration(model, _calibration_prompts(Path(args.calib_dir), model.config.d_model),
                                    args.calib_scope)
    masks = model_masks(model, args.method, args.sparsity, stats, seed=rc.seed)
    pruned = apply_masks(model, masks)
    out = Path(rc.output_path)
    save_model(pruned.model, out)
    masks_path = Path(args.masks_output) if args.masks_output else out.with_suffix(".masks.mllw")
    save_masks(masks, model.config, masks_path, args.sparsity)
    report = {
        "method": args.method,
        "sparsity": args.sparsity,
        "calibration_scope": args.calib_scope if stats else None,
        "calibration_tokens": stats.token_count if stats else 0,
        **pruned.report(),
    }
    report_path = out.with_suffix(".report.json")
    report_path.write_text(_dumps(report), encoding="utf-8")
    print(f"pruned model: {out}\nmasks: {masks_path}\nreport: {report_path}")
    print(f"overall sparsity: {pruned.overall_sparsity:.6f}")
    return EXIT_OK


def _corrupt_layer(layer: int):
    def hook(cache):
        if not 0 <= layer < len(cache):
            raise ConfigError(f"--corrupt-cache-layer: layer {layer} out of range")
        cache.keys[layer] = [k + np.float32(1.0) for k in cache.keys[layer]]
        cache.values[layer] = [v + np.float32(1.0) for v in cache.values[layer]]
    return hook


def compare_one(model, policy, prompt, max_new, tolerance, cache_hook=None) -> dict:
    """Run engine and oracle; on mismatch locate the first diverging (position, layer)."""
    from .oracle import oracle_generate

    run = generate(model, policy, prompt, max_new, record_hidden=True, cache_hook=cache_hook)
    ref = oracle_generate(model, policy, prompt, max_new)
    devs = [float(np.max(np.abs(a - b))) for a, b in zip(run.step_logits, ref.step_logits)]
    worst = max(devs, default=0.0)
    first_step = next(
        (i for i, (d, a, b) in enumerate(zip(devs, run.output_token_ids, ref.output_token_ids))
         if d > tolerance or a != b),
        None,
    )
    ok = first_step is None and run.output_token_ids == ref.output_token_ids
    out = {
        "policy": policy.to_dict(),
        "ok": ok,
        "worst_logit_deviation": worst,
        "first_divergence_step": first_step,
        "first_divergence_position": None if first_step is None else len(prompt) + first_step - 1,
        "first_divergence_layer": None,
    }
    if not ok:
        # replay the engine's own token sequence through the oracle, layer by layer
        rows = embed_prompt(model, prompt)
        classes = classify_tokens(prompt, len(run.layer_hidden) - len(prompt))
        for i, tok in enumerate(run.output_token_ids[: len(run.layer_hidden) - len(prompt)]):
            rows.append(embed(model, tok, len(prompt) + i))
        schedule = resolve_schedule(policy, model.config.n_layers)
        _, hidden = oracle_forward(model, schedule, policy, classes, np.stack(rows), return_hidden=True)
        for p, per_layer in enumerate(run.layer_hidden):
            bad = [l for l, h in enumerate(per_layer) if float(np.max(np.abs(h - hidden[l][p]))) > tolerance]
            if bad:
                out["first_divergence_position"] = p
                out["first_divergence_layer"] = bad[0]
                break
    return out


def _all_policies(base: ComputePolicy) -> list[ComputePolicy]:
    policies = []
    for mode in Mode:
        for scope in ("generated", "all"):
            interval = max(base.interval, 2) if mode is Mode.PARALLEL_BLOCKS else base.interval
            policies.append(ComputePolicy(mode, base.start_layer, interval, SCOPES[scope]))
    return policies


def cmd_compare(args) -> int:
    rc = _run_config(args)
    model = rc.load_model()
    prompt = rc.load_prompt(model)
    max_new = args.max_new if args.max_new is not None else rc.max_new_tokens
    hook = _corrupt_layer(args.corrupt_cache_layer) if args.corrupt_cache_layer is not None else None
    policies = _all_policies(rc.policy) if args.all_policies else [rc.policy]
    results = [compare_one(model, p, prompt, max_new, args.tolerance, hook) for p in policies]
    if args.json:
        _emit(_dumps(results), rc.output_path)
    for r in results:
        pol = r["policy"]
        status = "ok" if r["ok"] else "DIVERGED"
        line = f"{pol['mode']:>16} scope={pol['scope']:<9} worst={r['worst_logit_deviation']:.3e} {status}"
        if not r["ok"]:
            line += (f" first divergence: step {r['first_divergence_step']}"
                     f" position {r['first_divergence_position']} layer {r['first_divergence_layer']}")
        print(line)
    if not all(r["ok"] for r in results):
        raise ComparisonFailure("engine and oracle disagree")
    return EXIT_OK


def sweep_rows(model: Model, base: ComputePolicy, prompt: PromptInput, max_new: int,
               axis: str, values: list[int]):
    dense = generate(model, ComputePolicy(), prompt, max_new)
    dense_final = dense.step_logits[-1] if dense.step_logits else unembed(model, dense.final_hidden[-1])
    rows = []
    for v in values:
        changes = {"interval": v} if axis == "interval" else {"start_layer": v}
        policy = dataclasses.replace(base, **changes)
        run = generate(model, policy, prompt, max_new)
        final = run.step_logits[-1] if run.step_logits else unembed(model, run.final_hidden[-1])
        report = trace_flops(run.trace, model.config)
        schedule = resolve_schedule(policy, model.config.n_layers)
        rows.append({
            axis: v,
            "skipped_fraction": skipped_fraction(schedule),
            "flops_ratio": report.reduction_ratio,
            "depth": report.sequential_depth,
            "logit_deviation": float(np.max(np.abs(final - dense_final))),
        })
    return rows


def cmd_sweep(args) -> int:
    rc = _run_config(args)
    try:
        values = [int(v) for v in args.values.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"--values: expected comma-separated integers, got {args.values!r}") from None
    if not values:
        raise ConfigError("--values: empty value list")
    model = rc.load_model()
    prompt = rc.load_prompt(model)
    rows = sweep_rows(model, rc.policy, prompt, rc.max_new_tokens, args.axis, values)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    _emit(buf.getvalue(), rc.output_path)
    return EXIT_OK


# --- entry point ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    def global_flags(default):
        # the copy attached to subcommands must not clobber values given before the subcommand
        g = argparse.ArgumentParser(add_help=False)
        g.add_argument("--config", type=Path, default=default, help="run config JSON")
        g.add_argument("--seed", type=int, default=default, help="override the model/pruning seed (u64)")
        g.add_argument("--output", type=Path, default=default, help="output path")
        g.add_argument("--json", action="store_true", default=default or False, help="print JSON instead of a table")
        return g

    parser = argparse.ArgumentParser(prog="skipformer", parents=[global_flags(None)],
                                     description=__doc__.split("\n")[0])
    common = global_flags(argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a seeded synthetic model")
    p.add_argument("--n-layers", type=int, default=8)
    p.add_argument("--d-model", type=int, default=16)
    p.add_argument("--n-heads", type=int, default=2)
    p.add_argument("--d-ff", type=int, default=64)
    p.add_argument("--vocab-size", type=int, default=32)
    p.add_argument("--max-positions", type=int, default=64)
    p.add_argument("--activation", choices=["relu", "gelu"], default="relu")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("generate", parents=[common], help="greedy generation under a policy")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("schedule", parents=[common], help="print the per-layer action table")
    p.add_argument("--mode", choices=[m.value for m in Mode], default="dense")
    p.add_argument("--start-layer", type=int, default=0)
    p.add_argument("--interval", type=int, default=1)
    p.add_argument("--scope", choices=sorted(SCOPES), default="generated")
    p.add_argument("--n-layers", type=int)
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser("prune", parents=[common], help="prune a model and write masks")
    p.add_argument("--method", choices=["wanda", "magnitude", "random"], required=True)
    p.add_argument("--sparsity", type=float, required=True)
    p.add_argument("--calib-scope", choices=sorted(CALIBRATION_SCOPES), default="P+T")
    p.add_argument("--calib-dir", help="directory of *.json calibration prompts")
    p.add_argument("--masks-output", help="mask container path (default: <output>.masks.mllw)")
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("compare", parents=[common], help="engine vs full-recompute oracle")
    p.add_argument("--max-new", type=int)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--all-policies", action="store_true")
    p.add_argument("--corrupt-cache-layer", type=int, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("sweep", parents=[common], help="CSV over interval or start layer")
    p.add_argument("--axis", choices=["interval", "start_layer"], required=True)
    p.add_argument("--values", required=True, help="comma-separated integers")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: list[str] | None = None) -> int:
    _configure_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_VALIDATION
    try:
        return args.func(args)
    except (ConfigError, PolicyError, CalibrationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except ComparisonFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except (FormatError, OSError, CapacityError, NumericError, ContractError, ValueError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
