"""Operator command line: train, eval, ablate, gradcheck, prompt, synth.

Configuration comes from a TOML file ([model] and [train] tables) with CLI
flags taking precedence over the file, which takes precedence over defaults.
Every run that writes outputs also writes a run manifest (resolved config,
seed, input hashes, tool version, timestamps) sufficient to reproduce it.

Exit codes: 0 success, 1 internal failure, 2 usage/input error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

try:
    import tomllib  # py311+
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from . import __version__
from . import data as data_io
from . import prompts as prompts_mod
from .model import (
    ABLATION_MODES, ConfigError, TRAITS, build_model_config,
)
from .tensor import RngState
from .training import (
    TrainConfig, TrainingDiverged, aggregate_mse, ensemble_predict, fmt4,
    grid_search, train_trait,
)
from .prompts import PromptError

DATA_DIR_ENV = "TRAITFUSION_DATA_DIR"

_INPUT_ERRORS = (
    data_io.DatasetFormatError,
    data_io.DataValidationError,
    data_io.CheckpointError,
    ConfigError,
    PromptError,
)


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Shared plumbing
# ---------------------------------------------------------------------------


def _resolve_input(path_str: str) -> Path:
    """Find an input file, falling back to $TRAITFUSION_DATA_DIR for
    relative paths."""
    p = Path(path_str)
    if p.exists():
        return p
    env = os.environ.get(DATA_DIR_ENV)
    if env and not p.is_absolute():
        candidate = Path(env) / p
        if candidate.exists():
            return candidate
    raise UsageError(f"input file not found: {path_str}")


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def _load_config_file(path_str: str | None) -> dict:
    if path_str is None:
        return {}
    path = _resolve_input(path_str)
    with open(path, "rb") as fh:
        try:
            return tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise UsageError(f"config file {path} is not valid TOML: {exc}") from exc


def _parse_traits(arg: str | None) -> list[str]:
    if not arg:
        return list(TRAITS)
    traits = [t.strip() for t in arg.split(",") if t.strip()]
    for t in traits:
        if t not in TRAITS:
            raise UsageError(f"unknown trait {t!r}; valid traits: {', '.join(TRAITS)}")
    return traits


def _resolve_train_config(file_cfg: dict, args) -> TrainConfig:
    values = dict(file_cfg.get("train", {}))
    for key in ("lr", "batch_size", "epochs", "ema_decay", "k_folds", "seed",
                "jobs", "dropout_cwp", "dropout_cmc", "dropout_tfe"):
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    if getattr(args, "normalize_labels", False):
        values["normalize_labels"] = True
    try:
        return TrainConfig.from_dict(values) if "betas" in values else TrainConfig(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad training configuration: {exc}") from exc


def _resolve_model_config(file_cfg: dict, args, dataset, trait: str):
    section = dict(file_cfg.get("model", {}))
    if getattr(args, "ensemble_size", None) is not None:
        section["ensemble_size"] = args.ensemble_size
    if dataset:
        dims = dataset[0].feature_dims()
        section.setdefault("text_dim", dims.get(f"text_{trait}"))
        section.setdefault("audio_dim", dims.get("audio"))
        section.setdefault("video_dim", dims.get("video"))
    if "head_hidden" in section:
        section["head_hidden"] = tuple(section["head_hidden"])
    try:
        return build_model_config(trait, **section)
    except TypeError as exc:
        raise UsageError(f"bad [model] configuration: {exc}") from exc


def _write_manifest(path: Path, command: str, args, config_snapshot: dict,
                    inputs: list[Path], started: str) -> None:
    manifest = {
        "command": command,
        "arguments": {k: v for k, v in vars(args).items() if k != "func"},
        "config": config_snapshot,
        "input_hashes": {str(p): _sha256(p) for p in inputs if p and p.exists()},
        "tool_version": __version__,
        "started_at": started,
        "finished_at": datetime.now(timezone.utc).isoformat(),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _render_trait_table(rows: list[tuple[str, dict[str, float], int | None]],
                        traits: list[str]) -> str:
    """Rows of (label, per-trait MSE, optional param count), 4-decimal cells,
    plus an Avg column when all four traits are present."""
    show_avg = set(traits) == set(TRAITS)
    header = ["variant"] + traits + (["Avg"] if show_avg else [])
    if any(count is not None for _, _, count in rows):
        header.append("params")
    lines = ["  ".join(f"{h:<18}" if i == 0 else f"{h:>8}" for i, h in enumerate(header))]
    for label, mses, count in rows:
        cells = [f"{label:<18}"]
        cells += [f"{fmt4(mses[t]):>8}" if t in mses else f"{'-':>8}" for t in traits]
        if show_avg:
            cells.append(f"{fmt4(aggregate_mse(mses)):>8}")
        if any(c is not None for _, _, c in rows):
            cells.append(f"{count if count is not None else '-':>8}")
        lines.append("  ".join(cells))
    return "\n".join(lines)


def _parse_grid(pairs: list[str] | None) -> dict[str, list]:
    if not pairs:
        return {}
    grid: dict[str, list] = {}
    for pair in pairs:
        if "=" not in pair:
            raise UsageError(f"--grid expects KEY=V1,V2,... got {pair!r}")
        key, _, raw = pair.partition("=")
        values = []
        for item in raw.split(","):
            try:
                values.append(json.loads(item))
            except json.JSONDecodeError:
                values.append(item)
        grid[key.strip()] = values
    return grid


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    started = _now()
    data_path = _resolve_input(args.data)
    file_cfg = _load_config_file(args.config)
    dataset = data_io.load_dataset(data_path)
    if not dataset:
        raise UsageError(f"dataset {data_path} is empty")
    traits = _parse_traits(args.trait)
    out = Path(args.out)

    per_trait_mse: dict[str, float] = {}
    config_snapshot: dict = {"traits": traits, "variant": args.variant}
    for trait in traits:
        model_cfg = _resolve_model_config(file_cfg, args, dataset, trait)
        train_cfg = _resolve_train_config(file_cfg, args)
        grid = _parse_grid(args.grid)
        trait_dir = out / trait
        if grid:
            rows = grid_search(dataset, model_cfg, grid, train_cfg,
                               out_path=trait_dir / "grid.jsonl",
                               log_fn=print if args.verbose else None)
            best = rows[0]["params"]
            train_fields = set(TrainConfig.__dataclass_fields__)
            train_cfg = dataclasses.replace(
                train_cfg, **{k: v for k, v in best.items() if k in train_fields})
            if "ensemble_size" in best:
                model_cfg = dataclasses.replace(model_cfg, ensemble_size=best["ensemble_size"])
            print(f"[{trait}] grid search best cell: {best}")
        _, report = train_trait(dataset, model_cfg, train_cfg, variant=args.variant,
                                out_dir=trait_dir,
                                log_fn=print if args.verbose else None)
        per_trait_mse[trait] = report.final_mse
        config_snapshot[trait] = {
            "model": model_cfg.to_dict(),
            "train": train_cfg.to_dict(),
        }
        print(f"[{trait}] validation MSE {fmt4(report.final_mse)} "
              f"(best epochs {report.best_epoch})")

    print(_render_trait_table([("trained", per_trait_mse, None)], traits))
    _write_manifest(out / "manifest.json", "train", args, config_snapshot,
                    [data_path] + ([_resolve_input(args.config)] if args.config else []),
                    started)
    return 0


def cmd_eval(args) -> int:
    started = _now()
    data_path = _resolve_input(args.data)
    dataset = data_io.load_dataset(data_path)
    if not dataset:
        raise UsageError(f"dataset {data_path} is empty")

    ckpt_paths: list[Path] = []
    if args.run:
        run_dir = _resolve_input(args.run)
        ckpt_paths = sorted(run_dir.glob("*/fold*.ckpt")) or sorted(run_dir.glob("fold*.ckpt"))
        if not ckpt_paths:
            raise UsageError(f"no fold checkpoints found under {run_dir}")
    for p in args.ckpt or []:
        ckpt_paths.append(_resolve_input(p))
    if not ckpt_paths:
        raise UsageError("eval needs --run DIR or at least one --ckpt PATH")

    by_trait: dict[str, list[data_io.Checkpoint]] = {}
    for p in ckpt_paths:
        ckpt = data_io.Checkpoint.load(p)
        by_trait.setdefault(ckpt.trait, []).append(ckpt)

    per_trait_mse: dict[str, float] = {}
    for trait, ckpts in sorted(by_trait.items()):
        data_io.validate_for_trait(dataset, trait)
        models = [c.restore_model() for c in ckpts]
        data_io.validate_dims(dataset, models[0].cfg)
        transforms = [c.label_transform() for c in ckpts]
        preds = ensemble_predict(models, dataset, transforms)
        _, _, _, labels = data_io.batch_arrays(dataset, trait)
        per_trait_mse[trait] = float(((preds - labels) ** 2).mean())

    traits = [t for t in TRAITS if t in per_trait_mse]
    table = _render_trait_table([("eval", per_trait_mse, None)], traits)
    print(table)
    if set(traits) == set(TRAITS):
        print(f"average MSE: {fmt4(aggregate_mse(per_trait_mse))}")

    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "eval.json", "w", encoding="utf-8") as fh:
            json.dump({"per_trait_mse": per_trait_mse,
                       "average": aggregate_mse(per_trait_mse)
                       if set(traits) == set(TRAITS) else None},
                      fh, indent=2, sort_keys=True)
            fh.write("\n")
        _write_manifest(out / "manifest.json", "eval", args, {"checkpoints": [str(p) for p in ckpt_paths]},
                        [data_path] + ckpt_paths, started)
    return 0


def cmd_ablate(args) -> int:
    started = _now()
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    for m in modes:
        if m not in ABLATION_MODES:
            raise UsageError(f"unknown ablation mode {m!r}; valid: {', '.join(ABLATION_MODES)}")
    data_path = _resolve_input(args.data)
    file_cfg = _load_config_file(args.config)
    dataset = data_io.load_dataset(data_path)
    if not dataset:
        raise UsageError(f"dataset {data_path} is empty")
    traits = _parse_traits(args.trait)

    rows = []
    results: dict[str, dict] = {}
    for mode in modes:
        per_trait: dict[str, float] = {}
        param_count = None
        for trait in traits:
            model_cfg = _resolve_model_config(file_cfg, args, dataset, trait)
            train_cfg = _resolve_train_config(file_cfg, args)
            _, report = train_trait(dataset, model_cfg, train_cfg, variant=mode)
            per_trait[trait] = report.final_mse
            param_count = report.param_count
        rows.append((mode, per_trait, param_count))
        results[mode] = {"per_trait_mse": per_trait, "param_count": param_count}

    table = _render_trait_table(rows, traits)
    print(table)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "ablation.json", "w", encoding="utf-8") as fh:
            json.dump(results, fh, indent=2, sort_keys=True)
            fh.write("\n")
        (out / "ablation.txt").write_text(table + "\n", "utf-8")
        _write_manifest(out / "manifest.json", "ablate", args, results,
                        [data_path] + ([_resolve_input(args.config)] if args.config else []),
                        started)
    return 0


def cmd_gradcheck(args) -> int:
    from .verification import kernel_suite, model_suite

    kernel_tol = args.tol if args.tol is not None else 1e-5
    model_tol = args.tol if args.tol is not None else 1e-4
    reports = kernel_suite(h=args.h, tol=kernel_tol)
    ok = True
    print(f"kernel gradient checks (h={args.h:g}, tol={kernel_tol:g}):")
    for name, report in sorted(reports.items()):
        worst_name, worst = report.worst
        status = "PASS" if report.passed else "FAIL"
        ok &= report.passed
        print(f"  {status}  {name:<14} worst rel err {worst:.3e} ({worst_name})")

    model_report = model_suite(h=args.h, tol=model_tol)
    print(f"full model (B=2 toy config, eval mode, tol={model_tol:g}):")
    for pname, err in model_report.max_rel_err.items():
        status = "PASS" if err <= model_tol else "FAIL"
        print(f"  {status}  {pname:<28} max rel err {err:.3e}")
    worst_name, worst = model_report.worst
    print(f"  worst parameter group: {worst_name} ({worst:.3e})")
    ok &= model_report.passed
    print("gradient suite:", "PASS" if ok else "FAIL")
    return 0 if ok else 1


def cmd_prompt(args) -> int:
    started = _now()
    bank = prompts_mod.load_variant_bank(args.bank) if args.bank else None
    if args.variants:
        templates = prompts_mod.prompt_variants(args.trait, n=999, bank=bank)
        for i, tpl in enumerate(templates):
            print(f"[{i}] {tpl.task_description}")
        return 0

    transcript = ""
    inputs = []
    if args.transcript:
        tpath = _resolve_input(args.transcript)
        transcript = tpath.read_text("utf-8")
        inputs.append(tpath)
    meta = prompts_mod.SubjectMeta()
    if args.meta:
        mpath = _resolve_input(args.meta)
        try:
            raw = json.loads(mpath.read_text("utf-8"))
        except json.JSONDecodeError as exc:
            raise UsageError(f"meta file {mpath} is not valid JSON: {exc}") from exc
        known = {k: raw[k] for k in ("gender", "age", "education", "work_experience")
                 if k in raw}
        meta = prompts_mod.SubjectMeta(**known)
        inputs.append(mpath)

    templates = prompts_mod.prompt_variants(args.trait, n=args.variant_index + 1, bank=bank)
    if len(templates) <= args.variant_index:
        raise UsageError(
            f"variant index {args.variant_index} out of range for trait {args.trait}")
    prompt = prompts_mod.build_prompt(templates[args.variant_index], transcript, meta)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(prompt, "utf-8")
        _write_manifest(out.with_name(out.name + ".manifest.json"), "prompt", args,
                        {"trait": args.trait, "variant_index": args.variant_index},
                        inputs, started)
    else:
        print(prompt)
    return 0


def cmd_synth(args) -> int:
    started = _now()
    try:
        spec = data_io.SyntheticSpec(
            n=args.n, text_dim=args.text_dim, audio_dim=args.audio_dim,
            video_dim=args.video_dim, teacher=args.teacher,
            noise_std=args.noise_std, seed=args.seed)
    except data_io.DataValidationError as exc:
        raise UsageError(str(exc)) from exc
    records = data_io.generate_synthetic(spec)
    out = Path(args.out)
    data_io.save_dataset(records, out)
    _write_manifest(Path(str(out) + ".manifest.json"), "synth", args,
                    {"spec": dataclasses.asdict(spec)}, [], started)
    print(f"wrote {len(records)} records to {out}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_train_overrides(p: argparse.ArgumentParser) -> None:
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--ema-decay", dest="ema_decay", type=float, default=None)
    p.add_argument("--k-folds", dest="k_folds", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--jobs", type=int, default=None,
                   help="parallel fold workers; 1 = bit-deterministic sequential path")
    p.add_argument("--dropout-cwp", dest="dropout_cwp", type=float, default=None)
    p.add_argument("--dropout-cmc", dest="dropout_cmc", type=float, default=None)
    p.add_argument("--dropout-tfe", dest="dropout_tfe", type=float, default=None)
    p.add_argument("--ensemble-size", dest="ensemble_size", type=int, default=None)
    p.add_argument("--normalize-labels", dest="normalize_labels", action="store_true")
    p.add_argument("--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="traitfusion",
        description="Text-centric multimodal fusion for HEXACO trait regression.")
    parser.add_argument("--version", action="version", version=f"traitfusion {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("train", help="train per-trait fold models")
    p.add_argument("--data", required=True, help="dataset file (JSONL)")
    p.add_argument("--config", default=None, help="TOML config file")
    p.add_argument("--trait", default=None, help="comma-separated traits (default all)")
    p.add_argument("--out", required=True, help="output run directory")
    p.add_argument("--variant", default="full", choices=ABLATION_MODES)
    p.add_argument("--grid", action="append", default=None,
                   help="grid search KEY=V1,V2 (repeatable); trains best cell")
    _add_train_overrides(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate checkpoints on labeled data")
    p.add_argument("--data", required=True)
    p.add_argument("--run", default=None, help="train output directory")
    p.add_argument("--ckpt", action="append", default=None, help="checkpoint path (repeatable)")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and compare ablation variants")
    p.add_argument("--modes", required=True, help=f"comma list from {','.join(ABLATION_MODES)}")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--trait", default=None)
    p.add_argument("--out", default=None)
    _add_train_overrides(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every kernel and the model")
    p.add_argument("--tol", type=float, default=None,
                   help="override tolerance (default 1e-5 kernels, 1e-4 model)")
    p.add_argument("--h", type=float, default=1e-5, help="central-difference step")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("prompt", help="assemble a psychology-informed prompt")
    p.add_argument("--trait", required=True)
    p.add_argument("--transcript", default=None, help="transcript text file")
    p.add_argument("--meta", default=None, help="subject meta JSON file")
    p.add_argument("--variants", action="store_true", help="list the variant bank")
    p.add_argument("--variant-index", dest="variant_index", type=int, default=0)
    p.add_argument("--bank", default=None, help="alternative variant bank file")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_prompt)

    p = sub.add_parser("synth", help="generate a synthetic dataset file")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=256)
    p.add_argument("--text-dim", dest="text_dim", type=int, default=32)
    p.add_argument("--audio-dim", dest="audio_dim", type=int, default=16)
    p.add_argument("--video-dim", dest="video_dim", type=int, default=16)
    p.add_argument("--teacher", default="linear", choices=["linear", "planted-gate"])
    p.add_argument("--noise-std", dest="noise_std", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except _INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, TrainingDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
