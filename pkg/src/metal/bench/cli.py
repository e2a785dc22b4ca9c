"""Command-line entry point: ``metal {train,eval,ablate,trace,selftest,config}``.

Exit codes: 0 success, 1 runtime failure (message on stderr), 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from ..errors import MetalError, SpecError
from ..gradcheck import (
    BILEVEL_TOL,
    FIRST_ORDER_TOL,
    SECOND_ORDER_TOL,
    bilevel_error,
    run_op_suite,
)
from ..innerloop import Variant
from ..metatrain import (
    EvalReport,
    ProgressLog,
    TrainConfig,
    TrainState,
    held_out_tasks,
    meta_evaluate,
    meta_train,
    new_train_state,
    semi_tasks,
)
from ..taskgen import load_task
from .checkpoint import load_checkpoint, save_checkpoint
from .presets import (
    PRESETS,
    build_config,
    config_to_json,
    get_preset,
    parse_assignment,
    read_config_overrides,
)
from .report import compare_report
from .trace import export_affine_trace

CHECKPOINT = "checkpoint.bin"


class UsageError(Exception):
    pass


def _common() -> argparse.ArgumentParser:
    # defaults are suppressed so the flags work before or after the subcommand
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master seed")
    p.add_argument("--config", default=argparse.SUPPRESS, help="JSON config file (full or partial)")
    p.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    return p


def _training_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", choices=sorted(PRESETS), default=None)
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config field (repeatable)")
    p.add_argument("--eval-tasks", type=int, default=None, help="held-out tasks for the final report")


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="metal", parents=[common],
                                     description="Meta-learning with task-adaptive learned losses.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="meta-train one variant")
    _training_flags(p)
    p.add_argument("--variant", choices=[v.value for v in Variant], default=None)
    p.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint.bin")
    p.add_argument("--quiet", action="store_true", help="do not echo progress records")

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--tasks", type=int, default=None, help="number of sampled held-out tasks")
    p.add_argument("--episode", action="append", default=[], help="episode JSON file (repeatable)")
    p.add_argument("--split", default=None, metavar="Q,NQ,D", help="unlabeled pool sizes for every task")

    p = sub.add_parser("ablate", parents=[common], help="train and compare several variants")
    _training_flags(p)
    p.add_argument("--variants", default=None, help="comma-separated subset, e.g. M1,M6")

    p = sub.add_parser("trace", parents=[common], help="export adapter scale/shift values as CSV")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--tasks", type=int, default=10)
    p.add_argument("--split", default=None, metavar="Q,NQ,D")

    p = sub.add_parser("selftest", parents=[common], help="finite-difference gradient oracles")
    p.add_argument("--cases", type=int, default=100, help="random cases per op")

    p = sub.add_parser("config", parents=[common], help="print or write a preset as a JSON config")
    _training_flags(p)
    return parser


def _out(args) -> Path | None:
    out = getattr(args, "out", None)
    return Path(out) if out is not None else None


def _config(args, variant: str | None = None) -> tuple[TrainConfig, int]:
    preset = get_preset(args.preset or "sinusoid-metal")
    overrides = read_config_overrides(args.config) if getattr(args, "config", None) else {}
    try:
        # precedence: preset < config file < --set < --seed / --variant
        for item in args.overrides:
            key, value = parse_assignment(item)
            overrides[key] = value
        if getattr(args, "seed", None) is not None:
            overrides["seed"] = args.seed
        if variant is not None:
            overrides["variant"] = variant
        cfg = build_config(preset.config, overrides)
    except (SpecError, TypeError) as exc:
        raise UsageError(f"bad configuration: {exc}") from None
    return cfg, args.eval_tasks if args.eval_tasks is not None else preset.eval_tasks


def _parse_split(text: str | None) -> tuple[int, int, int] | None:
    if text is None:
        return None
    try:
        parts = tuple(int(x) for x in text.split(","))
    except ValueError:
        raise UsageError(f"--split expects three integers, got {text!r}") from None
    if len(parts) != 3:
        raise UsageError(f"--split expects three integers, got {text!r}")
    return parts


def _write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _train_one(cfg: TrainConfig, out: Path | None, resume: bool, quiet: bool) -> TrainState:
    ckpt = out / CHECKPOINT if out is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    if resume:
        if ckpt is None or not ckpt.exists():
            raise UsageError("--resume needs an existing OUT/checkpoint.bin")
        state = load_checkpoint(ckpt)
        if state.cfg != cfg:
            raise UsageError("checkpoint config differs from the requested config")
    else:
        state = new_train_state(cfg)
        if out is not None and (out / "progress.jsonl").exists():
            (out / "progress.jsonl").unlink()
    log = ProgressLog(out / "progress.jsonl" if out is not None else None, None if quiet else sys.stdout)
    callbacks = [log]
    if ckpt is not None:
        _write_json(out / "config.json", cfg.to_dict())

        def periodic(record):
            if record["step"] % cfg.iterations_per_epoch == 0:
                save_checkpoint(state, ckpt)

        callbacks.append(periodic)
    try:
        meta_train(state, callbacks, on_abort=(lambda s: save_checkpoint(s, ckpt)) if ckpt is not None else None)
    finally:
        log.close()
    if ckpt is not None:
        save_checkpoint(state, ckpt)
    return state


def _evaluate(state: TrainState, n: int) -> EvalReport:
    return meta_evaluate(state.best_model(), held_out_tasks(state.cfg, n), state.cfg)


def cmd_train(args) -> int:
    cfg, n_eval = _config(args, args.variant)
    out = _out(args)
    state = _train_one(cfg, out, args.resume, args.quiet)
    report = _evaluate(state, n_eval)
    summary = {k: v for k, v in report.to_dict().items() if k != "values"}
    print(json.dumps({"report": summary}, sort_keys=True))
    if out is not None:
        _write_json(out / "report.json", report.to_dict())
    return 0


def _checkpoint_path(args) -> Path:
    if args.checkpoint is not None:
        return Path(args.checkpoint)
    out = _out(args)
    if out is None:
        raise UsageError("give --checkpoint or --out pointing at a training directory")
    return out / CHECKPOINT


def cmd_eval(args) -> int:
    split = _parse_split(args.split)
    state = load_checkpoint(_checkpoint_path(args))
    cfg = state.cfg
    if args.episode:
        tasks = [load_task(p) for p in args.episode]
    else:
        seed = getattr(args, "seed", None)
        tasks = held_out_tasks(cfg, args.tasks or 100, seed=seed)
    if split is not None:
        tasks = semi_tasks(tasks, split, cfg.seed)
    report = meta_evaluate(state.best_model(), tasks, cfg)
    summary = {k: v for k, v in report.to_dict().items() if k != "values"}
    print(json.dumps(summary, sort_keys=True))
    out = _out(args)
    if out is not None:
        _write_json(out / "eval.json", report.to_dict())
    return 0


def cmd_ablate(args) -> int:
    preset = get_preset(args.preset or "table4")
    variants = args.variants.split(",") if args.variants else list(preset.variants)
    for v in variants:
        try:
            Variant(v)
        except ValueError:
            raise UsageError(f"unknown variant {v!r}") from None
    args.preset = preset.name
    out = _out(args)
    reports = []
    for v in variants:
        cfg, n_eval = _config(args, v)
        state = _train_one(cfg, out / v if out is not None else None, False, True)
        report = replace(_evaluate(state, n_eval), label=v)
        reports.append(report)
        print(f"{v}: {report.metric} {report.mean:.4f} ± {report.ci95:.4f}", file=sys.stderr, flush=True)
    table = compare_report(reports, {v: Variant(v).label for v in variants})
    print(table.text(), end="")
    if out is not None:
        _write_json(out / "ablation.json", table.to_dict())
        (out / "ablation.txt").write_text(table.text())
    return 0


def cmd_trace(args) -> int:
    split = _parse_split(args.split)
    state = load_checkpoint(_checkpoint_path(args))
    cfg = state.cfg
    tasks = held_out_tasks(cfg, args.tasks, seed=getattr(args, "seed", None))
    if split is not None:
        tasks = semi_tasks(tasks, split, cfg.seed)
    out = _out(args) or Path(".")
    rows = export_affine_trace(state.best_model(), tasks, cfg, out / "trace.csv")
    print(json.dumps({"rows": rows, "path": str(out / "trace.csv")}))
    return 0


def cmd_selftest(args) -> int:
    seed = getattr(args, "seed", 0)
    results = run_op_suite(args.cases, seed)
    ok = True
    for name, errs in results.items():
        passed = errs["first"] < FIRST_ORDER_TOL and errs["second"] < SECOND_ORDER_TOL
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'}  {name:<24} first {errs['first']:.2e}  second {errs['second']:.2e}")
    for variant in ("M6", "M1", "M3"):
        err = bilevel_error(seed, variant)
        passed = err < BILEVEL_TOL
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'}  bilevel {variant:<16} rel err {err:.2e}")
    return 0 if ok else 1


def cmd_config(args) -> int:
    cfg, _ = _config(args)
    text = config_to_json(cfg)
    out = _out(args)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{args.preset or 'sinusoid-metal'}.json").write_text(text)
    print(text, end="")
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "trace": cmd_trace,
    "selftest": cmd_selftest,
    "config": cmd_config,
}


def cli(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"metal {args.command}: {exc}", file=sys.stderr)
        return 2
    except MetalError as exc:
        print(f"metal {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli())
