"""Command-line experiment runner.

Verbs:

    run       execute a recipe end to end (pretrain, fine-tune, evaluate)
    pretrain  pretraining stage only, checkpointed for later fine-tuning
    finetune  fine-tune from an --init pretraining checkpoint, then evaluate
    eval      re-evaluate a fine-tuned checkpoint on the test split
    compare   diff two evaluation reports (file path or fixture:<row>)
    fixtures  recheck the bundled result tables' aggregate arithmetic

Configuration comes from --config (TOML, see the config module for the
schema) with every field overridable by a flag. Exit codes: 0 success,
1 configuration error, 2 runtime error, 3 fixture mismatch.
"""

from __future__ import annotations

import argparse
import sys
from typing import Optional

from . import evalkit as ek
from . import training
from .config import ConfigError, load_config


class _Parser(argparse.ArgumentParser):
    """argparse, but usage errors exit with the config-error code."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


_OVERRIDES = (
    ("recipe", "recipe"),
    ("preset", "preset"),
    ("variant", "variant"),
    ("tau", "tau"),
    ("seed", "seed"),
    ("world_seed", "world_seed"),
    ("pretrain_steps", "pretrain_steps"),
    ("finetune_steps", "finetune_steps"),
    ("batch_size", "batch_size"),
    ("peak_lr", "peak_lr"),
    ("warmup", "warmup"),
    ("freeze_lower_encoder", "freeze_lower_encoder"),
    ("out", "out_dir"),
)


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", metavar="FILE", help="TOML config file")
    parser.add_argument("--recipe")
    parser.add_argument("--preset")
    parser.add_argument("--variant", help="decoder_pretrain MT variant")
    parser.add_argument("--tau", type=float, help="sampling temperature")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--world-seed", type=int, dest="world_seed")
    parser.add_argument("--pretrain-steps", type=int, dest="pretrain_steps")
    parser.add_argument("--finetune-steps", type=int, dest="finetune_steps")
    parser.add_argument("--batch-size", type=int, dest="batch_size")
    parser.add_argument("--peak-lr", type=float, dest="peak_lr")
    parser.add_argument("--warmup", type=int)
    parser.add_argument("--freeze-lower-encoder", dest="freeze_lower_encoder",
                        action=argparse.BooleanOptionalAction, default=None)
    parser.add_argument("--out", metavar="DIR", help="run directory")
    parser.add_argument("--quiet", action="store_true",
                        help="suppress progress lines")


def _config_from_args(args):
    overrides = {}
    for arg_name, field in _OVERRIDES:
        value = getattr(args, arg_name, None)
        if value is not None:
            overrides[field] = value
    return load_config(args.config, overrides)


def _echo(args):
    return None if args.quiet else print


def _print_report(report: ek.EvalReport) -> None:
    print(report.to_csv(), end="")
    groups = " ".join(f"{k} {v:.1f}" for k, v in report.aggregates.items())
    print(f"aggregates: {groups}")


def _cmd_run(args) -> int:
    cfg = _config_from_args(args)
    result = training.run(cfg, stop_after=args.stop_after, echo=_echo(args))
    if not result.complete:
        print(f"stopped at step {result.global_step}; "
              f"checkpoint at {result.checkpoint}")
        return 0
    _print_report(result.report)
    print(f"report written to {cfg.out_dir}")
    return 0


def _cmd_pretrain(args) -> int:
    cfg = _config_from_args(args)
    result = training.run_pretrain(cfg, echo=_echo(args))
    print(f"pretraining checkpoint at {result.checkpoint}")
    return 0


def _cmd_finetune(args) -> int:
    cfg = _config_from_args(args)
    result = training.run_finetune(cfg, init=args.init, echo=_echo(args))
    _print_report(result.report)
    print(f"report written to {cfg.out_dir}")
    return 0


def _cmd_eval(args) -> int:
    report = training.evaluate_checkpoint(args.checkpoint, args.out)
    _print_report(report)
    return 0


def _load_report(spec: str) -> ek.EvalReport:
    if spec.startswith("fixture:"):
        return ek.fixture_report(spec[len("fixture:"):])
    try:
        with open(spec, encoding="utf-8") as f:
            return ek.EvalReport.from_json(f.read())
    except FileNotFoundError:
        raise training.RunError(f"no report at {spec!r}") from None


def _cmd_compare(args) -> int:
    try:
        base = _load_report(args.baseline)
        new = _load_report(args.new)
        diff = ek.compare_reports(base, new)
    except (ValueError, KeyError) as e:
        # Unknown fixture row, malformed report file, mismatched languages.
        raise training.RunError(str(e)) from None

    def show(name, key, section):
        delta, pct = diff[section][key]
        a = base.per_language[key] if section == "per_language" else base.aggregates[key]
        b = new.per_language[key] if section == "per_language" else new.aggregates[key]
        rel = "n/a" if pct is None else f"{pct:+.0f}%"
        print(f"{name:>8}  {a:8.1f}  {b:8.1f}  {delta:+8.1f}  {rel:>8}")

    print(f"{'':>8}  {'baseline':>8}  {'new':>8}  {'delta':>8}  {'rel':>8}")
    for key in diff["aggregates"]:
        show(key, key, "aggregates")
    for lang in diff["per_language"]:
        show(lang, lang, "per_language")
    if args.json:
        import json

        payload = {s: {k: {"delta": d, "percent": p}
                       for k, (d, p) in diff[s].items()}
                   for s in diff}
        with open(args.json, "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=2)
            f.write("\n")
    return 0


def _cmd_fixtures(args) -> int:
    entries, failures = ek.check_fixtures()
    worst = max(e["deviation"] for e in entries)
    print(f"checked {len(entries)} stated aggregates against their "
          f"per-language scores; worst deviation {worst:.3f}")
    if failures:
        for e in failures:
            print(f"MISMATCH {e['table']} {e['row']} {e['column']}: "
                  f"stated {e['stated']} computed {e['computed']:.3f}")
        return 3
    print("all bundled tables agree with their own arithmetic")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tinys2st",
                     description="toy speech-to-speech translation experiments")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("run", parents=[], help="full recipe: pretrain, "
                       "fine-tune, evaluate; resumes from its checkpoint")
    _add_config_flags(p)
    p.add_argument("--stop-after", type=int, dest="stop_after", metavar="N",
                   help="halt after N total training steps (resume later)")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("pretrain", help="pretraining stage only")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("finetune", help="fine-tune from a pretraining "
                       "checkpoint, then evaluate")
    _add_config_flags(p)
    p.add_argument("--init", metavar="STEM",
                   help="checkpoint stem of a completed pretraining stage")
    p.set_defaults(func=_cmd_finetune)

    p = sub.add_parser("eval", help="evaluate a fine-tuned checkpoint")
    p.add_argument("--checkpoint", required=True, metavar="STEM")
    p.add_argument("--out", metavar="DIR",
                   help="also write report.json/report.csv here")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("compare", help="diff two evaluation reports")
    p.add_argument("baseline", help="report.json path or fixture:<row>")
    p.add_argument("new", help="report.json path or fixture:<row>")
    p.add_argument("--json", metavar="FILE", help="also write the diff as JSON")
    p.set_defaults(func=_cmd_compare)

    p = sub.add_parser("fixtures", help="verify the bundled result tables")
    p.set_defaults(func=_cmd_fixtures)

    return parser


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except (training.RunError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
