"""Command-line front end: ``opensetmia <command> --config run.json --out-dir out``.

Exit codes: 0 success, 2 config or contract error, 3 data-format error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from ._util import ContractError, DataFormatError
from .attacks import METHODS
from .pipeline import ExperimentConfig, Pipeline, Timer, artifacts, write_timings

EXIT_OK, EXIT_CONTRACT, EXIT_DATA = 0, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def _hidden(text):
    try:
        widths = [int(w) for w in text.split(",") if w.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated layer widths, got {text!r}") from None
    if not widths or min(widths) < 1:
        raise argparse.ArgumentTypeError("layer widths must be positive")
    return widths


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="opensetmia", description="Membership inference for known/unknown identity discrimination.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="experiment config (JSON)")
        p.add_argument("--seed", type=int, help="override the config's global seed")
        p.add_argument("--out-dir", required=True, help="directory for artifacts")
        return p

    command("synth", "write the dataset CSV")
    command("split", "write the identity/picture split manifest")
    p = command("train-target", "train the target classifier")
    p.add_argument("--preset", choices=["overfitting", "no-overfitting"])
    p.add_argument("--epochs", type=int)
    p = command("attack", "fit and calibrate an attack on the attack set")
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--attack-nonmembers", metavar="DATASET_CSV", help="take attack non-members from another dataset")
    p.add_argument("--attack-arch", type=_hidden, metavar="W1,W2,...", help="calibrate on a shadow model of this shape")
    p = command("ensemble", "ensemble attack over identity subsets")
    p.add_argument("--method", choices=METHODS)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--subsets", type=int)
    group.add_argument("--singleton", action="store_true")
    p.add_argument("--k", type=int, help="member iff at least k sub-models vote member (default 1 = OR)")
    p = command("eval", "evaluate the attack on the evaluation set")
    p.add_argument("--method", choices=METHODS)
    p = command("epoch-study", "per-epoch overfitting and attack diagnostics")
    p.add_argument("--checkpoints", type=lambda s: [int(x) for x in s.split(",")], metavar="E1,E2,...")
    p.add_argument("--strategy", choices=METHODS)
    p = command("report", "run synth, split, train, attack and eval in one process")
    p.add_argument("--method", choices=METHODS)
    return parser


def config_from_args(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    overrides = {
        "seed": args.seed,
        "target.preset": getattr(args, "preset", None) and args.preset.replace("-", "_"),
        "target.epochs": getattr(args, "epochs", None),
        "attack.method": getattr(args, "method", None),
        "attack.arch": getattr(args, "attack_arch", None),
        "ensemble.subsets": getattr(args, "subsets", None),
        "ensemble.k": getattr(args, "k", None),
        "evaluation.checkpoints": getattr(args, "checkpoints", None),
        "evaluation.strategy": getattr(args, "strategy", None),
    }
    if getattr(args, "singleton", False):
        overrides["ensemble.singleton"] = True
    elif getattr(args, "subsets", None) is not None:
        overrides["ensemble.singleton"] = False
    nm = getattr(args, "attack_nonmembers", None)
    if nm is not None:
        # paths given on the command line are relative to the working directory
        overrides["attack.nonmembers"] = str(Path(nm).resolve())
    for key, val in overrides.items():
        if val is not None:
            cfg = cfg.override(key, val)
    return cfg


STAGE_OF = {
    "synth": "dataset",
    "split": "split",
    "train-target": "target",
    "attack": "attack",
    "eval": "eval",
    "report": "eval",
}


def run(args) -> int:
    cfg = config_from_args(args)
    out = Path(args.out_dir)
    timer = Timer()
    if args.command == "report":
        # monolithic run: ignore any cached stage artifacts
        pipe = Pipeline(cfg, None, timer)
    else:
        pipe = Pipeline(cfg, out if out.is_dir() else None, timer)
    summary = {}
    with artifacts(out) as w:
        produced = {}
        if args.command in STAGE_OF:
            produced = pipe.write_through(w, STAGE_OF[args.command])
            if args.command in ("eval", "report"):
                summary = pipe.evaluation()["metrics"].to_json()
            elif args.command == "attack":
                summary = {"method": pipe.attack().method, "threshold": float(pipe.attack().threshold)}
        elif args.command == "ensemble":
            produced = pipe.write_through(w, "attack") if cfg.source != "records" else {}
            pipe.write_ensemble(w)
            summary = pipe.ensemble()[1].to_json()
        elif args.command == "epoch-study":
            pipe.write_epoch_study(w)
            summary = {"checkpoints": len(pipe.epoch_study())}
        # state of the out-dir cache is merged with the existing stages file
        pipe.out_dir = out
        pipe.record_stages(w, produced)
    write_timings(out, timer)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONTRACT
    try:
        return run(args)
    except DataFormatError as exc:
        print(f"data format error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
