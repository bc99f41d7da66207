"""``mte-lab`` command line.

    mte-lab run <config> [--seed N] [--out DIR]
    mte-lab sweep <config> --alphas 0.4,0.8,1.2 [--seed N] [--out DIR]
    mte-lab compare <report> <report> ... --out FILE
    mte-lab validate <config>

Exit codes: 0 success, 1 usage or config error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import experiment
from .experiment import ConfigError
from .trainer import TrainingDivergence

log = logging.getLogger("mtelab")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _run(args, alpha_sweep=None) -> int:
    try:
        cfg = experiment.load_config(args.config)
    except ConfigError as exc:
        for e in exc.errors:
            print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    if alpha_sweep is not None:
        cfg.setdefault("eval", {})["alpha_sweep"] = alpha_sweep
        if not any(m["method"] == "mte" for m in cfg["methods"]):
            print("config error: methods: sweep needs at least one mte method", file=sys.stderr)
            return EXIT_CONFIG
    base = os.path.dirname(os.path.abspath(args.config))
    out = args.out or cfg.get("output_dir") or "mte_out"
    if not os.path.isabs(out) and args.out is None:
        out = os.path.join(base, out)
    results: dict = {}
    try:
        report = experiment.run(cfg, seed=args.seed, base_dir=base, keep_checkpoints=results)
    except TrainingDivergence as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    experiment.write_outputs(out, experiment.output_files(report, results))
    for m in report["methods"]:
        log.info("%s: acc %.4f ece %.4f cw-ece %.4f", m["name"], m["accuracy"], m["ece"], m["cw_ece"])
    print(os.path.join(out, "report.json"))
    return EXIT_OK


def cmd_run(args) -> int:
    return _run(args)


def cmd_sweep(args) -> int:
    try:
        alphas = [float(a) for a in args.alphas.split(",") if a.strip()]
    except ValueError:
        print(f"config error: --alphas: not a comma-separated list of numbers: {args.alphas!r}", file=sys.stderr)
        return EXIT_CONFIG
    if not alphas or any(a < 0 for a in alphas):
        print("config error: --alphas: need one or more values >= 0", file=sys.stderr)
        return EXIT_CONFIG
    return _run(args, alpha_sweep=alphas)


def cmd_validate(args) -> int:
    try:
        experiment.load_config(args.config)
    except ConfigError as exc:
        for e in exc.errors:
            print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    print("ok")
    return EXIT_OK


def cmd_compare(args) -> int:
    try:
        text = experiment.compare(args.reports, args.out)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"error: cannot read report: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.out is None:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mte-lab", description="Calibration experiments with mutual-transport co-training.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="train and evaluate every method in a config")
    r.add_argument("config")
    r.add_argument("--seed", type=int, help="overrides the config seed")
    r.add_argument("--out", help="output directory (default: config output_dir)")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="run a config with an alpha sweep over its mte methods")
    s.add_argument("config")
    s.add_argument("--alphas", required=True, help="comma-separated alpha values")
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_sweep)

    c = sub.add_parser("compare", help="merge reports into one comparison CSV")
    c.add_argument("reports", nargs="+")
    c.add_argument("--out", help="CSV path (default: stdout)")
    c.set_defaults(func=cmd_compare)

    v = sub.add_parser("validate", help="check a config without running it")
    v.add_argument("config")
    v.set_defaults(func=cmd_validate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
