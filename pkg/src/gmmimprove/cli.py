"""Command line entry point: ``gmmimprove <subcommand> [options]``.

Exit codes: 0 on success, 2 on configuration errors, 3 on runtime errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness
from .errors import ConfigError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--task", help="preset name (slide, drawer, door) or task JSON path")
    p.add_argument("--k", type=int, help="number of mixture components")
    p.add_argument("--seed", type=int, help="seed (run seed for optimize/baseline-online)")
    p.add_argument("--budget", type=int, help="training episode budget")
    p.add_argument("--modality", choices=harness.MODALITY_CHOICES)
    p.add_argument("--out", help="output file or directory")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gmmimprove", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-demos", help="write scripted demonstrations (JSON lines)")
    _common(p)
    p.add_argument("--n", type=int, default=None, help="number of demonstrations (default 10)")

    p = sub.add_parser("fit", help="fit a GMM policy to a demonstration file")
    _common(p)
    p.add_argument("--demos", help="demonstration file")

    p = sub.add_parser("optimize", help="Bayesian optimization of policy updates")
    _common(p)

    p = sub.add_parser("baseline-online", help="online GMM refitting baseline")
    _common(p)

    p = sub.add_parser("report", help="merge run reports into CSV, summary JSON and a figure")
    _common(p)
    p.add_argument("reports", nargs="*", help="run report JSON files")
    return parser


def load_config(args) -> harness.ExperimentConfig:
    data = {}
    if args.config:
        data = harness.ExperimentConfig.from_file(args.config).to_dict()
    for key in ("task", "k", "budget", "modality", "out"):
        value = getattr(args, key, None)
        if value is not None:
            data[key] = value
    if args.seed is not None and args.command in ("optimize", "baseline-online"):
        data["seeds"] = [args.seed]
    if getattr(args, "demos", None):
        data["demos"] = args.demos
    return harness.ExperimentConfig.from_dict(data)


def run(args) -> int:
    cfg = load_config(args)
    if args.command == "gen-demos":
        n = args.n if args.n is not None else cfg.n_demos
        seed = args.seed if args.seed is not None else cfg.demo_seed
        out = args.out or f"{cfg.task}_demos.jsonl"
        path = harness.cmd_gen_demos(cfg.task, n, seed, out, cfg.noise_std)
        print(f"wrote {n} demonstrations to {path}")
    elif args.command == "fit":
        if not cfg.demos:
            raise ConfigError("fit needs --demos (or 'demos' in the config)")
        seed = args.seed if args.seed is not None else cfg.fit_seed
        out = args.out or "model.json"
        pol = harness.cmd_fit(cfg.demos, cfg.k, seed, out)
        print(f"wrote {pol.k}-component model to {out}")
    elif args.command == "optimize":
        rep = harness.cmd_optimize(cfg)
        print(json.dumps(rep["summary"]))
    elif args.command == "baseline-online":
        rep = harness.cmd_baseline_online(cfg)
        print(json.dumps(rep["summary"]))
    elif args.command == "report":
        out = args.out or "report"
        res = harness.cmd_report(args.reports, out)
        for row in res["summary"]:
            print(json.dumps(row))
        print(f"wrote {Path(out) / 'curves.csv'}, summary.json and curves.png")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime error
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
