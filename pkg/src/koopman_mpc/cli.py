"""Command-line entry point: ``koopman-mpc <stage> [options]``.

Exit codes: 0 success, 2 invalid configuration or arguments, 3 missing or
inconsistent upstream artifact, 1 any other runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import List, Optional

from . import experiment as ex

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_VALIDATION = 2
EXIT_ARTIFACT = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def _globals(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=d, help="YAML/JSON experiment file")
    p.add_argument("--seed", type=int, default=d, help="override the config seed")
    p.add_argument("--out", default=d, help="artifact root directory")
    p.add_argument("--case", choices=ex.CASES, default=d, help="single or double column")
    p.add_argument("--set", dest="overrides", action="append", default=d, metavar="KEY=VALUE",
                   help="override a config entry, e.g. lifting.epochs=50 (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true", default=d)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="koopman-mpc", description="Koopman-operator MPC experiments.")
    _globals(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="simulate the neural-mass plant")
    _globals(p, True)
    p.add_argument("--A", type=float, help="excitatory gain of the (first) column")
    p.add_argument("--duration", type=float, help="simulated seconds")

    for name, text in (("train", "train a model"), ("predict", "held-out rolling prediction"),
                       ("evaluate", "metrics and PSD for a prediction")):
        p = sub.add_parser(name, help=text)
        _globals(p, True)
        p.add_argument("--variant", choices=ex.VARIANTS, default="full")

    p = sub.add_parser("control", help="closed-loop MPC run")
    _globals(p, True)
    p = sub.add_parser("ablate", help="all variants over several seeds, plus the comparison table")
    _globals(p, True)
    p.add_argument("--runs", type=int, help="seeds per variant")
    p = sub.add_parser("plot", help="render SVG figures of existing artifacts")
    _globals(p, True)
    return parser


def _config(args) -> ex.ExperimentConfig:
    over: dict = {}
    for item in args.overrides or []:
        over = ex.deep_merge(over, ex.parse_assignment(item))
    if args.case is not None:
        over["case"] = args.case
    if args.seed is not None:
        over["seed"] = args.seed
    if args.out is not None:
        over["out"] = args.out
    if getattr(args, "duration", None) is not None:
        over.setdefault("simulate", {})["duration"] = args.duration
    if getattr(args, "runs", None) is not None:
        over.setdefault("ablation", {})["runs"] = args.runs
    if getattr(args, "A", None) is not None:
        case = over.get("case")
        if case is None and args.config:
            case = ex._read_yaml(args.config).get("case")
        key = {"col1": {"A": args.A}} if case == "double" else {"A": args.A}
        over.setdefault("plant", {})
        over["plant"] = ex.deep_merge(over["plant"], key)
    return ex.load_config(args.config, over)


def _run(args, cfg: ex.ExperimentConfig) -> None:
    cmd = args.command
    if cmd == "simulate":
        res = ex.run_simulate(cfg)
    elif cmd == "train":
        res = ex.run_train(cfg, args.variant)
    elif cmd == "predict":
        res = ex.run_predict(cfg, args.variant)
    elif cmd == "evaluate":
        res = ex.run_evaluate(cfg, args.variant)
        rep = ex.read_report(res)
        print(f"MSE {rep.mse:.4f}  R2 {rep.r2:.4f}  PSD band error "
              + ", ".join(f"{e:.3f}" for e in rep.psd_band_error))
    elif cmd == "control":
        res = ex.run_control(cfg)
        summary = json.loads((res.path / "control_summary.json").read_text())
        print("suppression ratio " + ", ".join(f"{r:.3f}" for r in summary["suppression_ratio"])
              + f"  bound violations {summary['bound_violations']}")
    elif cmd == "ablate":
        out = ex.run_ablate(cfg)
        res = out.stage
        print((res.path / "table.txt").read_text(), end="")
    elif cmd == "plot":
        res = ex.run_plot(cfg)
    else:  # pragma: no cover - argparse rejects unknown commands
        raise AssertionError(cmd)
    _report(res)
    if cfg.plots and cmd != "plot":
        _report(ex.run_plot(cfg))


def _report(res: ex.StageResult) -> None:
    state = "computed" if res.computed else "up to date"
    print(f"{res.stage}: {res.path} ({state})")


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
    except ex.ConfigError as exc:
        print(f"koopman-mpc: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        _run(args, cfg)
    except ex.ConfigError as exc:
        print(f"koopman-mpc: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except ex.ArtifactError as exc:
        print(f"koopman-mpc: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    except Exception as exc:  # noqa: BLE001 - reported and mapped to an exit code
        print(f"koopman-mpc: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
