"""Command-line front end.

Every command reads the experiment config (defaults, optionally overridden
by --config, then by explicit flags), resolves the workspace, delegates to
the matching pipeline function, and prints the summary path. Exit codes:

    0  success
    2  configuration error
    3  missing prerequisite artifact
    4  gradient check failed
    1  unexpected failure

Errors are emitted as one JSON object on stderr: {"error_code", "message"}.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import pipeline
from .param_space import ConfigError
from .workspace import MissingInputError, Workspace, load_config, resolve_workspace

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_MISSING_INPUT = 3
EXIT_GRADCHECK = 4


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="experiment config JSON")
    parser.add_argument("--seed", type=int, help="override the global seed")
    parser.add_argument("--workers", type=int, help="parallel workers for per-sample work")
    parser.add_argument("--out", help="workspace directory (default: $SEMCEX_WORKSPACE or ./workspace)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="semcex",
        description="Semantic counterexample generation and robustness evaluation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the procedural shape dataset")
    _add_common(p)

    p = sub.add_parser("train", help="train a classifier on the train split")
    _add_common(p)
    p.add_argument("--arch", choices=("benign", "transfer"), default="benign")

    p = sub.add_parser("eval", help="clean accuracy of a trained model")
    _add_common(p)
    p.add_argument("--model", default="benign")
    p.add_argument("--split", choices=("train", "validation", "test"), default="test")

    p = sub.add_parser("attack", help="run a semantic attack over a split")
    _add_common(p)
    p.add_argument("--method", choices=("sifgsm", "sgd", "scw"), required=True)
    p.add_argument("--groups", help="comma-separated active groups (default pose,vertex)")
    p.add_argument("--split", choices=("train", "validation", "test"), default="test")
    p.add_argument("--model", default="benign")
    p.add_argument("--preset", choices=("default", "published"))
    p.add_argument("--iterations", type=int)
    p.add_argument("--sweep", action="store_true",
                   help="single- vs multi-group comparison instead of one record set")

    p = sub.add_parser("sample", help="run a sampling baseline over a split")
    _add_common(p)
    p.add_argument("--sampler", choices=("random", "halton"), required=True)
    p.add_argument("--range", choices=("large", "small"), default="large")
    p.add_argument("--split", choices=("train", "validation", "test"), default="test")
    p.add_argument("--model", default="benign")
    p.add_argument("--n", type=int, help="candidates per point (default 5)")

    p = sub.add_parser("info-worth", help="information worth of record sets")
    _add_common(p)
    p.add_argument("--model", default="benign")
    p.add_argument("--split", choices=("train", "validation", "test"), default="test")
    p.add_argument("--membership", choices=("binary", "fractional", "both"),
                   default="both", help="membership modes to compute")

    p = sub.add_parser("augment", help="plan the counterexample replacement set")
    _add_common(p)
    p.add_argument("--method", choices=("sifgsm", "sgd", "scw"), required=True)

    p = sub.add_parser("retrain", help="retrain the benign model on the augmented set")
    _add_common(p)
    p.add_argument("--method", choices=("sifgsm", "sgd", "scw"), required=True)

    p = sub.add_parser("robustness-matrix", help="train-method x test-method accuracy grid")
    _add_common(p)
    p.add_argument("--mode", choices=("fixed", "regenerated"), default="fixed")

    p = sub.add_parser("transfer", help="evaluate counterexample transfer to the alternate architecture")
    _add_common(p)

    p = sub.add_parser("gradcheck", help="finite-difference verification suites")
    _add_common(p)

    p = sub.add_parser("report", help="compose written CSVs into report.md")
    _add_common(p)

    return parser


def _config_from_args(args) -> tuple[dict, Workspace]:
    config = load_config(args.config)
    overrides = []
    if args.seed is not None:
        config["seed"] = args.seed
        overrides.append(f"seed={args.seed}")
    if args.workers is not None:
        config["workers"] = args.workers
        overrides.append(f"workers={args.workers}")
    config["overrides"] = overrides
    ws = Workspace(resolve_workspace(args.out, config))
    return config, ws


def _dispatch(args, config: dict, ws: Workspace) -> tuple[dict, int]:
    cmd = args.command
    if cmd == "gen-data":
        return pipeline.cmd_gen_data(config, ws), EXIT_OK
    if cmd == "train":
        return pipeline.cmd_train(config, ws, arch=args.arch), EXIT_OK
    if cmd == "eval":
        return pipeline.cmd_eval(config, ws, model_name=args.model, split=args.split), EXIT_OK
    if cmd == "attack":
        groups = tuple(g.strip() for g in args.groups.split(",")) if args.groups else None
        return pipeline.cmd_attack(config, ws, method=args.method, groups=groups,
                                   split=args.split, model_name=args.model,
                                   preset_name=args.preset, iterations=args.iterations,
                                   sweep=args.sweep), EXIT_OK
    if cmd == "sample":
        return pipeline.cmd_sample(config, ws, kind=args.sampler, range_preset=args.range,
                                   split=args.split, model_name=args.model,
                                   n=args.n), EXIT_OK
    if cmd == "info-worth":
        return pipeline.cmd_info_worth(config, ws, model_name=args.model,
                                       split=args.split,
                                       membership=args.membership), EXIT_OK
    if cmd == "augment":
        return pipeline.cmd_augment(config, ws, method=args.method), EXIT_OK
    if cmd == "retrain":
        return pipeline.cmd_retrain(config, ws, method=args.method), EXIT_OK
    if cmd == "robustness-matrix":
        return pipeline.cmd_matrix(config, ws, mode=args.mode), EXIT_OK
    if cmd == "transfer":
        return pipeline.cmd_transfer(config, ws), EXIT_OK
    if cmd == "gradcheck":
        summary = pipeline.cmd_gradcheck(config, ws)
        return summary, EXIT_OK if summary["ok"] else EXIT_GRADCHECK
    if cmd == "report":
        return pipeline.cmd_report(config, ws), EXIT_OK
    raise ConfigError(f"unknown command {cmd!r}")


def _fail(code: int, error_code: str, message: str) -> int:
    print(json.dumps({"error_code": error_code, "message": message}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config, ws = _config_from_args(args)
        summary, code = _dispatch(args, config, ws)
    except MissingInputError as exc:
        return _fail(EXIT_MISSING_INPUT, "missing_input", str(exc))
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config_error", str(exc))
    except Exception as exc:  # pragma: no cover - defensive
        return _fail(EXIT_UNEXPECTED, "unexpected", f"{type(exc).__name__}: {exc}")
    print(json.dumps({"command": args.command, "workspace": str(ws.root),
                      "overall": summary.get("overall_accuracy"),
                      "reports": str(ws.reports_dir)}, sort_keys=True))
    return code


if __name__ == "__main__":
    sys.exit(main())
