"""Command line: gen-data, train, eval, ablate, distill.

Exit codes: 0 success, 2 configuration error, 3 numeric abort.
The thread count for BLAS is taken from ``SSOD_THREADS`` (default 1).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from typing import List, Optional

from threadpoolctl import threadpool_limits

from .. import checkpoint as ckp
from ..autograd import NonDeterministicError, NonFiniteError
from ..scenes import export_pool, import_pool
from .config import ConfigError, ExperimentConfig, apply_override
from .experiments import ROW_SETS, build_pools, evaluate_params, run_ablation, run_distill, run_train

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

log = logging.getLogger("ssod")


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    for assignment in args.set or []:
        cfg = apply_override(cfg, assignment)
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "out", None):
        changes["out_dir"] = args.out
    return replace(cfg, **changes).validate() if changes else cfg


def _print(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    labeled, unlabeled, test = build_pools(cfg)
    for name, pool in (("labeled", labeled), ("unlabeled", unlabeled), ("test", test)):
        export_pool(pool, os.path.join(cfg.out_dir, name))
    _print({"labeled": len(labeled), "unlabeled": len(unlabeled), "test": len(test),
            "out": cfg.out_dir})
    return EXIT_OK


def cmd_train(args) -> int:
    res = run_train(_config(args))
    _print({"out": res.out_dir, "eval": res.eval.to_dict()})
    return EXIT_OK


def cmd_eval(args) -> int:
    arrays, meta = ckp.load(args.checkpoint)
    if args.config:
        cfg = _config(args)
    elif "config" in meta:
        cfg = ExperimentConfig.from_dict(meta["config"])
        for assignment in args.set or []:
            cfg = apply_override(cfg, assignment)
    else:
        raise ConfigError("checkpoint carries no config; pass --config")
    pool = import_pool(args.data) if args.data else build_pools(cfg)[2]
    result = evaluate_params(arrays, cfg, pool)
    if args.out:
        os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
        with open(args.out, "w") as fh:
            json.dump(result.to_dict(), fh, indent=2, sort_keys=True)
    _print(result.to_dict())
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    report = run_ablation(cfg, ROW_SETS[args.rows])
    _print({"out": cfg.out_dir,
            "rows": [{"name": r.name, "AP50": r.eval.AP50, "d_AP50": r.deltas["AP50"],
                      "AP": r.eval.AP, "d_AP": r.deltas["AP"]} for r in report.rows]})
    return EXIT_OK


def cmd_distill(args) -> int:
    cfg = _config(args)
    res = run_distill(cfg)
    _print(res.summary)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ssod", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed_required: bool, with_out: bool = True):
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config field, e.g. hyper.base_lr=0.02")
        p.add_argument("--seed", type=int, required=seed_required)
        if with_out:
            p.add_argument("--out", help="output directory")

    p = sub.add_parser("gen-data", help="export labeled, unlabeled and test pools")
    common(p, seed_required=False)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one model and evaluate it")
    common(p, seed_required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p, seed_required=False, with_out=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="exported pool directory (default: config test pool)")
    p.add_argument("--out", help="write the EvalResult JSON here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="component ablation with a shared seed")
    common(p, seed_required=True)
    p.add_argument("--rows", choices=sorted(ROW_SETS), default="full")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("distill", help="train, pseudo-label, retrain")
    common(p, seed_required=True)
    p.set_defaults(func=cmd_distill)
    return parser


def _threads() -> int:
    raw = os.environ.get("SSOD_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"SSOD_THREADS must be an integer, got {raw!r}")
    if n < 1:
        raise ConfigError("SSOD_THREADS must be >= 1")
    return n


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with threadpool_limits(limits=_threads()):
            return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonFiniteError, NonDeterministicError, FloatingPointError) as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
