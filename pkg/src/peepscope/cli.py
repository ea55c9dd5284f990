"""``peepscope`` command line.

Every command takes the same run config; ``--out`` overrides its
``output_dir``. Exit codes: 0 ok, 2 config error, 3 numeric error, 4 I/O or
artifact error, 1 anything else from the library.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Sequence

from peepscope import experiment as ex
from peepscope.config import RunConfig, load_config
from peepscope.errors import ConfigError, PeepscopeError

logger = logging.getLogger("peepscope")

COMMANDS = ("generate", "inject", "train", "fit-peephole", "evaluate", "explain", "run")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="run config (TOML); built-in defaults when omitted")
    common.add_argument("--out", type=Path, help="output directory (overrides output_dir)")
    common.add_argument("--seed-override", type=int, dest="seed", help="replace the master seed")
    common.add_argument("--threads", type=int, help="torch intra-op threads (default from config)")
    common.add_argument("--small", action="store_true", help="use the small (8, 16, 64) architecture")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="peepscope", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="nominal telemetry splits")
    p = sub.add_parser("inject", parents=[common], help="corrupted validation and test sets")
    p.add_argument("--scenario", choices=("I", "II", "both"), default="both")
    p.add_argument("--kinds", default=None, help="comma list of gwn|offset|impulse|psa|step|all")
    sub.add_parser("train", parents=[common], help="train the detector and set its threshold")
    p = sub.add_parser("fit-peephole", parents=[common], help="fit peephole pipelines")
    p.add_argument("--tag-set", choices=("kinds", "wheels", "both"), default=None)
    sub.add_parser("evaluate", parents=[common], help="results bundle: AUC, confusion, bias, stream trials")
    p = sub.add_parser("explain", parents=[common], help="trace and heatmap for one stream")
    p.add_argument("--stream", type=Path, help="stream CSV; default is the first evaluation trial stream")
    p.add_argument("--stride", type=int, default=None)
    p = sub.add_parser("run", parents=[common], help="all stages in order")
    return parser


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.threads is not None:
        changes["threads"] = args.threads
    if args.out is not None:
        changes["output_dir"] = str(args.out)
    return cfg.replace(**changes) if changes else cfg


def _dispatch(args) -> None:
    cfg = _config(args)
    run = ex.Run(cfg)
    cmd = args.command
    if cmd == "generate":
        ex.generate(run)
    elif cmd == "inject":
        scenarios = ("I", "II") if args.scenario == "both" else (args.scenario,)
        kinds = args.kinds.split(",") if args.kinds else None
        ex.inject(run, scenarios, kinds)
    elif cmd == "train":
        ex.train(run, small=args.small)
    elif cmd == "fit-peephole":
        tag_sets = {None: None, "both": ("kinds", "wheels")}.get(args.tag_set, (args.tag_set,))
        ex.fit_peephole(run, tag_sets)
    elif cmd == "evaluate":
        results = ex.evaluate(run)
        for key, value in sorted(results.get("auc", {}).items()):
            print(f"AUC {key}: {value:.4f}")
        print(f"test FPR: {results['test_fpr']:.4g}")
    elif cmd == "explain":
        if args.stride is not None and args.stride < 1:
            raise ConfigError("--stride must be at least 1")
        target = ex.explain(run, args.stream, args.stride)
        print(target)
    elif cmd == "run":
        ex.run_all(cfg, small=args.small)


def main(argv: Sequence[str] | None = None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with code 2 already
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose + 1, 2),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        _dispatch(args)
    except PeepscopeError as exc:
        print(f"peepscope: error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
