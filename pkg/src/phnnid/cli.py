"""Command-line entry point: ``phnnid {generate,linest,train,sweep,report}``.

Exit codes: 0 success, 1 usage error (bad arguments, bad config, missing
inputs), 2 numerical failure (diverged training, unstable simulation,
singular factorizations).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from . import experiments as ex
from .linear_ident import RankDeficiencyError
from .model import MODES
from .msd import SimulationError
from .training import TrainingAborted

NUMERICAL_ERRORS = (TrainingAborted, SimulationError, RankDeficiencyError,
                    np.linalg.LinAlgError, FloatingPointError)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(1)


def _common(p):
    p.add_argument("--config", help="JSON experiment config (unknown keys are rejected)")
    p.add_argument("--out", help=f"output root (default: ${ex.ENV_OUTPUT} or ./phnnid-out)")
    p.add_argument("--snr", type=float, help="signal-to-noise ratio in dB")
    p.add_argument("--iterations", type=int, help="training iteration budget")
    p.add_argument("--pretrain-iterations", type=int, help="encoder pretraining budget")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="phnnid", description="Port-Hamiltonian neural network identification")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="simulate the eight mass-spring-damper records")
    _common(p)

    p = sub.add_parser("linest", help="linear port-Hamiltonian estimate")
    _common(p)
    p.add_argument("--direct", action="store_true",
                   help="train the constant-matrix model instead of the subspace route")

    p = sub.add_parser("train", help="one training run")
    _common(p)
    p.add_argument("--mode", required=True, choices=MODES)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("sweep", help="noise-level study with the linear-initialized model")
    _common(p)
    p.add_argument("--seeds", type=int, help="number of seeds (0..N-1); default from config")
    p.add_argument("--snrs", type=float, nargs="+", help="SNR levels in dB")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")

    p = sub.add_parser("report", help="aggregate finished runs into CSV tables")
    _common(p)
    p.add_argument("--seeds", type=int, help="number of seeds (0..N-1); default from config")
    return parser


def _config(args) -> ex.ExperimentConfig:
    cfg = ex.ExperimentConfig.load(args.config) if args.config else ex.ExperimentConfig()
    train, kw = {}, {}
    if args.iterations is not None:
        train["iterations"] = args.iterations
    if args.pretrain_iterations is not None:
        train["pretrain_iterations"] = args.pretrain_iterations
    if args.out:
        kw["output_dir"] = args.out
    if getattr(args, "seeds", None) is not None:
        if args.seeds < 1:
            raise ex.UsageError("--seeds must be >= 1")
        kw["seeds"] = tuple(range(args.seeds))
    if getattr(args, "snrs", None):
        kw["snrs"] = tuple(args.snrs)
    try:
        return cfg.replace(train=train, **kw)
    except (TypeError, ValueError) as exc:
        raise ex.UsageError(str(exc)) from None


def run(args) -> None:
    cfg = _config(args)
    snr = args.snr
    if args.command == "generate":
        paths = ex.cmd_generate(cfg, snr)
        print(f"wrote {len(paths)} records to {paths[0].parent}")
    elif args.command == "linest":
        path = ex.cmd_linest(cfg, snr, direct=args.direct)
        print(f"wrote {path}")
    elif args.command == "train":
        out = ex.cmd_train(cfg, args.mode, args.seed, snr)
        summary = json.loads((out / "summary.json").read_text())
        print(f"{args.mode} seed {args.seed}: best val NRMSE {summary['best_val_nrmse']:.4g} "
              f"(iter {summary['best_iter']}), test NRMSE {summary['test_nrmse']:.4g}")
        print(f"wrote {out}")
    elif args.command == "sweep":
        path = ex.cmd_sweep(cfg, jobs=args.jobs)
        print(path.read_text(), end="")
    elif args.command == "report":
        res = ex.cmd_report(cfg, snr)
        for name, path in res["paths"].items():
            print(f"{name}: {path}")
        if res["missing"]:
            print("missing runs: " + ", ".join(res["missing"]))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run(args)
    except ex.UsageError as exc:
        print(f"phnnid: error: {exc}", file=sys.stderr)
        return 1
    except NUMERICAL_ERRORS as exc:
        print(f"phnnid: numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"phnnid: I/O error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
