"""``qcrf check|gradient-error|train|scaling --config PATH --seed U64 --out PATH``.

Exit codes: 0 success, 1 invariant failure or diverged training, 2 bad configuration
(including fixed-point saturation, which means ``estimator.int_bits`` is too small).
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import replace

from qcrf.crf import DomainError
from qcrf.experiments import (CHECK_HEADER, RUN_HEADER, SCALING_HEADER, TRAIN_BACKENDS,
                              TRAIN_STATUS_EXIT,
                              ConfigError, ExperimentConfig, check_seed, cmd_check,
                              cmd_gradient_error, cmd_scaling, cmd_train, load_config, write_csv)
from qcrf.sim.state import ConfigurationError

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


def _u64(text: str) -> int:
    try:
        return check_seed(int(text, 0))
    except (ValueError, ConfigError):
        raise argparse.ArgumentTypeError(f"not an unsigned 64-bit integer: {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qcrf", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in (("check", "identity and gradient invariant suite"),
                           ("gradient-error", "estimator error versus iterations"),
                           ("train", "gradient-descent trajectory"),
                           ("scaling", "naive versus factorized gradient timings")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", help="JSON experiment config (defaults built in)")
        p.add_argument("--seed", type=_u64, help="master seed, overrides the config")
        p.add_argument("--out", help="CSV output path, overrides the config (default: stdout)")
        if name == "train":
            p.add_argument("--backend", choices=TRAIN_BACKENDS, help="overrides trainer.backend")
    return parser


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, output=args.out)
    return cfg


def _emit(rows, header, cfg):
    text = write_csv(rows, header, cfg.output)
    if cfg.output is None:
        sys.stdout.write(text)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _config(args)
        if args.command == "check":
            rows, ok = cmd_check(cfg)
            _emit(rows, CHECK_HEADER, cfg)
            for r in rows:
                if r["status"] != "pass":
                    print(f"{r['status'].upper()}: {r['check']} ({r['scope']})", file=sys.stderr)
            print("check " + ("passed" if ok else "FAILED"), file=sys.stderr)
            return EXIT_OK if ok else EXIT_FAIL
        if args.command == "gradient-error":
            _emit(cmd_gradient_error(cfg), RUN_HEADER, cfg)
            return EXIT_OK
        if args.command == "train":
            rows, status, message = cmd_train(cfg, args.backend)
            _emit(rows, RUN_HEADER, cfg)
            if status != "ok":
                print(f"training stopped ({status}): {message}", file=sys.stderr)
            return TRAIN_STATUS_EXIT[status]
        _emit(cmd_scaling(cfg), SCALING_HEADER, cfg)
        return EXIT_OK
    except (ConfigError, ConfigurationError, DomainError, OSError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
