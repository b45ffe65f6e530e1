"""Command-line entry point: `ntkdfl run|validate --config <path>`."""

import argparse
import sys
from pathlib import Path

from .config import parse_config, serialize
from .errors import ConfigError
from .experiment import DATA_ROOT_ENV, run_experiment


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ntkdfl",
        description="Deterministic decentralized-federated-learning simulator "
                    "with kernel-based weight evolution and SGD baselines.",
        epilog=f"Relative dataset paths resolve against ${DATA_ROOT_ENV} when set.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute an experiment")
    run.add_argument("--config", required=True, help="path to a JSON config")
    run.add_argument("--seed", type=int, default=None,
                     help="override the config's seed list with one seed")
    run.add_argument("--out", default=None, help="override the output directory")

    val = sub.add_parser("validate", help="parse and validate a config, then exit")
    val.add_argument("--config", required=True, help="path to a JSON config")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = parse_config(Path(args.config).read_text())
    except OSError as e:
        print(f"error: cannot read config: {e}", file=sys.stderr)
        return 2
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2

    if args.command == "validate":
        print(f"config OK: algorithm={cfg.algorithm}, clients={cfg.num_clients}, "
              f"rounds={cfg.rounds}, seeds={cfg.seed}")
        return 0

    if args.seed is not None:
        cfg.seed = [args.seed]
    try:
        run_dirs = run_experiment(cfg, args.out)
    except (OSError, ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    for d in run_dirs:
        print(f"wrote {d}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
