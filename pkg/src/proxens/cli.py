"""Command-line entry point: ``proxens <verb> --config FILE [--seed N] [--out-dir DIR] [--jobs N]``.

Exit codes: 0 success, 1 config error, 2 data error, 3 runtime failure
(partial reports are still written).
"""

import argparse
import logging
import sys

from .errors import ConfigError, DataError
from .experiment import ExperimentConfig, Runner

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3


def build_parser():
    parser = argparse.ArgumentParser(prog="proxens", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="experiment YAML file")
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--out-dir", default="out", help="output directory (default: out)")
    common.add_argument("--jobs", type=int, default=1, help="parallel dataset cells")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for verb, text in [
        ("prepare", "build and cache frame datasets"),
        ("run", "fit machines and ensembles, write metric reports"),
        ("tune", "tune ensembles and export trial memories"),
        ("ablate", "grid vs TPE ablation over COBRA/DPE/PaDPE"),
        ("report", "recompute comparison reports from metric matrices"),
    ]:
        sub.add_parser(verb, parents=[common], help=text)
    sweep = sub.add_parser("sweep", parents=[common], help="alpha or epsilon sensitivity curve")
    sweep.add_argument("--param", choices=("alpha", "epsilon"), required=True)
    dyn = sub.add_parser("dynamic", parents=[common], help="multi-step forecast with a rolling scaler")
    dyn.add_argument("--horizon", type=int, default=None)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = ExperimentConfig.load(args.config, seed=args.seed)
        runner = Runner(cfg, args.out_dir, args.jobs)
        if args.command == "sweep":
            runner.cmd_sweep(args.param)
        elif args.command == "dynamic":
            runner.cmd_dynamic(args.horizon)
        else:
            getattr(runner, f"cmd_{args.command}")()
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    if runner.failures:
        for f in runner.failures:
            print(f"failed cell {f['dataset']}/{f['model']}: {f['error']}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
