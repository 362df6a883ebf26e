"""Command-line driver.

    fscod gen-dataset --config exp.yaml --out runs/a
    fscod train       --config exp.yaml --out runs/a
    fscod eval        --config exp.yaml --out runs/a
    fscod report      --out runs/a

Exit codes: 0 on success, 2 for configuration problems (bad flags, bad
YAML, hash mismatches between stages), 3 when a stage starts but cannot
finish (diverged training, undecodable data, infeasible scenes).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import experiment, report
from .config import ConfigError, load_config
from .dataset_io import DatasetFormatError
from .experiment import RuntimeAbortError
from .nn import ChecksumError, NonFiniteError, ShapeError, VersionError
from .sim import SceneInfeasibleError
from .transport import MessageDecodeError

_ABORTS = (
    RuntimeAbortError,
    NonFiniteError,
    SceneInfeasibleError,
    DatasetFormatError,
    MessageDecodeError,
    ChecksumError,
    VersionError,
    ShapeError,
)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="fscod",
        description="cooperative detection experiments on synthetic LIDAR scenes",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    def stage(name: str, help_text: str, with_config: bool = True):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--out", required=True, help="run directory")
        if with_config:
            p.add_argument("--config", help="YAML config file")
            p.add_argument("--seed", type=int, help="master seed (overrides the file)")
            p.add_argument("--preset", choices=("lo", "hi"), help="grid geometry preset")
            p.add_argument(
                "--ct", type=int, nargs="+", metavar="N",
                help="transmitted channel widths to train and evaluate",
            )
        return p

    stage("gen-dataset", "generate train and val scene datasets")
    stage("train", "train single-view and cooperative models")
    stage("eval", "score the validation split and write reports")
    stage("report", "rebuild reports from persisted detections", with_config=False)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    out = Path(args.out)
    try:
        if args.command == "report":
            report.generate(out / "eval")
            return 0
        cfg = load_config(
            args.config,
            seed=args.seed,
            preset=args.preset,
            ct=tuple(args.ct) if args.ct else None,
        )
        if args.command == "gen-dataset":
            experiment.generate_dataset(cfg, out)
        elif args.command == "train":
            experiment.train(cfg, out)
        elif args.command == "eval":
            experiment.evaluate_run(cfg, out)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except _ABORTS as e:
        print(f"abort: {e}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
