"""Command line entry point.

    tonguesim {fit,track,simulate,bench} --config run.ini [--modes R] [--out DIR] [--seed N]
    tonguesim demo DIR [--seed N]

Exit codes: 0 success, 1 validation error, 2 numerical failure, 3 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .config import load_config
from .errors import TongueSimError

log = logging.getLogger("tonguesim")

COMMANDS = {
    "fit": pipeline.cmd_fit,
    "track": pipeline.cmd_track,
    "simulate": pipeline.cmd_simulate,
    "bench": pipeline.cmd_bench,
}

HELP = {
    "fit": "deform the rest mesh so its plane sections match 2D contours",
    "track": "track speckle seeds through an image sequence, write trajectories.csv",
    "simulate": "drive the reduced model from trajectories, images or a bump; export frames",
    "bench": "time the per-step solve, reconstruction and volume cost",
}


def build_parser():
    p = argparse.ArgumentParser(prog="tonguesim",
                                description="Reduced modal tongue simulation driven by image tracking.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        s = sub.add_parser(name, help=HELP[name], description=HELP[name])
        s.add_argument("--config", required=True, help="INI run configuration")
        s.add_argument("--modes", type=int, help="override modal.modes")
        s.add_argument("--out", help="override output.dir")
        s.add_argument("--seed", type=int, help="override run.seed")
    d = sub.add_parser("demo", help="write a bar mesh, synthetic images and example configs")
    d.add_argument("dir")
    d.add_argument("--seed", type=int, default=0)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "demo":
            pipeline.make_demo(args.dir, args.seed)
            return 0
        cfg = load_config(args.config, {"modes": args.modes, "out": args.out, "seed": args.seed})
        COMMANDS[args.command](cfg)
    except TongueSimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
