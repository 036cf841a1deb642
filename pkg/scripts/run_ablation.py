"""No-RESA / RESA / RESA+APE ablation under the pinned protocol.

    python scripts/run_ablation.py --out runs/ablation           # full protocol
    python scripts/run_ablation.py --out runs/smoke --quick     # 40 scenes, 1 seed, 3 epochs
"""

import argparse
import logging
from dataclasses import replace
from pathlib import Path

from lanepe.cli import cmd_ablate, cmd_generate, format_ablation
from lanepe.experiments import ABLATION


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--quick", action="store_true")
    ap.add_argument("--seeds", type=int, nargs="+")
    ap.add_argument("--epochs", type=int)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    protocol = ABLATION.quick() if args.quick else ABLATION
    if args.seeds:
        protocol = replace(protocol, seeds=tuple(args.seeds))
    if args.epochs:
        protocol = replace(protocol, settings=replace(protocol.settings, epochs=args.epochs, eval_every=args.epochs))

    cmd_generate(args.out / "data", protocol.count, protocol.scene)
    rows = cmd_ablate(args.out / "data", args.out / "ablation", list(protocol.seeds), protocol.settings)
    print(format_ablation(rows), end="")


if __name__ == "__main__":
    main()
