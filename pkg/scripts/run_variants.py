"""Train every network variant on the ablation dataset and export stage images.

For each variant this writes a checkpoint, manifest and metrics CSV, then
the per-stage feature images for one held-out noise-free scene.

    python scripts/run_variants.py --out runs/variants --seed 0
"""

import argparse
import logging
from dataclasses import replace
from pathlib import Path

from lanepe.cli import cmd_generate, cmd_train, cmd_visualize
from lanepe.experiments import ABLATION
from lanepe.lane_net import VARIANTS
from lanepe.synthetic_data import SceneSpec, generate, write_dataset


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=ABLATION.settings.epochs)
    ap.add_argument("--variants", nargs="+", default=list(VARIANTS), choices=VARIANTS)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    data = args.out / "data"
    cmd_generate(data, ABLATION.count, ABLATION.scene)
    probe = generate(SceneSpec(**{**ABLATION.scene.to_dict(), "noise": 0.0, "image_noise": 0.0, "seed": 8080}), 1)
    write_dataset(args.out / "probe", probe)
    probe_image = args.out / "probe" / probe[0].label.raw_file

    settings = replace(ABLATION.settings, seed=args.seed, epochs=args.epochs, eval_every=max(1, args.epochs // 10))
    results = {}
    for variant in args.variants:
        run = args.out / variant
        m = cmd_train(data, run, replace(settings, variant=variant))
        cmd_visualize(run / "checkpoint.npz", probe_image, run / "stages")
        results[variant] = m.final_accuracy
    width = max(map(len, results))
    for variant, acc in results.items():
        print(f"{variant:<{width}}  {acc:.4f}")


if __name__ == "__main__":
    main()
