#!/usr/bin/env python3
"""(alpha, beta) validation surface on synthetic data, with a heatmap and curvature verdicts.

    python3 scripts/alpha_beta_sweep.py --grid 0,1,2,3,4,5 --epochs 40 --workers 4 --out runs/sweep
"""

import argparse
from pathlib import Path

from crossdenoise import landscape
from crossdenoise.ingest import split, synth_generate
from crossdenoise.trainer import TrainConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--grid", default="0,1,2,3,4,5", help="values shared by both axes")
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--epochs", type=int, default=40)
    ap.add_argument("--batch-size", type=int, default=256)
    ap.add_argument("--data-seed", type=int, default=0)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--out", default="runs/sweep")
    args = ap.parse_args()

    values = [float(v) for v in args.grid.split(",")]
    seeds = tuple(int(s) for s in args.seeds.split(","))
    sp = split(synth_generate(500, 300, 8, 0.3, seed=args.data_seed), seed=args.data_seed)
    cfg = TrainConfig(max_epochs=args.epochs, batch_size=args.batch_size)
    surf = landscape.sweep(sp, cfg, values, values, seeds=seeds, workers=args.workers)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "surface.csv").write_text(surf.to_csv())
    (out / "surface.svg").write_text(landscape.surface_to_svg(surf))
    verdicts = landscape.grid_verdicts(surf)
    (out / "verdicts.csv").write_text(landscape.verdicts_to_csv(verdicts))
    print(surf.to_csv())
    if surf.best():
        a, b, s = surf.best()
        print(f"best alpha={a:g} beta={b:g} {surf.metric}={s:.4f}")
    for v in verdicts:
        print(f"({v.alpha:g}, {v.beta:g}) {v.classification}  detH={v.det_h:.3g}")


if __name__ == "__main__":
    main()
