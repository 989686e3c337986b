"""Iteration-count and module ablations on a toy dataset.

Usage: python3 scripts/ablation_sweep.py WORKDIR [--config configs/toy.conf]
       [--pairs 500] [--epochs-pretrain 8] [--epochs-meta 10] [--cells n3,n4,...]
Writes WORKDIR/ablate/ablation.csv (one row per cell, all five metrics on D_qt).
"""
import argparse
import time
from pathlib import Path

from homolab.config import apply, read_flat
from homolab.data import SynthConfig
from homolab.runs import ITERATION_CELLS, MODULE_CELLS, generate_dataset, run_ablate, write_parent_images
from homolab.trainer import TrainConfig


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("workdir", type=Path)
    ap.add_argument("--config", default=str(Path(__file__).parents[1] / "configs" / "toy.conf"))
    ap.add_argument("--pairs", type=int, default=500)
    ap.add_argument("--epochs-pretrain", type=int, default=8)
    ap.add_argument("--epochs-meta", type=int, default=10)
    ap.add_argument("--cells", default=",".join(ITERATION_CELLS + MODULE_CELLS))
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    cfg = apply(TrainConfig(), {**read_flat(args.config), "seed": args.seed,
                                "epochs_pretrain": args.epochs_pretrain, "epochs_meta": args.epochs_meta})
    w = args.workdir
    t0 = time.time()
    log = lambda m: print(f"[{time.time() - t0:7.1f}s] {m}", flush=True)
    if not (w / "data" / "split.json").is_file():
        write_parent_images(w / "scenes", args.pairs, args.seed)
        generate_dataset(w / "scenes", w / "data", SynthConfig(seed=args.seed), cfg.split, args.seed)
    rows = run_ablate(w / "data", w / "ablate", cfg, cells=tuple(args.cells.split(",")), log=log)
    for r in rows:
        print(f"{r['cell']:>11}  mace={r['mace']:.3f}  pme={r['pme']:.3f}  psnr={r['psnr']:.2f}  "
              f"ssim={r['ssim']:.4f}  ncc={r['ncc']:.4f}")


if __name__ == "__main__":
    main()
