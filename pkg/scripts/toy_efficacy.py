"""Toy training-efficacy run: 500 synthetic pairs, pretrain, then meta-train.

Usage: python3 scripts/toy_efficacy.py WORKDIR [--config configs/toy.conf] [--meta-epochs N]
Writes WORKDIR/efficacy.json with held-out MACE before/after meta training.
"""
import argparse
import json
import time
from pathlib import Path

from homolab.config import apply, read_flat
from homolab.data import SynthConfig
from homolab.metrics import identity_baseline_ace
from homolab.runs import generate_dataset, run_eval, run_pretrain, run_train, write_parent_images
from homolab.trainer import TrainConfig


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("workdir", type=Path)
    ap.add_argument("--config", default=str(Path(__file__).parents[1] / "configs" / "toy.conf"))
    ap.add_argument("--pairs", type=int, default=500)
    ap.add_argument("--meta-epochs", type=int, default=None)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    cfg = apply(TrainConfig(), {**read_flat(args.config), "seed": args.seed})
    if args.meta_epochs is not None:
        cfg = apply(cfg, {"epochs_meta": args.meta_epochs})
    w = args.workdir
    t0 = time.time()
    log = lambda m: print(f"[{time.time() - t0:7.1f}s] {m}", flush=True)

    if not (w / "data" / "split.json").is_file():
        write_parent_images(w / "scenes", args.pairs, args.seed)
        generate_dataset(w / "scenes", w / "data", SynthConfig(seed=args.seed), cfg.split, args.seed)
    log("dataset ready")
    run_pretrain(w / "data", w / "pretrain", cfg, log=log)
    before = run_eval(w / "pretrain" / "state.safetensors", w / "data", w / "eval_pretrain")
    log(f"pretrain-only D_qt MACE {before.mace:.3f}")
    run_train(w / "data", w / "meta", cfg, init=w / "pretrain" / "state.safetensors", log=log)
    after = run_eval(w / "meta" / "state.safetensors", w / "data", w / "eval_meta")
    log(f"meta-trained D_qt MACE {after.mace:.3f}")
    result = {
        "identity_baseline": identity_baseline_ace(),
        "pretrain": before.headline(),
        "meta": after.headline(),
        "seconds": time.time() - t0,
    }
    (w / "efficacy.json").write_text(json.dumps(result, indent=1, sort_keys=True) + "\n")
    print(json.dumps(result, indent=1, sort_keys=True))


if __name__ == "__main__":
    main()
