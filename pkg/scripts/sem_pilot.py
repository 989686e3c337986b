"""Detector pilot: pretrain the semantic extractor on the toy shapes corpus and report recall.

Usage: python3 scripts/sem_pilot.py [--config configs/toy.conf] [--lr ...] [--epochs ...] [--corpus ...]
Prints per-epoch loss and recall on a held-out corpus (seed + 1).
"""
import argparse
import dataclasses
import time
from pathlib import Path

from homolab.config import apply, read_flat
from homolab.scenes import detection_corpus
from homolab.sem import detection_recall, pretrain_sem
from homolab.trainer import TrainConfig


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default=str(Path(__file__).parents[1] / "configs" / "toy.conf"))
    ap.add_argument("--lr", type=float)
    ap.add_argument("--epochs", type=int)
    ap.add_argument("--corpus", type=int)
    ap.add_argument("--holdout", type=int, default=200)
    args = ap.parse_args()

    cfg = apply(TrainConfig(), read_flat(args.config))
    sem_cfg = cfg.sem_config()
    if args.lr is not None:
        sem_cfg = dataclasses.replace(sem_cfg, lr=args.lr)
    if args.epochs is not None:
        sem_cfg = dataclasses.replace(sem_cfg, epochs=args.epochs)
    n = args.corpus or cfg.sem_corpus
    t0 = time.time()
    model, hist = pretrain_sem(detection_corpus(n, cfg.seed), sem_cfg,
                               log=lambda m: print(f"[{time.time() - t0:7.1f}s] {m}", flush=True))
    recall = detection_recall(model, detection_corpus(args.holdout, cfg.seed + 1))
    print(f"lr={sem_cfg.lr} epochs={sem_cfg.epochs} corpus={n}: final loss {hist[-1]:.4f}, held-out recall {recall:.3f}")


if __name__ == "__main__":
    main()
