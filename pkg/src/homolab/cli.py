"""Command-line entry point: ``homolab <command> [options]``.

Exit status: 0 on success, 2 for usage, missing paths or bad config, 1 for
other failures.  Every failure prints a single ``error: ...`` line.
"""
from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from . import runs
from .config import apply, read_flat
from .data import SynthConfig
from .errors import ConfigError, HomolabError
from .metrics import identity_baseline_ace
from .trainer import TrainConfig

SYNTH_KEYS = {f.name for f in dataclasses.fields(SynthConfig)}
TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}


class UsageError(Exception):
    pass


def _csv(kind):
    return lambda text: [kind(t) for t in text.split(",") if t.strip()]


def _existing(path, what) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _values(args) -> dict:
    values = read_flat(args.config) if args.config else {}
    unknown = sorted(set(values) - SYNTH_KEYS - TRAIN_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    if args.seed is not None:
        values["seed"] = args.seed
    return values


def _train_config(args, **overrides) -> TrainConfig:
    values = {k: v for k, v in _values(args).items() if k in TRAIN_KEYS}
    values.update({k: v for k, v in overrides.items() if v is not None})
    return apply(TrainConfig(), values)


def _synth_config(args) -> SynthConfig:
    values = {k: v for k, v in _values(args).items() if k in SYNTH_KEYS}
    if args.kinds:
        values["kinds"] = args.kinds
    if args.proportions:
        values["proportions"] = args.proportions
    if args.samples_per_image:
        values["samples_per_image"] = args.samples_per_image
    return apply(SynthConfig(), values)


def _log(quiet):
    return None if quiet else (lambda msg: print(msg, flush=True))


def cmd_gen_images(args) -> int:
    paths = runs.write_parent_images(args.out, args.count, args.seed or 0)
    print(f"wrote {len(paths)} scenes to {args.out}")
    return 0


def cmd_gen_data(args) -> int:
    src = _existing(args.src, "source image directory")
    synth = _synth_config(args)
    ratios = args.ratios or _train_config(args).split
    records, split = runs.generate_dataset(src, args.out, synth, ratios, synth.seed)
    counts = runs.dataset_summary(args.out)
    print(f"{len(records)} pairs: " + ", ".join(f"{k}={counts[k]}" for k in sorted(counts)))
    print(f"split: support={len(split.support)} query_train={len(split.query_train)} query_test={len(split.query_test)}")
    return 0


def cmd_pretrain(args) -> int:
    data = _existing(args.data, "dataset directory")
    cfg = _train_config(args, epochs_pretrain=args.epochs)
    state = runs.run_pretrain(data, args.out, cfg, limit=args.limit, stop_after=args.stop_after, log=_log(args.quiet))
    print(f"pretrain: {state.pretrain_epoch}/{cfg.epochs_pretrain} epochs, checkpoint {Path(args.out) / runs.STATE}")
    return 0


def cmd_train(args) -> int:
    data = _existing(args.data, "dataset directory")
    init = _existing(args.init, "pretrained checkpoint") if args.init else None
    cfg = _train_config(args, epochs_meta=args.epochs)
    state = runs.run_train(data, args.out, cfg, init=init, stop_after=args.stop_after, log=_log(args.quiet))
    print(f"train: {state.meta_epoch}/{cfg.epochs_meta} epochs, {state.outer_steps} outer / {state.inner_steps} inner steps")
    return 0


def cmd_eval(args) -> int:
    data = _existing(args.data, "dataset directory")
    ckpt = _existing(args.ckpt, "checkpoint") if args.ckpt else None
    if ckpt is None and not args.identity_baseline:
        raise UsageError("eval needs --ckpt or --identity-baseline")
    if args.points:
        _existing(args.points, "point-pair file")
    rep = runs.run_eval(ckpt, data, args.out, split=args.split, identity=args.identity_baseline,
                        points=args.points, error_images=args.error_images, n=args.n)
    line = " ".join(f"{k}={v:.4f}" for k, v in rep.headline().items() if v is not None)
    print(f"{rep.n} samples: {line}")
    if args.identity_baseline:
        print(f"closed-form identity baseline: {identity_baseline_ace():.4f}")
    return 0


def cmd_ablate(args) -> int:
    data = _existing(args.data, "dataset directory")
    cfg = _train_config(args, epochs_pretrain=args.epochs_pretrain, epochs_meta=args.epochs_meta)
    cells = args.cells or list(runs.ITERATION_CELLS + runs.MODULE_CELLS)
    rows = runs.run_ablate(data, args.out, cfg, cells, log=_log(args.quiet))
    for r in rows:
        print(f"{r['cell']:>10}  params={r['tahem_params']}  mace={r['mace']:.3f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="homolab", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def command(name, fn, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--quiet", action="store_true")
        p.set_defaults(fn=fn)
        return p

    p = command("gen-images", cmd_gen_images, "render procedural parent scenes")
    p.add_argument("--count", type=int, default=100)

    p = command("gen-data", cmd_gen_data, "synthesize degraded pairs, manifest and meta split")
    p.add_argument("--src", required=True)
    p.add_argument("--kinds", type=_csv(str))
    p.add_argument("--proportions", type=_csv(float))
    p.add_argument("--samples-per-image", type=int)
    p.add_argument("--ratios", type=_csv(float), help="support,query_train,query_test")

    p = command("pretrain", cmd_pretrain, "pretrain the detector and the estimator")
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--limit", type=int, help="cap each split partition (smoke runs)")
    p.add_argument("--stop-after", type=int, help="stop after this many epochs (resume later)")

    p = command("train", cmd_train, "meta-train from a pretrained checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--init", help="pretrained checkpoint")
    p.add_argument("--epochs", type=int)
    p.add_argument("--stop-after", type=int)

    p = command("eval", cmd_eval, "metrics, ACE CDF and error images")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt")
    p.add_argument("--split", default="query_test", choices=["support", "query_train", "query_test", "all"])
    p.add_argument("--identity-baseline", action="store_true")
    p.add_argument("--points", help="JSON point pairs per sample id for PME")
    p.add_argument("--error-images", type=int, default=0)
    p.add_argument("--n", type=int, help="iterations per scale (default: from checkpoint)")

    p = command("ablate", cmd_ablate, "iteration sweep and module toggles")
    p.add_argument("--data", required=True)
    p.add_argument("--cells", type=_csv(str), help="subset of " + ",".join(runs.ITERATION_CELLS + runs.MODULE_CELLS))
    p.add_argument("--epochs-pretrain", type=int)
    p.add_argument("--epochs-meta", type=int)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (UsageError, ConfigError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except HomolabError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
