"""Run-directory orchestration shared by the CLI and the experiment scripts.

A run directory holds ``config.conf`` (resolved flat config), ``state.safetensors``
(latest checkpoint, rewritten after every epoch) and ``history.csv``.  Starting a
command on a directory that already has a checkpoint resumes from it.
"""
from __future__ import annotations

import csv
import dataclasses
import json
from pathlib import Path

import numpy as np
import torch

from . import geometry as geo
from .config import as_flat, write_flat
from .data import MetaSplit, SynthConfig, build_dataset, kind_counts, read_manifest, split_meta, write_image
from .errors import ConfigError
from .metrics import MetricsReport, ace_cdf, write_cdf_csv
from .scenes import parent_image
from .tahem import parameter_count
from .trainer import (
    TrainConfig,
    TrainState,
    aligned_pair,
    evaluate,
    init_state,
    load_pair_data,
    load_state,
    meta_train,
    predict_offsets,
    pretrain,
    save_state,
)

STATE = "state.safetensors"
HISTORY_FIELDS = ("phase", "epoch", "loss", "outer_steps", "inner_steps", "mace", "pme", "psnr", "ssim", "ncc")
ARCH_KEYS = ("widths", "head_width", "use_hsa", "use_semantic")
CDF_THRESHOLDS = tuple(float(t) for t in np.arange(0.0, 40.25, 0.25))


def write_parent_images(out_dir, count: int, seed: int) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for k in range(count):
        p = out_dir / f"scene_{k:05d}.png"
        write_image(p, parent_image(seed, k))
        paths.append(p)
    return paths


def generate_dataset(src_dir, out_dir, synth: SynthConfig, ratios, seed: int) -> tuple[list, MetaSplit]:
    records = build_dataset(src_dir, out_dir, synth)
    split = split_meta(records, ratios, seed)
    Path(out_dir, "split.json").write_text(json.dumps(split.to_dict(), sort_keys=True, indent=1) + "\n")
    return records, split


def load_split(data_dir) -> MetaSplit:
    path = Path(data_dir) / "split.json"
    if not path.is_file():
        raise FileNotFoundError(str(path))
    return MetaSplit(**json.loads(path.read_text()))


def limit_split(split: MetaSplit, limit: int | None) -> MetaSplit:
    """Keep at most ``limit`` ids per partition (smoke runs)."""
    if limit is None:
        return split
    return MetaSplit(split.support[:limit], split.query_train[:limit], split.query_test[:limit])


def write_history(path, history: list) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({k: _fmt(row.get(k)) for k in HISTORY_FIELDS})


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return v


def _checkpointer(out_dir: Path, stop_after: int | None):
    """on_epoch callback: save state + history; raise StopRun after ``stop_after`` epochs this call."""
    seen = [0]

    def on_epoch(state):
        save_state(out_dir / STATE, state)
        write_history(out_dir / "history.csv", state.history)
        seen[0] += 1
        if stop_after is not None and seen[0] >= stop_after:
            raise StopRun(seen[0])

    return on_epoch


class StopRun(Exception):
    """Deliberate interruption after a fixed number of epochs."""


def _prepare_dir(out_dir, cfg: TrainConfig) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_flat(out_dir / "config.conf", as_flat(cfg))
    return out_dir


def run_pretrain(data_dir, out_dir, cfg: TrainConfig, limit: int | None = None, stop_after: int | None = None,
                 log=None) -> TrainState:
    out_dir = _prepare_dir(out_dir, cfg)
    if (out_dir / STATE).is_file():
        state = load_state(out_dir / STATE)
        _check_resume(state.cfg, cfg)
    else:
        state = init_state(cfg, limit_split(load_split(data_dir), limit))
    data = load_pair_data(data_dir, _split_ids(state.split))
    try:
        pretrain(state, data, log=log, on_epoch=_checkpointer(out_dir, stop_after))
    except StopRun:
        return state
    save_state(out_dir / STATE, state)
    write_history(out_dir / "history.csv", state.history)
    return state


def run_train(data_dir, out_dir, cfg: TrainConfig, init=None, stop_after: int | None = None, log=None) -> TrainState:
    """Meta-train from a pretrained checkpoint ``init`` (or resume ``out_dir``)."""
    out_dir = Path(out_dir)
    if (out_dir / STATE).is_file():
        state = load_state(out_dir / STATE)
        _check_resume(state.cfg, cfg)
    else:
        if init is None:
            raise ConfigError("train needs --init <pretrained checkpoint> or an existing run directory")
        state = load_state(init)
        for k in ARCH_KEYS:
            if getattr(state.cfg, k) != getattr(cfg, k):
                raise ConfigError(f"{k} differs from the pretrained checkpoint: {getattr(cfg, k)} vs {getattr(state.cfg, k)}")
        state.cfg = cfg
    _prepare_dir(out_dir, cfg)
    data = load_pair_data(data_dir, _split_ids(state.split))
    try:
        meta_train(state, data, log=log, on_epoch=_checkpointer(out_dir, stop_after))
    except StopRun:
        return state
    save_state(out_dir / STATE, state)
    write_history(out_dir / "history.csv", state.history)
    return state


def _check_resume(saved: TrainConfig, cfg: TrainConfig):
    if saved != cfg:
        diff = [f.name for f in dataclasses.fields(cfg) if getattr(saved, f.name) != getattr(cfg, f.name)]
        raise ConfigError(f"config differs from the checkpoint in the run directory: {', '.join(diff)}")


def _split_ids(split: MetaSplit) -> list:
    return split.support + split.query_train + split.query_test


def split_ids(split: MetaSplit, name: str) -> list:
    if name == "all":
        return _split_ids(split)
    if name not in ("support", "query_train", "query_test"):
        raise ConfigError(f"unknown split {name!r}")
    return getattr(split, name)


def read_point_pairs(path) -> dict:
    """JSON object: sample id -> list of [[x_target, y_target], [x_source, y_source]]."""
    raw = json.loads(Path(path).read_text())
    return {k: np.asarray(v, dtype=np.float64).reshape(-1, 2, 2) for k, v in raw.items()}


def run_eval(checkpoint, data_dir, out_dir, split: str = "query_test", identity: bool = False, points=None,
             error_images: int = 0, n: int | None = None) -> MetricsReport:
    state = load_state(checkpoint) if not identity or checkpoint else None
    meta_split = state.split if state is not None else load_split(data_dir)
    data = load_pair_data(data_dir, split_ids(meta_split, split))
    n = n or (state.cfg.n_iters if state is not None else 5)
    pairs = read_point_pairs(points) if points else None
    report = evaluate(None if identity else state.tahem, data, n, point_pairs=pairs, identity=identity)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "metrics.json").write_text(report.to_json() + "\n")
    write_cdf_csv(out_dir / "ace_cdf.csv", ace_cdf(report.per_sample_ace, CDF_THRESHOLDS))
    if error_images:
        _dump_error_images(out_dir / "errors", state, data, n, error_images, identity)
    return report


def _dump_error_images(out_dir: Path, state, data, n, count, identity):
    """|warped source - target| for the first ``count`` samples."""
    out_dir.mkdir(parents=True, exist_ok=True)
    sub = data.batch(data.ids[:count])
    pred = torch.zeros_like(sub.offsets) if identity else predict_offsets(state.tahem, sub, n)
    size = sub.src.shape[-1]
    for k, sid in enumerate(sub.ids):
        h = geo.offsets_to_homography(geo.PatchFrame(size=(size, size)), pred[k].double().numpy())
        a, b = aligned_pair(h, sub.src[k].permute(1, 2, 0).double().numpy(), sub.tgt[k].permute(1, 2, 0).double().numpy())
        write_image(out_dir / f"{sid}_error.png", np.abs(a - b))


# Ablation ------------------------------------------------------------------

ITERATION_CELLS = tuple(f"n{k}" for k in range(3, 8))
MODULE_CELLS = ("full", "no_hsa", "no_smc_sem")
ABLATION_FIELDS = ("cell", "n_iters", "use_hsa", "use_semantic", "meta", "tahem_params",
                   "mace", "pme", "psnr", "ssim", "ncc")


def cell_config(cell: str, base: TrainConfig) -> tuple[TrainConfig, bool]:
    """(config, run meta phase) for an ablation cell."""
    if cell in ITERATION_CELLS:
        return dataclasses.replace(base, n_iters=int(cell[1:]), use_semantic=False), False
    if cell == "full":
        return base, True
    if cell == "no_hsa":
        return dataclasses.replace(base, use_hsa=False), True
    if cell == "no_smc_sem":
        return dataclasses.replace(base, use_semantic=False), True
    raise ConfigError(f"unknown ablation cell {cell!r}")


def run_ablate(data_dir, out_dir, base: TrainConfig, cells=ITERATION_CELLS + MODULE_CELLS, log=None) -> list[dict]:
    """Train each cell from scratch under a shared seed and score it on D_qt."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_flat(out_dir / "config.conf", as_flat(base))
    split = load_split(data_dir)
    data = load_pair_data(data_dir, _split_ids(split))
    held_out = data.batch(split.query_test)
    rows, sem_cache = [], None
    for cell in cells:
        cfg, meta = cell_config(cell, base)
        state = init_state(cfg, split)
        if state.sem is not None and sem_cache is not None:
            state.sem.load_state_dict(sem_cache)
            state.sem_ready = True
        pretrain(state, data, log=log)
        if state.sem is not None:
            sem_cache = state.sem.state_dict()
        if meta:
            meta_train(state, data, log=log)
        rep = evaluate(state.tahem, held_out, cfg.n_iters)
        row = {
            "cell": cell, "n_iters": cfg.n_iters, "use_hsa": cfg.use_hsa, "use_semantic": cfg.use_semantic,
            "meta": meta, "tahem_params": parameter_count(state.tahem), **rep.headline(),
        }
        rows.append(row)
        if log:
            log(f"ablation {cell}: MACE {rep.mace:.3f}")
        with open(out_dir / "ablation.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=ABLATION_FIELDS, lineterminator="\n")
            w.writeheader()
            for r in rows:
                w.writerow({k: _fmt(r[k]) for k in ABLATION_FIELDS})
    return rows


def dataset_summary(data_dir) -> dict:
    return kind_counts(read_manifest(Path(data_dir) / "manifest.jsonl"))
