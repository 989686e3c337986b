"""Pretraining and the alternating inner/outer meta-training loop.

Inner steps update only the constraint module (SMC) on query-train batches;
outer steps update only the estimator on support batches with
``L_h + lam * (L_m(1/8) + L_m(1/4))``.  The semantic detector is frozen
after its own pretraining.
"""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import geometry as geo
from .checkpoint import (
    load_checkpoint,
    optimizer_tensors,
    prefixed,
    restore_optimizer,
    save_checkpoint,
    unprefixed,
)
from .data import MetaSplit, read_image, read_manifest
from .errors import ConfigError, EmptySet, NonFiniteLoss, WrongSplit
from .metrics import MetricsReport, mace, ncc, pme, psnr, ssim
from .scenes import detection_corpus
from .sem import SEM, SemConfig, extract_semantic, freeze, pretrain_sem
from .smc import SMC
from .tahem import TAHEM, ModelConfig, loss_h, parameter_count


@dataclass
class TrainConfig:
    lam: float = 0.1
    n_iters: int = 5
    outer_per_inner: int = 3
    lr_tahem: float = 1e-4
    lr_pretrain: float = 1e-4
    lr_smc: float = 1e-4
    lr_sem: float = 1e-3
    epochs_pretrain: int = 20
    epochs_meta: int = 50
    epochs_sem: int = 20
    batch_pretrain: int = 32
    batch_meta: int = 16
    batch_sem: int = 32
    sem_corpus: int = 1000
    weight_decay: float = 0.01
    smc_optimizer: str = "adamw"
    eval_every: int = 5
    widths: tuple = (32, 64, 96)
    head_width: int = 64
    use_hsa: bool = True
    use_semantic: bool = True
    split: tuple = (0.6, 0.2, 0.2)
    seed: int = 0

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.split = tuple(float(r) for r in self.split)
        if self.lam < 0:
            raise ConfigError(f"lam must be >= 0, got {self.lam}")
        if self.outer_per_inner < 1:
            raise ConfigError(f"outer_per_inner must be >= 1, got {self.outer_per_inner}")
        if self.smc_optimizer not in ("adamw", "sgd"):
            raise ConfigError(f"smc_optimizer must be adamw or sgd, got {self.smc_optimizer}")

    def model_config(self) -> ModelConfig:
        return ModelConfig(widths=self.widths, head_width=self.head_width, use_hsa=self.use_hsa)

    def sem_config(self) -> SemConfig:
        return SemConfig(lr=self.lr_sem, epochs=self.epochs_sem, batch=self.batch_sem, seed=self.seed)


# Data ----------------------------------------------------------------------


@dataclass
class PairData:
    """In-memory pairs as float tensors in [0, 1], channels first."""

    ids: list
    kinds: list
    src: torch.Tensor
    tgt: torch.Tensor
    gt: torch.Tensor
    offsets: torch.Tensor

    def __post_init__(self):
        self.index = {i: k for k, i in enumerate(self.ids)}

    def __len__(self):
        return len(self.ids)

    def batch(self, ids) -> "PairData":
        rows = torch.tensor([self.index[i] for i in ids], dtype=torch.long)
        return PairData(
            list(ids), [self.kinds[r] for r in rows.tolist()],
            self.src[rows], self.tgt[rows], self.gt[rows], self.offsets[rows],
        )

    def to(self, dtype) -> "PairData":
        return dataclasses.replace(
            self, src=self.src.to(dtype), tgt=self.tgt.to(dtype), gt=self.gt.to(dtype), offsets=self.offsets.to(dtype)
        )


def _chw(images) -> torch.Tensor:
    arr = np.stack(images).astype(np.float32)
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()


def pair_data_from_samples(samples) -> PairData:
    return PairData(
        [s.id for s in samples],
        [s.degradation.kind for s in samples],
        _chw([s.source_patch for s in samples]),
        _chw([s.target_patch for s in samples]),
        _chw([s.overlap_gt for s in samples]),
        torch.tensor(np.stack([s.offsets_gt for s in samples]), dtype=torch.float32),
    )


def load_pair_data(data_dir, ids=None) -> PairData:
    data_dir = Path(data_dir)
    records = read_manifest(data_dir / "manifest.jsonl")
    if ids is not None:
        wanted = set(ids)
        records = [r for r in records if r["id"] in wanted]
    if not records:
        raise EmptySet(f"no samples in {data_dir}")

    def load(r, key):
        return read_image(data_dir / r["files"][key]).astype(np.float32)

    return PairData(
        [r["id"] for r in records],
        [r["degradation"]["kind"] for r in records],
        _chw([load(r, "src") for r in records]),
        _chw([load(r, "tgt") for r in records]),
        _chw([load(r, "gt") for r in records]),
        torch.tensor([r["offsets"] for r in records], dtype=torch.float32).reshape(-1, 4, 2),
    )


def batches(ids, size: int, rng: np.random.Generator) -> list[list]:
    order = [ids[k] for k in rng.permutation(len(ids))]
    return [order[k : k + size] for k in range(0, len(order), size)]


def epoch_rng(seed: int, stream: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream, epoch])


# State ---------------------------------------------------------------------

PRETRAIN_STREAM, SUPPORT_STREAM, QUERY_STREAM = 1, 2, 3


@dataclass
class TrainState:
    cfg: TrainConfig
    tahem: TAHEM
    smc: SMC | None
    sem: SEM | None
    opt_tahem: torch.optim.Optimizer
    opt_smc: torch.optim.Optimizer | None
    split: MetaSplit
    sem_ready: bool = False
    pretrain_epoch: int = 0
    meta_epoch: int = 0
    meta_steps: int = 0
    inner_steps: int = 0
    outer_steps: int = 0
    history: list = field(default_factory=list)


def make_optimizer(params, kind: str, lr: float, weight_decay: float):
    if kind == "sgd":
        return torch.optim.SGD(params, lr=lr, momentum=0.0)
    return torch.optim.AdamW(params, lr=lr, weight_decay=weight_decay)


def init_state(cfg: TrainConfig, split: MetaSplit) -> TrainState:
    torch.manual_seed(cfg.seed)
    tahem = TAHEM(cfg.model_config())
    smc = sem = opt_smc = None
    if cfg.use_semantic:
        sem = SEM(cfg.sem_config())
        smc = SMC(tahem.cfg.widths[1:], sem.channels)
        opt_smc = make_optimizer(smc.parameters(), cfg.smc_optimizer, cfg.lr_smc, cfg.weight_decay)
    opt_tahem = make_optimizer(tahem.parameters(), "adamw", cfg.lr_tahem, cfg.weight_decay)
    return TrainState(cfg, tahem, smc, sem, opt_tahem, opt_smc, split)


def param_hash(module: torch.nn.Module | None) -> str:
    h = hashlib.sha256()
    if module is None:
        return h.hexdigest()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def state_hashes(state: TrainState) -> dict:
    return {"tahem": param_hash(state.tahem), "smc": param_hash(state.smc), "sem": param_hash(state.sem)}


# Steps ---------------------------------------------------------------------


def _require_split(ids, allowed, name):
    bad = sorted(set(ids) - set(allowed))
    if bad:
        raise WrongSplit(f"{len(bad)} ids not in {name}, e.g. {bad[0]}")


def _apply(opt, params, grads):
    for p, g in zip(params, grads):
        p.grad = g
    opt.step()
    for p in params:
        p.grad = None


def semantic_losses(state: TrainState, batch: PairData, struct) -> tuple[torch.Tensor, torch.Tensor]:
    sem_feats = extract_semantic(batch.gt, state.sem)
    return state.smc.losses(sem_feats, struct)


def inner_step(state: TrainState, batch: PairData) -> float:
    """One SMC update from a query-train batch; estimator and detector stay fixed."""
    _require_split(batch.ids, state.split.query_train, "query_train")
    with torch.no_grad():
        struct = state.tahem.extract_pyramid(batch.src)
    l8, l4 = semantic_losses(state, batch, struct)
    loss = l8 + l4
    if not torch.isfinite(loss):
        raise NonFiniteLoss(f"inner step {state.inner_steps}", loss.item())
    params = list(state.smc.parameters())
    _apply(state.opt_smc, params, torch.autograd.grad(loss, params))
    state.inner_steps += 1
    return loss.item()


def outer_objective(state: TrainState, batch: PairData):
    """(L_h, L_m at 1/8, L_m at 1/4); the L_m terms are None without semantic guidance."""
    trace = state.tahem(batch.src, batch.tgt, state.cfg.n_iters)
    lh = loss_h(trace, batch.offsets)
    if state.smc is None:
        return lh, None, None
    l8, l4 = semantic_losses(state, batch, trace.features)
    return lh, l8, l4


def outer_step(state: TrainState, batch: PairData) -> float:
    """One estimator update from a support batch; SMC and detector stay fixed."""
    _require_split(batch.ids, state.split.support, "support")
    lh, l8, l4 = outer_objective(state, batch)
    loss = lh if l8 is None else lh + state.cfg.lam * (l8 + l4)
    if not torch.isfinite(loss):
        raise NonFiniteLoss(f"outer step {state.outer_steps}", loss.item())
    params = list(state.tahem.parameters())
    _apply(state.opt_tahem, params, torch.autograd.grad(loss, params))
    state.outer_steps += 1
    return loss.item()


def step_kind(k: int, outer_per_inner: int) -> str:
    """'O' or 'I' for global meta step ``k``: outer_per_inner outer steps, then one inner."""
    return "I" if k % (outer_per_inner + 1) == outer_per_inner else "O"


# Evaluation ----------------------------------------------------------------


@torch.no_grad()
def predict_offsets(tahem: TAHEM, data: PairData, n: int, batch: int = 32) -> torch.Tensor:
    tahem.eval()
    out = [tahem(data.src[k : k + batch], data.tgt[k : k + batch], n).final_offsets for k in range(0, len(data), batch)]
    tahem.train()
    return torch.cat(out)


def grid_point_pairs(offsets_gt: np.ndarray, size: int = 128, steps: int = 5) -> np.ndarray:
    """(target point, source point) pairs on an interior grid, using the true homography."""
    h = geo.offsets_to_homography(geo.PatchFrame(size=(size, size)), offsets_gt)
    ticks = np.linspace(size / 8, size * 7 / 8, steps)
    pts = np.stack(np.meshgrid(ticks, ticks), -1).reshape(-1, 2)
    return np.stack([pts, geo.warp_points(h, pts)], axis=1)


def aligned_pair(h_pred: np.ndarray, src: np.ndarray, tgt: np.ndarray):
    """Source warped into the target frame, and the target, both zeroed outside the valid warp."""
    rows, cols = tgt.shape[:2]
    warped = geo.warp_image(geo.invert(h_pred), src, (rows, cols))
    valid = geo.warp_validity(geo.invert(h_pred), src.shape[:2], (rows, cols))[..., None]
    return warped * valid, tgt * valid


def _report(idx, per_ace, quality, pmes) -> MetricsReport:
    q = np.array([quality[i] for i in idx])
    p = [pmes[i] for i in idx if pmes[i] is not None]
    ps = q[:, 0]
    return MetricsReport(
        mace=float(np.mean([per_ace[i] for i in idx])),
        psnr=float(ps.mean()),
        ssim=float(q[:, 1].mean()),
        ncc=float(q[:, 2].mean()),
        pme=float(np.mean(p)) if p else None,
        per_sample_ace=[per_ace[i] for i in idx],
        psnr_capped=int(np.sum(ps >= 100.0)),
        n=len(idx),
    )


def evaluate(
    tahem: TAHEM | None, data: PairData, n: int = 5, point_pairs: dict | None = None, identity: bool = False
) -> MetricsReport:
    """All five metrics plus a per-degradation breakdown.

    ``identity=True`` (or ``tahem=None``) scores the zero-offset predictor.
    ``point_pairs`` maps sample id to (target, source) point pairs for PME;
    by default a 5x5 grid mapped through the true homography is used.
    """
    if len(data) == 0:
        raise EmptySet("nothing to evaluate")
    if identity or tahem is None:
        pred = torch.zeros_like(data.offsets)
    else:
        pred = predict_offsets(tahem, data, n)
    pred = pred.double().numpy()
    gt = data.offsets.double().numpy()
    _, per_ace = mace(pred, gt)
    size = data.src.shape[-1]
    frame = geo.PatchFrame(size=(size, size))
    quality, pmes = [], []
    for k, sid in enumerate(data.ids):
        h_pred = geo.offsets_to_homography(frame, pred[k])
        a, b = aligned_pair(h_pred, data.src[k].permute(1, 2, 0).double().numpy(), data.tgt[k].permute(1, 2, 0).double().numpy())
        quality.append((psnr(a, b, peak=1.0), ssim(a, b, data_range=1.0), ncc(a, b)))
        pairs = point_pairs.get(sid) if point_pairs is not None else grid_point_pairs(gt[k], size)
        pmes.append(pme(h_pred, pairs) if pairs is not None and len(pairs) else None)
    report = _report(range(len(data)), per_ace, quality, pmes)
    for kind in sorted(set(data.kinds)):
        idx = [i for i, kk in enumerate(data.kinds) if kk == kind]
        report.by_kind[kind] = _report(idx, per_ace, quality, pmes)
    return report


def _history_row(state, phase, epoch, report: MetricsReport | None, loss: float) -> dict:
    row = {"phase": phase, "epoch": epoch, "loss": loss, "outer_steps": state.outer_steps, "inner_steps": state.inner_steps}
    if report is not None:
        row.update({k: v for k, v in report.headline().items()})
    return row


def _set_lr(opt, lr: float) -> None:
    for g in opt.param_groups:
        g["lr"] = lr


def _eval_due(epoch: int, total: int, every: int) -> bool:
    return (epoch + 1) % every == 0 or epoch + 1 == total


# Loops ---------------------------------------------------------------------


def pretrain(state: TrainState, data: PairData, log=None, on_epoch=None) -> TrainState:
    """Detector pretraining (then frozen), followed by estimator training with L_h on D_s + D_qr."""
    cfg = state.cfg
    if state.sem is not None and not state.sem_ready:
        corpus = detection_corpus(cfg.sem_corpus, cfg.seed)
        state.sem, sem_hist = pretrain_sem(corpus, cfg.sem_config(), log=log)
        state.history.append({"phase": "sem", "epoch": cfg.epochs_sem - 1, "loss": sem_hist[-1]})
        state.sem_ready = True
        if on_epoch:
            on_epoch(state)
    train_ids = state.split.support + state.split.query_train
    if not train_ids:
        raise EmptySet("pretraining needs support or query-train samples")
    held_out = data.batch(state.split.query_test) if state.split.query_test else None
    params = list(state.tahem.parameters())
    _set_lr(state.opt_tahem, cfg.lr_pretrain)
    while state.pretrain_epoch < cfg.epochs_pretrain:
        epoch = state.pretrain_epoch
        total = 0.0
        for bid, ids in enumerate(batches(train_ids, cfg.batch_pretrain, epoch_rng(cfg.seed, PRETRAIN_STREAM, epoch))):
            b = data.batch(ids)
            loss = loss_h(state.tahem(b.src, b.tgt, cfg.n_iters), b.offsets)
            if not torch.isfinite(loss):
                raise NonFiniteLoss(f"pretrain epoch {epoch} batch {bid}", loss.item())
            _apply(state.opt_tahem, params, torch.autograd.grad(loss, params))
            total += loss.item() * len(ids)
        report = None
        if held_out is not None and _eval_due(epoch, cfg.epochs_pretrain, cfg.eval_every):
            report = evaluate(state.tahem, held_out, cfg.n_iters)
        state.history.append(_history_row(state, "pretrain", epoch, report, total / len(train_ids)))
        state.pretrain_epoch += 1
        if log:
            msg = f"pretrain epoch {epoch}: loss {total / len(train_ids):.4f}"
            log(msg + (f" held-out MACE {report.mace:.3f}" if report else ""))
        if on_epoch:
            on_epoch(state)
    return state


def meta_train(state: TrainState, data: PairData, epochs: int | None = None, max_steps: int | None = None,
               log=None, on_step=None, on_epoch=None) -> TrainState:
    """Alternate outer (support) and inner (query-train) steps in a fixed outer:inner cycle.

    A state without semantic guidance only takes outer steps (the no-SMC/SEM ablation).
    """
    cfg = state.cfg
    epochs = cfg.epochs_meta if epochs is None else epochs
    guided = state.smc is not None  # without SMC/SEM every step is an outer L_h step
    if not state.split.support or (guided and not state.split.query_train):
        raise EmptySet("meta training needs support and query-train samples")
    held_out = data.batch(state.split.query_test) if state.split.query_test else None
    _set_lr(state.opt_tahem, cfg.lr_tahem)
    while state.meta_epoch < epochs:
        epoch = state.meta_epoch
        queries = batches(state.split.query_train, cfg.batch_meta, epoch_rng(cfg.seed, QUERY_STREAM, epoch))
        qpos = 0
        total, count = 0.0, 0
        for ids in batches(state.split.support, cfg.batch_meta, epoch_rng(cfg.seed, SUPPORT_STREAM, epoch)):
            while guided and step_kind(state.meta_steps, cfg.outer_per_inner) == "I":
                if max_steps is not None and state.meta_steps >= max_steps:
                    return state
                inner_step(state, data.batch(queries[qpos % len(queries)]))
                qpos += 1
                state.meta_steps += 1
                if on_step:
                    on_step("I", state)
            if max_steps is not None and state.meta_steps >= max_steps:
                return state
            total += outer_step(state, data.batch(ids)) * len(ids)
            count += len(ids)
            state.meta_steps += 1
            if on_step:
                on_step("O", state)
        report = None
        if held_out is not None and _eval_due(epoch, epochs, cfg.eval_every):
            report = evaluate(state.tahem, held_out, cfg.n_iters)
        state.history.append(_history_row(state, "meta", epoch, report, total / max(count, 1)))
        state.meta_epoch += 1
        if log:
            log(f"meta epoch {epoch}: loss {total / max(count, 1):.4f}" + (f" D_qt MACE {report.mace:.3f}" if report else ""))
        if on_epoch:
            on_epoch(state)
    return state


# Checkpoints ---------------------------------------------------------------

COUNTERS = ("sem_ready", "pretrain_epoch", "meta_epoch", "meta_steps", "inner_steps", "outer_steps")


def save_state(path, state: TrainState) -> None:
    tensors = prefixed("tahem", state.tahem.state_dict())
    opt_t, groups_t = optimizer_tensors("opt_tahem", state.opt_tahem)
    tensors.update(opt_t)
    meta = {
        "config": {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(state.cfg).items()},
        "split": state.split.to_dict(),
        "counters": {k: getattr(state, k) for k in COUNTERS},
        "history": state.history,
        "opt_tahem": groups_t,
    }
    if state.smc is not None:
        tensors.update(prefixed("smc", state.smc.state_dict()))
        tensors.update(prefixed("sem", state.sem.state_dict()))
        opt_s, groups_s = optimizer_tensors("opt_smc", state.opt_smc)
        tensors.update(opt_s)
        meta["opt_smc"] = groups_s
    save_checkpoint(path, tensors, meta)


def load_state(path) -> TrainState:
    tensors, meta = load_checkpoint(path)
    cfg = TrainConfig(**meta["config"])
    split = MetaSplit(**meta["split"])
    state = init_state(cfg, split)
    state.tahem.load_state_dict(unprefixed("tahem", tensors))
    restore_optimizer("opt_tahem", state.opt_tahem, tensors, meta["opt_tahem"])
    if state.smc is not None:
        state.smc.load_state_dict(unprefixed("smc", tensors))
        state.sem.load_state_dict(unprefixed("sem", tensors))
        restore_optimizer("opt_smc", state.opt_smc, tensors, meta["opt_smc"])
    for k, v in meta["counters"].items():
        setattr(state, k, v)
    if state.sem is not None and state.sem_ready:
        freeze(state.sem)
    state.history = meta["history"]
    return state


def model_summary(state: TrainState) -> dict:
    return {
        "tahem_params": parameter_count(state.tahem),
        "smc_params": parameter_count(state.smc) if state.smc is not None else 0,
        "sem_params": parameter_count(state.sem) if state.sem is not None else 0,
    }
