import dataclasses

import numpy as np
import pytest
import torch

from homolab.data import MetaSplit, SynthConfig, sample_pair, sample_seed
from homolab.degrade import KINDS
from homolab.errors import WrongSplit
from homolab.metrics import identity_baseline_ace, pme
from homolab.scenes import parent_image
from homolab.sem import extract_semantic, freeze
from homolab.tahem import loss_h
from homolab import geometry as geo
from homolab.trainer import (
    TrainConfig,
    evaluate,
    grid_point_pairs,
    init_state,
    inner_step,
    load_pair_data,
    load_state,
    meta_train,
    outer_objective,
    outer_step,
    pair_data_from_samples,
    param_hash,
    pretrain,
    save_state,
    state_hashes,
    step_kind,
)

TINY = TrainConfig(
    widths=(8, 16, 24), head_width=8, n_iters=2, batch_meta=4, batch_pretrain=4,
    sem_corpus=8, epochs_sem=1, epochs_pretrain=1, epochs_meta=2, eval_every=1, lr_tahem=1e-3, lr_pretrain=1e-3, lr_smc=1e-3,
)


@pytest.fixture(scope="module")
def data():
    samples = [
        sample_pair(parent_image(5, i // 4), sample_seed(5, i), SynthConfig(), KINDS[i % 4], id=f"p{i:02d}")
        for i in range(20)
    ]
    return pair_data_from_samples(samples)


@pytest.fixture(scope="module")
def split(data):
    ids = data.ids
    return MetaSplit(ids[:8], ids[8:12], ids[12:16])


def fresh(split, **kw):
    st = init_state(dataclasses.replace(TINY, **kw), split)
    if st.sem is not None:
        freeze(st.sem)
        st.sem_ready = True
    return st


def test_default_hyperparameters():
    cfg = TrainConfig()
    assert (cfg.lam, cfg.n_iters, cfg.outer_per_inner) == (0.1, 5, 3)
    assert (cfg.lr_tahem, cfg.lr_pretrain, cfg.lr_smc, cfg.lr_sem) == (1e-4, 1e-4, 1e-4, 1e-3)
    assert (cfg.epochs_pretrain, cfg.epochs_meta, cfg.batch_pretrain, cfg.batch_meta) == (20, 50, 32, 16)


def test_schedule_three_to_one():
    assert "".join(step_kind(k, 3) for k in range(8)) == "OOOIOOOI"
    assert "".join(step_kind(k, 1) for k in range(4)) == "OIOI"


def test_wrong_split_rejected(data, split):
    st = fresh(split)
    with pytest.raises(WrongSplit):
        inner_step(st, data.batch(split.support[:2]))
    with pytest.raises(WrongSplit):
        outer_step(st, data.batch(split.query_train[:2]))
    with pytest.raises(WrongSplit):
        outer_step(st, data.batch(split.query_test[:2]))


def test_inner_step_touches_only_smc(data, split):
    st = fresh(split)
    before = state_hashes(st)
    inner_step(st, data.batch(split.query_train))
    after = state_hashes(st)
    assert after["tahem"] == before["tahem"] and after["sem"] == before["sem"]
    assert after["smc"] != before["smc"]


def test_outer_step_touches_only_tahem(data, split):
    st = fresh(split)
    before = state_hashes(st)
    outer_step(st, data.batch(split.support[:4]))
    after = state_hashes(st)
    assert after["smc"] == before["smc"] and after["sem"] == before["sem"]
    assert after["tahem"] != before["tahem"]


def test_zero_lambda_matches_pure_homography_step(data, split):
    batch = data.batch(split.support[:4])
    a = fresh(split, lam=0.0)
    outer_step(a, batch)
    b = fresh(split, lam=0.0)
    params = list(b.tahem.parameters())
    grads = torch.autograd.grad(loss_h(b.tahem(batch.src, batch.tgt, TINY.n_iters), batch.offsets), params)
    for p, g in zip(params, grads):
        p.grad = g
    b.opt_tahem.step()
    assert param_hash(a.tahem) == param_hash(b.tahem)


def test_outer_gradient_is_additive(data, split):
    st = fresh(split)
    for m in (st.tahem, st.smc, st.sem):
        m.double()
    with torch.no_grad():  # let L_h reach the trunk, not only the output layers
        for head in (st.tahem.head_eighth, st.tahem.head_quarter):
            head.out.weight.normal_(0, 0.05)
    batch = data.batch(split.support[:2]).to(torch.float64)
    params = list(st.tahem.parameters())
    lh, l8, l4 = outer_objective(st, batch)
    g_all = torch.autograd.grad(lh + st.cfg.lam * (l8 + l4), params, retain_graph=True)
    g_h = torch.autograd.grad(lh, params, retain_graph=True)
    g_8 = torch.autograd.grad(l8, params, retain_graph=True, allow_unused=True)
    g_4 = torch.autograd.grad(l4, params, allow_unused=True)
    assembled = []
    for h, e, q in zip(g_h, g_8, g_4):
        e = torch.zeros_like(h) if e is None else e
        q = torch.zeros_like(h) if q is None else q
        assembled.append(h + st.cfg.lam * (e + q))
    # shift-invariant attention key biases have an exactly zero gradient; floor their scale
    floor = 1e-8 * max(g.abs().max().item() for g in assembled)
    worst = max((a - b).abs().max().item() / max(b.abs().max().item(), floor) for a, b in zip(g_all, assembled))
    assert worst < 1e-6


def test_zero_constraint_loss_leaves_smc_unchanged(data, split):
    st = fresh(split, weight_decay=0.0)
    with torch.no_grad():
        for p in st.smc.parameters():
            p.zero_()
    before = param_hash(st.smc)
    loss = inner_step(st, data.batch(split.query_train))
    assert loss == 0.0
    assert param_hash(st.smc) == before


def test_sgd_inner_update_matches_finite_differences(data, split):
    lr = 0.5
    st = fresh(split, smc_optimizer="sgd", lr_smc=lr)
    for m in (st.tahem, st.smc, st.sem):
        m.double()
    st.opt_smc = torch.optim.SGD(st.smc.parameters(), lr=lr, momentum=0.0)
    batch = data.batch(split.query_train).to(torch.float64)
    probes = [st.smc.quarter.align.bias, st.smc.eighth.refine[0].bias, st.smc.quarter.stm[4].weight]

    with torch.no_grad():
        struct = st.tahem.extract_pyramid(batch.src)
    sem = extract_semantic(batch.gt, st.sem)

    def objective():
        l8, l4 = st.smc.losses(sem, struct)
        return l8 + l4

    expected = []
    with torch.no_grad():
        for p in probes:
            flat = p.data.view(-1)
            want = []
            for i in range(3):
                orig = flat[i].item()
                flat[i] = orig + 1e-6
                up = objective().item()
                flat[i] = orig - 1e-6
                down = objective().item()
                flat[i] = orig
                want.append(orig - lr * (up - down) / 2e-6)
            expected.append(torch.tensor(want, dtype=torch.float64))
    inner_step(st, batch)
    for p, want in zip(probes, expected):
        assert (p.detach().view(-1)[:3] - want).abs().max().item() < 1e-4


def test_meta_train_schedule_and_frozen_detector(data, split):
    st = fresh(split)
    sem_hash = param_hash(st.sem)
    kinds = []

    def on_step(kind, state):
        kinds.append(kind)
        assert param_hash(state.sem) == sem_hash

    meta_train(st, data, epochs=10, max_steps=12, on_step=on_step)
    assert "".join(kinds) == "OOOI" * 3
    assert (st.outer_steps, st.inner_steps) == (9, 3)


def test_meta_train_never_touches_query_test(data, split):
    st = fresh(split)
    seen = []
    orig = type(data).batch

    class Spy(type(data)):
        def batch(self, ids):
            seen.append(list(ids))
            return orig(self, ids)

    spy = Spy(data.ids, data.kinds, data.src, data.tgt, data.gt, data.offsets)
    meta_train(st, spy, epochs=1)
    trained = {i for ids in seen[1:] for i in ids}  # first call builds the held-out set
    assert seen[0] == split.query_test
    assert not trained & set(split.query_test)


def test_meta_train_deterministic_and_resumable(data, split, tmp_path):
    a = fresh(split)
    meta_train(a, data, epochs=2)
    b = fresh(split)
    meta_train(b, data, epochs=2)
    assert state_hashes(a) == state_hashes(b)

    c = fresh(split)
    meta_train(c, data, epochs=1)
    save_state(tmp_path / "s.safetensors", c)
    d = load_state(tmp_path / "s.safetensors")
    meta_train(d, data, epochs=2)
    assert state_hashes(d) == state_hashes(a)
    assert d.history == a.history


def test_pretrain_smoke_and_determinism(data, split):
    small = MetaSplit(split.support[:4], split.query_train, split.query_test[:2])
    runs = []
    for _ in range(2):
        st = init_state(TINY, small)
        pretrain(st, data)
        runs.append(st)
    assert runs[0].history[0]["phase"] == "sem" and np.isfinite(runs[0].history[-1]["loss"])
    assert runs[0].sem_ready and not any(p.requires_grad for p in runs[0].sem.parameters())
    assert state_hashes(runs[0]) == state_hashes(runs[1])


def test_evaluate_identity_predictor(data):
    rep = evaluate(None, data)
    want = data.offsets.double().norm(dim=-1).mean(-1)
    assert rep.mace == pytest.approx(want.mean().item(), rel=1e-9)
    assert set(rep.by_kind) == set(KINDS) and sum(r.n for r in rep.by_kind.values()) == len(data)
    assert rep.mace < 2 * identity_baseline_ace()
    assert rep.pme > 0 and -1 <= rep.ncc <= 1


def test_grid_pairs_zero_error_for_true_homography(rng):
    d = rng.uniform(-25.6, 25.6, (4, 2))
    h = geo.offsets_to_homography(geo.PatchFrame(), d)
    assert pme(h, grid_point_pairs(d)) < 1e-9


def test_loaded_pairs_keep_unit_range(tmp_path):
    from homolab.data import build_dataset, read_image
    from homolab.runs import write_parent_images

    write_parent_images(tmp_path / "s", 2, 0)
    build_dataset(tmp_path / "s", tmp_path / "d", SynthConfig())
    loaded = load_pair_data(tmp_path / "d")
    on_disk = read_image(tmp_path / "d" / "images" / f"{loaded.ids[0]}_src.png")
    assert torch.allclose(loaded.src[0], torch.tensor(on_disk, dtype=torch.float32).permute(2, 0, 1))
    assert loaded.src.max() > 0.5
