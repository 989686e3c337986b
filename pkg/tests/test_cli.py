import csv
import hashlib
import json

import pytest

from homolab.cli import main
from homolab.config import read_flat
from homolab.metrics import identity_baseline_ace
from homolab.trainer import TrainConfig, load_state, param_hash

TINY_CONF = """
widths = 8,16,24
head_width = 8
n_iters = 2
batch_pretrain = 4
batch_meta = 4
sem_corpus = 8
epochs_sem = 1
eval_every = 1
lr_pretrain = 0.001
"""


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.conf").write_text(TINY_CONF)
    assert main(["gen-images", "--out", str(root / "scenes"), "--count", "24", "--seed", "3", "--quiet"]) == 0
    assert main(["gen-data", "--src", str(root / "scenes"), "--out", str(root / "data"), "--seed", "3"]) == 0
    return root


def conf(work):
    return ["--config", str(work / "tiny.conf"), "--quiet"]


def test_gen_data_missing_src(tmp_path, capsys):
    assert main(["gen-data", "--src", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 2
    assert str(tmp_path / "nope") in capsys.readouterr().err


def test_gen_data_deterministic(work, tmp_path):
    assert main(["gen-data", "--src", str(work / "scenes"), "--out", str(tmp_path / "again"), "--seed", "3"]) == 0
    assert sha(tmp_path / "again" / "manifest.jsonl") == sha(work / "data" / "manifest.jsonl")
    assert sha(tmp_path / "again" / "split.json") == sha(work / "data" / "split.json")


def test_gen_data_kind_proportions(tmp_path, capsys):
    main(["gen-images", "--out", str(tmp_path / "s"), "--count", "100", "--seed", "1"])
    capsys.readouterr()
    code = main(["gen-data", "--src", str(tmp_path / "s"), "--out", str(tmp_path / "d"),
                 "--kinds", "normal,haze", "--proportions", "0.5,0.5"])
    assert code == 0
    assert "100 pairs: haze=50, normal=50" in capsys.readouterr().out


def test_unknown_config_key_rejected(work, tmp_path, capsys):
    bad = tmp_path / "bad.conf"
    bad.write_text("lamda = 0.2\n")
    assert main(["pretrain", "--data", str(work / "data"), "--out", str(tmp_path / "r"), "--config", str(bad)]) == 2
    assert "lamda" in capsys.readouterr().err


def test_default_flags_give_default_config(work, tmp_path):
    # epochs 0 keeps the run instant; everything else stays at its default
    assert main(["pretrain", "--data", str(work / "data"), "--out", str(tmp_path / "r"), "--epochs", "0",
                 "--limit", "1", "--quiet", "--config", str(_sem_free(tmp_path))]) == 0
    snap = read_flat(tmp_path / "r" / "config.conf")
    assert (snap["lam"], snap["n_iters"], snap["outer_per_inner"]) == (0.1, 5, 3)
    d = TrainConfig()
    assert (snap["lr_tahem"], snap["batch_meta"], snap["epochs_meta"]) == (d.lr_tahem, d.batch_meta, d.epochs_meta)


def _sem_free(tmp_path):
    p = tmp_path / "nosem.conf"
    p.write_text("use_semantic = false\n")
    return p


@pytest.fixture(scope="module")
def pretrained(work):
    out = work / "pre"
    assert main(["pretrain", "--data", str(work / "data"), "--out", str(out), "--epochs", "2", "--limit", "4", *conf(work)]) == 0
    return out


def test_pretrain_outputs_and_determinism(work, pretrained, tmp_path):
    assert (pretrained / "config.conf").is_file() and (pretrained / "history.csv").is_file()
    rows = list(csv.DictReader(open(pretrained / "history.csv")))
    assert [r["phase"] for r in rows] == ["sem", "pretrain", "pretrain"]
    out = tmp_path / "pre2"
    assert main(["pretrain", "--data", str(work / "data"), "--out", str(out), "--epochs", "2", "--limit", "4", *conf(work)]) == 0
    assert sha(out / "state.safetensors") == sha(pretrained / "state.safetensors")
    assert sha(out / "history.csv") == sha(pretrained / "history.csv")


def test_pretrain_resume_matches_uninterrupted(work, pretrained, tmp_path):
    out = tmp_path / "resumed"
    args = ["pretrain", "--data", str(work / "data"), "--out", str(out), "--epochs", "2", "--limit", "4", *conf(work)]
    assert main(args + ["--stop-after", "2"]) == 0  # detector + first epoch
    assert load_state(out / "state.safetensors").pretrain_epoch == 1
    assert main(args) == 0
    assert sha(out / "state.safetensors") == sha(pretrained / "state.safetensors")


def test_train_resume_matches_uninterrupted(work, pretrained, tmp_path):
    init = str(pretrained / "state.safetensors")
    base = ["train", "--data", str(work / "data"), "--init", init, "--epochs", "5", *conf(work)]
    assert main(base + ["--out", str(tmp_path / "a")]) == 0
    assert main(base + ["--out", str(tmp_path / "b"), "--stop-after", "2"]) == 0
    assert load_state(tmp_path / "b" / "state.safetensors").meta_epoch == 2
    assert main(base + ["--out", str(tmp_path / "b")]) == 0
    a, b = load_state(tmp_path / "a" / "state.safetensors"), load_state(tmp_path / "b" / "state.safetensors")
    assert a.inner_steps == 1  # 5 outer steps cover one full O,O,O,I cycle
    assert param_hash(a.tahem) == param_hash(b.tahem) and param_hash(a.smc) == param_hash(b.smc)
    assert sha(tmp_path / "a" / "state.safetensors") == sha(tmp_path / "b" / "state.safetensors")
    assert sha(tmp_path / "a" / "history.csv") == sha(tmp_path / "b" / "history.csv")


def test_train_requires_init(work, tmp_path):
    assert main(["train", "--data", str(work / "data"), "--out", str(tmp_path / "x"), *conf(work)]) == 2
    assert main(["train", "--data", str(work / "data"), "--out", str(tmp_path / "x"), "--init", str(tmp_path / "none")]) == 2


def test_eval_emits_all_metrics_and_cdf(work, pretrained, tmp_path):
    out = tmp_path / "ev"
    ck = str(pretrained / "state.safetensors")
    assert main(["eval", "--data", str(work / "data"), "--ckpt", ck, "--out", str(out), "--split", "support",
                 "--error-images", "2", "--quiet"]) == 0
    rep = json.loads((out / "metrics.json").read_text())
    for k in ("mace", "pme", "psnr", "ssim", "ncc"):
        assert isinstance(rep[k], float)
    assert rep["n"] == 4 and rep["by_kind"]
    cdf = list(csv.DictReader(open(out / "ace_cdf.csv")))
    fr = [float(r["fraction"]) for r in cdf]
    assert all(a <= b for a, b in zip(fr, fr[1:])) and fr[-1] == 1.0
    assert len(list((out / "errors").glob("*.png"))) == 2
    again = tmp_path / "ev2"
    main(["eval", "--data", str(work / "data"), "--ckpt", ck, "--out", str(again), "--split", "support",
          "--error-images", "2", "--quiet"])
    assert sha(again / "metrics.json") == sha(out / "metrics.json")


def test_eval_point_pairs(work, pretrained, tmp_path):
    split = json.loads((work / "data" / "split.json").read_text())
    sid = split["query_test"][0]
    pts = tmp_path / "pts.json"
    pts.write_text(json.dumps({sid: [[[10, 10], [12, 9]], [[100, 50], [101, 52]]]}))
    out = tmp_path / "evp"
    assert main(["eval", "--data", str(work / "data"), "--identity-baseline", "--points", str(pts), "--out", str(out)]) == 0
    rep = json.loads((out / "metrics.json").read_text())
    assert rep["pme"] == pytest.approx((5**0.5 + 5**0.5) / 2)


def test_eval_identity_baseline(tmp_path):
    main(["gen-images", "--out", str(tmp_path / "s"), "--count", "200", "--seed", "9"])
    main(["gen-data", "--src", str(tmp_path / "s"), "--out", str(tmp_path / "d"), "--seed", "9"])
    out = tmp_path / "id"
    assert main(["eval", "--data", str(tmp_path / "d"), "--identity-baseline", "--split", "all", "--out", str(out)]) == 0
    rep = json.loads((out / "metrics.json").read_text())
    assert rep["n"] == 200
    assert abs(rep["mace"] - identity_baseline_ace()) < 1.0


def test_eval_missing_checkpoint(work, tmp_path):
    assert main(["eval", "--data", str(work / "data"), "--ckpt", str(tmp_path / "gone"), "--out", str(tmp_path / "e")]) == 2
    assert main(["eval", "--data", str(work / "data"), "--out", str(tmp_path / "e")]) == 2


def test_ablate_rows(work, tmp_path):
    out = tmp_path / "ab"
    code = main(["ablate", "--data", str(work / "data"), "--out", str(out), "--epochs-pretrain", "1",
                 "--epochs-meta", "1", *conf(work)])
    assert code == 0
    rows = list(csv.DictReader(open(out / "ablation.csv")))
    assert [r["cell"] for r in rows] == ["n3", "n4", "n5", "n6", "n7", "full", "no_hsa", "no_smc_sem"]
    assert [r["n_iters"] for r in rows[:5]] == ["3", "4", "5", "6", "7"]
    for r in rows:
        for k in ("mace", "pme", "psnr", "ssim", "ncc"):
            assert r[k] != ""
    params = {r["cell"]: int(r["tahem_params"]) for r in rows}
    assert params["no_hsa"] < params["full"] == params["no_smc_sem"]
