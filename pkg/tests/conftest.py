from pathlib import Path

import numpy as np
import pytest
import torch

torch.set_num_threads(1)

ROOT = Path(__file__).resolve().parents[1]
TOY_CONF = ROOT / "configs" / "toy.conf"

# criterion number -> (passed, description); filled by test_acceptance.py
ACCEPTANCE: dict = {}


@pytest.fixture
def rng():
    return np.random.default_rng(20240917)


@pytest.fixture(scope="session")
def toy_config():
    from homolab.config import apply, read_flat
    from homolab.trainer import TrainConfig

    return apply(TrainConfig(), read_flat(TOY_CONF))


@pytest.fixture(scope="session")
def toy_sem(toy_config):
    """Detector pretrained on the toy shapes corpus with the toy settings: (model, epoch losses)."""
    from homolab.scenes import detection_corpus
    from homolab.sem import pretrain_sem

    corpus = detection_corpus(toy_config.sem_corpus, toy_config.seed)
    return pretrain_sem(corpus, toy_config.sem_config())


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, text = ACCEPTANCE[k]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {k}: {text}")
