import os
from pathlib import Path

import numpy as np
import pytest

from poplab.checkpoint import load_checkpoint
from poplab.model import ModelConfig, init_model
from poplab.train import TrainConfig, train

ROOT = Path(__file__).resolve().parents[1]
ARTIFACTS = Path(os.environ.get("POPLAB_ARTIFACTS", ROOT / ".artifacts"))


@pytest.fixture
def tiny_config():
    return ModelConfig(num_layers=3, hidden=16, num_heads=4, num_kv_heads=2, head_dim=4, ffn_dim=32, max_seq=64)


@pytest.fixture
def tiny_weights(tiny_config):
    return init_model(tiny_config, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def trained_dir() -> Path:
    """Directory holding the 2000-step toy8 run; trains once if missing."""
    out = ARTIFACTS / "trained"
    if not (out / "model.ckpt").exists() or not (out / "train.json").exists():
        train(ModelConfig.load("toy8"), TrainConfig(), out)
    return out


@pytest.fixture(scope="session")
def trained_run():
    return trained_dir()


@pytest.fixture(scope="session")
def trained(trained_run):
    weights, _ = load_checkpoint(trained_run / "model.ckpt")
    return weights


# ---------------------------------------------------------------- acceptance summary

_ACCEPTANCE = {}


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    name = report.nodeid.rsplit("::", 1)[-1]
    if not name.startswith("test_criterion_"):
        return
    num = int(name.split("_")[2])
    detail = dict(report.user_properties).get("detail", "")
    _ACCEPTANCE[num] = (report.outcome, name, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for num in sorted(_ACCEPTANCE):
        outcome, name, detail = _ACCEPTANCE[num]
        verdict = "PASS" if outcome == "passed" else "FAIL"
        tr.write_line(f"criterion {num:2d}: {verdict}  {name[len('test_criterion_'):]}  {detail}")
