import math

import numpy as np
import pytest

from poplab import tensor as T
from poplab.errors import ConfigError, DataError
from poplab.model import ModelConfig, init_model
from poplab.train import (
    TrainConfig,
    batch_loss,
    heldout_loss,
    load_corpus,
    lr_at,
    read_loss_csv,
    sample_batch,
    split_corpus,
    train,
)


def test_bundled_corpus_size_and_split():
    data = load_corpus()
    assert 90_000 <= len(data) <= 120_000
    tr, ho = split_corpus(data)
    assert tr + ho == data
    assert len(ho) == len(data) - int(len(data) * 0.95)


def test_lr_schedule_shape():
    cfg = TrainConfig(steps=100, warmup=10, lr=1.0)
    lrs = [lr_at(s, cfg) for s in range(100)]
    assert lrs[0] == pytest.approx(0.1)
    assert lrs[9] == pytest.approx(1.0)
    assert all(a >= b for a, b in zip(lrs[9:], lrs[10:]))
    assert lrs[-1] >= 0.1


def test_same_seed_same_curve(tmp_path, tiny_config):
    cfg = TrainConfig(steps=4, batch=2, seq_len=16, warmup=2, seed=3)
    a = train(tiny_config, cfg, tmp_path / "a")
    b = train(tiny_config, cfg, tmp_path / "b")
    assert a.losses == b.losses
    assert read_loss_csv(tmp_path / "a" / "loss.csv") == a.losses
    assert (tmp_path / "a" / "model.ckpt").read_bytes() == (tmp_path / "b" / "model.ckpt").read_bytes()


def test_small_corpus_rejected(tmp_path, tiny_config):
    corpus = tmp_path / "c.txt"
    corpus.write_bytes(b"a" * 500)
    with pytest.raises(DataError):
        train(tiny_config, TrainConfig(steps=1, batch=2, seq_len=32, corpus=str(corpus)))


def test_seq_len_over_capacity(tiny_config):
    with pytest.raises(ConfigError):
        train(tiny_config, TrainConfig(steps=1, seq_len=65))


def test_heldout_loss_deterministic(tiny_weights):
    _, ho = split_corpus(load_corpus())
    assert heldout_loss(tiny_weights, ho[:300], 32) == heldout_loss(tiny_weights, ho[:300], 32)


def test_heldout_empty_slice(tiny_weights):
    with pytest.raises(DataError):
        heldout_loss(tiny_weights, b"", 32)


def test_step_zero_loss_near_uniform():
    cfg = ModelConfig.load("toy8")
    w = init_model(cfg, 0)
    data = np.frombuffer(split_corpus(load_corpus())[0], dtype=np.uint8)
    toks = sample_batch(data, np.random.default_rng(0), 4, 128)
    assert abs(batch_loss(w, toks).item() - math.log(259)) <= 0.3


def test_gradient_reaches_every_parameter():
    cfg = ModelConfig(num_layers=2, hidden=32, num_heads=4, num_kv_heads=2, head_dim=8, ffn_dim=64, max_seq=64)
    w = init_model(cfg, 0)
    data = np.frombuffer(split_corpus(load_corpus())[0], dtype=np.uint8)
    rng = np.random.default_rng(0)
    seen = {}
    for _ in range(10):
        tape = T.GradientTape()
        grads = T.backward(tape, batch_loss(w, sample_batch(data, rng, 2, 32), tape))
        for n, g in grads.items():
            seen[n] = seen.get(n, False) or bool(np.any(g != 0))
    assert len(seen) == len(w.named_arrays())
    assert all(seen.values()), [n for n, ok in seen.items() if not ok]


def test_training_lowers_loss(tiny_config):
    res = train(tiny_config, TrainConfig(steps=30, batch=2, seq_len=32, warmup=5, lr=1e-2))
    assert np.mean(res.losses[-5:]) < res.losses[0]
