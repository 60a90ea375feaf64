"""Next-token pretraining on a raw byte corpus (AdamW, warmup + cosine)."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .errors import ConfigError, DataError
from .model import ModelConfig, ModelWeights, forward, init_model
from .tokenizer import BOS, OFFSET

log = logging.getLogger(__name__)

CORPUS_PATH = Path(__file__).parent / "data" / "corpus.txt"
HELDOUT_FRACTION = 0.05


@dataclass
class TrainConfig:
    steps: int = 2000
    batch: int = 4
    seq_len: int = 128
    lr: float = 3e-3
    warmup: int = 100
    seed: int = 0
    corpus: Optional[str] = None
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    betas: tuple = (0.9, 0.95)
    min_lr_frac: float = 0.1

    def validate(self, config: ModelConfig) -> None:
        if self.steps <= 0:
            raise ConfigError("steps must be positive")
        if self.batch <= 0 or self.seq_len <= 0:
            raise ConfigError("batch and seq_len must be positive")
        if self.seq_len > config.max_seq:
            raise ConfigError(f"seq_len {self.seq_len} exceeds max_seq {config.max_seq}")


@dataclass
class TrainResult:
    weights: ModelWeights
    losses: list = field(default_factory=list)
    elapsed: float = 0.0


def load_corpus(path=None) -> bytes:
    p = Path(path) if path else CORPUS_PATH
    try:
        return p.read_bytes()
    except FileNotFoundError as exc:
        raise DataError(f"corpus not found: {p}") from exc


def split_corpus(data: bytes):
    """95/5 train/held-out split by byte offset."""
    cut = int(len(data) * (1.0 - HELDOUT_FRACTION))
    return data[:cut], data[cut:]


def _window(data: np.ndarray, start: int, length: int) -> np.ndarray:
    return np.concatenate([[BOS], data[start : start + length].astype(np.int64) + OFFSET])


def lr_at(step: int, tcfg: TrainConfig) -> float:
    if step < tcfg.warmup:
        return tcfg.lr * (step + 1) / tcfg.warmup
    frac = (step - tcfg.warmup) / max(1, tcfg.steps - tcfg.warmup)
    cos = 0.5 * (1.0 + math.cos(math.pi * min(1.0, frac)))
    return tcfg.lr * (tcfg.min_lr_frac + (1.0 - tcfg.min_lr_frac) * cos)


class AdamW:
    """Adam with decoupled weight decay on selected tensors."""

    def __init__(self, names, shapes, betas=(0.9, 0.95), eps=1e-8, decay_names=()):
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = {n: np.zeros(shapes[n]) for n in names}
        self.v = {n: np.zeros(shapes[n]) for n in names}
        self.decay = set(decay_names)
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float, weight_decay: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for n, p in params.items():
            g = grads[n]
            m, v = self.m[n], self.v[n]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if n in self.decay and weight_decay:
                p *= 1.0 - lr * weight_decay
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_global_norm(grads: dict, max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm and norm > max_norm:
        s = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= s
    return norm


def batch_loss(weights: ModelWeights, tokens: np.ndarray, tape: Optional[T.GradientTape] = None):
    """Mean next-token loss over a ``[B, seq_len + 1]`` batch."""
    P = weights.tracked_view(tape) if tape is not None else weights
    logits = forward(P, tokens[:, :-1])
    n = tokens[:, 1:].size
    return T.mul(T.cross_entropy(logits, tokens[:, 1:]), 1.0 / n)


def sample_batch(data: np.ndarray, rng: np.random.Generator, batch: int, seq_len: int) -> np.ndarray:
    starts = rng.integers(0, len(data) - seq_len + 1, size=batch)
    return np.stack([_window(data, s, seq_len) for s in starts])


def train(config: ModelConfig, tcfg: TrainConfig, out_dir=None, init: Optional[ModelWeights] = None) -> TrainResult:
    """Train from a seeded init; writes ``model.ckpt`` and ``loss.csv`` when ``out_dir`` is set."""
    tcfg.validate(config)
    corpus = load_corpus(tcfg.corpus)
    train_bytes, _ = split_corpus(corpus)
    if len(train_bytes) < 10 * tcfg.batch * tcfg.seq_len:
        raise DataError(
            f"corpus too small: {len(train_bytes)} training bytes < 10 x batch x seq_len"
        )
    data = np.frombuffer(train_bytes, dtype=np.uint8)
    weights = init if init is not None else init_model(config, tcfg.seed)
    params = {n: np.array(a, dtype=np.float64) for n, a in weights.named_arrays()}
    shapes = {n: a.shape for n, a in params.items()}
    decay = [n for n, a in params.items() if a.ndim == 2 and n != "embed"]
    opt = AdamW(list(params), shapes, betas=tcfg.betas, decay_names=decay)
    rng = np.random.default_rng(tcfg.seed)
    losses = []
    t0 = time.perf_counter()
    for step in range(tcfg.steps):
        w = ModelWeights.from_named(config, params)
        tokens = sample_batch(data, rng, tcfg.batch, tcfg.seq_len)
        tape = T.GradientTape()
        loss = batch_loss(w, tokens, tape)
        grads = T.backward(tape, loss)
        clip_global_norm(grads, tcfg.grad_clip)
        opt.step(params, grads, lr_at(step, tcfg), tcfg.weight_decay)
        losses.append(loss.item())
        if step % 100 == 0 or step == tcfg.steps - 1:
            log.info("step %d loss %.4f", step, losses[-1])
    result = TrainResult(ModelWeights.from_named(config, params), losses, time.perf_counter() - t0)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(result.weights, config, out / "model.ckpt")
        write_loss_csv(out / "loss.csv", losses)
        meta = {"steps": tcfg.steps, "batch": tcfg.batch, "seq_len": tcfg.seq_len, "lr": tcfg.lr,
                "warmup": tcfg.warmup, "seed": tcfg.seed, "elapsed_s": result.elapsed}
        (out / "train.json").write_text(json.dumps(meta, indent=2))
    return result


def write_loss_csv(path, losses) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["step", "loss"])
        for i, l in enumerate(losses):
            wr.writerow([i, repr(float(l))])


def read_loss_csv(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [float(r["loss"]) for r in rows]


def heldout_loss(weights: ModelWeights, data: bytes, seq_len: int, batch: int = 8) -> float:
    """Mean per-token teacher-forced loss over consecutive windows of ``data``."""
    if not data:
        raise DataError("empty held-out slice")
    arr = np.frombuffer(bytes(data), dtype=np.uint8)
    seq_len = min(seq_len, weights.config.max_seq)
    windows = [_window(arr, s, seq_len) for s in range(0, len(arr), seq_len)]
    total, count = 0.0, 0
    # equal-length windows batch together; the ragged tail runs alone
    groups = {}
    for w in windows:
        groups.setdefault(len(w), []).append(w)
    for length, ws in sorted(groups.items()):
        if length < 2:
            continue
        for i in range(0, len(ws), batch):
            toks = np.stack(ws[i : i + batch])
            logits = forward(weights, toks[:, :-1])
            total += T.cross_entropy(logits, toks[:, 1:]).item()
            count += toks[:, 1:].size
    if count == 0:
        raise DataError("held-out slice too short to score")
    return total / count
