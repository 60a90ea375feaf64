"""Time-to-first-token benchmark, full model vs. pruned prefill."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from ..errors import ConfigError
from ..model import ModelWeights, generate
from ..parallel import worker_count
from ..pop import PruningPlan, pop_generate
from ..tokenizer import BOS


@dataclass
class BenchStats:
    seq_len: int
    batch: int
    repetitions: int
    warmup: int
    workers: int
    full_median: float
    full_iqr: float
    pop_median: float
    pop_iqr: float
    speedup: float
    full_times: list = field(default_factory=list)
    pop_times: list = field(default_factory=list)
    first_tokens: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def synthetic_prompts(seq_len: int, batch: int, seed: int, vocab: int) -> list:
    """BOS followed by ``seq_len - 1`` seeded byte tokens, one list per batch row."""
    rng = np.random.default_rng(seed)
    return [[BOS] + rng.integers(3, vocab, seq_len - 1).tolist() for _ in range(batch)]


def _iqr(xs) -> float:
    q75, q25 = np.percentile(xs, [75, 25])
    return float(q75 - q25)


def bench_ttft(weights: ModelWeights, plan: PruningPlan, seq_len: int, batch: int = 1, reps: int = 5,
               seed: int = 0, warmup: int = 2, workers: int | None = None) -> BenchStats:
    """Median wall time for a batch (loop over prompts) to reach its first token.

    Each prompt runs prefill plus the first sampled token, so the full-model
    boundary step is inside the POP timing. Full and POP runs alternate
    within every repetition.
    """
    if reps < 5 or warmup < 2:
        raise ConfigError("need at least 5 repetitions after at least 2 warmups")
    if seq_len < 1 or batch < 1:
        raise ConfigError("seq_len and batch must be positive")
    if seq_len >= weights.config.max_seq:
        raise ConfigError(f"seq_len {seq_len} leaves no room under max_seq {weights.config.max_seq}")
    workers = workers or worker_count()
    prompts = synthetic_prompts(seq_len, batch, seed, weights.config.vocab)
    weights.view()

    def run_full():
        return [generate(weights, p, 1)[0] for p in prompts]

    def run_pop():
        return [pop_generate(weights, plan, p, 1).tokens[0] for p in prompts]

    full_t, pop_t = [], []
    tokens = {}
    with threadpool_limits(limits=workers):
        for i in range(warmup + reps):
            t0 = time.perf_counter()
            tokens["full"] = run_full()
            t1 = time.perf_counter()
            tokens["pop"] = run_pop()
            t2 = time.perf_counter()
            if i >= warmup:
                full_t.append(t1 - t0)
                pop_t.append(t2 - t1)
    fm, pm = float(np.median(full_t)), float(np.median(pop_t))
    return BenchStats(seq_len, batch, reps, warmup, workers, fm, _iqr(full_t), pm, _iqr(pop_t),
                      fm / pm, full_t, pop_t, tokens)
