"""Prefill-only pruning: plans, pruned prefill, boundary step, ablation variants.

During prefill, layers in the skip set leave the residual stream untouched
but still write keys and values projected from their input (unless
``indep_kv`` is off). The last prompt token is then run through the full
stack as the first decode step, and decoding always uses every layer.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import CapacityError, ConfigError, ContractError, DataError
from .model import (
    KVCache,
    ModelWeights,
    _params,
    decode_loop,
    embed_tokens,
    head_logits,
    kv_project,
    layer_forward,
    prefill,
)

STRATEGIES = ("deep", "shallow", "interleaved", "from_profile")
VARIANTS = ("pop", "shallow", "interleaved", "no_indep_kv", "no_boundary", "full")

FULL, KV_ONLY, SKIPPED = "full", "kv_only", "skipped"
_CODES = {FULL: 0, KV_ONLY: 1, SKIPPED: 2}
_NAMES = {v: k for k, v in _CODES.items()}

# ratio * L is snapped up by this much before flooring so 0.3333 * 36 -> 12
RATIO_SNAP = 0.01


# ---------------------------------------------------------------- plans


@dataclass(frozen=True)
class PruningPlan:
    skip_set: tuple
    ratio: float
    strategy: str
    indep_kv: bool = True
    boundary_handling: bool = True

    def to_dict(self) -> dict:
        return {"strategy": self.strategy, "ratio": self.ratio, "skip_set": list(self.skip_set),
                "indep_kv": self.indep_kv, "boundary_handling": self.boundary_handling}

    @classmethod
    def from_dict(cls, d: dict) -> "PruningPlan":
        try:
            return cls(tuple(sorted(int(i) for i in d["skip_set"])), float(d["ratio"]), str(d["strategy"]),
                       bool(d.get("indep_kv", True)), bool(d.get("boundary_handling", True)))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed plan: {exc}") from exc

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    def with_options(self, **kw) -> "PruningPlan":
        d = asdict(self)
        d.update(kw)
        return PruningPlan(**d)


def skip_count(num_layers: int, ratio: float) -> int:
    return int(math.floor(ratio * num_layers + RATIO_SNAP))


def make_plan(num_layers: int, ratio: float, strategy: str = "deep", profile=None,
              indep_kv: bool = True, boundary_handling: bool = True) -> PruningPlan:
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    if not 0 <= ratio < 1:
        raise ConfigError(f"ratio must lie in [0, 1), got {ratio}")
    if num_layers < 1:
        raise ConfigError("num_layers must be positive")
    k = skip_count(num_layers, ratio)
    if ratio > 0 and k < 1:
        raise ConfigError(f"ratio {ratio} skips no layers out of {num_layers}")
    L = num_layers
    if k == 0:
        skip = []
    elif strategy == "deep":
        skip = list(range(L - k, L))
    elif strategy == "shallow":
        skip = list(range(k))
    elif strategy == "interleaved":
        step = max(1, math.ceil(1.0 / ratio - RATIO_SNAP))
        skip = list(range(L - 1, -1, -step))[:k]
        # a coarse stride can run out of layers; top up from the deep end
        for l in range(L - 1, -1, -1):
            if len(skip) >= k:
                break
            if l not in skip:
                skip.append(l)
    else:
        if profile is None:
            raise ConfigError("strategy from_profile needs an importance profile")
        if profile.num_layers != L:
            raise ConfigError(f"profile has {profile.num_layers} layers, model has {L}")
        order = sorted(range(L), key=lambda l: (profile.prefill_score[l], -l))
        skip = order[:k]
    return PruningPlan(tuple(sorted(skip)), float(ratio), strategy, indep_kv, boundary_handling)


def empty_plan() -> PruningPlan:
    return PruningPlan((), 0.0, "deep")


# ---------------------------------------------------------------- trace


@dataclass
class PopTrace:
    """Per-position, per-layer execution record plus timing marks."""

    num_layers: int
    positions: list = field(default_factory=list)
    codes: list = field(default_factory=list)
    cache_lengths: list = field(default_factory=list)
    marks: dict = field(default_factory=dict)

    def add(self, positions, layer_modes: Sequence[str]) -> None:
        row = [_CODES[m] for m in layer_modes]
        for p in positions:
            self.positions.append(int(p))
            self.codes.append(row)

    def mark(self, name: str) -> None:
        self.marks[name] = time.perf_counter()

    def matrix(self) -> np.ndarray:
        return np.array(self.codes, dtype=np.int8).reshape(len(self.codes), self.num_layers)

    def at(self, position: int) -> list:
        i = self.positions.index(position)
        return [_NAMES[c] for c in self.codes[i]]

    def counts(self) -> dict:
        m = self.matrix()
        return {name: int(np.sum(m == code)) for name, code in _CODES.items()}

    @property
    def processed(self) -> int:
        return len(self.positions)

    @property
    def ttft(self) -> float:
        return self.marks["first_token"] - self.marks["prefill_start"]


def _modes(plan_skip, indep_kv: bool, L: int) -> list:
    return [(KV_ONLY if indep_kv else SKIPPED) if l in plan_skip else FULL for l in range(L)]


# ---------------------------------------------------------------- pipelines


def _pruned_pass(P: ModelWeights, x, cache: KVCache, skip, indep_kv: bool, pos, probes=None):
    """One chunk through every layer; skipped layers only write KV (or nothing)."""
    for l in range(P.config.num_layers):
        if l in skip:
            if indep_kv:
                k, v = kv_project(P, x, l, pos)
                cache.append(l, k, v, pos)
            if probes is not None:
                probes[l] = {"x_in": T.as_tensor(x).data}
            continue
        probe = {} if probes is not None else None
        x = layer_forward(P, x, l, cache, None, pos, probe)
        if probes is not None:
            probes[l] = probe
    return x


def pruned_prefill(weights: ModelWeights, plan: PruningPlan, prefix: Sequence[int],
                   cache: Optional[KVCache] = None, trace: Optional[PopTrace] = None, probes=None):
    """Pruned pass over ``prefix`` (positions 0..len-1); returns ``(cache, trace, hidden)``."""
    P = _params(weights)
    c = P.config
    prefix = list(prefix)
    if cache is None:
        cache = KVCache(c, capacity=len(prefix) + 1)
    if trace is None:
        trace = PopTrace(c.num_layers)
    if len(prefix) > c.max_seq:
        raise CapacityError(f"prefix length {len(prefix)} exceeds max_seq {c.max_seq}")
    hidden = None
    if prefix:
        pos = np.arange(len(prefix))
        skip = set(plan.skip_set)
        hidden = _pruned_pass(P, embed_tokens(P, prefix), cache, skip, plan.indep_kv, pos, probes)
        trace.add(pos, _modes(skip, plan.indep_kv, c.num_layers))
    trace.cache_lengths = cache.lengths
    return cache, trace, hidden


@dataclass
class PopResult:
    tokens: list
    trace: PopTrace
    cache: KVCache


def pop_generate(weights: ModelWeights, plan: PruningPlan, prompt: Sequence[int], max_new: int,
                 temperature: float = 0.0, seed: int = 0, stop_at_eos: bool = True) -> PopResult:
    """Generate with a pruned prefill; same sampling contract as ``generate``."""
    P = _params(weights)
    c = P.config
    prompt = list(prompt)
    if not prompt:
        raise ContractError("prompt must be nonempty")
    if len(prompt) >= c.max_seq:
        raise CapacityError(f"prompt length {len(prompt)} leaves no room under max_seq {c.max_seq}")
    if temperature < 0:
        raise ConfigError("temperature must be >= 0")
    rng = np.random.default_rng(seed)
    n = len(prompt)
    trace = PopTrace(c.num_layers)
    cache = KVCache(c, capacity=n + max(1, max_new))
    trace.mark("prefill_start")
    if plan.boundary_handling:
        pruned_prefill(P, plan, prompt[:-1], cache, trace)
        trace.mark("prefill_end")
        x = prefill(P, prompt[-1:], cache, start=n - 1)
        trace.add([n - 1], [FULL] * c.num_layers)
    else:
        _, _, x = pruned_prefill(P, plan, prompt, cache, trace)
        trace.mark("prefill_end")
    logits = head_logits(P, T.take_rows(x, x.shape[-2] - 1, x.shape[-2])).data[-1]
    full_row = [FULL] * c.num_layers
    out = decode_loop(
        P, cache, logits, n, max_new, temperature, rng, stop_at_eos,
        on_first=lambda: trace.mark("first_token"),
        on_step=lambda pos: trace.add([pos], full_row),
    )
    return PopResult(out, trace, cache)


def pop_teacher_forced(weights: ModelWeights, plan: PruningPlan, tokens: Sequence[int], prompt_len: int,
                       decode_skip: Sequence[int] = ()) -> T.Tensor:
    """Teacher-forced logits ``[T, V]`` of the structural pipeline.

    Positions before the boundary (N-1, or N without boundary handling) run
    pruned; the rest run with every layer except ``decode_skip``, whose
    KV is still written.
    """
    P = _params(weights)
    c = P.config
    tokens = list(tokens)
    n = len(tokens)
    if not 1 <= prompt_len <= n:
        raise ContractError(f"prompt length {prompt_len} outside [1, {n}]")
    if n > c.max_seq:
        raise CapacityError(f"sequence length {n} exceeds max_seq {c.max_seq}")
    split = prompt_len - 1 if plan.boundary_handling else prompt_len
    cache = KVCache(c, capacity=n)
    parts = []
    if split:
        _, _, h = pruned_prefill(P, plan, tokens[:split], cache)
        parts.append(h)
    if split < n:
        pos = np.arange(split, n)
        h = _pruned_pass(P, embed_tokens(P, tokens[split:]), cache, set(decode_skip), True, pos)
        parts.append(h)
    return head_logits(P, T.concat(parts, axis=-2))


# ---------------------------------------------------------------- ablation variants


@dataclass
class VariantMetrics:
    variant: str
    ratio: float
    resp_loss: float
    first_token_agree: float


def variant_plan(variant: str, num_layers: int, ratio: float) -> PruningPlan:
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if variant == "full":
        return make_plan(num_layers, 0.0)
    strategy = variant if variant in ("shallow", "interleaved") else "deep"
    plan = make_plan(num_layers, ratio, strategy)
    if variant == "no_indep_kv":
        plan = plan.with_options(indep_kv=False)
    elif variant == "no_boundary":
        plan = plan.with_options(boundary_handling=False)
    return plan


def _eval_pair(weights, plan, sample):
    toks = sample.prompt + list(sample.response)
    n = sample.N
    logits = pop_teacher_forced(weights, plan, toks[:-1], n).data
    tgt = np.asarray(toks[1:])
    mask = np.arange(len(tgt)) >= n - 1
    loss = T.cross_entropy(logits, tgt, mask).item()
    return loss, int(mask.sum()), int(np.argmax(logits[n - 1]))


def run_variant(weights: ModelWeights, variant: str, eval_set: Sequence, ratio: float = 1 / 3,
                reference: Optional[list] = None) -> VariantMetrics:
    """Held-out response loss and first-token agreement with the full model.

    ``eval_set`` holds samples with ``prompt`` and a provided ``response``.
    ``reference`` optionally caches the full model's first tokens.
    """
    eval_set = list(eval_set)
    if not eval_set:
        raise DataError("empty evaluation set")
    L = weights.config.num_layers
    plan = variant_plan(variant, L, ratio)
    if reference is None:
        reference = full_first_tokens(weights, eval_set)
    total, count, agree = 0.0, 0, 0
    for s, ref in zip(eval_set, reference):
        loss, m, first = _eval_pair(weights, plan, s)
        total += loss
        count += m
        agree += first == ref
    return VariantMetrics(variant, 0.0 if variant == "full" else float(ratio), total / count, agree / len(eval_set))


def full_first_tokens(weights: ModelWeights, eval_set: Sequence) -> list:
    plan = empty_plan()
    return [_eval_pair(weights, plan, s)[2] for s in eval_set]


def write_variant_csv(path, rows: Sequence[VariantMetrics]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["variant", "ratio", "resp_loss", "first_token_agree"])
        for r in rows:
            wr.writerow([r.variant, repr(r.ratio), repr(r.resp_loss), repr(r.first_token_agree)])


def read_variant_csv(path) -> list:
    with open(path, newline="") as fh:
        return [
            VariantMetrics(r["variant"], float(r["ratio"]), float(r["resp_loss"]), float(r["first_token_agree"]))
            for r in csv.DictReader(fh)
        ]
