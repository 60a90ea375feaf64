"""Cosine-similarity drift between full and pruned pipelines.

For every layer the full and pruned runs are compared on identical prompts:
the hidden state entering the layer and the cached K and V rows over the
prompt prefix, plus the attention output (after the output projection) at
the boundary step, i.e. the decode step that emits the first token.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..model import KVCache, ModelWeights, _params, embed_tokens, layer_forward
from ..parallel import ordered_map
from ..pop import PruningPlan, empty_plan, pruned_prefill

QUANTITIES = ("hidden", "key", "value", "attn_out")


def cosine_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise cosine similarity of two ``[n, ...]`` arrays; zero rows compare as 1 to zero rows."""
    a = np.asarray(a, float).reshape(len(a), -1)
    b = np.asarray(b, float).reshape(len(b), -1)
    na, nb = np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1)
    dot = np.sum(a * b, axis=1)
    out = np.ones(len(a))
    both = (na > 0) & (nb > 0)
    out[both] = dot[both] / (na[both] * nb[both])
    out[(na > 0) ^ (nb > 0)] = 0.0
    return np.clip(out, -1.0, 1.0)


@dataclass
class DriftTrace:
    skip_set: tuple
    num_prompts: int
    hidden: np.ndarray
    key: np.ndarray
    value: np.ndarray
    attn_out: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def num_layers(self) -> int:
        return len(self.hidden)

    def rows(self) -> list:
        return [
            {"layer": l, "skipped": int(l in self.skip_set), "hidden": float(self.hidden[l]),
             "key": float(self.key[l]), "value": float(self.value[l]), "attn_out": float(self.attn_out[l])}
            for l in range(self.num_layers)
        ]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.DictWriter(fh, ["layer", "skipped", *QUANTITIES])
            wr.writeheader()
            for r in self.rows():
                wr.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})

    @classmethod
    def read_csv(cls, path) -> "DriftTrace":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        col = lambda k: np.array([float(r[k]) for r in rows])
        skip = tuple(int(r["layer"]) for r in rows if int(r["skipped"]))
        return cls(skip, 0, col("hidden"), col("key"), col("value"), col("attn_out"))


def _run(P: ModelWeights, plan: PruningPlan, prompt: list):
    """Per-layer probes for the prefix and the boundary step."""
    L = P.config.num_layers
    n = len(prompt)
    cache = KVCache(P.config, capacity=n)
    prefix_probes = {}
    pruned_prefill(P, plan, prompt[:-1], cache, probes=prefix_probes)
    x = embed_tokens(P, prompt[-1:])
    boundary = []
    for l in range(L):
        probe = {}
        x = layer_forward(P, x, l, cache, None, [n - 1], probe)
        boundary.append(probe)
    keys = [cache.keys(l)[: n - 1].copy() for l in range(L)]
    values = [cache.values(l)[: n - 1].copy() for l in range(L)]
    return prefix_probes, keys, values, boundary


def _compare(P: ModelWeights, plan: PruningPlan, prompt: list) -> np.ndarray:
    L = P.config.num_layers
    fp, fk, fv, fb = _run(P, empty_plan(), prompt)
    pp, pk, pv, pb = _run(P, plan, prompt)
    out = np.zeros((4, L))
    for l in range(L):
        out[0, l] = np.mean(cosine_rows(fp[l]["x_in"], pp[l]["x_in"]))
        if plan.indep_kv or l not in plan.skip_set:
            out[1, l] = np.mean(cosine_rows(fk[l], pk[l]))
            out[2, l] = np.mean(cosine_rows(fv[l], pv[l]))
        else:
            out[1, l] = out[2, l] = np.nan
        out[3, l] = cosine_rows(fb[l]["attn_out"], pb[l]["attn_out"])[0]
    return out


def drift_diagnostics(weights: ModelWeights, plan: PruningPlan, prompts: Sequence[Sequence[int]],
                      workers: int | None = None) -> DriftTrace:
    """Mean per-layer similarities over ``prompts`` (each needs at least two tokens)."""
    P = _params(weights)
    prompts = [list(p) for p in prompts]
    if not prompts or any(len(p) < 2 for p in prompts):
        raise ValueError("drift diagnostics need prompts of at least two tokens")
    per = ordered_map(lambda p: _compare(P, plan, p), prompts, workers)
    mean = np.mean(np.stack(per), axis=0)
    return DriftTrace(tuple(plan.skip_set), len(prompts), mean[0], mean[1], mean[2], mean[3])
