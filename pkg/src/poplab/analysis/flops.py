"""Analytic prefill FLOPs for full and pruned pipelines.

A matmul of ``[m, k] @ [k, n]`` costs ``2 m k n``. Attention scores and
value mixing under a causal mask cost ``2 * heads * head_dim`` per
(query, key) pair, summed over query positions. Norms, RoPE, softmax,
activations and residual adds are counted linearly and itemised apart
from the matmuls.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from ..errors import ContractError
from ..model import ModelConfig

GEMM_ITEMS = ("q", "k", "v", "o", "ffn")
ATTN_ITEMS = ("attn_score", "attn_value")
ELEMENTWISE_ITEMS = ("norm", "rope", "softmax", "activation", "residual")


def layer_breakdown(c: ModelConfig, n: int) -> dict:
    """FLOPs of one full layer over ``n`` prompt tokens."""
    d, H, KV, hd, f = c.hidden, c.num_heads, c.num_kv_heads, c.head_dim, c.ffn_dim
    pairs = n * (n + 1) // 2  # causal (query, key) pairs
    return {
        "q": 2 * n * d * H * hd,
        "k": 2 * n * d * KV * hd,
        "v": 2 * n * d * KV * hd,
        "o": 2 * n * H * hd * d,
        "attn_score": 2 * H * hd * pairs,
        "attn_value": 2 * H * hd * pairs,
        "ffn": 3 * 2 * n * d * f,
        "norm": 2 * 4 * n * d,
        "rope": 3 * n * (H + KV) * hd,
        "softmax": 3 * H * pairs,
        "activation": 5 * n * f,
        "residual": 2 * n * d,
    }


def kv_only_breakdown(c: ModelConfig, n: int) -> dict:
    """A pruned layer: input norm, K and V projections, RoPE on K."""
    full = layer_breakdown(c, n)
    return {
        "k": full["k"],
        "v": full["v"],
        "norm": 4 * n * c.hidden,
        "rope": 3 * n * c.num_kv_heads * c.head_dim,
    }


def head_flops(c: ModelConfig) -> int:
    """Final norm and logit head for the one position that emits a token."""
    return 4 * c.hidden + 2 * c.hidden * c.vocab


@dataclass
class FlopsReport:
    seq_len: int
    skip_set: tuple
    layer: dict
    kv_only: dict
    layer_total: int
    kv_only_total: int
    head: int
    per_layer: list = field(default_factory=list)
    full_total: int = 0
    pop_total: int = 0
    kv_fraction: float = 0.0
    kv_fraction_with_attention: float = 0.0
    theoretical_speedup: float = 1.0

    def to_dict(self) -> dict:
        return {
            "seq_len": self.seq_len,
            "skip_set": list(self.skip_set),
            "layer": self.layer,
            "kv_only": self.kv_only,
            "layer_total": self.layer_total,
            "kv_only_total": self.kv_only_total,
            "head": self.head,
            "per_layer": self.per_layer,
            "full_total": self.full_total,
            "pop_total": self.pop_total,
            "kv_fraction": self.kv_fraction,
            "kv_fraction_with_attention": self.kv_fraction_with_attention,
            "theoretical_speedup": self.theoretical_speedup,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FlopsReport":
        d = dict(d)
        d["skip_set"] = tuple(d["skip_set"])
        return cls(**d)


def count_flops(config: ModelConfig, plan, seq_len: int) -> FlopsReport:
    """Prefill FLOPs over ``seq_len`` tokens, full vs. with ``plan.skip_set`` pruned.

    ``kv_fraction`` is (K + V) over the per-layer weight matmuls, which
    does not depend on ``seq_len``; the share including attention terms is
    reported separately.
    """
    if seq_len < 1:
        raise ContractError("seq_len must be >= 1")
    skip = tuple(sorted(plan.skip_set)) if plan is not None else ()
    if any(not 0 <= l < config.num_layers for l in skip):
        raise ContractError(f"skip set {skip} out of range for {config.num_layers} layers")
    layer = layer_breakdown(config, seq_len)
    kv = kv_only_breakdown(config, seq_len)
    layer_total, kv_total = sum(layer.values()), sum(kv.values())
    head = head_flops(config)
    per_layer = [
        {"layer": l, "mode": "kv_only" if l in skip else "full", "total": kv_total if l in skip else layer_total}
        for l in range(config.num_layers)
    ]
    full_total = config.num_layers * layer_total + head
    pop_total = full_total - len(skip) * (layer_total - kv_total)
    gemm = sum(layer[k] for k in GEMM_ITEMS)
    return FlopsReport(
        seq_len=seq_len,
        skip_set=skip,
        layer=layer,
        kv_only=kv,
        layer_total=layer_total,
        kv_only_total=kv_total,
        head=head,
        per_layer=per_layer,
        full_total=full_total,
        pop_total=pop_total,
        kv_fraction=(layer["k"] + layer["v"]) / gemm,
        kv_fraction_with_attention=(layer["k"] + layer["v"]) / layer_total,
        theoretical_speedup=full_total / pop_total,
    )
