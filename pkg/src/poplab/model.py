"""Decoder-only transformer: GQA attention with RoPE, gated-linear FFN, KV cache.

Every layer is pre-norm:

    y   = x + g * Attn(RMSNorm(x))
    out = y + g * FFN(RMSNorm(y))

The gate ``g`` only scales residual-branch outputs. Keys and values are
always computed from the layer input and written to the cache, so a layer
with ``g = 0`` leaves the residual stream untouched but still exposes its
KV states to later positions.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import CapacityError, ConfigError, ContractError
from .tensor import GradientTape, Tensor
from .tokenizer import EOS, VOCAB_SIZE

CONFIG_DIR = Path(__file__).parent / "data" / "configs"

# std of the output head at init, relative to 1/sqrt(d); keeps step-0 logits
# close to uniform so the initial loss sits near ln(V)
HEAD_INIT_GAIN = 0.2


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int
    hidden: int
    num_heads: int
    num_kv_heads: int
    head_dim: int
    ffn_dim: int
    vocab: int = VOCAB_SIZE
    max_seq: int = 512
    rope_theta: float = 10000.0
    norm_eps: float = 1e-6

    def __post_init__(self):
        for name in ("num_layers", "hidden", "num_heads", "num_kv_heads", "head_dim", "ffn_dim", "vocab", "max_seq"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v <= 0:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if self.num_heads % self.num_kv_heads:
            raise ConfigError("num_heads must be a multiple of num_kv_heads")
        if self.num_heads * self.head_dim != self.hidden:
            raise ConfigError("num_heads * head_dim must equal hidden")
        if self.head_dim % 2:
            raise ConfigError("head_dim must be even for RoPE")
        if not self.rope_theta > 0:
            raise ConfigError("rope_theta must be positive")
        if self.norm_eps < 0:
            raise ConfigError("norm_eps must be nonnegative")

    @property
    def kv_dim(self) -> int:
        return self.num_kv_heads * self.head_dim

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known - {"name"}
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**{k: v for k, v in d.items() if k in known})

    @classmethod
    def load(cls, path) -> "ModelConfig":
        """Load a JSON config; bare names resolve to the bundled configs."""
        p = Path(path)
        if not p.exists():
            cand = CONFIG_DIR / (p.name if p.suffix else p.name + ".json")
            if not cand.exists():
                raise ConfigError(f"no such config: {path}")
            p = cand
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: {exc}") from exc
        return cls.from_dict(data)


@dataclass(frozen=True)
class LayerWeights:
    attn_norm: object
    wq: object
    wk: object
    wv: object
    wo: object
    ffn_norm: object
    w_gate: object
    w_up: object
    w_down: object


LAYER_FIELDS = tuple(f.name for f in fields(LayerWeights))


@dataclass(frozen=True, eq=False)
class ModelWeights:
    """All parameters. Fields hold numpy arrays (or Tensors in a view)."""

    config: ModelConfig
    embed: object
    layers: tuple
    final_norm: object
    head: object

    def named_arrays(self) -> list:
        out = [("embed", self.embed)]
        for i, lw in enumerate(self.layers):
            out.extend((f"layers.{i}.{name}", getattr(lw, name)) for name in LAYER_FIELDS)
        out += [("final_norm", self.final_norm), ("head", self.head)]
        return out

    def expected_shapes(self) -> dict:
        return expected_shapes(self.config)

    @classmethod
    def from_named(cls, config: ModelConfig, arrays: dict) -> "ModelWeights":
        layers = tuple(
            LayerWeights(**{name: arrays[f"layers.{i}.{name}"] for name in LAYER_FIELDS})
            for i in range(config.num_layers)
        )
        return cls(config, arrays["embed"], layers, arrays["final_norm"], arrays["head"])

    def replace_layer(self, index: int, **arrays) -> "ModelWeights":
        layers = list(self.layers)
        layers[index] = replace(layers[index], **arrays)
        return replace(self, layers=tuple(layers))

    def view(self) -> "ModelWeights":
        """Untracked Tensor view, cached on the instance."""
        v = self.__dict__.get("_view")
        if v is None:
            v = _map_params(self, lambda name, a: Tensor(a))
            object.__setattr__(self, "_view", v)
        return v

    def tracked_view(self, tape: GradientTape) -> "ModelWeights":
        """Tensor view whose parameters are leaves on ``tape``."""
        return _map_params(self, lambda name, a: tape.leaf(a, name))


def _map_params(w: ModelWeights, fn) -> ModelWeights:
    arrays = {name: fn(name, a) for name, a in w.named_arrays()}
    return ModelWeights.from_named(w.config, arrays)


def _params(weights: ModelWeights) -> ModelWeights:
    return weights if isinstance(weights.embed, Tensor) else weights.view()


def expected_shapes(c: ModelConfig) -> dict:
    shapes = {"embed": (c.vocab, c.hidden)}
    for i in range(c.num_layers):
        p = f"layers.{i}."
        shapes.update({
            p + "attn_norm": (c.hidden,),
            p + "wq": (c.hidden, c.num_heads * c.head_dim),
            p + "wk": (c.hidden, c.kv_dim),
            p + "wv": (c.hidden, c.kv_dim),
            p + "wo": (c.num_heads * c.head_dim, c.hidden),
            p + "ffn_norm": (c.hidden,),
            p + "w_gate": (c.hidden, c.ffn_dim),
            p + "w_up": (c.hidden, c.ffn_dim),
            p + "w_down": (c.ffn_dim, c.hidden),
        })
    shapes["final_norm"] = (c.hidden,)
    shapes["head"] = (c.hidden, c.vocab)
    return shapes


def init_model(config: ModelConfig, seed: int) -> ModelWeights:
    """Seeded init: N(0, 1/fan_in) projections, residual outputs scaled by 1/sqrt(2L)."""
    if not isinstance(config, ModelConfig):
        raise ConfigError("init_model needs a ModelConfig")
    rng = np.random.default_rng(seed)
    c = config
    resid = 1.0 / math.sqrt(2 * c.num_layers)
    arrays = {}
    for name, shape in expected_shapes(c).items():
        if name.endswith("norm"):
            arrays[name] = np.ones(shape)
            continue
        if name == "embed":
            std = 1.0
        else:
            std = 1.0 / math.sqrt(shape[0])
            if name.endswith(("wo", "w_down")):
                std *= resid
            elif name == "head":
                std *= HEAD_INIT_GAIN
        arrays[name] = rng.normal(0.0, std, size=shape)
    return ModelWeights.from_named(c, arrays)


# ---------------------------------------------------------------- KV cache


class KVCache:
    """Per-layer growable key/value store with absolute positions."""

    def __init__(self, config: ModelConfig, capacity: int = 64):
        self.config = config
        L, KV, hd = config.num_layers, config.num_kv_heads, config.head_dim
        cap = max(1, capacity)
        self._k = [np.empty((cap, KV, hd)) for _ in range(L)]
        self._v = [np.empty((cap, KV, hd)) for _ in range(L)]
        self._pos = [np.empty(cap, dtype=np.int64) for _ in range(L)]
        self._len = [0] * L

    def __len__(self):
        return self.config.num_layers

    def length(self, layer: int) -> int:
        return self._len[layer]

    @property
    def lengths(self) -> list:
        return list(self._len)

    def keys(self, layer: int) -> np.ndarray:
        return self._k[layer][: self._len[layer]]

    def values(self, layer: int) -> np.ndarray:
        return self._v[layer][: self._len[layer]]

    def positions(self, layer: int) -> np.ndarray:
        return self._pos[layer][: self._len[layer]]

    def check_positions(self, layer: int, positions) -> None:
        positions = np.asarray(positions, dtype=np.int64)
        n = self._len[layer]
        if len(positions) > 1 and np.any(np.diff(positions) <= 0):
            raise ContractError("positions must be strictly increasing")
        if n and len(positions) and positions[0] <= self._pos[layer][n - 1]:
            raise ContractError(
                f"layer {layer}: position {positions[0]} overlaps cache ending at {self._pos[layer][n - 1]}"
            )

    def append(self, layer: int, k: np.ndarray, v: np.ndarray, positions) -> None:
        positions = np.asarray(positions, dtype=np.int64)
        self.check_positions(layer, positions)
        n, t = self._len[layer], len(positions)
        if n + t > self._k[layer].shape[0]:
            cap = max(n + t, 2 * self._k[layer].shape[0])
            for store in (self._k, self._v, self._pos):
                old = store[layer]
                new = np.empty((cap,) + old.shape[1:], dtype=old.dtype)
                new[:n] = old[:n]
                store[layer] = new
        self._k[layer][n : n + t] = k
        self._v[layer][n : n + t] = v
        self._pos[layer][n : n + t] = positions
        self._len[layer] = n + t


# ---------------------------------------------------------------- gates


class StageGate(NamedTuple):
    """Per-position gate: rows at positions < boundary use ``prefill``."""

    prefill: object
    decode: object
    boundary: int


@dataclass
class GateSchedule:
    """Virtual gates per (layer, stage) with prompt length N.

    Positions ``p < N - 1`` use the prefill gate, ``p >= N - 1`` the decode
    gate. With ``stage_aware=False`` one gate per layer covers both regions.
    """

    prompt_len: int
    g_prefill: np.ndarray
    g_decode: np.ndarray
    tracked: bool = False
    stage_aware: bool = True

    @classmethod
    def ones(cls, num_layers: int, prompt_len: int, tracked: bool = False, stage_aware: bool = True):
        return cls(prompt_len, np.ones(num_layers), np.ones(num_layers), tracked, stage_aware)

    def __post_init__(self):
        self.g_prefill = np.asarray(self.g_prefill, dtype=float)
        self.g_decode = np.asarray(self.g_decode, dtype=float)
        if self.g_prefill.shape != self.g_decode.shape or self.g_prefill.ndim != 1:
            raise ConfigError("g_prefill and g_decode must be 1-d of equal length")
        if self.prompt_len < 1:
            raise ContractError("prompt_len must be >= 1")
        if not self.stage_aware and not np.array_equal(self.g_prefill, self.g_decode):
            raise ConfigError("stage-agnostic gates need g_prefill == g_decode")

    @property
    def num_layers(self) -> int:
        return len(self.g_prefill)

    @staticmethod
    def leaf_name(stage: str, layer: int) -> str:
        return f"gate.{stage}.{layer}"

    def layer_gates(self, tape: Optional[GradientTape] = None) -> list:
        """One StageGate per layer; registers leaves on ``tape`` when tracked."""
        out = []
        for l in range(self.num_layers):
            gp, gd = float(self.g_prefill[l]), float(self.g_decode[l])
            if self.tracked:
                if self.stage_aware:
                    gp = tape.leaf(gp, self.leaf_name("prefill", l))
                    gd = tape.leaf(gd, self.leaf_name("decode", l))
                else:
                    gp = gd = tape.leaf(gp, self.leaf_name("shared", l))
            out.append(StageGate(gp, gd, self.prompt_len - 1))
        return out


def _is_one(g) -> bool:
    return not isinstance(g, Tensor) and float(g) == 1.0


def _gated(branch: Tensor, gate, positions) -> Tensor:
    if gate is None:
        return branch
    if not isinstance(gate, StageGate):
        return branch if _is_one(gate) else T.mul(branch, gate)
    t = branch.shape[-2]
    split = int(np.sum(np.asarray(positions) < gate.boundary))
    if split == 0:
        return _gated(branch, gate.decode, positions)
    if split == t:
        return _gated(branch, gate.prefill, positions)
    pre = _gated(T.take_rows(branch, 0, split), gate.prefill, positions)
    dec = _gated(T.take_rows(branch, split, t), gate.decode, positions)
    return T.concat([pre, dec], axis=-2)


# ---------------------------------------------------------------- layers


def _lead(x: Tensor) -> tuple:
    return x.shape[:-2]


def _kv(P: ModelWeights, h: Tensor, l: int, positions):
    c = P.config
    lw = P.layers[l]
    t = h.shape[-2]
    k = T.reshape(T.matmul(h, lw.wk), _lead(h) + (t, c.num_kv_heads, c.head_dim))
    k = T.rope_apply(k, positions, c.rope_theta)
    v = T.reshape(T.matmul(h, lw.wv), _lead(h) + (t, c.num_kv_heads, c.head_dim))
    return k, v


def kv_project(weights: ModelWeights, x, layer: int, positions):
    """Keys (RoPE-rotated) and values of ``layer`` for hidden states ``x[t, d]``."""
    P = _params(weights)
    if not 0 <= layer < P.config.num_layers:
        raise ContractError(f"invalid layer index {layer}")
    x = T.as_tensor(x)
    h = T.rmsnorm(x, P.layers[layer].attn_norm, P.config.norm_eps)
    k, v = _kv(P, h, layer, positions)
    return k.data, v.data


def layer_forward(weights: ModelWeights, x, layer: int, cache: Optional[KVCache] = None,
                  gate=1.0, positions=None, probe: Optional[dict] = None) -> Tensor:
    """One transformer layer over ``x[..., t, d]`` at absolute ``positions``.

    With a cache, new keys/values are appended (unscaled by the gate) and
    attention covers the cached prefix plus the current rows. ``probe``
    receives ``x_in``, ``k``, ``v`` and ``attn_out`` arrays when given.
    """
    P = _params(weights)
    c = P.config
    if not 0 <= layer < c.num_layers:
        raise ContractError(f"invalid layer index {layer}")
    lw = P.layers[layer]
    x = T.as_tensor(x)
    t = x.shape[-2]
    if positions is None:
        start = cache.positions(layer)[-1] + 1 if cache is not None and cache.length(layer) else 0
        positions = np.arange(start, start + t)
    positions = np.asarray(positions, dtype=np.int64)
    if cache is not None:
        cache.check_positions(layer, positions)

    h = T.rmsnorm(x, lw.attn_norm, c.norm_eps)
    q = T.reshape(T.matmul(h, lw.wq), _lead(x) + (t, c.num_heads, c.head_dim))
    q = T.rope_apply(q, positions, c.rope_theta)
    k, v = _kv(P, h, layer, positions)
    k_pos = positions
    if cache is not None:
        if _lead(x):
            raise ContractError("cached forward works on a single sequence [t, d]")
        n_past = cache.length(layer)
        # views stay valid across a reallocation; rows [:n_past] never change
        past_k, past_v, past_pos = cache.keys(layer), cache.values(layer), cache.positions(layer)
        cache.append(layer, k.data, v.data, positions)
        if n_past and (k.tracked or v.tracked):
            k = T.concat([Tensor(past_k), k], axis=-3)
            v = T.concat([Tensor(past_v), v], axis=-3)
            k_pos = np.concatenate([past_pos, positions])
        elif n_past:
            k, v = Tensor(cache.keys(layer)), Tensor(cache.values(layer))
            k_pos = cache.positions(layer)
    attn = T.causal_attention(q, k, v, positions, k_pos)
    attn = T.matmul(T.reshape(attn, _lead(x) + (t, c.num_heads * c.head_dim)), lw.wo)
    y = T.add(x, _gated(attn, gate, positions))

    h2 = T.rmsnorm(y, lw.ffn_norm, c.norm_eps)
    ff = T.mul(T.silu(T.matmul(h2, lw.w_gate)), T.matmul(h2, lw.w_up))
    ff = T.matmul(ff, lw.w_down)
    out = T.add(y, _gated(ff, gate, positions))
    if probe is not None:
        probe.update(x_in=x.data, k=k.data[..., -t:, :, :], v=v.data[..., -t:, :, :], attn_out=attn.data)
    return out


def embed_tokens(weights: ModelWeights, tokens) -> Tensor:
    P = _params(weights)
    return T.embedding(P.embed, tokens)


def head_logits(weights: ModelWeights, x) -> Tensor:
    P = _params(weights)
    return T.matmul(T.rmsnorm(T.as_tensor(x), P.final_norm, P.config.norm_eps), P.head)


def forward(weights: ModelWeights, tokens) -> Tensor:
    """Plain gate-free forward over ``tokens[T]`` or ``tokens[B, T]``."""
    P = _params(weights)
    tokens = np.asarray(tokens, dtype=np.int64)
    _check_len(P.config, tokens.shape[-1])
    pos = np.arange(tokens.shape[-1])
    x = embed_tokens(P, tokens)
    for l in range(P.config.num_layers):
        x = layer_forward(P, x, l, None, None, pos)
    return head_logits(P, x)


def _check_len(c: ModelConfig, n: int) -> None:
    if n > c.max_seq:
        raise CapacityError(f"sequence length {n} exceeds max_seq {c.max_seq}")


def forward_teacher_forced(weights: ModelWeights, tokens: Sequence[int], gates: Optional[GateSchedule] = None,
                           tape: Optional[GradientTape] = None):
    """Gate-aware causal pass over one sequence; returns ``(logits[T, V], tape)``.

    ``tape`` is None unless the gates are tracked.
    """
    P = _params(weights)
    c = P.config
    tokens = np.asarray(tokens, dtype=np.int64)
    n = len(tokens)
    _check_len(c, n)
    if gates is None:
        gates = GateSchedule.ones(c.num_layers, 1)
    if not 1 <= gates.prompt_len <= n:
        raise ContractError(f"prompt length {gates.prompt_len} outside [1, {n}]")
    if gates.num_layers != c.num_layers:
        raise ContractError("gate schedule does not match the number of layers")
    if gates.tracked and tape is None:
        tape = GradientTape()
    per_layer = gates.layer_gates(tape if gates.tracked else None)
    pos = np.arange(n)
    x = embed_tokens(P, tokens)
    for l in range(c.num_layers):
        x = layer_forward(P, x, l, None, per_layer[l], pos)
    return head_logits(P, x), (tape if gates.tracked else None)


# ---------------------------------------------------------------- generation


def pick_token(logits: np.ndarray, temperature: float, rng: np.random.Generator) -> int:
    """Argmax at temperature 0 (ties -> lowest id), else inverse-CDF sampling."""
    if temperature < 0:
        raise ConfigError("temperature must be >= 0")
    if temperature == 0:
        return int(np.argmax(logits))
    z = logits / temperature
    p = np.exp(z - z.max())
    cdf = np.cumsum(p)
    u = rng.random() * cdf[-1]
    return int(min(np.searchsorted(cdf, u, side="right"), len(cdf) - 1))


def prefill(weights: ModelWeights, tokens, cache: KVCache, start: int = 0) -> Tensor:
    """Run all layers over ``tokens`` with the cache; returns final hidden states."""
    P = _params(weights)
    pos = np.arange(start, start + len(tokens))
    x = embed_tokens(P, tokens)
    for l in range(P.config.num_layers):
        x = layer_forward(P, x, l, cache, None, pos)
    return x


def generate(weights: ModelWeights, prompt: Sequence[int], max_new: int, temperature: float = 0.0,
             seed: int = 0, stop_at_eos: bool = True) -> list:
    """Autoregressive generation with a KV cache; returns the new token ids."""
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
    cache = KVCache(c, capacity=len(prompt) + max_new)
    x = prefill(P, prompt, cache)
    logits = head_logits(P, T.take_rows(x, x.shape[-2] - 1, x.shape[-2])).data[-1]
    return decode_loop(P, cache, logits, len(prompt), max_new, temperature, rng, stop_at_eos)


def decode_loop(P: ModelWeights, cache: KVCache, logits: np.ndarray, next_pos: int, max_new: int,
                temperature: float, rng, stop_at_eos: bool = True, on_first=None, on_step=None) -> list:
    """Sample from ``logits`` then keep decoding with the full model.

    ``on_first()`` fires once the first token is chosen; ``on_step(pos)``
    after each full-model decode step.
    """
    out = []
    pos = next_pos
    while len(out) < max_new:
        tok = pick_token(logits, temperature, rng)
        out.append(tok)
        if on_first is not None and len(out) == 1:
            on_first()
        if (stop_at_eos and tok == EOS) or len(out) == max_new or pos >= P.config.max_seq:
            break
        x = prefill(P, [tok], cache, start=pos)
        logits = head_logits(P, x).data[-1]
        if on_step is not None:
            on_step(pos)
        pos += 1
    return out
