"""Layer importance from virtual-gate gradients.

Every layer gets a scalar gate on its residual branches, one per stage
(prompt rows vs response rows) or one shared gate. Targets are sampled
from the model itself, one forward/backward gives every gate gradient,
and a layer's score is the mean squared gradient over the calibration
set. A brute-force oracle measures the actual loss increase when a gate
is set to zero.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from . import tensor as T
from .checkpoint import model_hash
from .errors import ConfigError, ContractError, DataError
from .model import GateSchedule, ModelWeights, forward_teacher_forced, generate
from .parallel import ordered_map
from .tokenizer import BOS, encode
from .train import load_corpus, split_corpus

STAGES = ("prefill", "decode")


@dataclass
class CalibSample:
    prompt: list
    response: Optional[list] = None
    sampled: Optional[list] = None

    def __post_init__(self):
        self.prompt = [int(t) for t in self.prompt]
        if not self.prompt:
            raise ContractError("calibration prompt must be nonempty")

    @property
    def N(self) -> int:
        return len(self.prompt)

    def target(self, use_provided: bool = False) -> list:
        resp = self.response if use_provided else self.sampled
        if not resp:
            raise ContractError("calibration sample has no response")
        return list(resp)

    def tokens(self, use_provided: bool = False) -> list:
        return self.prompt + self.target(use_provided)


def sample_seed(seed: int, index: int) -> int:
    """Per-sample seed, independent of scheduling order."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


# ---------------------------------------------------------------- calibration sets


def heldout_calibration(num_samples: int = 200, prompt_bytes: int = 64, seed: int = 0,
                        response_bytes: int = 64, corpus=None) -> list:
    """Prompts of BOS + ``prompt_bytes`` held-out bytes at seeded offsets.

    The bytes that follow each prompt are kept as the provided response.
    """
    _, held = split_corpus(load_corpus(corpus))
    span = prompt_bytes + response_bytes
    if len(held) < span:
        raise DataError("held-out slice shorter than one calibration window")
    rng = np.random.default_rng(seed)
    starts = rng.integers(0, len(held) - span + 1, size=num_samples)
    out = []
    for s in starts:
        chunk = held[s : s + span]
        out.append(CalibSample(encode(chunk[:prompt_bytes]), encode(chunk[prompt_bytes:], bos=False)))
    return out


def load_calibration_jsonl(path) -> list:
    samples = []
    try:
        lines = Path(path).read_text().splitlines()
    except FileNotFoundError as exc:
        raise DataError(f"calibration file not found: {path}") from exc
    for i, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            prompt = row["prompt"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise DataError(f"{path}:{i}: expected {{\"prompt\": ..., \"response\": ...}}") from exc
        resp = row.get("response")
        samples.append(CalibSample(encode(prompt), encode(resp, bos=False) if resp else None))
    if not samples:
        raise DataError(f"{path}: empty calibration set")
    return samples


# ---------------------------------------------------------------- targets and gradients


def sample_targets(weights: ModelWeights, prompt: Sequence[int], max_len: int = 64,
                   temperature: float = 1.0, seed: int = 0) -> list:
    """Ancestral sample from the full model, stopping at EOS or ``max_len``."""
    if not temperature > 0:
        raise ConfigError("target sampling needs temperature > 0")
    room = weights.config.max_seq - len(prompt)
    return generate(weights, prompt, min(max_len, room), temperature=temperature, seed=seed)


def freeze_targets(weights: ModelWeights, samples: Sequence[CalibSample], max_len: int = 64,
                   temperature: float = 1.0, seed: int = 0) -> list:
    """Copies of ``samples`` with ``sampled`` filled; sample i uses ``sample_seed(seed, i)``."""
    out = []
    for i, s in enumerate(samples):
        resp = sample_targets(weights, s.prompt, max_len, temperature, sample_seed(seed, i))
        out.append(CalibSample(s.prompt, s.response, resp))
    return out


@dataclass
class GateGradients:
    prefill: np.ndarray
    decode: np.ndarray
    loss: float
    stage_aware: bool = True
    prefill_empty: bool = False


def _loss_inputs(sample: CalibSample, use_provided: bool):
    toks = np.asarray(sample.tokens(use_provided), dtype=np.int64)
    n = sample.N
    mask = np.arange(len(toks) - 1) >= n - 1
    return toks[:-1], toks[1:], mask


def sample_loss(weights: ModelWeights, sample: CalibSample, gates: Optional[GateSchedule] = None,
                use_provided: bool = False) -> float:
    """Summed response-token loss under fixed gate values."""
    inp, tgt, mask = _loss_inputs(sample, use_provided)
    if gates is None:
        gates = GateSchedule.ones(weights.config.num_layers, sample.N)
    logits, _ = forward_teacher_forced(weights, inp, gates)
    return T.cross_entropy(logits, tgt, mask).item()


def gate_gradients(weights: ModelWeights, sample: CalibSample, stage_aware: bool = True,
                   use_provided: bool = False, gates: Optional[GateSchedule] = None) -> GateGradients:
    """d(loss)/d(gate) for every layer and stage at the given gates (default all ones)."""
    L = weights.config.num_layers
    inp, tgt, mask = _loss_inputs(sample, use_provided)
    if gates is None:
        gates = GateSchedule.ones(L, sample.N, tracked=True, stage_aware=stage_aware)
    else:
        gates = GateSchedule(gates.prompt_len, gates.g_prefill, gates.g_decode, True, stage_aware)
    logits, tape = forward_teacher_forced(weights, inp, gates)
    loss = T.cross_entropy(logits, tgt, mask)
    grads = T.backward(tape, loss)
    if stage_aware:
        gp = np.array([grads[GateSchedule.leaf_name("prefill", l)].item() for l in range(L)])
        gd = np.array([grads[GateSchedule.leaf_name("decode", l)].item() for l in range(L)])
    else:
        gp = np.array([grads[GateSchedule.leaf_name("shared", l)].item() for l in range(L)])
        gd = gp.copy()
    return GateGradients(gp, gd, loss.item(), stage_aware, prefill_empty=stage_aware and sample.N == 1)


# ---------------------------------------------------------------- profile


@dataclass
class ImportanceProfile:
    prefill_score: np.ndarray
    decode_score: np.ndarray
    prefill_grad_mean: np.ndarray
    decode_grad_mean: np.ndarray
    prefill_grad_se: np.ndarray
    decode_grad_se: np.ndarray
    num_samples: int
    seed: int
    stage_aware: bool
    model_hash: str = ""
    sampling: dict = field(default_factory=dict)
    per_sample: Optional[np.ndarray] = None  # [samples, 2, L] when kept

    @property
    def num_layers(self) -> int:
        return len(self.prefill_score)

    @classmethod
    def from_gradients(cls, grads: np.ndarray, **meta) -> "ImportanceProfile":
        """Build from stacked per-sample gradients of shape ``[n, 2, L]``."""
        grads = np.asarray(grads, dtype=float)
        n = grads.shape[0]
        score = np.mean(grads**2, axis=0)
        mean = np.mean(grads, axis=0)
        se = np.std(grads, axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.zeros_like(mean)
        return cls(score[0], score[1], mean[0], mean[1], se[0], se[1], num_samples=n, **meta)

    def scores(self, stage: str) -> np.ndarray:
        if stage not in STAGES:
            raise ConfigError(f"unknown stage {stage!r}")
        return self.prefill_score if stage == "prefill" else self.decode_score

    def first_order_fraction(self, k: float = 3.0) -> float:
        """Share of gates whose mean gradient lies within k standard errors of zero."""
        means = np.concatenate([self.prefill_grad_mean, self.decode_grad_mean])
        ses = np.concatenate([self.prefill_grad_se, self.decode_grad_se])
        if not self.stage_aware:
            means, ses = self.prefill_grad_mean, self.prefill_grad_se
        return float(np.mean(np.abs(means) <= k * ses))

    def to_dict(self) -> dict:
        layers = [
            {
                "index": l,
                "prefill_score": float(self.prefill_score[l]),
                "decode_score": float(self.decode_score[l]),
                "prefill_grad_mean": float(self.prefill_grad_mean[l]),
                "decode_grad_mean": float(self.decode_grad_mean[l]),
                "prefill_grad_se": float(self.prefill_grad_se[l]),
                "decode_grad_se": float(self.decode_grad_se[l]),
            }
            for l in range(self.num_layers)
        ]
        d = {
            "model_hash": self.model_hash,
            "stage_aware": self.stage_aware,
            "num_samples": self.num_samples,
            "seed": self.seed,
            "sampling": self.sampling,
            "layers": layers,
        }
        if self.per_sample is not None:
            d["per_sample_grads"] = self.per_sample.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ImportanceProfile":
        try:
            layers = sorted(d["layers"], key=lambda r: r["index"])
            col = lambda k: np.array([float(r[k]) for r in layers])
            per = d.get("per_sample_grads")
            return cls(
                col("prefill_score"), col("decode_score"),
                col("prefill_grad_mean"), col("decode_grad_mean"),
                col("prefill_grad_se"), col("decode_grad_se"),
                num_samples=int(d["num_samples"]), seed=int(d["seed"]),
                stage_aware=bool(d["stage_aware"]), model_hash=d.get("model_hash", ""),
                sampling=d.get("sampling", {}),
                per_sample=np.array(per, dtype=float) if per is not None else None,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed importance profile: {exc}") from exc

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "ImportanceProfile":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: {exc}") from exc


def estimate_importance(weights: ModelWeights, samples: Sequence[CalibSample], stage_aware: bool = True,
                        max_len: int = 64, temperature: float = 1.0, seed: int = 0,
                        workers: Optional[int] = None, keep_grads: bool = False,
                        use_provided: bool = False) -> ImportanceProfile:
    """Mean squared gate gradient per layer and stage.

    Samples whose ``sampled`` field is already set reuse those targets;
    others draw targets with ``sample_seed(seed, i)``. With
    ``use_provided`` the fixed responses are used instead, which breaks the
    zero-mean property of the gradients (useful as a diagnostic).
    """
    samples = list(samples)
    if not samples:
        raise DataError("empty calibration set")
    if not use_provided and not temperature > 0:
        raise ConfigError("target sampling needs temperature > 0")

    def one(i: int) -> np.ndarray:
        s = samples[i]
        if not use_provided and s.sampled is None:
            s = CalibSample(s.prompt, s.response,
                            sample_targets(weights, s.prompt, max_len, temperature, sample_seed(seed, i)))
        g = gate_gradients(weights, s, stage_aware, use_provided)
        return np.stack([g.prefill, g.decode])

    grads = np.stack(ordered_map(one, range(len(samples)), workers))
    sampling = {"temperature": temperature, "max_len": max_len,
                "targets": "provided" if use_provided else "sampled"}
    return ImportanceProfile.from_gradients(
        grads, seed=seed, stage_aware=stage_aware, model_hash=model_hash(weights),
        sampling=sampling, per_sample=grads if keep_grads else None,
    )


# ---------------------------------------------------------------- oracle


def ablation_schedule(L: int, prompt_len: int, layer: int, stage: str) -> GateSchedule:
    if not 0 <= layer < L:
        raise ContractError(f"invalid layer index {layer}")
    gp, gd = np.ones(L), np.ones(L)
    if stage == "prefill":
        gp[layer] = 0.0
    elif stage == "decode":
        gd[layer] = 0.0
    elif stage == "both":
        gp[layer] = gd[layer] = 0.0
    else:
        raise ConfigError(f"unknown stage {stage!r}")
    return GateSchedule(prompt_len, gp, gd)


def brute_force_delta_loss(weights: ModelWeights, samples: Sequence[CalibSample], layer: int, stage: str,
                           baselines: Optional[Sequence[float]] = None) -> float:
    """Mean over samples of loss(gate_l^stage = 0) - loss(all gates 1) with frozen targets."""
    samples = list(samples)
    if not samples:
        raise DataError("empty calibration set")
    L = weights.config.num_layers
    if not 0 <= layer < L:
        raise ContractError(f"invalid layer index {layer}")
    if baselines is None:
        baselines = [sample_loss(weights, s) for s in samples]
    diffs = [
        sample_loss(weights, s, ablation_schedule(L, s.N, layer, stage)) - b
        for s, b in zip(samples, baselines)
    ]
    return float(np.mean(diffs))


def delta_loss_sweep(weights: ModelWeights, samples: Sequence[CalibSample]) -> dict:
    """ΔL for every layer in each stage; returns ``{stage: array[L]}``."""
    samples = list(samples)
    base = [sample_loss(weights, s) for s in samples]
    L = weights.config.num_layers
    return {
        stage: np.array([brute_force_delta_loss(weights, samples, l, stage, base) for l in range(L)])
        for stage in STAGES
    }


def rank_correlation(scores: Sequence[float], deltas: Sequence[float]) -> float:
    """Spearman rank correlation; nan when either side is constant."""
    a, b = np.asarray(scores, float), np.asarray(deltas, float)
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        return float("nan")
    return float(stats.spearmanr(a, b).statistic)
