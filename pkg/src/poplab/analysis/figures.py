"""Regenerate the importance curves, drift traces and ratio sweep from a checkpoint."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

from ..checkpoint import load_checkpoint
from ..errors import DataError
from ..importance import ImportanceProfile, estimate_importance, heldout_calibration
from ..model import ModelWeights
from ..parallel import ordered_map
from ..pop import full_first_tokens, make_plan, run_variant, variant_plan
from .drift import QUANTITIES, DriftTrace, drift_diagnostics
from .flops import count_flops
from .report import write_chart, write_csv

SWEEP_RATIOS = (0.0, 0.2, 0.25, 1 / 3, 0.4, 0.5, 0.6)


@dataclass
class SweepRow:
    ratio: float
    skipped: int
    resp_loss: float
    first_token_agree: float
    theoretical_speedup: float


def ratio_sweep(weights: ModelWeights, eval_set: Sequence, ratios: Sequence[float] = SWEEP_RATIOS,
                seq_len: Optional[int] = None) -> list:
    """Deep-pruning response loss, agreement and analytic speedup per ratio."""
    eval_set = list(eval_set)
    L = weights.config.num_layers
    ref = full_first_tokens(weights, eval_set)
    n = seq_len or eval_set[0].N

    def row(r):
        m = run_variant(weights, "pop" if r > 0 else "full", eval_set, r, ref)
        plan = make_plan(L, r)
        return SweepRow(float(r), len(plan.skip_set), m.resp_loss, m.first_token_agree,
                        count_flops(weights.config, plan, n).theoretical_speedup)

    return ordered_map(row, list(ratios))


def write_importance(outdir: Path, profile: ImportanceProfile, svg: bool = True) -> list:
    rows = [(l, float(profile.prefill_score[l]), float(profile.decode_score[l])) for l in range(profile.num_layers)]
    write_csv(outdir / "importance.csv", ["layer", "prefill_score", "decode_score"], rows)
    profile.save(outdir / "profile.json")
    layers = list(range(profile.num_layers))
    series = {"prefill": (layers, list(profile.prefill_score)), "decode": (layers, list(profile.decode_score))}
    return [outdir / "importance.csv", outdir / "profile.json"] + write_chart(
        outdir / "importance", series, svg=svg, title="Layer importance", xlabel="layer", ylabel="score")


def write_drift(outdir: Path, trace: DriftTrace, svg: bool = True) -> list:
    trace.write_csv(outdir / "drift.csv")
    layers = list(range(trace.num_layers))
    series = {q: (layers, list(getattr(trace, q))) for q in QUANTITIES}
    return [outdir / "drift.csv"] + write_chart(
        outdir / "drift", series, svg=svg, title="Full vs pruned cosine similarity", xlabel="layer",
        ylabel="cosine similarity")


def write_sweep(outdir: Path, rows: Sequence[SweepRow], svg: bool = True) -> list:
    write_csv(outdir / "ratio_sweep.csv",
              ["ratio", "skipped", "resp_loss", "first_token_agree", "theoretical_speedup"],
              [(r.ratio, r.skipped, r.resp_loss, r.first_token_agree, r.theoretical_speedup) for r in rows])
    xs = [r.ratio for r in rows]
    series = {"resp_loss": (xs, [r.resp_loss for r in rows])}
    return [outdir / "ratio_sweep.csv"] + write_chart(
        outdir / "ratio_sweep", series, svg=svg, title="Response loss vs pruning ratio", xlabel="ratio",
        ylabel="mean response loss")


def reproduce_figures(checkpoint, outdir, calib: Optional[Sequence] = None, samples: int = 200, seed: int = 0,
                      eval_prompts: int = 100, drift_prompts: int = 20, ratio: float = 1 / 3,
                      max_len: int = 64, temperature: float = 1.0, svg: bool = True) -> list:
    """Write every CSV/SVG/PNG into ``outdir``; returns the written paths."""
    ckpt = Path(checkpoint)
    if not ckpt.exists():
        raise DataError(f"checkpoint not found: {ckpt}")
    weights, config = load_checkpoint(ckpt)
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    if calib is None:
        calib = heldout_calibration(samples, seed=seed)
    calib = list(calib)[:samples]
    profile = estimate_importance(weights, calib, stage_aware=True, max_len=max_len,
                                  temperature=temperature, seed=seed)
    written = write_importance(out, profile, svg)

    evals = heldout_calibration(eval_prompts, seed=seed + 1)
    plan = variant_plan("pop", config.num_layers, ratio)
    trace = drift_diagnostics(weights, plan, [s.prompt for s in evals[:drift_prompts]])
    written += write_drift(out, trace, svg)
    written += write_sweep(out, ratio_sweep(weights, evals), svg)
    meta = {"checkpoint": str(ckpt), "samples": len(calib), "seed": seed, "eval_prompts": eval_prompts,
            "drift_prompts": drift_prompts, "ratio": ratio, "skip_set": list(plan.skip_set)}
    (out / "figures.json").write_text(json.dumps(meta, indent=2))
    return written + [out / "figures.json"]
