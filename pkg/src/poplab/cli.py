"""``poplab`` command line.

Exit codes: 0 success, 1 usage or configuration error, 2 data/format error.
Tables go to stdout as CSV, everything else as JSON.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .errors import ConfigError, PopError

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2

log = logging.getLogger("poplab")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_help(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2))


def _load_weights(args):
    from .checkpoint import load_checkpoint
    from .model import ModelConfig, init_model

    if args.checkpoint:
        if not Path(args.checkpoint).exists():
            raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
        return load_checkpoint(args.checkpoint)[0]
    if getattr(args, "config", None):
        return init_model(ModelConfig.load(args.config), args.seed)
    raise ConfigError("need --checkpoint (or --config for a seeded random model)")


def _plan(args, num_layers: int):
    from .importance import ImportanceProfile
    from .pop import make_plan

    profile = ImportanceProfile.load(args.profile) if getattr(args, "profile", None) else None
    return make_plan(num_layers, args.ratio, args.strategy, profile,
                     indep_kv=not args.no_indep_kv, boundary_handling=not args.no_boundary)


def _text_out(tokens) -> str:
    from .tokenizer import decode

    return decode(tokens).decode("utf-8", errors="replace")


# ---------------------------------------------------------------- commands


def cmd_init(args) -> int:
    from .checkpoint import model_hash, save_checkpoint
    from .model import ModelConfig, init_model

    cfg = ModelConfig.load(args.config)
    w = init_model(cfg, args.seed)
    out = Path(args.out or "model.ckpt")
    save_checkpoint(w, cfg, out)
    _emit({"checkpoint": str(out), "model_hash": model_hash(w), "config": cfg.to_dict()})
    return EXIT_OK


def cmd_train(args) -> int:
    from .model import ModelConfig
    from .train import TrainConfig, heldout_loss, load_corpus, split_corpus, train

    cfg = ModelConfig.load(args.config)
    tcfg = TrainConfig(steps=args.steps, batch=args.batch, seq_len=args.seq_len, lr=args.lr,
                       warmup=args.warmup, seed=args.seed, corpus=args.corpus)
    out = Path(args.out or "run")
    res = train(cfg, tcfg, out)
    _, held = split_corpus(load_corpus(args.corpus))
    _emit({"out": str(out), "steps": tcfg.steps, "initial_loss": res.losses[0], "final_loss": res.losses[-1],
           "heldout_loss": heldout_loss(res.weights, held, tcfg.seq_len), "elapsed_s": res.elapsed})
    return EXIT_OK


def cmd_generate(args) -> int:
    from .model import generate
    from .tokenizer import encode

    w = _load_weights(args)
    toks = generate(w, encode(args.prompt), args.max_new, args.temperature, args.seed)
    _emit({"tokens": toks, "text": _text_out(toks)})
    return EXIT_OK


def cmd_pop_generate(args) -> int:
    from .pop import pop_generate
    from .tokenizer import encode

    w = _load_weights(args)
    plan = _plan(args, w.config.num_layers)
    res = pop_generate(w, plan, encode(args.prompt), args.max_new, args.temperature, args.seed)
    _emit({"tokens": res.tokens, "text": _text_out(res.tokens), "plan": plan.to_dict(),
           "trace": res.trace.counts(), "cache_lengths_after_prefill": res.trace.cache_lengths})
    return EXIT_OK


def cmd_importance(args) -> int:
    from .importance import estimate_importance, heldout_calibration, load_calibration_jsonl

    w = _load_weights(args)
    calib = load_calibration_jsonl(args.calib) if args.calib else heldout_calibration(args.samples, seed=args.seed)
    prof = estimate_importance(w, calib[: args.samples], stage_aware=args.stage_aware, max_len=args.max_len,
                               temperature=args.temperature, seed=args.seed, keep_grads=args.keep_grads,
                               use_provided=args.fixed_targets)
    if args.out:
        prof.save(args.out)
    d = prof.to_dict()
    d["first_order_within_3se"] = prof.first_order_fraction()
    d.pop("per_sample_grads", None)
    _emit(d)
    return EXIT_OK


def cmd_plan(args) -> int:
    from .model import ModelConfig

    if args.layers:
        L = args.layers
    elif args.config:
        L = ModelConfig.load(args.config).num_layers
    elif args.checkpoint:
        L = _load_weights(args).config.num_layers
    else:
        raise ConfigError("need --layers, --config or --checkpoint")
    plan = _plan(args, L)
    if args.out:
        Path(args.out).write_text(plan.to_json())
    d = plan.to_dict()
    d["layers_1based"] = [l + 1 for l in plan.skip_set]
    _emit(d)
    return EXIT_OK


def cmd_flops(args) -> int:
    from .analysis.flops import count_flops
    from .model import ModelConfig

    cfg = ModelConfig.load(args.config)
    rep = count_flops(cfg, _plan(args, cfg.num_layers), args.seq_len)
    if args.out:
        Path(args.out).write_text(json.dumps(rep.to_dict(), indent=2))
    _emit(rep.to_dict())
    return EXIT_OK


def cmd_bench(args) -> int:
    from .analysis.bench import bench_ttft

    w = _load_weights(args)
    stats = bench_ttft(w, _plan(args, w.config.num_layers), args.seq_len, args.batch, args.reps, args.seed,
                       args.warmup)
    d = stats.to_dict()
    if args.out:
        Path(args.out).write_text(json.dumps(d, indent=2))
    _emit(d)
    return EXIT_OK


def cmd_diagnose(args) -> int:
    from .analysis.drift import drift_diagnostics
    from .analysis.figures import write_drift
    from .importance import heldout_calibration

    w = _load_weights(args)
    plan = _plan(args, w.config.num_layers)
    prompts = [s.prompt for s in heldout_calibration(args.samples, seed=args.seed)]
    trace = drift_diagnostics(w, plan, prompts)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_drift(out, trace, svg=args.svg)
    sys.stdout.write("layer,skipped,hidden,key,value,attn_out\n")
    for r in trace.rows():
        sys.stdout.write(f"{r['layer']},{r['skipped']},{r['hidden']!r},{r['key']!r},{r['value']!r},{r['attn_out']!r}\n")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .importance import heldout_calibration
    from .pop import VARIANTS, full_first_tokens, run_variant, write_variant_csv

    w = _load_weights(args)
    evals = heldout_calibration(args.samples, seed=args.seed)
    ref = full_first_tokens(w, evals)
    rows = [run_variant(w, v, evals, args.ratio, ref) for v in VARIANTS]
    if args.out:
        write_variant_csv(args.out, rows)
    sys.stdout.write("variant,ratio,resp_loss,first_token_agree\n")
    for r in rows:
        sys.stdout.write(f"{r.variant},{r.ratio!r},{r.resp_loss!r},{r.first_token_agree!r}\n")
    return EXIT_OK


def cmd_figures(args) -> int:
    from .analysis.figures import reproduce_figures
    from .importance import load_calibration_jsonl

    if not args.checkpoint:
        raise ConfigError("figures needs --checkpoint")
    calib = load_calibration_jsonl(args.calib) if args.calib else None
    paths = reproduce_figures(args.checkpoint, args.out or "figures", calib=calib, samples=args.samples,
                              seed=args.seed, eval_prompts=args.eval_prompts, ratio=args.ratio,
                              max_len=args.max_len, svg=args.svg)
    _emit({"written": [str(p) for p in paths]})
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _ratio(s: str) -> float:
    try:
        if "/" in s:
            a, b = s.split("/")
            return float(a) / float(b)
        return float(s)
    except (ValueError, ZeroDivisionError) as exc:
        raise argparse.ArgumentTypeError(f"invalid ratio {s!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="poplab", description="Prefill-only layer pruning toolkit for small decoder models.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.set_defaults(func=fn)
        sp.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
        return sp

    def model_args(sp, config=True):
        sp.add_argument("--checkpoint", help="checkpoint file")
        if config:
            sp.add_argument("--config", help="model config (bundled name or JSON path) for a seeded random model")

    def plan_args(sp, ratio=1 / 3):
        sp.add_argument("--ratio", type=_ratio, default=ratio, help=f"pruning ratio in [0, 1) (default {ratio:.4g})")
        sp.add_argument("--strategy", default="deep", choices=["deep", "shallow", "interleaved", "from_profile"],
                        help="layer selection strategy (default deep)")
        sp.add_argument("--profile", help="importance profile JSON for --strategy from_profile")
        sp.add_argument("--no-indep-kv", action="store_true", help="pruned layers write no KV during prefill")
        sp.add_argument("--no-boundary", action="store_true", help="run the last prompt token under the pruned stack")

    sp = add("init", cmd_init, "write a seeded random checkpoint")
    sp.add_argument("--config", required=True, help="model config (bundled name or JSON path)")
    sp.add_argument("--out", help="checkpoint path (default model.ckpt)")

    sp = add("train", cmd_train, "pretrain on the byte corpus; writes model.ckpt, loss.csv, train.json")
    sp.add_argument("--config", default="toy8", help="model config (default toy8)")
    sp.add_argument("--steps", type=int, default=2000, help="optimizer steps (default 2000)")
    sp.add_argument("--batch", type=int, default=4, help="sequences per step (default 4)")
    sp.add_argument("--seq-len", type=int, default=128, help="tokens per sequence (default 128)")
    sp.add_argument("--lr", type=float, default=3e-3, help="peak learning rate (default 3e-3)")
    sp.add_argument("--warmup", type=int, default=100, help="linear warmup steps (default 100)")
    sp.add_argument("--corpus", help="raw byte corpus (default: bundled text)")
    sp.add_argument("--out", help="output directory (default run)")

    for name, fn, help_ in (("generate", cmd_generate, "generate with the full model"),
                            ("pop-generate", cmd_pop_generate, "generate with pruned prefill")):
        sp = add(name, fn, help_)
        model_args(sp)
        sp.add_argument("--prompt", default="", help="prompt text (BOS is prepended)")
        sp.add_argument("--max-new", type=int, default=64, help="tokens to generate (default 64)")
        sp.add_argument("--temperature", type=float, default=0.0, help="sampling temperature, 0 = greedy")
        if name == "pop-generate":
            plan_args(sp)

    sp = add("importance", cmd_importance, "estimate per-layer importance from gate gradients")
    model_args(sp)
    sp.add_argument("--samples", type=int, default=200, help="calibration samples (default 200)")
    sp.add_argument("--calib", help="calibration JSONL (default: held-out corpus slices)")
    sp.add_argument("--stage-aware", action="store_true", help="separate prefill and decode gates")
    sp.add_argument("--max-len", type=int, default=64, help="sampled response length cap (default 64)")
    sp.add_argument("--temperature", type=float, default=1.0, help="target sampling temperature (default 1)")
    sp.add_argument("--keep-grads", action="store_true", help="store per-sample gradients in the profile")
    sp.add_argument("--fixed-targets", action="store_true",
                    help="use the provided responses instead of self-sampled targets (diagnostic)")
    sp.add_argument("--out", help="profile JSON path")

    sp = add("plan", cmd_plan, "build a pruning plan")
    sp.add_argument("--layers", type=int, help="number of layers")
    model_args(sp)
    plan_args(sp)
    sp.add_argument("--out", help="plan JSON path")

    sp = add("flops", cmd_flops, "analytic prefill FLOPs, full vs pruned")
    sp.add_argument("--config", default="llama3-8b", help="model config (default llama3-8b)")
    plan_args(sp)
    sp.add_argument("--seq-len", type=int, default=2048, help="prompt length (default 2048)")
    sp.add_argument("--out", help="report JSON path")

    sp = add("bench", cmd_bench, "time-to-first-token benchmark (POP_THREADS sets BLAS threads)")
    model_args(sp)
    plan_args(sp)
    sp.add_argument("--seq-len", type=int, default=2048, help="prompt length (default 2048)")
    sp.add_argument("--batch", type=int, default=4, help="prompts per timed batch (default 4)")
    sp.add_argument("--reps", type=int, default=5, help="timed repetitions, >= 5 (default 5)")
    sp.add_argument("--warmup", type=int, default=2, help="warmup repetitions, >= 2 (default 2)")
    sp.add_argument("--out", help="stats JSON path")

    sp = add("diagnose", cmd_diagnose, "cosine-similarity drift between full and pruned runs")
    model_args(sp)
    plan_args(sp)
    sp.add_argument("--samples", type=int, default=20, help="held-out prompts (default 20)")
    sp.add_argument("--out", help="directory for drift.csv and charts")
    sp.add_argument("--svg", action="store_true", help="also write SVG charts")

    sp = add("ablate", cmd_ablate, "response loss and first-token agreement per ablation variant")
    model_args(sp)
    sp.add_argument("--ratio", type=_ratio, default=1 / 3, help="pruning ratio (default 1/3)")
    sp.add_argument("--samples", type=int, default=100, help="held-out prompts (default 100)")
    sp.add_argument("--out", help="variant CSV path")

    sp = add("figures", cmd_figures, "importance curves, drift traces and ratio sweep")
    sp.add_argument("--checkpoint", help="trained checkpoint")
    sp.add_argument("--calib", help="calibration JSONL (default: held-out corpus slices)")
    sp.add_argument("--samples", type=int, default=200, help="calibration samples (default 200)")
    sp.add_argument("--eval-prompts", type=int, default=100, help="held-out prompts for the sweep (default 100)")
    sp.add_argument("--ratio", type=_ratio, default=1 / 3, help="ratio for the drift trace (default 1/3)")
    sp.add_argument("--max-len", type=int, default=64, help="sampled response length cap (default 64)")
    sp.add_argument("--out", help="output directory (default figures)")
    sp.add_argument("--svg", action="store_true", help="also write SVG charts")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parser.parse_args(argv)
        if not args.command:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"poplab: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (PopError, ValueError, OSError) as exc:
        print(f"poplab: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
