"""Command-line harness.

Exit codes: 0 success, 1 verification failure, 2 usage error, 3 I/O error.
Every file written gets a ``<file>.manifest.json`` sidecar recording the
command, the fully resolved configuration and the checkpoint hash.
"""
from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, analytics, checkpoint
from .engine import EngineConfig, PrefillCache, assert_equivalence, layer_scan
from .exit_policy import ActConfig
from .model import HEAD_MODES, ToyModel, ToyModelSpec, baseline_decode, build_model
from .sampling import Greedy, parse_strategy
from .training import OPTIMIZERS, TrainingRecipe, build_corpus, train_exit_heads

log = logging.getLogger("specbound")

CHECKPOINT_ENV = "SPECBOUND_CHECKPOINT"
MANIFEST_SUFFIX = ".manifest.json"
EXIT_OK, EXIT_MISMATCH, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3

# Engine settings accepted in a config file, mapped to their defaults.
ENGINE_DEFAULTS = {
    "threshold": 0.55,
    "anneal_alpha": 0.2,
    "d_max": 10,
    "w_max": 8,
    "strategy": "greedy",
    "seed": 0,
    "max_new_tokens": 64,
    "paper_faithful_bonus": False,
}


class UsageError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    config: dict
    checkpoint_sha256: str | None
    seed: int | None
    version: str = __version__
    outputs: list[str] = field(default_factory=list)
    argv: list[str] = field(default_factory=list)

    def write_sidecars(self) -> None:
        doc = json.dumps(asdict(self), sort_keys=True, indent=1) + "\n"
        for out in self.outputs:
            Path(out + MANIFEST_SUFFIX).write_text(doc, encoding="utf-8")


# -- shared helpers ----------------------------------------------------------


def load_checkpoint(path: str | None) -> tuple[ToyModel, str]:
    path = path or os.environ.get(CHECKPOINT_ENV)
    if not path:
        raise UsageError(f"no checkpoint given (use --checkpoint or set {CHECKPOINT_ENV})")
    try:
        model = checkpoint.load(path)
    except checkpoint.CheckpointError as exc:
        raise OSError(f"{path}: {exc}") from None
    return model, checkpoint.file_sha256(path)


def parse_tokens(text: str, vocab_size: int, where: str) -> list[int]:
    try:
        ids = [int(t) for t in text.split()]
    except ValueError:
        raise UsageError(f"{where}: prompt must be space-separated integer token ids") from None
    if not ids:
        raise UsageError(f"{where}: empty prompt")
    bad = [t for t in ids if not 0 <= t < vocab_size]
    if bad:
        raise UsageError(f"{where}: token id {bad[0]} outside vocabulary of size {vocab_size}")
    return ids


def read_prompt_file(path: str, vocab_size: int) -> list[list[int]]:
    prompts = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                prompts.append(parse_tokens(line, vocab_size, f"{path}:{lineno}"))
    if not prompts:
        raise UsageError(f"{path}: no prompts")
    return prompts


def random_prompts(n: int, seed: int, vocab_size: int, min_len: int = 8, max_len: int = 32) -> list[list[int]]:
    """Seeded prompts of uniform random length; ids skip 0 and the end-of-sequence id."""
    if n < 1 or not 1 <= min_len <= max_len:
        raise UsageError("random prompts need n >= 1 and 1 <= min_len <= max_len")
    rng = np.random.default_rng(seed)
    return [[int(t) for t in rng.integers(2, vocab_size, size=int(rng.integers(min_len, max_len + 1)))]
            for _ in range(n)]


def prompts_from_args(args, vocab_size: int) -> tuple[list[list[int]], dict]:
    if args.prompts:
        return read_prompt_file(args.prompts, vocab_size), {"prompts_file": args.prompts}
    n = args.random_prompts or 0
    if n < 1:
        raise UsageError("give --prompts FILE or --random-prompts N")
    source = {"random_prompts": n, "prompt_seed": args.prompt_seed,
              "min_len": args.min_len, "max_len": args.max_len}
    return random_prompts(n, args.prompt_seed, vocab_size, args.min_len, args.max_len), source


def resolved_engine_settings(args) -> dict:
    """Defaults, then the config file, then explicit flags."""
    settings = dict(ENGINE_DEFAULTS)
    if getattr(args, "config", None):
        try:
            with open(args.config, encoding="utf-8") as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise UsageError(f"{args.config}: not a JSON object: {exc}") from None
        if not isinstance(doc, dict):
            raise UsageError(f"{args.config}: expected a flat JSON object")
        unknown = set(doc) - set(ENGINE_DEFAULTS)
        if unknown:
            raise UsageError(f"{args.config}: unknown keys {sorted(unknown)}")
        settings.update(doc)
    for key in ENGINE_DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = value
    return settings


def engine_config(settings: dict, num_layers: int, clamp: bool = True) -> EngineConfig:
    d_max = int(settings["d_max"])
    if clamp and d_max > num_layers - 1:
        log.warning("d_max=%d exceeds L-1=%d for this model; clamped to %d", d_max, num_layers - 1,
                    num_layers - 1)
        d_max = num_layers - 1
        settings["d_max"] = d_max
    try:
        cfg = EngineConfig(
            act=ActConfig(anneal_alpha=float(settings["anneal_alpha"]),
                          threshold=float(settings["threshold"]), num_layers=num_layers),
            d_max=d_max,
            w_max=int(settings["w_max"]),
            strategy=parse_strategy(str(settings["strategy"])),
            paper_faithful_bonus=bool(settings["paper_faithful_bonus"]),
            max_new_tokens=int(settings["max_new_tokens"]),
            rng_seed=int(settings["seed"]),
        )
        cfg.validate(num_layers)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    return cfg


def apply_head_mode(model: ToyModel, args) -> ToyModel:
    mode = getattr(args, "head_mode", None)
    return model.with_head_mode(mode) if mode else model


def parse_list(text: str, kind=float) -> list:
    try:
        return [kind(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"cannot parse {text!r} as a comma-separated list") from None


def write_text(path: str, text: str) -> None:
    Path(path).write_text(text, encoding="utf-8")


def csv_text(header, rows) -> str:
    lines = [",".join(header)]
    lines += [",".join(str(v) for v in row) for row in rows]
    return "\n".join(lines) + "\n"


# -- commands --------------------------------------------------------------


def cmd_build_train(args) -> int:
    spec = ToyModelSpec(num_layers=args.layers, hidden_dim=args.dim, vocab_size=args.vocab,
                        max_context=args.max_context, seed=args.seed, head_gain=args.head_gain)
    try:
        spec.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    recipe = TrainingRecipe(num_sequences=args.sequences, seq_len=args.seq_len,
                            corpus_seed=args.corpus_seed, steps=args.steps, step_size=args.step_size,
                            optimizer=args.optimizer, batch_size=args.batch_size or None,
                            seed=args.train_seed)
    model = build_model(spec)
    try:
        corpus = build_corpus(model, recipe.num_sequences, recipe.seq_len, recipe.corpus_seed)
        result = train_exit_heads(model, corpus, recipe.steps, recipe.step_size, recipe.optimizer,
                                  recipe.batch_size, recipe.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    sha = checkpoint.save(result.model, args.out)
    loss_csv = args.loss_csv or args.out + ".loss.csv"
    curves = result.loss_curves
    header = ["step"] + [f"layer_{l}" for l in range(1, spec.num_layers)]
    rows = [[s] + [repr(float(v)) for v in curves[:, s]] for s in range(curves.shape[1])]
    write_text(loss_csv, csv_text(header, rows))
    RunManifest("build-train", {"spec": asdict(spec), "training": asdict(recipe)}, sha, spec.seed,
                outputs=[args.out, loss_csv], argv=args.argv).write_sidecars()
    print(f"checkpoint {args.out} sha256={sha}")
    print(f"final head losses: {' '.join(f'{v:.4f}' for v in curves[:, -1])}")
    return EXIT_OK


def cmd_decode(args) -> int:
    model, sha = load_checkpoint(args.checkpoint)
    model = apply_head_mode(model, args)
    settings = resolved_engine_settings(args)
    cfg = engine_config(settings, model.num_layers)
    prompts, source = prompts_from_args(args, model.vocab_size)
    prefills = PrefillCache(model)
    outputs = []
    trace_lines, token_lines = [], []
    for i, prompt in enumerate(prompts):
        session = prefills.session(prompt, cfg)
        session.emit_first()
        result = session.run()
        if result.truncated:
            log.warning("prompt %d: budget clipped to %d tokens by max_context", i, session.budget)
        token_lines.append(" ".join(str(t) for t in result.tokens))
        for r, trace in enumerate(result.traces):
            record = trace.to_dict()
            record["prompt_index"] = i
            record["round"] = r
            trace_lines.append(json.dumps(record, sort_keys=True))
    print("\n".join(token_lines))
    if args.trace_out:
        write_text(args.trace_out, "".join(line + "\n" for line in trace_lines))
        outputs.append(args.trace_out)
    if args.tokens_out:
        write_text(args.tokens_out, "".join(line + "\n" for line in token_lines))
        outputs.append(args.tokens_out)
    config = {"engine": cfg.to_dict(), "head_mode": model.head_mode, "prompt_source": source}
    RunManifest("decode", config, sha, cfg.rng_seed, outputs=outputs, argv=args.argv).write_sidecars()
    return EXIT_OK


def default_grid(num_layers: int) -> dict[str, list]:
    return {
        "anneal_alpha": [0.0, 0.2, 1.0],
        "threshold": [0.3, 0.55, 0.8, 0.99],
        "d_max": [1, 4, num_layers - 1],
        "w_max": [1, 4, 8],
    }


def cmd_verify(args) -> int:
    model, sha = load_checkpoint(args.checkpoint)
    model = apply_head_mode(model, args)
    L = model.num_layers
    grid = default_grid(L)
    if args.anneal_alphas:
        grid["anneal_alpha"] = parse_list(args.anneal_alphas)
    if args.thresholds:
        grid["threshold"] = parse_list(args.thresholds)
    if args.d_max_values:
        grid["d_max"] = parse_list(args.d_max_values, int)
    if args.w_max_values:
        grid["w_max"] = parse_list(args.w_max_values, int)
    prompts, source = prompts_from_args(args, model.vocab_size)
    n = args.max_new_tokens
    baselines = [baseline_decode(model, p, min(n, model.spec.max_context - len(p)), Greedy()).tokens
                 for p in prompts]
    prefills = PrefillCache(model)
    rows = []
    total = 0
    for alpha, tau, d_max, w_max in itertools.product(*grid.values()):
        settings = dict(ENGINE_DEFAULTS, anneal_alpha=alpha, threshold=tau, d_max=d_max, w_max=w_max,
                        max_new_tokens=n)
        cfg = engine_config(settings, L)
        report = assert_equivalence(model, prompts, cfg, baselines, prefills)
        total += report.mismatch_count
        rows.append([alpha, tau, cfg.d_max, w_max, report.mismatch_count,
                     repr(report.compression_rate), repr(report.accept_rate)])
        print(f"anneal_alpha={alpha} threshold={tau} d_max={cfg.d_max} w_max={w_max} "
              f"mismatches={report.mismatch_count} CR={report.compression_rate:.4f}")
    print(f"total mismatches: {total} over {len(rows)} configs x {len(prompts)} prompts")
    outputs = []
    if args.report_csv:
        header = ["anneal_alpha", "threshold", "d_max", "w_max", "mismatches", "cr", "accept_rate"]
        write_text(args.report_csv, csv_text(header, rows))
        outputs.append(args.report_csv)
    config = {"grid": grid, "max_new_tokens": n, "head_mode": model.head_mode, "prompt_source": source}
    RunManifest("verify", config, sha, None, outputs=outputs, argv=args.argv).write_sidecars()
    return EXIT_MISMATCH if total else EXIT_OK


def cmd_layer_scan(args) -> int:
    model, sha = load_checkpoint(args.checkpoint)
    model = apply_head_mode(model, args)
    context = parse_tokens(args.context, model.vocab_size, "--context")
    if len(context) + args.n > model.spec.max_context:
        raise UsageError("context plus n exceeds max_context")
    settings = resolved_engine_settings(args)
    try:
        act = ActConfig(float(settings["anneal_alpha"]), float(settings["threshold"]), model.num_layers)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    scan = layer_scan(model, context, args.n, act)
    text = csv_text(["layer", "position", "token_id", "confidence", "exited_before"],
                    ([layer, pos, tok, repr(conf), int(flag)] for layer, pos, tok, conf, flag in scan.rows()))
    write_text(args.out, text)
    config = {"context": context, "n": args.n, "threshold": act.threshold,
              "anneal_alpha": act.anneal_alpha, "head_mode": model.head_mode}
    RunManifest("layer-scan", config, sha, None, outputs=[args.out], argv=args.argv).write_sidecars()
    print(f"wrote {model.num_layers * args.n} rows to {args.out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    model, sha = load_checkpoint(args.checkpoint)
    model = apply_head_mode(model, args)
    kind = int if args.axis in ("d_max", "w_max") else float
    values = parse_list(args.values, kind)
    if not values:
        raise UsageError("--values is empty")
    if args.axis == "d_max" and max(values) > model.num_layers - 1:
        raise UsageError(f"d_max values must be <= L-1 = {model.num_layers - 1}")
    settings = resolved_engine_settings(args)
    cfg = engine_config(settings, model.num_layers)
    prompts, source = prompts_from_args(args, model.vocab_size)
    try:
        result = analytics.sweep(model, prompts, cfg, args.axis, values, t_ar=args.t_ar,
                                 ignore_alignment=args.ignore_alignment)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    write_text(args.out, result.to_csv())
    config = {"axis": args.axis, "values": sorted(values), "engine": cfg.to_dict(), "t_ar": args.t_ar,
              "ignore_alignment": args.ignore_alignment, "head_mode": model.head_mode, "prompt_source": source}
    RunManifest("sweep", config, sha, cfg.rng_seed, outputs=[args.out], argv=args.argv).write_sidecars()
    sys.stdout.write(result.to_csv())
    return EXIT_OK


def cmd_model_eval(args) -> int:
    try:
        p = analytics.SpeedupParams(L=args.L, d_max=args.d_max, w=args.w, accept_rate=args.a, t_ar=args.t_ar)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    limit = " (a = 1 limit)" if p.accept_rate == 1.0 else ""
    print(f"round_time: {analytics.round_time(p):.6f}")
    print(f"expected_accepted: {analytics.expected_accepted(p.accept_rate, p.w):.6f}{limit}")
    print(f"speedup: {analytics.speedup(p):.6f}{limit}")
    return EXIT_OK


def cmd_mc(args) -> int:
    if not 0 <= args.a <= 1 or args.w < 1 or args.trials < 1:
        raise UsageError("need 0 <= a <= 1, w >= 1 and trials >= 1")
    mean, se = analytics.monte_carlo_accepted(args.a, args.w, args.trials, args.seed)
    ref = analytics.expected_accepted(args.a, args.w)
    z = (mean - ref) / se if se > 0 else 0.0
    print(f"mean: {mean:.6f} +/- {se:.6f} (standard error, {args.trials} trials)")
    print(f"closed form: {ref:.6f}")
    print(f"deviation: {z:+.3f} standard errors")
    return EXIT_OK


def cmd_speedup_dist(args) -> int:
    model, sha = load_checkpoint(args.checkpoint)
    model = apply_head_mode(model, args)
    settings = resolved_engine_settings(args)
    cfg = engine_config(settings, model.num_layers)
    prompts, source = prompts_from_args(args, model.vocab_size)
    groups = analytics.decode_prompts(model, prompts, cfg)
    cm = analytics.CostModel.for_config(cfg, t_ar=args.t_ar, ignore_alignment=args.ignore_alignment)
    hist = analytics.speedup_distribution(groups, cm, args.buckets)
    print(hist.report())
    outputs = []
    if args.out:
        rows = [[repr(float(lo)), repr(float(hi)), int(c), repr(float(pct))]
                for lo, hi, c, pct in zip(hist.edges[:-1], hist.edges[1:], hist.counts, hist.percentages)]
        write_text(args.out, csv_text(["bucket_lo", "bucket_hi", "count", "percent"], rows))
        outputs.append(args.out)
    config = {"engine": cfg.to_dict(), "buckets": args.buckets, "t_ar": args.t_ar,
              "ignore_alignment": args.ignore_alignment, "head_mode": model.head_mode, "prompt_source": source}
    RunManifest("speedup-dist", config, sha, cfg.rng_seed, outputs=outputs,
                argv=args.argv).write_sidecars()
    return EXIT_OK


# -- parser ----------------------------------------------------------------


def _add_checkpoint(p):
    p.add_argument("--checkpoint", help=f"model checkpoint (default: ${CHECKPOINT_ENV})")
    p.add_argument("--head-mode", choices=HEAD_MODES, help="override the checkpoint's head mode")


def _add_prompts(p):
    p.add_argument("--prompts", help="file with one prompt per line as space-separated token ids")
    p.add_argument("--random-prompts", type=int, metavar="N", help="generate N seeded random prompts")
    p.add_argument("--prompt-seed", type=int, default=0)
    p.add_argument("--min-len", type=int, default=8)
    p.add_argument("--max-len", type=int, default=32)


def _add_engine(p, act_only=False):
    p.add_argument("--config", help="flat JSON engine config; explicit flags override it")
    p.add_argument("--threshold", type=float, help="exit confidence threshold (default 0.55)")
    p.add_argument("--anneal-alpha", type=float, help="annealing strength (default 0.2)")
    if act_only:
        return
    p.add_argument("--d-max", type=int, help="draft depth bound (default 10, clamped to L-1)")
    p.add_argument("--w-max", type=int, help="draft width bound (default 8)")
    p.add_argument("--strategy", help="greedy | temperature:T | top_p:P[:T]")
    p.add_argument("--seed", type=int, help="sampling seed")
    p.add_argument("--max-new-tokens", type=int)
    p.add_argument("--paper-faithful-bonus", action="store_const", const=True, default=None,
                   help="exclude the free verification token from speedup accounting")


def _add_cost(p):
    p.add_argument("--t-ar", type=float, default=1.0, help="seconds per full-depth token")
    p.add_argument("--ignore-alignment", action="store_true", help="charge nothing for alignment")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="specbound", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    spec, recipe = ToyModelSpec(), TrainingRecipe()
    p = sub.add_parser("build-train", help="build a model, train its exit heads, save a checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--loss-csv", help="loss curves (default: <out>.loss.csv)")
    p.add_argument("--layers", type=int, default=spec.num_layers)
    p.add_argument("--dim", type=int, default=spec.hidden_dim)
    p.add_argument("--vocab", type=int, default=spec.vocab_size)
    p.add_argument("--max-context", type=int, default=spec.max_context)
    p.add_argument("--seed", type=int, default=spec.seed)
    p.add_argument("--head-gain", type=float, default=spec.head_gain)
    p.add_argument("--sequences", type=int, default=recipe.num_sequences)
    p.add_argument("--seq-len", type=int, default=recipe.seq_len)
    p.add_argument("--corpus-seed", type=int, default=recipe.corpus_seed)
    p.add_argument("--steps", type=int, default=recipe.steps)
    p.add_argument("--step-size", type=float, default=recipe.step_size)
    p.add_argument("--optimizer", choices=OPTIMIZERS, default=recipe.optimizer)
    p.add_argument("--batch-size", type=int, default=recipe.batch_size, help="0 for full batch")
    p.add_argument("--train-seed", type=int, default=recipe.seed)
    p.set_defaults(func=cmd_build_train)

    p = sub.add_parser("decode", help="decode prompts and write per-round traces")
    _add_checkpoint(p)
    _add_prompts(p)
    _add_engine(p)
    p.add_argument("--trace-out", help="JSONL trace, one round per line")
    p.add_argument("--tokens-out", help="generated token ids, one prompt per line")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("verify", help="check greedy output against full-depth decoding over a config grid")
    _add_checkpoint(p)
    _add_prompts(p)
    p.add_argument("--anneal-alphas")
    p.add_argument("--thresholds")
    p.add_argument("--d-max-values")
    p.add_argument("--w-max-values")
    p.add_argument("--max-new-tokens", type=int, default=16)
    p.add_argument("--report-csv")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("layer-scan", help="per-layer token and confidence grid for a context")
    _add_checkpoint(p)
    _add_engine(p, act_only=True)
    p.add_argument("--context", required=True, help="space-separated token ids")
    p.add_argument("--n", type=int, default=8, help="generated positions to scan")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_layer_scan)

    p = sub.add_parser("sweep", help="sweep one engine setting and report speedup and CR")
    _add_checkpoint(p)
    _add_prompts(p)
    _add_engine(p)
    _add_cost(p)
    p.add_argument("--axis", required=True, choices=analytics.SWEEP_AXES)
    p.add_argument("--values", required=True, help="comma-separated axis values")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("model-eval", help="evaluate the closed-form round time and speedup")
    p.add_argument("L", type=int)
    p.add_argument("d_max", type=int)
    p.add_argument("w", type=float)
    p.add_argument("a", type=float, help="per-token acceptance rate")
    p.add_argument("t_ar", type=float, nargs="?", default=1.0)
    p.set_defaults(func=cmd_model_eval)

    p = sub.add_parser("mc", help="Monte-Carlo check of the expected accepted-token count")
    p.add_argument("a", type=float)
    p.add_argument("w", type=int)
    p.add_argument("trials", type=int)
    p.add_argument("seed", type=int, nargs="?", default=0)
    p.set_defaults(func=cmd_mc)

    p = sub.add_parser("speedup-dist", help="histogram of per-prompt simulated speedups")
    _add_checkpoint(p)
    _add_prompts(p)
    _add_engine(p)
    _add_cost(p)
    p.add_argument("--buckets", type=int, default=10)
    p.add_argument("--out", help="bucket CSV")
    p.set_defaults(func=cmd_speedup_dist)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(format="%(levelname)s: %(message)s", level=logging.INFO)
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = parser.parse_args(argv)
    args.argv = argv
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
