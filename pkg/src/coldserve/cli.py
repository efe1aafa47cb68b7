"""Command-line surface: generation, kernel validation, benchmarks, toy models.

Every command is deterministic given its flags and seed (wall-clock metrics
excepted) and exits 0 only when no error occurred and every enabled assertion
passed. Machine-readable output is always JSON.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from coldserve._backends import BACKEND, warmup
from coldserve import lora_engine
from coldserve.cold_decoding import ContrastiveParams, SamplingParams, generate
from coldserve.errors import ColdServeError, ParameterError
from coldserve.lora_engine import (
    AdapterRegistry,
    bgmv_extra_bytes,
    bgmv_shrink,
    gather_bmm_bytes,
    gather_bmm_oracle,
    lora_delta,
)
from coldserve.model_runtime import (
    ModelConfig,
    TransformerRuntime,
    load_adapter,
    load_model,
    make_toy_adapter,
    make_toy_model,
    save_adapter,
    save_model,
)
from coldserve.scenarios import disambiguation_scenarios, scenario_runtime
from coldserve.serving import Engine, Request
from coldserve.tensor_core import Prng

STRATEGY_CHOICES = ("greedy", "cold", "nucleus", "beam")


def _add_sampling_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--strategy", choices=STRATEGY_CHOICES, default="greedy")
    p.add_argument("--alpha", type=float, default=0.1, help="expert mask threshold ratio")
    p.add_argument("--beta", type=float, default=0.5, help="amateur penalty strength")
    p.add_argument("--p", type=float, default=0.7, help="nucleus truncation mass")
    p.add_argument("--k", type=int, default=2, help="beam width")
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--max-tokens", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)


def _sampling_from_args(args) -> SamplingParams:
    contrastive = None
    if args.strategy == "cold":
        contrastive = ContrastiveParams(alpha=args.alpha, beta=args.beta)
    params = SamplingParams(
        strategy=args.strategy,
        temperature=args.temperature,
        max_tokens=args.max_tokens,
        seed=args.seed,
        contrastive=contrastive,
        nucleus_p=args.p,
        beam_width=args.k,
    )
    params.validate()
    return params


def _load_runtime(model_path, adapter_paths) -> TransformerRuntime:
    config, weights = load_model(model_path)
    registry = None
    if adapter_paths:
        adapters = [load_adapter(p) for p in adapter_paths]
        registry = AdapterRegistry(adapters)
    return TransformerRuntime(config, weights, registry)


def _parse_prompt(text: str) -> list[int]:
    try:
        tokens = [int(t) for t in text.replace(",", " ").split()]
    except ValueError as exc:
        raise ParameterError(f"prompt must be token ids, got {text!r}") from exc
    if not tokens:
        raise ParameterError("prompt must contain at least one token id")
    return tokens


# ---------------------------------------------------------------------------
# generate


def cmd_generate(args) -> int:
    params = _sampling_from_args(args)
    prompt = _parse_prompt(args.prompt)
    runtime = _load_runtime(args.model, args.adapter)
    if params.strategy == "cold":
        if runtime.registry is None or not len(runtime.registry):
            raise ParameterError("cold strategy needs at least one --adapter")
        expert = runtime.session(0)
        amateur = runtime.session(None)
    else:
        adapter_id = 0 if runtime.registry is not None and len(runtime.registry) else None
        expert = runtime.session(adapter_id)
        amateur = None
    tokens, diagnostics = generate(expert, amateur, prompt, params)

    print("tokens:", " ".join(str(t) for t in tokens))
    if args.verbose:
        for i, d in enumerate(diagnostics):
            extra = ""
            if d.amateur_score is not None:
                extra = f" amateur={d.amateur_score:.6f} contrast={d.contrast_score:.6f}"
            print(
                f"step {i}: token={d.token} valid={d.valid_count} "
                f"expert={d.expert_score:.6f}{extra}"
            )
    if args.out:
        transcript = {
            "backend": BACKEND,
            "model": str(args.model),
            "adapters": [str(a) for a in args.adapter],
            "prompt": prompt,
            "strategy": params.strategy,
            "params": {
                "alpha": args.alpha,
                "beta": args.beta,
                "p": args.p,
                "k": args.k,
                "temperature": args.temperature,
                "max_tokens": args.max_tokens,
                "seed": args.seed,
            },
            "tokens": tokens,
            "steps": [
                {
                    "token": d.token,
                    "valid_count": d.valid_count,
                    "expert_score": d.expert_score,
                    "amateur_score": d.amateur_score,
                    "contrast_score": d.contrast_score,
                }
                for d in diagnostics
            ],
        }
        Path(args.out).write_text(json.dumps(transcript, indent=2, sort_keys=True) + "\n")
    return 0


# ---------------------------------------------------------------------------
# validate-kernels


def _random_registry(
    prng: Prng, rank: int, d: int, layer: str = "proj"
) -> AdapterRegistry:
    """Three adapters, heterogeneous ranks up to `rank`, scaled for f32 headroom."""
    ranks = [rank, max(1, rank // 2), rank]
    adapters = []
    for aid, r in enumerate(ranks):
        a = prng.uniform_array(d * r, 1.0 / np.sqrt(d)).reshape(d, r)
        b = prng.uniform_array(r * d, 1.0 / np.sqrt(r)).reshape(r, d)
        adapters.append(
            lora_engine.LoraAdapter(
                adapter_id=aid, rank=r, lora_alpha=float(r), layers={layer: (a, b)}
            )
        )
    return AdapterRegistry(adapters)


def cmd_validate_kernels(args) -> int:
    tolerance = 1e-5
    prng = Prng(args.seed)
    warmup()
    rows = []
    worst = 0.0
    failed = False
    for batch in (1, 4, 16, 32):
        for rank in (8, 16, 64):
            for d in (64, 256):
                registry = _random_registry(prng, rank, d)
                if args.poison:
                    registry.inject_fault("proj")
                x = prng.uniform_array(batch * d, 1.0).reshape(batch, d)
                idx = np.array(
                    [prng.next_int(len(registry) + 1) - 1 for _ in range(batch)],
                    dtype=np.int64,
                )
                fast = lora_delta(x, registry, "proj", idx)
                oracle = gather_bmm_oracle(x, registry, "proj", idx)
                diff = float(np.max(np.abs(fast - oracle.delta))) if fast.size else 0.0
                worst = max(worst, diff)
                lora_rows = int(np.count_nonzero(idx >= 0))
                v = bgmv_shrink(x, registry, "proj", idx)
                gather_pred = gather_bmm_bytes(lora_rows, d, d, registry.r_max)
                bgmv_pred = bgmv_extra_bytes(batch, registry.r_max)
                row = {
                    "batch": batch,
                    "rank": rank,
                    "d": d,
                    "lora_rows": lora_rows,
                    "max_abs_diff": diff,
                    "gather_bytes": oracle.intermediate_bytes,
                    "gather_bytes_analytic": gather_pred,
                    "bgmv_extra_bytes": int(v.nbytes),
                    "bgmv_extra_bytes_analytic": bgmv_pred,
                    "ok": diff <= tolerance
                    and oracle.intermediate_bytes == gather_pred
                    and int(v.nbytes) == bgmv_pred,
                }
                rows.append(row)
                failed = failed or not row["ok"]

    header = (
        f"{'batch':>5} {'rank':>4} {'d':>4} {'max_abs_diff':>13} "
        f"{'gather_bytes':>13} {'bgmv_bytes':>11} {'ok':>3}"
    )
    print(header)
    for r in rows:
        print(
            f"{r['batch']:>5} {r['rank']:>4} {r['d']:>4} {r['max_abs_diff']:>13.3e} "
            f"{r['gather_bytes']:>13} {r['bgmv_extra_bytes']:>11} "
            f"{'yes' if r['ok'] else 'NO':>3}"
        )
    print(f"max observed divergence: {worst:.3e} (tolerance {tolerance:.1e})")
    report = {
        "backend": BACKEND,
        "tolerance": tolerance,
        "max_abs_diff": worst,
        "poison": bool(args.poison),
        "configs": rows,
        "passed": not failed,
    }
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    if failed:
        print("validation FAILED", file=sys.stderr)
        return 1
    print("validation passed")
    return 0


# ---------------------------------------------------------------------------
# bench


def _bench_transformer(args) -> tuple[dict, int]:
    if args.model:
        runtime = _load_runtime(args.model, args.adapter)
        if runtime.registry is None:
            raise ParameterError("bench needs at least one adapter (pass --adapter)")
        config = runtime.config
    else:
        config = ModelConfig(
            vocab_size=64, d_model=32, n_layers=2, n_heads=4, d_ff=64,
            max_seq_len=max(128, args.prompt_len + args.max_tokens),
        )
        weights = make_toy_model(config, args.seed)
        registry = AdapterRegistry([make_toy_adapter(config, 0, rank=8, seed=args.seed + 1)])
        runtime = TransformerRuntime(config, weights, registry)
    if args.prompt_len + args.max_tokens > config.max_seq_len:
        raise ParameterError(
            f"prompt_len {args.prompt_len} + max_tokens {args.max_tokens} exceeds "
            f"max_seq_len {config.max_seq_len}"
        )
    prompt_rng = Prng(args.seed + 2)
    prompts = [
        [prompt_rng.next_int(config.vocab_size) for _ in range(args.prompt_len)]
        for _ in range(args.requests)
    ]
    table = {}
    for strategy in STRATEGY_CHOICES:
        engine = Engine(runtime, capacity=args.batch_capacity)
        contrastive = (
            ContrastiveParams(alpha=args.alpha, beta=args.beta)
            if strategy == "cold"
            else None
        )
        for i, prompt in enumerate(prompts):
            engine.submit(
                Request(
                    prompt=prompt,
                    sampling=SamplingParams(
                        strategy=strategy,
                        max_tokens=args.max_tokens,
                        seed=args.seed + i,
                        contrastive=contrastive,
                        nucleus_p=args.p,
                        beam_width=args.k,
                    ),
                    adapter_id=0,
                )
            )
        t0 = time.monotonic()
        metrics = engine.drain()
        wall = time.monotonic() - t0
        table[strategy] = {
            "tokens_per_s": round(metrics.tokens_per_s, 6),
            "mean_latency_s": round(metrics.mean_latency_s, 6),
            "stddev_latency_s": round(metrics.stddev_latency_s, 6),
            "total_output_tokens": metrics.total_output_tokens,
            "n_requests": metrics.n_requests,
            "wall_s": round(wall, 6),
        }
    return table, runtime.resident_weight_bytes()


def _bench_scenarios(args) -> dict:
    scenarios = disambiguation_scenarios()
    table = {}
    for strategy in STRATEGY_CHOICES:
        total_tokens = 0
        outputs = []
        for scenario in scenarios:
            engine = Engine(scenario_runtime(scenario), capacity=args.batch_capacity)
            contrastive = (
                ContrastiveParams(alpha=args.alpha, beta=args.beta)
                if strategy == "cold"
                else None
            )
            engine.submit(
                Request(
                    prompt=scenario.prompt,
                    sampling=SamplingParams(
                        strategy=strategy,
                        max_tokens=scenario.max_tokens,
                        stop_token_ids=frozenset({scenario.stop_token}),
                        seed=args.seed,
                        contrastive=contrastive,
                        nucleus_p=args.p,
                        beam_width=args.k,
                    ),
                    adapter_id=0,
                )
            )
            metrics = engine.drain()
            completion = metrics.per_request[0]
            total_tokens += completion.output_token_count
            outputs.append(
                {"scenario": scenario.name, "tokens": completion.tokens}
            )
        table[strategy] = {"total_output_tokens": total_tokens, "outputs": outputs}
    return table


def cmd_bench(args) -> int:
    warmup()
    strategy_table, resident_bytes = _bench_transformer(args)
    report = {
        "backend": BACKEND,
        "resident_weight_bytes": resident_bytes,
        "toy_transformer": strategy_table,
        "disambiguation_suite": _bench_scenarios(args),
    }
    print(f"backend: {BACKEND}")
    print(f"resident weight bytes (base + packed adapters): {resident_bytes}")
    print(f"{'strategy':>8} {'tokens/s':>12} {'latency mean±std (s)':>24} {'tokens':>7}")
    for strategy, row in report["toy_transformer"].items():
        lat = f"{json.dumps(row['mean_latency_s'])}±{json.dumps(row['stddev_latency_s'])}"
        print(
            f"{strategy:>8} {json.dumps(row['tokens_per_s']):>12} {lat:>24} "
            f"{row['total_output_tokens']:>7}"
        )
    print("disambiguation suite (output tokens):")
    for strategy, row in report["disambiguation_suite"].items():
        print(f"{strategy:>8} {row['total_output_tokens']:>7}")
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return 0


# ---------------------------------------------------------------------------
# make-toy


def cmd_make_toy(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    targets = tuple(t.strip() for t in args.lora_targets.split(",") if t.strip())
    config = ModelConfig(
        vocab_size=args.vocab_size,
        d_model=args.d_model,
        n_layers=args.n_layers,
        n_heads=args.n_heads,
        d_ff=args.d_ff,
        max_seq_len=args.max_seq_len,
        lora_target_layers=targets,
    )
    config.validate()
    weights = make_toy_model(config, args.seed)
    model_path = out_dir / "model.json"
    model_crc = save_model(config, weights, model_path)
    summary = {"model": {"path": str(model_path), "crc32": model_crc}, "adapters": []}
    for i in range(args.num_adapters):
        adapter = make_toy_adapter(
            config, i, rank=args.rank, seed=args.seed + 1 + i, lora_alpha=args.lora_alpha
        )
        adapter_path = out_dir / f"adapter_{i}.json"
        crc = save_adapter(adapter, adapter_path)
        summary["adapters"].append(
            {"path": str(adapter_path), "crc32": crc, "rank": args.rank}
        )
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="coldserve",
        description="Desk-scale multi-LoRA serving with contrastive decoding.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="run one generation on a model bundle")
    g.add_argument("prompt", help="comma- or space-separated token ids")
    g.add_argument("--model", required=True)
    g.add_argument("--adapter", action="append", default=[])
    _add_sampling_flags(g)
    g.add_argument("--out", default=None, help="write a JSON transcript here")
    g.add_argument("--verbose", action="store_true")
    g.set_defaults(func=cmd_generate)

    v = sub.add_parser(
        "validate-kernels",
        help="sweep batched kernels against the gather oracle",
    )
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--poison", action="store_true", help="inject a fault; must fail")
    v.add_argument("--out", default=None)
    v.set_defaults(func=cmd_validate_kernels)

    b = sub.add_parser("bench", help="serving throughput/latency report")
    b.add_argument("--model", default=None)
    b.add_argument("--adapter", action="append", default=[])
    _add_sampling_flags(b)
    b.add_argument("--prompt-len", type=int, default=16)
    b.add_argument("--requests", type=int, default=4)
    b.add_argument("--batch-capacity", type=int, default=8)
    b.add_argument("--out", default=None)
    b.set_defaults(func=cmd_bench)

    m = sub.add_parser("make-toy", help="synthesize a model + adapter bundle")
    m.add_argument("--out", required=True)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--num-adapters", type=int, default=1)
    m.add_argument("--rank", type=int, default=8)
    m.add_argument("--lora-alpha", type=float, default=None)
    m.add_argument("--vocab-size", type=int, default=64)
    m.add_argument("--d-model", type=int, default=32)
    m.add_argument("--n-layers", type=int, default=2)
    m.add_argument("--n-heads", type=int, default=4)
    m.add_argument("--d-ff", type=int, default=64)
    m.add_argument("--max-seq-len", type=int, default=128)
    m.add_argument("--lora-targets", default="attn_q,attn_v")
    m.set_defaults(func=cmd_make_toy)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ColdServeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
