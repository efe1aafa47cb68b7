"""Two logits providers plus weight-file IO.

A small pre-norm decoder-only transformer (learned absolute positions,
scaled-dot-product attention, GELU MLP) carrying LoRA attachment points on
its projections, and a tabular stub that looks next-token logits up from a
hand-built context table. Both expose the same two-stage surface the serving
engine drives: prefill a batch of prompts, then decode one token per step
against per-row caches.

All projection math goes through the fixed-accumulation-order kernels, so a
row's logits are bit-identical whether it runs alone or inside any batch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Protocol, Sequence

import numpy as np

from coldserve import lora_engine, manifest_io
from coldserve.errors import (
    DimensionError,
    FormatError,
    LengthError,
    ParameterError,
)
from coldserve.lora_engine import AdapterRegistry, LoraAdapter, normalize_indices
from coldserve.tensor_core import Prng, matmul

LORA_LAYER_NAMES = ("attn_q", "attn_k", "attn_v", "attn_o", "mlp_up", "mlp_down")

__all__ = [
    "LORA_LAYER_NAMES",
    "ModelConfig",
    "LayerWeights",
    "TransformerWeights",
    "KvCache",
    "TransformerRuntime",
    "TransformerSession",
    "TabularLm",
    "TabularRuntime",
    "tabular_logits",
    "LogitsProvider",
    "make_toy_model",
    "make_toy_adapter",
    "save_model",
    "load_model",
    "load_adapter",
    "save_adapter",
]

# Re-exported so model and adapter IO live behind one import.
load_adapter = lora_engine.load_adapter
save_adapter = lora_engine.save_adapter


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int
    n_layers: int
    n_heads: int
    d_ff: int
    max_seq_len: int
    lora_target_layers: tuple[str, ...] = ("attn_q", "attn_v")

    def validate(self) -> None:
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be >= 1")
        if self.max_seq_len < 2:
            raise ParameterError("max_seq_len must be >= 2")
        if self.d_model % self.n_heads != 0:
            raise ParameterError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        for name in self.lora_target_layers:
            if name not in LORA_LAYER_NAMES:
                raise ParameterError(f"unknown LoRA target layer {name!r}")

    def lora_layer_dims(self, name: str) -> tuple[int, int]:
        """(d_in, d_out) of the projection a given target layer adapts."""
        if name == "mlp_up":
            return self.d_model, self.d_ff
        if name == "mlp_down":
            return self.d_ff, self.d_model
        if name in LORA_LAYER_NAMES:
            return self.d_model, self.d_model
        raise ParameterError(f"unknown LoRA target layer {name!r}")


@dataclass
class LayerWeights:
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    w_up: np.ndarray
    w_down: np.ndarray


@dataclass
class TransformerWeights:
    tok_emb: np.ndarray
    pos_emb: np.ndarray
    layers: list[LayerWeights]
    final_ln_g: np.ndarray
    final_ln_b: np.ndarray
    w_out: np.ndarray

    def named_tensors(self):
        yield "tok_emb", self.tok_emb
        yield "pos_emb", self.pos_emb
        for i, lw in enumerate(self.layers):
            for fname in (
                "ln1_g", "ln1_b", "wq", "wk", "wv", "wo",
                "ln2_g", "ln2_b", "w_up", "w_down",
            ):
                yield f"layers.{i}.{fname}", getattr(lw, fname)
        yield "final_ln_g", self.final_ln_g
        yield "final_ln_b", self.final_ln_b
        yield "w_out", self.w_out

    def expected_shapes(self, config: ModelConfig) -> dict[str, tuple[int, ...]]:
        d, v, f = config.d_model, config.vocab_size, config.d_ff
        shapes: dict[str, tuple[int, ...]] = {
            "tok_emb": (v, d),
            "pos_emb": (config.max_seq_len, d),
            "final_ln_g": (d,),
            "final_ln_b": (d,),
            "w_out": (d, v),
        }
        for i in range(config.n_layers):
            shapes.update(
                {
                    f"layers.{i}.ln1_g": (d,),
                    f"layers.{i}.ln1_b": (d,),
                    f"layers.{i}.wq": (d, d),
                    f"layers.{i}.wk": (d, d),
                    f"layers.{i}.wv": (d, d),
                    f"layers.{i}.wo": (d, d),
                    f"layers.{i}.ln2_g": (d,),
                    f"layers.{i}.ln2_b": (d,),
                    f"layers.{i}.w_up": (d, f),
                    f"layers.{i}.w_down": (f, d),
                }
            )
        return shapes

    def validate_shapes(self, config: ModelConfig) -> None:
        expected = self.expected_shapes(config)
        for name, arr in self.named_tensors():
            if tuple(arr.shape) != expected[name]:
                raise FormatError(
                    f"tensor {name!r} has shape {tuple(arr.shape)}, expected {expected[name]}"
                )
            if not np.all(np.isfinite(arr)):
                raise FormatError(f"tensor {name!r} contains non-finite values")


def make_toy_model(config: ModelConfig, seed: int) -> TransformerWeights:
    """Deterministic toy weights from one splitmix64 stream.

    Embeddings and projections are uniform in (-s, s) with s = 1/sqrt(d_model);
    layer-norm gains are 1 and biases 0, keeping every |w| <= 1 and activations
    near unit scale. Same seed, same bits.
    """
    config.validate()
    prng = Prng(seed)
    scale = 1.0 / np.sqrt(config.d_model)
    d, f = config.d_model, config.d_ff

    def rand(rows: int, cols: int) -> np.ndarray:
        return prng.uniform_array(rows * cols, scale).reshape(rows, cols)

    layers = []
    tok_emb = rand(config.vocab_size, d)
    pos_emb = rand(config.max_seq_len, d)
    for _ in range(config.n_layers):
        layers.append(
            LayerWeights(
                ln1_g=np.ones(d, dtype=np.float32),
                ln1_b=np.zeros(d, dtype=np.float32),
                wq=rand(d, d),
                wk=rand(d, d),
                wv=rand(d, d),
                wo=rand(d, d),
                ln2_g=np.ones(d, dtype=np.float32),
                ln2_b=np.zeros(d, dtype=np.float32),
                w_up=rand(d, f),
                w_down=rand(f, d),
            )
        )
    return TransformerWeights(
        tok_emb=tok_emb,
        pos_emb=pos_emb,
        layers=layers,
        final_ln_g=np.ones(d, dtype=np.float32),
        final_ln_b=np.zeros(d, dtype=np.float32),
        w_out=rand(d, config.vocab_size),
    )


def make_toy_adapter(
    config: ModelConfig,
    adapter_id: int,
    rank: int,
    seed: int,
    lora_alpha: float | None = None,
) -> LoraAdapter:
    """Random adapter over the config's target layers.

    A entries scale like 1/sqrt(d_in) and B like 1/sqrt(rank) so the delta
    stays the same order of magnitude as the base projections. lora_alpha
    defaults to the rank, i.e. scaling 1.
    """
    config.validate()
    if rank < 1:
        raise ParameterError(f"rank must be >= 1, got {rank}")
    prng = Prng(seed)
    layers = {}
    for name in config.lora_target_layers:
        d_in, d_out = config.lora_layer_dims(name)
        a = prng.uniform_array(d_in * rank, 1.0 / np.sqrt(d_in)).reshape(d_in, rank)
        b = prng.uniform_array(rank * d_out, 1.0 / np.sqrt(rank)).reshape(rank, d_out)
        layers[name] = (a, b)
    adapter = LoraAdapter(
        adapter_id=adapter_id,
        rank=rank,
        lora_alpha=float(rank if lora_alpha is None else lora_alpha),
        layers=layers,
    )
    adapter.validate()
    return adapter


def save_model(config: ModelConfig, weights: TransformerWeights, manifest_path) -> int:
    config.validate()
    weights.validate_shapes(config)
    meta = {
        "kind": "model",
        "config": {
            "vocab_size": config.vocab_size,
            "d_model": config.d_model,
            "n_layers": config.n_layers,
            "n_heads": config.n_heads,
            "d_ff": config.d_ff,
            "max_seq_len": config.max_seq_len,
            "lora_target_layers": list(config.lora_target_layers),
        },
    }
    return manifest_io.write_bundle(manifest_path, meta, list(weights.named_tensors()))


def load_model(manifest_path) -> tuple[ModelConfig, TransformerWeights]:
    meta, tensors = manifest_io.read_bundle(manifest_path)
    if meta.get("kind") != "model":
        raise FormatError(f"{manifest_path} is not a model bundle")
    try:
        cfg = meta["config"]
        config = ModelConfig(
            vocab_size=int(cfg["vocab_size"]),
            d_model=int(cfg["d_model"]),
            n_layers=int(cfg["n_layers"]),
            n_heads=int(cfg["n_heads"]),
            d_ff=int(cfg["d_ff"]),
            max_seq_len=int(cfg["max_seq_len"]),
            lora_target_layers=tuple(cfg["lora_target_layers"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"model manifest missing config: {exc}") from exc
    config.validate()

    def take(name: str) -> np.ndarray:
        try:
            return tensors[name]
        except KeyError:
            raise FormatError(f"model bundle missing tensor {name!r}") from None

    layers = []
    for i in range(config.n_layers):
        layers.append(
            LayerWeights(
                **{
                    fname: take(f"layers.{i}.{fname}")
                    for fname in (
                        "ln1_g", "ln1_b", "wq", "wk", "wv", "wo",
                        "ln2_g", "ln2_b", "w_up", "w_down",
                    )
                }
            )
        )
    weights = TransformerWeights(
        tok_emb=take("tok_emb"),
        pos_emb=take("pos_emb"),
        layers=layers,
        final_ln_g=take("final_ln_g"),
        final_ln_b=take("final_ln_b"),
        w_out=take("w_out"),
    )
    weights.validate_shapes(config)
    return config, weights


# ---------------------------------------------------------------------------
# Numeric pieces shared by prefill and decode. All row-local.


def _layer_norm(x: np.ndarray, g: np.ndarray, b: np.ndarray) -> np.ndarray:
    mu = np.mean(x, axis=1, keepdims=True)
    var = np.mean((x - mu) ** 2, axis=1, keepdims=True)
    return (x - mu) / np.sqrt(var + np.float32(1e-5)) * g + b


def _gelu(x: np.ndarray) -> np.ndarray:
    c = np.float32(0.7978845608028654)  # sqrt(2/pi)
    k = np.float32(0.044715)
    return np.float32(0.5) * x * (np.float32(1.0) + np.tanh(c * (x + k * x * x * x)))


def _softmax_rows(scores: np.ndarray) -> np.ndarray:
    m = np.max(scores, axis=1, keepdims=True)
    e = np.exp(scores - m)
    return e / np.sum(e, axis=1, keepdims=True)


class KvCache:
    """Per-layer key/value history for one generation row."""

    __slots__ = ("k", "v", "length")

    def __init__(self, n_layers: int, max_seq_len: int, d_model: int):
        self.k = np.zeros((n_layers, max_seq_len, d_model), dtype=np.float32)
        self.v = np.zeros((n_layers, max_seq_len, d_model), dtype=np.float32)
        self.length = 0

    @property
    def max_seq_len(self) -> int:
        return self.k.shape[1]

    def clone(self) -> "KvCache":
        out = KvCache.__new__(KvCache)
        out.k = self.k.copy()
        out.v = self.v.copy()
        out.length = self.length
        return out

    def resident_bytes(self) -> int:
        return self.k.nbytes + self.v.nbytes


class LogitsProvider(Protocol):
    """Anything that maps a token context to next-token logits."""

    def next_logits(self, context: Sequence[int]) -> np.ndarray: ...


class TransformerRuntime:
    """Batched transformer forward with LoRA attachment points.

    Prefill clusters rows by adapter index and applies each adapter's pair
    with one grouped matmul per target layer; decode applies the same math
    per row through the BGMV kernels. Weights and registry are immutable and
    shareable; each KvCache belongs to exactly one row.
    """

    def __init__(
        self,
        config: ModelConfig,
        weights: TransformerWeights,
        registry: AdapterRegistry | None = None,
    ):
        config.validate()
        weights.validate_shapes(config)
        self.config = config
        self.weights = weights
        self.registry = registry
        if registry is not None and len(registry):
            for name in registry.target_layers:
                if name not in config.lora_target_layers:
                    raise FormatError(
                        f"registry targets {name!r} but model config adapts "
                        f"{config.lora_target_layers}"
                    )
                if registry.layer_dims(name) != config.lora_layer_dims(name):
                    raise DimensionError(
                        f"layer {name!r}: adapter dims {registry.layer_dims(name)} "
                        f"!= model dims {config.lora_layer_dims(name)}"
                    )

    # -- provider surface ---------------------------------------------------

    @property
    def vocab_size(self) -> int:
        return self.config.vocab_size

    @property
    def max_seq_len(self) -> int:
        return self.config.max_seq_len

    def has_adapter(self, adapter_id: int) -> bool:
        return self.registry is not None and 0 <= adapter_id < len(self.registry)

    def session(self, adapter_id: int | None) -> "TransformerSession":
        return TransformerSession(self, adapter_id)

    def new_cache(self) -> KvCache:
        return KvCache(self.config.n_layers, self.config.max_seq_len, self.config.d_model)

    # -- LoRA application ---------------------------------------------------

    def _lora_targets(self) -> tuple[str, ...]:
        if self.registry is None or not len(self.registry):
            return ()
        return self.registry.target_layers

    def _lora_grouped(self, h: np.ndarray, y: np.ndarray, name: str, token_idx: np.ndarray) -> np.ndarray:
        """Prefill path: cluster token rows by adapter index, one matmul pair
        per adapter; base rows (-1) skip. Bitwise-equal to the per-row path."""
        if name not in self._lora_targets():
            return y
        registry = self.registry
        present = np.unique(token_idx[token_idx >= 0])
        if present.size == 0:
            return y
        out = y.copy()
        for ai in present:
            adapter = registry.adapters[int(ai)]
            rows = np.nonzero(token_idx == ai)[0]
            a, b = adapter.layers[name]
            delta = matmul(matmul(h[rows], a), b)
            out[rows] = y[rows] + np.float32(adapter.scaling) * delta
            registry.rows_applied += int(rows.size)
        return out

    def _lora_rowwise(self, h: np.ndarray, y: np.ndarray, name: str, idx: np.ndarray) -> np.ndarray:
        """Decode path: per-row adapter lookup through the BGMV kernels."""
        if name not in self._lora_targets():
            return y
        v = lora_engine.bgmv_shrink(h, self.registry, name, idx)
        return lora_engine.bgmv_expand_fused(v, self.registry, name, idx, y)

    # -- forward passes -----------------------------------------------------

    def _attend_block(self, q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Causal attention over one row's full prefix; q, k, v are (L, d)."""
        h = self.config.n_heads
        hd = self.config.d_model // h
        seq = q.shape[0]
        inv = np.float32(1.0 / np.sqrt(hd))
        out = np.zeros_like(q)
        mask = np.triu(np.full((seq, seq), -np.inf, dtype=np.float32), k=1)
        for hi in range(h):
            sl = slice(hi * hd, (hi + 1) * hd)
            qh = np.ascontiguousarray(q[:, sl])
            kh = np.ascontiguousarray(k[:, sl])
            vh = np.ascontiguousarray(v[:, sl])
            scores = matmul(qh, np.ascontiguousarray(kh.T)) * inv + mask
            out[:, sl] = matmul(_softmax_rows(scores), vh)
        return out

    def _attend_step(self, q_row: np.ndarray, k_hist: np.ndarray, v_hist: np.ndarray) -> np.ndarray:
        """Attention for one new position against that row's history."""
        h = self.config.n_heads
        hd = self.config.d_model // h
        inv = np.float32(1.0 / np.sqrt(hd))
        out = np.zeros_like(q_row)
        for hi in range(h):
            sl = slice(hi * hd, (hi + 1) * hd)
            kh = np.ascontiguousarray(k_hist[:, sl])
            vh = np.ascontiguousarray(v_hist[:, sl])
            scores = matmul(q_row[None, sl], np.ascontiguousarray(kh.T)) * inv
            out[sl] = matmul(_softmax_rows(scores), vh)[0]
        return out

    def _encode_packed(
        self,
        prompts: Sequence[Sequence[int]],
        indices: np.ndarray,
        caches: list[KvCache] | None,
    ) -> tuple[np.ndarray, list[int]]:
        """Run all prompt tokens through the stack; returns packed hidden
        states (sum of lengths, d_model) before the final norm."""
        cfg = self.config
        lengths = [len(p) for p in prompts]
        for L in lengths:
            if L < 1 or L > cfg.max_seq_len:
                raise LengthError(
                    f"prompt length {L} outside [1, {cfg.max_seq_len}]"
                )
        token_ids = np.concatenate([np.asarray(p, dtype=np.int64) for p in prompts])
        if token_ids.size and (token_ids.min() < 0 or token_ids.max() >= cfg.vocab_size):
            raise ParameterError("token id outside vocabulary")
        positions = np.concatenate([np.arange(L, dtype=np.int64) for L in lengths])
        row_of_token = np.repeat(np.arange(len(prompts)), lengths)
        token_idx = indices[row_of_token]

        x = self.weights.tok_emb[token_ids] + self.weights.pos_emb[positions]
        for li, lw in enumerate(self.weights.layers):
            hstate = _layer_norm(x, lw.ln1_g, lw.ln1_b)
            q = self._lora_grouped(hstate, matmul(hstate, lw.wq), "attn_q", token_idx)
            k = self._lora_grouped(hstate, matmul(hstate, lw.wk), "attn_k", token_idx)
            v = self._lora_grouped(hstate, matmul(hstate, lw.wv), "attn_v", token_idx)
            attn = np.zeros_like(x)
            off = 0
            for r, L in enumerate(lengths):
                sl = slice(off, off + L)
                attn[sl] = self._attend_block(q[sl], k[sl], v[sl])
                if caches is not None:
                    caches[r].k[li, :L] = k[sl]
                    caches[r].v[li, :L] = v[sl]
                off += L
            o = self._lora_grouped(attn, matmul(attn, lw.wo), "attn_o", token_idx)
            x = x + o
            h2 = _layer_norm(x, lw.ln2_g, lw.ln2_b)
            up = self._lora_grouped(h2, matmul(h2, lw.w_up), "mlp_up", token_idx)
            act = _gelu(up)
            down = self._lora_grouped(act, matmul(act, lw.w_down), "mlp_down", token_idx)
            x = x + down
        if caches is not None:
            for r, L in enumerate(lengths):
                caches[r].length = L
        return x, lengths

    def prefill(
        self, prompts: Sequence[Sequence[int]], idx
    ) -> tuple[np.ndarray, list[KvCache]]:
        """Process whole prompts; returns last-position logits and one fresh
        KvCache per row."""
        indices = normalize_indices(
            idx, len(prompts), len(self.registry) if self.registry else 0
        )
        caches = [self.new_cache() for _ in prompts]
        x, lengths = self._encode_packed(prompts, indices, caches)
        last_rows = np.cumsum(lengths) - 1
        h = _layer_norm(x[last_rows], self.weights.final_ln_g, self.weights.final_ln_b)
        return matmul(h, self.weights.w_out), caches

    def decode_step(self, last_tokens: Sequence[int], caches: list[KvCache], idx) -> np.ndarray:
        """Append one position per row and return next-token logits."""
        cfg = self.config
        batch = len(last_tokens)
        if len(caches) != batch:
            raise DimensionError("one cache per row required")
        indices = normalize_indices(
            idx, batch, len(self.registry) if self.registry else 0
        )
        for c in caches:
            if c.length >= cfg.max_seq_len:
                raise LengthError(
                    f"cache at length {c.length} cannot grow past max_seq_len {cfg.max_seq_len}"
                )
        tokens = np.asarray(last_tokens, dtype=np.int64)
        if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
            raise ParameterError("token id outside vocabulary")
        positions = np.array([c.length for c in caches], dtype=np.int64)

        x = self.weights.tok_emb[tokens] + self.weights.pos_emb[positions]
        for li, lw in enumerate(self.weights.layers):
            hstate = _layer_norm(x, lw.ln1_g, lw.ln1_b)
            q = self._lora_rowwise(hstate, matmul(hstate, lw.wq), "attn_q", indices)
            k = self._lora_rowwise(hstate, matmul(hstate, lw.wk), "attn_k", indices)
            v = self._lora_rowwise(hstate, matmul(hstate, lw.wv), "attn_v", indices)
            attn = np.zeros_like(x)
            for r, cache in enumerate(caches):
                pos = cache.length
                cache.k[li, pos] = k[r]
                cache.v[li, pos] = v[r]
                attn[r] = self._attend_step(
                    q[r], cache.k[li, : pos + 1], cache.v[li, : pos + 1]
                )
            o = self._lora_rowwise(attn, matmul(attn, lw.wo), "attn_o", indices)
            x = x + o
            h2 = _layer_norm(x, lw.ln2_g, lw.ln2_b)
            up = self._lora_rowwise(h2, matmul(h2, lw.w_up), "mlp_up", indices)
            act = _gelu(up)
            down = self._lora_rowwise(act, matmul(act, lw.w_down), "mlp_down", indices)
            x = x + down
        for cache in caches:
            cache.length += 1
        h = _layer_norm(x, self.weights.final_ln_g, self.weights.final_ln_b)
        return matmul(h, self.weights.w_out)

    def full_logits(self, tokens: Sequence[int], adapter_index: int = -1) -> np.ndarray:
        """No-cache forward over one sequence; logits at every position.

        The recompute oracle for KV-cache decode and the probe for causality
        checks.
        """
        indices = normalize_indices(
            [adapter_index], 1, len(self.registry) if self.registry else 0
        )
        x, _ = self._encode_packed([list(tokens)], indices, None)
        h = _layer_norm(x, self.weights.final_ln_g, self.weights.final_ln_b)
        return matmul(h, self.weights.w_out)

    def resident_weight_bytes(self) -> int:
        total = sum(arr.nbytes for _, arr in self.weights.named_tensors())
        if self.registry is not None:
            for name in self.registry.target_layers:
                p = self.registry.packed(name)
                total += p.a_stack.nbytes + p.b_stack.nbytes
        return total


class TransformerSession:
    """Single-context logits provider bound to one adapter index.

    Keeps a private KvCache; an extension of the previous context decodes
    only the new tokens, anything else re-prefills. Same context in, same
    logits out.
    """

    def __init__(self, runtime: TransformerRuntime, adapter_id: int | None):
        if adapter_id is not None and not runtime.has_adapter(adapter_id):
            raise ParameterError(f"adapter {adapter_id} not registered")
        self.runtime = runtime
        self.adapter_index = -1 if adapter_id is None else int(adapter_id)
        self._tokens: list[int] = []
        self._cache: KvCache | None = None
        self._last_logits: np.ndarray | None = None

    def next_logits(self, context: Sequence[int]) -> np.ndarray:
        ctx = [int(t) for t in context]
        if not ctx:
            raise ParameterError("context must be non-empty")
        idx = [self.adapter_index]
        if self._cache is not None and ctx == self._tokens:
            return self._last_logits
        if (
            self._cache is not None
            and len(ctx) > len(self._tokens)
            and ctx[: len(self._tokens)] == self._tokens
        ):
            logits = self._last_logits
            for t in ctx[len(self._tokens) :]:
                logits = self.runtime.decode_step([t], [self._cache], idx)
            self._tokens = ctx
            self._last_logits = logits[0]
            return self._last_logits
        logits, caches = self.runtime.prefill([ctx], idx)
        self._tokens = ctx
        self._cache = caches[0]
        self._last_logits = logits[0]
        return self._last_logits


# ---------------------------------------------------------------------------
# Tabular stub


@dataclass
class TabularLm:
    """Context-table language model: the last `order` tokens pick a logits row.

    A hand-constructible stand-in for the transformer so decoding behavior
    can be pinned against exact expert/amateur tables.
    """

    order: int
    table: Mapping[tuple[int, ...], np.ndarray]
    default_row: np.ndarray

    def __post_init__(self):
        if self.order not in (1, 2):
            raise ParameterError(f"context order must be 1 or 2, got {self.order}")
        self.default_row = np.asarray(self.default_row, dtype=np.float32)
        vocab = self.default_row.shape[0]
        fixed = {}
        for key, row in self.table.items():
            row = np.asarray(row, dtype=np.float32)
            if row.shape != (vocab,):
                raise DimensionError(
                    f"table row for {key} has shape {row.shape}, expected ({vocab},)"
                )
            fixed[tuple(int(t) for t in key)] = row
        self.table = fixed

    @property
    def vocab_size(self) -> int:
        return int(self.default_row.shape[0])

    def next_logits(self, context: Sequence[int]) -> np.ndarray:
        if len(context) == 0:
            raise ParameterError("context must be non-empty")
        key = tuple(int(t) for t in context[-self.order :])
        return self.table.get(key, self.default_row)


def tabular_logits(lm: TabularLm, context: Sequence[int]) -> np.ndarray:
    """Table lookup on the last `order` tokens, default row otherwise."""
    return lm.next_logits(context)


class TabularRuntime:
    """Serving adapter around tabular models: index -1 reads the base table,
    index a reads experts[a]. Caches are just per-row token histories."""

    def __init__(self, base: TabularLm, experts: Mapping[int, TabularLm] | None = None):
        self.base = base
        self.experts = dict(experts or {})
        for aid, lm in self.experts.items():
            if aid < 0:
                raise ParameterError(f"expert adapter id must be >= 0, got {aid}")
            if lm.vocab_size != base.vocab_size:
                raise DimensionError("expert and base tables must share a vocabulary")
        self.max_seq_len = None  # contexts are unbounded

    @property
    def vocab_size(self) -> int:
        return self.base.vocab_size

    def has_adapter(self, adapter_id: int) -> bool:
        return adapter_id in self.experts

    def _lm_for(self, adapter_index: int) -> TabularLm:
        if adapter_index < 0:
            return self.base
        try:
            return self.experts[adapter_index]
        except KeyError:
            raise ParameterError(f"adapter {adapter_index} not registered") from None

    def session(self, adapter_id: int | None) -> TabularLm:
        return self._lm_for(-1 if adapter_id is None else adapter_id)

    def prefill(self, prompts: Sequence[Sequence[int]], idx) -> tuple[np.ndarray, list[list[int]]]:
        indices = np.asarray(idx, dtype=np.int64)
        logits = np.stack(
            [
                self._lm_for(int(indices[r])).next_logits(p)
                for r, p in enumerate(prompts)
            ]
        )
        return logits.astype(np.float32), [list(map(int, p)) for p in prompts]

    def decode_step(self, last_tokens: Sequence[int], caches: list[list[int]], idx) -> np.ndarray:
        indices = np.asarray(idx, dtype=np.int64)
        rows = []
        for r, tok in enumerate(last_tokens):
            caches[r].append(int(tok))
            rows.append(self._lm_for(int(indices[r])).next_logits(caches[r]))
        return np.stack(rows).astype(np.float32)
