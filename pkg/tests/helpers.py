"""Shared builders for test models and registries."""

import numpy as np

from coldserve.lora_engine import AdapterRegistry, LoraAdapter
from coldserve.model_runtime import (
    ModelConfig,
    TransformerRuntime,
    make_toy_adapter,
    make_toy_model,
)


def small_config(**overrides) -> ModelConfig:
    base = dict(
        vocab_size=32, d_model=16, n_layers=2, n_heads=2, d_ff=32, max_seq_len=64
    )
    base.update(overrides)
    return ModelConfig(**base)


def toy_runtime(seed: int = 1, ranks=(2, 4), **config_overrides) -> TransformerRuntime:
    config = small_config(**config_overrides)
    weights = make_toy_model(config, seed)
    adapters = [
        make_toy_adapter(config, i, rank=r, seed=seed + 10 + i)
        for i, r in enumerate(ranks)
    ]
    return TransformerRuntime(config, weights, AdapterRegistry(adapters))


def identity_adapter(adapter_id: int = 0, dim: int = 2, layer: str = "proj") -> LoraAdapter:
    eye = np.eye(dim, dtype=np.float32)
    return LoraAdapter(
        adapter_id=adapter_id,
        rank=dim,
        lora_alpha=float(dim),  # scaling 1
        layers={layer: (eye.copy(), eye.copy())},
    )


def random_registry(
    rng: np.random.Generator,
    ranks,
    d_in: int,
    d_out: int,
    layer: str = "proj",
) -> AdapterRegistry:
    adapters = []
    for aid, r in enumerate(ranks):
        a = (rng.uniform(-1, 1, (d_in, r)) / np.sqrt(d_in)).astype(np.float32)
        b = (rng.uniform(-1, 1, (r, d_out)) / np.sqrt(r)).astype(np.float32)
        adapters.append(
            LoraAdapter(adapter_id=aid, rank=r, lora_alpha=float(r), layers={layer: (a, b)})
        )
    return AdapterRegistry(adapters)
