"""coldserve: desk-scale multi-LoRA serving with contrastive decoding.

A single base model plus lightweight low-rank adapters, served through
batched gather-matrix-vector kernels. The contrastive "cold" strategy pairs
each adapted (expert) request with a base-model (amateur) row and rescores
logits so adapter-specific tokens win over generic base-model continuations.
"""

from coldserve._backends import BACKEND
from coldserve.cold_decoding import (
    ContrastiveParams,
    SamplingParams,
    StepDiagnostics,
    alpha_mask,
    cold_scores,
    generate,
)
from coldserve.lora_engine import (
    AdapterRegistry,
    LoraAdapter,
    bgmv_expand_fused,
    bgmv_shrink,
    gather_bmm_oracle,
    lora_delta,
)
from coldserve.model_runtime import (
    ModelConfig,
    TabularLm,
    TabularRuntime,
    TransformerRuntime,
    TransformerSession,
    load_adapter,
    load_model,
    make_toy_adapter,
    make_toy_model,
    save_adapter,
    save_model,
)
from coldserve.serving import Completion, Engine, Metrics, Request

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "AdapterRegistry",
    "Completion",
    "ContrastiveParams",
    "Engine",
    "LoraAdapter",
    "Metrics",
    "ModelConfig",
    "Request",
    "SamplingParams",
    "StepDiagnostics",
    "TabularLm",
    "TabularRuntime",
    "TransformerRuntime",
    "TransformerSession",
    "alpha_mask",
    "bgmv_expand_fused",
    "bgmv_shrink",
    "cold_scores",
    "gather_bmm_oracle",
    "generate",
    "load_adapter",
    "load_model",
    "lora_delta",
    "make_toy_adapter",
    "make_toy_model",
    "save_adapter",
    "save_model",
    "__version__",
]
