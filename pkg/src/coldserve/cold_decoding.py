"""Contrastive scoring and the decoding strategies.

The "cold" strategy treats the adapter-augmented model as the expert and the
bare base model as the amateur. Expert logits gate which tokens are even
considered (the alpha mask keeps token j iff s_e[j] >= log(alpha) + max s_e),
then the amateur's scores are subtracted so tokens the base model loves for
generic reasons lose ground: contrast = (1+beta)*s_e - beta*s_a on the valid
set, -inf elsewhere. Also here: greedy, nucleus, beam and vanilla two-model
contrastive decoding, all deterministic given a seed.

Selection math runs in float64 over the f32 logits so hand-derived boundary
cases stay exact; tensors everywhere else remain float32.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from coldserve.errors import EmptySupportError, ParameterError
from coldserve.tensor_core import Prng, argmax_tiebreak_low, log_softmax

__all__ = [
    "ContrastiveParams",
    "SamplingParams",
    "StepDiagnostics",
    "STRATEGIES",
    "alpha_mask",
    "cold_scores",
    "select_greedy",
    "select_nucleus",
    "nucleus_truncate",
    "beam_step",
    "generate",
]

STRATEGIES = ("greedy", "beam", "nucleus", "cold", "vanilla_cd")


@dataclass(frozen=True)
class ContrastiveParams:
    alpha: float = 0.1
    beta: float = 0.5

    def validate(self) -> None:
        if not (0.0 < self.alpha <= 1.0):
            raise ParameterError(f"alpha must be in (0, 1], got {self.alpha}")
        if not (math.isfinite(self.beta) and self.beta >= 0.0):
            raise ParameterError(f"beta must be finite and >= 0, got {self.beta}")


@dataclass(frozen=True)
class SamplingParams:
    strategy: str = "greedy"
    temperature: float = 1.0
    max_tokens: int = 16
    stop_token_ids: frozenset = frozenset()
    seed: int = 0
    contrastive: ContrastiveParams | None = None
    nucleus_p: float = 0.7
    beam_width: int = 2
    # Sample the contrast scores through nucleus truncation instead of taking
    # their argmax. Off by default: the headline comparisons are vs greedy.
    cold_sample_p: float | None = None

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ParameterError(
                f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}"
            )
        if not (math.isfinite(self.temperature) and self.temperature > 0):
            raise ParameterError(f"temperature must be > 0, got {self.temperature}")
        if self.max_tokens < 1:
            raise ParameterError(f"max_tokens must be >= 1, got {self.max_tokens}")
        if not (0.0 < self.nucleus_p <= 1.0):
            raise ParameterError(f"nucleus p must be in (0, 1], got {self.nucleus_p}")
        if self.beam_width < 1:
            raise ParameterError(f"beam width must be >= 1, got {self.beam_width}")
        if self.strategy in ("cold", "vanilla_cd"):
            if self.contrastive is None:
                raise ParameterError(f"strategy {self.strategy!r} needs contrastive params")
            self.contrastive.validate()
        if self.cold_sample_p is not None and not (0.0 < self.cold_sample_p <= 1.0):
            raise ParameterError(
                f"cold_sample_p must be in (0, 1], got {self.cold_sample_p}"
            )


@dataclass
class StepDiagnostics:
    """Per-step observability: what was chosen and how the scores looked."""

    token: int
    valid_count: int
    expert_score: float
    amateur_score: float | None = None
    contrast_score: float | None = None


def alpha_mask(s_e, alpha: float) -> np.ndarray:
    """Valid-token mask: True iff s_e[j] >= log(alpha) + max(s_e).

    The comparison is >=, so boundary tokens pass; alpha in (0, 1] guarantees
    the expert argmax itself always passes.
    """
    if not (0.0 < alpha <= 1.0):
        raise ParameterError(f"alpha must be in (0, 1], got {alpha}")
    v = np.asarray(s_e, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ParameterError("expert scores must be a non-empty vector")
    threshold = math.log(alpha) + float(np.max(v))
    return v >= threshold


def cold_scores(s_e, s_a, params: ContrastiveParams) -> np.ndarray:
    """Contrast scores: (1+beta)*s_e - beta*s_a on the valid set, -inf off it.

    beta scales the amateur penalty and is distinct from any sampling
    temperature; beta = 0 collapses the contrast back to the expert scores.
    """
    params.validate()
    e = np.asarray(s_e, dtype=np.float64)
    a = np.asarray(s_a, dtype=np.float64)
    if e.shape != a.shape:
        raise ParameterError(
            f"expert and amateur scores must match, got {e.shape} vs {a.shape}"
        )
    mask = alpha_mask(e, params.alpha)
    beta = params.beta
    out = np.full(e.shape, -np.inf, dtype=np.float64)
    out[mask] = (1.0 + beta) * e[mask] - beta * a[mask]
    return out


def select_greedy(s) -> int:
    """Highest score wins; exact ties go to the lowest token id."""
    return argmax_tiebreak_low(s)


def nucleus_truncate(s, p: float, temperature: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Smallest descending-probability prefix with cumulative mass >= p.

    Returns (token ids in sort order, renormalized probabilities). Ties in
    probability keep the lower token id first.
    """
    if not (0.0 < p <= 1.0):
        raise ParameterError(f"nucleus p must be in (0, 1], got {p}")
    logp = log_softmax(np.asarray(s, dtype=np.float64) / temperature)
    order = np.argsort(-logp, kind="stable")
    probs = np.exp(logp[order])
    cum = np.cumsum(probs)
    cutoff = int(np.searchsorted(cum, p, side="left"))
    keep = order[: cutoff + 1]
    kept = probs[: cutoff + 1]
    positive = kept > 0.0  # cumulative rounding at p=1 must not admit -inf tokens
    keep, kept = keep[positive], kept[positive]
    return keep, kept / kept.sum()


def select_nucleus(s, p: float, prng: Prng, temperature: float = 1.0) -> int:
    """Inverse-CDF sample over the truncated, renormalized distribution."""
    tokens, probs = nucleus_truncate(s, p, temperature)
    u = prng.next_unit_float()
    cum = np.cumsum(probs)
    slot = int(np.searchsorted(cum, u, side="right"))
    slot = min(slot, len(tokens) - 1)  # guard cumulative rounding at the top end
    return int(tokens[slot])


def beam_step(
    beams: list[tuple[tuple[int, ...], float]],
    scores_per_beam: Sequence[np.ndarray],
    k: int,
) -> list[tuple[tuple[int, ...], float]]:
    """Expand every beam by every token, keep the top k by cumulative
    log-probability. Ties resolve by beam order, then lower token id."""
    if k < 1:
        raise ParameterError(f"beam width must be >= 1, got {k}")
    if len(beams) != len(scores_per_beam):
        raise ParameterError("one score vector per beam required")
    candidates = []
    for bi, ((seq, cum), s) in enumerate(zip(beams, scores_per_beam)):
        logp = log_softmax(s)
        for tok in range(logp.shape[0]):
            lp = logp[tok]
            if lp == -np.inf:
                continue
            candidates.append((cum + float(lp), bi, tok, seq + (tok,)))
    if not candidates:
        raise EmptySupportError("no expandable beam candidates")
    candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
    return [(seq, score) for score, _, _, seq in candidates[:k]]


def _contrast_step(
    s_e: np.ndarray,
    s_a: np.ndarray,
    params: SamplingParams,
    prng: Prng,
) -> tuple[int, StepDiagnostics]:
    scores = cold_scores(s_e, s_a, params.contrastive)
    if params.cold_sample_p is not None:
        token = select_nucleus(scores, params.cold_sample_p, prng)
    else:
        token = select_greedy(scores)
    return token, StepDiagnostics(
        token=token,
        valid_count=int(np.count_nonzero(scores > -np.inf)),
        expert_score=float(np.asarray(s_e, dtype=np.float64)[token]),
        amateur_score=float(np.asarray(s_a, dtype=np.float64)[token]),
        contrast_score=float(scores[token]),
    )


def _beam_rollout(expert, prompt: list[int], params: SamplingParams):
    """Beam search over single-model log-probs. Finished beams (stop token
    chosen) freeze and keep competing on score; the rollout ends when the
    top-ranked beam is finished or everything hit max_tokens."""
    k = params.beam_width
    beams: list[tuple[tuple[int, ...], float]] = [((), 0.0)]
    diagnostics: list[StepDiagnostics] = []
    for _ in range(params.max_tokens):
        frozen = [b for b in beams if b[0] and b[0][-1] in params.stop_token_ids]
        live = [b for b in beams if not (b[0] and b[0][-1] in params.stop_token_ids)]
        if not live:
            break
        scores = [expert.next_logits(prompt + list(seq)) for seq, _ in live]
        expanded = beam_step(live, scores, k)
        merged = frozen + expanded
        merged.sort(key=lambda b: -b[1])
        beams = merged[:k]
        top_seq, top_score = beams[0]
        diagnostics.append(
            StepDiagnostics(
                token=top_seq[-1],
                valid_count=len(beams),
                expert_score=float(top_score),
            )
        )
        if top_seq[-1] in params.stop_token_ids:
            break
    return list(beams[0][0]), diagnostics


def generate(
    expert,
    amateur,
    prompt: Sequence[int],
    params: SamplingParams,
) -> tuple[list[int], list[StepDiagnostics]]:
    """Autoregressive loop until a stop token or max_tokens.

    expert/amateur are logits providers. cold expects the amateur to be the
    same model routed through the base path (adapter index -1); vanilla_cd
    contrasts two genuinely distinct providers. The chosen token -- never the
    amateur's own preference -- extends both contexts.
    """
    params.validate()
    if params.strategy in ("cold", "vanilla_cd") and amateur is None:
        raise ParameterError(f"strategy {params.strategy!r} needs an amateur provider")
    prompt = [int(t) for t in prompt]
    if not prompt:
        raise ParameterError("prompt must be non-empty")
    prng = Prng(params.seed)

    if params.strategy == "beam":
        tokens, diagnostics = _beam_rollout(expert, prompt, params)
        return tokens, diagnostics

    tokens: list[int] = []
    diagnostics: list[StepDiagnostics] = []
    for _ in range(params.max_tokens):
        context = prompt + tokens
        s_e = expert.next_logits(context)
        if params.strategy in ("cold", "vanilla_cd"):
            s_a = amateur.next_logits(context)
            token, diag = _contrast_step(s_e, s_a, params, prng)
        elif params.strategy == "greedy":
            token = select_greedy(s_e)
            finite = np.asarray(s_e, dtype=np.float64) > -np.inf
            diag = StepDiagnostics(
                token=token,
                valid_count=int(np.count_nonzero(finite)),
                expert_score=float(np.asarray(s_e, dtype=np.float64)[token]),
            )
        elif params.strategy == "nucleus":
            token = select_nucleus(s_e, params.nucleus_p, prng, params.temperature)
            support, _ = nucleus_truncate(s_e, params.nucleus_p, params.temperature)
            diag = StepDiagnostics(
                token=token,
                valid_count=int(support.shape[0]),
                expert_score=float(np.asarray(s_e, dtype=np.float64)[token]),
            )
        else:  # pragma: no cover - validate() rejects unknown strategies
            raise ParameterError(f"unknown strategy {params.strategy!r}")
        tokens.append(token)
        diagnostics.append(diag)
        if token in params.stop_token_ids:
            break
    return tokens, diagnostics
