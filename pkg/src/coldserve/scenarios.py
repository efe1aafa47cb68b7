"""Hand-built tabular disambiguation scenarios.

Each scenario pits a "generic" continuation the base model loves against a
"specific" continuation the adapter learned. The expert table still ranks
generic marginally above specific (the base bias leaks through), so expert
greedy picks generic and then wanders a filler loop until max_tokens; the
contrast subtracts the base model's large generic margin, flips the choice to
specific, and the expert then steers straight to the stop token. Used by the
serving benchmark and pinned exactly in the tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from coldserve.model_runtime import TabularLm, TabularRuntime

__all__ = ["Scenario", "disambiguation_scenarios", "scenario_runtime"]


@dataclass(frozen=True)
class Scenario:
    name: str
    base: TabularLm
    expert: TabularLm
    prompt: tuple[int, ...]
    neutral_token: int
    generic_token: int
    specific_token: int
    stop_token: int
    filler_tokens: tuple[int, int]
    divergence_step: int  # 0-based output index where greedy and cold split
    max_tokens: int
    expert_margin: float
    base_margin: float


def _row(vocab: int, floor: float, **scores: float) -> np.ndarray:
    out = np.full(vocab, floor, dtype=np.float32)
    for tok, val in scores.items():
        out[int(tok)] = val
    return out


def _build(
    name: str,
    vocab: int,
    prompt: tuple[int, ...],
    neutral: int,
    generic: int,
    specific: int,
    stop: int,
    fillers: tuple[int, int],
    expert_margin: float,
    base_margin: float,
    order: int = 1,
    max_tokens: int = 12,
) -> Scenario:
    f1, f2 = fillers
    anchor = prompt[-1]

    def key(*toks: int) -> tuple[int, ...]:
        return tuple(toks[-order:])

    # Expert: neutral first, then generic over specific by a sliver, specific
    # leads straight to stop, generic leads into the filler loop forever.
    expert_table = {
        key(anchor): _row(vocab, -1.0, **{str(neutral): 5.0}),
        key(anchor, neutral): _row(
            vocab, -1.0, **{str(generic): 2.0, str(specific): 2.0 - expert_margin}
        ),
        key(neutral, specific): _row(vocab, -1.0, **{str(stop): 6.0}),
        key(neutral, generic): _row(vocab, -1.0, **{str(f1): 3.0}),
        key(generic, f1): _row(vocab, -1.0, **{str(f2): 3.0}),
        key(f1, f2): _row(vocab, -1.0, **{str(f1): 3.0}),
        key(f2, f1): _row(vocab, -1.0, **{str(f2): 3.0}),
    }
    # Base: same neutral opener, but a heavy thumb on the generic token.
    base_table = {
        key(anchor): _row(vocab, -1.0, **{str(neutral): 5.0}),
        key(anchor, neutral): _row(
            vocab, -1.0, **{str(generic): 3.0, str(specific): 3.0 - base_margin}
        ),
        key(neutral, specific): _row(vocab, -1.0, **{str(generic): 1.0}),
        key(neutral, generic): _row(vocab, -1.0, **{str(f1): 2.0}),
        key(generic, f1): _row(vocab, -1.0, **{str(f2): 2.0}),
        key(f1, f2): _row(vocab, -1.0, **{str(f1): 2.0}),
        key(f2, f1): _row(vocab, -1.0, **{str(f2): 2.0}),
    }
    default = _row(vocab, -1.0, **{str(f1): 0.5})
    return Scenario(
        name=name,
        base=TabularLm(order=order, table=base_table, default_row=default),
        expert=TabularLm(order=order, table=expert_table, default_row=default),
        prompt=prompt,
        neutral_token=neutral,
        generic_token=generic,
        specific_token=specific,
        stop_token=stop,
        filler_tokens=fillers,
        divergence_step=1,
        max_tokens=max_tokens,
        expert_margin=expert_margin,
        base_margin=base_margin,
    )


def disambiguation_scenarios() -> list[Scenario]:
    """Five scenarios with varying vocabularies, margins and context orders."""
    return [
        _build(
            "wallet-arithmetic", vocab=8, prompt=(0,), neutral=3, generic=1,
            specific=2, stop=7, fillers=(4, 5), expert_margin=0.2, base_margin=2.5,
        ),
        _build(
            "rosebush-source", vocab=10, prompt=(0, 9), neutral=6, generic=1,
            specific=2, stop=8, fillers=(3, 4), expert_margin=0.1, base_margin=1.8,
        ),
        _build(
            "unit-conversion", vocab=12, prompt=(11,), neutral=5, generic=9,
            specific=10, stop=7, fillers=(1, 2), expert_margin=0.4, base_margin=3.0,
        ),
        _build(
            "entity-lookup", vocab=9, prompt=(0,), neutral=4, generic=5,
            specific=6, stop=8, fillers=(1, 2), expert_margin=0.3, base_margin=2.0,
            order=2,
        ),
        _build(
            "format-choice", vocab=16, prompt=(0, 1, 2), neutral=10, generic=11,
            specific=12, stop=15, fillers=(13, 14), expert_margin=0.25,
            base_margin=2.2, max_tokens=16,
        ),
    ]


def scenario_runtime(scenario: Scenario) -> TabularRuntime:
    """Serving view: adapter 0 is the scenario's expert, -1 the base table."""
    return TabularRuntime(base=scenario.base, experts={0: scenario.expert})
