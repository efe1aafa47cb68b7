"""Request lifecycle and continuous batching over prefill + decode.

Rows are the unit of capacity. A plain request occupies one row; a cold
request occupies two adjacent rows sharing one model pass -- the expert row
carries its adapter index, the amateur row carries -1 -- and the token chosen
by the contrast is fed to BOTH rows, so the pair's contexts never diverge.
Beam requests reserve one row per hypothesis and clone the parent row's cache
when hypotheses fork. Admission is strict FCFS with a fixed row capacity.

Each step admits what fits, prefills the newcomers (rows grouped by adapter
index inside the model pass), runs one decode for ongoing rows, applies every
request's strategy to its rows' logits, and retires requests on stop token or
max_tokens. The first output token comes from the prefill logits, so a
request emitting n tokens costs one prefill step plus n-1 decode steps.
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from coldserve.cold_decoding import (
    SamplingParams,
    StepDiagnostics,
    _contrast_step,
    beam_step,
    select_greedy,
    select_nucleus,
)
from coldserve.errors import BadRequestError, ColdServeError
from coldserve.tensor_core import Prng

__all__ = ["Request", "Completion", "Metrics", "Engine"]


@dataclass(frozen=True)
class Request:
    prompt: Sequence[int]
    sampling: SamplingParams
    adapter_id: int | None = None


@dataclass
class Completion:
    request_id: int
    tokens: list[int]
    diagnostics: list[StepDiagnostics]
    e2e_latency_s: float
    tpot_s: float
    error: str | None = None

    @property
    def output_token_count(self) -> int:
        return len(self.tokens)


@dataclass
class Metrics:
    per_request: list[Completion]
    mean_latency_s: float
    stddev_latency_s: float
    tokens_per_s: float
    total_output_tokens: int

    @property
    def n_requests(self) -> int:
        return len(self.per_request)

    def to_jsonl(self) -> str:
        """One record per request plus a trailing aggregate record."""
        lines = []
        for c in self.per_request:
            lines.append(
                json.dumps(
                    {
                        "request_id": c.request_id,
                        "e2e_latency_s": c.e2e_latency_s,
                        "output_tokens": c.output_token_count,
                        "tpot_s": c.tpot_s,
                    },
                    sort_keys=True,
                )
            )
        lines.append(
            json.dumps(
                {
                    "aggregate": True,
                    "n_requests": self.n_requests,
                    "mean_latency_s": self.mean_latency_s,
                    "stddev_latency_s": self.stddev_latency_s,
                    "tokens_per_s": self.tokens_per_s,
                    "total_output_tokens": self.total_output_tokens,
                },
                sort_keys=True,
            )
        )
        return "\n".join(lines) + "\n"


@dataclass(eq=False)
class _Row:
    adapter_index: int
    role: str  # solo | expert | amateur | beam
    cache: object = None
    last_token: int | None = None
    fed_tokens: list[int] = field(default_factory=list)
    awaiting_decode: bool = True  # frozen beam rows sit out decode


@dataclass(eq=False)
class _Beam:
    tokens: tuple[int, ...]
    score: float
    row: _Row
    finished: bool = False


@dataclass(eq=False)
class _ActiveRequest:
    request_id: int
    request: Request
    submitted_at: float
    rows: list[_Row] = field(default_factory=list)
    rows_reserved: int = 0
    generated: list[int] = field(default_factory=list)
    diagnostics: list[StepDiagnostics] = field(default_factory=list)
    prng: Prng = None
    beams: list[_Beam] = field(default_factory=list)
    prefilled: bool = False
    processing_time_s: float = 0.0

    @property
    def strategy(self) -> str:
        return self.request.sampling.strategy


def _clone_cache(cache):
    if hasattr(cache, "clone"):
        return cache.clone()
    return list(cache)


class Engine:
    """FCFS continuous-batching engine over one model runtime.

    submit may be called from anywhere; step/drain must be driven by a single
    owner. Requests are deterministic given their sampling seed, and a
    request's output does not depend on what else shares the batch.
    """

    def __init__(self, runtime, capacity: int = 8):
        if capacity < 1:
            raise BadRequestError(f"capacity must be >= 1, got {capacity}")
        self.runtime = runtime
        self.capacity = capacity
        self.queue: list[_ActiveRequest] = []
        self.active: list[_ActiveRequest] = []
        self.completed: list[Completion] = []
        self.admitted_count = 0
        self.retired_count = 0
        self._next_id = 0
        self._queue_lock = threading.Lock()  # submit may race the step owner
        self._first_step_at: float | None = None
        self._last_completion_at: float | None = None

    # -- submission ----------------------------------------------------------

    def _rows_needed(self, request: Request) -> int:
        if request.sampling.strategy == "cold":
            return 2
        if request.sampling.strategy == "beam":
            return request.sampling.beam_width
        return 1

    def submit(self, request: Request) -> int:
        sampling = request.sampling
        try:
            sampling.validate()
        except ColdServeError as exc:
            raise BadRequestError(str(exc)) from exc
        if sampling.strategy == "vanilla_cd":
            raise BadRequestError(
                "vanilla_cd needs two distinct models; the engine hosts one "
                "(use the cold strategy, or the library generate() API)"
            )
        prompt = [int(t) for t in request.prompt]
        if not prompt:
            raise BadRequestError("prompt must be non-empty")
        if sampling.strategy == "cold" and request.adapter_id is None:
            raise BadRequestError("cold requests must bind an adapter_id")
        if request.adapter_id is not None and not self.runtime.has_adapter(request.adapter_id):
            raise BadRequestError(f"unknown adapter_id {request.adapter_id}")
        if self._rows_needed(request) > self.capacity:
            raise BadRequestError(
                f"request needs {self._rows_needed(request)} rows, capacity is {self.capacity}"
            )
        max_len = getattr(self.runtime, "max_seq_len", None)
        if max_len is not None and len(prompt) + sampling.max_tokens > max_len:
            raise BadRequestError(
                f"prompt ({len(prompt)}) + max_tokens ({sampling.max_tokens}) "
                f"exceeds model max_seq_len {max_len}"
            )
        with self._queue_lock:
            state = _ActiveRequest(
                request_id=self._next_id,
                request=request,
                submitted_at=time.monotonic(),
                prng=Prng(sampling.seed),
            )
            self._next_id += 1
            self.queue.append(state)
        return state.request_id

    # -- stepping ------------------------------------------------------------

    @property
    def rows_in_use(self) -> int:
        return sum(st.rows_reserved for st in self.active)

    def step(self) -> list[Completion]:
        """Advance every active request by one token; returns what finished."""
        t0 = time.monotonic()
        if self._first_step_at is None:
            self._first_step_at = t0

        newly_admitted = set(id(st) for st in self._admit())
        prefill_logits = self._run_prefill(
            [st for st in self.active if id(st) in newly_admitted]
        )
        decode_rows = [
            row
            for st in self.active
            if st.prefilled and id(st) not in newly_admitted
            for row in st.rows
            if row.awaiting_decode
        ]
        row_logits = dict(prefill_logits)
        row_logits.update(self._run_decode(decode_rows))

        # Model passes are done; charge this step's cost to every request that
        # was processed, including the ones about to retire.
        dt = time.monotonic() - t0
        for st in self.active:
            if st.prefilled:
                st.processing_time_s += dt

        completions = []
        for st in list(self.active):
            if not st.prefilled:
                continue
            try:
                done = self._apply_strategy(
                    st, row_logits, just_prefilled=id(st) in newly_admitted
                )
            except ColdServeError as exc:
                self._retire(st, error=str(exc))
                completions.append(self.completed[-1])
                continue
            if done:
                self._retire(st)
                completions.append(self.completed[-1])
        return completions

    def _admit(self) -> list[_ActiveRequest]:
        admitted = []
        with self._queue_lock:
            while self.queue:
                head = self.queue[0]
                needed = self._rows_needed(head.request)
                if self.rows_in_use + needed > self.capacity:
                    break  # strict FCFS: the head blocks until it fits
                self.queue.pop(0)
                head.rows_reserved = needed
                self.active.append(head)
                self.admitted_count += 1
                admitted.append(head)
        return admitted

    def _run_prefill(self, admitted: list[_ActiveRequest]) -> dict[int, np.ndarray]:
        prompts, indices, rows = [], [], []
        for st in admitted:
            prompt = [int(t) for t in st.request.prompt]
            strategy = st.strategy
            if strategy == "cold":
                expert = _Row(adapter_index=st.request.adapter_id, role="expert")
                amateur = _Row(adapter_index=-1, role="amateur")
                st.rows = [expert, amateur]
            elif strategy == "beam":
                st.rows = [_Row(adapter_index=self._adapter_index(st), role="beam")]
            else:
                st.rows = [_Row(adapter_index=self._adapter_index(st), role="solo")]
            for row in st.rows:
                prompts.append(prompt)
                indices.append(row.adapter_index)
                rows.append(row)
        if not rows:
            return {}
        logits, caches = self.runtime.prefill(prompts, np.asarray(indices, dtype=np.int64))
        out: dict[int, np.ndarray] = {}
        for i, row in enumerate(rows):
            row.cache = caches[i]
            out[id(row)] = logits[i]
        for st in admitted:
            st.prefilled = True
        return out

    def _run_decode(self, rows: list[_Row]) -> dict[int, np.ndarray]:
        if not rows:
            return {}
        tokens = [row.last_token for row in rows]
        caches = [row.cache for row in rows]
        indices = np.asarray([row.adapter_index for row in rows], dtype=np.int64)
        logits = self.runtime.decode_step(tokens, caches, indices)
        for row, tok in zip(rows, tokens):
            row.fed_tokens.append(int(tok))
        return {id(row): logits[i] for i, row in enumerate(rows)}

    def _adapter_index(self, st: _ActiveRequest) -> int:
        return -1 if st.request.adapter_id is None else int(st.request.adapter_id)

    # -- strategy application --------------------------------------------------

    def _apply_strategy(
        self,
        st: _ActiveRequest,
        row_logits: dict[int, np.ndarray],
        just_prefilled: bool,
    ) -> bool:
        sampling = st.request.sampling
        strategy = st.strategy
        if strategy == "beam":
            return self._apply_beam(st, row_logits, just_prefilled)

        if strategy == "cold":
            s_e = row_logits[id(st.rows[0])]
            s_a = row_logits[id(st.rows[1])]
            token, diag = _contrast_step(s_e, s_a, sampling, st.prng)
        else:
            s_e = row_logits[id(st.rows[0])]
            if strategy == "nucleus":
                token = select_nucleus(
                    s_e, sampling.nucleus_p, st.prng, sampling.temperature
                )
            else:
                token = select_greedy(s_e)
            diag = StepDiagnostics(
                token=token,
                valid_count=int(np.count_nonzero(np.asarray(s_e, dtype=np.float64) > -np.inf)),
                expert_score=float(np.asarray(s_e, dtype=np.float64)[token]),
            )
        st.generated.append(int(token))
        st.diagnostics.append(diag)
        for row in st.rows:  # cold pairs advance in lockstep
            row.last_token = int(token)
        if token in sampling.stop_token_ids:
            return True
        return len(st.generated) >= sampling.max_tokens

    def _apply_beam(
        self,
        st: _ActiveRequest,
        row_logits: dict[int, np.ndarray],
        just_prefilled: bool,
    ) -> bool:
        sampling = st.request.sampling
        k = sampling.beam_width
        stop_ids = sampling.stop_token_ids

        if just_prefilled:
            root = st.rows[0]
            scored = beam_step([((), 0.0)], [row_logits[id(root)]], k)
            st.beams = []
            for bi, (seq, score) in enumerate(scored):
                row = root if bi == 0 else _Row(
                    adapter_index=root.adapter_index,
                    role="beam",
                    cache=_clone_cache(root.cache),
                )
                row.last_token = seq[-1]
                st.beams.append(
                    _Beam(tokens=seq, score=score, row=row, finished=seq[-1] in stop_ids)
                )
            st.rows = [b.row for b in st.beams]
        else:
            live = [b for b in st.beams if not b.finished]
            frozen = [b for b in st.beams if b.finished]
            expanded = beam_step(
                [(b.tokens, b.score) for b in live],
                [row_logits[id(b.row)] for b in live],
                k,
            )
            # Map each surviving hypothesis back to its parent row; clone the
            # parent's cache when it fathers more than one survivor.
            parent_used: dict[int, bool] = {}
            children: list[_Beam] = []
            for seq, score in expanded:
                parent = None
                for b in live:
                    if b.tokens == seq[:-1]:
                        parent = b
                        break
                if parent is None:  # pragma: no cover - beam_step only extends inputs
                    raise ColdServeError("beam survivor without a parent")
                if parent_used.get(id(parent)):
                    row = _Row(
                        adapter_index=parent.row.adapter_index,
                        role="beam",
                        cache=_clone_cache(parent.row.cache),
                        fed_tokens=list(parent.row.fed_tokens),
                    )
                else:
                    row = parent.row
                    parent_used[id(parent)] = True
                row.last_token = seq[-1]
                children.append(
                    _Beam(tokens=seq, score=score, row=row, finished=seq[-1] in stop_ids)
                )
            merged = frozen + children
            merged.sort(key=lambda b: -b.score)
            st.beams = merged[:k]
            st.rows = [b.row for b in st.beams]

        for b in st.beams:
            b.row.awaiting_decode = not b.finished
        top = st.beams[0]
        st.diagnostics.append(
            StepDiagnostics(
                token=int(top.tokens[-1]),
                valid_count=len(st.beams),
                expert_score=float(top.score),
            )
        )
        if top.finished or len(top.tokens) >= sampling.max_tokens:
            st.generated = [int(t) for t in top.tokens]
            return True
        return False

    # -- retirement & metrics --------------------------------------------------

    def _retire(self, st: _ActiveRequest, error: str | None = None) -> None:
        now = time.monotonic()
        self._last_completion_at = now
        self.active.remove(st)
        self.retired_count += 1
        tokens = list(st.generated)
        tpot = st.processing_time_s / len(tokens) if tokens else 0.0
        self.completed.append(
            Completion(
                request_id=st.request_id,
                tokens=tokens,
                diagnostics=list(st.diagnostics),
                e2e_latency_s=now - st.submitted_at,
                tpot_s=tpot,
                error=error,
            )
        )

    def drain(self) -> Metrics:
        """Step until nothing is queued or active, then aggregate."""
        while self.queue or self.active:
            self.step()
        return self.metrics()

    def metrics(self) -> Metrics:
        latencies = [c.e2e_latency_s for c in self.completed]
        total_tokens = sum(c.output_token_count for c in self.completed)
        if self.completed and self._first_step_at is not None and self._last_completion_at:
            wall = max(self._last_completion_at - self._first_step_at, 1e-12)
            tokens_per_s = total_tokens / wall
        else:
            tokens_per_s = 0.0
        return Metrics(
            per_request=list(self.completed),
            mean_latency_s=float(np.mean(latencies)) if latencies else 0.0,
            stddev_latency_s=float(np.std(latencies)) if latencies else 0.0,
            tokens_per_s=tokens_per_s,
            total_output_tokens=total_tokens,
        )
