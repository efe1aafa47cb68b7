"""Adapter storage and the batched multi-LoRA kernels.

The decode-stage kernels are BGMV-style: each batch row looks up its own
adapter through an index tensor (-1 = base model, no delta) and runs a
down-projection (shrink, d_in -> rank) then an up-projection with the
residual add fused in (expand, rank -> d_out). Adapters of different ranks
share one batch by zero-padding the shrink output to the registry's maximum
rank. gather_bmm_oracle is the naive reference: it copies each row's adapter
weights into contiguous buffers and batch-multiplies, tracking how many bytes
of intermediates that costs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, NamedTuple

import numpy as np

from coldserve._backends import ops
from coldserve.errors import (
    BadIndexError,
    DimensionError,
    FormatError,
    MissingLayerError,
    ParameterError,
)
from coldserve import manifest_io

__all__ = [
    "LoraAdapter",
    "AdapterRegistry",
    "normalize_indices",
    "bgmv_shrink",
    "bgmv_expand_fused",
    "lora_delta",
    "gather_bmm_oracle",
    "GatherBmmResult",
    "gather_bmm_bytes",
    "bgmv_extra_bytes",
]


@dataclass(frozen=True)
class LoraAdapter:
    """One adapter: a rank-r (A, B) pair per target layer name.

    A is d_in x r, B is r x d_out; the applied delta is
    scaling * (x @ A) @ B with scaling = lora_alpha / rank, so
    lora_alpha == rank reproduces the bare x A B update.
    """

    adapter_id: int
    rank: int
    lora_alpha: float
    layers: Mapping[str, tuple[np.ndarray, np.ndarray]]

    @property
    def scaling(self) -> float:
        return self.lora_alpha / self.rank

    def validate(self) -> None:
        if self.adapter_id < 0:
            raise ParameterError(f"adapter_id must be >= 0, got {self.adapter_id}")
        if self.rank < 1:
            raise ParameterError(f"rank must be >= 1, got {self.rank}")
        if not (np.isfinite(self.scaling) and self.scaling > 0):
            raise ParameterError(f"scaling must be finite and > 0, got {self.scaling}")
        if not self.layers:
            raise ParameterError("adapter has no target layers")
        for name, (a, b) in self.layers.items():
            if a.ndim != 2 or b.ndim != 2:
                raise DimensionError(f"layer {name!r}: A and B must be matrices")
            if a.shape[1] != self.rank or b.shape[0] != self.rank:
                raise DimensionError(
                    f"layer {name!r}: A cols {a.shape[1]} and B rows {b.shape[0]} "
                    f"must equal rank {self.rank}"
                )
            if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
                raise ParameterError(f"layer {name!r}: adapter weights must be finite")


class _PackedLayer(NamedTuple):
    a_stack: np.ndarray  # (n_adapters, d_in, r_max) zero-padded
    b_stack: np.ndarray  # (n_adapters, r_max, d_out) zero-padded
    d_in: int
    d_out: int


class AdapterRegistry:
    """Immutable ordered set of adapters sharing the same target layers.

    adapter_id must equal the adapter's position. Construction packs each
    layer's weights into padded stacks so the kernels can index adapters by
    row; the registry is then shareable across threads.
    """

    def __init__(self, adapters: list[LoraAdapter]):
        for pos, adapter in enumerate(adapters):
            adapter.validate()
            if adapter.adapter_id != pos:
                raise ParameterError(
                    f"adapter_id {adapter.adapter_id} at position {pos}; ids must be positional"
                )
        names = None
        for adapter in adapters:
            layer_names = frozenset(adapter.layers)
            if names is None:
                names = layer_names
            elif layer_names != names:
                raise ParameterError(
                    "all registered adapters must target the same layer set"
                )
        self.adapters: tuple[LoraAdapter, ...] = tuple(adapters)
        self.r_max: int = max((a.rank for a in adapters), default=0)
        self.target_layers: tuple[str, ...] = tuple(sorted(names)) if names else ()
        self.ranks = np.array([a.rank for a in adapters], dtype=np.int64)
        self.scalings = np.array([a.scaling for a in adapters], dtype=np.float32)
        self.rows_applied = 0  # instrumentation: adapter rows actually pushed through kernels
        self._packed: dict[str, _PackedLayer] = {}
        for name in self.target_layers:
            self._packed[name] = self._pack_layer(name)

    def __len__(self) -> int:
        return len(self.adapters)

    def _pack_layer(self, name: str) -> _PackedLayer:
        d_in, d_out = None, None
        for adapter in self.adapters:
            a, b = adapter.layers[name]
            if d_in is None:
                d_in, d_out = a.shape[0], b.shape[1]
            elif (a.shape[0], b.shape[1]) != (d_in, d_out):
                raise DimensionError(
                    f"layer {name!r}: adapters disagree on base dims "
                    f"({a.shape[0]}x{b.shape[1]} vs {d_in}x{d_out})"
                )
        n = len(self.adapters)
        a_stack = np.zeros((n, d_in, self.r_max), dtype=np.float32)
        b_stack = np.zeros((n, self.r_max, d_out), dtype=np.float32)
        for pos, adapter in enumerate(self.adapters):
            a, b = adapter.layers[name]
            a_stack[pos, :, : adapter.rank] = a
            b_stack[pos, : adapter.rank, :] = b
        return _PackedLayer(a_stack, b_stack, d_in, d_out)

    def packed(self, layer: str) -> _PackedLayer:
        try:
            return self._packed[layer]
        except KeyError:
            raise MissingLayerError(
                f"layer {layer!r} not in registry targets {self.target_layers}"
            ) from None

    def layer_dims(self, layer: str) -> tuple[int, int]:
        p = self.packed(layer)
        return p.d_in, p.d_out

    def inject_fault(self, layer: str) -> None:
        """Flip one packed weight; the gather oracle keeps reading the originals.

        Fault-injection hook for kernel validation sensitivity checks only.
        """
        p = self.packed(layer)
        p.a_stack[0, 0, 0] += np.float32(1.0)


def normalize_indices(idx, batch: int, num_adapters: int) -> np.ndarray:
    """Validate and coerce a per-row adapter index tensor to int64."""
    arr = np.asarray(idx, dtype=np.int64)
    if arr.ndim != 1 or arr.shape[0] != batch:
        raise DimensionError(
            f"index tensor length {arr.shape} does not match batch {batch}"
        )
    if arr.size and (arr.min() < -1 or arr.max() >= num_adapters):
        raise BadIndexError(
            f"adapter indices must lie in [-1, {num_adapters}), got {arr.tolist()}"
        )
    return arr


def _check_x(x, d_in: int, what: str) -> np.ndarray:
    m = np.ascontiguousarray(x, dtype=np.float32)
    if m.ndim != 2:
        raise DimensionError(f"{what} must be a matrix")
    if m.shape[1] != d_in:
        raise DimensionError(f"{what} has {m.shape[1]} cols, layer expects {d_in}")
    return m


def bgmv_shrink(x, registry: AdapterRegistry, layer: str, idx) -> np.ndarray:
    """Batched down-projection: row i -> x_i @ A[idx_i], zero-padded to r_max.

    Rows with index -1 come out all-zero and never touch adapter weights.
    """
    p = registry.packed(layer)
    x = _check_x(x, p.d_in, "shrink input")
    indices = normalize_indices(idx, x.shape[0], len(registry))
    active = int(np.count_nonzero(indices >= 0))
    if active == 0:
        return np.zeros((x.shape[0], registry.r_max), dtype=np.float32)
    registry.rows_applied += active
    return ops.bgmv_shrink(x, p.a_stack, registry.ranks, indices)


def bgmv_expand_fused(v, registry: AdapterRegistry, layer: str, idx, y) -> np.ndarray:
    """Batched up-projection fused with the residual add.

    Row i -> y_i + scaling_i * (v_i[:rank_i] @ B[idx_i]); rows with index -1
    are returned as a bitwise copy of y. Padding columns of v beyond a row's
    rank are never read.
    """
    p = registry.packed(layer)
    v = np.ascontiguousarray(v, dtype=np.float32)
    if v.ndim != 2 or v.shape[1] != registry.r_max:
        raise DimensionError(
            f"expand input must be (batch, r_max={registry.r_max}), got {v.shape}"
        )
    y = _check_x(y, p.d_out, "expand residual")
    if y.shape[0] != v.shape[0]:
        raise DimensionError(
            f"residual batch {y.shape[0]} != shrink batch {v.shape[0]}"
        )
    indices = normalize_indices(idx, v.shape[0], len(registry))
    active = int(np.count_nonzero(indices >= 0))
    if active == 0:
        return y.copy()
    registry.rows_applied += active
    return ops.bgmv_expand_fused(
        v, p.b_stack, registry.ranks, registry.scalings, indices, y
    )


def lora_delta(x, registry: AdapterRegistry, layer: str, idx) -> np.ndarray:
    """Full per-row delta: shrink then expand against a zero residual."""
    p = registry.packed(layer)
    v = bgmv_shrink(x, registry, layer, idx)
    zeros = np.zeros((v.shape[0], p.d_out), dtype=np.float32)
    return bgmv_expand_fused(v, registry, layer, idx, zeros)


class GatherBmmResult(NamedTuple):
    delta: np.ndarray
    intermediate_bytes: int


def gather_bmm_oracle(x, registry: AdapterRegistry, layer: str, idx) -> GatherBmmResult:
    """Reference path: gather each row's padded (A, B) into fresh contiguous
    copies, multiply with np.matmul, and count every intermediate byte.

    Kept independent of the BGMV kernels (different code and different
    accumulation order) so it can serve as their oracle. Rows with index -1
    contribute a zero delta and zero gathered bytes.
    """
    p = registry.packed(layer)
    x = _check_x(x, p.d_in, "gather input")
    indices = normalize_indices(idx, x.shape[0], len(registry))
    batch = x.shape[0]
    r_max = registry.r_max
    delta = np.zeros((batch, p.d_out), dtype=np.float32)
    nbytes = 0
    for i in range(batch):
        ai = int(indices[i])
        if ai < 0:
            continue
        adapter = registry.adapters[ai]
        a_src, b_src = adapter.layers[layer]  # gather from the originals,
        a_copy = np.zeros((p.d_in, r_max), dtype=np.float32)  # not the packed stacks
        a_copy[:, : adapter.rank] = a_src
        b_copy = np.zeros((r_max, p.d_out), dtype=np.float32)
        b_copy[: adapter.rank, :] = b_src
        v = np.matmul(x[i : i + 1], a_copy)  # (1, r_max)
        delta[i] = registry.scalings[ai] * np.matmul(v, b_copy)[0]
        nbytes += a_copy.nbytes + b_copy.nbytes + v.nbytes
    return GatherBmmResult(delta, nbytes)


def gather_bmm_bytes(lora_rows: int, d_in: int, d_out: int, r_max: int) -> int:
    """Analytic intermediate bytes for the gather path: per adapter-bound row,
    one padded A copy, one padded B copy and the (1, r_max) product."""
    return 4 * lora_rows * (d_in * r_max + r_max * d_out + r_max)


def bgmv_extra_bytes(batch: int, r_max: int) -> int:
    """Analytic extra bytes for the BGMV path: only the padded shrink output."""
    return 4 * batch * r_max


# ---------------------------------------------------------------------------
# Adapter file format


def save_adapter(adapter: LoraAdapter, manifest_path) -> int:
    """Write an adapter bundle; returns the blob CRC32."""
    adapter.validate()
    meta = {
        "kind": "adapter",
        "adapter_id": adapter.adapter_id,
        "rank": adapter.rank,
        "lora_alpha": adapter.lora_alpha,
    }
    tensors = []
    for name in sorted(adapter.layers):
        a, b = adapter.layers[name]
        tensors.append((f"{name}.A", a))
        tensors.append((f"{name}.B", b))
    return manifest_io.write_bundle(manifest_path, meta, tensors)


def load_adapter(manifest_path) -> LoraAdapter:
    meta, tensors = manifest_io.read_bundle(manifest_path)
    if meta.get("kind") != "adapter":
        raise FormatError(f"{manifest_path} is not an adapter bundle")
    try:
        adapter_id = int(meta["adapter_id"])
        rank = int(meta["rank"])
        lora_alpha = float(meta["lora_alpha"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"adapter manifest missing metadata: {exc}") from exc
    layers: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    names = {n.rsplit(".", 1)[0] for n in tensors}
    for name in names:
        try:
            a, b = tensors[f"{name}.A"], tensors[f"{name}.B"]
        except KeyError as exc:
            raise FormatError(f"adapter layer {name!r} missing {exc} tensor") from exc
        layers[name] = (a, b)
    adapter = LoraAdapter(adapter_id=adapter_id, rank=rank, lora_alpha=lora_alpha, layers=layers)
    adapter.validate()
    return adapter
