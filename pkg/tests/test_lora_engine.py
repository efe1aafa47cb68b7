import numpy as np
import pytest

from coldserve.errors import (
    BadIndexError,
    CorruptionError,
    DimensionError,
    MissingLayerError,
    ParameterError,
)
from coldserve.lora_engine import (
    AdapterRegistry,
    LoraAdapter,
    bgmv_expand_fused,
    bgmv_extra_bytes,
    bgmv_shrink,
    gather_bmm_bytes,
    gather_bmm_oracle,
    load_adapter,
    lora_delta,
    save_adapter,
)
from helpers import identity_adapter, random_registry


def per_row_matvec_oracle(x, registry, layer, idx):
    """Naive float64 per-row reference for shrink."""
    out = np.zeros((x.shape[0], registry.r_max), dtype=np.float64)
    for i, ai in enumerate(idx):
        if ai < 0:
            continue
        a, _ = registry.adapters[ai].layers[layer]
        out[i, : a.shape[1]] = x[i].astype(np.float64) @ a.astype(np.float64)
    return out


class TestShrink:
    def test_identity_adapter(self):
        registry = AdapterRegistry([identity_adapter(dim=2)])
        out = bgmv_shrink(np.array([[1.0, 2.0]], np.float32), registry, "proj", [0])
        assert np.array_equal(out, np.array([[1.0, 2.0]], np.float32))

    def test_base_row_is_zero(self):
        registry = AdapterRegistry([identity_adapter(dim=2)])
        x = np.array([[3.0, -4.0]], np.float32)
        out = bgmv_shrink(x, registry, "proj", [-1])
        assert np.array_equal(out, np.zeros((1, 2), np.float32))

    def test_matches_per_row_oracle(self):
        rng = np.random.default_rng(3)
        registry = random_registry(rng, ranks=(4, 8), d_in=24, d_out=16)
        x = rng.uniform(-1, 1, (8, 24)).astype(np.float32)
        idx = np.array([0, 1, -1, 0, 1, 1, -1, 0], dtype=np.int64)
        got = bgmv_shrink(x, registry, "proj", idx)
        want = per_row_matvec_oracle(x, registry, "proj", idx)
        assert np.max(np.abs(got - want)) <= 1e-5

    def test_unknown_layer(self):
        registry = AdapterRegistry([identity_adapter()])
        with pytest.raises(MissingLayerError):
            bgmv_shrink(np.ones((1, 2), np.float32), registry, "nope", [0])

    def test_bad_index(self):
        registry = AdapterRegistry([identity_adapter()])
        with pytest.raises(BadIndexError):
            bgmv_shrink(np.ones((1, 2), np.float32), registry, "proj", [1])
        with pytest.raises(BadIndexError):
            bgmv_shrink(np.ones((1, 2), np.float32), registry, "proj", [-2])

    def test_dim_mismatch(self):
        registry = AdapterRegistry([identity_adapter(dim=2)])
        with pytest.raises(DimensionError):
            bgmv_shrink(np.ones((1, 3), np.float32), registry, "proj", [0])


class TestExpandFused:
    def test_identity_expand_plus_residual(self):
        registry = AdapterRegistry([identity_adapter(dim=2)])
        v = np.array([[1.0, 2.0]], np.float32)
        y = np.array([[1.0, 1.0]], np.float32)
        out = bgmv_expand_fused(v, registry, "proj", [0], y)
        assert np.array_equal(out, np.array([[2.0, 3.0]], np.float32))

    def test_base_row_bitwise_unchanged(self):
        rng = np.random.default_rng(4)
        registry = random_registry(rng, ranks=(4,), d_in=8, d_out=8)
        v = rng.uniform(-1, 1, (3, 4)).astype(np.float32)
        y = rng.uniform(-1, 1, (3, 8)).astype(np.float32)
        out = bgmv_expand_fused(v, registry, "proj", [-1, 0, -1], y)
        assert out[0].tobytes() == y[0].tobytes()
        assert out[2].tobytes() == y[2].tobytes()

    def test_fused_equals_unfused_plus_add(self):
        rng = np.random.default_rng(5)
        registry = random_registry(rng, ranks=(8, 8), d_in=16, d_out=24)
        x = rng.uniform(-1, 1, (16, 16)).astype(np.float32)
        idx = rng.integers(-1, 2, 16).astype(np.int64)
        y = rng.uniform(-1, 1, (16, 24)).astype(np.float32)
        v = bgmv_shrink(x, registry, "proj", idx)
        fused = bgmv_expand_fused(v, registry, "proj", idx, y)
        zeros = np.zeros_like(y)
        unfused = bgmv_expand_fused(v, registry, "proj", idx, zeros) + y
        assert np.max(np.abs(fused - unfused)) <= 1e-6

    def test_padding_columns_never_read(self):
        # Poison the shrink padding with NaN; expand must only read [0, rank).
        rng = np.random.default_rng(6)
        registry = random_registry(rng, ranks=(2, 6), d_in=8, d_out=8)
        x = rng.uniform(-1, 1, (4, 8)).astype(np.float32)
        idx = np.array([0, 1, 0, -1], dtype=np.int64)
        y = rng.uniform(-1, 1, (4, 8)).astype(np.float32)
        v = bgmv_shrink(x, registry, "proj", idx)
        clean = bgmv_expand_fused(v, registry, "proj", idx, y)
        poisoned = v.copy()
        for i, ai in enumerate(idx):
            r = registry.ranks[ai] if ai >= 0 else 0
            poisoned[i, r:] = np.nan
        out = bgmv_expand_fused(poisoned, registry, "proj", idx, y)
        assert np.array_equal(out, clean)


class TestGatherOracle:
    def test_identity_single_row(self):
        registry = AdapterRegistry([identity_adapter(dim=2)])
        x = np.array([[0.5, -0.25]], np.float32)
        result = gather_bmm_oracle(x, registry, "proj", [0])
        assert np.allclose(result.delta, x)

    def test_all_base_rows(self):
        registry = AdapterRegistry([identity_adapter(dim=2)])
        x = np.ones((4, 2), np.float32)
        result = gather_bmm_oracle(x, registry, "proj", [-1, -1, -1, -1])
        assert np.array_equal(result.delta, np.zeros((4, 2), np.float32))
        assert result.intermediate_bytes == 0

    def test_bgmv_composition_agrees(self):
        rng = np.random.default_rng(7)
        registry = random_registry(rng, ranks=(4, 8, 16), d_in=64, d_out=48)
        x = rng.uniform(-1, 1, (12, 64)).astype(np.float32)
        idx = rng.integers(-1, 3, 12).astype(np.int64)
        fast = lora_delta(x, registry, "proj", idx)
        oracle = gather_bmm_oracle(x, registry, "proj", idx)
        assert np.max(np.abs(fast - oracle.delta)) <= 1e-5

    def test_byte_accounting_matches_analytic(self):
        rng = np.random.default_rng(8)
        registry = random_registry(rng, ranks=(8, 16), d_in=32, d_out=40)
        x = rng.uniform(-1, 1, (10, 32)).astype(np.float32)
        idx = np.array([0, 1, -1, 1, 0, -1, -1, 1, 0, 1], dtype=np.int64)
        lora_rows = int(np.count_nonzero(idx >= 0))
        result = gather_bmm_oracle(x, registry, "proj", idx)
        assert result.intermediate_bytes == gather_bmm_bytes(
            lora_rows, 32, 40, registry.r_max
        )
        v = bgmv_shrink(x, registry, "proj", idx)
        assert v.nbytes == bgmv_extra_bytes(10, registry.r_max)


class TestLoraDelta:
    def test_identity(self):
        registry = AdapterRegistry([identity_adapter(dim=3)])
        x = np.array([[1.0, 2.0, 3.0]], np.float32)
        assert np.allclose(lora_delta(x, registry, "proj", [0]), x)

    def test_all_base(self):
        registry = AdapterRegistry([identity_adapter(dim=3)])
        x = np.ones((2, 3), np.float32)
        out = lora_delta(x, registry, "proj", [-1, -1])
        assert np.array_equal(out, np.zeros((2, 3), np.float32))

    def test_batch_permutation_equivariance(self):
        rng = np.random.default_rng(9)
        registry = random_registry(rng, ranks=(2, 8), d_in=20, d_out=12)
        x = rng.uniform(-1, 1, (9, 20)).astype(np.float32)
        idx = rng.integers(-1, 2, 9).astype(np.int64)
        perm = rng.permutation(9)
        out = lora_delta(x, registry, "proj", idx)
        out_perm = lora_delta(x[perm], registry, "proj", idx[perm])
        assert np.array_equal(out_perm, out[perm])

    def test_heterogeneous_rank_sweep_matches_oracle(self):
        rng = np.random.default_rng(10)
        for ranks in [(1,), (1, 4), (4, 8, 16), (16, 64)]:
            registry = random_registry(rng, ranks=ranks, d_in=48, d_out=48)
            batch = int(rng.integers(1, 32))
            x = rng.uniform(-1, 1, (batch, 48)).astype(np.float32)
            idx = rng.integers(-1, len(ranks), batch).astype(np.int64)
            fast = lora_delta(x, registry, "proj", idx)
            oracle = gather_bmm_oracle(x, registry, "proj", idx)
            assert np.max(np.abs(fast - oracle.delta)) <= 1e-5


class TestRegistry:
    def test_positional_id_enforced(self):
        with pytest.raises(ParameterError):
            AdapterRegistry([identity_adapter(adapter_id=1)])

    def test_layer_sets_must_match(self):
        a = identity_adapter(adapter_id=0, layer="proj")
        b = identity_adapter(adapter_id=1, layer="other")
        with pytest.raises(ParameterError):
            AdapterRegistry([a, b])

    def test_r_max(self):
        rng = np.random.default_rng(20)
        registry = random_registry(rng, ranks=(4, 16, 8), d_in=8, d_out=8)
        assert registry.r_max == 16

    def test_empty_registry(self):
        registry = AdapterRegistry([])
        assert registry.r_max == 0
        assert len(registry) == 0

    def test_rank_must_be_positive(self):
        eye = np.eye(2, dtype=np.float32)
        bad = LoraAdapter(adapter_id=0, rank=0, lora_alpha=1.0, layers={"proj": (eye, eye)})
        with pytest.raises(ParameterError):
            AdapterRegistry([bad])

    def test_inject_fault_only_disturbs_packed(self):
        rng = np.random.default_rng(21)
        registry = random_registry(rng, ranks=(4, 4), d_in=16, d_out=16)
        x = rng.uniform(-1, 1, (4, 16)).astype(np.float32)
        idx = np.array([0, 0, 1, -1], dtype=np.int64)
        before = gather_bmm_oracle(x, registry, "proj", idx).delta
        registry.inject_fault("proj")
        after_oracle = gather_bmm_oracle(x, registry, "proj", idx).delta
        assert np.array_equal(before, after_oracle)  # oracle reads originals
        fast = lora_delta(x, registry, "proj", idx)
        assert np.max(np.abs(fast - after_oracle)) > 1e-5


class TestAdapterIo:
    def test_round_trip_bitwise(self, tmp_path):
        rng = np.random.default_rng(22)
        registry = random_registry(rng, ranks=(4,), d_in=8, d_out=8)
        adapter = registry.adapters[0]
        path = tmp_path / "adapter.json"
        save_adapter(adapter, path)
        loaded = load_adapter(path)
        assert loaded.adapter_id == adapter.adapter_id
        assert loaded.rank == adapter.rank
        assert loaded.lora_alpha == adapter.lora_alpha
        for name, (a, b) in adapter.layers.items():
            la, lb = loaded.layers[name]
            assert a.tobytes() == la.tobytes()
            assert b.tobytes() == lb.tobytes()

    def test_truncated_blob_is_corruption(self, tmp_path):
        adapter = identity_adapter()
        path = tmp_path / "adapter.json"
        save_adapter(adapter, path)
        blob = tmp_path / "adapter.bin"
        blob.write_bytes(blob.read_bytes()[:-4])
        with pytest.raises(CorruptionError):
            load_adapter(path)

    def test_flipped_byte_is_corruption(self, tmp_path):
        adapter = identity_adapter()
        path = tmp_path / "adapter.json"
        save_adapter(adapter, path)
        blob = tmp_path / "adapter.bin"
        raw = bytearray(blob.read_bytes())
        raw[0] ^= 0xFF
        blob.write_bytes(bytes(raw))
        with pytest.raises(CorruptionError):
            load_adapter(path)
