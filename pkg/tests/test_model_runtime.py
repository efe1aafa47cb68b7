import json
import zlib

import numpy as np
import pytest

from coldserve.errors import (
    CorruptionError,
    FormatError,
    LengthError,
    ParameterError,
)
from coldserve.lora_engine import AdapterRegistry, LoraAdapter
from coldserve.model_runtime import (
    TabularLm,
    TabularRuntime,
    TransformerRuntime,
    load_model,
    make_toy_model,
    save_model,
    tabular_logits,
)
from helpers import small_config, toy_runtime


def weights_digest(weights):
    return zlib.crc32(b"".join(arr.tobytes() for _, arr in weights.named_tensors()))


class TestToyModel:
    def test_same_seed_same_bits(self):
        config = small_config()
        w1 = make_toy_model(config, seed=1)
        w2 = make_toy_model(config, seed=1)
        assert weights_digest(w1) == weights_digest(w2)

    def test_different_seed_differs(self):
        config = small_config()
        assert weights_digest(make_toy_model(config, 1)) != weights_digest(
            make_toy_model(config, 2)
        )

    def test_weights_finite_and_bounded(self):
        config = small_config()
        for _, arr in make_toy_model(config, 3).named_tensors():
            assert np.all(np.isfinite(arr))
            assert np.max(np.abs(arr)) <= 1.0


class TestModelIo:
    def test_round_trip_bitwise(self, tmp_path):
        config = small_config()
        weights = make_toy_model(config, 4)
        path = tmp_path / "model.json"
        save_model(config, weights, path)
        loaded_config, loaded = load_model(path)
        assert loaded_config == config
        for (n1, a1), (n2, a2) in zip(weights.named_tensors(), loaded.named_tensors()):
            assert n1 == n2
            assert a1.tobytes() == a2.tobytes()

    def test_wrong_tensor_length_is_corruption(self, tmp_path):
        config = small_config()
        save_model(config, make_toy_model(config, 5), tmp_path / "model.json")
        manifest = json.loads((tmp_path / "model.json").read_text())
        manifest["tensors"][0]["length"] -= 4
        (tmp_path / "model.json").write_text(json.dumps(manifest))
        with pytest.raises(CorruptionError):
            load_model(tmp_path / "model.json")

    def test_truncated_blob_is_corruption(self, tmp_path):
        config = small_config()
        save_model(config, make_toy_model(config, 6), tmp_path / "model.json")
        blob = tmp_path / "model.bin"
        blob.write_bytes(blob.read_bytes()[:-8])
        with pytest.raises(CorruptionError):
            load_model(tmp_path / "model.json")

    def test_config_shape_mismatch_is_format_error(self, tmp_path):
        config = small_config()
        save_model(config, make_toy_model(config, 7), tmp_path / "model.json")
        manifest = json.loads((tmp_path / "model.json").read_text())
        manifest["config"]["d_ff"] = 48  # blob tensors no longer match
        (tmp_path / "model.json").write_text(json.dumps(manifest))
        with pytest.raises(FormatError):
            load_model(tmp_path / "model.json")

    def test_adapter_bundle_rejected(self, tmp_path):
        from coldserve.lora_engine import save_adapter
        from helpers import identity_adapter

        save_adapter(identity_adapter(), tmp_path / "a.json")
        with pytest.raises(FormatError):
            load_model(tmp_path / "a.json")


class TestPrefill:
    def test_base_row_equals_registry_free_forward(self):
        runtime = toy_runtime(seed=8)
        bare = TransformerRuntime(runtime.config, runtime.weights, None)
        prompt = [1, 5, 9, 2]
        with_reg, _ = runtime.prefill([prompt], [-1])
        without, _ = bare.prefill([prompt], [-1])
        assert np.array_equal(with_reg, without)

    def test_contrast_pair_differs_iff_adapter_nonzero(self):
        runtime = toy_runtime(seed=9)
        prompt = [3, 1, 4]
        logits, _ = runtime.prefill([prompt, prompt], [0, -1])
        assert not np.array_equal(logits[0], logits[1])

        config = runtime.config
        zero_layers = {
            name: (
                np.zeros((config.lora_layer_dims(name)[0], 2), np.float32),
                np.zeros((2, config.lora_layer_dims(name)[1]), np.float32),
            )
            for name in config.lora_target_layers
        }
        zero_adapter = LoraAdapter(adapter_id=0, rank=2, lora_alpha=2.0, layers=zero_layers)
        zero_rt = TransformerRuntime(
            config, runtime.weights, AdapterRegistry([zero_adapter])
        )
        logits, _ = zero_rt.prefill([prompt, prompt], [0, -1])
        assert np.array_equal(logits[0], logits[1])  # zero adapter: bitwise equal

    def test_grouped_matches_sequential(self):
        runtime = toy_runtime(seed=10)
        prompts = [[1, 2, 3], [4, 5], [6, 7, 8, 9], [10]]
        idx = [0, 1, 0, -1]
        batched, _ = runtime.prefill(prompts, idx)
        for r, (prompt, ai) in enumerate(zip(prompts, idx)):
            solo, _ = runtime.prefill([prompt], [ai])
            assert np.max(np.abs(batched[r] - solo[0])) <= 1e-4

    def test_overlong_prompt(self):
        runtime = toy_runtime(seed=11, max_seq_len=8)
        with pytest.raises(LengthError):
            runtime.prefill([list(range(9))], [-1])

    def test_empty_prompt(self):
        runtime = toy_runtime(seed=11)
        with pytest.raises(LengthError):
            runtime.prefill([[]], [-1])


class TestDecode:
    def test_decode_matches_full_recompute(self):
        runtime = toy_runtime(seed=12)
        prompt = [2, 7, 1]
        logits, caches = runtime.prefill([prompt], [0])
        context = list(prompt)
        for _ in range(16):
            token = int(np.argmax(logits[0]))
            logits = runtime.decode_step([token], caches, [0])
            context.append(token)
            oracle = runtime.full_logits(context, adapter_index=0)[-1]
            assert np.max(np.abs(logits[0] - oracle)) <= 1e-4

    def test_base_path_never_touches_adapters(self):
        runtime = toy_runtime(seed=13)
        registry = runtime.registry
        logits, caches = runtime.prefill([[1, 2]], [-1])
        assert registry.rows_applied == 0
        runtime.decode_step([int(np.argmax(logits[0]))], caches, [-1])
        assert registry.rows_applied == 0

    def test_adapter_path_touches_adapters(self):
        runtime = toy_runtime(seed=13)
        runtime.prefill([[1, 2]], [0])
        assert runtime.registry.rows_applied > 0

    def test_greedy_rollout_deterministic(self):
        def rollout():
            runtime = toy_runtime(seed=14)
            logits, caches = runtime.prefill([[5, 6]], [1])
            tokens = []
            for _ in range(8):
                token = int(np.argmax(logits[0]))
                tokens.append(token)
                logits = runtime.decode_step([token], caches, [1])
            return tokens

        assert rollout() == rollout()

    def test_cache_overflow(self):
        runtime = toy_runtime(seed=15, max_seq_len=4)
        logits, caches = runtime.prefill([[1, 2, 3, 4]], [-1])
        with pytest.raises(LengthError):
            runtime.decode_step([0], caches, [-1])

    def test_causality(self):
        runtime = toy_runtime(seed=16)
        prefix = [4, 8, 15]
        extended = prefix + [16, 23]
        short = runtime.full_logits(prefix, adapter_index=0)
        long = runtime.full_logits(extended, adapter_index=0)
        assert np.array_equal(short, long[: len(prefix)])

    def test_zero_adapter_is_identity_on_decode_path(self):
        # A = 0 or B = 0 must leave the adapter row bitwise-equal to the base
        # row through the shrink/expand kernels, not just approximately.
        from helpers import small_config
        from coldserve.model_runtime import make_toy_model

        config = small_config()
        weights = make_toy_model(config, 40)
        rng = np.random.default_rng(41)
        for zero_side in ("A", "B"):
            layers = {}
            for name in config.lora_target_layers:
                d_in, d_out = config.lora_layer_dims(name)
                a = rng.uniform(-1, 1, (d_in, 3)).astype(np.float32)
                b = rng.uniform(-1, 1, (3, d_out)).astype(np.float32)
                if zero_side == "A":
                    a = np.zeros_like(a)
                else:
                    b = np.zeros_like(b)
                layers[name] = (a, b)
            adapter = LoraAdapter(adapter_id=0, rank=3, lora_alpha=3.0, layers=layers)
            runtime = TransformerRuntime(config, weights, AdapterRegistry([adapter]))
            logits, caches = runtime.prefill([[1, 2], [1, 2]], [0, -1])
            assert np.array_equal(logits[0], logits[1]), zero_side
            for _ in range(4):
                token = int(np.argmax(logits[0]))
                logits = runtime.decode_step([token, token], caches, [0, -1])
                assert np.array_equal(logits[0], logits[1]), zero_side

    def test_all_six_target_layers(self):
        # every projection accepts a LoRA delta, on both the grouped prefill
        # path and the per-row decode path
        targets = ("attn_q", "attn_k", "attn_v", "attn_o", "mlp_up", "mlp_down")
        runtime = toy_runtime(seed=19, ranks=(2, 4), lora_target_layers=targets)
        prompts = [[1, 2, 3], [4, 5]]
        idx = [0, 1]
        batched, caches = runtime.prefill(prompts, idx)
        for r, (prompt, ai) in enumerate(zip(prompts, idx)):
            solo, _ = runtime.prefill([prompt], [ai])
            assert np.max(np.abs(batched[r] - solo[0])) <= 1e-4
        contexts = [list(p) for p in prompts]
        logits = batched
        for _ in range(6):
            tokens = [int(np.argmax(logits[r])) for r in range(2)]
            logits = runtime.decode_step(tokens, caches, idx)
            for r in range(2):
                contexts[r].append(tokens[r])
        for r in range(2):
            oracle = runtime.full_logits(contexts[r], adapter_index=idx[r])[-1]
            assert np.max(np.abs(logits[r] - oracle)) <= 1e-4


class TestSession:
    def test_extension_uses_decode_and_matches_fresh_prefill(self):
        runtime = toy_runtime(seed=17)
        session = runtime.session(0)
        first = session.next_logits([1, 2, 3])
        extended = session.next_logits([1, 2, 3, 4])
        fresh = runtime.session(0).next_logits([1, 2, 3, 4])
        assert np.max(np.abs(extended - fresh)) <= 1e-4
        again = session.next_logits([1, 2, 3, 4])
        assert np.array_equal(extended, again)  # purity per step
        assert first.shape == (runtime.vocab_size,)

    def test_divergent_context_reprefills(self):
        runtime = toy_runtime(seed=18)
        session = runtime.session(None)
        session.next_logits([1, 2, 3])
        diverged = session.next_logits([1, 9])
        fresh = runtime.session(None).next_logits([1, 9])
        assert np.array_equal(diverged, fresh)

    def test_unknown_adapter(self):
        runtime = toy_runtime(seed=18)
        with pytest.raises(ParameterError):
            runtime.session(7)


class TestTabular:
    def test_order1_lookup(self):
        lm = TabularLm(
            order=1,
            table={(7,): np.array([0.0, 1.0, 2.0])},
            default_row=np.array([9.0, 9.0, 9.0]),
        )
        assert np.array_equal(tabular_logits(lm, [3, 7]), np.array([0, 1, 2], np.float32))

    def test_unseen_context_default(self):
        lm = TabularLm(order=1, table={}, default_row=np.array([1.0, 0.0]))
        assert np.array_equal(tabular_logits(lm, [5]), np.array([1.0, 0.0], np.float32))

    def test_order2_uses_last_two(self):
        lm = TabularLm(
            order=2,
            table={(1, 2): np.array([5.0, 0.0]), (2, 2): np.array([0.0, 5.0])},
            default_row=np.array([0.0, 0.0]),
        )
        assert tabular_logits(lm, [9, 1, 2])[0] == 5.0
        assert tabular_logits(lm, [1, 2, 2])[1] == 5.0

    def test_runtime_routes_by_index(self):
        base = TabularLm(order=1, table={}, default_row=np.array([1.0, 0.0]))
        expert = TabularLm(order=1, table={}, default_row=np.array([0.0, 1.0]))
        rt = TabularRuntime(base, {0: expert})
        logits, caches = rt.prefill([[1], [1]], [0, -1])
        assert logits[0][1] == 1.0 and logits[1][0] == 1.0
        step = rt.decode_step([0, 0], caches, [0, -1])
        assert step[0][1] == 1.0 and step[1][0] == 1.0
        assert caches[0] == [1, 0]
