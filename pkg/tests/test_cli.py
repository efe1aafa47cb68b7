import json

import pytest

from coldserve.cli import main
from coldserve.model_runtime import load_adapter, load_model


@pytest.fixture(scope="module")
def toy_bundle(tmp_path_factory):
    out = tmp_path_factory.mktemp("bundle")
    rc = main(
        [
            "make-toy", "--out", str(out), "--seed", "9", "--num-adapters", "2",
            "--rank", "4", "--vocab-size", "32", "--d-model", "16",
            "--n-layers", "2", "--n-heads", "2", "--d-ff", "32",
            "--max-seq-len", "64",
        ]
    )
    assert rc == 0
    return out


class TestMakeToy:
    def test_same_seed_same_checksums(self, tmp_path, capsys):
        args = [
            "make-toy", "--seed", "3", "--num-adapters", "1", "--rank", "8",
            "--vocab-size", "16", "--d-model", "8", "--n-layers", "1",
            "--n-heads", "2", "--d-ff", "16", "--max-seq-len", "32",
        ]
        assert main(args + ["--out", str(tmp_path / "a")]) == 0
        first = json.loads(capsys.readouterr().out)
        assert main(args + ["--out", str(tmp_path / "b")]) == 0
        second = json.loads(capsys.readouterr().out)
        assert first["model"]["crc32"] == second["model"]["crc32"]
        assert [a["crc32"] for a in first["adapters"]] == [
            a["crc32"] for a in second["adapters"]
        ]

    def test_rank_flag_respected(self, toy_bundle):
        adapter = load_adapter(toy_bundle / "adapter_0.json")
        assert adapter.rank == 4
        manifest = json.loads((toy_bundle / "adapter_0.json").read_text())
        assert manifest["rank"] == 4

    def test_artifacts_load_cleanly(self, toy_bundle):
        config, weights = load_model(toy_bundle / "model.json")
        assert config.vocab_size == 32
        weights.validate_shapes(config)
        load_adapter(toy_bundle / "adapter_1.json")


class TestGenerate:
    def test_greedy_transcript_byte_identical(self, toy_bundle, tmp_path, capsys):
        args = [
            "generate", "5,6,7", "--model", str(toy_bundle / "model.json"),
            "--adapter", str(toy_bundle / "adapter_0.json"),
            "--strategy", "greedy", "--max-tokens", "6", "--seed", "4",
        ]
        assert main(args + ["--out", str(tmp_path / "t1.json")]) == 0
        out1 = capsys.readouterr().out
        assert main(args + ["--out", str(tmp_path / "t2.json")]) == 0
        out2 = capsys.readouterr().out
        assert out1 == out2
        assert (tmp_path / "t1.json").read_bytes() == (tmp_path / "t2.json").read_bytes()

    def test_cold_defaults_run_end_to_end(self, toy_bundle, capsys):
        rc = main(
            [
                "generate", "1,2,3", "--model", str(toy_bundle / "model.json"),
                "--adapter", str(toy_bundle / "adapter_0.json"),
                "--strategy", "cold", "--alpha", "0.1", "--beta", "0.5",
                "--max-tokens", "5", "--verbose",
            ]
        )
        assert rc == 0
        out = capsys.readouterr().out
        assert out.startswith("tokens:")
        assert "contrast=" in out

    def test_alpha_out_of_range_fails(self, toy_bundle, capsys):
        rc = main(
            [
                "generate", "1", "--model", str(toy_bundle / "model.json"),
                "--adapter", str(toy_bundle / "adapter_0.json"),
                "--strategy", "cold", "--alpha", "1.5",
            ]
        )
        assert rc != 0
        assert "alpha" in capsys.readouterr().err

    def test_cold_needs_adapter(self, toy_bundle, capsys):
        rc = main(
            [
                "generate", "1", "--model", str(toy_bundle / "model.json"),
                "--strategy", "cold",
            ]
        )
        assert rc != 0

    def test_missing_model_fails(self, capsys):
        rc = main(["generate", "1", "--model", "/nonexistent/model.json"])
        assert rc != 0


class TestValidateKernels:
    def test_default_sweep_passes(self, capsys):
        rc = main(["validate-kernels", "--seed", "1"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "validation passed" in out
        assert "max observed divergence" in out

    def test_poison_fails(self, capsys):
        rc = main(["validate-kernels", "--seed", "1", "--poison"])
        assert rc == 1

    def test_report_byte_columns(self, tmp_path):
        rc = main(["validate-kernels", "--seed", "2", "--out", str(tmp_path / "r.json")])
        assert rc == 0
        report = json.loads((tmp_path / "r.json").read_text())
        assert report["passed"] is True
        for row in report["configs"]:
            # gather intermediates scale with batch x rank x dims; the bgmv
            # path only materializes the padded (batch, r_max) buffer
            assert row["gather_bytes"] == row["gather_bytes_analytic"]
            assert row["bgmv_extra_bytes"] == row["bgmv_extra_bytes_analytic"]
            assert row["bgmv_extra_bytes"] == 4 * row["batch"] * row["rank"]
            if row["lora_rows"]:
                assert (
                    row["gather_bytes"]
                    == 4 * row["lora_rows"] * (2 * row["d"] * row["rank"] + row["rank"])
                )


class TestBench:
    def test_report_shape_and_consistency(self, tmp_path, capsys):
        rc = main(
            [
                "bench", "--seed", "1", "--max-tokens", "8", "--prompt-len", "4",
                "--requests", "2", "--out", str(tmp_path / "bench.json"),
            ]
        )
        assert rc == 0
        human = capsys.readouterr().out
        report = json.loads((tmp_path / "bench.json").read_text())

        strategies = {"greedy", "cold", "nucleus", "beam"}
        assert set(report["toy_transformer"]) == strategies
        assert set(report["disambiguation_suite"]) == strategies

        # human-readable table carries the same numbers as the JSON
        for strategy, row in report["toy_transformer"].items():
            line = next(l for l in human.splitlines() if l.strip().startswith(strategy))
            assert json.dumps(row["tokens_per_s"]) in line
            assert json.dumps(row["mean_latency_s"]) in line
            assert str(row["total_output_tokens"]) in line

        suite = report["disambiguation_suite"]
        assert (
            suite["cold"]["total_output_tokens"]
            <= suite["greedy"]["total_output_tokens"]
        )
