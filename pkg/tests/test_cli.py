"""Manifest validation and the end-to-end CLI pipeline."""

import json
from pathlib import Path

import pytest

from molkv.cli import main
from molkv.config import ConfigError
from molkv.manifest import parse_manifest, parse_manifest_dict
from molkv.training import synthesize_corpus

REPO = Path(__file__).resolve().parents[1]


def tiny_doc(**model_overrides):
    model = {
        "kind": "molkv",
        "num_layers": 2,
        "hidden_size": 16,
        "ffn_size": 20,
        "vocab_size": 257,
        "num_experts": 2,
        "key_dim": 4,
        "cache_window": 4,
        "top_k": 2,
        "expert_layers": [0],
        "num_heads": 2,
    }
    model.update(model_overrides)
    return {"model": model}


class TestManifest:
    def test_shipped_published_manifest(self):
        man = parse_manifest(REPO / "manifests" / "molkv-published.json")
        m = man.model
        assert (m.hidden_size, m.ffn_size, m.num_experts, m.key_dim) == (1024, 2548, 2, 146)
        assert (m.cache_window, m.top_k) == (512, 32)
        assert m.expert_layers == tuple(range(14))
        assert man.train.seq_length == 2048 and man.train.grad_accum == 30

    def test_defaults_filled_and_echoed(self):
        man = parse_manifest_dict(tiny_doc())
        assert man.train.warmup_steps == 200
        assert man.train.betas == (0.9, 0.95)
        assert man.train.lr == 3e-4
        echo = man.echo()
        assert echo["train"]["warmup_steps"] == 200
        assert echo["model"]["expert_layers"] == [0]

    def test_unknown_key_rejected(self):
        doc = tiny_doc()
        doc["model"]["hidden_dim"] = 32
        with pytest.raises(ConfigError, match="hidden_dim"):
            parse_manifest_dict(doc)
        with pytest.raises(ConfigError, match="extra"):
            parse_manifest_dict({**tiny_doc(), "extra": 1})

    def test_missing_required_key(self):
        doc = tiny_doc()
        del doc["model"]["ffn_size"]
        with pytest.raises(ConfigError, match="ffn_size"):
            parse_manifest_dict(doc)

    def test_molkv_with_zero_top_k_rejected(self):
        with pytest.raises(ConfigError, match="top_k"):
            parse_manifest_dict(tiny_doc(top_k=0))

    def test_mole_with_key_dim_rejected(self):
        doc = tiny_doc(kind="mole", key_dim=4, cache_window=0, top_k=0)
        with pytest.raises(ConfigError, match="key_dim"):
            parse_manifest_dict(doc)

    def test_expert_layer_count_shorthand(self):
        man = parse_manifest_dict(tiny_doc(expert_layers=2))
        assert man.model.expert_layers == (0, 1)

    def test_not_json(self, tmp_path):
        p = tmp_path / "m.json"
        p.write_text("kind: molkv")
        with pytest.raises(ConfigError, match="JSON"):
            parse_manifest(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            parse_manifest(tmp_path / "absent.json")


@pytest.fixture
def workspace(tmp_path):
    """A manifest plus corpus wired to tmp_path, ready for the CLI."""
    doc = tiny_doc()
    doc["train"] = {
        "seq_length": 24,
        "batch_size": 2,
        "grad_accum": 1,
        "steps": 12,
        "warmup_steps": 2,
        "lr": 1e-3,
        "min_lr": 1e-4,
        "seed": 3,
        "dtype": "fp64",
    }
    doc["paths"] = {
        "corpus": str(tmp_path / "corpus.txt"),
        "checkpoint": str(tmp_path / "model.ckpt"),
        "store": str(tmp_path / "model.mlkv"),
        "report": str(tmp_path / "costs.jsonl"),
    }
    (tmp_path / "corpus.txt").write_bytes(synthesize_corpus(20_000, seed=2))
    manifest_path = tmp_path / "run.json"
    manifest_path.write_text(json.dumps(doc))
    return tmp_path, manifest_path


class TestPipeline:
    def test_train_export_decode_cost(self, workspace, capsys):
        tmp, manifest = workspace

        assert main(["train", "--manifest", str(manifest)]) == 0
        assert (tmp / "model.ckpt").exists()
        log = (tmp / "model.ckpt.log").read_text().strip().splitlines()
        assert len(log) == 12
        assert log[0].startswith("step=1 lr=")

        assert main(["export", "--manifest", str(manifest), "--dtype", "fp32"]) == 0
        assert (tmp / "model.mlkv").exists()

        assert main(["decode", "--manifest", str(manifest), "--prompt", "the", "--steps", "5"]) == 0
        report = [json.loads(line) for line in (tmp / "costs.jsonl").read_text().splitlines()]
        # 3 prompt tokens + 5 generated, 2 layers each
        assert len(report) == (3 + 5) * 2
        assert set(report[0]) == {"token_index", "layer", "macs", "params_loaded", "bytes_loaded", "cache_len"}
        expert_rows = [r for r in report if r["layer"] == 0]
        assert all(r["bytes_loaded"] == 2 * (16 + 4) * 4 for r in expert_rows)

        assert main(["cost", "--manifest", str(manifest)]) == 0
        out = capsys.readouterr().out
        assert "experts-only" in out

    def test_train_steps_and_seed_overrides(self, workspace):
        tmp, manifest = workspace
        assert main(["train", "--manifest", str(manifest), "--steps", "2", "--seed", "9",
                     "--out", str(tmp / "alt.ckpt")]) == 0
        log = (tmp / "alt.ckpt.log").read_text().strip().splitlines()
        assert len(log) == 2

    def test_config_error_exit_code(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps(tiny_doc(top_k=0)))
        assert main(["train", "--manifest", str(bad)]) == 2

    def test_missing_manifest_exit_code(self, tmp_path):
        assert main(["cost", "--manifest", str(tmp_path / "none.json")]) == 2

    def test_dense_decode_needs_no_store(self, tmp_path, capsys):
        doc = {
            "model": {"kind": "dense", "num_layers": 1, "hidden_size": 16, "ffn_size": 16,
                      "vocab_size": 257, "num_heads": 2},
            "train": {"seq_length": 16, "batch_size": 1, "grad_accum": 1, "steps": 2,
                      "warmup_steps": 1, "lr": 1e-3, "min_lr": 1e-4},
            "paths": {"corpus": str(tmp_path / "c.txt"), "checkpoint": str(tmp_path / "d.ckpt")},
        }
        (tmp_path / "c.txt").write_bytes(synthesize_corpus(5000, seed=1))
        manifest = tmp_path / "dense.json"
        manifest.write_text(json.dumps(doc))
        assert main(["train", "--manifest", str(manifest)]) == 0
        assert main(["decode", "--manifest", str(manifest), "--prompt", "a", "--steps", "3"]) == 0
        out = capsys.readouterr().out
        assert "params_loaded=0" in out and "params_offloaded=0" in out

    def test_fp16_export_then_decode(self, workspace):
        tmp, manifest = workspace
        assert main(["train", "--manifest", str(manifest), "--steps", "2"]) == 0
        assert main(["export", "--manifest", str(manifest), "--dtype", "fp16"]) == 0
        assert main(["decode", "--manifest", str(manifest), "--prompt", "ab", "--steps", "3"]) == 0
        report = [json.loads(line) for line in (tmp / "costs.jsonl").read_text().splitlines()]
        expert_rows = [r for r in report if r["layer"] == 0]
        assert all(r["bytes_loaded"] == 2 * (16 + 4) * 2 for r in expert_rows)  # fp16 itemsize

    def test_verify_exit_codes(self, monkeypatch, capsys):
        from molkv import cli
        from molkv.verify import CheckResult

        ok = CheckResult(name="x", passed=True, detail="", seconds=0.0)
        bad = CheckResult(name="y", passed=False, detail="boom", seconds=0.0)
        monkeypatch.setattr(cli, "run_all", lambda out=None, fast=False: [ok])
        assert main(["verify"]) == 0
        monkeypatch.setattr(cli, "run_all", lambda out=None, fast=False: [ok, bad])
        assert main(["verify"]) == 3
        capsys.readouterr()

    def test_decode_deterministic_across_runs(self, workspace, capsys):
        tmp, manifest = workspace
        main(["train", "--manifest", str(manifest), "--steps", "3"])
        main(["export", "--manifest", str(manifest)])
        main(["decode", "--manifest", str(manifest), "--prompt", "ab", "--steps", "6"])
        first = capsys.readouterr().out
        main(["decode", "--manifest", str(manifest), "--prompt", "ab", "--steps", "6"])
        second = capsys.readouterr().out
        gen1 = [l for l in first.splitlines() if l.startswith("generated:")]
        gen2 = [l for l in second.splitlines() if l.startswith("generated:")]
        assert gen1 == gen2
