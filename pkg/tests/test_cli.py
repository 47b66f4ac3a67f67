import hashlib
import json
import os
from pathlib import Path

import pytest

from pdlkit.cli import build_config, load_config_file, main, sha256_file

FAST_FLAGS = [
    "--length", "8",
    "--sample-fraction", "1.0",
    "--embed-dim", "16",
    "--num-layers", "1",
    "--num-heads", "2",
    "--mask-fraction", "0.2",
    "--mlm-epochs", "1",
    "--mlm-batch-size", "32",
    "--h", "5",
    "--k", "3",
    "--scan-epochs", "1",
    "--scan-batch-size", "32",
    "--m", "2",
    "--bootstrap-replicates", "100",
    "--seed", "3",
]


def run(*argv):
    assert main(list(argv)) == 0


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    """A complete tiny pipeline run, shared across the module's tests."""
    out = str(tmp_path_factory.mktemp("run"))
    base = ["--out", out, *FAST_FLAGS]
    run("synth", "--days", "4", "--events-per-day", "150", *base)
    run("ingest", *base)
    run("pretrain", *base)
    run("neighbors", *base)
    run("cluster", *base)
    run("kmeans", *base)
    run("centroids", *base)
    run("rate", *base)
    run("propagate", *base)
    run("evaluate", *base)
    return Path(out)


class TestPipeline:
    def test_all_artifacts_present(self, run_dir):
        for name in (
            "synthetic.txt", "events.csv", "vocab.json", "windows.jsonl",
            "encoder.bin", "loss_trace.csv", "split.json", "sampled_ids.json",
            "embeddings.npy", "graph.jsonl", "scan_encoder.bin", "cluster_head.json",
            "assignments.jsonl", "kmeans_assignments.jsonl",
            "sessions/session.json", "cluster_labels.json",
            "propagated_windows.csv", "reannotated_events.csv",
            "metrics.json", "metrics.csv",
        ):
            assert (run_dir / name).exists(), name

    def test_manifests_written_per_stage(self, run_dir):
        stages = {p.stem for p in (run_dir / "manifests").glob("*.json")}
        assert stages >= {
            "synth", "ingest", "pretrain", "neighbors", "cluster", "kmeans",
            "centroids", "propagate", "evaluate",
        }
        blob = json.loads((run_dir / "manifests" / "pretrain.json").read_text())
        assert set(blob) == {"stage", "pdlkit_version", "config", "inputs", "outputs"}
        assert "windows.jsonl" in blob["inputs"]
        assert "encoder.bin" in blob["outputs"]
        for digest in blob["outputs"].values():
            assert len(digest) == 64

    def test_metrics_contain_both_methods(self, run_dir):
        metrics = json.loads((run_dir / "metrics.json").read_text())
        assert 0.0 <= metrics["scan"]["weighted_f1"] <= 1.0
        assert 0.0 <= metrics["kmeans"]["macro_f1"] <= 1.0
        ci = metrics["scan"]["macro_f1_bootstrap"]
        assert ci["lower95"] <= ci["mean"] <= ci["upper95"]

    def test_propagated_events_fully_labeled(self, run_dir):
        lines = (run_dir / "reannotated_events.csv").read_text().splitlines()
        header, rows = lines[0], lines[1:]
        assert header == "timestamp,sensor,value,truth_label,discovered_label"
        assert len(rows) > 500

    def test_sweep_k(self, run_dir):
        run("sweep-k", "--out", str(run_dir), "--ks", "2,3", *FAST_FLAGS)
        rows = (run_dir / "sweep_k.csv").read_text().splitlines()
        assert rows[0] == "k,macro_f1,ci_low,ci_high"
        assert len(rows) == 3
        assert rows[1].startswith("2,")
        assert rows[2].startswith("3,")

    def test_trends(self, run_dir):
        run(
            "trends", "--out", str(run_dir),
            "--period1", "2024-03-04:2024-03-05",
            "--period2", "2024-03-06:2024-03-07",
            *FAST_FLAGS,
        )
        for name in ("trends_discovered.csv", "trends_discovered.json",
                     "trends_truth.csv", "trends_truth.json"):
            assert (run_dir / name).exists()


class TestDeterminism:
    def test_rerun_is_byte_identical(self, tmp_path):
        digests = []
        for sub in ("a", "b"):
            out = str(tmp_path / sub)
            base = ["--out", out, *FAST_FLAGS]
            run("synth", "--days", "3", "--events-per-day", "120", *base)
            run("ingest", *base)
            run("pretrain", *base)
            run("neighbors", *base)
            digests.append(
                {
                    name: sha256_file(Path(out) / name)
                    for name in (
                        "synthetic.txt", "events.csv", "windows.jsonl", "vocab.json",
                        "encoder.bin", "loss_trace.csv", "split.json",
                        "embeddings.npy", "graph.jsonl",
                    )
                }
            )
        assert digests[0] == digests[1]


class TestLocking:
    def test_locked_directory_refused(self, tmp_path):
        out = tmp_path / "locked"
        out.mkdir()
        (out / ".lock").write_text("12345\n")
        with pytest.raises(SystemExit, match="locked"):
            main(["synth", "--out", str(out), "--days", "2"])

    def test_lock_released_after_stage(self, tmp_path):
        out = tmp_path / "free"
        run("synth", "--out", str(out), "--days", "2", "--events-per-day", "60", "--seed", "1")
        assert not (out / ".lock").exists()


class TestConfigFile:
    def test_key_value_parsing(self, tmp_path):
        path = tmp_path / "run.conf"
        path.write_text("k = 7\nsample_fraction = 0.5  # half\ndrop_temperature = true\n")
        values = load_config_file(path)
        assert values == {"k": "7", "sample_fraction": "0.5", "drop_temperature": "true"}

    def test_flags_override_file(self, tmp_path):
        path = tmp_path / "run.conf"
        path.write_text("k = 7\nseed = 1\n")
        import argparse

        args = argparse.Namespace(config=str(path), k=9, seed=None)
        cfg = build_config(args)
        assert cfg.k == 9      # flag wins
        assert cfg.seed == 1   # file wins over default

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "run.conf"
        path.write_text("warp_speed = 9\n")
        import argparse

        with pytest.raises(SystemExit, match="unknown config key"):
            build_config(argparse.Namespace(config=str(path)))

    def test_missing_inputs_named_in_error(self, tmp_path):
        with pytest.raises(SystemExit, match="windows.jsonl"):
            main(["pretrain", "--out", str(tmp_path)])
