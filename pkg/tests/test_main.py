import argparse
import json
import sys

import pytest

from nitplab.configs import ModelConfig, ProbeConfig, RunConfig, TrainConfig
from nitplab.main import main, parse_dims


def run_cli(monkeypatch, *argv):
    monkeypatch.setattr(sys, "argv", ["nitplab", *argv])
    main()


def test_parse_dims():
    """Test the comma-separated dimension parser."""
    assert parse_dims("3,8, 32") == [3, 8, 32]
    with pytest.raises(argparse.ArgumentTypeError):
        parse_dims("3,x")
    with pytest.raises(argparse.ArgumentTypeError):
        parse_dims("1,4")


def test_no_command_prints_help(monkeypatch, capsys):
    """Test that running without a subcommand shows usage."""
    run_cli(monkeypatch)
    assert "usage" in capsys.readouterr().out


def test_flops_preset_json(monkeypatch, capsys):
    """Test machine-readable FLOPs output for a preset."""
    run_cli(monkeypatch, "flops", "--preset", "9b-moe", "--json", "--tokens", "2")
    data = json.loads(capsys.readouterr().out)
    assert data["nitp_overhead"] == 117_987_840
    assert data["arch"]["hidden_dim"] == 1280
    assert data["run_baseline_flops"] == 2 * 5_060_689_920


def test_flops_requires_a_source(monkeypatch):
    """Test that flops needs --config or --preset."""
    with pytest.raises(SystemExit):
        run_cli(monkeypatch, "flops")


def test_verify_small(monkeypatch, capsys):
    """Test the verify table on small dimensions."""
    run_cli(monkeypatch, "verify", "--dims", "3,8", "--cases", "2")
    out = capsys.readouterr().out
    assert "8/8 cases passed" in out
    assert out.count("pass=1") == 8


def test_train_probe_and_compare(monkeypatch, capsys, tmp_path):
    """Test train, probe and compare through the command line."""
    corpus = tmp_path / "corpus.txt"
    corpus.write_text("sphinx of black quartz, judge my vow. " * 12)
    run = RunConfig(
        model=ModelConfig(vocab_size=256, hidden_dim=8, num_layers=2, num_q_heads=2, num_kv_heads=1,
                          head_dim=4, dense_ffn_dim=16, max_seq_len=16),
        train=TrainConfig(warmup_steps=1, total_steps=3, batch_size=2, seq_len=8, snapshot_every=1),
        probe=ProbeConfig(num_pairs=10),
        corpus_path=str(corpus),
        output_dir=str(tmp_path / "run"),
    )
    config = tmp_path / "run.yaml"
    run.to_yaml(config)

    run_cli(monkeypatch, "--log-level", "WARNING", "train", "--config", str(config))
    final = json.loads(capsys.readouterr().out)
    assert final["step"] == 2

    run_cli(monkeypatch, "probe", "--checkpoint", str(tmp_path / "run" / "checkpoints" / "step_000003"),
            "--corpus", str(corpus), "--num-pairs", "5")
    snap = json.loads(capsys.readouterr().out)
    assert snap["step"] == 3
    assert snap["num_pairs"] == 5

    log = str(tmp_path / "run" / "metrics.jsonl")
    run_cli(monkeypatch, "compare", "--a", log, "--b", log)
    assert "final step 2" in capsys.readouterr().out


def test_command_errors_propagate(monkeypatch, tmp_path):
    """Test that a failing command re-raises after logging."""
    with pytest.raises(FileNotFoundError):
        run_cli(monkeypatch, "train", "--config", str(tmp_path / "missing.yaml"))
