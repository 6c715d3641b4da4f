import dataclasses
import math
import os
import shutil

import numpy as np
import pytest
import yaml

from nitplab import trainer as trainer_module
from nitplab.configs import ModelConfig, ObjectiveConfig, ProbeConfig, RunConfig, TrainConfig
from nitplab.data_management.checkpoint import load_checkpoint
from nitplab.data_management.corpus import CorpusError, tokenize
from nitplab.data_management.metrics_log import read_metrics
from nitplab.tensor import scale
from nitplab.trainer import NonFiniteLossError, Trainer, final_third, probe, summarize, train

TEXT = "the quick brown fox jumps over the lazy dog while five boxing wizards jump quickly. "

requires_slow = pytest.mark.skipif(os.environ.get("NITPLAB_SLOW") != "1", reason="set NITPLAB_SLOW=1 for toy training runs")


def tiny_run(output_dir, total_steps=12, **objective):
    return RunConfig(
        model=ModelConfig(vocab_size=256, hidden_dim=8, num_layers=2, num_q_heads=2, num_kv_heads=1,
                          head_dim=4, dense_ffn_dim=16, max_seq_len=16),
        objective=ObjectiveConfig(**objective),
        train=TrainConfig(peak_lr=1e-2, warmup_steps=2, total_steps=total_steps, batch_size=2, seq_len=8,
                          snapshot_every=4, checkpoint_every=5),
        probe=ProbeConfig(num_pairs=20),
        output_dir=str(output_dir),
    )


@pytest.fixture
def tokens():
    return tokenize(TEXT * 10)


def test_run_artifacts(tmp_path, tokens):
    """Test the files a run leaves behind."""
    out = tmp_path / "run"
    record = train(tiny_run(out), tokens=tokens)
    assert record.step == 11
    assert (out / "config.yaml").exists()
    assert sorted(p.name for p in (out / "checkpoints").iterdir()) == ["step_000005", "step_000010", "step_000012"]
    assert load_checkpoint(out / "checkpoints" / "step_000012").step == 12

    _, records = read_metrics(out / "metrics.jsonl")
    assert [r.step for r in records] == list(range(12))
    assert [r.step for r in records if r.has_snapshot] == [0, 4, 8, 11]
    assert records[4].num_tokens == 14
    assert records[4].num_pairs == 20
    assert all(r.nitp_loss is not None and r.cosine_alignment is not None for r in records)
    assert records[0].lr == 0.0

    summary = yaml.safe_load((out / "summary.yaml").read_text())
    assert summary["final_step"] == 11
    assert summary["final_third_effective_rank"] is not None
    assert summary["final_one_minus_s"] == pytest.approx(1.0 - records[-1].cosine_alignment)


def test_training_is_deterministic(tmp_path, tokens):
    """Test that the same configuration writes identical metrics."""
    train(tiny_run(tmp_path / "a"), tokens=tokens)
    train(tiny_run(tmp_path / "b"), tokens=tokens)
    _, a = read_metrics(tmp_path / "a" / "metrics.jsonl")
    _, b = read_metrics(tmp_path / "b" / "metrics.jsonl")
    assert [r.to_dict() for r in a] == [r.to_dict() for r in b]


def test_lambda_zero_matches_ntp_only_build(tmp_path, tokens):
    """Test that lambda = 0 trains exactly like a run without NITP machinery."""
    train(tiny_run(tmp_path / "ntp", enabled=False), tokens=tokens)
    train(tiny_run(tmp_path / "zero", nitp_lambda=0.0), tokens=tokens)
    _, ntp = read_metrics(tmp_path / "ntp" / "metrics.jsonl")
    _, zero = read_metrics(tmp_path / "zero" / "metrics.jsonl")
    for x, y in zip(ntp, zero, strict=True):
        assert (x.ntp_loss, x.total_loss, x.grad_norm) == (y.ntp_loss, y.total_loss, y.grad_norm)
        assert (x.effective_rank, x.avg_cosine) == (y.effective_rank, y.avg_cosine)
        assert x.nitp_loss is None
        assert y.nitp_loss is not None

    a = load_checkpoint(tmp_path / "ntp" / "checkpoints" / "step_000012", resume=True)
    b = load_checkpoint(tmp_path / "zero" / "checkpoints" / "step_000012", resume=True)
    assert not a.projector
    for name, values in a.resume.params.items():
        np.testing.assert_array_equal(values, b.resume.params[name], err_msg=name)


def test_resume_reproduces_uninterrupted_run(tmp_path, tokens):
    """Test that resuming from a mid-run checkpoint gives the same log and parameters."""
    full = tmp_path / "full"
    train(tiny_run(full), tokens=tokens)
    resumed = tmp_path / "resumed"
    shutil.copytree(full, resumed)
    train(tiny_run(resumed), tokens=tokens, resume_from=resumed / "checkpoints" / "step_000005")

    _, a = read_metrics(full / "metrics.jsonl")
    _, b = read_metrics(resumed / "metrics.jsonl")
    assert [r.to_dict() for r in a] == [r.to_dict() for r in b]
    ca = load_checkpoint(full / "checkpoints" / "step_000012", resume=True)
    cb = load_checkpoint(resumed / "checkpoints" / "step_000012", resume=True)
    for name in ca.resume.params:
        np.testing.assert_array_equal(ca.resume.params[name], cb.resume.params[name])
        np.testing.assert_array_equal(ca.resume.adam_v[name], cb.resume.adam_v[name])


def test_resume_at_end_has_nothing_to_train(tmp_path, tokens):
    """Test that resuming from the final checkpoint is an error."""
    out = tmp_path / "run"
    train(tiny_run(out), tokens=tokens)
    with pytest.raises(ValueError, match="Nothing to train"):
        train(tiny_run(out), tokens=tokens, resume_from=out / "checkpoints" / "step_000012")


def test_resume_rejects_other_architecture(tmp_path, tokens):
    """Test that a checkpoint of a projector-free run cannot seed a projector run."""
    out = tmp_path / "run"
    train(tiny_run(out, enabled=False), tokens=tokens)
    with pytest.raises(ValueError, match="do not match"):
        Trainer(tiny_run(tmp_path / "other"), tokens=tokens, resume_from=out / "checkpoints" / "step_000005")


def test_non_finite_loss_writes_diagnostic(tmp_path, tokens, monkeypatch):
    """Test that a non-finite loss aborts with a diagnostic checkpoint."""
    real = trainer_module.evaluate_objective

    def exploding(*args, **kwargs):
        terms = real(*args, **kwargs)
        return dataclasses.replace(terms, total=scale(terms.total, math.inf))

    monkeypatch.setattr(trainer_module, "evaluate_objective", exploding)
    out = tmp_path / "run"
    with pytest.raises(NonFiniteLossError):
        train(tiny_run(out), tokens=tokens)
    assert (out / "checkpoints" / "diagnostic_step_0" / "manifest.yaml").exists()


def test_missing_corpus(tmp_path):
    """Test that a run without tokens or corpus path fails."""
    with pytest.raises(CorpusError):
        Trainer(tiny_run(tmp_path / "run"))


def test_generic_regularizer_run_has_no_projector(tmp_path, tokens):
    """Test the regularizer control trains without a projection head."""
    out = tmp_path / "run"
    record = train(tiny_run(out, total_steps=4, loss_family="generic_cosine_reg"), tokens=tokens)
    assert record.nitp_loss is not None
    assert record.cosine_alignment is None
    assert not load_checkpoint(out / "checkpoints" / "step_000004").projector


def test_moe_run_logs_router_entropy(tmp_path, tokens):
    """Test that MoE runs report one router entropy per layer."""
    run = tiny_run(tmp_path / "moe", total_steps=3).update(
        {"model": {"ffn_kind": "moe", "num_experts": 3, "experts_per_token": 2, "expert_ffn_dim": 4}}
    )
    record = train(run, tokens=tokens)
    assert len(record.router_entropy) == 2
    assert all(0.0 <= h <= math.log(3) + 1e-12 for h in record.router_entropy)


def test_summarize_and_final_third(tmp_path, tokens):
    """Test the summary quantities on a real log."""
    assert final_third([]) == []
    assert final_third(list(range(7))) == [4, 5, 6]
    with pytest.raises(ValueError):
        summarize([])
    out = tmp_path / "run"
    train(tiny_run(out), tokens=tokens)
    _, records = read_metrics(out / "metrics.jsonl")
    summary = summarize(records)
    snaps = [r for r in records if r.has_snapshot][-2:]
    assert summary["final_third_effective_rank"] == pytest.approx(np.mean([r.effective_rank for r in snaps]))
    assert summary["final_ntp_loss"] == records[-1].ntp_loss


def test_probe_checkpoint(tmp_path, tokens):
    """Test a one-off snapshot of a saved checkpoint."""
    out = tmp_path / "run"
    train(tiny_run(out), tokens=tokens)
    corpus = tmp_path / "corpus.txt"
    corpus.write_text(TEXT * 10)
    snap = probe(out / "checkpoints" / "step_000012", corpus, ProbeConfig(num_pairs=10), batch_size=2, seq_len=8)
    assert snap.step == 12
    assert snap.num_tokens == 14
    assert snap.num_pairs == 10


def toy_corpus(size: int, seed: int) -> np.ndarray:
    """Byte stream from a fixed word list, long enough for the slow runs."""
    words = TEXT.split() + ["lorem", "ipsum", "vector", "matrix", "token", "layer", "signal"]
    rng = np.random.default_rng(seed)
    text = " ".join(rng.choice(words, size=size // 5))
    return tokenize(text)


def matched_run(output_dir, seed, total_steps, **objective):
    return RunConfig(
        model=ModelConfig(vocab_size=256, hidden_dim=64, num_layers=2, num_q_heads=4, num_kv_heads=2,
                          head_dim=16, dense_ffn_dim=256, max_seq_len=64, seed=seed),
        objective=ObjectiveConfig(**objective),
        train=TrainConfig(total_steps=total_steps, batch_size=8, seq_len=64, seed=seed, snapshot_every=50,
                          log_every=10, checkpoint_every=total_steps),
        output_dir=str(output_dir),
    )


@pytest.mark.slow
@requires_slow
def test_lambda_zero_full_run_identity(tmp_path):
    """Test the lambda = 0 identity over a 500-step training log."""
    tokens = toy_corpus(200_000, 0)
    train(matched_run(tmp_path / "ntp", 0, 500, enabled=False), tokens=tokens)
    train(matched_run(tmp_path / "zero", 0, 500, nitp_lambda=0.0), tokens=tokens)
    _, ntp = read_metrics(tmp_path / "ntp" / "metrics.jsonl")
    _, zero = read_metrics(tmp_path / "zero" / "metrics.jsonl")
    assert [(r.step, r.ntp_loss, r.total_loss, r.grad_norm) for r in ntp] == \
        [(r.step, r.ntp_loss, r.total_loss, r.grad_norm) for r in zero]


@pytest.mark.slow
@requires_slow
def test_nitp_spreads_final_representations(tmp_path):
    """Test the directional effect of NITP on matched toy runs averaged over seeds."""
    steps = int(os.environ.get("NITPLAB_SLOW_STEPS", "3000"))
    ranks = {"ntp": [], "nitp": []}
    cosines = {"ntp": [], "nitp": []}
    losses = {"ntp": [], "nitp": []}
    one_minus_s = []
    for seed in range(3):
        tokens = toy_corpus(1_000_000, seed)
        for arm, objective in (("ntp", {"enabled": False}), ("nitp", {})):
            out = tmp_path / f"{arm}_{seed}"
            train(matched_run(out, seed, steps, **objective), tokens=tokens)
            _, records = read_metrics(out / "metrics.jsonl")
            summary = summarize(records)
            ranks[arm].append(summary["final_third_effective_rank"])
            cosines[arm].append(summary["final_third_avg_cosine"])
            losses[arm].append(summary["final_ntp_loss"])
            if arm == "nitp":
                assert summary["final_third_min_alignment"] > 0.0
                one_minus_s.append(summary["final_one_minus_s"])
            early = [r for r in records if r.step >= 200]
            assert early[0].ntp_loss < math.log(256)
    print(f"effective rank {ranks}, avg cosine {cosines}, final ntp loss {losses}, final 1-s {one_minus_s}")
    assert np.mean(ranks["nitp"]) >= np.mean(ranks["ntp"])
    assert np.mean(cosines["nitp"]) <= np.mean(cosines["ntp"])
    assert np.mean(losses["nitp"]) <= np.mean(losses["ntp"]) + 0.05
