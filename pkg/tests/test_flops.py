import pytest

from nitplab.configs import ArchSpec, FfnKind, ModelConfig, PRESETS, get_preset, load_arch_spec
from nitplab.flops import (
    format_report,
    nitp_overhead_flops,
    ntp_train_flops,
    overhead_ratio,
)


def test_9b_moe_breakdown():
    """Test the exact per-token accounting of the 9B MoE preset."""
    spec = get_preset("9b-moe")
    breakdown = ntp_train_flops(spec)
    assert breakdown.backbone_flops == 3_892_838_400
    assert breakdown.unembedding_flops == 1_167_851_520
    assert breakdown.nitp_overhead == 117_987_840
    assert breakdown.baseline_total == 5_060_689_920
    assert breakdown.overhead_ratio == pytest.approx(0.0233, abs=0.001)
    assert breakdown.inference_overhead == 0


def test_overhead_terms():
    """Test 72d² for the projector and 18d for the cosine."""
    spec = ArchSpec(hidden_dim=10, num_layers=1, vocab_size=100, ffn_kind="dense", dense_ffn_dim=40)
    assert nitp_overhead_flops(spec) == (7200, 180)


def test_dense_counts_as_single_expert():
    """Test that a dense FFN equals a k = 1 MoE with d_e = d_ffn."""
    dense = ArchSpec(hidden_dim=64, num_layers=3, vocab_size=500, ffn_kind="dense", dense_ffn_dim=256)
    moe = ArchSpec(hidden_dim=64, num_layers=3, vocab_size=500, ffn_kind="moe",
                   activated_experts=1, expert_ffn_dim=256)
    assert ntp_train_flops(dense).baseline_total == ntp_train_flops(moe).baseline_total


def test_overhead_depends_only_on_width():
    """Test that the NITP head cost ignores depth, vocabulary and expert settings."""
    base = ArchSpec(hidden_dim=256, num_layers=4, vocab_size=1000, ffn_kind="moe",
                    activated_experts=2, expert_ffn_dim=128)
    variants = [
        base.update({"num_layers": 40}),
        base.update({"vocab_size": 150_000}),
        base.update({"activated_experts": 13}),
        base.update({"expert_ffn_dim": 1408}),
    ]
    for spec in variants:
        assert ntp_train_flops(spec).nitp_overhead == ntp_train_flops(base).nitp_overhead
    wider = base.update({"hidden_dim": 512})
    assert ntp_train_flops(wider).nitp_overhead > ntp_train_flops(base).nitp_overhead
    for spec in PRESETS.values():
        assert 0.0 < overhead_ratio(spec) < 0.1


def test_zero_layer_architecture():
    """Test that L = 0 leaves only the unembedding in the baseline."""
    spec = ArchSpec(hidden_dim=8, num_layers=0, vocab_size=10, ffn_kind="dense", dense_ffn_dim=8)
    breakdown = ntp_train_flops(spec)
    assert breakdown.backbone_flops == 0
    assert breakdown.baseline_total == 6 * 10 * 8


def test_to_dict_with_tokens():
    """Test run totals when a token count is given."""
    breakdown = ntp_train_flops(get_preset("9b-moe"))
    data = breakdown.to_dict(tokens=1000)
    assert data["run_baseline_flops"] == 5_060_689_920_000
    assert data["run_nitp_flops"] == (5_060_689_920 + 117_987_840) * 1000
    assert "tokens" not in breakdown.to_dict()


def test_unknown_preset():
    """Test that an unknown preset name lists the choices."""
    with pytest.raises(KeyError, match="9b-moe"):
        get_preset("7b-mystery")


def test_arch_spec_needs_ffn_width():
    """Test that an MoE spec without d_e is rejected."""
    with pytest.raises(ValueError):
        ArchSpec(hidden_dim=8, num_layers=1, vocab_size=10, ffn_kind="moe")


def test_from_model_config():
    """Test the accounting view of a toy MoE model."""
    model = ModelConfig(ffn_kind="moe", num_experts=4, experts_per_token=2, expert_ffn_dim=32)
    spec = ArchSpec.from_model_config(model)
    assert spec.ffn_kind == FfnKind.MOE
    assert spec.activated_experts == 2
    assert spec.expert_ffn_dim == 32


def test_load_arch_spec(tmp_path):
    """Test reading an arch section and a run configuration's model section."""
    arch_file = tmp_path / "arch.yaml"
    arch_file.write_text(
        "arch:\n  hidden_dim: 1280\n  num_layers: 24\n  vocab_size: 152064\n"
        "  ffn_kind: moe\n  activated_experts: 9\n  expert_ffn_dim: 640\n"
    )
    assert load_arch_spec(arch_file) == get_preset("9b-moe")

    run_file = tmp_path / "run.yaml"
    run_file.write_text("model:\n  hidden_dim: 32\n  head_dim: 8\n  dense_ffn_dim: 64\n")
    spec = load_arch_spec(run_file)
    assert spec.hidden_dim == 32
    assert spec.dense_ffn_dim == 64

    empty = tmp_path / "other.yaml"
    empty.write_text("train:\n  seed: 1\n")
    with pytest.raises(ValueError):
        load_arch_spec(empty)


def test_format_report_lists_ratio():
    """Test the human-readable report."""
    spec = get_preset("9b-moe")
    text = format_report(spec, ntp_train_flops(spec), tokens=10)
    assert "overhead ratio" in text
    assert "2.33" in text
    assert "run NITP FLOPs" in text
