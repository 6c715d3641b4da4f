from pathlib import Path

import pytest
from pydantic import ValidationError

from nitplab.configs import (
    ConfigManager,
    LossFamily,
    ModelConfig,
    ObjectiveConfig,
    RunConfig,
    TemporalShift,
    default_target_layer,
)

REPO_CONFIGS = Path(__file__).resolve().parent.parent / "configs"


@pytest.fixture
def sample_config_path(tmp_path):
    config_content = """
model:
  hidden_dim: 32
  num_layers: 5
  head_dim: 8
  dense_ffn_dim: 64
objective:
  lambda: 0.8
  loss_family: smooth_l1
train:
  total_steps: 20
  warmup_steps: 2
  seq_len: 16
corpus_path: corpus.txt
output_dir: runs/sample
"""
    config_file = tmp_path / "run.yaml"
    config_file.write_text(config_content)
    return config_file


def test_load_yaml(sample_config_path):
    """Test loading a partial run configuration with defaults filled in."""
    run = RunConfig.from_yaml(sample_config_path)
    assert run.model.num_layers == 5
    assert run.objective.nitp_lambda == 0.8
    assert run.objective.loss_family == LossFamily.SMOOTH_L1
    assert run.objective.temporal_shift == TemporalShift.NEXT_TOKEN
    assert run.train.batch_size == 8
    assert run.target_layer == 1


def test_repository_configs_load():
    """Test that the shipped run configurations validate."""
    for name in ("default_config.yaml", "moe_run.yaml"):
        run = ConfigManager(REPO_CONFIGS).load_config(name)
        assert run.model.vocab_size >= 256


def test_unknown_key_fails_closed(tmp_path):
    """Test that a misspelled key is a validation error."""
    path = tmp_path / "bad.yaml"
    path.write_text("objective:\n  lamda: 0.5\n")
    with pytest.raises(ValidationError):
        RunConfig.from_yaml(path)


def test_empty_yaml(tmp_path):
    """Test that an empty file is refused."""
    path = tmp_path / "empty.yaml"
    path.write_text("")
    with pytest.raises(ValueError):
        RunConfig.from_yaml(path)


def test_lambda_alias_round_trip(tmp_path):
    """Test that lambda is written in file spelling and read back."""
    run = RunConfig(objective=ObjectiveConfig(nitp_lambda=0.5))
    assert run.to_dict()["objective"]["lambda"] == 0.5
    path = tmp_path / "out.yaml"
    run.to_yaml(path)
    assert RunConfig.from_yaml(path) == run


def test_negative_lambda_rejected():
    """Test that lambda must be non-negative."""
    with pytest.raises(ValidationError):
        ObjectiveConfig(nitp_lambda=-0.1)


def test_default_target_layer():
    """Test the depth-based default source layer."""
    assert default_target_layer(1) == 1
    assert default_target_layer(2) == 1
    assert default_target_layer(10) == 2
    assert default_target_layer(24) == 5
    assert ObjectiveConfig(target_layer=3).resolve_target_layer(4) == 3
    with pytest.raises(ValueError):
        ObjectiveConfig(target_layer=5).resolve_target_layer(4)


def test_cross_field_validation():
    """Test the run-level consistency checks."""
    with pytest.raises(ValidationError, match="target_layer"):
        RunConfig(objective=ObjectiveConfig(target_layer=3))
    with pytest.raises(ValidationError, match="max_seq_len"):
        RunConfig(model=ModelConfig(max_seq_len=32))
    with pytest.raises(ValidationError, match="vocab_size"):
        RunConfig(model=ModelConfig(vocab_size=100))


def test_model_head_checks():
    """Test grouped-query head and routing constraints."""
    with pytest.raises(ValidationError):
        ModelConfig(num_q_heads=3, num_kv_heads=2, head_dim=16, hidden_dim=48)
    with pytest.raises(ValidationError):
        ModelConfig(num_q_heads=4, head_dim=8, hidden_dim=64)
    with pytest.raises(ValidationError):
        ModelConfig(ffn_kind="moe", num_experts=2, experts_per_token=3)


def test_update_is_nested_and_immutable():
    """Test that update returns a new validated config."""
    run = RunConfig()
    updated = run.update({"objective": {"nitp_lambda": 0.0}, "train": {"seed": 3}})
    assert updated.objective.nitp_lambda == 0.0
    assert updated.train.seed == 3
    assert run.objective.nitp_lambda == 1.0
    assert updated.model == run.model
    with pytest.raises(ValidationError):
        run.update({"train": {"batch_size": 0}})


def test_config_manager(tmp_path, sample_config_path):
    """Test load, update, save and the run-directory copy."""
    manager = ConfigManager(tmp_path)
    with pytest.raises(RuntimeError):
        manager.save_config(tmp_path / "x.yaml")
    with pytest.raises(FileNotFoundError):
        manager.load_config("missing.yaml")

    manager.load_config("run.yaml")
    run = manager.update_config({"output_dir": str(tmp_path / "out")})
    saved = manager.save_config(tmp_path / "saved" / "copy.yaml")
    assert RunConfig.from_yaml(saved) == run

    written = manager.write_run_config(run)
    assert written == tmp_path / "out" / "config.yaml"
    assert RunConfig.from_yaml(written) == run


def test_packaged_default_config(tmp_path):
    """Test that the installed default is found when the config directory lacks it."""
    run = ConfigManager(tmp_path).load_config()
    assert run == ConfigManager(REPO_CONFIGS).load_config("default_config.yaml")
