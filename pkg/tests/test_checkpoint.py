import numpy as np
import pytest
import yaml

from nitplab.configs import ModelConfig, TrainConfig
from nitplab.data_management.checkpoint import (
    BLOB,
    MANIFEST,
    CheckpointError,
    load_checkpoint,
    save_checkpoint,
)
from nitplab.model import build_model
from nitplab.objectives import ProjectionHead
from nitplab.optim import AdamW


@pytest.fixture
def small_model():
    cfg = ModelConfig(vocab_size=32, hidden_dim=8, num_layers=1, num_q_heads=2, num_kv_heads=1,
                      head_dim=4, dense_ffn_dim=16, max_seq_len=8)
    return build_model(cfg)


@pytest.fixture
def trained_state(small_model):
    head = ProjectionHead.build(8, 2, seed=0)
    params = {**small_model.params, **head.params}
    opt = AdamW(params, TrainConfig(total_steps=10, warmup_steps=1))
    rng = np.random.default_rng(0)
    for p in params.values():
        p.grad = rng.normal(size=p.shape)
    opt.step(1e-3)
    return small_model, head, opt


def test_save_and_load_model_group(tmp_path, trained_state):
    """Test that parameters come back as their f32 rounding."""
    model, head, _ = trained_state
    save_checkpoint(tmp_path / "ck", 3, model.config, model.params, head.params,
                    run_config={"output_dir": "x"}, metadata={"note": "unit"})
    ckpt = load_checkpoint(tmp_path / "ck")
    assert ckpt.step == 3
    assert ckpt.model_config == model.config
    assert set(ckpt.params) == set(model.params)
    assert set(ckpt.projector) == set(head.params)
    for name, p in model.params.items():
        np.testing.assert_array_equal(ckpt.params[name], p.values.astype(np.float32).astype(np.float64))
    assert ckpt.run_config == {"output_dir": "x"}
    assert ckpt.metadata["note"] == "unit"
    assert "saved_utc" in ckpt.metadata
    assert ckpt.resume is None


def test_resume_group_is_exact(tmp_path, trained_state):
    """Test that the resume group restores binary64 parameters and moments bit-exactly."""
    model, head, opt = trained_state
    save_checkpoint(tmp_path / "ck", 1, model.config, model.params, head.params, optimizer_state=opt.state)
    ckpt = load_checkpoint(tmp_path / "ck", resume=True)
    assert ckpt.resume.adam_step == 1
    for name, p in opt.params.items():
        np.testing.assert_array_equal(ckpt.resume.params[name], p.values)
        np.testing.assert_array_equal(ckpt.resume.adam_m[name], opt.state.m[name])
        np.testing.assert_array_equal(ckpt.resume.adam_v[name], opt.state.v[name])


def test_resume_requires_resume_group(tmp_path, small_model):
    """Test that resuming from a weights-only checkpoint fails."""
    save_checkpoint(tmp_path / "ck", 0, small_model.config, small_model.params)
    with pytest.raises(CheckpointError, match="resume"):
        load_checkpoint(tmp_path / "ck", resume=True)


def test_manifest_table(tmp_path, small_model):
    """Test tensor table offsets against the blob size."""
    save_checkpoint(tmp_path / "ck", 0, small_model.config, small_model.params)
    manifest = yaml.safe_load((tmp_path / "ck" / MANIFEST).read_text())
    assert manifest["format"] == "nitplab-tensors"
    table = manifest["tensors"]
    assert table[0]["byte_offset"] == 0
    for prev, cur in zip(table, table[1:]):
        assert cur["byte_offset"] == prev["byte_offset"] + prev["byte_len"]
    assert sum(t["byte_len"] for t in table) == (tmp_path / "ck" / BLOB).stat().st_size
    assert all(t["dtype"] == "f32" for t in table)


def test_missing_and_malformed_manifest(tmp_path, small_model):
    """Test that a missing, foreign or truncated checkpoint is reported."""
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nothing")

    foreign = tmp_path / "foreign"
    foreign.mkdir()
    (foreign / MANIFEST).write_text("format: something-else\n")
    with pytest.raises(CheckpointError):
        load_checkpoint(foreign)

    save_checkpoint(tmp_path / "ck", 0, small_model.config, small_model.params)
    blob = tmp_path / "ck" / BLOB
    blob.write_bytes(blob.read_bytes()[:-4])
    with pytest.raises(CheckpointError, match="past the end"):
        load_checkpoint(tmp_path / "ck")
