import numpy as np
import pytest

from nitplab.configs import TrainConfig
from nitplab.optim import AdamW, AdamWState, adamw_step, clip_grad_norm, decays, wsd_lr
from nitplab.tensor import DimensionError, NumericError, Tensor


@pytest.fixture
def schedule():
    return TrainConfig(peak_lr=1e-3, warmup_steps=100, decay_ratio=0.2, total_steps=1000)


def test_wsd_phases(schedule):
    """Test warmup, stable and decay values of the schedule."""
    assert wsd_lr(0, schedule) == 0.0
    assert wsd_lr(50, schedule) == pytest.approx(5e-4)
    assert wsd_lr(100, schedule) == pytest.approx(1e-3)
    assert wsd_lr(500, schedule) == pytest.approx(1e-3)
    assert wsd_lr(800, schedule) == pytest.approx(1e-3)
    assert wsd_lr(900, schedule) == pytest.approx(5e-4)
    assert wsd_lr(1000, schedule) == 0.0


def test_wsd_is_continuous(schedule):
    """Test that neighbouring steps never jump by more than one ramp increment."""
    lrs = np.array([wsd_lr(s, schedule) for s in range(schedule.total_steps + 1)])
    assert np.max(np.abs(np.diff(lrs))) <= 1e-3 / 100 + 1e-15
    assert np.all(lrs >= 0.0)


def test_wsd_out_of_range(schedule):
    """Test that steps outside [0, total] are rejected."""
    with pytest.raises(ValueError):
        wsd_lr(-1, schedule)
    with pytest.raises(ValueError):
        wsd_lr(1001, schedule)


def test_warmup_must_fit():
    """Test that warmup cannot cover the whole run."""
    with pytest.raises(ValueError):
        TrainConfig(warmup_steps=10, total_steps=10)


def test_decay_applies_to_matrices_only():
    """Test which parameters receive weight decay."""
    assert decays("layers.0.attn.w_q", Tensor(np.ones((2, 2))))
    assert not decays("final_norm", Tensor(np.ones(2)))
    assert not decays("layers.0.attn_norm", Tensor(np.ones((2, 2))))


def test_zero_gradient_without_decay_is_identity():
    """Test that zero gradients and no weight decay leave parameters unchanged."""
    p = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    p.zero_grad()
    opt = AdamW({"w": p}, TrainConfig(weight_decay=0.0))
    before = p.values.copy()
    opt.step(1e-2)
    np.testing.assert_array_equal(p.values, before)
    assert opt.state.step == 1


def test_weight_decay_shrinks_matrix():
    """Test the decoupled decay factor (1 - lr·wd) under a zero gradient."""
    p = Tensor(np.ones((2, 2)), requires_grad=True)
    p.zero_grad()
    AdamW({"w": p}, TrainConfig(weight_decay=0.1)).step(0.5)
    np.testing.assert_allclose(p.values, 0.95)


def test_adamw_minimizes_scalar_quadratic():
    """Test that theta^2 reaches |theta| < 1e-3 within 500 steps at peak lr 0.1."""
    cfg = TrainConfig(peak_lr=0.1, warmup_steps=0, decay_ratio=0.8, total_steps=500, weight_decay=0.0)
    theta = Tensor(np.array([1.0]), requires_grad=True)
    opt = AdamW({"theta": theta}, cfg)
    for step in range(cfg.total_steps):
        theta.grad = 2.0 * theta.values
        opt.step(wsd_lr(step, cfg))
    assert abs(theta.values[0]) < 1e-3


def test_adamw_shape_mismatch():
    """Test that a moment of the wrong shape is reported."""
    p = Tensor(np.ones(3))
    state = AdamWState(m={"p": np.zeros(2)}, v={"p": np.zeros(2)})
    with pytest.raises(DimensionError):
        adamw_step({"p": p}, {"p": np.ones(3)}, state, 1e-3, TrainConfig())


def test_clip_below_threshold_untouched():
    """Test that a small gradient is not rescaled."""
    p = Tensor(np.zeros(2), requires_grad=True)
    p.grad = np.array([0.3, 0.4])
    assert clip_grad_norm({"p": p}, 1.0) == pytest.approx(0.5)
    np.testing.assert_array_equal(p.grad, [0.3, 0.4])


def test_clip_scales_to_max_norm():
    """Test that a large gradient is scaled to unit global norm."""
    a = Tensor(np.zeros(1), requires_grad=True)
    b = Tensor(np.zeros(1), requires_grad=True)
    a.grad = np.array([4.0 * 0.6])
    b.grad = np.array([4.0 * 0.8])
    assert clip_grad_norm({"a": a, "b": b}, 1.0) == pytest.approx(4.0)
    assert np.hypot(a.grad[0], b.grad[0]) == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose([a.grad[0], b.grad[0]], [0.6, 0.8], rtol=1e-12)


def test_clip_names_non_finite_parameter():
    """Test that a NaN gradient raises and names the parameter."""
    p = Tensor(np.zeros(2), requires_grad=True)
    p.grad = np.array([np.nan, 0.0])
    with pytest.raises(NumericError, match="bad_param"):
        clip_grad_norm({"bad_param": p}, 1.0)
