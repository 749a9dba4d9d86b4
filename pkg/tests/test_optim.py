import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bevfuse import autodiff as ad
from bevfuse.errors import UsageError
from bevfuse.optim import OneCycleAdam


def _make(total_steps=100, **kw):
    p = ad.parameter(np.array([1.0, -2.0], dtype=np.float32))
    opt = OneCycleAdam({"p": p}, total_steps, **kw)
    return p, opt


def test_zero_gradient_leaves_parameters_unchanged():
    p, opt = _make()
    before = p.data.tobytes()
    opt.step({"p": np.zeros(2, dtype=np.float32)})
    assert p.data.tobytes() == before


def test_missing_gradient_skips_parameter():
    p, opt = _make()
    before = p.data.tobytes()
    opt.step({})
    assert p.data.tobytes() == before


def test_single_step_matches_hand_formula():
    p = ad.parameter(np.array([0.5], dtype=np.float64))
    opt = OneCycleAdam({"p": p}, total_steps=10, lr_max=1e-3, beta2=0.999,
                       epsilon=1e-8, div=25.0)
    lr0, beta1_0 = opt.schedule(0)
    g = np.array([1.0])
    opt.step({"p": g})
    # fresh buffers: m_hat = v_hat = 1 after bias correction
    expected = 0.5 - lr0 * 1.0 / (np.sqrt(1.0) + 1e-8)
    np.testing.assert_allclose(p.data, [expected], rtol=1e-12)
    assert beta1_0 == 0.95


def test_schedule_endpoints_match_momentum_settings():
    _, opt = _make(total_steps=100, lr_max=1e-3,
                   momentum_base=0.85, momentum_max=0.95)
    lr0, beta1_0 = opt.schedule(0)
    assert beta1_0 == pytest.approx(0.95, abs=0)
    lr_peak, beta1_peak = opt.schedule(opt.peak_step)
    assert beta1_peak == pytest.approx(0.85, abs=0)
    assert lr_peak == pytest.approx(1e-3)
    assert lr0 == pytest.approx(1e-3 / 25.0)


@settings(deadline=None, max_examples=60)
@given(st.integers(min_value=1, max_value=500), st.integers(min_value=0, max_value=499))
def test_schedule_bounds(total, step):
    if step >= total:
        step = total - 1
    _, opt = _make(total_steps=total)
    lr, beta1 = opt.schedule(step)
    assert 0.0 <= lr <= 1e-3 + 1e-15
    assert 0.85 - 1e-12 <= beta1 <= 0.95 + 1e-12


def test_step_beyond_total_is_usage_error():
    p, opt = _make(total_steps=2)
    opt.step({"p": np.ones(2, dtype=np.float32)})
    opt.step({"p": np.ones(2, dtype=np.float32)})
    with pytest.raises(UsageError):
        opt.step({"p": np.ones(2, dtype=np.float32)})


def test_gradient_shape_mismatch_is_usage_error():
    p, opt = _make()
    with pytest.raises(UsageError):
        opt.step({"p": np.ones(3, dtype=np.float32)})


def test_momentum_cycles_down_then_up():
    _, opt = _make(total_steps=100)
    betas = [opt.schedule(s)[1] for s in range(100)]
    peak = opt.peak_step
    assert all(b2 <= b1 + 1e-12 for b1, b2 in zip(betas[:peak], betas[1:peak + 1]))
    assert all(b2 >= b1 - 1e-12 for b1, b2 in zip(betas[peak:-1], betas[peak + 1:]))
    assert betas[-1] == pytest.approx(0.95)


def test_state_roundtrip_preserves_moments():
    p, opt = _make(total_steps=10)
    opt.step({"p": np.array([0.3, -0.7], dtype=np.float32)})
    state = opt.export_state()
    p2, opt2 = _make(total_steps=10)
    p2.data = p.data.copy()
    opt2.load_state(state)
    opt.step({"p": np.array([0.1, 0.2], dtype=np.float32)})
    opt2.step({"p": np.array([0.1, 0.2], dtype=np.float32)})
    np.testing.assert_array_equal(p.data, p2.data)
