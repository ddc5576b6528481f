import numpy as np
import pytest

from ladderflow import autodiff as ad
from ladderflow.flow import (FlowSample, SamplerConfig, SamplerError,
                             euler_sample, fm_loss, guided_velocity,
                             initial_noise, make_flow_sample)
from ladderflow.rng import stream


def test_interpolant_endpoints_bit_exact():
    x0 = stream(0, "x0").normal(size=(3, 4, 4, 3)).astype(np.float32)
    rng = stream(0, "flow")
    s0 = make_flow_sample(x0, rng, t=0.0)
    assert np.array_equal(s0.x_t, x0)
    s1 = make_flow_sample(x0, stream(0, "flow"), t=1.0)
    assert np.array_equal(s1.x_t, s1.x1)


def test_velocity_target_is_noise_minus_data():
    x0 = stream(1, "x0").normal(size=(2, 4, 4, 3)).astype(np.float32)
    s = make_flow_sample(x0, stream(1, "flow"))
    assert np.array_equal(s.v_target, s.x1 - s.x0)
    assert np.all((0 <= s.t) & (s.t <= 1))


def test_interpolant_midpoint():
    x0 = np.full((1, 2, 2, 3), -1.0, dtype=np.float32)
    s = make_flow_sample(x0, stream(2, "flow"), t=0.5)
    assert np.abs(s.x_t - 0.5 * (s.x0 + s.x1)).max() < 1e-7


def test_fm_loss_zero_for_oracle_prediction():
    x0 = stream(3, "x0").normal(size=(2, 4, 4, 3)).astype(np.float32)
    s = make_flow_sample(x0, stream(3, "flow"))
    assert float(fm_loss(ad.tensor(s.v_target), s).data) == 0.0


def test_constant_velocity_single_euler_step_recovers_data():
    # exact-integration identity: x1 - 1.0 * (x1 - x0) == x0
    x0 = stream(4, "x0").uniform(-0.9, 0.9, size=(2, 4, 4, 3)).astype(np.float32)
    x1 = initial_noise(x0.shape, seed=4)
    v = x1 - x0
    out = euler_sample(lambda x, t: v, x1, SamplerConfig(steps=1, seed=4))
    assert np.abs(out - x0).max() <= 1e-5


def test_constant_velocity_any_step_count_recovers_data():
    x0 = stream(5, "x0").uniform(-0.9, 0.9, size=(1, 4, 4, 3)).astype(np.float32)
    x1 = initial_noise(x0.shape, seed=5)
    v = x1 - x0
    for steps in (2, 7, 50):
        out = euler_sample(lambda x, t: v, x1, SamplerConfig(steps=steps, seed=5))
        assert np.abs(out - x0).max() <= 1e-4


def test_partial_integration_from_t_start():
    # constant velocity from t_start: x(0) = x_init - t_start * v
    x0 = stream(12, "x0").uniform(-0.9, 0.9, size=(1, 4, 4, 3)).astype(np.float32)
    x1 = initial_noise(x0.shape, seed=12)
    v = x1 - x0
    t_start = 0.5
    x_init = ((1 - t_start) * x0 + t_start * x1).astype(np.float32)
    out = euler_sample(lambda x, t: v, x_init, SamplerConfig(steps=50, seed=12),
                       t_start=t_start)
    assert np.abs(out - x0).max() <= 1e-4
    with pytest.raises(SamplerError):
        euler_sample(lambda x, t: v, x_init, SamplerConfig(steps=4, seed=12),
                     t_start=0.0)


def test_euler_error_shrinks_with_step_halving():
    # v(x,t) = x integrates to x0 = e^{-1} x1; Euler error must drop ~2x
    x1 = initial_noise((1, 2, 2, 3), seed=6) * 0.1
    exact = x1 * np.exp(-1.0)
    errs = []
    for steps in (8, 16, 32):
        out = euler_sample(lambda x, t: x, x1, SamplerConfig(steps=steps, seed=6))
        errs.append(np.abs(out - exact).max())
    assert errs[0] > errs[1] > errs[2]
    assert errs[0] / errs[1] > 1.7 and errs[1] / errs[2] > 1.7


def test_final_output_clamped():
    x1 = np.full((1, 2, 2, 3), 0.5, dtype=np.float32)
    out = euler_sample(lambda x, t: np.full_like(x, -10.0), x1,
                       SamplerConfig(steps=4, seed=0))
    assert out.max() <= 1.0 and out.min() >= -1.0


def test_guidance_identity_at_scale_one():
    rng = stream(7, "g")
    vc = rng.normal(size=(2, 3)).astype(np.float32)
    vn = rng.normal(size=(2, 3)).astype(np.float32)
    assert guided_velocity(vc, vn, 1.0) is vc
    assert np.array_equal(guided_velocity(vc, vn, 0.0), vn)
    mixed = guided_velocity(vc, vn, 2.0)
    assert np.abs(mixed - (vn + 2.0 * (vc - vn))).max() < 1e-7


def test_guidance_requires_null_field():
    x1 = initial_noise((1, 2, 2, 3), seed=8)
    with pytest.raises(SamplerError):
        euler_sample(lambda x, t: x, x1,
                     SamplerConfig(steps=2, guidance_scale=2.0, seed=8))


def test_nonfinite_trajectory_reports_step():
    x1 = initial_noise((1, 2, 2, 3), seed=9)

    def v(x, t):
        return np.full_like(x, np.inf) if t < 0.5 else np.zeros_like(x)

    with pytest.raises(SamplerError) as exc:
        euler_sample(v, x1, SamplerConfig(steps=4, seed=9))
    assert "step" in str(exc.value)


def test_initial_noise_independent_of_batch_composition():
    solo = initial_noise((1, 4, 4, 3), seed=10, index0=2)
    batch = initial_noise((4, 4, 4, 3), seed=10, index0=0)
    assert np.array_equal(solo[0], batch[2])


def test_sampler_config_validation():
    with pytest.raises(ValueError):
        SamplerConfig(steps=0)
    with pytest.raises(ValueError):
        SamplerConfig(guidance_scale=-0.5)


def test_flow_sample_dataclass_consistency():
    x0 = stream(11, "x0").normal(size=(2, 2, 2, 3)).astype(np.float32)
    s = make_flow_sample(x0, stream(11, "flow"))
    assert isinstance(s, FlowSample)
    tb = s.t.reshape(2, 1, 1, 1).astype(np.float32)
    assert np.abs(s.x_t - ((1 - tb) * s.x0 + tb * s.x1)).max() < 1e-6
