import numpy as np
import pytest

from shaderflow import tensor as T
from shaderflow.errors import ConfigError, DimensionError, NonFiniteError
from shaderflow.flow import (FlowConfig, FlowSample, cfm_loss, euler_step, euler_times, flow_path, initial_noise,
                             sample_euler)
from shaderflow.rng import Xoshiro256
from shaderflow.tensor import Tensor


def pair(seed=0, shape=(4, 3)):
    rng = Xoshiro256(seed)
    return Tensor(rng.normals(shape)), Tensor(rng.normals(shape))


def test_config_validation():
    assert FlowConfig().num_steps == 25
    with pytest.raises(ConfigError):
        FlowConfig(num_steps=0)
    with pytest.raises(ConfigError):
        FlowConfig(weighting="snr")


def test_path_endpoints_exact():
    x0, eps = pair()
    assert np.array_equal(flow_path(x0, eps, 0.0).data, x0.data)
    assert np.array_equal(flow_path(x0, eps, 1.0).data, eps.data)


def test_path_midpoint():
    assert flow_path(Tensor(2.0), Tensor(0.0), 0.5).item() == 1.0


def test_path_rejects_bad_t_and_shapes():
    x0, eps = pair()
    with pytest.raises(ValueError):
        flow_path(x0, eps, 1.5)
    with pytest.raises(ValueError):
        flow_path(x0, eps, -0.1)
    with pytest.raises(DimensionError):
        flow_path(x0, Tensor.zeros(2, 2), 0.5)


def test_sample_matches_path():
    x0, _ = pair()
    s = FlowSample.draw(x0, Xoshiro256(3))
    assert 0.0 <= s.t < 1.0
    assert np.array_equal(s.xt.data, flow_path(x0, s.eps, s.t).data)


def test_draw_order_is_t_then_eps():
    x0, _ = pair()
    rng = Xoshiro256(4)
    t = rng.random()
    eps = rng.normals(x0.shape)
    s = FlowSample.draw(x0, Xoshiro256(4))
    assert s.t == t and np.array_equal(s.eps.data, eps)


def oracle(x0, eps):
    return lambda x, t, c: Tensor(eps.data - x0.data)


def test_oracle_loss_is_zero():
    x0, eps = pair()
    assert cfm_loss(oracle(x0, eps), x0, None, Xoshiro256(0), eps=eps).item() == 0.0


def test_offset_loss_is_c_squared():
    x0, eps = pair()
    c = 0.3
    model = lambda x, t, cond: Tensor(eps.data - x0.data + c)  # noqa: E731
    loss = cfm_loss(model, x0, None, Xoshiro256(0), t=0.4, eps=eps).item()
    assert loss == pytest.approx(c * c, abs=1e-15)
    total = cfm_loss(model, x0, None, Xoshiro256(0), t=0.4, eps=eps, reduction="sum").item()
    assert total == pytest.approx(c * c * x0.size, abs=1e-13)


def test_loss_shape_mismatch():
    x0, eps = pair()
    with pytest.raises(DimensionError):
        cfm_loss(lambda x, t, c: Tensor.zeros(2, 2), x0, None, Xoshiro256(0), eps=eps)


def test_loss_rejects_unknown_reduction():
    x0, eps = pair()
    with pytest.raises(ConfigError):
        cfm_loss(oracle(x0, eps), x0, None, Xoshiro256(0), eps=eps, reduction="max")


def test_loss_non_negative():
    x0, _ = pair()
    rng = Xoshiro256(5)
    model = lambda x, t, c: T.mul(x, 0.5)  # noqa: E731
    for _ in range(10):
        assert cfm_loss(model, x0, None, rng).item() >= 0.0


def test_one_parameter_model_gradient():
    def loss_of(w):
        return cfm_loss(lambda x, t, c: T.matmul(x, w), x0, None, Xoshiro256(0), t=0.3, eps=eps)

    # a single scalar weight, stored as a 1 x 1 matrix acting on 1-column data
    x0, eps = pair(1, (5, 1))
    w = Tensor([[0.7]], requires_grad=True)
    T.backward(loss_of(w))
    num = T.finite_diff_grad(loss_of, Tensor([[0.7]]), 1e-5).data
    assert abs(w.grad[0, 0] - num[0, 0]) / abs(num[0, 0]) < 1e-4


def test_euler_times():
    assert np.allclose(euler_times(4), [1.0, 0.75, 0.5, 0.25])


@pytest.mark.parametrize("steps", [1, 5, 25])
def test_oracle_recovery(steps):
    x0, eps = pair(2)
    out = sample_euler(oracle(x0, eps), None, FlowConfig(num_steps=steps), x0.shape, eps)
    assert np.abs(out.data - x0.data).max() <= (1e-12 if steps == 1 else 1e-10)


def test_zero_velocity_returns_noise():
    cfg = FlowConfig(num_steps=7, seed=11)
    out = sample_euler(lambda x, t, c: Tensor.zeros(*x.shape), None, cfg, (3, 2))
    assert np.array_equal(out.data, initial_noise((3, 2), cfg).data)


def test_sampler_is_deterministic():
    cfg = FlowConfig(num_steps=5, seed=3)
    model = lambda x, t, c: T.mul(x, t)  # noqa: E731
    a = sample_euler(model, None, cfg, (4, 3))
    b = sample_euler(model, None, cfg, (4, 3))
    assert np.array_equal(a.data, b.data)


def test_sampler_records_no_tape():
    w = Tensor([1.0], requires_grad=True)
    out = sample_euler(lambda x, t, c: T.mul(w, 1.0), None, FlowConfig(num_steps=2), (1,), Tensor([1.0]))
    assert out.is_leaf and out.data[0] == 0.0


def test_non_finite_step_is_named():
    with np.errstate(over="ignore"), pytest.raises(NonFiniteError, match="step 3"):
        euler_step(Tensor([1e308]), Tensor([-1e308]), 1.0, 3)
