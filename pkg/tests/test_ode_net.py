import numpy as np
import pytest

from odemri.errors import ShapeMismatchError
from odemri.gradcheck import check_network_gradients
from odemri.nn_blocks import BlockLayout, conv2d_forward, ConvParams, dynamics_f, dynamics_f_backward
from odemri.ode_net import (
    ConvDynamics,
    IntegratorConfig,
    NetworkConfig,
    block_backward,
    block_forward,
    count_params,
    euler_step,
    init_params,
    integrate_weights,
    network_backward,
    network_forward,
    weight_dynamics_w,
)
from odemri.tensor_core import ComplexImage

from conftest import max_rel_err, numeric_grad, random_image


class LinearDynamics:
    """f(L) = L, independent of theta."""

    def forward(self, L, theta):
        return np.array(L, copy=True), None

    def backward(self, cache, grad_out):
        return grad_out, np.zeros(1)


# ---- weight dynamics


def test_frozen_weights(rng):
    theta0 = rng.standard_normal(10)
    for th in integrate_weights(theta0, (0.0, 0.0), IntegratorConfig(4)):
        np.testing.assert_array_equal(th, theta0)
    assert not weight_dynamics_w(theta0, (0.0, 0.0)).any()


def test_constant_weight_flow(rng):
    theta0 = rng.standard_normal(10)
    traj = integrate_weights(theta0, (0.0, 1.0), IntegratorConfig(4))
    for k, th in enumerate(traj):
        np.testing.assert_allclose(th, theta0 + 0.25 * k, atol=1e-15)


def test_exponential_weight_flow(rng):
    theta0 = rng.standard_normal(10)
    final = integrate_weights(theta0, (1.0, 0.0), IntegratorConfig(4))[-1]
    assert 1.25**4 == 2.44140625
    assert np.max(np.abs(final - 2.44140625 * theta0)) <= 1e-14 * np.max(np.abs(theta0))


# ---- Euler step


def test_euler_step_identities(rng):
    layout = BlockLayout(4)
    dyn = ConvDynamics(layout, "relu")
    L = rng.standard_normal((1, 4, 6, 6))
    np.testing.assert_array_equal(euler_step(L, np.zeros(layout.size), 0.25, dyn), L)
    np.testing.assert_array_equal(euler_step(L, layout.init(rng), 0.0, dyn), L)


def test_euler_step_random(rng):
    layout = BlockLayout(4)
    theta = layout.init(rng)
    L = rng.standard_normal((1, 4, 6, 6))
    out = euler_step(L, theta, 0.3, ConvDynamics(layout, "tanh"))
    f, _ = dynamics_f(L, theta, layout, "tanh")
    assert np.max(np.abs((out - L) - 0.3 * f)) < 1e-14


# ---- blocks


def test_block_k1_is_resnet_update(rng):
    layout = BlockLayout(4)
    theta = layout.init(rng)
    L = rng.standard_normal((2, 4, 6, 6))
    out, _ = block_forward(L, theta, np.zeros(2), IntegratorConfig(1), ConvDynamics(layout, "relu"))
    f, _ = dynamics_f(L, theta, layout, "relu")
    np.testing.assert_array_equal(out, L + f)


def test_block_identity_flow(rng):
    layout = BlockLayout(4)
    L = rng.standard_normal((1, 4, 6, 6))
    out, _ = block_forward(L, np.zeros(layout.size), np.zeros(2), IntegratorConfig(4), ConvDynamics(layout, "relu"))
    np.testing.assert_array_equal(out, L)


def test_block_linear_surrogate(rng):
    L = rng.standard_normal((1, 2, 3, 3))
    out, _ = block_forward(L, np.zeros(1), None, IntegratorConfig(4), LinearDynamics())
    np.testing.assert_allclose(out, 2.44140625 * L, rtol=1e-15, atol=0)


def test_block_backward_zero_upstream(rng):
    layout = BlockLayout(4)
    L = rng.standard_normal((1, 4, 6, 6))
    _, tape = block_forward(L, layout.init(rng), np.array([0.3, -0.1]), IntegratorConfig(3), ConvDynamics(layout, "tanh"))
    gL, gt, gp = block_backward(tape, np.zeros_like(L))
    assert not gL.any() and not gt.any() and not gp.any()


def test_block_backward_k1_is_resnet_backprop(rng):
    layout = BlockLayout(4)
    theta = layout.init(rng)
    L = rng.standard_normal((1, 4, 6, 6))
    g = rng.standard_normal(L.shape)
    _, tape = block_forward(L, theta, np.zeros(2), IntegratorConfig(1), ConvDynamics(layout, "tanh"))
    gL, gt, gp = block_backward(tape, g)
    _, cache = dynamics_f(L, theta, layout, "tanh")
    fL, ft = dynamics_f_backward(cache, g)
    np.testing.assert_array_equal(gL, g + fL)
    np.testing.assert_array_equal(gt, ft)
    np.testing.assert_array_equal(gp, [0.0, 0.0])


def test_block_backward_finite_differences(rng):
    layout = BlockLayout(4)
    theta = layout.init(rng)
    p = np.array([0.4, -0.2])
    L = rng.standard_normal((1, 4, 6, 6))
    g = rng.standard_normal(L.shape)
    integ = IntegratorConfig(2)
    dyn = ConvDynamics(layout, "tanh")
    _, tape = block_forward(L, theta, p, integ, dyn)
    gL, gt, gp = block_backward(tape, g)

    def scalar():
        return float(np.sum(g * block_forward(L, theta, p, integ, dyn)[0]))

    assert max_rel_err(gL, numeric_grad(scalar, L)) < 1e-6
    assert max_rel_err(gt, numeric_grad(scalar, theta)) < 1e-6
    assert max_rel_err(gp, numeric_grad(scalar, p)) < 1e-6


def test_block_backward_shape_check(rng):
    layout = BlockLayout(2)
    L = rng.standard_normal((1, 2, 4, 4))
    _, tape = block_forward(L, layout.init(rng), None, IntegratorConfig(1), ConvDynamics(layout, "relu"))
    with pytest.raises(ShapeMismatchError):
        block_backward(tape, np.zeros((1, 2, 4, 5)))


# ---- Euler order


def test_euler_first_order_convergence():
    L0 = np.ones((1, 1, 1, 1))
    errors = []
    for K in (4, 8, 16, 32):
        out, _ = block_forward(L0, np.zeros(1), None, IntegratorConfig(K), LinearDynamics())
        errors.append(abs(np.e - out.item()))
    ratios = [errors[i] / errors[i + 1] for i in range(3)]
    assert all(1.8 <= r <= 2.2 for r in ratios), ratios


# ---- network


SMALL = NetworkConfig(num_blocks=2, feature_channels=4, augment_channels=1, steps=2, activation="tanh")


def test_zero_projection_returns_input(rng):
    cfg = NetworkConfig()
    params = init_params(cfg, rng)
    params["project.weight"] = np.zeros_like(params["project.weight"])
    params["project.bias"] = np.zeros(2)
    x0 = random_image(rng, 16)
    recon, _ = network_forward(x0, params, cfg)
    assert recon.equals(x0)


@pytest.mark.parametrize("n", [16, 32])
def test_network_shape(rng, n):
    cfg = NetworkConfig(num_blocks=2)
    recon, _ = network_forward(random_image(rng, n), init_params(cfg, rng), cfg)
    assert isinstance(recon, ComplexImage) and recon.shape == (n, n)
    recons, _ = network_forward([random_image(rng, n)] * 3, init_params(cfg, rng), cfg)
    assert len(recons) == 3


def test_network_rejects_wrong_params(rng):
    params = init_params(SMALL, rng)
    with pytest.raises(ShapeMismatchError):
        network_forward(random_image(rng, 8), params, NetworkConfig(num_blocks=2, feature_channels=5))


def test_network_gradients_sampled_coordinates():
    result = check_network_gradients(SMALL, size=8, seed=3, coords=200)
    assert result.num_coords == 200
    assert result.max_rel_error < 1e-6, result


def test_network_backward_zero_upstream(rng):
    params = init_params(SMALL, rng)
    x = rng.standard_normal((1, 2, 8, 8))
    _, tape = network_forward(x, params, SMALL)
    grads, gx = network_backward(tape, np.zeros_like(x))
    assert not gx.any()
    assert all(not g.any() for g in grads.values())


def test_network_k1_reduces_to_residual_baseline(rng):
    ode = NetworkConfig(num_blocks=3, feature_channels=4, augment_channels=0, steps=1, activation="tanh")
    base = NetworkConfig(num_blocks=3, feature_channels=4, steps=1, activation="tanh", mode="residual_baseline")
    p_ode = init_params(ode, rng)
    p_base = {k: v for k, v in p_ode.items() if not k.endswith(".p")}
    x = rng.standard_normal((2, 2, 8, 8))
    g = rng.standard_normal(x.shape)
    r1, t1 = network_forward(x, p_ode, ode)
    r2, t2 = network_forward(x, p_base, base)
    np.testing.assert_array_equal(r1, r2)
    g1, gx1 = network_backward(t1, g)
    g2, gx2 = network_backward(t2, g)
    np.testing.assert_array_equal(gx1, gx2)
    for k in g2:
        np.testing.assert_array_equal(g1[k], g2[k])


def test_residual_baseline_gradients():
    base = NetworkConfig(num_blocks=2, feature_channels=4, activation="tanh", mode="residual_baseline")
    result = check_network_gradients(base, size=8, seed=1)
    assert result.max_rel_error < 1e-6, result


def test_baseline_parameter_count():
    N, F, A = 5, 16, 2
    ode = NetworkConfig(num_blocks=N, feature_channels=F, augment_channels=A)
    base = NetworkConfig(num_blocks=N, feature_channels=F, augment_channels=A, mode="residual_baseline")
    C = F + A
    block_ode = 2 * (C * C * 9 + C)
    block_base = 2 * (F * F * 9 + F)
    aug_columns = N * (block_ode - block_base) + 2 * A * 9
    assert count_params(ode) - count_params(base) == 2 * N + aug_columns
    assert count_params(base) < count_params(ode)


def test_augmented_channels_start_and_stay_zero(rng):
    cfg = NetworkConfig(num_blocks=3, feature_channels=4, augment_channels=2)
    params = init_params(cfg, rng)
    for i in range(3):
        params[f"blocks.{i}.theta0"] = np.zeros_like(params[f"blocks.{i}.theta0"])
    x = rng.standard_normal((1, 2, 8, 8))
    _, tape = network_forward(x, params, cfg)
    for bt in tape.block_tapes:
        for cache in bt.caches:
            conv1_input_shape = cache[2][0]
            assert conv1_input_shape[1] == 6
    # replay the pipeline and inspect the state after every block
    lifted, _ = conv2d_forward(x, ConvParams(params["lift.weight"], params["lift.bias"]))
    L = np.concatenate([lifted, np.zeros((1, 2, 8, 8))], axis=1)
    for i in range(3):
        L, _ = block_forward(L, params[f"blocks.{i}.theta0"], params[f"blocks.{i}.p"], cfg.integrator, ConvDynamics(cfg.layout(), cfg.activation))
        assert np.all(L[:, 4:] == 0.0)


def test_determinism(rng):
    cfg = NetworkConfig(num_blocks=2)
    p1 = init_params(cfg, np.random.default_rng(7))
    p2 = init_params(cfg, np.random.default_rng(7))
    for k in p1:
        assert p1[k].tobytes() == p2[k].tobytes()
    x = rng.standard_normal((2, 2, 16, 16))
    g = rng.standard_normal(x.shape)
    r1, t1 = network_forward(x, p1, cfg)
    r2, t2 = network_forward(x, p2, cfg)
    assert r1.tobytes() == r2.tobytes()
    g1, _ = network_backward(t1, g)
    g2, _ = network_backward(t2, g)
    assert all(g1[k].tobytes() == g2[k].tobytes() for k in g1)


def test_integrator_step_size():
    for K in (1, 3, 4, 7):
        ic = IntegratorConfig(K)
        assert abs(ic.h * K - 1.0) < 1e-15
