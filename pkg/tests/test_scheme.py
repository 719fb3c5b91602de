import dataclasses

import numpy as np
import pytest

from deep2bsde.autodiff import Tape
from deep2bsde.dynamics import BrownianBatch, TimeGrid, roll_forward, sample_brownian
from deep2bsde.network import BatchNormState, Layout, NetworkConfig, init_theta, subnet_forward
from deep2bsde.problems import build_problem
from deep2bsde.scheme import (
    bsb_consistency_losses,
    build_loss_tape,
    estimate_value,
    exact_bsb_coefficients,
    loss_and_grad,
    network_coefficients,
    simulate_scheme_numpy,
)


def shrink(name, d, N, xi=None, **kw):
    p = build_problem(name)
    if xi is None:
        xi = np.zeros(d) if not p.xi.any() else np.tile([1.0, 0.5], d // 2 + 1)[:d]
    return dataclasses.replace(p, d=d, N=N, xi=xi, **kw)


def make_paths(problem, J, seed=0):
    grid = TimeGrid(problem.T, problem.N)
    bb = sample_brownian(problem.d, grid, J, seed=seed)
    return roll_forward(problem.xi, problem.H, bb)


# -- single-path recursion examples ---------------------------------------------------


def zero_coeff(n, X):
    J, d = X.shape
    return np.zeros((J, d, d))


def zero_drift(n, X):
    return np.zeros_like(X)


def test_specific_telescoping_y():
    # f == 0, G == 0: Y_N = y0 + <z0, W_T>
    p = shrink("allen-cahn-20", d=3, N=6)
    p = dataclasses.replace(
        p, f_batch=lambda t, X, Y, Z, S: np.zeros(X.shape[0]))
    paths = make_paths(p, J=5, seed=4)
    z0 = np.array([0.5, -1.0, 2.0])
    out = simulate_scheme_numpy(p, paths, 7.0, z0, zero_coeff, zero_drift)
    w_T = paths.terminal - p.xi
    np.testing.assert_allclose(out["Y"], 7.0 + w_T @ z0, rtol=1e-12)


def test_z_frozen_without_coefficients():
    p = shrink("allen-cahn-20", d=2, N=5)
    paths = make_paths(p, J=3, seed=1)
    z0 = np.array([1.5, -0.5])
    out = simulate_scheme_numpy(p, paths, 0.3, z0, zero_coeff, zero_drift)
    np.testing.assert_allclose(out["Z"], np.broadcast_to(z0, (3, 2)), rtol=1e-14)


def test_single_step_integrand_cancellation():
    # d=1, N=1, f = -S/2 cancels the trace term, so Y_1 = y0 + z0 dW for any G
    p = shrink("allen-cahn-20", d=1, N=1)
    p = dataclasses.replace(
        p,
        f_batch=lambda t, X, Y, Z, S: -0.5 * S[:, 0, 0])
    paths = make_paths(p, J=8, seed=2)
    rng = np.random.default_rng(0)

    def random_g(n, X):
        return rng.normal(size=(X.shape[0], 1, 1))

    out = simulate_scheme_numpy(p, paths, 2.0, np.array([3.0]), random_g, zero_drift)
    dW = paths.terminal - p.xi
    np.testing.assert_allclose(out["Y"], 2.0 + 3.0 * dW[:, 0], rtol=1e-12)


def test_loss_zero_iff_exact_match():
    p = shrink("gbm-1", d=1, N=4)
    paths = make_paths(p, J=6, seed=3)
    g_vals = p.g(paths.terminal)
    out = simulate_scheme_numpy(
        p, paths, g_vals, np.zeros(1), zero_coeff, zero_drift,
    )
    # forcing Y_0 to g(X_N) pathwise is only possible here because f(y)
    # vanishes when G == 0 for this problem; the mismatch is then exact
    np.testing.assert_allclose(out["mismatch"], 0.0, atol=1e-12)
    assert out["loss"] == pytest.approx(0.0, abs=1e-24)


def test_loss_mean_of_squared_mismatches():
    p = shrink("gbm-1", d=1, N=1)
    paths = make_paths(p, J=2, seed=5)
    g_vals = p.g(paths.terminal)
    y0 = g_vals + np.array([1.0, 3.0])
    out = simulate_scheme_numpy(p, paths, y0, np.zeros(1), zero_coeff, zero_drift)
    assert out["loss"] == pytest.approx(5.0)


# -- tape vs numpy twin ------------------------------------------------------------


@pytest.mark.parametrize("name,d,use_bn", [
    ("hjb-100", 3, False),
    ("bsb-100", 4, False),
    ("gbm-100", 2, False),
    ("allen-cahn-50", 3, False),
])
def test_tape_forward_matches_numpy_twin(name, d, use_bn):
    p = shrink(name, d=d, N=4)
    cfg = NetworkConfig(d=d, N=4, framework="general", use_batchnorm=use_bn)
    layout = Layout(cfg)
    rng = np.random.default_rng(8)
    theta = init_theta(layout, rng, (0.0, 1.0))
    theta += rng.normal(0, 0.2, layout.nu)
    paths = make_paths(p, J=6, seed=9)
    tape = Tape()
    th = tape.leaf(theta)
    loss_node, _ = build_loss_tape(tape, th, layout, p, paths, None)
    G_fn, A_fn = network_coefficients(layout, theta)
    y0 = subnet_forward(layout, theta, "U", 0, paths.states[:, 0])[:, 0]
    z0 = subnet_forward(layout, theta, "V", 0, paths.states[:, 0])
    twin = simulate_scheme_numpy(p, paths, y0, z0, G_fn, A_fn, z_mode=p.z_mode)
    assert float(tape.value(loss_node)) == pytest.approx(twin["loss"], rel=1e-13)


def test_specific_tape_matches_twin():
    p = shrink("allen-cahn-20", d=3, N=5)
    cfg = NetworkConfig(d=3, N=5, framework="specific")
    layout = Layout(cfg)
    rng = np.random.default_rng(10)
    theta = init_theta(layout, rng, (-1.0, 1.0))
    theta += rng.normal(0, 0.2, layout.nu)
    paths = make_paths(p, J=1, seed=11)
    tape = Tape()
    th = tape.leaf(theta)
    loss_node, _ = build_loss_tape(tape, th, layout, p, paths)
    from deep2bsde.network import head_initial_values
    y0, z0, g0, a0 = head_initial_values(layout, theta)
    G_fn, A_fn = network_coefficients(layout, theta)

    def G_with_head(n, X):
        return np.broadcast_to(g0, (X.shape[0], 3, 3)) if n == 0 else G_fn(n, X)

    def A_with_head(n, X):
        return np.broadcast_to(a0, X.shape) if n == 0 else A_fn(n, X)

    twin = simulate_scheme_numpy(p, paths, y0, z0, G_with_head, A_with_head)
    assert float(tape.value(loss_node)) == pytest.approx(twin["loss"], rel=1e-13)


def test_specific_framework_rejects_batches():
    p = shrink("allen-cahn-20", d=2, N=2)
    layout = Layout(NetworkConfig(d=2, N=2, framework="specific"))
    theta = init_theta(layout, np.random.default_rng(0), (-1, 1))
    paths = make_paths(p, J=3, seed=0)
    with pytest.raises(ValueError):
        loss_and_grad(theta, layout, p, paths)


# -- gradients ---------------------------------------------------------------------


def fd_check(problem, layout, paths, bn, n_coords=40, h=1e-6, seed=0):
    rng = np.random.default_rng(seed)
    theta = init_theta(layout, rng, (0.0, 1.0))
    theta += rng.normal(0, 0.05, layout.nu)
    loss, grad, _ = loss_and_grad(theta, layout, problem, paths,
                                  BatchNormState() if bn else None)
    idx = rng.choice(layout.nu, size=min(n_coords, layout.nu), replace=False)
    for i in idx:
        tp, tm = theta.copy(), theta.copy()
        tp[i] += h
        tm[i] -= h
        lp, _, _ = loss_and_grad(tp, layout, problem, paths, BatchNormState() if bn else None)
        lm, _, _ = loss_and_grad(tm, layout, problem, paths, BatchNormState() if bn else None)
        fd = (lp - lm) / (2 * h)
        err = abs(fd - grad[i])
        assert err <= 1e-6 + 1e-5 * max(abs(fd), abs(grad[i])), (i, fd, grad[i])


def test_loss_gradient_matches_fd_specific():
    p = shrink("allen-cahn-20", d=2, N=2)
    layout = Layout(NetworkConfig(d=2, N=2, framework="specific"))
    fd_check(p, layout, make_paths(p, J=1, seed=13), bn=False)


@pytest.mark.parametrize("name,bn", [("hjb-100", True), ("allen-cahn-50", True),
                                     ("gbm-100", True), ("bsb-100", True),
                                     ("hjb-100", False)])
def test_loss_gradient_matches_fd_general(name, bn):
    p = shrink(name, d=2, N=2)
    layout = Layout(NetworkConfig(d=2, N=2, framework="general", use_batchnorm=bn))
    fd_check(p, layout, make_paths(p, J=4, seed=14), bn=bn)


def test_estimate_value_reads_head():
    p = shrink("allen-cahn-20", d=2, N=2)
    layout = Layout(NetworkConfig(d=2, N=2, framework="specific"))
    theta = np.zeros(layout.nu)
    theta[0] = 0.625
    assert estimate_value(theta, layout, p) == 0.625


# -- invariants ----------------------------------------------------------------------


def test_scaling_homogeneity_gbm():
    # scaling (y0, z0, G, A, f, g) by lam scales Y_N and the mismatch by lam
    p = shrink("gbm-100", d=3, N=5)
    lam = 2.5
    paths = make_paths(p, J=16, seed=15)
    rng = np.random.default_rng(16)
    mats = rng.normal(size=(5, 3, 3)) + 0.3
    drifts = rng.normal(size=(5, 3))

    def G_fn(n, X):
        return np.broadcast_to(mats[n], (X.shape[0], 3, 3))

    def A_fn(n, X):
        return np.broadcast_to(drifts[n], X.shape)

    base = simulate_scheme_numpy(p, paths, 1.7, np.array([0.2, -0.1, 0.4]), G_fn, A_fn)
    scaled_problem = dataclasses.replace(
        p,
        f_batch=lambda t, X, Y, Z, S: lam * p.f_batch(t, X, Y / lam, Z / lam, S / lam),
        g=lambda X: lam * p.g(X))
    scaled = simulate_scheme_numpy(
        scaled_problem, paths, lam * 1.7, lam * np.array([0.2, -0.1, 0.4]),
        lambda n, X: lam * G_fn(n, X), lambda n, X: lam * A_fn(n, X))
    np.testing.assert_allclose(scaled["Y"], lam * base["Y"], rtol=1e-12)
    np.testing.assert_allclose(scaled["mismatch"], lam * base["mismatch"], rtol=1e-12)


def test_exact_bsb_coefficients_match_closed_form():
    from deep2bsde.oracles import bsb_analytic
    p = build_problem("bsb-100")
    grid = TimeGrid(p.T, p.N)
    y0, z0, G_fn, A_fn = exact_bsb_coefficients(p, grid)
    assert y0 == pytest.approx(bsb_analytic(0.0, p.xi), rel=1e-12)
    np.testing.assert_allclose(z0, 2.0 * np.exp(0.21) * p.xi, rtol=1e-12)
    X = np.tile(p.xi, (2, 1))
    np.testing.assert_allclose(G_fn(p.N - 1, X)[0],
                               2.0 * np.exp(0.21 * (p.T - grid.knots[-2])) * np.eye(100))


def test_bsb_consistency_loss_halves_smoke():
    p = build_problem("bsb-100")
    losses = bsb_consistency_losses(p, [20, 40], J=256, seed=7)
    ratio = losses[20] / losses[40]
    assert 1.4 <= ratio <= 3.0


def test_consistency_requires_divisible_grids():
    p = build_problem("bsb-100")
    with pytest.raises(ValueError):
        bsb_consistency_losses(p, [12, 40], J=8)


def test_non_finite_scheme_state_reports_step():
    p = shrink("allen-cahn-50", d=2, N=3)
    paths = make_paths(p, J=4, seed=17)

    def explode(n, X):
        return np.full((X.shape[0], 2, 2), 1e200)

    with pytest.raises(FloatingPointError, match="step"):
        simulate_scheme_numpy(p, paths, 1e200, np.zeros(2), explode, zero_drift)
