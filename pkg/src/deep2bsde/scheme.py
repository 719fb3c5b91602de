"""Forward recursion for the value/gradient pair and the training loss.

Two implementations of the same recursion live here:

* a tape-based one (:func:`build_loss_tape`) whose loss node is
  differentiable in the flat parameter vector, used for training; and
* a plain-numpy one (:func:`simulate_scheme_numpy`) driven by arbitrary
  coefficient functions, used by the consistency harness and as an
  independent cross-check of the tape arithmetic.

Per step n (dt = t_{n+1} - t_n, dX = X_{n+1} - X_n):

    Y_{n+1} = Y_n + dt * [ 0.5 Trace(sigma sigma^T G_n) + f(t_n, X_n, Y_n, Z_n, G_n) ]
                  + <Z_n, dX>
    Z_{n+1} = Z_n + dt * A_n + G_n dX

and the loss is the batch mean of |Y_N - g(X_N)|^2 (a single path in the
single-path framework).
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tape
from .dynamics import PathBatch, TimeGrid, roll_forward, sample_brownian
from .network import BatchNormState, Layout, subnet_forward
from .problems import ProblemSpec

__all__ = [
    "build_loss_tape",
    "loss_and_grad",
    "estimate_value",
    "simulate_scheme_numpy",
    "network_coefficients",
    "exact_bsb_coefficients",
    "bsb_consistency_losses",
]


# -- tape building -----------------------------------------------------------


def _tape_affine(tape, th, slot, x):
    W = tape.record("slice", [th], start=slot.v, stop=slot.v + slot.k * slot.l,
                    shape=(slot.k, slot.l))
    b = tape.record("slice", [th], start=slot.v + slot.k * slot.l, stop=slot.stop,
                    shape=(slot.k,))
    return tape.record("add", [tape.record("matmul", [x, W], transpose_b=True), b])


def _tape_bn(tape, th, layout, net, n, layer, z, bn_state, mode, pending):
    vg, vb, w = layout.bn_slot(net, n, layer)
    gamma = tape.record("slice", [th], start=vg, stop=vg + w, shape=(w,))
    beta = tape.record("slice", [th], start=vb, stop=vb + w, shape=(w,))
    if mode == "train":
        node = tape.record("batchnorm", [z, gamma, beta], eps=bn_state.eps, mode="train")
        a = tape.attrs[node]
        pending.append(((net, n, layer), a["mu"], a["var"]))
    else:
        m, v = bn_state.stats((net, n, layer), w)
        node = tape.record("batchnorm", [z, gamma, beta], eps=bn_state.eps, mode="eval",
                           running_mean=m, running_var=v)
    return node


def _tape_subnet(tape, th, layout, net, n, x_node, bn_state, mode, pending):
    cfg = layout.config
    use_bn = cfg.use_batchnorm and net in ("A", "G")
    slots = layout.net_layers(net, n)
    z = x_node
    if use_bn and cfg.bn_input:
        z = _tape_bn(tape, th, layout, net, n, -1, z, bn_state, mode, pending)
    last = len(slots) - 1
    for li, slot in enumerate(slots):
        z = _tape_affine(tape, th, slot, z)
        if li < last:
            if use_bn:
                z = _tape_bn(tape, th, layout, net, n, li, z, bn_state, mode, pending)
            z = tape.record("relu", [z])
        elif use_bn and cfg.bn_output:
            z = _tape_bn(tape, th, layout, net, n, last, z, bn_state, mode, pending)
    return z


def build_loss_tape(tape: Tape, th: int, layout: Layout, problem: ProblemSpec,
                    paths: PathBatch, bn_state: BatchNormState | None = None,
                    mode: str = "train"):
    """Unroll the recursion on the tape; returns (loss node, bn stat updates).

    ``th`` is the tape leaf holding the flat parameter vector; ``paths`` is
    a rolled-out state batch (constant with respect to the parameters).
    """
    cfg = layout.config
    d, N = cfg.d, cfg.N
    X = paths.states
    J = X.shape[0]
    knots, dts = paths.grid.knots, paths.grid.dt
    pending: list = []
    cumulative = cfg.framework == "specific" or problem.z_mode == "cumulative"

    if cfg.framework == "specific":
        Y = tape.record("slice", [th], start=0, stop=1, shape=(1, 1))
        Z = tape.record("slice", [th], start=1, stop=d + 1, shape=(1, d))
        if J != 1:
            raise ValueError("the single-path framework trains on one path at a time")
    else:
        x0 = tape.constant(X[:, 0])
        Y = _tape_subnet(tape, th, layout, "U", 0, x0, bn_state, mode, pending)
        Z = _tape_subnet(tape, th, layout, "V", 0, x0, bn_state, mode, pending)

    for n in range(N):
        xn = X[:, n]
        dx = X[:, n + 1] - xn
        if cfg.framework == "specific" and n == 0:
            gflat = tape.record("slice", [th], start=d + 1, stop=d * d + d + 1,
                                shape=(1, d * d))
            a = tape.record("slice", [th], start=d * d + d + 1, stop=d * d + 2 * d + 1,
                            shape=(1, d))
        else:
            xn_node = tape.constant(xn)
            gflat = _tape_subnet(tape, th, layout, "G", n, xn_node, bn_state, mode, pending)
            a = _tape_subnet(tape, th, layout, "A", n, xn_node, bn_state, mode, pending)

        if problem.trace_weights_diag is not None:
            diag = tape.record("gather-cols", [gflat], idx=np.arange(d) * (d + 1))
            tw = tape.constant(problem.trace_weights_diag(xn))
            trace_term = tape.record("row-sum", [tape.record("mul", [diag, tw])])
        else:
            diag = None
            tw = tape.constant(problem.trace_weights(xn))
            trace_term = tape.record("row-sum", [tape.record("mul", [gflat, tw])])
        f_term = problem.f_tape(tape, knots[n], xn, Y, Z, gflat, diag=diag)
        integrand = tape.record("add", [trace_term, f_term])
        zdx = tape.record("row-sum", [tape.record("mul", [Z, tape.constant(dx)])])
        Y = tape.record("add", [tape.record("add", [
            tape.record("scalar-mul", [integrand], c=dts[n]), zdx]), Y])
        gdx = tape.record("rowwise-matvec", [gflat, tape.constant(dx)], d=d)
        Znew = tape.record("add", [tape.record("scalar-mul", [a], c=dts[n]), gdx])
        if cumulative:
            Znew = tape.record("add", [Znew, Z])
        Z = Znew
        if not (np.all(np.isfinite(tape.value(Y))) and np.all(np.isfinite(tape.value(Z)))):
            raise FloatingPointError(f"non-finite scheme state at step {n + 1}")

    g_terminal = tape.constant(problem.g(X[:, -1]).reshape(-1, 1))
    mismatch = tape.record("sub", [Y, g_terminal])
    loss = tape.record("mean", [tape.record("square", [mismatch])])
    return loss, pending


def loss_and_grad(theta: np.ndarray, layout: Layout, problem: ProblemSpec,
                  paths: PathBatch, bn_state: BatchNormState | None = None,
                  mode: str = "train"):
    """Empirical loss, its gradient in theta, and pending batch-norm stats."""
    tape = Tape()
    th = tape.leaf(theta)
    loss, pending = build_loss_tape(tape, th, layout, problem, paths, bn_state, mode)
    grads = tape.backward(loss)
    return float(tape.value(loss)), grads[th], pending


def estimate_value(theta: np.ndarray, layout: Layout, problem: ProblemSpec,
                   bn_state: BatchNormState | None = None) -> float:
    """Current approximation of the solution value at the start point."""
    if layout.config.framework == "specific":
        return float(theta[0])
    out = subnet_forward(layout, theta, "U", 0, problem.xi, bn_state, mode="eval")
    return float(out[0])


# -- plain-numpy twin ----------------------------------------------------------


def simulate_scheme_numpy(problem: ProblemSpec, paths: PathBatch,
                          y0, z0, G_fn, A_fn, z_mode: str = "cumulative") -> dict:
    """Run the recursion with explicit coefficient functions.

    ``G_fn(n, X) -> (J, d, d)`` and ``A_fn(n, X) -> (J, d)`` supply the
    second-order and drift coefficients; ``y0`` is a scalar or (J,) array,
    ``z0`` a (d,) or (J, d) array. Returns Y_N, Z_N, the terminal mismatch
    and the empirical loss.
    """
    X = paths.states
    J, _, d = X.shape
    knots, dts = paths.grid.knots, paths.grid.dt
    Y = np.broadcast_to(np.asarray(y0, dtype=np.float64), (J,)).copy()
    Z = np.broadcast_to(np.asarray(z0, dtype=np.float64), (J, d)).copy()
    for n in range(X.shape[1] - 1):
        xn = X[:, n]
        dx = X[:, n + 1] - xn
        S = G_fn(n, xn)
        A = A_fn(n, xn)
        trace_term = np.sum(problem.trace_weights(xn) * S.reshape(J, -1), axis=1)
        f_term = problem.f_batch(knots[n], xn, Y, Z, S)
        Y = Y + dts[n] * (trace_term + f_term) + np.sum(Z * dx, axis=1)
        Znew = dts[n] * A + np.einsum("jik,jk->ji", S, dx)
        Z = Z + Znew if z_mode == "cumulative" else Znew
        if not (np.all(np.isfinite(Y)) and np.all(np.isfinite(Z))):
            raise FloatingPointError(f"non-finite scheme state at step {n + 1}")
    mismatch = Y - problem.g(X[:, -1])
    return {"Y": Y, "Z": Z, "mismatch": mismatch, "loss": float(np.mean(mismatch ** 2))}


def network_coefficients(layout: Layout, theta: np.ndarray,
                         bn_state: BatchNormState | None = None, mode: str = "eval"):
    """Coefficient functions that evaluate the subnetworks in plain numpy.

    Mirrors the tape forward pass; used to cross-check it.
    """
    d = layout.config.d

    def G_fn(n, X):
        return subnet_forward(layout, theta, "G", n, X, bn_state, mode).reshape(-1, d, d)

    def A_fn(n, X):
        return subnet_forward(layout, theta, "A", n, X, bn_state, mode)

    return G_fn, A_fn


# -- exact-coefficient consistency check ---------------------------------------


def exact_bsb_coefficients(problem: ProblemSpec, grid: TimeGrid):
    """Exact value/gradient/Hessian/drift coefficients for the bsb benchmark.

    The closed-form solution is c(t) |x|^2 with c(t) = exp((r + sigma_max^2)(T - t)),
    so the Hessian is 2 c(t) I and the drift coefficient is -(r + sigma_max^2) 2 c(t) x
    (the gradient is linear in x, so its diffusion-generator term vanishes).
    """
    r, smax = 0.05, problem.sigma_bar.sigma_max
    rate = r + smax ** 2
    T, knots = problem.T, grid.knots
    d = problem.d

    def c(t):
        return np.exp(rate * (T - t))

    y0 = c(0.0) * float(problem.xi @ problem.xi)
    z0 = 2.0 * c(0.0) * problem.xi

    def G_fn(n, X):
        return np.broadcast_to(2.0 * c(knots[n]) * np.eye(d), (X.shape[0], d, d))

    def A_fn(n, X):
        return -rate * 2.0 * c(knots[n]) * X

    return y0, z0, G_fn, A_fn


def bsb_consistency_losses(problem: ProblemSpec, step_counts, J: int = 1000,
                           seed=2023) -> dict[int, float]:
    """Empirical loss of the exact-coefficient scheme per step count.

    Brownian paths are drawn once at the finest resolution and aggregated
    for the coarser grids, so the losses are coupled and their decay with
    the step count is not masked by Monte Carlo noise.
    """
    step_counts = sorted(step_counts)
    finest = step_counts[-1]
    for N in step_counts:
        if finest % N:
            raise ValueError(f"step counts must divide the finest one, got {step_counts}")
    fine_bb = sample_brownian(problem.d, TimeGrid(problem.T, finest), J, seed)
    losses = {}
    for N in step_counts:
        grid = TimeGrid(problem.T, N)
        factor = finest // N
        inc = fine_bb.increments.reshape(J, N, factor, problem.d).sum(axis=2)
        paths = roll_forward(problem.xi, problem.H,
                             type(fine_bb)(grid=grid, increments=inc))
        coeffs = exact_bsb_coefficients(problem, grid)
        losses[N] = simulate_scheme_numpy(problem, paths, *coeffs)["loss"]
    return losses
