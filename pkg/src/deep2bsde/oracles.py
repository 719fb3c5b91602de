"""Independent reference solvers for the benchmark values.

None of these touch the training scheme: closed forms for the pricing and
nonlinear-expectation benchmarks, a branching-diffusion Monte Carlo method
for the cubic reaction-diffusion problems, a log-transform Monte Carlo
method for the gradient-squared control problem, and an explicit 1-d
finite-difference scheme for the scalar nonlinear-expectation problem.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .problems import g_bowl, g_log_bowl

__all__ = [
    "OracleResult",
    "bsb_analytic",
    "gbm_analytic",
    "allen_cahn_branching",
    "hjb_cole_hopf",
    "explicit_fd_1d",
    "gbm1d_finite_difference",
    "gaussian_expectation",
]


@dataclass(frozen=True)
class OracleResult:
    value: float
    std_error: float  # 0 for deterministic methods
    method: str
    detail: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.std_error < 0:
            raise ValueError("standard error must be >= 0")

    def __str__(self):
        return f"{self.value:.6g} +/- {self.std_error:.2g} ({self.method})"


# -- closed forms ---------------------------------------------------------------


def bsb_analytic(t: float, x, c: float = 1.0, r: float = 0.05,
                 sigma_max: float = 0.4, T: float = 1.0) -> float:
    """c |x|^2 exp((r + sigma_max^2)(T - t)); valid when the terminal
    condition is convex, so the larger volatility is always selected."""
    if not 0.0 <= t <= T:
        raise ValueError(f"t={t} outside [0, {T}]")
    x = np.asarray(x, dtype=np.float64)
    return float(c * (x @ x) * np.exp((r + sigma_max ** 2) * (T - t)))


def gbm_analytic(t: float, x, c: float = 1.0, sigma_max: float = 1.0,
                 T: float = 1.0, d: int | None = None) -> float:
    """c |x|^2 + c d sigma_max^2 (T - t) for the quadratic test function."""
    if not 0.0 <= t <= T:
        raise ValueError(f"t={t} outside [0, {T}]")
    x = np.asarray(x, dtype=np.float64)
    if d is None:
        d = x.shape[0]
    return float(c * (x @ x) + c * d * sigma_max ** 2 * (T - t))


# -- branching diffusion Monte Carlo ----------------------------------------------


DEFAULT_OFFSPRING = {1: (0.5, 4.0), 3: (0.5, -2.0)}
# With branching rate 1, these (probability, weight) pairs satisfy
# rate * (q1 c1 u + q3 c3 u^3 - u) = u - u^3, the cubic reaction term.


def _branch_chunk(x, T, kappa, n_samples, rng, g, offspring, rate, particle_cap):
    d = x.shape[0]
    ks = np.array(sorted(offspring))
    probs = np.array([offspring[k][0] for k in ks])
    weights = np.array([offspring[k][1] for k in ks])
    cum = np.cumsum(probs)
    if not np.isclose(cum[-1], 1.0):
        raise ValueError(f"offspring probabilities sum to {cum[-1]}, not 1")

    values = np.ones(n_samples)
    aborted = np.zeros(n_samples, dtype=bool)
    pos = np.broadcast_to(x, (n_samples, d)).copy()
    t_rem = np.full(n_samples, T)
    sid = np.arange(n_samples)

    while pos.shape[0]:
        tau = rng.exponential(1.0 / rate, pos.shape[0])
        z = rng.standard_normal(pos.shape)
        die = tau < t_rem
        # survivors diffuse straight to the horizon and contribute g
        step = np.where(die, tau, t_rem)
        pos = pos + np.sqrt(2.0 * kappa * step)[:, None] * z
        if np.any(~die):
            np.multiply.at(values, sid[~die], g(pos[~die]))
        if not np.any(die):
            break
        # dying particles branch: weight factor, then k independent copies
        pos, t_rem, sid = pos[die], (t_rem - tau)[die], sid[die]
        pick = np.searchsorted(cum, rng.random(pos.shape[0]), side="right")
        np.multiply.at(values, sid, weights[pick])
        reps = ks[pick]
        pos = np.repeat(pos, reps, axis=0)
        t_rem = np.repeat(t_rem, reps)
        sid = np.repeat(sid, reps)
        counts = np.bincount(sid, minlength=n_samples)
        over = counts > particle_cap
        if np.any(over):
            aborted |= over
            keep = ~over[sid]
            pos, t_rem, sid = pos[keep], t_rem[keep], sid[keep]
    return values, aborted


def allen_cahn_branching(x, T: float, kappa: float, M: int, seed,
                         g=g_bowl, offspring=None, rate: float = 1.0,
                         particle_cap: int = 10_000, chunk: int = 100_000) -> OracleResult:
    """Branching-particle estimate of u(0, x) for u_t + kappa Lap(u) + u - u^3 = 0.

    Particles diffuse with generator kappa * Laplacian (exact Gaussian step
    to the next event), carry exponential(rate) lifetimes, branch into k
    offspring with the configured probabilities while multiplying the
    sample weight, and contribute g at the horizon. Samples whose live
    population exceeds ``particle_cap`` are resampled from a fresh
    substream (the count is reported).
    """
    if M < 1:
        raise ValueError("need at least one sample")
    x = np.asarray(x, dtype=np.float64)
    offspring = DEFAULT_OFFSPRING if offspring is None else offspring
    total, total_sq, n_done, n_aborted = 0.0, 0.0, 0, 0
    n_chunks = (M + chunk - 1) // chunk
    for ci in range(n_chunks):
        size = min(chunk, M - ci * chunk)
        retry = 0
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, ci, retry))))
        values, aborted = _branch_chunk(x, T, kappa, size, rng, g, offspring, rate, particle_cap)
        while np.any(aborted):
            n_aborted += int(aborted.sum())
            retry += 1
            if retry > 100:
                raise RuntimeError("branching population keeps exceeding the cap")
            rng = np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, ci, retry))))
            redo, redo_aborted = _branch_chunk(x, T, kappa, int(aborted.sum()), rng, g,
                                               offspring, rate, particle_cap)
            values[aborted] = redo
            nxt = np.zeros_like(aborted)
            nxt[aborted] = redo_aborted
            aborted = nxt
        total += values.sum()
        total_sq += (values ** 2).sum()
        n_done += size
    mean = total / n_done
    var = max(total_sq / n_done - mean ** 2, 0.0)
    se = np.sqrt(var / n_done)
    return OracleResult(float(mean), float(se), "branching-diffusion",
                        {"samples": M, "aborted": n_aborted})


# -- log-transform Monte Carlo ------------------------------------------------------


def hjb_cole_hopf(x, T: float, M: int, seed, g=g_log_bowl,
                  chunk: int = 100_000) -> OracleResult:
    """-ln E[exp(-g(x + sqrt(2) W_T))] by plain Monte Carlo.

    The log transform turns the gradient-squared control problem into the
    heat equation, so the expectation is over a single Gaussian step.
    """
    if M < 1:
        raise ValueError("need at least one sample")
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[0]
    scale = np.sqrt(2.0 * T)
    total, total_sq, n_done = 0.0, 0.0, 0
    n_chunks = (M + chunk - 1) // chunk
    for ci in range(n_chunks):
        size = min(chunk, M - ci * chunk)
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, ci))))
        y = x + scale * rng.standard_normal((size, d))
        vals = np.exp(-g(y))
        total += vals.sum()
        total_sq += (vals ** 2).sum()
        n_done += size
    mean = total / n_done
    var = max(total_sq / n_done - mean ** 2, 0.0)
    se_mean = np.sqrt(var / n_done)
    # delta method: d(-ln m)/dm = -1/m
    return OracleResult(float(-np.log(mean)), float(se_mean / mean),
                        "log-transform Monte Carlo", {"samples": M})


# -- explicit finite differences -------------------------------------------------------


def explicit_fd_1d(g, T: float, x0: float, halfwidth: float, num_points: int,
                   num_steps: int, diffusion, reaction=None,
                   max_diffusion: float | None = None) -> OracleResult:
    """Solve u_t + diffusion(u_xx) + reaction(u) = 0 backward from u(T) = g.

    ``diffusion`` maps the discrete second derivative pointwise (for the
    heat equation: s -> kappa * s). Explicit stepping with central second
    differences and linear extrapolation at the boundary. ``max_diffusion``
    is the Lipschitz bound of ``diffusion`` used in the stability check
    num_steps >= 2 * max_diffusion * T * (K - 1)^2 / (2 R)^2 * 2.
    """
    xs = x0 + np.linspace(-halfwidth, halfwidth, num_points)
    dx = 2.0 * halfwidth / (num_points - 1)
    if max_diffusion is not None:
        required = 2.0 * max_diffusion * T * (num_points - 1) ** 2 / (2.0 * halfwidth) ** 2 * 2.0
        if num_steps < required:
            raise ValueError(
                f"explicit scheme unstable: num_steps={num_steps} < {required:.0f} "
                f"needed for dt <= dx^2 / (2 max_diffusion) with safety 2"
            )
    dt = T / num_steps
    u = g(xs[:, None]).astype(np.float64)
    for _ in range(num_steps):
        d2 = np.empty_like(u)
        d2[1:-1] = (u[2:] - 2.0 * u[1:-1] + u[:-2]) / (dx * dx)
        d2[0] = d2[-1] = 0.0
        upd = diffusion(d2)
        if reaction is not None:
            upd = upd + reaction(u)
        u = u + dt * upd
        u[0] = 2.0 * u[1] - u[2]
        u[-1] = 2.0 * u[-2] - u[-3]
    value = float(np.interp(x0, xs, u))
    return OracleResult(value, 0.0, "finite-differences",
                        {"halfwidth": halfwidth, "points": num_points, "steps": num_steps})


def gbm1d_finite_difference(x0: float, T: float, sigma_max: float, sigma_min: float,
                            g, halfwidth: float = 10.0, num_points: int = 2001,
                            num_steps: int | None = None) -> OracleResult:
    """u(0, x0) for u_t + 0.5 sigma_bar(u_xx)^2 u_xx = 0, u(T) = g.

    The effective volatility is selected pointwise from the sign of the
    discrete second derivative at every step.
    """
    required = sigma_max ** 2 * T * (num_points - 1) ** 2 / halfwidth ** 2
    if num_steps is None:
        num_steps = int(np.ceil(required))
    if num_steps < required:
        raise ValueError(
            f"explicit scheme unstable: num_steps={num_steps} < {required:.0f}"
        )

    def diffusion(s):
        vol = np.where(s >= 0.0, sigma_max, sigma_min)
        return 0.5 * vol * vol * s

    res = explicit_fd_1d(g, T, x0, halfwidth, num_points, num_steps, diffusion)
    return OracleResult(res.value, 0.0, "finite-differences", res.detail)


# -- quadrature helper -----------------------------------------------------------------


def gaussian_expectation(fn, mean: float, var: float, points: int = 201) -> float:
    """E[fn(Y)] for scalar Y ~ Normal(mean, var), by Gauss-Hermite quadrature."""
    nodes, weights = np.polynomial.hermite.hermgauss(points)
    ys = mean + np.sqrt(2.0 * var) * nodes
    return float(np.sum(weights * fn(ys)) / np.sqrt(np.pi))
