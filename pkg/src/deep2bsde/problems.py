"""The benchmark problem definitions and the config-file loader.

Every benchmark is a :class:`ProblemSpec`: terminal condition ``g``,
generator nonlinearity ``f`` (as a scalar function of (t, x, y, z, S) plus
batch and tape-building variants), diffusion ``sigma``, one-step transition
``H``, start point ``xi``, horizon, step count, optimizer settings and the
reference value its error is measured against.

The nonlinear-expectation problems select the effective volatility from the
sign of the second derivative:

    sigma_bar(s) = sigma_max  if s >= 0,  else sigma_min.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from functools import partial

import numpy as np
import yaml

from .optim import Schedule

__all__ = [
    "SigmaBarRule",
    "ProblemSpec",
    "make_allen_cahn_20",
    "make_bsb_100",
    "make_hjb_100",
    "make_allen_cahn_50",
    "make_gbm",
    "to_initial_value_form",
    "build_problem",
    "load_problem_config",
    "PROBLEM_NAMES",
]


@dataclass(frozen=True)
class SigmaBarRule:
    """Volatility selection by sign; right-continuous with value sigma_max at 0."""

    sigma_max: float
    sigma_min: float

    def __post_init__(self):
        if not 0.0 < self.sigma_min < self.sigma_max:
            raise ValueError(f"need 0 < sigma_min < sigma_max, got {self}")

    def __call__(self, x):
        return np.where(np.asarray(x) >= 0.0, self.sigma_max, self.sigma_min)


@dataclass(frozen=True)
class ProblemSpec:
    name: str
    framework: str  # "specific" | "general"
    d: int
    T: float
    N: int
    xi: np.ndarray
    g: callable          # (J, d) -> (J,)
    f: callable          # (t, x (d,), y, z (d,), S (d, d)) -> float
    f_batch: callable    # (t, X (J, d), Y (J,), Z (J, d), S (J, d, d)) -> (J,)
    f_tape: callable     # (tape, t, X (J, d), y, z, gflat node ids) -> (J, 1) node
    sigma: callable      # (d,) -> (d, d)
    trace_weights: callable  # (J, d) -> (J, d*d), 0.5 * sigma sigma^T per row
    trace_weights_diag: callable | None  # (J, d) -> (J, d) when sigma sigma^T is diagonal
    H: callable          # (s, t, X (J, d), w (J, d)) -> (J, d)
    optimizer: str       # "sgd" | "adam"
    schedule: Schedule
    epsilon: float
    J: int
    iterations: int
    checkpoints: tuple
    reference: float
    reference_source: str
    y0_range: tuple = (0.0, 1.0)
    use_batchnorm: bool = True
    # "cumulative": Z_{n+1} = Z_n + A dt + G dX (the Ito form; always used by
    # the single-path framework). "direct": Z_{n+1} = A dt + G dX, a fresh
    # per-step regression. The cumulative form feeds every past coefficient
    # fluctuation into Z; on the 100-dimensional minibatch benchmarks that
    # compounds, at their pinned learning rates, into a noise floor the
    # training cannot leave, so those problems override to "direct".
    z_mode: str = "cumulative"
    sigma_bar: SigmaBarRule | None = None

    def __post_init__(self):
        if self.T <= 0 or self.N < 1:
            raise ValueError(f"need T > 0 and N >= 1 in {self.name}")
        object.__setattr__(self, "xi", np.asarray(self.xi, dtype=np.float64))
        if self.xi.shape != (self.d,):
            raise ValueError(f"xi must have shape ({self.d},), got {self.xi.shape}")


_DIAG_IDX = {}


def _diag_idx(d):
    if d not in _DIAG_IDX:
        _DIAG_IDX[d] = np.arange(d) * (d + 1)
    return _DIAG_IDX[d]


# -- terminal conditions -----------------------------------------------------


def g_bowl(X):
    """1 / (2 + 2/5 |x|^2)."""
    X = np.atleast_2d(X)
    return 1.0 / (2.0 + 0.4 * np.sum(X * X, axis=1))


def g_norm_squared(X):
    X = np.atleast_2d(X)
    return np.sum(X * X, axis=1)


def g_log_bowl(X):
    X = np.atleast_2d(X)
    return np.log(0.5 * (1.0 + np.sum(X * X, axis=1)))


def g_sigmoid_sq(X):
    X = np.atleast_2d(X)
    return 1.0 / (1.0 + np.exp(-np.sum(X * X, axis=1)))


# -- transitions and diffusions ----------------------------------------------


def h_additive(s, t, X, w, scale=1.0):
    return X + scale * w


def h_geometric(s, t, X, w, vol=0.4):
    return X + vol * X * w


def sigma_scaled_identity(x, scale=1.0):
    return scale * np.eye(x.shape[-1])


def sigma_diag_vol(x, vol=0.4):
    return vol * np.diag(x)


def tw_scaled_identity(X, scale=1.0):
    """0.5 * (scale^2 I) flattened, tiled over the batch."""
    J, d = X.shape
    w = 0.5 * scale * scale * np.eye(d).ravel()
    return np.broadcast_to(w, (J, d * d))


def twd_scaled_identity(X, scale=1.0):
    return np.broadcast_to(0.5 * scale * scale, X.shape)


def tw_diag_vol(X, vol=0.4):
    J, d = X.shape
    out = np.zeros((J, d * d))
    out[:, _diag_idx(d)] = 0.5 * vol * vol * X * X
    return out


def twd_diag_vol(X, vol=0.4):
    return 0.5 * vol * vol * X * X


# -- nonlinearities: scalar, batch and tape forms ------------------------------


def f_allen_cahn(t, x, y, z, S, kappa=0.5):
    return -kappa * np.trace(S) - y + y ** 3


def f_allen_cahn_batch(t, X, Y, Z, S, kappa=0.5):
    return -kappa * np.trace(S, axis1=1, axis2=2) - Y + Y ** 3


def f_allen_cahn_tape(tape, t, X, y, z, gflat, diag=None, kappa=0.5):
    if diag is None:
        diag = tape.record("gather-cols", [gflat], idx=_diag_idx(X.shape[1]))
    tr = tape.record("row-sum", [diag])
    acc = tape.record("scalar-mul", [tr], c=-kappa)
    acc = tape.record("sub", [acc, y])
    return tape.record("add", [acc, tape.record("cube", [y])])


def f_hjb(t, x, y, z, S):
    return -np.trace(S) + float(z @ z)


def f_hjb_batch(t, X, Y, Z, S):
    return -np.trace(S, axis1=1, axis2=2) + np.sum(Z * Z, axis=1)


def f_hjb_tape(tape, t, X, y, z, gflat, diag=None):
    if diag is None:
        diag = tape.record("gather-cols", [gflat], idx=_diag_idx(X.shape[1]))
    tr = tape.record("row-sum", [diag])
    zn = tape.record("row-sum", [tape.record("square", [z])])
    return tape.record("sub", [zn, tr])


def f_gbm(t, x, y, z, S, bar=None):
    diag = np.diag(S)
    return -0.5 * float(np.sum(bar(diag) ** 2 * diag))


def f_gbm_batch(t, X, Y, Z, S, bar=None):
    diag = np.diagonal(S, axis1=1, axis2=2)
    return -0.5 * np.sum(bar(diag) ** 2 * diag, axis=1)


def f_gbm_tape(tape, t, X, y, z, gflat, diag=None, bar=None):
    if diag is None:
        diag = tape.record("gather-cols", [gflat], idx=_diag_idx(X.shape[1]))
    # the volatility selection is piecewise constant in S, so it enters the
    # gradient as a weight frozen at the current primal sign
    w = tape.constant(0.5 * bar(tape.value(diag)) ** 2)
    s = tape.record("row-sum", [tape.record("mul", [diag, w])])
    return tape.record("scalar-mul", [s], c=-1.0)


def f_bsb(t, x, y, z, S, bar=None, r=0.05):
    diag = np.diag(S)
    return (-0.5 * float(np.sum(x * x * bar(diag) ** 2 * diag))
            + r * (y - float(x @ z)))


def f_bsb_batch(t, X, Y, Z, S, bar=None, r=0.05):
    diag = np.diagonal(S, axis1=1, axis2=2)
    return (-0.5 * np.sum(X * X * bar(diag) ** 2 * diag, axis=1)
            + r * (Y - np.sum(X * Z, axis=1)))


def f_bsb_tape(tape, t, X, y, z, gflat, diag=None, bar=None, r=0.05):
    if diag is None:
        diag = tape.record("gather-cols", [gflat], idx=_diag_idx(X.shape[1]))
    w = tape.constant(0.5 * X * X * bar(tape.value(diag)) ** 2)
    quad = tape.record("scalar-mul", [tape.record("row-sum", [tape.record("mul", [diag, w])])], c=-1.0)
    xz = tape.record("row-sum", [tape.record("mul", [z, tape.constant(X)])])
    return tape.record("add", [quad, tape.record("scalar-mul", [tape.record("sub", [y, xz])], c=r)])


# -- benchmark factories -------------------------------------------------------


def make_allen_cahn_20(d=20, T=0.3, N=20, gamma=1e-3, iterations=5000) -> ProblemSpec:
    """Cubic reaction-diffusion problem, single-path framework, plain SGD."""
    return ProblemSpec(
        name="allen-cahn-20", framework="specific", d=d, T=T, N=N,
        xi=np.zeros(d), g=g_bowl,
        f=partial(f_allen_cahn, kappa=0.5),
        f_batch=partial(f_allen_cahn_batch, kappa=0.5),
        f_tape=partial(f_allen_cahn_tape, kappa=0.5),
        sigma=partial(sigma_scaled_identity, scale=1.0),
        trace_weights=partial(tw_scaled_identity, scale=1.0),
        trace_weights_diag=partial(twd_scaled_identity, scale=1.0),
        H=partial(h_additive, scale=1.0),
        optimizer="sgd", schedule=Schedule.constant(gamma), epsilon=1e-8,
        J=1, iterations=iterations,
        checkpoints=(0, 1000, 2000, 3000, 4000, 5000),
        reference=0.30879, reference_source="branching-diffusion Monte Carlo",
        y0_range=(-1.0, 1.0), use_batchnorm=False, z_mode="cumulative",
    )


def make_bsb_100(d=100, T=1.0, N=20, iterations=400) -> ProblemSpec:
    """Model-uncertainty pricing problem with volatility selected by convexity.

    No learning-rate schedule is pinned for this problem; the documented
    default halves the rate every 100 steps starting from 1.
    """
    bar = SigmaBarRule(sigma_max=0.4, sigma_min=0.1)
    vol, r = 0.4, 0.05
    xi = np.tile([1.0, 0.5], d // 2 + 1)[:d]
    return ProblemSpec(
        name="bsb-100", framework="general", d=d, T=T, N=N,
        xi=xi, g=g_norm_squared,
        f=partial(f_bsb, bar=bar, r=r),
        f_batch=partial(f_bsb_batch, bar=bar, r=r),
        f_tape=partial(f_bsb_tape, bar=bar, r=r),
        sigma=partial(sigma_diag_vol, vol=vol),
        trace_weights=partial(tw_diag_vol, vol=vol),
        trace_weights_diag=partial(twd_diag_vol, vol=vol),
        H=partial(h_geometric, vol=vol),
        optimizer="adam", schedule=Schedule.step_decay(1.0, 0.5, 100), epsilon=1e-8,
        J=64, iterations=iterations, checkpoints=(0, 100, 200, 300, 400),
        reference=77.1049, reference_source="closed form",
        sigma_bar=bar, z_mode="direct",
    )


def make_hjb_100(d=100, T=1.0, N=20, gamma=1e-2, iterations=2000) -> ProblemSpec:
    """Control problem with a gradient-squared nonlinearity."""
    return ProblemSpec(
        name="hjb-100", framework="general", d=d, T=T, N=N,
        xi=np.zeros(d), g=g_log_bowl,
        f=f_hjb, f_batch=f_hjb_batch, f_tape=f_hjb_tape,
        sigma=partial(sigma_scaled_identity, scale=np.sqrt(2.0)),
        trace_weights=partial(tw_scaled_identity, scale=np.sqrt(2.0)),
        trace_weights_diag=partial(twd_scaled_identity, scale=np.sqrt(2.0)),
        H=partial(h_additive, scale=np.sqrt(2.0)),
        optimizer="adam", schedule=Schedule.constant(gamma), epsilon=1e-8,
        J=64, iterations=iterations, checkpoints=(0, 500, 1000, 1500, 2000),
        reference=4.5901, reference_source="log-transform Monte Carlo",
        z_mode="direct",
    )


def make_allen_cahn_50(d=50, T=0.3, N=20, iterations=2000) -> ProblemSpec:
    """Cubic reaction-diffusion problem, minibatch framework, Adam with eps=1."""
    return ProblemSpec(
        name="allen-cahn-50", framework="general", d=d, T=T, N=N,
        xi=np.zeros(d), g=g_bowl,
        f=partial(f_allen_cahn, kappa=1.0),
        f_batch=partial(f_allen_cahn_batch, kappa=1.0),
        f_tape=partial(f_allen_cahn_tape, kappa=1.0),
        sigma=partial(sigma_scaled_identity, scale=np.sqrt(2.0)),
        trace_weights=partial(tw_scaled_identity, scale=np.sqrt(2.0)),
        trace_weights_diag=partial(twd_scaled_identity, scale=np.sqrt(2.0)),
        H=partial(h_additive, scale=np.sqrt(2.0)),
        optimizer="adam", schedule=Schedule.step_decay(0.1, 0.9, 1000), epsilon=1.0,
        J=64, iterations=iterations, checkpoints=(0, 500, 1000, 1500, 2000),
        reference=0.09909, reference_source="branching-diffusion Monte Carlo",
    )


def make_gbm(d, T=1.0, N=20, iterations=None) -> ProblemSpec:
    """Nonlinear expectation of a test function under volatility uncertainty."""
    if d not in (1, 100):
        raise ValueError(f"supported dimensions are 1 and 100, got {d}")
    bar = SigmaBarRule(sigma_max=1.0, sigma_min=1.0 / np.sqrt(2.0))
    common = dict(
        framework="general", d=d, T=T, N=N,
        f=partial(f_gbm, bar=bar),
        f_batch=partial(f_gbm_batch, bar=bar),
        f_tape=partial(f_gbm_tape, bar=bar),
        sigma=partial(sigma_scaled_identity, scale=1.0),
        trace_weights=partial(tw_scaled_identity, scale=1.0),
        trace_weights_diag=partial(twd_scaled_identity, scale=1.0),
        H=partial(h_additive, scale=1.0),
        optimizer="adam", epsilon=1e-8, J=64, sigma_bar=bar,
    )
    if d == 100:
        return ProblemSpec(
            name="gbm-100", xi=np.tile([1.0, 0.5], d // 2 + 1)[:d], g=g_norm_squared,
            schedule=Schedule.step_decay(1.0, 0.5, 500),
            iterations=iterations or 1500, checkpoints=(0, 500, 1000, 1500),
            reference=162.5, reference_source="closed form", z_mode="direct", **common,
        )
    return ProblemSpec(
        name="gbm-1", xi=np.full(1, -2.0), g=g_sigmoid_sq,
        schedule=Schedule.constant(1e-2),
        iterations=iterations or 500, checkpoints=(0, 100, 200, 300, 500),
        reference=0.90471, reference_source="finite differences", **common,
    )


def to_initial_value_form(spec: ProblemSpec) -> ProblemSpec:
    """Reflect the nonlinearity in time: F(t, ...) = -f(T - t, ...).

    Turns the terminal value problem into the matching initial value
    problem; applying the transform twice restores f pointwise.
    """
    T = spec.T
    return dataclasses.replace(
        spec,
        name=spec.name + "+reflected",
        f=partial(_reflected, spec.f, T),
        f_batch=partial(_reflected, spec.f_batch, T),
        f_tape=partial(_reflected_tape, spec.f_tape, T),
    )


def _reflected(f, T, t, *args, **kw):
    return -f(T - t, *args, **kw)


def _reflected_tape(f_tape, T, tape, t, *args, **kw):
    node = f_tape(tape, T - t, *args, **kw)
    return tape.record("scalar-mul", [node], c=-1.0)


# -- registry and config files -------------------------------------------------


_FACTORIES = {
    "allen-cahn-20": make_allen_cahn_20,
    "bsb-100": make_bsb_100,
    "hjb-100": make_hjb_100,
    "allen-cahn-50": make_allen_cahn_50,
    "gbm-100": partial(make_gbm, 100),
    "gbm-1": partial(make_gbm, 1),
}

PROBLEM_NAMES = tuple(_FACTORIES)

_FACTORY_KEYS = {"d", "T", "N", "iterations"}
_REPLACE_KEYS = {
    "xi", "J", "optimizer", "epsilon", "checkpoints", "reference",
    "reference_source", "use_batchnorm", "y0_range", "framework", "z_mode",
}
_SCHEDULE_KEYS = {"gamma", "lr_decay_factor", "lr_decay_interval"}


def build_problem(name: str, **overrides) -> ProblemSpec:
    """Benchmark by name with optional field overrides."""
    if name not in _FACTORIES:
        raise KeyError(f"unknown problem {name!r}; known: {', '.join(PROBLEM_NAMES)}")
    unknown = set(overrides) - _FACTORY_KEYS - _REPLACE_KEYS - _SCHEDULE_KEYS
    if unknown:
        raise KeyError(f"unknown problem fields: {sorted(unknown)}")
    factory_kw = {k: overrides.pop(k) for k in list(overrides) if k in _FACTORY_KEYS}
    if name == "gbm-100" or name == "gbm-1":
        factory_kw.pop("d", None)  # dimension is part of the problem identity
    spec = _FACTORIES[name](**factory_kw)
    sched_kw = {k: overrides.pop(k) for k in list(overrides) if k in _SCHEDULE_KEYS}
    if sched_kw:
        spec = dataclasses.replace(spec, schedule=Schedule(
            base=sched_kw.get("gamma", spec.schedule.base),
            factor=sched_kw.get("lr_decay_factor", spec.schedule.factor),
            interval=sched_kw.get("lr_decay_interval", spec.schedule.interval),
        ))
    if "xi" in overrides:
        xi = overrides["xi"]
        overrides["xi"] = np.full(spec.d, float(xi)) if np.isscalar(xi) else np.asarray(xi, dtype=np.float64)
    if "checkpoints" in overrides:
        overrides["checkpoints"] = tuple(overrides["checkpoints"])
    if "y0_range" in overrides:
        overrides["y0_range"] = tuple(overrides["y0_range"])
    return dataclasses.replace(spec, **overrides) if overrides else spec


def load_problem_config(path) -> ProblemSpec:
    """Read a flat key-value config file; unknown keys are rejected."""
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    if not isinstance(raw, dict):
        raise ValueError(f"config {path} must be a flat key-value mapping")
    if "problem" not in raw:
        raise KeyError("config needs a 'problem' key")
    name = raw.pop("problem")
    return build_problem(name, **raw)
