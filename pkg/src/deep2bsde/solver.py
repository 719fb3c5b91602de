"""Training loop, multi-run experiment harness and result aggregation.

One run repeats: draw a Brownian batch, roll the forward states, build the
loss tape, backpropagate, update batch-norm statistics, take an optimizer
step. Estimates and losses are recorded at the requested checkpoints
(before the update, so checkpoint m reports the state after exactly m
updates). Experiments aggregate R independent runs into per-checkpoint
:class:`RunStats` rows and emit them as CSV.

Determinism: a run is a pure function of (problem, iterations, seed); with
timing disabled the emitted CSV is byte-identical across invocations.
Wall-clock runtimes are recorded by default and are the one intentionally
nondeterministic column.
"""

from __future__ import annotations

import hashlib
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields

import numpy as np

from .dynamics import TimeGrid, roll_forward, sample_brownian
from .network import BatchNormState, Layout, NetworkConfig, init_theta
from .optim import AdamConfig, OptimState, adam_step_inplace, schedule_eval
from .problems import ProblemSpec, build_problem
from .scheme import estimate_value, loss_and_grad

__all__ = [
    "TrainingDiverged",
    "TrainRecord",
    "TrainResult",
    "RunStats",
    "train",
    "aggregate",
    "emit_csv",
    "parse_csv",
    "emit_loss_curves",
    "run_experiment",
    "Deep2BSDESolver",
]


class TrainingDiverged(FloatingPointError):
    """Raised when the training loss stops being finite."""

    def __init__(self, iteration, loss_tail):
        super().__init__(
            f"non-finite loss at iteration {iteration}; recent losses: {loss_tail}"
        )
        self.iteration = iteration
        self.loss_tail = loss_tail


@dataclass(frozen=True)
class TrainRecord:
    iteration: int
    estimate: float
    loss: float
    elapsed: float


@dataclass
class TrainResult:
    problem: str
    seed: int
    records: list
    theta: np.ndarray
    layout: Layout
    bn_state: BatchNormState | None
    losses: list | None = None


def _checkpoint_set(problem, iterations, checkpoints):
    if checkpoints is None:
        checkpoints = [c for c in problem.checkpoints if c <= iterations]
        if iterations not in checkpoints:
            checkpoints.append(iterations)
    cps = sorted(set(int(c) for c in checkpoints))
    if cps and (cps[0] < 0 or cps[-1] > iterations):
        raise ValueError(f"checkpoints {cps} outside [0, {iterations}]")
    return cps


def train(problem: ProblemSpec, seed: int = 0, iterations: int | None = None,
          checkpoints=None, collect_losses: bool = False, timing: bool = True) -> TrainResult:
    """One independent training run.

    The estimate recorded at checkpoint m is theta[0] in the single-path
    framework and the value-head network at xi in the minibatch framework.
    """
    iterations = problem.iterations if iterations is None else int(iterations)
    cps = set(_checkpoint_set(problem, iterations, checkpoints))
    cfg = NetworkConfig(
        d=problem.d, N=problem.N, framework=problem.framework,
        use_batchnorm=problem.use_batchnorm and problem.framework == "general",
    )
    layout = Layout(cfg)
    theta = init_theta(layout, np.random.default_rng((seed, 0)), problem.y0_range)
    bn_state = BatchNormState() if cfg.use_batchnorm else None
    grid = TimeGrid(problem.T, problem.N)

    adam_cfg = AdamConfig(epsilon=problem.epsilon, schedule=problem.schedule)
    opt_state = OptimState.zeros(layout.nu) if problem.optimizer == "adam" else None
    scratch = np.empty(layout.nu)

    records, losses, tail = [], [], []
    t0 = time.perf_counter()
    for m in range(iterations + 1):
        bb = sample_brownian(problem.d, grid, problem.J, seed=(seed, 1, m))
        paths = roll_forward(problem.xi, problem.H, bb)
        loss, grad, pending = loss_and_grad(theta, layout, problem, paths, bn_state)
        if not np.isfinite(loss):
            raise TrainingDiverged(m, tail[-10:])
        tail.append(round(loss, 6))
        if collect_losses:
            losses.append(loss)
        if m in cps:
            elapsed = time.perf_counter() - t0 if timing else 0.0
            records.append(TrainRecord(m, estimate_value(theta, layout, problem, bn_state),
                                       loss, elapsed))
        if m == iterations:
            break
        for site, mu, var in pending:
            bn_state.update(site, mu, var)
        if problem.optimizer == "adam":
            adam_step_inplace(opt_state, theta, grad, adam_cfg, scratch)
        else:
            theta -= schedule_eval(problem.schedule, m) * grad
    return TrainResult(problem.name, seed, records, theta, layout, bn_state,
                       losses if collect_losses else None)


# -- aggregation ---------------------------------------------------------------


@dataclass(frozen=True)
class RunStats:
    """Per-checkpoint aggregates over independent runs (divisor-R stds)."""

    iteration: int
    mean_estimate: float
    std_estimate: float
    rel_l1_error: float
    std_rel_error: float
    mean_loss: float
    std_loss: float
    mean_runtime_s: float


def aggregate(trajectories, reference: float) -> list[RunStats]:
    """Collapse per-run checkpoint records into table rows.

    The relative error is the mean over runs of |estimate - reference| /
    |reference|; standard deviations are uncorrected (divisor R).
    """
    if not trajectories:
        raise ValueError("need at least one trajectory")
    if reference == 0:
        raise ValueError("relative error is undefined for reference 0")
    iter_rows = [tuple(r.iteration for r in t) for t in trajectories]
    if len(set(iter_rows)) != 1:
        raise ValueError("trajectories have mismatched checkpoints")
    out = []
    for k, m in enumerate(iter_rows[0]):
        est = np.array([t[k].estimate for t in trajectories])
        loss = np.array([t[k].loss for t in trajectories])
        elapsed = np.array([t[k].elapsed for t in trajectories])
        rel = np.abs(est - reference) / abs(reference)
        out.append(RunStats(
            iteration=m,
            mean_estimate=float(est.mean()), std_estimate=float(est.std()),
            rel_l1_error=float(rel.mean()), std_rel_error=float(rel.std()),
            mean_loss=float(loss.mean()), std_loss=float(loss.std()),
            mean_runtime_s=float(elapsed.mean()),
        ))
    return out


_CSV_COLUMNS = [f.name for f in fields(RunStats)]


def emit_csv(stats, path, metadata: dict | None = None) -> None:
    """Stats table with '#'-prefixed metadata lines before the header."""
    lines = []
    for key in sorted(metadata or {}):
        lines.append(f"# {key}={metadata[key]}")
    lines.append(",".join(_CSV_COLUMNS))
    for row in stats:
        lines.append(",".join(repr(getattr(row, c)) for c in _CSV_COLUMNS))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def parse_csv(path):
    """Inverse of :func:`emit_csv`; returns (metadata, stats rows)."""
    metadata, rows, header = {}, [], None
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, _, val = line[1:].strip().partition("=")
                metadata[key] = val
                continue
            if header is None:
                header = line.split(",")
                if header != _CSV_COLUMNS:
                    raise ValueError(f"unexpected CSV header {header}")
                continue
            vals = line.split(",")
            rows.append(RunStats(iteration=int(vals[0]),
                                 **{c: float(v) for c, v in zip(_CSV_COLUMNS[1:], vals[1:])}))
    return metadata, rows


def emit_loss_curves(losses_per_run, path) -> None:
    """Per-iteration loss of every run, one column per run (for plotting)."""
    runs = len(losses_per_run)
    lines = ["iteration," + ",".join(f"run{r}" for r in range(runs))]
    for m in range(len(losses_per_run[0])):
        lines.append(f"{m}," + ",".join(repr(losses_per_run[r][m]) for r in range(runs)))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


# -- experiments ----------------------------------------------------------------


def _run_one(name, overrides, seed, iterations, checkpoints, collect_losses, timing):
    problem = build_problem(name, **overrides)
    return train(problem, seed=seed, iterations=iterations, checkpoints=checkpoints,
                 collect_losses=collect_losses, timing=timing)


def config_digest(name, overrides, runs, base_seed, iterations) -> str:
    blob = json.dumps([name, overrides, runs, base_seed, iterations],
                      sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def run_experiment(name: str, overrides: dict | None = None, runs: int = 10,
                   base_seed: int = 42, iterations: int | None = None,
                   checkpoints=None, collect_losses: bool = False,
                   timing: bool = True, workers: int = 1):
    """R independent runs of one problem; returns (stats, results, problem).

    Run r uses seed ``base_seed + r``. Workers > 1 executes runs in
    parallel processes; results are identical to sequential execution.
    """
    if runs < 1:
        raise ValueError("need at least one run")
    overrides = overrides or {}
    problem = build_problem(name, **overrides)
    seeds = [base_seed + r for r in range(runs)]
    args = [(name, overrides, s, iterations, checkpoints, collect_losses, timing)
            for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_one, *zip(*args)))
    else:
        results = [_run_one(*a) for a in args]
    stats = aggregate([r.records for r in results], problem.reference)
    return stats, results, problem


# -- estimator-style facade ------------------------------------------------------


class Deep2BSDESolver:
    """Scikit-learn-flavored wrapper: configure, ``fit()``, read ``value_``.

    The solver consumes no external data (paths are simulated internally),
    so ``fit`` takes no arrays; fitted attributes carry the trailing
    underscore convention.
    """

    _PARAM_NAMES = (
        "problem", "runs", "base_seed", "iterations", "batch_size", "gamma",
        "lr_decay_factor", "lr_decay_interval", "epsilon", "use_batchnorm",
        "checkpoints", "timing", "workers",
    )

    def __init__(self, problem: str = "allen-cahn-20", *, runs: int = 1,
                 base_seed: int = 42, iterations: int | None = None,
                 batch_size: int | None = None, gamma: float | None = None,
                 lr_decay_factor: float | None = None, lr_decay_interval: int | None = None,
                 epsilon: float | None = None, use_batchnorm: bool | None = None,
                 checkpoints=None, timing: bool = True, workers: int = 1):
        self.problem = problem
        self.runs = runs
        self.base_seed = base_seed
        self.iterations = iterations
        self.batch_size = batch_size
        self.gamma = gamma
        self.lr_decay_factor = lr_decay_factor
        self.lr_decay_interval = lr_decay_interval
        self.epsilon = epsilon
        self.use_batchnorm = use_batchnorm
        self.checkpoints = checkpoints
        self.timing = timing
        self.workers = workers

    def get_params(self, deep: bool = True) -> dict:
        return {k: getattr(self, k) for k in self._PARAM_NAMES}

    def set_params(self, **params) -> "Deep2BSDESolver":
        for k, v in params.items():
            if k not in self._PARAM_NAMES:
                raise ValueError(f"unknown parameter {k!r}")
            setattr(self, k, v)
        return self

    def problem_overrides(self) -> dict:
        out = {}
        if self.batch_size is not None:
            out["J"] = self.batch_size
        for key, name in (("gamma", "gamma"), ("lr_decay_factor", "lr_decay_factor"),
                          ("lr_decay_interval", "lr_decay_interval"),
                          ("epsilon", "epsilon"), ("use_batchnorm", "use_batchnorm")):
            val = getattr(self, key)
            if val is not None:
                out[name] = val
        return out

    def fit(self, X=None, y=None) -> "Deep2BSDESolver":
        stats, results, problem = run_experiment(
            self.problem, self.problem_overrides(), runs=self.runs,
            base_seed=self.base_seed, iterations=self.iterations,
            checkpoints=self.checkpoints, timing=self.timing, workers=self.workers,
        )
        self.problem_ = problem
        self.stats_ = stats
        self.results_ = results
        self.value_ = stats[-1].mean_estimate
        self.rel_error_ = stats[-1].rel_l1_error
        self.theta_ = results[0].theta
        self.layout_ = results[0].layout
        return self

    def estimate(self) -> float:
        if not hasattr(self, "value_"):
            raise RuntimeError("call fit() first")
        return self.value_
