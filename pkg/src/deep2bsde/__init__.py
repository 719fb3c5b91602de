"""Deep 2BSDE solver for high-dimensional fully nonlinear parabolic PDEs.

The forward recursion of the merged PDE/2BSDE system is unrolled on a
reverse-mode tape, per-step networks supply the Hessian and drift
coefficients, and stochastic gradient descent or Adam fits the flat
parameter vector to the terminal-mismatch loss. Independent oracle solvers
(closed forms, branching diffusion, log-transform Monte Carlo, finite
differences) certify every benchmark value.
"""

from .autodiff import ShapeError, Tape
from .dynamics import BrownianBatch, PathBatch, TimeGrid, roll_forward, sample_brownian
from .network import (
    BatchNormState,
    Layout,
    NetworkConfig,
    ParamVector,
    load_checkpoint,
    save_checkpoint,
)
from .optim import AdamConfig, OptimState, Schedule, adam_step, schedule_eval, sgd_step
from .oracles import (
    OracleResult,
    allen_cahn_branching,
    bsb_analytic,
    gbm1d_finite_difference,
    gbm_analytic,
    hjb_cole_hopf,
)
from .problems import (
    PROBLEM_NAMES,
    ProblemSpec,
    SigmaBarRule,
    build_problem,
    load_problem_config,
    make_allen_cahn_20,
    make_allen_cahn_50,
    make_bsb_100,
    make_gbm,
    make_hjb_100,
    to_initial_value_form,
)
from .scheme import bsb_consistency_losses, estimate_value, loss_and_grad
from .solver import (
    Deep2BSDESolver,
    RunStats,
    TrainingDiverged,
    aggregate,
    emit_csv,
    parse_csv,
    run_experiment,
    train,
)

__version__ = "0.1.0"
