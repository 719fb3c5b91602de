"""Acceptance gate.

Every criterion prints one ``[PASS]``/``[FAIL]`` line (run pytest with -s to
see them live) and asserts at its stated tolerance. Order: fast property
checks, then the oracle values at full sample counts, then the training
reproductions (the slow part; several hours in total).

Run only the fast part with:  pytest tests/test_acceptance.py -k "property"
"""

import time

import numpy as np
import pytest

from deep2bsde.dynamics import TimeGrid
from deep2bsde.network import Layout, NetworkConfig
from deep2bsde.optim import AdamConfig, OptimState, Schedule, adam_step
from deep2bsde.oracles import (
    allen_cahn_branching,
    bsb_analytic,
    gbm1d_finite_difference,
    gbm_analytic,
    hjb_cole_hopf,
)
from deep2bsde.problems import build_problem, to_initial_value_form
from deep2bsde.scheme import bsb_consistency_losses
from deep2bsde.solver import emit_csv, run_experiment

from util import assert_grads_close, fd_gradients, program_gradients, program_value, random_program

XI_100 = np.tile([1.0, 0.5], 50)


def check(name, ok, detail):
    print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}", flush=True)
    assert ok, f"{name}: {detail}"


def train_criterion(name, runs, tolerance, iterations=None, base_seed=1):
    stats, _, problem = run_experiment(name, runs=runs, base_seed=base_seed,
                                       iterations=iterations, timing=True)
    err = stats[-1].rel_l1_error
    check(f"training {name}", err <= tolerance,
          f"mean rel error {err:.5f} vs {problem.reference} over {runs} seeds "
          f"(tolerance {tolerance})")
    return stats


# -- 3. property-based suite (fast, no training) -------------------------------------


def test_property_autodiff_vs_finite_differences():
    checked = 0
    seed = 0
    while checked < 100:
        rng = np.random.default_rng(90_000 + seed)
        seed += 1
        program, leaves = random_program(rng, include_batchnorm=checked % 4 == 0)
        if abs(program_value(program, leaves)) > 100.0:
            continue
        assert_grads_close(program_gradients(program, leaves),
                           fd_gradients(program, leaves), rtol=1e-5, atol=1e-6)
        checked += 1
    check("property autodiff-vs-fd", True, f"{checked} randomized graphs, rel tol 1e-5")


def test_property_layout_disjointness():
    for d, N in ((1, 2), (2, 3), (5, 4), (20, 20)):
        for framework, bn in (("specific", False), ("general", True)):
            lay = Layout(NetworkConfig(d=d, N=N, framework=framework, use_batchnorm=bn))
            owned = np.zeros(lay.nu, dtype=int)
            for _, s, e in lay.blocks():
                owned[s:e] += 1
            assert owned.max() <= 1, (d, N, framework)
    check("property layout-disjointness", True, "(d,N) in {(1,2),(2,3),(5,4),(20,20)}")


def test_property_adam_first_step_hand_value():
    cfg = AdamConfig(epsilon=1e-8, schedule=Schedule.constant(0.1))
    _, theta = adam_step(OptimState.zeros(1), np.zeros(1), np.ones(1), cfg)
    expected = 0.1 * 1.0 / (1.0 + 1e-8)
    err = abs(-theta[0] - expected)
    check("property adam-first-step", err < 1e-12, f"|update - hand value| = {err:.2e}")


def test_property_transform_involution():
    p = build_problem("bsb-100")
    q = to_initial_value_form(to_initial_value_form(p))
    rng = np.random.default_rng(77)
    worst = 0.0
    for _ in range(20):
        t = rng.uniform(0, p.T)
        x, z = rng.normal(size=100), rng.normal(size=100)
        S = rng.normal(size=(100, 100))
        y = rng.normal()
        a, b = p.f(t, x, y, z, S), q.f(t, x, y, z, S)
        worst = max(worst, abs(a - b) / max(1.0, abs(a)))
    check("property involution", worst < 1e-12, f"max rel deviation {worst:.2e}")


def test_property_replay_determinism_csv(tmp_path):
    blobs = []
    for _ in range(2):
        stats, _, problem = run_experiment("gbm-1", runs=2, base_seed=11,
                                           iterations=3, checkpoints=[0, 3], timing=False)
        path = tmp_path / "replay.csv"
        emit_csv(stats, path, {"problem": problem.name, "seed": 11})
        blobs.append(path.read_bytes())
    check("property replay-determinism", blobs[0] == blobs[1],
          f"{len(blobs[0])} identical CSV bytes")


def test_property_bsb_consistency_ratios():
    p = build_problem("bsb-100")
    losses = bsb_consistency_losses(p, [10, 20, 40, 80], J=1000, seed=2023)
    ratios = [losses[n] / losses[2 * n] for n in (10, 20, 40)]
    ok = all(1.5 <= r <= 2.8 for r in ratios)
    check("property bsb-consistency", ok,
          "loss ratios N->2N " + ", ".join(f"{r:.2f}" for r in ratios) + " within [1.5, 2.8]")


# -- 1. oracle values -----------------------------------------------------------------


def test_oracle_bsb_analytic_value_and_runtime():
    t0 = time.perf_counter()
    for _ in range(100):
        val = bsb_analytic(0.0, XI_100)
    per_call = (time.perf_counter() - t0) / 100
    check("oracle bsb-analytic", round(val, 4) == 77.1049 and per_call < 1e-3,
          f"value {val:.6f} (needs 77.1049 to 4 d.p.), {per_call * 1e6:.0f} us/call")


def test_oracle_gbm_analytic_value_and_runtime():
    t0 = time.perf_counter()
    for _ in range(100):
        val = gbm_analytic(0.0, XI_100, c=1.0, sigma_max=1.0, T=1.0, d=100)
    per_call = (time.perf_counter() - t0) / 100
    check("oracle gbm-analytic", val == 162.5 and per_call < 1e-3,
          f"value {val} (needs exactly 162.5), {per_call * 1e6:.0f} us/call")


def test_oracle_branching_d20():
    res = allen_cahn_branching(np.zeros(20), T=0.3, kappa=0.5, M=10_000_000, seed=41)
    err = abs(res.value - 0.30879)
    check("oracle branching-d20", err <= 2e-3,
          f"{res.value:.5f} +/- {res.std_error:.1e} vs 0.30879 (|diff| {err:.1e} <= 2e-3)")


def test_oracle_branching_d50():
    res = allen_cahn_branching(np.zeros(50), T=0.3, kappa=1.0, M=10_000_000, seed=43)
    err = abs(res.value - 0.09909)
    check("oracle branching-d50", err <= 2e-3,
          f"{res.value:.5f} +/- {res.std_error:.1e} vs 0.09909 (|diff| {err:.1e} <= 2e-3)")


def test_oracle_cole_hopf_d100():
    res = hjb_cole_hopf(np.zeros(100), T=1.0, M=10_000_000, seed=47)
    err = abs(res.value - 4.5901)
    check("oracle cole-hopf-d100", err <= 5e-3,
          f"{res.value:.5f} +/- {res.std_error:.1e} vs 4.5901 (|diff| {err:.1e} <= 5e-3)")


def test_oracle_gbm1d_finite_difference():
    # The stored reference is not reachable from this problem: every
    # fixed-volatility value is a lower bound on the sup-expectation, and
    # already sigma = sigma_min gives 0.9298 (Monte Carlo confirmed), which
    # exceeds the stored 0.90471 by 14 standard tolerances. Our solver
    # converges to 0.93145 on refined grids. The criterion is asserted as
    # stated and fails honestly.
    from deep2bsde.problems import g_sigmoid_sq
    res = gbm1d_finite_difference(-2.0, 1.0, 1.0, 1.0 / np.sqrt(2.0), g_sigmoid_sq)
    err = abs(res.value - 0.90471)
    check("oracle gbm1d-fd", err <= 2e-3,
          f"{res.value:.5f} vs stored 0.90471 (|diff| {err:.1e} <= 2e-3); "
          f"independent bound: value must be >= 0.9298")


# -- 2. training reproduction (slow) ---------------------------------------------------


def test_training_allen_cahn_20_and_loss_medians():
    stats, results, problem = run_experiment("allen-cahn-20", runs=10, base_seed=1)
    err = stats[-1].rel_l1_error
    check("training allen-cahn-20", err <= 0.05,
          f"mean rel error {err:.5f} vs {problem.reference} over 10 seeds (tolerance 0.05)")
    # median loss over the 10 runs is non-increasing across checkpoint pairs
    # after iteration 1000 (medians, not per-run trajectories)
    meds = {}
    for it in (1000, 2000, 3000, 4000, 5000):
        meds[it] = float(np.median([
            [r.loss for r in res.records if r.iteration == it][0] for res in results]))
    pairs = list(zip((1000, 2000, 3000, 4000), (2000, 3000, 4000, 5000)))
    ok = all(meds[b] <= meds[a] + 1e-12 for a, b in pairs)
    check("training allen-cahn-20 loss medians", ok,
          " -> ".join(f"{meds[i]:.5f}" for i in (1000, 2000, 3000, 4000, 5000)))


def test_training_gbm_1():
    train_criterion("gbm-1", runs=5, tolerance=0.02)


def test_training_allen_cahn_50():
    train_criterion("allen-cahn-50", runs=3, tolerance=0.05)


def test_training_bsb_100():
    train_criterion("bsb-100", runs=3, tolerance=0.05)


def test_training_gbm_100():
    train_criterion("gbm-100", runs=3, tolerance=0.01)


def test_training_hjb_100():
    train_criterion("hjb-100", runs=3, tolerance=0.02)
