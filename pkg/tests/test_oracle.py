from dataclasses import replace

import numpy as np
import pytest

import ptr_rational.oracle as oracle_mod
from ptr_rational.model import ProgramParams, UncertaintyModel
from ptr_rational.oracle import (
    OracleConfig,
    OracleConvergenceError,
    OracleError,
    OracleResult,
    grid_search_stage_one,
    oracle_expected_payoff,
    oracle_solve,
    q_grid,
)
from ptr_rational.stage_one import expected_q_t, expected_stage_one_payoff
from ptr_rational.stage_two import solve_stage_two_closed, stage_two_objective

FAST = OracleConfig(n_samples=2000, q_grid_step=0.02, seed=3, theta_prev_samples=0)


def test_config_validation():
    with pytest.raises(ValueError):
        OracleConfig(n_samples=50)
    with pytest.raises(ValueError):
        OracleConfig(q_grid_step=0.2)
    with pytest.raises(ValueError):
        OracleConfig(q_grid_step=0.0)
    with pytest.raises(ValueError):
        OracleConfig(theta_prev_samples=-1)


def test_default_config_values():
    cfg = OracleConfig()
    assert (cfg.n_samples, cfg.q_grid_step, cfg.theta_prev_samples) == (10_000, 0.01, 200)


@pytest.mark.parametrize(
    "p2,q_prev,q_t,profit,tol_q_t",
    [(0.15, 11.0, 5.0, 3.65, 0.05), (0.0, 8.0, 8.0, 3.20, 0.05), (0.45, 20.0, 0.125, 8.13, 0.15)],
)
def test_reference_rows(cp, um25, p2, q_prev, q_t, profit, tol_q_t):
    res = oracle_solve(ProgramParams(p2), cp, um25, OracleConfig(seed=1))
    assert isinstance(res, OracleResult)
    assert res.n_samples == 10_000
    assert abs(res.e_q_prev - q_prev) <= 0.02 + 4 * res.stderr_q_prev
    assert abs(res.e_q_t - q_t) <= tol_q_t
    assert abs(res.e_profit - profit) <= 0.03
    assert res.stderr_profit >= 0
    assert 0 <= res.e_q_prev <= cp.q_max and 0 <= res.e_q_t <= cp.q_max


def test_fixed_theta_prev_mode_hits_closed_form(cp, um25):
    cfg = replace(OracleConfig(seed=2), theta_prev_samples=0)
    for p2 in (0.0, 0.15, 0.26, 0.45):
        res = oracle_solve(ProgramParams(p2), cp, um25, cfg)
        sol = solve_stage_two_closed(ProgramParams(p2), cp, um25)
        assert res.e_q_prev == pytest.approx(sol.expected_q_prev, abs=1e-9)


def test_expected_payoff_examples(cp, um25):
    cfg = OracleConfig(n_samples=100_000, seed=4)
    mean, se = oracle_expected_payoff(8.0, ProgramParams(0.0), cp, um25, cfg)
    assert abs(mean - 1.60) <= 3 * se
    mean, se = oracle_expected_payoff(11.0, ProgramParams(0.15), cp, um25, cfg)
    assert abs(mean - expected_stage_one_payoff(11.0, ProgramParams(0.15), cp, um25)) <= 4 * se
    mean, se = oracle_expected_payoff(0.0, ProgramParams(0.3), cp, um25, cfg)
    assert abs(mean - 1.60) <= 3 * se
    # same draws with and without the rebate: zero baseline means no reduction is ever paid
    assert mean == oracle_expected_payoff(0.0, ProgramParams(0.0), cp, um25, cfg)[0]


def test_determinism(cp, um25):
    a = oracle_solve(ProgramParams(0.2), cp, um25, replace(FAST, theta_prev_samples=50))
    b = oracle_solve(ProgramParams(0.2), cp, um25, replace(FAST, theta_prev_samples=50))
    assert a == b
    c = oracle_solve(ProgramParams(0.2), cp, um25, replace(FAST, theta_prev_samples=50, seed=99))
    assert c != a


def test_workers_do_not_change_results(cp, um25):
    a = oracle_solve(ProgramParams(0.1), cp, um25, FAST)
    b = oracle_solve(ProgramParams(0.1), cp, um25, replace(FAST, workers=3))
    assert a == b


def test_inner_max_equivalence_bound(cp, um25):
    for p2 in (0.0, 0.05, 0.26, 0.35, 0.55):
        res = oracle_solve(ProgramParams(p2), cp, um25, FAST)
        assert 0.0 <= res.max_grid_gap <= cp.gamma * FAST.q_grid_step**2 / 2 + 1e-9


def test_grid_search_catches_a_wrong_policy(cp, um25, monkeypatch):
    real = oracle_mod.policy

    def lazy(q_prev, theta, pp, cp_):
        q, code = real(q_prev, theta, pp, cp_)
        return np.broadcast_to(cp_.q_bar + theta, np.shape(q)).copy(), code

    monkeypatch.setattr(oracle_mod, "policy", lazy)
    with pytest.raises(OracleError, match="disagree"):
        oracle_solve(ProgramParams(0.15), cp, um25, FAST)


def test_grid_search_matches_call_probability_mixture(cp, um25):
    grid = q_grid(cp.q_max, 0.05)
    theta = np.array([-1.0, 0.3, 1.9])
    called = grid_search_stage_one(grid, theta, ProgramParams(0.2, 1.0), cp)
    free = grid_search_stage_one(grid, theta, ProgramParams(0.2, 0.0), cp)
    mixed = grid_search_stage_one(grid, theta, ProgramParams(0.2, 0.4), cp)
    np.testing.assert_allclose(mixed, 0.4 * called + 0.6 * free, atol=1e-12)


def test_call_probability_in_oracle(cp, um25):
    res = oracle_solve(ProgramParams(0.15, 0.0), cp, um25, FAST)
    assert res.e_q_prev == pytest.approx(8.0, abs=FAST.q_grid_step)
    assert res.e_q_t == pytest.approx(8.0, abs=0.05)


def test_triangular_density_runs(cp):
    um = UncertaintyModel.symmetric(2.0, "triangular")
    res = oracle_solve(ProgramParams(0.15), cp, um, FAST)
    # all draws stay in the full-reduction strategy, so the optimum is the same as under the uniform density
    assert res.e_q_prev == pytest.approx(11.0, abs=FAST.q_grid_step)


def test_stderr_scales_with_sample_size(cp, um25):
    ratios = []
    for trial in range(20):
        small = oracle_solve(ProgramParams(0.15), cp, um25,
                             OracleConfig(n_samples=400, q_grid_step=0.1, seed=trial, theta_prev_samples=0))
        big = oracle_solve(ProgramParams(0.15), cp, um25,
                           OracleConfig(n_samples=1600, q_grid_step=0.1, seed=1000 + trial, theta_prev_samples=0))
        ratios.append(big.stderr_profit / small.stderr_profit)
    assert 0.4 <= np.mean(ratios) <= 0.6


def test_convergence_check_passes_and_flags(cp, um25, monkeypatch):
    cfg = replace(FAST, check_convergence=True)
    assert oracle_solve(ProgramParams(0.15), cp, um25, cfg).converged is True

    real = oracle_mod._solve_once

    def skewed(pp, cp_, um_, cfg_, replica):
        res = real(pp, cp_, um_, cfg_, replica)
        return replace(res, e_profit=res.e_profit + replica * 1.0)

    monkeypatch.setattr(oracle_mod, "_solve_once", skewed)
    with pytest.raises(OracleConvergenceError):
        oracle_solve(ProgramParams(0.15), cp, um25, cfg)


def _error_vs_closed(cp, um, step, n, seed):
    cfg = OracleConfig(n_samples=n, q_grid_step=step, seed=seed, theta_prev_samples=0, grid_check_samples=200)
    total = 0.0
    for p2 in (0.0, 0.15, 0.26, 0.45):
        prog = ProgramParams(p2)
        sol = solve_stage_two_closed(prog, cp, um)
        res = oracle_solve(prog, cp, um, cfg)
        total += abs(res.e_q_prev - sol.expected_q_prev)
        total += abs(res.e_q_t - expected_q_t(sol.expected_q_prev, prog, cp, um))
        total += abs(res.e_profit - stage_two_objective(sol.expected_q_prev, 0.0, prog, cp, um))
    return total


@pytest.mark.slow
def test_error_shrinks_under_refinement(cp, um25):
    # the error is dominated by sampling noise, so compare the mean over independent seeds per level
    levels = [(0.04, 250), (0.02, 2_500), (0.01, 25_000)]
    seeds = (17, 18, 19)
    errors = [np.mean([_error_vs_closed(cp, um25, step, n, s) for s in seeds]) for step, n in levels]
    assert errors[0] >= errors[1] >= errors[2], errors
