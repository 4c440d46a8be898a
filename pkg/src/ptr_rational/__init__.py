"""Rational consumer decisions under a peak time rebate program.

Closed-form two-stage solution, a Monte Carlo / grid-search oracle that checks
it, and an n-period backward-induction engine.
"""
from .model import (
    ConsumerParams,
    ProgramParams,
    Strategy,
    UncertaintyModel,
    payoff_u,
    rational_no_program,
    rebate,
    utility_g,
)
from .stage_one import (
    CaseLabel,
    StageOneDecision,
    classify_case,
    expected_q_t,
    expected_stage_one_payoff,
    optimal_q_t,
)
from .stage_two import Branch, StageTwoSolution, local_maxima_by_region, solve_stage_two_closed, stage_two_objective
from .oracle import OracleConfig, OracleResult, oracle_expected_payoff, oracle_solve
from .dp import GridSpec, HorizonSpec, PolicyTable, evaluate_policy, load_policy, save_policy, solve_backward

__all__ = [
    "Branch",
    "CaseLabel",
    "ConsumerParams",
    "GridSpec",
    "HorizonSpec",
    "OracleConfig",
    "OracleResult",
    "PolicyTable",
    "ProgramParams",
    "StageOneDecision",
    "StageTwoSolution",
    "Strategy",
    "UncertaintyModel",
    "classify_case",
    "evaluate_policy",
    "expected_q_t",
    "expected_stage_one_payoff",
    "load_policy",
    "local_maxima_by_region",
    "optimal_q_t",
    "oracle_expected_payoff",
    "oracle_solve",
    "payoff_u",
    "rational_no_program",
    "rebate",
    "save_policy",
    "solve_backward",
    "stage_two_objective",
    "utility_g",
]
