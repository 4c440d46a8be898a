"""Event-period (stage one) response to a rebate given the baseline q_prev.

The optimal load is piecewise in the realized shock theta: keep the ideal load
(A), cut to q* - p2/gamma below the baseline (B), or drop to zero (C). When the
consumer is not called the ideal load is kept (D).

Expectations over theta are exact: under the uniform density each piece of the
payoff is a polynomial of degree <= 2 in theta, integrated in closed form.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import (
    ConsumerParams,
    ProgramParams,
    Strategy,
    UncertaintyModel,
    _raw_payoff,
    check_support,
)

_STRATEGY_CODES = (Strategy.A, Strategy.B, Strategy.C, Strategy.D)


@dataclass(frozen=True)
class StageOneDecision:
    strategy: Strategy
    q_t: float


@dataclass(frozen=True)
class CaseLabel:
    case_id: str
    region: str


def _require_binary_call(pp: ProgramParams) -> None:
    if not pp.is_binary:
        raise ValueError("closed-form stage-one results need call in {0, 1}")


def _require_uniform(um: UncertaintyModel) -> None:
    if um.kind != "uniform":
        raise ValueError("closed-form expectations are only available for the uniform density")


def strategy_splits(q_prev, pp: ProgramParams, cp: ConsumerParams):
    """Return ``(c_split, ab_split)``: C on theta <= c_split, B up to ab_split, A above.

    With the baseline at or above p2/(2 gamma) the splits are p2/gamma - q_bar and the
    A/B indifference point q_prev - q_bar + p2/(2 gamma). Below it, reducing to a
    positive load never beats keeping q*, and C is preferred over A exactly when
    p2 q_prev >= gamma q*^2 / 2, i.e. theta <= sqrt(2 p2 q_prev / gamma) - q_bar.
    """
    b = np.asarray(q_prev, dtype=float)
    g, qb, p2 = cp.gamma, cp.q_bar, pp.p2
    if p2 == 0.0:
        # no rebate: reducing never pays, A everywhere
        never = np.full(b.shape, -np.inf)
        return never, never
    half = p2 / (2.0 * g)
    tau = b - qb + half
    c_thr = p2 / g - qb
    sigma = np.sqrt(np.maximum(2.0 * p2 * b / g, 0.0)) - qb
    normal = b >= half
    c_split = np.where(normal, c_thr, sigma)
    ab_split = np.where(normal, tau, sigma)
    return c_split, ab_split


def indifference_theta(q_prev: float, pp: ProgramParams, cp: ConsumerParams) -> float:
    """Shock level at which keeping q* and reducing by p2/gamma pay the same."""
    if pp.call != 1.0:
        raise ValueError("indifference threshold is defined for a called consumer (call = 1)")
    return q_prev - cp.q_bar + pp.p2 / (2.0 * cp.gamma)


def policy(q_prev, theta, pp: ProgramParams, cp: ConsumerParams):
    """Vectorized optimal load; returns ``(q, code)`` with code indexing A, B, C, D."""
    b = np.asarray(q_prev, dtype=float)
    theta = np.asarray(theta, dtype=float)
    q_star = cp.q_bar + theta
    if pp.call == 0.0:
        q = np.clip(q_star + 0.0 * b, 0.0, cp.q_max)
        return q, np.full(q.shape, 3, dtype=np.int8)
    c_split, ab_split = strategy_splits(b, pp, cp)
    code = np.where(theta <= c_split, 2, np.where(theta <= ab_split, 1, 0)).astype(np.int8)
    q = np.where(code == 0, q_star, np.where(code == 1, q_star - pp.p2 / cp.gamma, 0.0))
    return np.clip(q, 0.0, cp.q_max), code


def policy_payoff(q_prev, theta, pp: ProgramParams, cp: ConsumerParams):
    """Event-period payoff achieved by :func:`policy`, plus the loads themselves."""
    q, _ = policy(q_prev, theta, pp, cp)
    return _raw_payoff(q, np.asarray(theta, dtype=float), q_prev, pp.p2, pp.call, cp), q


def optimal_q_t(
    q_prev: float,
    theta_t: float,
    pp: ProgramParams,
    cp: ConsumerParams,
    um: UncertaintyModel | None = None,
) -> StageOneDecision:
    _require_binary_call(pp)
    if not 0.0 <= q_prev <= cp.q_max:
        raise ValueError(f"q_prev={q_prev} outside [0, {cp.q_max}]")
    if um is not None and not um.contains(theta_t):
        raise ValueError(f"theta_t={theta_t} outside support [{um.theta_lo}, {um.theta_hi}]")
    q, code = policy(q_prev, theta_t, pp, cp)
    return StageOneDecision(_STRATEGY_CODES[int(code)], float(q))


def _poly_integral(c0, c1, c2, lo, hi):
    hi = np.maximum(hi, lo)
    return c0 * (hi - lo) + c1 * (hi**2 - lo**2) / 2.0 + c2 * (hi**3 - lo**3) / 3.0


def _strategy_intervals(b, pp, cp, um):
    lo, hi = um.theta_lo, um.theta_hi
    c_split, ab_split = strategy_splits(b, pp, cp)
    c_hi = np.clip(c_split, lo, hi)
    b_hi = np.clip(ab_split, lo, hi)
    b_lo = c_hi
    b_hi = np.maximum(b_hi, b_lo)
    return (lo, c_hi), (b_lo, b_hi), (b_hi, hi)


def expected_q_t(q_prev, pp: ProgramParams, cp: ConsumerParams, um: UncertaintyModel):
    """Exact E[q_t] under the uniform shock, integrating the pointwise policy."""
    _require_binary_call(pp)
    _require_uniform(um)
    check_support(cp, um)
    b = np.asarray(q_prev, dtype=float)
    if pp.call == 0.0:
        out = np.full(b.shape, cp.q_bar)
    else:
        _, (bl, bh), (al, ah) = _strategy_intervals(b, pp, cp, um)
        qb = cp.q_bar
        total = _poly_integral(qb - pp.p2 / cp.gamma, 1.0, 0.0, bl, bh)
        total = total + _poly_integral(qb, 1.0, 0.0, al, ah)
        out = total / um.width
    return float(out) if out.ndim == 0 else out


def coarse_expected_q_t(q_prev: float, pp: ProgramParams, cp: ConsumerParams) -> float:
    """Strategy-wise expected load read off the baseline alone (q_bar, q_bar - p2/gamma or 0)."""
    _require_binary_call(pp)
    if pp.call == 0.0:
        return cp.q_bar
    g, qb, p2 = cp.gamma, cp.q_bar, pp.p2
    if p2 <= 2.0 * g * (qb - q_prev):
        return qb
    if p2 <= qb * g:
        return qb - p2 / g
    return 0.0


def participation_probability(q_prev, pp: ProgramParams, cp: ConsumerParams, um: UncertaintyModel):
    """P(strategy B or C); the slope of the expected stage-one payoff in q_prev is p2 times this."""
    if pp.call == 0.0 or pp.p2 == 0.0:
        return np.zeros_like(np.asarray(q_prev, dtype=float))
    _, ab_split = strategy_splits(q_prev, pp, cp)
    return np.clip(ab_split - um.theta_lo, 0.0, um.width) / um.width


def expected_stage_one_payoff(q_prev, pp: ProgramParams, cp: ConsumerParams, um: UncertaintyModel):
    """Exact E[U_t(q_t°, theta_t, q_prev)] under the uniform shock."""
    _require_binary_call(pp)
    _require_uniform(um)
    check_support(cp, um)
    b = np.asarray(q_prev, dtype=float)
    g, p, qb, k, p2 = cp.gamma, cp.retail_price, cp.q_bar, cp.k, pp.p2
    base = k - p * qb
    if pp.call == 0.0:
        out = np.full(b.shape, base)  # zero-mean shock
        return float(out) if out.ndim == 0 else out
    (cl, ch), (bl, bh), (al, ah) = _strategy_intervals(b, pp, cp, um)
    total = _poly_integral(base, -p, 0.0, al, ah)
    total = total + _poly_integral(base + p2**2 / (2 * g) + p2 * (b - qb), -(p + p2), 0.0, bl, bh)
    total = total + _poly_integral(k - 0.5 * g * qb**2 - p * qb + p2 * b, -(g * qb + p), -0.5 * g, cl, ch)
    out = total / um.width
    return float(out) if out.ndim == 0 else out


def _at_or_above(x: float, edge: float) -> bool:
    return x >= edge or math.isclose(x, edge, rel_tol=1e-12, abs_tol=1e-12)


def case_id(pp: ProgramParams, cp: ConsumerParams, um: UncertaintyModel) -> str:
    """Where the zero-load threshold p2/gamma - q_bar sits against the support (boundaries within rounding count as reached)."""
    c_thr = pp.p2 / cp.gamma - cp.q_bar
    if not _at_or_above(c_thr, um.theta_lo):
        return "Case1"
    if _at_or_above(c_thr, um.theta_hi):
        return "Case3"
    return "Case2"


def _region_label(q_prev: float, pp, cp, um, case: str) -> str:
    (cl, ch), (bl, bh), (al, ah) = _strategy_intervals(np.float64(q_prev), pp, cp, um)
    eps = 1e-12 * max(1.0, um.width)
    letters = ""
    if ah - al > eps:
        letters += "A"
    if bh - bl > eps:
        letters += "B"
    if ch - cl > eps:
        letters += "C"
    if case == "Case3" and letters == "AC":
        return "AC'"
    return letters


def classify_case(pp: ProgramParams, cp: ConsumerParams, um: UncertaintyModel, q_prev: float) -> CaseLabel:
    """Case from where p2/gamma - q_bar sits against the support; region = strategies with mass."""
    if pp.call != 1.0:
        raise ValueError("case classification assumes the consumer is called (call = 1)")
    case = case_id(pp, cp, um)
    q_prev = float(np.clip(q_prev, 0.0, cp.q_max))
    return CaseLabel(case, _region_label(q_prev, pp, cp, um, case))


def region_breakpoints(pp: ProgramParams, cp: ConsumerParams, um: UncertaintyModel) -> list[float]:
    """q_prev values in (0, q_max) where the set of strategies with positive mass may change."""
    g, qb, p2 = cp.gamma, cp.q_bar, pp.p2
    half = p2 / (2.0 * g)
    cands = [qb + um.theta_lo - half, qb + um.theta_hi - half, half]
    if p2 > 0:
        cands += [g * (qb + um.theta_lo) ** 2 / (2 * p2), g * (qb + um.theta_hi) ** 2 / (2 * p2)]
    pts = sorted({c for c in cands if 0.0 < c < cp.q_max})
    return pts


def region_intervals(pp: ProgramParams, cp: ConsumerParams, um: UncertaintyModel):
    """Closed q_prev intervals with a constant region label, clipped to [0, q_max]; empty ones dropped."""
    case = case_id(pp, cp, um)
    edges = [0.0, *region_breakpoints(pp, cp, um), cp.q_max]
    out: list[tuple[str, float, float]] = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        if hi - lo <= 0:
            continue
        label = _region_label(0.5 * (lo + hi), pp, cp, um, case)
        if out and out[-1][0] == label:
            out[-1] = (label, out[-1][1], hi)
        else:
            out.append((label, lo, hi))
    return out
