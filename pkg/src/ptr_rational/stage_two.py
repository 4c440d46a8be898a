"""Baseline-setting period (stage two): how much to consume at t-1 knowing the stage-one response.

The objective in q_prev is U_{t-1}(q_prev, theta_prev) + E[U_t | q_prev]. By the
envelope argument its slope is U'_{t-1}(q_prev) + p2 * P(B or C | q_prev), and on
every piece between region breakpoints both terms have simple forms (linear,
constant or linear in sqrt(q_prev)), so stationary points are found in closed form.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .model import (
    ConsumerParams,
    ProgramParams,
    UncertaintyModel,
    check_support,
    period_payoff,
    price_at_or_above,
)
from .stage_one import (
    case_id,
    expected_stage_one_payoff,
    region_breakpoints,
    region_intervals,
)


class Branch(str, Enum):
    INTERIOR_LOW = "interior_low"
    Q_BAR_PLUS_P2_OVER_GAMMA = "q_bar_plus_p2_over_gamma"
    Q_MAX = "q_max"
    CORNER = "corner"


_THEOREM_FOR_CASE = {"Case1": "T2", "Case2": "T3", "Case3": "T4"}


@dataclass(frozen=True)
class StageTwoSolution:
    expected_q_prev: float
    active_branch: Branch
    theorem_id: str
    applicable: bool
    case_id: str


@dataclass(frozen=True)
class RegionMax:
    region: str
    q_prev: float
    value: float
    stationary: bool  # False when the maximum sits on an interval endpoint


def stage_two_objective(q_prev, theta_prev, pp: ProgramParams, cp: ConsumerParams, um: UncertaintyModel):
    """U_{t-1}(q_prev, theta_prev) + E[U_t(q_t°, theta_t, q_prev)]."""
    q_prev = np.asarray(q_prev, dtype=float)
    if np.any(q_prev < 0) or np.any(q_prev > cp.q_max + 1e-12):
        raise ValueError(f"q_prev outside [0, {cp.q_max}]")
    out = period_payoff(q_prev, theta_prev, cp) + expected_stage_one_payoff(q_prev, pp, cp, um)
    return float(out) if np.ndim(out) == 0 else out


def branch_formulas(pp: ProgramParams, cp: ConsumerParams, um: UncertaintyModel) -> dict[Branch, float]:
    """The three candidate closed forms for the expected optimal baseline."""
    g, qb, p2, th = cp.gamma, cp.q_bar, pp.p2, um.theta_hi
    denom = 2.0 * th * g - p2
    interior = qb - p2 / (2 * g) + 2 * p2 * th / denom if denom != 0 else math.nan
    return {
        Branch.INTERIOR_LOW: interior,
        Branch.Q_BAR_PLUS_P2_OVER_GAMMA: qb + p2 / g,
        Branch.Q_MAX: cp.q_max,
    }


def _theorem_branch(pp, cp, um, case: str) -> Branch | None:
    """Branch selected by the p2 ranges of the theorem for ``case``; None when p2 falls in none."""
    g, qb, p, p2 = cp.gamma, cp.q_bar, cp.retail_price, pp.p2
    th, tl = um.theta_hi, um.theta_lo
    split = 2.0 / 3.0 * th * g
    at_or_above_p = price_at_or_above(p2, p)
    if case == "Case1":
        # ranges overlap when the interior branch would extend past p
        if split > p:
            return None
        if p2 < split:
            return Branch.INTERIOR_LOW
        if not at_or_above_p:
            return Branch.Q_BAR_PLUS_P2_OVER_GAMMA
        return Branch.Q_MAX if p2 < g * (tl + qb) else None
    if case == "Case2":
        if split > p:
            return None
        if g * (tl + qb) <= p2 < split:
            return Branch.INTERIOR_LOW
        if split <= p2 and not at_or_above_p:
            return Branch.Q_BAR_PLUS_P2_OVER_GAMMA
        # closed at p: q_max when p2 == p
        if at_or_above_p and p2 <= g * (th + qb):
            return Branch.Q_MAX
        return None
    if g * (th + qb) <= p2 and not at_or_above_p:
        return Branch.Q_BAR_PLUS_P2_OVER_GAMMA
    return Branch.Q_MAX if at_or_above_p else None


def theorem_applies(pp: ProgramParams, cp: ConsumerParams, um: UncertaintyModel) -> bool:
    """Case condition, saturation condition q_bar + p/gamma > q_bar + theta_hi - p2/(2 gamma), and a p2 range hit."""
    if pp.call != 1.0 or um.kind != "uniform":
        return False
    if not cp.saturation_gap > um.theta_hi - pp.p2 / (2 * cp.gamma):
        return False
    branch = _theorem_branch(pp, cp, um, case_id(pp, cp, um))
    if branch is None:
        return False
    value = branch_formulas(pp, cp, um)[branch]
    return 0.0 <= value <= cp.q_max


def _piece_roots(lo, hi, pp, cp, um, s, sat_point):
    """Stationary points of the stage-two objective on (lo, hi)."""
    g, qb, p, p2 = cp.gamma, cp.q_bar, cp.retail_price, pp.p2
    tl, w = um.theta_lo, um.width
    mid = 0.5 * (lo + hi)
    u_linear = mid <= sat_point
    half = p2 / (2 * g)

    # participation probability on this piece: ("const", P0) | ("lin", d) | ("sqrt", a, e)
    if p2 == 0.0:
        form = ("const", 0.0)
    elif mid >= half:
        d = -qb + half - tl  # P = (b + d) / w
        raw = (mid + d) / w
        form = ("const", 0.0) if raw <= 0 else ("const", 1.0) if raw >= 1 else ("lin", d)
    else:
        a, e = math.sqrt(2 * p2 / g), qb + tl  # P = (a sqrt(b) - e) / w
        raw = (a * math.sqrt(mid) - e) / w
        form = ("const", 0.0) if raw <= 0 else ("const", 1.0) if raw >= 1 else ("sqrt", a, e)

    roots: list[float] = []
    if u_linear:
        c0 = g * (qb + s)  # U' = -g b + c0
        if form[0] == "const":
            roots.append(qb + s + p2 * form[1] / g)
        elif form[0] == "lin":
            slope = p2 / w - g
            if slope != 0:
                roots.append(-(c0 + p2 * form[1] / w) / slope)
        else:
            _, a, e = form
            for u in np.roots([-g, p2 * a / w, c0 - p2 * e / w]):
                if abs(u.imag) < 1e-12 and u.real >= 0:
                    roots.append(float(u.real) ** 2)
    else:
        if form[0] == "lin":
            roots.append(w * p / p2 - form[1])
        elif form[0] == "sqrt":
            _, a, e = form
            u = (w * p / p2 + e) / a
            roots.append(u * u)
    return [r for r in roots if lo < r < hi]


def local_maxima_by_region(
    pp: ProgramParams, cp: ConsumerParams, um: UncertaintyModel, theta_prev: float = 0.0
) -> list[RegionMax]:
    """Maximum of the stage-two objective on each closed region interval of q_prev."""
    if pp.call != 1.0:
        raise ValueError("stage-two regions assume the consumer is called (call = 1)")
    check_support(cp, um)
    s = float(theta_prev)
    sat_point = cp.q_bar + s + cp.saturation_gap
    edges = {0.0, cp.q_max, *region_breakpoints(pp, cp, um)}
    if 0.0 < sat_point < cp.q_max:
        edges.add(sat_point)
    edges = sorted(edges)

    cand_q: list[float] = []
    cand_stat: list[bool] = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        for r in _piece_roots(lo, hi, pp, cp, um, s, sat_point):
            cand_q.append(r)
            cand_stat.append(True)
    cand_q += edges
    cand_stat += [False] * len(edges)
    cand_q_arr = np.asarray(cand_q)
    values = stage_two_objective(cand_q_arr, s, pp, cp, um)

    out = []
    for label, lo, hi in region_intervals(pp, cp, um):
        inside = (cand_q_arr >= lo - 1e-12) & (cand_q_arr <= hi + 1e-12)
        idx = np.flatnonzero(inside)
        best = _argmax_prefer_larger(values[idx], cand_q_arr[idx])
        j = idx[best]
        out.append(RegionMax(label, float(cand_q_arr[j]), float(values[j]), cand_stat[j]))
    return out


def _argmax_prefer_larger(values, q) -> int:
    """Index of the maximum; among numerically tied values pick the largest q."""
    vmax = np.max(values)
    tol = 1e-11 * max(1.0, abs(vmax))
    tied = np.flatnonzero(values >= vmax - tol)
    return int(tied[np.argmax(q[tied])])


def global_maximum(pp, cp, um, theta_prev: float = 0.0) -> RegionMax:
    maxima = local_maxima_by_region(pp, cp, um, theta_prev)
    best = _argmax_prefer_larger(np.array([m.value for m in maxima]), np.array([m.q_prev for m in maxima]))
    return maxima[best]


def _label_numeric(best: RegionMax, pp, cp, um) -> Branch:
    if math.isclose(best.q_prev, cp.q_max, rel_tol=0, abs_tol=1e-9):
        return Branch.Q_MAX
    if not best.stationary:
        return Branch.CORNER
    if best.region in ("B", "BC"):
        return Branch.Q_BAR_PLUS_P2_OVER_GAMMA
    return Branch.INTERIOR_LOW


def solve_stage_two_closed(pp: ProgramParams, cp: ConsumerParams, um: UncertaintyModel) -> StageTwoSolution:
    """Expected optimal baseline from the case theorems, or the exact region-wise maximizer when they do not apply."""
    if pp.call != 1.0:
        raise ValueError("closed-form stage two requires call = 1")
    if um.kind != "uniform":
        raise ValueError("closed-form stage two requires the uniform density")
    check_support(cp, um)
    case = case_id(pp, cp, um)
    theorem = _THEOREM_FOR_CASE[case]
    if theorem_applies(pp, cp, um):
        branch = _theorem_branch(pp, cp, um, case)
        return StageTwoSolution(branch_formulas(pp, cp, um)[branch], branch, theorem, True, case)
    best = global_maximum(pp, cp, um, 0.0)
    return StageTwoSolution(best.q_prev, _label_numeric(best, pp, cp, um), theorem, False, case)
