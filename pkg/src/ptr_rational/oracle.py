"""Brute-force Monte Carlo check of the two-period solution.

For every baseline on a grid over [0, q_max] the expected stage-one payoff is
estimated from seeded shock draws that are shared by all grid points (common
random numbers). The inner maximization over q_t is done twice: with the
pointwise policy, and with a plain search over the same grid. The two must agree
to within the grid resolution for every draw, otherwise OracleError is raised.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .model import (
    ConsumerParams,
    ProgramParams,
    UncertaintyModel,
    _raw_payoff,
    _raw_utility,
    period_payoff,
)
from .stage_one import policy

log = logging.getLogger(__name__)

_CHUNK_CELLS = 2_000_000


class OracleError(RuntimeError):
    pass


class OracleConvergenceError(OracleError):
    pass


@dataclass(frozen=True)
class OracleConfig:
    n_samples: int = 10_000
    q_grid_step: float = 0.01
    seed: int = 0
    # 0 fixes theta_{t-1} at its mean; >0 re-optimizes q_{t-1} for each draw and averages
    theta_prev_samples: int = 200
    grid_check: bool = True
    grid_check_samples: int | None = None
    batches: int = 10
    workers: int = 1
    check_convergence: bool = False

    def __post_init__(self):
        if self.n_samples < 100:
            raise ValueError(f"n_samples must be >= 100, got {self.n_samples}")
        if not 0 < self.q_grid_step <= 0.1:
            raise ValueError(f"q_grid_step must lie in (0, 0.1], got {self.q_grid_step}")
        if self.theta_prev_samples < 0:
            raise ValueError("theta_prev_samples must be >= 0")
        if not 2 <= self.batches <= self.n_samples:
            raise ValueError("batches must lie in [2, n_samples]")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


@dataclass(frozen=True)
class OracleResult:
    e_q_prev: float
    e_q_t: float
    e_profit: float
    stderr_profit: float
    n_samples: int
    stderr_q_prev: float = 0.0
    stderr_q_t: float = 0.0
    max_grid_gap: float = 0.0
    converged: bool | None = None


def q_grid(q_max: float, step: float) -> np.ndarray:
    n = int(round(q_max / step))
    return np.linspace(0.0, q_max, n + 1)


def _streams(seed: int, replica: int = 0):
    ss = np.random.SeedSequence([seed, replica])
    t_ss, prev_ss = ss.spawn(2)
    return np.random.default_rng(t_ss), np.random.default_rng(prev_ss)


def draw_theta_t(um: UncertaintyModel, cfg: OracleConfig, replica: int = 0) -> np.ndarray:
    rng, _ = _streams(cfg.seed, replica)
    return um.sample(rng, cfg.n_samples)


def draw_theta_prev(um: UncertaintyModel, cfg: OracleConfig, replica: int = 0) -> np.ndarray:
    _, rng = _streams(cfg.seed, replica)
    return um.sample(rng, cfg.theta_prev_samples)


def _policy_values(b, theta, pp, cp):
    """Payoff and load of the pointwise policy, mixing called/uncalled by the call probability."""
    out_v, out_q = 0.0, 0.0
    for call, weight in ((1.0, pp.call), (0.0, 1.0 - pp.call)):
        if weight == 0.0:
            continue
        sub = ProgramParams(pp.p2, call)
        q, _ = policy(b, theta, sub, cp)
        v = _raw_payoff(q, theta, b, pp.p2, call, cp)
        out_v = out_v + weight * v
        out_q = out_q + weight * q
    return out_v, out_q


def grid_search_stage_one(grid: np.ndarray, theta: np.ndarray, pp: ProgramParams, cp: ConsumerParams):
    """max over q_t on ``grid`` of the event payoff, for every baseline on ``grid`` and every draw.

    Returns an array of shape (len(theta), len(grid)). Consumption below the
    baseline (earlier grid indices) earns p2 per kWh of reduction; at or above it
    earns nothing, so the best value is a prefix maximum on one side of the baseline
    and a suffix maximum on the other.
    """
    theta = np.asarray(theta, dtype=float)[:, None]
    f = _raw_utility(grid[None, :], theta, cp) - cp.retail_price * grid[None, :]
    uncalled = np.max(f, axis=1, keepdims=True)
    if pp.call == 0.0:
        return np.broadcast_to(uncalled, (theta.shape[0], grid.size)).copy()
    g = f - pp.p2 * grid[None, :]
    suffix_f = np.maximum.accumulate(f[:, ::-1], axis=1)[:, ::-1]
    prefix_g = np.maximum.accumulate(g, axis=1)
    below = np.concatenate([np.full((theta.shape[0], 1), -np.inf), prefix_g[:, :-1]], axis=1)
    called = np.maximum(suffix_f, pp.p2 * grid[None, :] + below)
    return pp.call * called + (1.0 - pp.call) * uncalled


@dataclass
class _Accum:
    batch_sum_v: np.ndarray
    sum_v2: np.ndarray
    sum_q: np.ndarray
    sum_q2: np.ndarray
    max_gap: float = 0.0


def _accumulate(q_full, cols, thetas, batch_of, n_batches, check_upto, pp, cp, step):
    # baselines are q_full[cols]; the inner grid search always spans the full grid
    grid = q_full[cols]
    acc = _Accum(
        np.zeros((n_batches, grid.size)),
        np.zeros(grid.size),
        np.zeros(grid.size),
        np.zeros(grid.size),
    )
    chunk = max(1, _CHUNK_CELLS // q_full.size)
    tol = cp.gamma * step**2 / 2 + 1e-9
    b = grid[:, None]
    for start in range(0, thetas.size, chunk):
        th = thetas[start:start + chunk]
        v, q = _policy_values(b, th[None, :], pp, cp)
        v = np.broadcast_to(v, (grid.size, th.size))
        q = np.broadcast_to(q, (grid.size, th.size))
        bidx = batch_of[start:start + chunk]
        for bi in np.unique(bidx):
            acc.batch_sum_v[bi] += v[:, bidx == bi].sum(axis=1)
        acc.sum_v2 += (v * v).sum(axis=1)
        acc.sum_q += q.sum(axis=1)
        acc.sum_q2 += (q * q).sum(axis=1)
        n_check = min(th.size, max(0, check_upto - start))
        if n_check > 0:
            gm = grid_search_stage_one(q_full, th[:n_check], pp, cp)[:, cols]
            gap = v[:, :n_check].T - gm
            lo, hi = float(gap.min()), float(gap.max())
            if lo < -1e-9 or hi > tol:
                worst = np.unravel_index(np.argmax(np.abs(gap)), gap.shape)
                raise OracleError(
                    "policy and grid search disagree: theta={:.6g}, q_prev={:.6g}, gap={:.3e} (allowed [0, {:.3e}])".format(
                        th[worst[0]], grid[worst[1]], gap[worst], tol
                    )
                )
            acc.max_gap = max(acc.max_gap, hi)
    return acc


def _argmax_rows_prefer_larger(obj: np.ndarray) -> np.ndarray:
    obj = np.atleast_2d(obj)
    vmax = obj.max(axis=1, keepdims=True)
    tol = 1e-11 * np.maximum(1.0, np.abs(vmax))
    tied = obj >= vmax - tol
    return obj.shape[1] - 1 - np.argmax(tied[:, ::-1], axis=1)


def _stage_one_estimates(pp, cp, um, cfg, replica):
    grid = q_grid(cp.q_max, cfg.q_grid_step)
    thetas = draw_theta_t(um, cfg, replica)
    n = thetas.size
    batch_of = (np.arange(n) * cfg.batches) // n
    check_upto = n if cfg.grid_check_samples is None else min(n, cfg.grid_check_samples)
    if not cfg.grid_check:
        check_upto = 0

    if cfg.workers == 1:
        accs = [_accumulate(grid, slice(None), thetas, batch_of, cfg.batches, check_upto, pp, cp, cfg.q_grid_step)]
    else:
        slices = np.array_split(np.arange(grid.size), cfg.workers)
        with ThreadPoolExecutor(cfg.workers) as ex:
            accs = list(ex.map(
                lambda idx: _accumulate(grid, idx, thetas, batch_of, cfg.batches, check_upto, pp, cp, cfg.q_grid_step),
                slices,
            ))
    batch_sum = np.concatenate([a.batch_sum_v for a in accs], axis=1)
    sum_v2 = np.concatenate([a.sum_v2 for a in accs])
    sum_q = np.concatenate([a.sum_q for a in accs])
    sum_q2 = np.concatenate([a.sum_q2 for a in accs])
    max_gap = max(a.max_gap for a in accs)

    counts = np.bincount(batch_of, minlength=cfg.batches)
    ev = batch_sum.sum(axis=0) / n
    sd_v = np.sqrt(np.maximum(sum_v2 / n - ev**2, 0.0) * n / (n - 1))
    eq = sum_q / n
    sd_q = np.sqrt(np.maximum(sum_q2 / n - eq**2, 0.0) * n / (n - 1))
    batch_ev = batch_sum / counts[:, None]
    return grid, ev, sd_v, eq, sd_q, batch_ev, max_gap


def oracle_expected_payoff(q_prev: float, pp: ProgramParams, cp: ConsumerParams, um: UncertaintyModel,
                           cfg: OracleConfig | None = None) -> tuple[float, float]:
    """Sample mean and standard error of the optimal event payoff at a fixed baseline."""
    cfg = cfg or OracleConfig()
    th = draw_theta_t(um, cfg)
    v, _ = _policy_values(np.float64(q_prev), th, pp, cp)
    v = np.broadcast_to(v, th.shape)
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size))


def _solve_once(pp, cp, um, cfg, replica) -> OracleResult:
    grid, ev, sd_v, eq, sd_q, batch_ev, max_gap = _stage_one_estimates(pp, cp, um, cfg, replica)
    n = cfg.n_samples
    u_mean = period_payoff(grid, 0.0, cp)

    batch_idx = _argmax_rows_prefer_larger(u_mean[None, :] + batch_ev)
    se_q_batches = float(np.std(grid[batch_idx], ddof=1) / math.sqrt(cfg.batches))

    if cfg.theta_prev_samples == 0:
        j = int(_argmax_rows_prefer_larger(u_mean + ev)[0])
        return OracleResult(
            e_q_prev=float(grid[j]),
            e_q_t=float(eq[j]),
            e_profit=float(u_mean[j] + ev[j]),
            stderr_profit=float(sd_v[j] / math.sqrt(n)),
            n_samples=n,
            stderr_q_prev=se_q_batches,
            stderr_q_t=float(sd_q[j] / math.sqrt(n)),
            max_grid_gap=max_gap,
        )

    s = draw_theta_prev(um, cfg, replica)
    m = s.size
    u_prev = period_payoff(grid[None, :], s[:, None], cp)
    obj = u_prev + ev[None, :]
    js = _argmax_rows_prefer_larger(obj)
    best = obj[np.arange(m), js]
    qp = grid[js]
    qt = eq[js]

    def _se(x, inner):
        outer = np.var(x, ddof=1) / m if m > 1 else 0.0
        return float(math.sqrt(outer + inner**2))

    return OracleResult(
        e_q_prev=float(qp.mean()),
        e_q_t=float(qt.mean()),
        e_profit=float(best.mean()),
        stderr_profit=_se(best, float(np.mean(sd_v[js])) / math.sqrt(n)),
        n_samples=n,
        stderr_q_prev=_se(qp, se_q_batches),
        stderr_q_t=_se(qt, float(np.mean(sd_q[js])) / math.sqrt(n)),
        max_grid_gap=max_gap,
    )


def oracle_solve(pp: ProgramParams, cp: ConsumerParams, um: UncertaintyModel,
                 cfg: OracleConfig | None = None) -> OracleResult:
    """Grid-search the baseline against Monte Carlo estimates of the expected event payoff."""
    cfg = cfg or OracleConfig()
    res = _solve_once(pp, cp, um, cfg, 0)
    if not cfg.check_convergence:
        return res
    other = _solve_once(pp, cp, um, replace(cfg, grid_check=False), 1)
    d_profit = abs(res.e_profit - other.e_profit)
    lim_profit = 5 * math.hypot(res.stderr_profit, other.stderr_profit)
    d_q = abs(res.e_q_prev - other.e_q_prev)
    lim_q = 5 * math.hypot(res.stderr_q_prev, other.stderr_q_prev) + cfg.q_grid_step
    if d_profit > lim_profit or d_q > lim_q:
        raise OracleConvergenceError(
            f"independent seeds disagree: profit {res.e_profit:.6g} vs {other.e_profit:.6g} (limit {lim_profit:.3g}), "
            f"q_prev {res.e_q_prev:.6g} vs {other.e_q_prev:.6g} (limit {lim_q:.3g})"
        )
    return replace(res, converged=True)
