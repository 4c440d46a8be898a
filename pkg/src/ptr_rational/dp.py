"""Backward induction over n baseline-setting periods followed by one rebate event.

Stage 0 is the event period t, stage j >= 1 is period t-j. The state before the
decision at stage j is the vector of consumptions already chosen in periods
t-n .. t-j-1 (chronological order), so its dimension is n - j. Every decision
is restricted to the grid 0, q_step, ..., q_max.

Stage 0 depends on the state only through the baseline b, so its value V0(b) is
tabulated on a baseline grid fine enough to hold every reachable b exactly and
read back with linear interpolation. Its expectation over theta uses
Gauss-Legendre nodes on the support, split where the optimal strategy switches.
Earlier stages use a fixed node set.
"""
from __future__ import annotations

import io
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .model import ConsumerParams, ProgramParams, UncertaintyModel, _raw_utility, check_support
from .stage_one import strategy_splits

log = logging.getLogger(__name__)

FORMAT_TAG = "# ptr-policy v1"
DEFAULT_MAX_CELLS = 50_000_000
BASELINES = ("last", "mean")


class DPResourceError(RuntimeError):
    def __init__(self, cells: int, limit: int):
        super().__init__(f"state space needs {cells:,} cells, limit is {limit:,}; coarsen q_step or reduce n_periods")
        self.cells = cells
        self.limit = limit


@dataclass(frozen=True)
class HorizonSpec:
    n_periods: int = 1
    baseline_fn: str = "last"
    call_probability: float = 1.0

    def __post_init__(self):
        if self.n_periods < 1:
            raise ValueError("n_periods must be >= 1")
        if self.n_periods > 3:
            raise ValueError("n_periods > 3 is outside the supported state dimension")
        if self.baseline_fn not in BASELINES:
            raise ValueError(f"baseline_fn must be one of {BASELINES}, got {self.baseline_fn!r}")
        if not 0.0 <= self.call_probability <= 1.0:
            raise ValueError("call_probability must lie in [0, 1]")


@dataclass(frozen=True)
class GridSpec:
    q_step: float = 0.01
    theta_nodes: int = 9

    def __post_init__(self):
        if not self.q_step > 0:
            raise ValueError("q_step must be positive")
        if self.theta_nodes < 3:
            raise ValueError("theta_nodes must be >= 3")


@dataclass
class PolicyTable:
    hs: HorizonSpec
    gs: GridSpec
    cp: ConsumerParams
    um: UncertaintyModel
    p2: float
    q_grid: np.ndarray
    nodes: np.ndarray  # theta nodes used by stages >= 1 (and the stored stage-0 policy)
    weights: np.ndarray  # probability weights, sum to 1
    b_grid: np.ndarray
    v0: np.ndarray  # expected event-period payoff per baseline on b_grid
    policy0: np.ndarray  # (len(b_grid), nodes) optimal q_t when called
    values: list[np.ndarray] = field(default_factory=list)  # values[j-1]: shape (G,)*(n-j)
    policies: list[np.ndarray] = field(default_factory=list)  # policies[j-1]: values[j-1].shape + (nodes,)

    @property
    def expected_total(self) -> float:
        """Optimal expected payoff summed over all n + 1 periods."""
        return float(self.values[-1])

    def stage_policy(self, j: int) -> np.ndarray:
        return self.policy0 if j == 0 else self.policies[j - 1]

    def expected_first_decision(self) -> float:
        """Node-weighted mean of the earliest period's optimal consumption."""
        return float(np.dot(self.weights, self.policies[-1]))

    def v0_at(self, b) -> np.ndarray:
        return np.interp(b, self.b_grid, self.v0)


def q_grid_for(q_max: float, step: float) -> np.ndarray:
    n = int(round(q_max / step))
    if not math.isclose(n * step, q_max, rel_tol=1e-9):
        raise ValueError(f"q_step={step} does not divide q_max={q_max}")
    return np.linspace(0.0, q_max, n + 1)


def baseline_grid(hs: HorizonSpec, q_max: float, step: float) -> np.ndarray:
    sub = hs.n_periods if hs.baseline_fn == "mean" else 1
    return q_grid_for(q_max, step / sub)


def baseline_of(history: np.ndarray, hs: HorizonSpec) -> np.ndarray:
    """Baseline from consumptions along the last axis (chronological, most recent last)."""
    if hs.baseline_fn == "last":
        return history[..., -1]
    return history.mean(axis=-1)


def _gl_nodes(lo, hi, m: int, um: UncertaintyModel):
    """Gauss-Legendre nodes and probability weights on [lo, hi] (broadcast over leading axes)."""
    x, w = np.polynomial.legendre.leggauss(m)
    lo = np.asarray(lo, dtype=float)[..., None]
    hi = np.asarray(hi, dtype=float)[..., None]
    half = (hi - lo) / 2.0
    theta = (hi + lo) / 2.0 + half * x
    return theta, half * w * um.density(theta)


def fixed_nodes(um: UncertaintyModel, m: int):
    if um.kind == "uniform":
        theta, w = _gl_nodes(um.theta_lo, um.theta_hi, m, um)
    else:
        # split at the density kink
        t1, w1 = _gl_nodes(um.theta_lo, 0.0, (m + 1) // 2, um)
        t2, w2 = _gl_nodes(0.0, um.theta_hi, m - (m + 1) // 2, um)
        theta, w = np.concatenate([t1, t2]), np.concatenate([w1, w2])
    w = w / w.sum()
    return theta, w


def _f(q, theta, cp):
    return _raw_utility(q, theta, cp) - cp.retail_price * q


def _best_in_range(lo_idx, hi_idx, vertex, value_fn, q_grid, step):
    """Max over grid indices [lo_idx, hi_idx] of a concave function with continuous maximizer ``vertex``."""
    base = np.floor(vertex / step).astype(np.int64)
    best_v = np.full(np.shape(vertex), -np.inf)
    best_q = np.zeros(np.shape(vertex))
    valid = lo_idx <= hi_idx
    for off in (0, 1):
        idx = np.clip(base + off, lo_idx, np.maximum(hi_idx, lo_idx))
        idx = np.clip(idx, 0, q_grid.size - 1)
        q = q_grid[idx]
        v = np.where(valid, value_fn(q), -np.inf)
        better = v > best_v
        best_v = np.where(better, v, best_v)
        best_q = np.where(better, q, best_q)
    return best_v, best_q


def event_grid_best(b, theta, p2: float, cp: ConsumerParams, q_grid: np.ndarray, called: bool = True):
    """Grid-restricted optimum of the event-period payoff for baseline(s) b and shock(s) theta.

    The payoff is concave on each side of the baseline, so only the two grid points
    bracketing each side's vertex need evaluating. Returns ``(value, q)``.
    """
    b, theta = np.broadcast_arrays(np.asarray(b, dtype=float), np.asarray(theta, dtype=float))
    step = q_grid[1] - q_grid[0]
    last = q_grid.size - 1
    q_star = cp.q_bar + theta
    if not called or p2 == 0.0:
        return _best_in_range(np.zeros(b.shape, np.int64), np.full(b.shape, last), q_star,
                              lambda q: _f(q, theta, cp), q_grid, step)
    first_ge = np.clip(np.ceil(b / step - 1e-9).astype(np.int64), 0, last + 1)
    above = _best_in_range(first_ge, np.full(b.shape, last), q_star, lambda q: _f(q, theta, cp), q_grid, step)
    below = _best_in_range(np.zeros(b.shape, np.int64), first_ge - 1, q_star - p2 / cp.gamma,
                           lambda q: _f(q, theta, cp) + p2 * (b - q), q_grid, step)
    take_below = below[0] > above[0]
    return np.where(take_below, below[0], above[0]), np.where(take_below, below[1], above[1])


def _stage0_expectations(b, call_probability: float, theta_nodes: int, p2, cp, um, q_grid):
    """Expected optimal event payoff and load for each baseline in ``b``."""
    b = np.asarray(b, dtype=float)
    c_split, ab_split = strategy_splits(b, ProgramParams(p2, 1.0), cp)
    cuts = [np.full(b.shape, um.theta_lo),
            np.clip(c_split, um.theta_lo, um.theta_hi),
            np.clip(ab_split, um.theta_lo, um.theta_hi),
            np.full(b.shape, um.theta_hi)]
    if um.kind != "uniform":
        cuts.insert(1, np.zeros(b.shape))
        cuts = list(np.sort(np.stack(cuts), axis=0))
    value = np.zeros(b.shape)
    load = np.zeros(b.shape)
    pi = call_probability
    if pi > 0:
        for lo, hi in zip(cuts[:-1], cuts[1:]):
            hi = np.maximum(hi, lo)
            theta, w = _gl_nodes(lo, hi, theta_nodes, um)
            vc, qc = event_grid_best(b[..., None], theta, p2, cp, q_grid, True)
            value += pi * (w * vc).sum(axis=-1)
            load += pi * (w * qc).sum(axis=-1)
    if pi < 1:
        # the uncalled payoff ignores b, so integrate it on nodes that do not move with b
        theta, w = fixed_nodes(um, 3 * theta_nodes)
        vf, qf = event_grid_best(np.zeros(theta.shape), theta, p2, cp, q_grid, False)
        value += (1 - pi) * float((w * vf).sum())
        load += (1 - pi) * float((w * qf).sum())
    return value, load


def expected_event_load(pt: "PolicyTable", b) -> np.ndarray:
    """E[q_t] under the grid-restricted event policy for baseline(s) b."""
    return _stage0_expectations(b, pt.hs.call_probability, pt.gs.theta_nodes, pt.p2, pt.cp, pt.um, pt.q_grid)[1]


def count_cells(hs: HorizonSpec, gs: GridSpec, cp: ConsumerParams) -> int:
    g = int(round(cp.q_max / gs.q_step)) + 1
    nb = baseline_grid(hs, cp.q_max, gs.q_step).size
    cells = nb * 3 * gs.theta_nodes
    for j in range(1, hs.n_periods + 1):
        cells += g ** (hs.n_periods - j) * gs.theta_nodes * g
    return cells


def continuation(table_values, j: int, hs: HorizonSpec, b_grid, v0, q_grid, states: np.ndarray) -> np.ndarray:
    """Value of stage j-1 for each state (rows, n-j index columns) and every next decision on the grid.

    ``states`` holds grid indices; the result has shape (rows, len(q_grid)).
    """
    rows = states.shape[0]
    if j == 1:
        hist = np.concatenate(
            [np.broadcast_to(q_grid[states][:, None, :], (rows, q_grid.size, states.shape[1])),
             np.broadcast_to(q_grid[None, :, None], (rows, q_grid.size, 1))],
            axis=2,
        )
        return np.interp(baseline_of(hist, hs), b_grid, v0)
    w = table_values[j - 2]
    return np.broadcast_to(w[tuple(states.T)], (rows, q_grid.size))


def argmax_prefer_larger(obj: np.ndarray) -> np.ndarray:
    """Argmax along the last axis; numerically tied maxima resolve to the largest index."""
    vmax = obj.max(axis=-1, keepdims=True)
    tied = obj >= vmax - 1e-11 * np.maximum(1.0, np.abs(vmax))
    return obj.shape[-1] - 1 - np.argmax(tied[..., ::-1], axis=-1)


def _solve_stage(j, hs, gs, cp, um, q_grid, nodes, weights, b_grid, v0, values, workers):
    n_state = hs.n_periods - j
    g = q_grid.size
    shape = (g,) * n_state
    states = np.indices(shape).reshape(n_state, -1).T if n_state else np.zeros((1, 0), np.int64)
    f_nodes = _f(q_grid[None, :], nodes[:, None], cp)  # (nodes, G)
    chunk = max(1, 2_000_000 // (g * nodes.size))

    def run(lo_hi):
        lo, hi = lo_hi
        cont = continuation(values, j, hs, b_grid, v0, q_grid, states[lo:hi])  # (rows, G)
        obj = cont[:, None, :] + f_nodes[None, :, :]  # (rows, nodes, G)
        arg = argmax_prefer_larger(obj)
        best = np.take_along_axis(obj, arg[..., None], axis=2)[..., 0]
        return best @ weights, q_grid[arg]

    spans = [(s, min(s + chunk, states.shape[0])) for s in range(0, states.shape[0], chunk)]
    if workers > 1 and len(spans) > 1:
        with ThreadPoolExecutor(workers) as ex:
            parts = list(ex.map(run, spans))
    else:
        parts = [run(s) for s in spans]
    val = np.concatenate([p[0] for p in parts]).reshape(shape)
    pol = np.concatenate([p[1] for p in parts]).reshape(shape + (nodes.size,))
    return val, pol


def solve_backward(hs: HorizonSpec, gs: GridSpec, pp: ProgramParams, cp: ConsumerParams, um: UncertaintyModel,
                   max_cells: int = DEFAULT_MAX_CELLS, workers: int = 1) -> PolicyTable:
    """Backward induction; ``pp.call`` is ignored in favour of ``hs.call_probability``."""
    check_support(cp, um)
    cells = count_cells(hs, gs, cp)
    if cells > max_cells:
        raise DPResourceError(cells, max_cells)
    q_grid = q_grid_for(cp.q_max, gs.q_step)
    b_grid = baseline_grid(hs, cp.q_max, gs.q_step)
    nodes, weights = fixed_nodes(um, gs.theta_nodes)

    v0 = _stage0_expectations(b_grid, hs.call_probability, gs.theta_nodes, pp.p2, cp, um, q_grid)[0]
    policy0 = event_grid_best(b_grid[:, None], nodes[None, :], pp.p2, cp, q_grid, True)[1]
    values: list[np.ndarray] = []
    policies: list[np.ndarray] = []
    for j in range(1, hs.n_periods + 1):
        val, pol = _solve_stage(j, hs, gs, cp, um, q_grid, nodes, weights, b_grid, v0, values, workers)
        values.append(val)
        policies.append(pol)
    return PolicyTable(hs, gs, cp, um, pp.p2, q_grid, nodes, weights, b_grid, v0, policy0, values, policies)


def _snap(q, q_grid):
    idx = np.rint(q / (q_grid[1] - q_grid[0])).astype(np.int64)
    idx = np.clip(idx, 0, q_grid.size - 1)
    off = np.abs(q_grid[idx] - q) > 1e-9
    return idx, int(off.sum())


def evaluate_policy(pt: PolicyTable, hs: HorizonSpec, pp: ProgramParams, cp: ConsumerParams,
                    um: UncertaintyModel, n_rollouts: int, seed: int = 0, chunk: int = 2000):
    """Monte Carlo total payoff of acting greedily on the table's continuation values.

    Shocks and call signals are fresh draws. Returns ``(mean, stderr)``.
    """
    if n_rollouts <= 0:
        raise ValueError("n_rollouts must be positive")
    if hs != pt.hs:
        log.warning("horizon spec differs from the one the table was solved with")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    q_grid = pt.q_grid
    n = pt.hs.n_periods
    totals = np.empty(n_rollouts)
    snapped = 0
    for start in range(0, n_rollouts, chunk):
        rows = min(chunk, n_rollouts - start)
        states = np.zeros((rows, 0), np.int64)
        total = np.zeros(rows)
        for j in range(n, 0, -1):
            theta = um.sample(rng, rows)
            f = _f(q_grid[None, :], theta[:, None], cp)
            obj = f + continuation(pt.values, j, pt.hs, pt.b_grid, pt.v0, q_grid, states)
            arg = argmax_prefer_larger(obj)
            total += f[np.arange(rows), arg]
            idx, off = _snap(q_grid[arg], q_grid)
            snapped += off
            states = np.concatenate([states, idx[:, None]], axis=1)
        theta = um.sample(rng, rows)
        called = rng.random(rows) < hs.call_probability
        b = baseline_of(q_grid[states], pt.hs)
        v_call, q_call = event_grid_best(b, theta, pt.p2, cp, q_grid, True)
        v_free, _ = event_grid_best(b, theta, pt.p2, cp, q_grid, False)
        total += np.where(called, v_call, v_free)
        totals[start:start + rows] = total
    if snapped:
        log.info("%d visited states were off the grid and snapped to the nearest node", snapped)
    se = float(totals.std(ddof=1) / math.sqrt(n_rollouts)) if n_rollouts > 1 else 0.0
    return float(totals.mean()), se


def _arrays(pt: PolicyTable):
    out = {"q_grid": pt.q_grid, "nodes": pt.nodes, "weights": pt.weights, "b_grid": pt.b_grid,
           "v0": pt.v0, "policy0": pt.policy0}
    for j, (v, p) in enumerate(zip(pt.values, pt.policies), start=1):
        out[f"value{j}"] = np.asarray(v)
        out[f"policy{j}"] = p
    return out


def save_policy(pt: PolicyTable, path) -> None:
    """Write ``# ptr-policy v1``, one JSON header line, then little-endian float64 arrays in row-major order."""
    arrays = _arrays(pt)
    header = {
        "horizon": asdict(pt.hs),
        "grid": asdict(pt.gs),
        "consumer": asdict(pt.cp),
        "uncertainty": asdict(pt.um),
        "p2": pt.p2,
        "arrays": [{"name": k, "shape": list(np.shape(a))} for k, a in arrays.items()],
    }
    with open(path, "wb") as fh:
        fh.write((FORMAT_TAG + "\n").encode())
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode())
        for a in arrays.values():
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_policy(path) -> PolicyTable:
    with open(path, "rb") as fh:
        tag = fh.readline().decode().rstrip("\n")
        if tag != FORMAT_TAG:
            raise ValueError(f"not a policy table file (first line {tag!r})")
        header = json.loads(fh.readline().decode())
        body = io.BytesIO(fh.read())
    arrays = {}
    for spec in header["arrays"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        raw = body.read(8 * count)
        if len(raw) != 8 * count:
            raise ValueError(f"truncated policy file while reading {spec['name']}")
        arrays[spec["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(float)
    hs = HorizonSpec(**header["horizon"])
    n = hs.n_periods
    return PolicyTable(
        hs=hs,
        gs=GridSpec(**header["grid"]),
        cp=ConsumerParams(**header["consumer"]),
        um=UncertaintyModel(**header["uncertainty"]),
        p2=header["p2"],
        q_grid=arrays["q_grid"],
        nodes=arrays["nodes"],
        weights=arrays["weights"],
        b_grid=arrays["b_grid"],
        v0=arrays["v0"],
        policy0=arrays["policy0"],
        values=[arrays[f"value{j}"] for j in range(1, n + 1)],
        policies=[arrays[f"policy{j}"] for j in range(1, n + 1)],
    )
