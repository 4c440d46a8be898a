"""Experiment drivers behind the command-line interface.

Each ``cmd_*`` function returns plain records; CSV formatting and exit-code
mapping live in :mod:`ptr_rational.cli`.
"""
from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .dp import GridSpec, HorizonSpec, PolicyTable, expected_event_load, solve_backward
from .model import ConsumerParams, ProgramParams, UncertaintyModel, check_support
from .oracle import OracleConfig, oracle_solve
from .stage_one import case_id as _case_id
from .stage_one import classify_case, expected_q_t
from .stage_two import solve_stage_two_closed, stage_two_objective, theorem_applies

CSV_TAG = "# ptr-rational v1"
COLUMNS = ("p2", "uncertainty_pct", "e_q_prev", "e_q_t", "net", "e_profit", "case_id", "branch", "source")
SOURCES = ("closed", "oracle", "dp")

_CONFIG_KEYS = {
    "gamma": float,
    "retail_price": float,
    "q_bar": float,
    "q_max": float,
    "p2": float,
    "uncertainty_pct": float,
    "n_samples": int,
    "seed": int,
}


class ConfigError(ValueError):
    pass


class SweepCheckError(AssertionError):
    pass


@dataclass(frozen=True)
class RunConfig:
    consumer: ConsumerParams = field(default_factory=ConsumerParams)
    uncertainty_pct: float = 25.0
    p2: float = 0.0
    oracle: OracleConfig = field(default_factory=OracleConfig)
    out: str | None = None
    workers: int = 1
    dp_grid: GridSpec = field(default_factory=GridSpec)

    def __post_init__(self):
        if not 0 < self.uncertainty_pct <= 100:
            raise ValueError(f"uncertainty_pct must lie in (0, 100], got {self.uncertainty_pct}")

    @property
    def uncertainty(self) -> UncertaintyModel:
        return UncertaintyModel.from_percent(self.uncertainty_pct, self.consumer.q_bar)

    @property
    def program(self) -> ProgramParams:
        return ProgramParams(self.p2, 1.0)

    def with_point(self, p2: float | None = None, pct: float | None = None) -> "RunConfig":
        return replace(
            self,
            p2=self.p2 if p2 is None else float(p2),
            uncertainty_pct=self.uncertainty_pct if pct is None else float(pct),
        )

    @classmethod
    def from_mapping(cls, data: dict, origin: str = "<config>") -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError(f"{origin}: top level must be a JSON object")
        values = {}
        for key, raw in data.items():
            if key not in _CONFIG_KEYS:
                raise ConfigError(f"{origin}: unknown field {key!r} (allowed: {', '.join(_CONFIG_KEYS)})")
            kind = _CONFIG_KEYS[key]
            if isinstance(raw, bool) or not isinstance(raw, (int, float)):
                raise ConfigError(f"{origin}: field {key!r} must be a number, got {raw!r}")
            if kind is int and not float(raw).is_integer():
                raise ConfigError(f"{origin}: field {key!r} must be an integer, got {raw!r}")
            values[key] = kind(raw)
        return cls.from_values(origin=origin, **values)

    @classmethod
    def from_values(cls, origin: str = "<args>", **values) -> "RunConfig":
        cons_keys = {f.name for f in fields(ConsumerParams)} - {"k"}
        field_name = None
        try:
            field_name = "consumer"
            consumer = ConsumerParams(**{k: v for k, v in values.items() if k in cons_keys})
            field_name = "n_samples/seed"
            ocfg = OracleConfig(**{k: v for k, v in values.items() if k in ("n_samples", "seed")})
            field_name = "uncertainty_pct/p2"
            cfg = cls(consumer=consumer, oracle=ocfg,
                      **{k: v for k, v in values.items() if k in ("p2", "uncertainty_pct")})
            ProgramParams(cfg.p2)
            check_support(consumer, cfg.uncertainty)
        except ValueError as exc:
            raise ConfigError(f"{origin}: {field_name}: {exc}") from None
        return cfg

    @classmethod
    def load(cls, path: str) -> "RunConfig":
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"{path}: {exc.strerror}") from None
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
        return cls.from_mapping(data, origin=path)

    def as_values(self) -> dict:
        c = self.consumer
        return {"gamma": c.gamma, "retail_price": c.retail_price, "q_bar": c.q_bar, "q_max": c.q_max,
                "p2": self.p2, "uncertainty_pct": self.uncertainty_pct,
                "n_samples": self.oracle.n_samples, "seed": self.oracle.seed}


@dataclass(frozen=True)
class SweepRecord:
    p2: float
    uncertainty_pct: float
    e_q_prev: float
    e_q_t: float
    net: float
    e_profit: float
    case_id: str
    branch: str
    source: str
    stderr_profit: float = 0.0

    @classmethod
    def build(cls, p2, pct, e_q_prev, e_q_t, e_profit, case, branch, source, stderr_profit=0.0):
        e_q_prev, e_q_t = float(e_q_prev), float(e_q_t)
        return cls(float(p2), float(pct), e_q_prev, e_q_t, e_q_prev + e_q_t, float(e_profit), case, branch,
                   source, float(stderr_profit))


def _closed(cfg: RunConfig) -> SweepRecord:
    cp, um, pp = cfg.consumer, cfg.uncertainty, cfg.program
    sol = solve_stage_two_closed(pp, cp, um)
    q_prev = min(max(sol.expected_q_prev, 0.0), cp.q_max)
    e_q_t = expected_q_t(q_prev, pp, cp, um)
    profit = stage_two_objective(q_prev, 0.0, pp, cp, um)
    return SweepRecord.build(cfg.p2, cfg.uncertainty_pct, q_prev, e_q_t, profit, sol.case_id,
                             sol.active_branch.value, "closed")


def _oracle(cfg: RunConfig) -> SweepRecord:
    cp, um, pp = cfg.consumer, cfg.uncertainty, cfg.program
    res = oracle_solve(pp, cp, um, cfg.oracle)
    label = solve_stage_two_closed(pp, cp, um)
    return SweepRecord.build(cfg.p2, cfg.uncertainty_pct, res.e_q_prev, res.e_q_t, res.e_profit, label.case_id,
                             label.active_branch.value, "oracle", res.stderr_profit)


def dp_record(cfg: RunConfig, pt: PolicyTable) -> SweepRecord:
    """Summarize a solved table: node-weighted first decision, event load (n = 1 only) and total value."""
    cp, um, pp, hs = cfg.consumer, cfg.uncertainty, cfg.program, pt.hs
    reduces = hs.n_periods == 1 and hs.call_probability == 1.0
    if hs.n_periods == 1:
        e_q_t = float(pt.weights @ expected_event_load(pt, pt.policies[-1]))
    else:
        e_q_t = math.nan
    if reduces:
        label = solve_stage_two_closed(pp, cp, um)
        case, branch = label.case_id, label.active_branch.value
    else:
        case = _case_id(pp, cp, um)
        branch = f"n{hs.n_periods}-{hs.baseline_fn}-r{hs.call_probability!r}"
    return SweepRecord.build(cfg.p2, cfg.uncertainty_pct, pt.expected_first_decision(), e_q_t, pt.expected_total,
                             case, branch, "dp")


def _dp(cfg: RunConfig, hs: HorizonSpec | None = None) -> SweepRecord:
    pt = solve_backward(hs or HorizonSpec(), cfg.dp_grid, cfg.program, cfg.consumer, cfg.uncertainty,
                        workers=cfg.workers)
    return dp_record(cfg, pt)


_SOLVERS = {"closed": _closed, "oracle": _oracle, "dp": _dp}


def cmd_solve(cfg: RunConfig, source: str = "closed") -> SweepRecord:
    if source not in _SOLVERS:
        raise ValueError(f"source must be one of {SOURCES}")
    return _SOLVERS[source](cfg)


def _p2_grid(p2_from: float, p2_to: float, steps: int) -> np.ndarray:
    if steps < 2:
        raise ValueError("steps must be >= 2")
    if not p2_from < p2_to:
        raise ValueError("p2_from must be below p2_to")
    if p2_from < 0:
        raise ValueError("p2 must be non-negative")
    return np.linspace(p2_from, p2_to, steps)


def _run_points(cfg: RunConfig, points, source: str) -> list[SweepRecord]:
    jobs = [cfg.with_point(p2, pct) for p2, pct in points]
    if cfg.workers > 1 and source != "closed":
        with ThreadPoolExecutor(cfg.workers) as ex:
            return list(ex.map(lambda c: cmd_solve(c, source), jobs))
    return [cmd_solve(c, source) for c in jobs]


def _slack(a: SweepRecord, b: SweepRecord) -> float:
    if a.source == "closed":
        return 1e-9
    if a.source == "dp":
        return 1e-6
    return 4.0 * math.hypot(a.stderr_profit, b.stderr_profit) + 1e-9


def check_profit_monotone(records: list[SweepRecord]) -> None:
    for a, b in zip(records[:-1], records[1:]):
        if b.e_profit < a.e_profit - _slack(a, b):
            raise SweepCheckError(
                f"expected profit decreases between p2={a.p2!r} ({a.e_profit!r}) and p2={b.p2!r} ({b.e_profit!r})"
            )


def cmd_sweep(cfg: RunConfig, p2_from: float, p2_to: float, steps: int, source: str = "closed") -> list[SweepRecord]:
    """Records on an even p2 grid; raises SweepCheckError if expected profit ever decreases."""
    grid = _p2_grid(p2_from, p2_to, steps)
    records = _run_points(cfg, [(p2, cfg.uncertainty_pct) for p2 in grid], source)
    check_profit_monotone(records)
    return records


def check_uncertainty_properties(by_pct: dict[float, list[SweepRecord]], cfg: RunConfig) -> None:
    """Lower baselines under wider supports on the interior_low branch; identical E[q_t] on single-strategy supports."""
    pcts = sorted(by_pct)
    p = cfg.consumer.retail_price
    for lo_pct, hi_pct in zip(pcts[:-1], pcts[1:]):
        for a, b in zip(by_pct[lo_pct], by_pct[hi_pct]):
            if a.p2 >= p or a.p2 == 0.0:
                continue
            if a.branch == b.branch == "interior_low" and a.source == "closed":
                ca, cb = cfg.with_point(a.p2, lo_pct), cfg.with_point(b.p2, hi_pct)
                if (theorem_applies(ca.program, ca.consumer, ca.uncertainty)
                        and theorem_applies(cb.program, cb.consumer, cb.uncertainty)
                        and not b.e_q_prev < a.e_q_prev):
                    raise SweepCheckError(
                        f"at p2={a.p2!r}: e_q_prev {b.e_q_prev!r} at {hi_pct}% is not below {a.e_q_prev!r} at {lo_pct}%"
                    )
    for lo_pct, hi_pct in zip(pcts[:-1], pcts[1:]):
        for a, b in zip(by_pct[lo_pct], by_pct[hi_pct]):
            if a.source != "closed":
                continue
            ra = _region(cfg.with_point(a.p2, lo_pct), a.e_q_prev)
            rb = _region(cfg.with_point(b.p2, hi_pct), b.e_q_prev)
            if len(ra) == 1 and ra == rb and not math.isclose(a.e_q_t, b.e_q_t, rel_tol=1e-9, abs_tol=1e-9):
                raise SweepCheckError(
                    f"at p2={a.p2!r}: e_q_t differs between {lo_pct}% ({a.e_q_t!r}) and {hi_pct}% ({b.e_q_t!r}) "
                    f"although both supports sit in strategy {ra}"
                )


def _region(cfg: RunConfig, q_prev: float) -> str:
    return classify_case(cfg.program, cfg.consumer, cfg.uncertainty, q_prev).region.rstrip("'")


def cmd_uncertainty(cfg: RunConfig, pcts, p2_from: float, p2_to: float, steps: int,
                    source: str = "closed") -> list[SweepRecord]:
    pcts = [float(x) for x in pcts]
    if not pcts:
        raise ValueError("at least one uncertainty percent is required")
    for pct in pcts:
        if not 0 < pct <= 100:
            raise ValueError(f"uncertainty percent must lie in (0, 100], got {pct}")
    by_pct = {pct: cmd_sweep(cfg.with_point(pct=pct), p2_from, p2_to, steps, source) for pct in pcts}
    check_uncertainty_properties(by_pct, cfg)
    return [r for pct in pcts for r in by_pct[pct]]


@dataclass(frozen=True)
class ThermalGrid:
    p2: np.ndarray
    pct: np.ndarray
    net: np.ndarray  # shape (len(p2), len(pct))
    records: list[SweepRecord]

    def argmax(self) -> tuple[float, float, float]:
        i, j = np.unravel_index(np.argmax(self.net), self.net.shape)
        return float(self.p2[i]), float(self.pct[j]), float(self.net[i, j])


def cmd_thermal(cfg: RunConfig, p2_values, pct_values, source: str = "closed") -> ThermalGrid:
    p2_values = np.asarray(list(p2_values), dtype=float)
    pct_values = np.asarray(list(pct_values), dtype=float)
    if p2_values.size == 0 or pct_values.size == 0:
        raise ValueError("thermal grids must be non-empty")
    records = _run_points(cfg, [(a, b) for a in p2_values for b in pct_values], source)
    net = np.array([r.net for r in records]).reshape(p2_values.size, pct_values.size)
    return ThermalGrid(p2_values, pct_values, net, records)


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating, int, np.integer)) else str(x)


def records_csv(records: list[SweepRecord]) -> str:
    buf = io.StringIO()
    buf.write(CSV_TAG + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for r in records:
        w.writerow([_fmt(getattr(r, c)) for c in COLUMNS])
    return buf.getvalue()


def thermal_csv(tg: ThermalGrid) -> str:
    buf = io.StringIO()
    buf.write(CSV_TAG + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["p2\\uncertainty_pct"] + [_fmt(x) for x in tg.pct])
    for p2, row in zip(tg.p2, tg.net):
        w.writerow([_fmt(p2)] + [_fmt(x) for x in row])
    return buf.getvalue()


def read_records_csv(text: str) -> list[SweepRecord]:
    lines = text.splitlines()
    if not lines or lines[0] != CSV_TAG:
        raise ValueError("missing ptr-rational v1 header line")
    rows = list(csv.DictReader(lines[1:]))
    out = []
    for row in rows:
        out.append(SweepRecord(
            float(row["p2"]), float(row["uncertainty_pct"]), float(row["e_q_prev"]), float(row["e_q_t"]),
            float(row["net"]), float(row["e_profit"]), row["case_id"], row["branch"], row["source"],
        ))
    return out


# --- closed form vs oracle -------------------------------------------------

@dataclass(frozen=True)
class VerifyCase:
    values: dict
    closed_q_prev: float
    oracle_q_prev: float
    q_tol: float
    closed_profit: float
    oracle_profit: float
    profit_tol: float

    @property
    def q_dev(self) -> float:
        return abs(self.closed_q_prev - self.oracle_q_prev)

    @property
    def profit_dev(self) -> float:
        return abs(self.closed_profit - self.oracle_profit)

    @property
    def passed(self) -> bool:
        return self.q_dev <= self.q_tol and self.profit_dev <= self.profit_tol

    def repro(self) -> str:
        """A config document that reruns this case with ``solve --source oracle --config``."""
        return json.dumps(self.values, sort_keys=True)


@dataclass(frozen=True)
class VerifyReport:
    cases: list[VerifyCase]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.cases)

    @property
    def max_q_dev(self) -> float:
        return max(c.q_dev for c in self.cases)

    @property
    def max_profit_dev(self) -> float:
        return max(c.profit_dev for c in self.cases)


TABLE_ROWS = (0.0, 0.15, 0.26, 0.45)


def random_valid_config(rng: np.random.Generator, base: RunConfig, max_tries: int = 10_000) -> RunConfig:
    """Draw parameters for which a closed-form theorem applies and p2 stays clear of the retail price."""
    for _ in range(max_tries):
        gamma = rng.uniform(0.03, 0.08)
        price = rng.uniform(0.15, 0.35)
        q_bar = rng.uniform(5.0, 10.0)
        pct = rng.uniform(5.0, 50.0)
        q_max = rng.uniform(q_bar * (1 + pct / 100) + 1.0, 2.5 * q_bar + 5.0)
        p2 = rng.uniform(0.0, 0.6)
        if abs(p2 - price) < 0.005:
            continue
        try:
            cp = ConsumerParams(gamma, price, q_bar, q_max)
            cfg = replace(base, consumer=cp, uncertainty_pct=pct, p2=p2)
            if theorem_applies(cfg.program, cp, cfg.uncertainty):
                return cfg
        except ValueError:
            continue
    raise RuntimeError("could not draw a parameter set satisfying the theorem preconditions")


def verify_one(cfg: RunConfig) -> VerifyCase:
    ocfg = replace(cfg.oracle, theta_prev_samples=0)
    closed = _closed(cfg)
    res = oracle_solve(cfg.program, cfg.consumer, cfg.uncertainty, ocfg)
    q_tol = ocfg.q_grid_step + 3.0 * res.stderr_q_prev
    # the oracle maximizes over a grid, so its optimum may sit below the exact one by the curvature term
    profit_tol = 4.0 * res.stderr_profit + cfg.consumer.gamma * ocfg.q_grid_step**2
    values = cfg.as_values()
    return VerifyCase(values, closed.e_q_prev, res.e_q_prev, q_tol, closed.e_profit, res.e_profit, profit_tol)


def cmd_verify(cfg: RunConfig, n_cases: int, seed: int, table_rows: bool = False) -> VerifyReport:
    if n_cases < 1:
        raise ValueError("n_cases must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    configs = [cfg.with_point(p2, 25.0) for p2 in TABLE_ROWS] if table_rows else []
    configs += [random_valid_config(rng, cfg) for _ in range(n_cases)]
    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as ex:
            cases = list(ex.map(verify_one, configs))
    else:
        cases = [verify_one(c) for c in configs]
    return VerifyReport(cases)
