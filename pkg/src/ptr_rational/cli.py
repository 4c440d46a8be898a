"""``ptr-rational`` command line.

Exit codes: 0 success, 1 usage or config error, 2 verification or sweep-check
failure, 3 resource limit.
"""
from __future__ import annotations

import functools
import sys
from dataclasses import replace

import click
import numpy as np

from .dp import DPResourceError, GridSpec, HorizonSpec, save_policy, solve_backward
from .experiments import (
    SOURCES,
    ConfigError,
    RunConfig,
    SweepCheckError,
    cmd_solve,
    cmd_sweep,
    cmd_thermal,
    cmd_uncertainty,
    cmd_verify,
    dp_record,
    records_csv,
    thermal_csv,
)
from .model import ProgramParams
from .oracle import OracleError

EXIT_OK, EXIT_USAGE, EXIT_VERIFY, EXIT_RESOURCE = 0, 1, 2, 3


class _Group(click.Group):
    """Maps click's usage errors to exit code 1 instead of 2."""

    def main(self, args=None, prog_name=None, complete_var=None, standalone_mode=True, **extra):
        try:
            rv = super().main(args, prog_name, complete_var, standalone_mode=False, **extra)
            code = rv if isinstance(rv, int) else EXIT_OK
        except click.exceptions.Exit as exc:
            code = exc.exit_code
        except click.ClickException as exc:
            exc.show()
            code = EXIT_USAGE
        except click.Abort:
            click.echo("Aborted!", err=True)
            code = EXIT_USAGE
        if standalone_mode:
            sys.exit(code)
        return code


def _exits(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as exc:
            click.echo(f"config error: {exc}", err=True)
            raise click.exceptions.Exit(EXIT_USAGE)
        except (SweepCheckError, OracleError) as exc:
            click.echo(f"check failed: {exc}", err=True)
            raise click.exceptions.Exit(EXIT_VERIFY)
        except DPResourceError as exc:
            click.echo(f"resource limit: {exc}", err=True)
            raise click.exceptions.Exit(EXIT_RESOURCE)
        except ValueError as exc:
            click.echo(f"error: {exc}", err=True)
            raise click.exceptions.Exit(EXIT_USAGE)

    return wrapper


def _common(fn):
    opts = [
        click.option("--config", "config_path", type=click.Path(dir_okay=False), help="JSON file with flat parameter keys."),
        click.option("--p2", type=float, help="Rebate price in $/kWh."),
        click.option("--samples", type=int, help="Monte Carlo draws for the oracle."),
        click.option("--seed", type=int, help="Oracle seed."),
        click.option("--grid-step", type=float, help="Decision grid step in kWh (oracle and dp)."),
        click.option("--workers", type=int, default=1, show_default=True),
        click.option("--out", type=click.Path(dir_okay=False), help="Write CSV here instead of stdout."),
    ]
    for opt in reversed(opts):
        fn = opt(fn)
    return fn


def _source_opt(fn):
    return click.option("--source", type=click.Choice(SOURCES), default="closed", show_default=True)(fn)


def _build_config(config_path, p2=None, samples=None, seed=None, grid_step=None, workers=1, out=None,
                  pct=None) -> RunConfig:
    cfg = RunConfig.load(config_path) if config_path else RunConfig()
    values = cfg.as_values()
    for key, val in (("p2", p2), ("n_samples", samples), ("seed", seed), ("uncertainty_pct", pct)):
        if val is not None:
            values[key] = val
    cfg = RunConfig.from_values(origin="command line", **values)
    if grid_step is not None:
        try:
            cfg = replace(cfg, oracle=replace(cfg.oracle, q_grid_step=grid_step),
                          dp_grid=replace(cfg.dp_grid, q_step=grid_step))
        except ValueError as exc:
            raise ConfigError(f"--grid-step: {exc}") from None
    if workers < 1:
        raise ConfigError("--workers must be >= 1")
    return replace(cfg, out=out, workers=workers, oracle=replace(cfg.oracle, workers=workers))


def _emit(text: str, out: str | None) -> None:
    if out:
        with open(out, "w", newline="") as fh:
            fh.write(text)
    else:
        click.echo(text, nl=False)


def _parse_floats(text: str, name: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise click.BadParameter(f"expected a comma-separated list of numbers, got {text!r}", param_hint=name)


@click.group(cls=_Group, context_settings={"help_option_names": ["-h", "--help"]})
def cli():
    """Rational consumption under a peak time rebate: closed form, Monte Carlo oracle and DP."""


@cli.command()
@_common
@click.option("--pct", type=float, help="Uncertainty as percent of q_bar.")
@_source_opt
@_exits
def solve(config_path, p2, samples, seed, grid_step, workers, out, pct, source):
    """Optimal baseline, event load and expected profit for one parameter set."""
    cfg = _build_config(config_path, p2, samples, seed, grid_step, workers, out, pct)
    _emit(records_csv([cmd_solve(cfg, source)]), cfg.out)


@cli.command()
@_common
@click.option("--pct", type=float, help="Uncertainty as percent of q_bar.")
@click.option("--p2-from", type=float, default=0.0, show_default=True)
@click.option("--p2-to", type=float, default=0.6, show_default=True)
@click.option("--steps", type=int, default=121, show_default=True)
@_source_opt
@_exits
def sweep(config_path, p2, samples, seed, grid_step, workers, out, pct, p2_from, p2_to, steps, source):
    """Sweep the rebate price on an even grid."""
    cfg = _build_config(config_path, p2, samples, seed, grid_step, workers, out, pct)
    _emit(records_csv(cmd_sweep(cfg, p2_from, p2_to, steps, source)), cfg.out)


@cli.command()
@_common
@click.option("--pct", "pct_list", default="10,30,50,90", show_default=True, help="Comma-separated percents.")
@click.option("--p2-from", type=float, default=0.0, show_default=True)
@click.option("--p2-to", type=float, default=0.6, show_default=True)
@click.option("--steps", type=int, default=121, show_default=True)
@_source_opt
@_exits
def uncertainty(config_path, p2, samples, seed, grid_step, workers, out, pct_list, p2_from, p2_to, steps, source):
    """One rebate sweep per uncertainty level."""
    pcts = _parse_floats(pct_list, "--pct")
    cfg = _build_config(config_path, p2, samples, seed, grid_step, workers, out)
    _emit(records_csv(cmd_uncertainty(cfg, pcts, p2_from, p2_to, steps, source)), cfg.out)


@cli.command()
@_common
@click.option("--pct", "pct_list", default=",".join(str(x) for x in range(5, 100, 5)), show_default=True)
@click.option("--p2-from", type=float, default=0.0, show_default=True)
@click.option("--p2-to", type=float, default=0.6, show_default=True)
@click.option("--steps", type=int, default=121, show_default=True)
@_source_opt
@_exits
def thermal(config_path, p2, samples, seed, grid_step, workers, out, pct_list, p2_from, p2_to, steps, source):
    """Net consumption matrix over rebate price (rows) and uncertainty percent (columns)."""
    pcts = _parse_floats(pct_list, "--pct")
    cfg = _build_config(config_path, p2, samples, seed, grid_step, workers, out)
    if steps < 1:
        raise click.BadParameter("must be >= 1", param_hint="--steps")
    p2s = np.linspace(p2_from, p2_to, steps) if steps > 1 else np.array([p2_from])
    _emit(thermal_csv(cmd_thermal(cfg, p2s, pcts, source)), cfg.out)


@cli.command()
@_common
@click.option("--cases", "n_cases", type=int, default=50, show_default=True)
@click.option("--table-rows/--no-table-rows", default=False, help="Also check the four reference rows.")
@_exits
def verify(config_path, p2, samples, seed, grid_step, workers, out, n_cases, table_rows):
    """Compare closed forms against the Monte Carlo oracle on random valid parameter sets."""
    if n_cases < 1:
        raise click.BadParameter("must be >= 1", param_hint="--cases")
    cfg = _build_config(config_path, p2, samples, None, grid_step, workers, out)
    report = cmd_verify(cfg, n_cases, 42 if seed is None else seed, table_rows)
    lines = []
    for i, c in enumerate(report.cases):
        status = "PASS" if c.passed else "FAIL"
        lines.append(f"{status} case {i}: q_prev closed={c.closed_q_prev:.4f} oracle={c.oracle_q_prev:.4f} "
                     f"(dev {c.q_dev:.4f} tol {c.q_tol:.4f}); profit dev {c.profit_dev:.5f} tol {c.profit_tol:.5f}")
        if not c.passed:
            lines.append(f"  repro config: {c.repro()}")
    lines.append(f"max q_prev deviation {report.max_q_dev:.5f}, max profit deviation {report.max_profit_dev:.5f}")
    lines.append("verify: " + ("pass" if report.passed else "FAIL"))
    _emit("\n".join(lines) + "\n", cfg.out)
    if not report.passed:
        raise click.exceptions.Exit(EXIT_VERIFY)


@cli.command()
@_common
@click.option("--pct", type=float, help="Uncertainty as percent of q_bar.")
@click.option("--n-periods", type=int, default=1, show_default=True)
@click.option("--baseline", type=click.Choice(["last", "mean"]), default="last", show_default=True)
@click.option("--call-probability", type=float, default=1.0, show_default=True)
@click.option("--theta-nodes", type=int, default=9, show_default=True)
@click.option("--max-cells", type=int, default=50_000_000, show_default=True)
@click.option("--policy-out", type=click.Path(dir_okay=False), help="Save the policy table.")
@_exits
def dp(config_path, p2, samples, seed, grid_step, workers, out, pct, n_periods, baseline, call_probability,
       theta_nodes, max_cells, policy_out):
    """Backward induction over n baseline-setting periods; prints the first-period expectation and total value."""
    cfg = _build_config(config_path, p2, samples, seed, grid_step, workers, out, pct)
    hs = HorizonSpec(n_periods, baseline, call_probability)
    gs = GridSpec(cfg.dp_grid.q_step, theta_nodes)
    pt = solve_backward(hs, gs, ProgramParams(cfg.p2), cfg.consumer, cfg.uncertainty, max_cells=max_cells,
                        workers=workers)
    if policy_out:
        save_policy(pt, policy_out)
    _emit(records_csv([dp_record(cfg, pt)]), cfg.out)


def main(argv=None):
    return cli.main(args=argv, prog_name="ptr-rational")
