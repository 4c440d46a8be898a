import json
import math
import subprocess
import sys
from dataclasses import replace

import numpy as np
import pytest
from click.testing import CliRunner

import ptr_rational.experiments as exp
from ptr_rational.cli import cli
from ptr_rational.dp import load_policy
from ptr_rational.experiments import (
    COLUMNS,
    CSV_TAG,
    ConfigError,
    RunConfig,
    SweepCheckError,
    cmd_solve,
    cmd_sweep,
    cmd_thermal,
    cmd_uncertainty,
    read_records_csv,
    records_csv,
)
from ptr_rational.stage_one import case_id


def run(*args):
    return CliRunner().invoke(cli, [str(a) for a in args])


def records(result):
    assert result.exit_code == 0, result.output
    return read_records_csv(result.stdout)


def test_csv_schema_and_header():
    res = run("solve", "--p2", 0.15)
    lines = res.stdout.splitlines()
    assert lines[0] == CSV_TAG
    assert lines[1].split(",") == list(COLUMNS)
    (rec,) = read_records_csv(res.stdout)
    assert (rec.e_q_prev, rec.e_q_t, rec.net) == (11.0, 5.0, 16.0)
    assert rec.e_profit == pytest.approx(3.65, abs=1e-12)
    assert (rec.case_id, rec.branch, rec.source) == ("Case1", "q_bar_plus_p2_over_gamma", "closed")


@pytest.mark.parametrize(
    "p2,q_prev,q_t,profit",
    [(0.0, 8.0, 8.0, 3.20), (0.15, 11.0, 5.0, 3.65), (0.26, 20.0, 2.79, 4.55)],
)
def test_solve_reference_rows(p2, q_prev, q_t, profit):
    (rec,) = records(run("solve", "--p2", p2))
    assert rec.e_q_prev == pytest.approx(q_prev, abs=0.02)
    assert rec.e_q_t == pytest.approx(q_t, abs=0.05)
    assert rec.e_profit == pytest.approx(profit, abs=0.03)


def test_every_record_is_self_consistent():
    cfg = RunConfig()
    recs = cmd_uncertainty(cfg, [10, 30, 50, 90], 0.0, 0.6, 31)
    for r in recs:
        assert r.net == r.e_q_prev + r.e_q_t
        point = cfg.with_point(r.p2, r.uncertainty_pct)
        assert r.case_id == case_id(point.program, point.consumer, point.uncertainty)
    text = records_csv(recs)
    for r in read_records_csv(text):
        assert r.net == r.e_q_prev + r.e_q_t


def test_sweep_output_is_byte_identical(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert run("sweep", "--out", a).exit_code == 0
    assert run("sweep", "--out", b).exit_code == 0
    assert a.read_bytes() == b.read_bytes()
    assert len(read_records_csv(a.read_text())) == 121


def test_oracle_sweep_is_byte_identical_and_worker_independent():
    args = ("sweep", "--source", "oracle", "--samples", 500, "--grid-step", 0.05, "--seed", 7,
            "--p2-from", 0.0, "--p2-to", 0.3, "--steps", 4)
    a, b = run(*args), run(*args)
    c = run(*args, "--workers", 3)
    assert a.exit_code == 0, a.output
    assert a.stdout == b.stdout == c.stdout


def test_uncertainty_at_25_percent_reproduces_sweep():
    cfg = RunConfig()
    assert cmd_uncertainty(cfg, [25], 0.0, 0.6, 121) == cmd_sweep(cfg, 0.0, 0.6, 121)


def test_sweep_two_point_endpoints_on_interior_branch():
    recs = records(run("sweep", "--p2-from", 0, "--p2-to", 0.05, "--steps", 2))
    assert [r.branch for r in recs] == ["interior_low", "interior_low"]


def test_single_point_sweep_rejected():
    assert run("sweep", "--steps", 1).exit_code == 1
    with pytest.raises(ValueError):
        cmd_sweep(RunConfig(), 0.0, 0.6, 1)


def test_uncertainty_saturates_at_high_rebate():
    recs = records(run("uncertainty", "--p2-from", 0.45, "--p2-to", 0.5, "--steps", 2))
    assert {r.e_q_prev for r in recs if r.p2 == 0.5} == {20.0}
    assert sorted({r.uncertainty_pct for r in recs}) == [10.0, 30.0, 50.0, 90.0]


def test_thermal_single_cell_matches_solve():
    res = run("thermal", "--p2-from", 0.15, "--steps", 1, "--pct", "25")
    lines = res.stdout.splitlines()
    assert res.exit_code == 0 and lines[0] == CSV_TAG
    assert lines[1] == "p2\\uncertainty_pct,25.0"
    (solo,) = records(run("solve", "--p2", 0.15))
    assert float(lines[2].split(",")[1]) == solo.net


def test_thermal_shape_and_argmax_helper():
    tg = cmd_thermal(RunConfig(), np.linspace(0, 0.6, 13), [10, 50, 90])
    assert tg.net.shape == (13, 3)
    p2, pct, val = tg.argmax()
    assert val == tg.net.max() and p2 in tg.p2 and pct in tg.pct
    with pytest.raises(ValueError):
        cmd_thermal(RunConfig(), [], [25])


def test_config_file_round_trip(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"p2": 0.15, "gamma": 0.05, "uncertainty_pct": 25, "seed": 3}))
    (rec,) = records(run("solve", "--config", path))
    assert rec.e_q_prev == 11.0
    # command-line flags override the file
    (rec,) = records(run("solve", "--config", path, "--p2", 0.0))
    assert rec.e_q_prev == 8.0


def test_config_errors_name_line_and_field(tmp_path):
    broken = tmp_path / "broken.json"
    broken.write_text('{\n  "p2": 0.15,\n  "gamma": ,\n}\n')
    res = run("solve", "--config", broken)
    assert res.exit_code == 1
    assert f"{broken}:3:" in res.stderr

    unknown = tmp_path / "unknown.json"
    unknown.write_text('{"p3": 1}')
    res = run("solve", "--config", unknown)
    assert res.exit_code == 1 and "'p3'" in res.stderr

    bad_value = tmp_path / "bad.json"
    bad_value.write_text('{"gamma": -1}')
    res = run("solve", "--config", bad_value)
    assert res.exit_code == 1 and "consumer" in res.stderr and "gamma" in res.stderr

    with pytest.raises(ConfigError):
        RunConfig.from_mapping({"n_samples": 1.5})
    with pytest.raises(ConfigError):
        RunConfig.load(str(tmp_path / "missing.json"))


def test_usage_errors_exit_one():
    assert run("solve", "--source", "nope").exit_code == 1
    assert run("nosuchcommand").exit_code == 1
    assert run("solve", "--p2", -0.1).exit_code == 1
    assert run("solve", "--pct", 0).exit_code == 1
    assert run("solve", "--workers", 0).exit_code == 1
    assert run("verify", "--cases", 0).exit_code == 1
    assert run("uncertainty", "--pct", "10,x").exit_code == 1
    assert run("solve", "--grid-step", 0).exit_code == 1


def test_help_exits_zero():
    res = run("--help")
    assert res.exit_code == 0
    for name in ("solve", "sweep", "uncertainty", "thermal", "verify", "dp"):
        assert name in res.stdout


def test_verify_passes_and_reports():
    res = run("verify", "--cases", 2, "--samples", 1000, "--grid-step", 0.02)
    assert res.exit_code == 0, res.output
    assert res.stdout.strip().endswith("verify: pass")
    assert res.stdout.count("PASS case") == 2


def test_verify_failure_exits_two_with_repro(monkeypatch):
    real = exp.oracle_solve

    def off(pp, cp, um, cfg):
        res = real(pp, cp, um, cfg)
        return replace(res, e_q_prev=res.e_q_prev + 1.0)

    monkeypatch.setattr(exp, "oracle_solve", off)
    res = run("verify", "--cases", 1, "--samples", 500, "--grid-step", 0.05)
    assert res.exit_code == 2
    assert "FAIL case 0" in res.stdout
    repro = res.stdout.split("repro config: ")[1].splitlines()[0]
    assert set(json.loads(repro)) == {"gamma", "retail_price", "q_bar", "q_max", "p2", "uncertainty_pct",
                                      "n_samples", "seed"}


def test_sweep_check_failure_exits_two(monkeypatch):
    real = exp._closed

    def wobbly(cfg):
        rec = real(cfg)
        return replace(rec, e_profit=rec.e_profit - (1.0 if cfg.p2 > 0.3 else 0.0))

    monkeypatch.setitem(exp._SOLVERS, "closed", wobbly)
    res = run("sweep")
    assert res.exit_code == 2
    assert "decreases" in res.stderr
    with pytest.raises(SweepCheckError):
        cmd_sweep(RunConfig(), 0, 0.6, 121)


def test_dp_command_and_policy_file(tmp_path):
    policy = tmp_path / "table.bin"
    res = run("dp", "--p2", 0.15, "--grid-step", 0.05, "--policy-out", policy)
    (rec,) = records(res)
    assert rec.source == "dp"
    assert rec.e_q_prev == pytest.approx(11.0, abs=0.05)
    assert rec.net == rec.e_q_prev + rec.e_q_t
    pt = load_policy(policy)
    assert pt.expected_total == rec.e_profit
    assert pt.expected_first_decision() == rec.e_q_prev


def test_dp_multi_period_record():
    (rec,) = records(run("dp", "--p2", 0.15, "--grid-step", 0.1, "--n-periods", 2, "--baseline", "mean",
                         "--call-probability", 0.5))
    assert math.isnan(rec.e_q_t) and math.isnan(rec.net)
    assert rec.branch == "n2-mean-r0.5"


def test_dp_resource_limit_exits_three():
    res = run("dp", "--n-periods", 3, "--baseline", "mean", "--grid-step", 0.01)
    assert res.exit_code == 3
    assert "cells" in res.stderr


def test_solve_sources_agree_at_reference_point():
    cfg = RunConfig(p2=0.15)
    closed = cmd_solve(cfg, "closed")
    dp = cmd_solve(cfg, "dp")
    assert dp.e_q_prev == pytest.approx(closed.e_q_prev, abs=0.01)
    assert dp.e_profit == pytest.approx(closed.e_profit, abs=1e-3)
    with pytest.raises(ValueError):
        cmd_solve(cfg, "magic")


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "ptr_rational", "solve", "--p2", "0"],
                         capture_output=True, text=True, check=True)
    assert read_records_csv(out.stdout)[0].net == 16.0
