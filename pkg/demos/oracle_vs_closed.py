"""Check the closed-form baseline against the brute-force Monte Carlo oracle.

Run: python demos/oracle_vs_closed.py
"""
import time

from ptr_rational import ConsumerParams, OracleConfig, ProgramParams, UncertaintyModel, oracle_solve
from ptr_rational import solve_stage_two_closed

cp = ConsumerParams()
um = UncertaintyModel.from_percent(25, cp.q_bar)
cfg = OracleConfig(n_samples=10_000, q_grid_step=0.01, seed=0, theta_prev_samples=0, check_convergence=True)

for p2 in (0.0, 0.05, 0.15, 0.3):
    t0 = time.perf_counter()
    res = oracle_solve(ProgramParams(p2), cp, um, cfg)
    closed = solve_stage_two_closed(ProgramParams(p2), cp, um).expected_q_prev
    print(f"p2={p2:.2f}: closed {closed:.4f}  oracle {res.e_q_prev:.2f} +- {res.stderr_q_prev:.3f}  "
          f"profit {res.e_profit:.4f} +- {res.stderr_profit:.4f}  grid gap {res.max_grid_gap:.1e}  "
          f"({time.perf_counter() - t0:.1f} s)")
