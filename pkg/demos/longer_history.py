"""Baseline gaming when the baseline averages two earlier days and the event is not certain.

Run: python demos/longer_history.py
"""
import numpy as np

from ptr_rational import ConsumerParams, GridSpec, HorizonSpec, ProgramParams, UncertaintyModel
from ptr_rational import evaluate_policy, solve_backward

cp = ConsumerParams()
um = UncertaintyModel.from_percent(25, cp.q_bar)
gs = GridSpec(q_step=0.05)

for call in (1.0, 0.5, 0.0):
    hs = HorizonSpec(n_periods=2, baseline_fn="mean", call_probability=call)
    pt = solve_backward(hs, gs, ProgramParams(0.15), cp, um)
    first = pt.expected_first_decision()
    # second day's choice after a typical first day
    i = int(np.argmin(np.abs(pt.q_grid - first)))
    second = float(pt.weights @ pt.policies[0][i])
    mean, se = evaluate_policy(pt, hs, ProgramParams(0.15), cp, um, n_rollouts=20_000, seed=1)
    print(f"call probability {call:.1f}: day 1 {first:.2f} kWh, day 2 {second:.2f} kWh, "
          f"total value {pt.expected_total:.4f} (rollouts {mean:.4f} +- {se:.4f})")
