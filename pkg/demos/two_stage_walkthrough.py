"""How one consumer reacts to a rebate offer, period by period.

Run: python demos/two_stage_walkthrough.py
"""
from ptr_rational import (
    ConsumerParams,
    ProgramParams,
    UncertaintyModel,
    classify_case,
    expected_q_t,
    optimal_q_t,
    solve_stage_two_closed,
    stage_two_objective,
)

cp = ConsumerParams()
um = UncertaintyModel.from_percent(25, cp.q_bar)

print("event-day response to a baseline of 11 kWh at p2 = 0.15:")
for theta in (-2.0, 0.0, 2.0):
    d = optimal_q_t(11.0, theta, ProgramParams(0.15), cp)
    print(f"  shock {theta:+.1f}: consume {d.q_t:.2f} kWh (strategy {d.strategy.name})")

print("\nbaseline the consumer chooses the day before, and what follows:")
for p2 in (0.0, 0.05, 0.15, 0.26, 0.45):
    pp = ProgramParams(p2)
    sol = solve_stage_two_closed(pp, cp, um)
    b = sol.expected_q_prev
    label = classify_case(pp, cp, um, b)
    print(f"  p2={p2:.2f}: baseline {b:6.3f} kWh, event load {expected_q_t(b, pp, cp, um):6.3f} kWh, "
          f"profit {stage_two_objective(b, 0.0, pp, cp, um):.4f} $  [{label.case_id}/{label.region}, "
          f"{sol.active_branch.value}]")
