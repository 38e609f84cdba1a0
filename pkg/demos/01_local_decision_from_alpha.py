"""Why one number per bus is enough: the marginal cost alpha fixes the local decision.

A three-bus chain feeds a 100 MW load at bus 3 through a 50 MW line.  The
load-shedding problem is solved centrally, then each bus recovers its own
decision from its alpha alone and we check that it matches.

Run with ``python demos/01_local_decision_from_alpha.py``.
"""

import numpy as np

from loadshed.casefile import parse_case
from loadshed.ols import build_problem, recover_shedding, solve, split_decision

CHAIN = """\
mpc.baseMVA = 100;
mpc.bus = [
    1 3 0   0 0 0 1 1 0 230 1 1.1 0.9;
    2 1 0   0 0 0 1 1 0 230 1 1.1 0.9;
    3 1 100 0 0 0 1 1 0 230 1 1.1 0.9;
];
mpc.gen = [
    1 100 0 100 -100 1 100 1 200 0;
];
mpc.branch = [
    1 2 0 0.1 0 0  0  0  0 0 1;
    2 3 0 0.1 0 50 50 50 0 0 1;
];
mpc.flexcost = [
    1 0.01 0.04 0 -300 -100 100 0;
    3 0.05 0.2  1 -25  0    10  90;
];
"""


def main():
    case = parse_case(CHAIN, name="chain")
    prob = build_problem(case, None)
    sol = solve(prob)
    print(f"status {sol.status.value}, objective {sol.objective:.4f}, {sol.iterations} iterations")

    # the line into bus 3 is full, so bus 3 must cover the remaining 50 MW locally
    for i, bus in enumerate(case.buses):
        if bus.id not in case.cost_by_bus:
            print(f"bus {bus.id}: transit bus, no flexibility")
            continue
        fc = prob.effective_cost(i)
        local = recover_shedding(sol.alpha[i], fc)
        reserve, shed = split_decision(sol, bus.id)
        print(f"bus {bus.id}: alpha {sol.alpha[i]:8.3f} $/MWh -> local decision {local:7.3f} MW "
              f"(central {sol.p_shed_total[i]:7.3f} MW = {reserve:.1f} reserve + {shed:.1f} shed)")

    # the map alpha -> p is monotone and flat only at the reserve/shedding kink
    fc = prob.effective_cost(2)
    print(f"\nbus 3 response curve (kink at {fc.kink_marginal:.1f} $/MWh):")
    for a in np.linspace(-2.0, 30.0, 9):
        print(f"  alpha {a:6.1f} -> p {recover_shedding(a, fc):6.2f} MW")


if __name__ == "__main__":
    main()
