"""Can a bus tell outages apart from its own line flows?

Under the DC model an outage changes every surviving flow by ``d @ f_k``.
A bus only sees the rows of ``d`` for its incident branches, so two
outages are distinguishable there exactly when their local column spaces
differ (smallest principal-angle cosine below one).

This compares bus 34 of the 118-bus case with bus 15 on the five
heaviest-loaded outages (three single lines and two line pairs), and
shows why bus 34 cannot separate the line pairs.

Run with ``python demos/02_which_contingency_happened.py``.
"""

import numpy as np

from loadshed.casefile import load_case
from loadshed.identifiability import check_set, isf_matrix, local_submatrix, outage_sensitivity
from loadshed.powerflow import top_flow_contingencies


def show(case, bus, conts):
    rep = check_set(case, bus, conts)
    print(f"\nbus {bus} ({len(case.adjacency[bus])} incident branches): "
          f"{'identifiable' if rep.identifiable else 'NOT identifiable'}")
    for p in rep.pairs:
        print(f"  {p.pair[0]:>10} vs {p.pair[1]:<10} min sigma {p.min_sigma:.6f} "
              f"max angle {np.degrees(p.beta.max()):6.2f} deg")


def main():
    case = load_case("case118")
    conts = top_flow_contingencies(case, [1, 1, 1, 2, 2])
    print("contingencies:", ", ".join(c.id for c in conts))
    show(case, 15, conts)
    show(case, 34, conts)

    # stack every local response at bus 34: only two directions ever appear
    S = isf_matrix(case)
    stacked = np.hstack([local_submatrix(outage_sensitivity(case, c, S), case, 34) for c in conts])
    sv = np.linalg.svd(stacked, compute_uv=False)
    print("\nsingular values of all local responses at bus 34:", np.array2string(sv, precision=3))
    print("a line pair fills this two-dimensional space, so it contains every other outage")


if __name__ == "__main__":
    main()
