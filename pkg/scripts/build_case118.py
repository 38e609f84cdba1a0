"""Regenerate ``src/loadshed/data/case118.m`` from the IEEE 118-bus data shipped with PYPOWER.

Usage::

    pip install pypower
    python scripts/build_case118.py [--margin 1.15] [--floor 30]

Changes relative to the source data:

* taps and phase shifts are dropped (the package uses the untapped pi model);
* the 35 synchronous condensers keep their rows but get ``Pmax = Pmin = 0``;
* ``rateA`` is set from the base-case DC flows: ``max(margin * |f|, floor)``
  rounded up to the next 5 MVA.  The source case has no ratings at all.

Default flexibility costs are synthesised from the gencost rows while
parsing and written out as an explicit ``flexcost`` block.
"""

from __future__ import annotations

import argparse
import math
from pathlib import Path

import numpy as np

from loadshed.casefile import format_case, parse_case

OUT = Path(__file__).resolve().parents[1] / "src" / "loadshed" / "data" / "case118.m"


def _rows(mat, ncols=None):
    out = []
    for r in np.asarray(mat):
        vals = r if ncols is None else r[:ncols]
        out.append("\t" + "\t".join(repr(float(v)) if not float(v).is_integer() else str(int(v))
                                     for v in vals) + ";")
    return out


def source_text() -> str:
    from pypower.case118 import case118

    mpc = case118()
    gen = mpc["gen"].copy()
    condenser = gen[:, 1] <= 0
    gen[condenser, 8] = 0.0
    gen[condenser, 9] = 0.0
    branch = mpc["branch"].copy()
    branch[:, 8] = 0.0
    branch[:, 9] = 0.0
    branch[:, 5:8] = 0.0
    lines = ["function mpc = case118", "mpc.version = '2';", f"mpc.baseMVA = {mpc['baseMVA']};",
             "mpc.bus = ["] + _rows(mpc["bus"], 13) + ["];", "mpc.gen = ["] + _rows(gen, 10)
    lines += ["];", "mpc.branch = ["] + _rows(branch, 11) + ["];"]
    lines += ["mpc.gencost = ["] + _rows(mpc["gencost"]) + ["];", ""]
    return "\n".join(lines)


def with_ratings(text: str, margin: float, floor: float) -> str:
    from loadshed.powerflow import solve_dc

    case = parse_case(text, name="case118")
    p = case.dc_schedule_pu() - case.demand_pu()[0]
    _, f = solve_dc(case, p)
    flows = np.abs(f) * case.base_mva
    limits = {br.id: 5 * math.ceil(max(margin * flows[k], floor) / 5)
              for k, br in enumerate(case.branches)}
    return _header(margin, floor) + format_case(case.with_flow_limits(limits)).replace(
        "function mpc = case118\n", "", 1)


def _header(margin, floor) -> str:
    return (
        "function mpc = case118\n"
        "% IEEE 118-bus system (public-domain data via PYPOWER), modified by\n"
        "% scripts/build_case118.py: taps dropped, condensers carry no real power,\n"
        f"% rateA = max({margin} * |base DC flow|, {floor} MVA) rounded up to 5 MVA.\n"
        "% The flexcost block was derived from the original gencost rows.\n"
    )


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--margin", type=float, default=1.15)
    ap.add_argument("--floor", type=float, default=30.0)
    ap.add_argument("--out", type=Path, default=OUT)
    args = ap.parse_args()
    args.out.write_text(with_ratings(source_text(), args.margin, args.floor), encoding="utf-8")
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
