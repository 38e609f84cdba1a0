"""Local measurement vectors seen by one load bus."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..network import NetworkCase
from ..powerflow import PowerFlowState

LAYOUT_VERSION = 1


@dataclass(frozen=True)
class FeatureLayout:
    """Slot order of the feature vector at ``bus``.

    ``[p_d, q_d]`` followed by a pre- and a post-contingency block, each
    ``[V, omega, p_ij..., q_ij...]`` over the incident branches in ascending
    id order.  Powers are in MW/MVAr as measured at ``bus``, ``V`` in p.u.
    and ``omega`` in Hz.
    """

    bus: int
    branch_ids: tuple[int, ...]
    version: int = LAYOUT_VERSION

    @classmethod
    def for_bus(cls, case: NetworkCase, bus: int) -> "FeatureLayout":
        if bus not in case.bus_index:
            raise KeyError(f"unknown bus {bus}")
        return cls(bus, case.adjacency[bus])

    @property
    def degree(self) -> int:
        return len(self.branch_ids)

    def __len__(self) -> int:
        return 2 + 2 * (2 + 2 * self.degree)

    @property
    def names(self) -> list[str]:
        out = ["p_d", "q_d"]
        for phase in ("pre", "post"):
            out += [f"{phase}_v", f"{phase}_omega"]
            out += [f"{phase}_p_{b}" for b in self.branch_ids]
            out += [f"{phase}_q_{b}" for b in self.branch_ids]
        return out

    def describe(self) -> str:
        """Compact text form stored in model files: ``v1:bus:b1,b2,...``."""
        return f"v{self.version}:{self.bus}:" + ",".join(str(b) for b in self.branch_ids)

    @classmethod
    def parse(cls, text: str) -> "FeatureLayout":
        ver, bus, branches = text.strip().split(":")
        ids = tuple(int(b) for b in branches.split(",")) if branches else ()
        return cls(int(bus), ids, int(ver.lstrip("v")))


def _incident_flows(case: NetworkCase, bus: int, state: PowerFlowState, branch_ids) -> tuple:
    p, q = [], []
    base = case.base_mva
    for b in branch_ids:
        row = case.branch_index[b]
        pf, qf, pt, qt = state.branch_flows[row]
        if case.branches[row].from_bus == bus:
            p.append(pf * base)
            q.append(qf * base)
        else:
            p.append(pt * base)
            q.append(qt * base)
    return p, q


def extract_features(
    case: NetworkCase,
    layout: FeatureLayout,
    pre: PowerFlowState,
    post: PowerFlowState,
    omega_pre: float,
    omega_post: float,
) -> np.ndarray:
    """Assemble the feature vector for ``layout.bus`` from two solved states.

    Branches outaged in ``post`` carry zero flow in its ``branch_flows``, so
    their post-contingency slots are exactly 0.
    """
    i = case.bus_index[layout.bus]
    base = case.base_mva
    x = [pre.p_demand[i] * base, pre.q_demand[i] * base]
    for state, omega in ((pre, omega_pre), (post, omega_post)):
        p, q = _incident_flows(case, layout.bus, state, layout.branch_ids)
        x += [state.v_mag[i], omega] + p + q
    return np.array(x, dtype=float)
