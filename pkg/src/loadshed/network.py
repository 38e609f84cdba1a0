"""In-memory grid model and the matrices built from it.

Quantities on the dataclasses are stored in the units of the case file
(MW, MVAr, p.u. impedances); solver-facing helpers return per-unit arrays
on ``NetworkCase.base_mva``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from typing import Iterable

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

CONTINUITY_TOL = 1e-9


class CaseValidationError(ValueError):
    """Raised when a network description violates a model invariant."""


class BusKind(str, Enum):
    SLACK = "slack"
    PV = "pv"
    PQ = "pq"


@dataclass(frozen=True)
class Bus:
    id: int
    kind: BusKind
    p_demand: float  # MW
    q_demand: float  # MVAr
    v_setpoint: float = 1.0
    v_min: float = 0.9
    v_max: float = 1.1
    angle_min: float = -math.pi
    angle_max: float = math.pi
    g_shunt: float = 0.0  # MW consumed at 1 p.u. voltage
    b_shunt: float = 0.0  # MVAr injected at 1 p.u. voltage
    base_kv: float = 0.0


@dataclass(frozen=True)
class Branch:
    id: int
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_shunt: float = 0.0  # total line charging, p.u.
    flow_limit: float = math.inf  # MVA; inf means unlimited
    in_service: bool = True

    @property
    def limited(self) -> bool:
        return math.isfinite(self.flow_limit)


@dataclass(frozen=True)
class Generator:
    bus: int
    p_out: float
    q_out: float
    p_min: float
    p_max: float
    q_min: float
    q_max: float
    v_setpoint: float = 1.0
    in_service: bool = True


@dataclass(frozen=True)
class FlexibilityCost:
    """Piecewise-quadratic cost of active-power flexibility at one bus.

    The reserve piece ``a1 * p**2`` covers ``[reserve_down, reserve_up]``;
    the shedding piece ``a2 * p**2 + b2 * p + c2`` covers
    ``[reserve_up, reserve_up + sheddable_cap]``.  Coefficients are in $/h
    with ``p`` in MW.
    """

    bus: int
    a1: float
    a2: float
    b2: float
    c2: float
    reserve_down: float
    reserve_up: float
    sheddable_cap: float
    q_reserve_down: float = 0.0
    q_reserve_up: float = 0.0

    @classmethod
    def from_band(
        cls,
        bus: int,
        a1: float,
        reserve_down: float,
        reserve_up: float,
        sheddable_cap: float,
        a2_ratio: float = 4.0,
        b2: float = 0.0,
    ) -> "FlexibilityCost":
        """Build a cost whose shedding piece joins the reserve piece continuously."""
        a2 = a2_ratio * a1
        c2 = a1 * reserve_up**2 - a2 * reserve_up**2 - b2 * reserve_up
        return cls(bus, a1, a2, b2, c2, reserve_down, reserve_up, sheddable_cap)

    @property
    def kink_marginal(self) -> float:
        """Marginal cost ($/MWh) of the shedding piece at the reserve limit."""
        return 2.0 * self.a2 * self.reserve_up + self.b2

    @property
    def upper(self) -> float:
        return self.reserve_up + self.sheddable_cap

    def cost(self, p):
        """Evaluate the piecewise cost at ``p`` (MW); vectorised."""
        p = np.asarray(p, dtype=float)
        reserve = self.a1 * p**2
        shed = self.a2 * p**2 + self.b2 * p + self.c2
        return np.where(p <= self.reserve_up, reserve, shed)

    def validate(self, p_demand: float | None = None) -> None:
        if not (self.a1 > 0 and self.a2 > 0):
            raise CaseValidationError(f"bus {self.bus}: a1 and a2 must be positive")
        if self.reserve_down > 0 or self.reserve_up < 0:
            raise CaseValidationError(f"bus {self.bus}: reserve band must contain 0")
        if self.sheddable_cap < 0:
            raise CaseValidationError(f"bus {self.bus}: negative sheddable cap")
        r = self.reserve_up
        gap = self.a1 * r * r - (self.a2 * r * r + self.b2 * r + self.c2)
        if abs(gap) > CONTINUITY_TOL * max(1.0, abs(self.a1 * r * r)):
            raise CaseValidationError(
                f"bus {self.bus}: cost pieces do not meet at the reserve limit (gap {gap:.3g})"
            )
        if 2 * self.a1 * r > self.kink_marginal + CONTINUITY_TOL:
            raise CaseValidationError(
                f"bus {self.bus}: reserve marginal cost exceeds shedding marginal cost"
            )
        if p_demand is not None and self.sheddable_cap > p_demand + 1e-9:
            raise CaseValidationError(f"bus {self.bus}: sheddable cap exceeds demand")


@dataclass(frozen=True)
class NetworkCase:
    base_mva: float
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    generators: tuple[Generator, ...]
    costs: tuple[FlexibilityCost, ...] = ()
    name: str = field(default="case", compare=False)

    def __post_init__(self):
        self._validate()

    def _validate(self) -> None:
        ids = [b.id for b in self.buses]
        seen: set[int] = set()
        for i in ids:
            if i in seen:
                raise CaseValidationError(f"duplicate bus id {i}")
            seen.add(i)
        slack = [b.id for b in self.buses if b.kind is BusKind.SLACK]
        if len(slack) != 1:
            raise CaseValidationError(
                "missing slack bus" if not slack else f"multiple slack buses {slack}"
            )
        for b in self.buses:
            if b.v_min > b.v_max:
                raise CaseValidationError(f"bus {b.id}: v_min > v_max")
            if not (math.isfinite(b.p_demand) and math.isfinite(b.q_demand)):
                raise CaseValidationError(f"bus {b.id}: non-finite demand")
        for br in self.branches:
            for end in (br.from_bus, br.to_bus):
                if end not in seen:
                    raise CaseValidationError(f"branch {br.id} references unknown bus {end}")
            if br.from_bus == br.to_bus:
                raise CaseValidationError(f"branch {br.id} is a self loop")
            if br.x == 0:
                raise CaseValidationError(f"branch {br.id} has zero reactance")
            if not br.flow_limit > 0:
                raise CaseValidationError(f"branch {br.id} has non-positive flow limit")
        for g in self.generators:
            if g.bus not in seen:
                raise CaseValidationError(f"generator references unknown bus {g.bus}")
        demand = {b.id: b.p_demand for b in self.buses}
        cost_buses: set[int] = set()
        for c in self.costs:
            if c.bus not in seen:
                raise CaseValidationError(f"flexibility cost references unknown bus {c.bus}")
            if c.bus in cost_buses:
                raise CaseValidationError(f"duplicate flexibility cost for bus {c.bus}")
            cost_buses.add(c.bus)
            c.validate(max(demand[c.bus], 0.0))

    # -- indexing -----------------------------------------------------------

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_branch(self) -> int:
        return len(self.branches)

    @cached_property
    def bus_index(self) -> dict[int, int]:
        return {b.id: i for i, b in enumerate(self.buses)}

    @cached_property
    def branch_index(self) -> dict[int, int]:
        return {br.id: i for i, br in enumerate(self.branches)}

    @cached_property
    def slack_index(self) -> int:
        return next(i for i, b in enumerate(self.buses) if b.kind is BusKind.SLACK)

    @property
    def slack_bus(self) -> int:
        return self.buses[self.slack_index].id

    @cached_property
    def adjacency(self) -> dict[int, tuple[int, ...]]:
        """In-service incident branch ids per bus, ascending."""
        adj: dict[int, list[int]] = {b.id: [] for b in self.buses}
        for br in self.branches:
            if br.in_service:
                adj[br.from_bus].append(br.id)
                adj[br.to_bus].append(br.id)
        return {k: tuple(sorted(v)) for k, v in adj.items()}

    def neighbors(self, bus: int) -> tuple[int, ...]:
        out = []
        for bid in self.adjacency[bus]:
            br = self.branch(bid)
            out.append(br.to_bus if br.from_bus == bus else br.from_bus)
        return tuple(out)

    def branch(self, branch_id: int) -> Branch:
        return self.branches[self.branch_index[branch_id]]

    @cached_property
    def cost_by_bus(self) -> dict[int, FlexibilityCost]:
        return {c.bus: c for c in self.costs}

    @cached_property
    def load_buses(self) -> tuple[int, ...]:
        return tuple(b.id for b in self.buses if b.p_demand > 0)

    @property
    def active_generators(self) -> tuple[Generator, ...]:
        return tuple(g for g in self.generators if g.in_service)

    @property
    def conventional_generators(self) -> tuple[Generator, ...]:
        """In-service units able to produce active power (excludes condensers)."""
        return tuple(g for g in self.active_generators if g.p_max > 0)

    # -- per-unit vectors ---------------------------------------------------

    def demand_pu(self) -> tuple[np.ndarray, np.ndarray]:
        pd = np.array([b.p_demand for b in self.buses]) / self.base_mva
        qd = np.array([b.q_demand for b in self.buses]) / self.base_mva
        return pd, qd

    def generation_pu(self) -> tuple[np.ndarray, np.ndarray]:
        pg = np.zeros(self.n_bus)
        qg = np.zeros(self.n_bus)
        for g in self.active_generators:
            i = self.bus_index[g.bus]
            pg[i] += g.p_out
            qg[i] += g.q_out
        return pg / self.base_mva, qg / self.base_mva

    def dc_schedule_pu(self, demand_pu: np.ndarray | None = None) -> np.ndarray:
        """Scheduled generation with the slack unit closing the lossless nominal balance.

        The slack output is fixed against the *nominal* demand, so any
        deviation in ``demand_pu`` shows up as an imbalance in the net
        injection ``schedule - demand_pu``.
        """
        pg, _ = self.generation_pu()
        pd, _ = self.demand_pu()
        s = self.slack_index
        pg[s] = pd.sum() - (pg.sum() - pg[s])
        return pg

    # -- topology -----------------------------------------------------------

    def live_branches(self, outages: Iterable[int] = ()) -> list[Branch]:
        out = set(outages)
        return [br for br in self.branches if br.in_service and br.id not in out]

    def is_connected(self, outages: Iterable[int] = ()) -> bool:
        live = self.live_branches(outages)
        n = self.n_bus
        if n <= 1:
            return True
        if not live:
            return False
        rows = [self.bus_index[br.from_bus] for br in live]
        cols = [self.bus_index[br.to_bus] for br in live]
        graph = coo_matrix((np.ones(len(live)), (rows, cols)), shape=(n, n))
        ncomp, _ = connected_components(graph, directed=False)
        return ncomp == 1

    def with_costs(self, costs: Iterable[FlexibilityCost]) -> "NetworkCase":
        return NetworkCase(
            self.base_mva, self.buses, self.branches, self.generators, tuple(costs), self.name
        )

    def with_flow_limits(self, limits: dict[int, float]) -> "NetworkCase":
        branches = tuple(
            Branch(br.id, br.from_bus, br.to_bus, br.r, br.x, br.b_shunt,
                   limits.get(br.id, br.flow_limit), br.in_service)
            for br in self.branches
        )
        return NetworkCase(
            self.base_mva, self.buses, branches, self.generators, self.costs, self.name
        )


def build_admittance(case: NetworkCase, outages: Iterable[int] = ()) -> np.ndarray:
    """Dense complex bus admittance matrix (pi branch model, no taps)."""
    out = set(outages)
    n = case.n_bus
    Y = np.zeros((n, n), dtype=complex)
    idx = case.bus_index
    for br in case.branches:
        if not br.in_service or br.id in out:
            continue
        i, j = idx[br.from_bus], idx[br.to_bus]
        ys = 1.0 / complex(br.r, br.x)
        ysh = 0.5j * br.b_shunt
        Y[i, i] += ys + ysh
        Y[j, j] += ys + ysh
        Y[i, j] -= ys
        Y[j, i] -= ys
    for b in case.buses:
        i = idx[b.id]
        Y[i, i] += complex(b.g_shunt, b.b_shunt) / case.base_mva
    return Y


def build_bbus(case: NetworkCase, outages: Iterable[int] = ()) -> tuple[np.ndarray, np.ndarray]:
    """DC susceptance matrix ``B`` and flow map ``K`` (``f = K @ theta``).

    Rows of ``K`` belonging to outaged or out-of-service branches are zero.
    """
    out = set(outages)
    unknown = out - set(case.branch_index)
    if unknown:
        raise KeyError(f"outaged branches not in case: {sorted(unknown)}")
    n, m = case.n_bus, case.n_branch
    K = np.zeros((m, n))
    A = np.zeros((m, n))
    idx = case.bus_index
    for row, br in enumerate(case.branches):
        if not br.in_service or br.id in out:
            continue
        i, j = idx[br.from_bus], idx[br.to_bus]
        A[row, i], A[row, j] = 1.0, -1.0
        K[row, i], K[row, j] = 1.0 / br.x, -1.0 / br.x
    B = A.T @ K
    return B, K
