"""Steady-state AC and DC power flow with line outages."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .network import BusKind, NetworkCase, build_admittance, build_bbus
from .numerics import SingularMatrixError, lu_solve

logger = logging.getLogger(__name__)

AC_TOL = 1e-8
AC_MAX_ITER = 20


class IslandingError(ValueError):
    """The post-outage network splits into several islands."""


@dataclass(frozen=True)
class Contingency:
    id: str
    outaged_branches: tuple[int, ...]

    def __post_init__(self):
        if not self.outaged_branches:
            raise ValueError(f"contingency {self.id!r} has no outaged branches")
        object.__setattr__(self, "outaged_branches", tuple(int(b) for b in self.outaged_branches))

    def validate(self, case: NetworkCase) -> None:
        for b in self.outaged_branches:
            if b not in case.branch_index:
                raise KeyError(f"contingency {self.id!r}: unknown branch {b}")
            if not case.branch(b).in_service:
                raise ValueError(f"contingency {self.id!r}: branch {b} already out of service")


def _outages(contingency: Contingency | None) -> tuple[int, ...]:
    return () if contingency is None else contingency.outaged_branches


@dataclass
class PowerFlowState:
    """Solved AC operating point; everything in p.u. / radians."""

    v_mag: np.ndarray
    v_ang: np.ndarray
    p_inj: np.ndarray
    q_inj: np.ndarray
    branch_flows: np.ndarray  # (n_branch, 4): p_from, q_from, p_to, q_to
    converged: bool
    iterations: int
    p_demand: np.ndarray
    q_demand: np.ndarray
    max_mismatch: float = np.inf

    @property
    def total_generation(self) -> float:
        return float(np.sum(self.p_inj + self.p_demand))


def check_connectivity(case: NetworkCase, contingency: Contingency | None = None) -> bool:
    return case.is_connected(_outages(contingency))


def _mismatch(V, Y, s_spec, pv, pq):
    s_calc = V * np.conj(Y @ V)
    d = s_calc - s_spec
    return np.concatenate([d.real[pv], d.real[pq], d.imag[pq]]), s_calc


def solve_ac(
    case: NetworkCase,
    contingency: Contingency | None = None,
    demand: tuple[np.ndarray, np.ndarray] | None = None,
    start: PowerFlowState | None = None,
    tol: float = AC_TOL,
    max_iter: int = AC_MAX_ITER,
    enforce_q_limits: bool = False,
) -> PowerFlowState:
    """Newton-Raphson power flow in polar coordinates.

    ``demand`` overrides the case loads (p.u. arrays).  ``start`` warm-starts
    from a previous state; otherwise a flat start is used with PV/slack
    magnitudes at their set-points.  A non-converged result is returned
    with ``converged=False`` rather than raised.
    """
    outages = _outages(contingency)
    if contingency is not None:
        contingency.validate(case)
    if not case.is_connected(outages):
        raise IslandingError(f"contingency {contingency.id!r} islands the network")
    Y = build_admittance(case, outages)
    pd, qd = demand if demand is not None else case.demand_pu()
    pg, qg = case.generation_pu()
    kinds = [b.kind for b in case.buses]
    pv = [i for i, k in enumerate(kinds) if k is BusKind.PV]
    pq = [i for i, k in enumerate(kinds) if k is BusKind.PQ]
    vset = np.array([b.v_setpoint for b in case.buses])
    qcap = _q_capability(case) if enforce_q_limits else None

    if start is not None:
        vm, va = start.v_mag.copy(), start.v_ang.copy()
    else:
        vm, va = np.ones(case.n_bus), np.zeros(case.n_bus)
    fixed_v = [i for i, k in enumerate(kinds) if k is not BusKind.PQ]
    vm[fixed_v] = vset[fixed_v]

    total_it = 0
    while True:
        s_spec = (pg - pd) + 1j * (qg - qd)
        vm, va, it, ok, mis = _newton(Y, vm, va, s_spec, pv, pq, tol, max_iter)
        total_it += it
        if not ok or qcap is None:
            break
        switched = _switch_pv(case, Y, vm, va, qd, pv, pq, qg, qcap)
        if not switched:
            break
    state = _finish(case, Y, outages, vm, va, pd, qd, ok, total_it, mis)
    if not ok:
        logger.info("AC power flow did not converge after %d iterations (mismatch %.2e)",
                    total_it, mis)
    return state


def _q_capability(case: NetworkCase):
    lo = np.zeros(case.n_bus)
    hi = np.zeros(case.n_bus)
    for g in case.active_generators:
        i = case.bus_index[g.bus]
        lo[i] += g.q_min / case.base_mva
        hi[i] += g.q_max / case.base_mva
    return lo, hi


def _switch_pv(case, Y, vm, va, qd, pv, pq, qg, qcap):
    V = vm * np.exp(1j * va)
    q_gen = (V * np.conj(Y @ V)).imag + qd
    lo, hi = qcap
    switched = False
    for i in list(pv):
        if q_gen[i] > hi[i] + 1e-9 or q_gen[i] < lo[i] - 1e-9:
            qg[i] = min(max(q_gen[i], lo[i]), hi[i])
            pv.remove(i)
            pq.append(i)
            switched = True
    pq.sort()
    return switched


def _newton(Y, vm, va, s_spec, pv, pq, tol, max_iter):
    pvpq = pv + pq
    npvpq = len(pvpq)
    V = vm * np.exp(1j * va)
    F, _ = _mismatch(V, Y, s_spec, pv, pq)
    mis = np.abs(F).max() if F.size else 0.0
    it = 0
    while mis > tol and it < max_iter:
        it += 1
        Ibus = Y @ V
        Vnorm = V / np.abs(V)
        dS_dVm = np.diag(V) @ np.conj(Y @ np.diag(Vnorm)) + np.diag(np.conj(Ibus) * Vnorm)
        dS_dVa = 1j * np.diag(V) @ np.conj(np.diag(Ibus) - Y @ np.diag(V))
        J = np.block([
            [dS_dVa[np.ix_(pvpq, pvpq)].real, dS_dVm[np.ix_(pvpq, pq)].real],
            [dS_dVa[np.ix_(pq, pvpq)].imag, dS_dVm[np.ix_(pq, pq)].imag],
        ])
        try:
            dx = lu_solve(J, -F)
        except SingularMatrixError:
            return vm, va, it, False, mis
        va = va.copy()
        vm = vm.copy()
        va[pvpq] += dx[:npvpq]
        vm[pq] += dx[npvpq:]
        V = vm * np.exp(1j * va)
        F, _ = _mismatch(V, Y, s_spec, pv, pq)
        mis = np.abs(F).max()
        if not np.isfinite(mis):
            return vm, va, it, False, mis
    return vm, va, it, mis <= tol, mis


def _finish(case, Y, outages, vm, va, pd, qd, ok, iterations, mis):
    V = vm * np.exp(1j * va)
    s = V * np.conj(Y @ V)
    flows = branch_flows(case, V, outages)
    return PowerFlowState(
        v_mag=vm, v_ang=va, p_inj=s.real, q_inj=s.imag, branch_flows=flows,
        converged=bool(ok), iterations=iterations, p_demand=np.asarray(pd, float),
        q_demand=np.asarray(qd, float), max_mismatch=float(mis),
    )


def branch_flows(case: NetworkCase, V: np.ndarray, outages: Iterable[int] = ()) -> np.ndarray:
    """Complex flows at both ends of each branch as (p_from, q_from, p_to, q_to) rows."""
    out = set(outages)
    flows = np.zeros((case.n_branch, 4))
    idx = case.bus_index
    for row, br in enumerate(case.branches):
        if not br.in_service or br.id in out:
            continue
        i, j = idx[br.from_bus], idx[br.to_bus]
        ys = 1.0 / complex(br.r, br.x)
        ysh = 0.5j * br.b_shunt
        s_f = V[i] * np.conj((ys + ysh) * V[i] - ys * V[j])
        s_t = V[j] * np.conj((ys + ysh) * V[j] - ys * V[i])
        flows[row] = (s_f.real, s_f.imag, s_t.real, s_t.imag)
    return flows


def solve_dc(
    case: NetworkCase,
    p_inj: Sequence[float],
    contingency: Contingency | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Lossless DC power flow; the slack angle is zero and the slack absorbs the imbalance.

    Returns ``(theta, flows)`` in radians and p.u.
    """
    outages = _outages(contingency)
    if contingency is not None:
        contingency.validate(case)
    p = np.asarray(p_inj, dtype=float)
    B, K = build_bbus(case, outages)
    s = case.slack_index
    keep = np.r_[0:s, s + 1:case.n_bus]
    theta = np.zeros(case.n_bus)
    try:
        theta[keep] = lu_solve(B[np.ix_(keep, keep)], p[keep])
    except SingularMatrixError as exc:
        raise IslandingError("reduced susceptance matrix is singular (islanded network)") from exc
    return theta, K @ theta


def frequency_proxy(
    pre: PowerFlowState, post: PowerFlowState, f0: float = 60.0, k_sys: float = 1.0
) -> float:
    """Droop-style frequency estimate from the change in total generation.

    ``f0 - k_sys * (P_post - P_pre) / P_pre``; a rise in generation picked up
    by the slack maps to a frequency drop.
    """
    if not (pre.converged and post.converged):
        raise ValueError("frequency proxy needs two converged states")
    g_pre = pre.total_generation
    if g_pre == 0:
        raise ValueError("zero pre-contingency generation")
    return f0 - k_sys * (post.total_generation - g_pre) / g_pre


def top_flow_contingencies(case: NetworkCase, sizes: Sequence[int]) -> list[Contingency]:
    """Contingencies built from the branches with the largest nominal DC flows.

    Branches are ranked by ``|f|`` in the base case (DC schedule against
    nominal demand).  Groups of the requested sizes are filled greedily
    from that ranking; each branch is used at most once, and a group (or a
    single branch) whose outage would island the network is skipped.
    Ids are ``"L<b1>"``, ``"L<b1>+<b2>"``, and so on.
    """
    pd, _ = case.demand_pu()
    _, f = solve_dc(case, case.dc_schedule_pu() - pd)
    ranked = [case.branches[r].id for r in np.argsort(-np.abs(f), kind="stable")
              if case.branches[r].in_service]
    ranked = [b for b in ranked if case.is_connected((b,))]
    out: list[Contingency] = []
    pos = 0
    for size in sizes:
        group: list[int] = []
        while len(group) < size:
            if pos >= len(ranked):
                raise ValueError(f"not enough branches for contingency sizes {list(sizes)}")
            cand = ranked[pos]
            pos += 1
            if case.is_connected(tuple(group) + (cand,)):
                group.append(cand)
        out.append(Contingency("L" + "+".join(str(b) for b in group), tuple(group)))
    return out
