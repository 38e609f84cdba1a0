"""DC optimal load shedding as a convex QP, solved by a primal-dual interior-point method.

Decision variables, all in MW (angles are carried as ``base_mva * theta``
so every row of the problem is in MW):

* ``psi`` -- scaled bus angles, slack fixed at zero;
* ``s1`` -- reserve deployment per flexible bus, ``reserve_down <= s1 <= reserve_up``;
* ``s2`` -- load shedding beyond the reserve band, ``0 <= s2 <= sheddable_cap``.

Nodal balance ``B psi - s1 - s2 = p`` has multipliers ``alpha`` in $/MWh
with the convention ``dc/dp_s = alpha`` at interior optima.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np
from scipy.optimize import linprog

from .network import FlexibilityCost, NetworkCase, build_bbus
from .numerics import LUFactor, SingularMatrixError
from .powerflow import Contingency, IslandingError

logger = logging.getLogger(__name__)

KINK_TOL = 1e-6  # $/MWh, degenerate-bus detection
SPLIT_TOL = 1e-7  # MW


class Status(str, Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    MAX_ITER = "max_iter"
    NUMERICAL = "numerical"


@dataclass
class OlsProblem:
    case: NetworkCase
    contingency: Contingency | None
    injection: np.ndarray  # scheduled generation minus demand, MW
    B: np.ndarray  # p.u. susceptance with outages removed
    K: np.ndarray  # p.u. flow map
    s1_buses: np.ndarray  # bus positions carrying a reserve variable
    s2_buses: np.ndarray  # bus positions carrying a shedding variable
    s1_bounds: np.ndarray  # (n1, 2) MW
    s2_caps: np.ndarray  # (n2,) MW
    limited: np.ndarray  # branch rows with a finite limit
    limits: np.ndarray  # MW

    @property
    def n_theta(self) -> int:
        return self.case.n_bus - 1

    @property
    def keep(self) -> np.ndarray:
        s = self.case.slack_index
        return np.r_[0:s, s + 1:self.case.n_bus]

    def cost(self, bus_pos: int) -> FlexibilityCost:
        return self.case.cost_by_bus[self.case.buses[bus_pos].id]

    def effective_cost(self, bus_pos: int) -> FlexibilityCost:
        """The bus cost with the shedding cap actually used in this instance."""
        fc = self.cost(bus_pos)
        hit = np.flatnonzero(self.s2_buses == bus_pos)
        cap = float(self.s2_caps[hit[0]]) if hit.size else 0.0
        return replace(fc, sheddable_cap=cap)

    def qp(self):
        """Dense QP data ``(H, c, A, b, G, h)`` for ``x = [psi, s1, s2]``."""
        n_th, n1, n2 = self.n_theta, len(self.s1_buses), len(self.s2_buses)
        n = self.case.n_bus
        nx = n_th + n1 + n2
        H = np.zeros(nx)
        c = np.zeros(nx)
        for k, i in enumerate(self.s1_buses):
            H[n_th + k] = 2 * self.cost(i).a1
        for k, i in enumerate(self.s2_buses):
            fc = self.cost(i)
            H[n_th + n1 + k] = 2 * fc.a2
            c[n_th + n1 + k] = fc.kink_marginal
        A = np.zeros((n, nx))
        A[:, :n_th] = self.B[:, self.keep]
        A[self.s1_buses, n_th + np.arange(n1)] = -1.0
        A[self.s2_buses, n_th + n1 + np.arange(n2)] = -1.0
        b = self.injection.copy()

        Kl = self.K[np.ix_(self.limited, self.keep)]
        nl = len(self.limited)
        G = np.zeros((2 * nl + 2 * n1 + 2 * n2, nx))
        h = np.zeros(G.shape[0])
        G[:nl, :n_th] = Kl
        G[nl:2 * nl, :n_th] = -Kl
        h[:2 * nl] = np.tile(self.limits, 2)
        r = 2 * nl
        idx1 = n_th + np.arange(n1)
        G[r + np.arange(n1), idx1] = 1.0
        h[r:r + n1] = self.s1_bounds[:, 1]
        G[r + n1 + np.arange(n1), idx1] = -1.0
        h[r + n1:r + 2 * n1] = -self.s1_bounds[:, 0]
        r += 2 * n1
        idx2 = n_th + n1 + np.arange(n2)
        G[r + np.arange(n2), idx2] = 1.0
        h[r:r + n2] = self.s2_caps
        G[r + n2 + np.arange(n2), idx2] = -1.0
        return np.diag(H), c, A, b, G, h


@dataclass
class OlsSolution:
    bus_ids: np.ndarray
    p_shed_total: np.ndarray  # MW
    s1: np.ndarray
    s2: np.ndarray
    alpha: np.ndarray  # $/MWh
    theta: np.ndarray  # rad
    mu_line: np.ndarray  # (n_branch, 2): multipliers of f <= limit, -f <= limit
    mu_lower: np.ndarray  # per bus, multiplier of p_s >= reserve_down
    mu_upper: np.ndarray  # per bus, multiplier of the upper bound on p_s
    objective: float
    status: Status
    iterations: int
    kkt_residuals: tuple[float, float, float] = (np.inf, np.inf, np.inf)
    degenerate: np.ndarray = field(default_factory=lambda: np.zeros(0, bool))

    @property
    def optimal(self) -> bool:
        return self.status is Status.OPTIMAL


def build_problem(
    case: NetworkCase,
    contingency: Contingency | None,
    p_demand_sample=None,
) -> OlsProblem:
    """Assemble the DC-OLS problem for a demand sample (MW per bus)."""
    outages = () if contingency is None else contingency.outaged_branches
    if contingency is not None:
        contingency.validate(case)
    if not case.is_connected(outages):
        raise IslandingError(f"contingency {getattr(contingency, 'id', None)!r} islands the network")
    base = case.base_mva
    if p_demand_sample is None:
        pd = case.demand_pu()[0] * base
    else:
        pd = np.asarray(p_demand_sample, dtype=float)
        if pd.shape != (case.n_bus,):
            raise ValueError(f"demand sample must have {case.n_bus} entries")
    if np.any(pd < 0):
        raise ValueError("demand sample contains negative load")
    injection = case.dc_schedule_pu() * base - pd
    B, K = build_bbus(case, outages)

    s1_buses, s1_bounds, s2_buses, s2_caps = [], [], [], []
    for i, b in enumerate(case.buses):
        fc = case.cost_by_bus.get(b.id)
        if fc is None:
            continue
        if fc.reserve_up > fc.reserve_down:
            s1_buses.append(i)
            s1_bounds.append((fc.reserve_down, fc.reserve_up))
        cap = min(fc.sheddable_cap, pd[i])  # cannot shed more than the sampled load
        if cap > 0:
            s2_buses.append(i)
            s2_caps.append(cap)
    limited = [k for k, br in enumerate(case.branches)
               if br.limited and br.in_service and br.id not in set(outages)]
    return OlsProblem(
        case=case, contingency=contingency, injection=injection, B=B, K=K,
        s1_buses=np.array(s1_buses, int), s2_buses=np.array(s2_buses, int),
        s1_bounds=np.array(s1_bounds, float).reshape(-1, 2), s2_caps=np.array(s2_caps, float),
        limited=np.array(limited, int),
        limits=np.array([case.branches[k].flow_limit for k in limited], float),
    )


def _qp_ipm(H, c, A, b, G, h, max_iter=100, tol=1e-10):
    """Mehrotra predictor-corrector for ``min 1/2 x'Hx + c'x, Ax = b, Gx <= h``.

    Returns ``(x, y, lam, status, iterations)`` with the Lagrangian
    ``f + y'(Ax - b) + lam'(Gx - h)``.
    """
    nx, ne, ni = H.shape[0], A.shape[0], G.shape[0]
    x = _interior_start(G, h, nx)
    z = np.maximum(h - G @ x, 1.0)
    lam = np.ones(ni)
    y = np.zeros(ne)
    scale_b = 1.0 + np.abs(b).max(initial=0.0)
    scale_c = 1.0 + np.abs(c).max(initial=0.0)
    status = Status.MAX_ITER
    it = 0
    for it in range(1, max_iter + 1):
        rd = H @ x + c + A.T @ y + G.T @ lam
        rp = A @ x - b
        ri = G @ x + z - h
        mu = z @ lam / ni if ni else 0.0
        if (np.abs(rp).max(initial=0) <= tol * scale_b
                and np.abs(ri).max(initial=0) <= tol * scale_b
                and np.abs(rd).max(initial=0) <= tol * scale_c
                and mu <= tol * 1e-2):
            status = Status.OPTIMAL
            break
        if max(np.abs(y).max(initial=0), np.abs(lam).max(initial=0)) > 1e12:
            status = Status.INFEASIBLE
            break
        w = lam / z
        M = np.zeros((nx + ne, nx + ne))
        M[:nx, :nx] = H + G.T @ (w[:, None] * G)
        M[:nx, nx:] = A.T
        M[nx:, :nx] = A
        try:
            # barrier terms make M badly scaled near the end; only exact breakdown counts
            lu = LUFactor(M, pivot_tol=1e-30)
        except SingularMatrixError:
            status = Status.NUMERICAL
            break

        def direction(rc):
            # rc is the complementarity residual z*lam - target
            rhs_x = -rd - G.T @ ((-rc + lam * ri) / z)
            sol = lu.solve(np.concatenate([rhs_x, -rp]))
            dx, dy = sol[:nx], sol[nx:]
            dz = -ri - G @ dx
            dlam = (-rc - lam * dz) / z
            return dx, dy, dz, dlam

        dx, dy, dz, dlam = direction(z * lam)
        a_aff = min(_max_step(z, dz), _max_step(lam, dlam))
        mu_aff = (z + a_aff * dz) @ (lam + a_aff * dlam) / ni
        sigma = min(max((mu_aff / mu) ** 3, 0.1), 0.9) if mu > 0 else 0.1
        dx, dy, dz, dlam = direction(z * lam + dz * dlam - sigma * mu)
        step = min(1.0, 0.995 * min(_max_step(z, dz), _max_step(lam, dlam)))
        if step < 1e-12:
            status = Status.NUMERICAL
            break
        x += step * dx
        y += step * dy
        z += step * dz
        lam += step * dlam
    if status is Status.OPTIMAL and G.shape[0]:
        polished = _polish(H, c, A, b, G, h, x, lam, z)
        if polished is not None:
            x, y, lam = polished
    return x, y, lam, status, it


def _polish(H, c, A, b, G, h, x, lam, z):
    """Re-solve with the active set guessed by the IPM fixed as equalities.

    Recovers exact bound values where strict complementarity fails (a
    multiplier sitting on a cost kink), where the interior iterates only
    approach the bound like ``sqrt(mu)``.  Returns ``None`` if the guess
    does not give a primal and dual feasible point at least as good.
    """
    nx, ne = H.shape[0], A.shape[0]
    act = np.flatnonzero((z < lam) | (z <= 1e-6 * (1.0 + np.abs(h))))
    Ga = G[act]
    n = nx + ne + len(act)
    M = np.zeros((n, n))
    M[:nx, :nx] = H
    M[:nx, nx:nx + ne] = A.T
    M[:nx, nx + ne:] = Ga.T
    M[nx:nx + ne, :nx] = A
    M[nx + ne:, :nx] = Ga
    try:
        sol = LUFactor(M, pivot_tol=1e-14).solve(np.concatenate([-c, b, h[act]]))
    except SingularMatrixError:
        return None
    xp, yp, la = sol[:nx], sol[nx:nx + ne], sol[nx + ne:]
    scale = 1.0 + np.abs(h).max(initial=0.0)
    if np.any(G @ xp - h > 1e-9 * scale) or np.any(la < -1e-9 * (1.0 + np.abs(c).max(initial=0))):
        return None
    f = lambda v: 0.5 * v @ H @ v + c @ v  # noqa: E731
    if f(xp) > f(x) + 1e-9 * (1.0 + abs(f(x))):
        return None
    lam_p = np.zeros_like(lam)
    lam_p[act] = np.maximum(la, 0.0)
    return xp, yp, lam_p


def _interior_start(G, h, nx):
    """Put every box-bounded variable at its midpoint, everything else at zero."""
    x = np.zeros(nx)
    single = np.count_nonzero(G, axis=1) == 1
    upper = {}
    lower = {}
    for row in np.flatnonzero(single):
        j = int(np.flatnonzero(G[row])[0])
        if G[row, j] > 0:
            upper[j] = h[row] / G[row, j]
        else:
            lower[j] = h[row] / G[row, j]
    for j in set(upper) & set(lower):
        x[j] = 0.5 * (upper[j] + lower[j])
    return x


def _max_step(v, dv):
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-v[neg] / dv[neg])))


def _feasible(A, b, G, h) -> bool:
    """Phase-1 feasibility certificate for ``Ax = b, Gx <= h`` from an LP solver."""
    res = linprog(np.zeros(A.shape[1]), A_ub=G, b_ub=h, A_eq=A, b_eq=b,
                  bounds=[(None, None)] * A.shape[1], method="highs")
    return res.status != 2


def solve(problem: OlsProblem, max_iter: int = 100) -> OlsSolution:
    """Solve the DC-OLS problem; the returned split is normalised."""
    case = problem.case
    H, c, A, b, G, h = problem.qp()
    x, y, lam, status, it = _qp_ipm(H, c, A, b, G, h, max_iter=max_iter)
    if status in (Status.NUMERICAL, Status.MAX_ITER) and not _feasible(A, b, G, h):
        # the barrier breaks down on empty feasible sets before the duals blow up
        status = Status.INFEASIBLE
    n = case.n_bus
    n_th, n1, n2 = problem.n_theta, len(problem.s1_buses), len(problem.s2_buses)
    nl = len(problem.limited)

    theta = np.zeros(n)
    theta[problem.keep] = x[:n_th] / case.base_mva
    s1 = np.zeros(n)
    s2 = np.zeros(n)
    s1[problem.s1_buses] = x[n_th:n_th + n1]
    s2[problem.s2_buses] = x[n_th + n1:]

    mu_line = np.zeros((case.n_branch, 2))
    mu_line[problem.limited, 0] = lam[:nl]
    mu_line[problem.limited, 1] = lam[nl:2 * nl]
    r = 2 * nl
    lam_s1_up, lam_s1_lo = lam[r:r + n1], lam[r + n1:r + 2 * n1]
    r += 2 * n1
    lam_s2_up, lam_s2_lo = lam[r:r + n2], lam[r + n2:r + 2 * n2]
    mu_lower = np.zeros(n)
    mu_upper = np.zeros(n)
    shed_only = ~np.isin(problem.s2_buses, problem.s1_buses)
    mu_lower[problem.s2_buses[shed_only]] = lam_s2_lo[shed_only]
    mu_lower[problem.s1_buses] = lam_s1_lo
    mu_upper[problem.s1_buses] = lam_s1_up
    # with a shedding piece the binding upper bound on p_s is the shed cap
    mu_upper[problem.s2_buses] = lam_s2_up

    s1, s2 = _normalise(problem, s1, s2)
    alpha = y.copy()
    sol = OlsSolution(
        bus_ids=np.array([bb.id for bb in case.buses]), p_shed_total=s1 + s2, s1=s1, s2=s2,
        alpha=alpha, theta=theta, mu_line=mu_line, mu_lower=mu_lower, mu_upper=mu_upper,
        objective=objective(problem, s1 + s2), status=status, iterations=it,
    )
    if status is Status.OPTIMAL:
        sol.kkt_residuals = kkt_residuals(problem, sol)
    sol.degenerate = degenerate_buses(problem, sol)
    if status is not Status.OPTIMAL:
        logger.info("OLS solve ended with status %s after %d iterations", status.value, it)
    return sol


def _normalise(problem: OlsProblem, s1, s2):
    """Shift shedding into unused reserve so that ``s2 > 0`` implies ``s1 = reserve_up``."""
    s1 = np.where(np.abs(s1) <= SPLIT_TOL, 0.0, s1)
    s2 = np.maximum(s2, 0.0)
    for i in problem.s2_buses:
        fc = problem.effective_cost(i)
        room = fc.reserve_up - s1[i]
        if s2[i] > 0 and room > 0:
            move = min(room, s2[i])
            s1[i] += move
            s2[i] -= move
        if s2[i] <= SPLIT_TOL:
            s2[i] = 0.0
        elif fc.reserve_up - s1[i] <= SPLIT_TOL:
            s1[i] = fc.reserve_up
    return s1, s2


def objective(problem: OlsProblem, p_shed) -> float:
    total = 0.0
    for i, b in enumerate(problem.case.buses):
        fc = problem.case.cost_by_bus.get(b.id)
        if fc is not None:
            total += float(fc.cost(p_shed[i]))
    return total


def _upper_bounds(problem: OlsProblem) -> tuple[np.ndarray, np.ndarray]:
    n = problem.case.n_bus
    lo = np.zeros(n)
    hi = np.zeros(n)
    lo[problem.s1_buses] = problem.s1_bounds[:, 0]
    hi[problem.s1_buses] = problem.s1_bounds[:, 1]
    hi[problem.s2_buses] = hi[problem.s2_buses] + problem.s2_caps
    return lo, hi


def kkt_residuals(problem: OlsProblem, sol: OlsSolution) -> tuple[float, float, float]:
    """Recompute (primal, stationarity, complementarity) residuals from problem data.

    Works on the piecewise cost directly (subdifferential at the reserve
    limit) instead of the split variables used by the solver.  Units are MW
    and $/MWh.
    """
    case = problem.case
    base = case.base_mva
    psi = sol.theta * base
    p = sol.p_shed_total
    lo, hi = _upper_bounds(problem)
    flexible = np.zeros(case.n_bus, bool)
    flexible[problem.s1_buses] = True
    flexible[problem.s2_buses] = True

    balance = problem.B @ psi - p - problem.injection
    flows = problem.K @ psi
    lim = np.full(case.n_branch, np.inf)
    lim[problem.limited] = problem.limits
    over = np.maximum(np.abs(flows) - lim, 0.0)
    bound_viol = np.maximum(np.maximum(lo - p, p - hi), 0.0)
    bound_viol[~flexible] = np.abs(p[~flexible])
    primal = max(np.abs(balance).max(), over.max(initial=0), bound_viol.max())

    mu = sol.mu_line[:, 0] - sol.mu_line[:, 1]
    grad_theta = problem.B.T @ sol.alpha + problem.K.T @ mu
    dual = np.abs(grad_theta[problem.keep]).max(initial=0.0)
    for i in np.flatnonzero(flexible):
        fc = problem.effective_cost(i)
        g = sol.alpha[i] - sol.mu_upper[i] + sol.mu_lower[i]
        lo_sub, hi_sub = _subdifferential(fc, p[i])
        dual = max(dual, lo_sub - g, g - hi_sub)
    neg = min(sol.mu_line.min(initial=0), sol.mu_lower.min(), sol.mu_upper.min())
    dual = max(dual, -neg)

    slack_line = np.zeros((case.n_branch, 2))
    slack_line[problem.limited, 0] = problem.limits - flows[problem.limited]
    slack_line[problem.limited, 1] = problem.limits + flows[problem.limited]
    comp = np.abs(sol.mu_line * slack_line).max(initial=0.0)
    comp = max(comp, np.abs(sol.mu_lower * (p - lo))[flexible].max(initial=0.0),
               np.abs(sol.mu_upper * (hi - p))[flexible].max(initial=0.0))
    return float(primal), float(dual), float(comp)


def _subdifferential(fc: FlexibilityCost, p: float) -> tuple[float, float]:
    if abs(p - fc.reserve_up) <= SPLIT_TOL and fc.sheddable_cap > 0:
        return 2 * fc.a1 * fc.reserve_up, fc.kink_marginal
    if p < fc.reserve_up:
        return 2 * fc.a1 * p, 2 * fc.a1 * p
    d = 2 * fc.a2 * p + fc.b2
    return d, d


def degenerate_buses(problem: OlsProblem, sol: OlsSolution) -> np.ndarray:
    """Buses whose multiplier sits on the reserve/shedding kink."""
    out = np.zeros(problem.case.n_bus, bool)
    for i in np.unique(np.concatenate([problem.s1_buses, problem.s2_buses])):
        fc = problem.effective_cost(int(i))
        out[i] = fc.sheddable_cap > 0 and abs(sol.alpha[i] - fc.kink_marginal) <= KINK_TOL
    return out


def recover_shedding(alpha: float, cost: FlexibilityCost) -> float:
    """Minimiser of ``cost(p) - alpha * p`` over the flexibility range (MW)."""
    if alpha > cost.kink_marginal:
        p = (alpha - cost.b2) / (2 * cost.a2)
        return float(min(max(p, cost.reserve_up), cost.reserve_up + cost.sheddable_cap))
    p = alpha / (2 * cost.a1)
    return float(min(max(p, cost.reserve_down), cost.reserve_up))


def split_decision(solution: OlsSolution, bus: int, tol: float = SPLIT_TOL) -> tuple[float, float]:
    """``(reserve_used, load_shed)`` in MW for one bus id."""
    if solution.status is not Status.OPTIMAL:
        raise ValueError("split_decision needs an optimal solution")
    i = int(np.flatnonzero(solution.bus_ids == bus)[0])
    if solution.s2[i] > tol:
        return float(solution.s1[i]), float(solution.s2[i])
    return float(solution.s1[i]), 0.0


def solve_case(case, contingency=None, p_demand_sample=None, max_iter: int = 100) -> OlsSolution:
    return solve(build_problem(case, contingency, p_demand_sample), max_iter=max_iter)


def solution_csv(solution: OlsSolution) -> str:
    """CSV rows ``bus,s1,s2,p_shed,alpha,degenerate,status`` (MW, $/MWh)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bus", "s1", "s2", "p_shed", "alpha", "degenerate", "status"])
    for k, bus in enumerate(solution.bus_ids):
        w.writerow([int(bus), repr(float(solution.s1[k])), repr(float(solution.s2[k])),
                    repr(float(solution.p_shed_total[k])), repr(float(solution.alpha[k])),
                    int(solution.degenerate[k]) if solution.degenerate.size else 0,
                    solution.status.value])
    return buf.getvalue()
