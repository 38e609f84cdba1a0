"""DC sensitivity analysis and local contingency identifiability.

A contingency ``k`` (a set of outaged branches) changes the DC flows by
``df = d @ f_k`` where ``f_k`` holds the pre-outage flows on the outaged
branches.  The local measurements at bus ``i`` see only the rows of ``d``
for the branches incident to ``i``, so the post-contingency change at ``i``
lives in the column span of that local submatrix.  Two contingencies can be
told apart from local data alone when those spans are not identical, which
is certified by a principal angle strictly above zero.
"""

from __future__ import annotations

import csv
import io
import itertools
import logging
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .network import NetworkCase, build_bbus
from .numerics import LUFactor, SingularMatrixError, qr_orthonormal, svd_small
from .powerflow import Contingency, IslandingError

logger = logging.getLogger(__name__)

IDENT_TOL = 1e-6


def isf_matrix(case: NetworkCase, outages: Sequence[int] = ()) -> np.ndarray:
    """Injection shift factors ``S`` (branches x buses), ``f = S @ p`` in p.u.

    The slack column is zero: an injection at bus ``j`` is withdrawn at the
    slack.  Rows of branches that are out of service (or listed in
    ``outages``) are zero.
    """
    B, K = build_bbus(case, outages)
    s = case.slack_index
    keep = np.r_[0:s, s + 1:case.n_bus]
    try:
        lu = LUFactor(B[np.ix_(keep, keep)])
    except SingularMatrixError as exc:
        raise IslandingError("reduced susceptance matrix is singular") from exc
    S = np.zeros((case.n_branch, case.n_bus))
    # S_red = K_red @ B_red^-1, computed as (B_red^-T K_red^T)^T; B is symmetric.
    S[:, keep] = lu.solve(K[:, keep].T).T
    return S


@dataclass(frozen=True)
class OutageSensitivity:
    """Flow-change sensitivities ``d`` of every branch to the outaged pre-outage flows."""

    contingency: Contingency
    branch_ids: tuple[int, ...]
    d: np.ndarray  # (n_branch, n_outaged)

    def delta_flows(self, f_pre: np.ndarray) -> np.ndarray:
        """``df`` for a full pre-outage flow vector (ordered like ``branch_ids``)."""
        rows = [self.branch_ids.index(b) for b in self.contingency.outaged_branches]
        return self.d @ np.asarray(f_pre)[rows]


def outage_sensitivity(
    case: NetworkCase, contingency: Contingency, S: np.ndarray | None = None
) -> OutageSensitivity:
    """Generalised line-outage distribution factors for a (multi-)line outage.

    With ``M[:, m] = S[:, from_m] - S[:, to_m]`` the response of all branches
    to a unit transfer across outaged branch ``m``, and ``P`` the rows of
    ``M`` belonging to the outaged branches, ``d = M @ inv(I - P)``.  The
    rows of the outaged branches themselves are set to ``-I`` so that their
    post-outage flow is exactly zero.

    Raises
    ------
    IslandingError
        If ``I - P`` is singular, i.e. the outage separates the network.
    """
    contingency.validate(case)
    if S is None:
        S = isf_matrix(case)
    idx = case.bus_index
    rows = [case.branch_index[b] for b in contingency.outaged_branches]
    M = np.empty((case.n_branch, len(rows)))
    for m, r in enumerate(rows):
        br = case.branches[r]
        M[:, m] = S[:, idx[br.from_bus]] - S[:, idx[br.to_bus]]
    P = M[rows, :]
    try:
        d = _right_solve(np.eye(len(rows)) - P, M)
    except SingularMatrixError as exc:
        raise IslandingError(f"contingency {contingency.id!r} islands the network") from exc
    d[rows, :] = -np.eye(len(rows))
    return OutageSensitivity(contingency, tuple(b.id for b in case.branches), d)


def _right_solve(A: np.ndarray, M: np.ndarray) -> np.ndarray:
    """``M @ inv(A)`` via an LU solve on the transpose."""
    return LUFactor(A.T, pivot_tol=1e-10).solve(M.T).T


def lodf_single(case: NetworkCase, branch_id: int, S: np.ndarray | None = None) -> np.ndarray:
    """Classical single-line LODF column ``(S[:, i] - S[:, j]) / (1 - S[l, i] + S[l, j])``.

    Kept as an independent reference for the generalised form; the entry of
    the outaged branch itself is left as given by the ratio.
    """
    if S is None:
        S = isf_matrix(case)
    r = case.branch_index[branch_id]
    br = case.branches[r]
    i, j = case.bus_index[br.from_bus], case.bus_index[br.to_bus]
    denom = 1.0 - S[r, i] + S[r, j]
    if abs(denom) < 1e-10:
        raise IslandingError(f"outage of branch {branch_id} islands the network")
    return (S[:, i] - S[:, j]) / denom


def local_submatrix(sens: OutageSensitivity, case: NetworkCase, bus: int) -> np.ndarray:
    """Rows of ``d`` for the branches incident to ``bus``, ascending branch id."""
    if bus not in case.bus_index:
        raise KeyError(f"unknown bus {bus}")
    rows = [case.branch_index[b] for b in case.adjacency[bus]]
    return sens.d[rows, :]


@dataclass(frozen=True)
class SubspaceSeparation:
    sigma: np.ndarray  # descending
    beta: np.ndarray  # radians, non-decreasing
    identifiable: bool
    min_sigma: float
    bus: int | None = None
    pair: tuple[str, str] | None = None
    overshoot: float = field(default=0.0, compare=False)

    @property
    def max_beta_deg(self) -> float:
        return float(np.degrees(self.beta.max())) if self.beta.size else 0.0


def _as_columns(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x[:, None] if x.ndim == 1 else x


def principal_angles(dA, dB, tol: float = IDENT_TOL) -> SubspaceSeparation:
    """Principal angles between the column spans of ``dA`` and ``dB``.

    Both inputs are reduced to orthonormal bases of their numerical range,
    then ``sigma`` are the singular values of ``QA.T @ QB`` clamped to
    ``[0, 1]`` and ``beta = arccos(sigma)``.
    """
    dA, dB = _as_columns(dA), _as_columns(dB)
    if dA.shape[0] != dB.shape[0]:
        raise ValueError(f"row counts differ: {dA.shape[0]} vs {dB.shape[0]}")
    QA, QB = qr_orthonormal(dA), qr_orthonormal(dB)
    if QA.shape[1] == 0 or QB.shape[1] == 0:
        warnings.warn("principal angles of a zero-rank subspace are undefined", RuntimeWarning,
                      stacklevel=2)
        empty = np.zeros(0)
        return SubspaceSeparation(empty, empty, False, float("nan"))
    _, s, _ = svd_small(QA.T @ QB)
    overshoot = float(max(s.max() - 1.0, 0.0))
    sigma = np.clip(s, 0.0, 1.0)
    beta = np.arccos(sigma)
    min_sigma = float(sigma.min())
    return SubspaceSeparation(sigma, beta, min_sigma < 1.0 - tol, min_sigma, overshoot=overshoot)


def check_pair(
    case: NetworkCase,
    bus: int,
    k: Contingency,
    k_prime: Contingency,
    tol: float = IDENT_TOL,
    S: np.ndarray | None = None,
) -> tuple[bool, SubspaceSeparation]:
    """Whether local measurements at ``bus`` separate contingencies ``k`` and ``k_prime``."""
    if S is None:
        S = isf_matrix(case)
    dA = local_submatrix(outage_sensitivity(case, k, S), case, bus)
    dB = local_submatrix(outage_sensitivity(case, k_prime, S), case, bus)
    sep = principal_angles(dA, dB, tol)
    sep = SubspaceSeparation(sep.sigma, sep.beta, sep.identifiable, sep.min_sigma, bus,
                             (k.id, k_prime.id), sep.overshoot)
    return sep.identifiable, sep


@dataclass(frozen=True)
class IdentifiabilityReport:
    bus: int
    pairs: tuple[SubspaceSeparation, ...]

    @property
    def identifiable(self) -> bool:
        return all(p.identifiable for p in self.pairs)

    def failures(self) -> list[tuple[str, str]]:
        return [p.pair for p in self.pairs if not p.identifiable]


def check_set(
    case: NetworkCase,
    bus: int,
    contingencies: Sequence[Contingency],
    tol: float = IDENT_TOL,
) -> IdentifiabilityReport:
    """Check every unordered pair; a single contingency is trivially identifiable."""
    S = isf_matrix(case)
    local = [local_submatrix(outage_sensitivity(case, c, S), case, bus) for c in contingencies]
    pairs = []
    for a, b in itertools.combinations(range(len(contingencies)), 2):
        sep = principal_angles(local[a], local[b], tol)
        pairs.append(SubspaceSeparation(sep.sigma, sep.beta, sep.identifiable, sep.min_sigma, bus,
                                        (contingencies[a].id, contingencies[b].id),
                                        sep.overshoot))
    report = IdentifiabilityReport(bus, tuple(pairs))
    if not report.identifiable:
        logger.info("bus %d: %d of %d pairs not identifiable", bus, len(report.failures()),
                    len(pairs))
    return report


REPORT_COLUMNS = ("bus", "k", "k_prime", "min_sigma", "max_beta_deg", "identifiable")


def report_csv(reports: Sequence[IdentifiabilityReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for rep in reports:
        for p in rep.pairs:
            w.writerow([rep.bus, p.pair[0], p.pair[1], repr(p.min_sigma),
                        repr(p.max_beta_deg), int(p.identifiable)])
    return buf.getvalue()
