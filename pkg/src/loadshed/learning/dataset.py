"""Offline sample generation: perturbed loads, AC measurements, DC-OLS labels.

Every sample ``(j, k)`` (contingency ``j``, draw ``k``) gets its own
counter-based random stream keyed by ``(master_seed, j, k)``, so the
dataset does not depend on how the work is split across processes.
"""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from ..network import NetworkCase
from ..ols import Status, build_problem, solve
from ..powerflow import Contingency, IslandingError, frequency_proxy, solve_ac
from .features import FeatureLayout, extract_features

logger = logging.getLogger(__name__)

WORKERS_ENV = "LOADSHED_WORKERS"
MAX_FAILURE_RATE = 0.10
TRAILER = ("p_shed", "label", "contingency_id", "seed")


class DatasetGenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class LabeledSample:
    bus: int
    features: np.ndarray
    label: float  # alpha, $/MWh
    contingency_id: str
    seed: int
    p_shed: float = float("nan")  # OLS decision at the bus, MW


@dataclass
class BusDataset:
    """All samples of one bus, stored column-wise."""

    layout: FeatureLayout
    X: np.ndarray
    y: np.ndarray
    p_shed: np.ndarray
    contingency_ids: list[str]
    seeds: np.ndarray

    @property
    def bus(self) -> int:
        return self.layout.bus

    def __len__(self) -> int:
        return len(self.y)

    @classmethod
    def from_samples(cls, layout: FeatureLayout, samples: Sequence[LabeledSample]) -> "BusDataset":
        samples = list(samples)
        if any(s.bus != layout.bus for s in samples):
            raise ValueError(f"samples from several buses passed for bus {layout.bus}")
        return cls(
            layout,
            X=np.array([s.features for s in samples], dtype=float).reshape(len(samples),
                                                                            len(layout)),
            y=np.array([s.label for s in samples], dtype=float),
            p_shed=np.array([s.p_shed for s in samples], dtype=float),
            contingency_ids=[s.contingency_id for s in samples],
            seeds=np.array([s.seed for s in samples], dtype=int),
        )

    def samples(self) -> Iterator[LabeledSample]:
        for r in range(len(self)):
            yield LabeledSample(self.bus, self.X[r], float(self.y[r]), self.contingency_ids[r],
                                int(self.seeds[r]), float(self.p_shed[r]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.layout.names + list(TRAILER))
        for r in range(len(self)):
            w.writerow([repr(float(v)) for v in self.X[r]]
                       + [repr(float(self.p_shed[r])), repr(float(self.y[r])),
                          self.contingency_ids[r], int(self.seeds[r])])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, layout: FeatureLayout) -> "BusDataset":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or rows[0] != layout.names + list(TRAILER):
            raise ValueError(f"dataset header does not match layout {layout.describe()}")
        body = rows[1:]
        n = len(layout)
        X = np.array([[float(v) for v in r[:n]] for r in body]).reshape(len(body), n)
        return cls(
            layout, X,
            y=np.array([float(r[n + 1]) for r in body]),
            p_shed=np.array([float(r[n]) for r in body]),
            contingency_ids=[r[n + 2] for r in body],
            seeds=np.array([int(r[n + 3]) for r in body], dtype=int),
        )

    def sha256(self) -> str:
        return hashlib.sha256(self.to_csv().encode()).hexdigest()


@dataclass
class GenerationLog:
    attempted: dict[str, int] = field(default_factory=dict)
    failures: dict[str, dict[str, int]] = field(default_factory=dict)

    def record(self, cid: str, reason: str | None) -> None:
        self.attempted[cid] = self.attempted.get(cid, 0) + 1
        if reason is not None:
            per = self.failures.setdefault(cid, {})
            per[reason] = per.get(reason, 0) + 1

    def failed(self, cid: str) -> int:
        return sum(self.failures.get(cid, {}).values())

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["contingency_id", "attempted", "failed", "ac_pre", "ac_post", "ols"])
        for cid, n in self.attempted.items():
            per = self.failures.get(cid, {})
            w.writerow([cid, n, self.failed(cid), per.get("ac_pre", 0), per.get("ac_post", 0),
                        per.get("ols", 0)])
        return buf.getvalue()


def sample_rng(master_seed: int, j: int, k: int) -> np.random.Generator:
    """Independent Philox stream for sample ``k`` of contingency ``j``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([master_seed, j, k])))


def load_multipliers(n_bus: int, perturb_range, master_seed: int, j: int, k: int) -> np.ndarray:
    lo, hi = perturb_range
    return sample_rng(master_seed, j, k).uniform(lo, hi, n_bus)


def learning_buses(case: NetworkCase) -> tuple[int, ...]:
    """Load centres: buses with demand and a flexibility cost but no conventional generator."""
    gen_buses = {g.bus for g in case.conventional_generators}
    return tuple(b.id for b in case.buses
                 if b.p_demand > 0 and b.id in case.cost_by_bus and b.id not in gen_buses)


def worker_count(default: int = 1) -> int:
    raw = os.environ.get(WORKERS_ENV)
    if raw is None or raw.strip() == "":
        return default
    n = int(raw)
    if n < 1:
        raise ValueError(f"{WORKERS_ENV} must be a positive integer, got {raw!r}")
    return n


# Work units are whole contingencies split into chunks of draws; each unit
# returns its rows in draw order, and units are reassembled in (j, k) order.
def _simulate_chunk(args):
    case, contingency, j, ks, perturb_range, master_seed, buses, labels, f0, k_sys = args
    layouts = [FeatureLayout.for_bus(case, b) for b in buses]
    pos = [case.bus_index[b] for b in buses]
    pd0, qd0 = case.demand_pu()
    nominal = solve_ac(case)
    if not nominal.converged:
        raise DatasetGenerationError("nominal AC power flow does not converge")
    out = []
    for k in ks:
        m = load_multipliers(case.n_bus, perturb_range, master_seed, j, k)
        pd, qd = pd0 * m, qd0 * m
        pre = solve_ac(case, demand=(pd, qd), start=nominal)
        if not pre.converged:
            out.append((k, "ac_pre", None))
            continue
        post = solve_ac(case, contingency, demand=(pd, qd), start=pre)
        if not post.converged:
            out.append((k, "ac_post", None))
            continue
        w_pre = frequency_proxy(nominal, pre, f0, k_sys)
        w_post = frequency_proxy(nominal, post, f0, k_sys)
        X = [extract_features(case, lay, pre, post, w_pre, w_post) for lay in layouts]
        if labels:
            sol = solve(build_problem(case, contingency, pd * case.base_mva))
            if sol.status is not Status.OPTIMAL:
                out.append((k, "ols", None))
                continue
            y, ps = sol.alpha[pos], sol.p_shed_total[pos]
        else:
            y = ps = np.full(len(buses), np.nan)
        out.append((k, None, (X, y, ps)))
    return j, out


def generate_dataset(
    case: NetworkCase,
    contingencies: Sequence[Contingency],
    n_per_contingency: int,
    perturb_range=(0.95, 1.05),
    master_seed: int = 0,
    buses: Sequence[int] | None = None,
    labels: bool = True,
    f0: float = 60.0,
    k_sys: float = 1.0,
    workers: int | None = None,
    chunk: int = 50,
) -> tuple[dict[int, BusDataset], GenerationLog]:
    """Simulate ``n_per_contingency`` perturbed load profiles per contingency.

    Returns one :class:`BusDataset` per requested bus (default: all load
    centres) and a log of failures per contingency.  With ``labels=False``
    the OLS step is skipped and labels are NaN (feature-only datasets, used
    for contingency classification).

    Raises
    ------
    IslandingError
        If a contingency separates the network.
    DatasetGenerationError
        If more than 10% of the draws of any contingency fail.
    """
    lo, hi = perturb_range
    if lo > hi:
        raise ValueError(f"perturb range lower bound {lo} exceeds upper bound {hi}")
    if n_per_contingency < 1:
        raise ValueError("n_per_contingency must be positive")
    for c in contingencies:
        c.validate(case)
        if not case.is_connected(c.outaged_branches):
            raise IslandingError(f"contingency {c.id!r} islands the network")
    buses = tuple(learning_buses(case) if buses is None else buses)
    layouts = {b: FeatureLayout.for_bus(case, b) for b in buses}
    workers = worker_count() if workers is None else workers

    tasks = []
    for j, c in enumerate(contingencies):
        for start in range(0, n_per_contingency, chunk):
            ks = list(range(start, min(start + chunk, n_per_contingency)))
            tasks.append((case, c, j, ks, (lo, hi), master_seed, buses, labels, f0, k_sys))
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_simulate_chunk, tasks))
    else:
        results = [_simulate_chunk(t) for t in tasks]

    log = GenerationLog()
    rows: dict[int, list] = {b: [] for b in buses}
    for j, chunk_rows in results:
        cid = contingencies[j].id
        for k, reason, data in chunk_rows:
            log.record(cid, reason)
            if data is None:
                logger.warning("contingency %s draw %d skipped (%s)", cid, k, reason)
                continue
            X, y, ps = data
            for n, b in enumerate(buses):
                rows[b].append((X[n], y[n], ps[n], cid, k))
    for c in contingencies:
        rate = log.failed(c.id) / log.attempted.get(c.id, 1)
        if rate > MAX_FAILURE_RATE:
            raise DatasetGenerationError(
                f"contingency {c.id}: {log.failed(c.id)} of {log.attempted[c.id]} draws failed "
                f"({log.failures.get(c.id)})"
            )
    out = {}
    for b in buses:
        r = rows[b]
        n = len(layouts[b])
        out[b] = BusDataset(
            layouts[b],
            X=np.array([t[0] for t in r]).reshape(len(r), n),
            y=np.array([t[1] for t in r], dtype=float),
            p_shed=np.array([t[2] for t in r], dtype=float),
            contingency_ids=[t[3] for t in r],
            seeds=np.array([t[4] for t in r], dtype=int),
        )
    return out, log


def write_datasets(datasets: dict[int, BusDataset], directory: str | Path) -> dict[int, Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = {}
    for b, ds in sorted(datasets.items()):
        p = d / f"bus_{b}.csv"
        p.write_text(ds.to_csv(), encoding="utf-8")
        paths[b] = p
    return paths


def read_dataset(path: str | Path, case: NetworkCase, bus: int) -> BusDataset:
    return BusDataset.from_csv(Path(path).read_text(encoding="utf-8"),
                               FeatureLayout.for_bus(case, bus))


def datasets_hash(datasets: dict[int, BusDataset]) -> str:
    h = hashlib.sha256()
    for b in sorted(datasets):
        h.update(f"{b}\n".encode())
        h.update(datasets[b].to_csv().encode())
    return h.hexdigest()
