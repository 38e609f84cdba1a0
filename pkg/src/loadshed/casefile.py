"""Reader and writer for a line-oriented subset of the MATPOWER case format.

Supported blocks (``mpc.`` prefix optional)::

    mpc.baseMVA = 100;
    mpc.bus      = [ bus_i type Pd Qd Gs Bs area Vm Va baseKV zone Vmax Vmin ; ... ];
    mpc.branch   = [ fbus tbus r x b rateA rateB rateC ratio angle status ... ; ... ];
    mpc.gen      = [ bus Pg Qg Qmax Qmin Vg mBase status Pmax Pmin ... ; ... ];
    mpc.gencost  = [ 2 startup shutdown n c(n-1) ... c0 ; ... ];        (optional)
    mpc.flexcost = [ bus a1 a2 b2 c2 r_down r_up shed_cap [q_down q_up] ; ... ];  (optional)

``%`` starts a comment.  Other assignments (``mpc.version``, cell arrays,
unknown matrices) are skipped.  Column conventions:

* bus ``type``: 1 = PQ, 2 = PV, 3 = slack.  A PV bus without an in-service
  generator is demoted to PQ.  Type 4 (isolated) is rejected.
* branch ``rateA`` in MVA, 0 meaning unlimited; ``status`` 0 = out of
  service.  ``ratio``/``angle`` (taps, phase shifters) are read and ignored.
* gen ``Pg``/``Qg``/limits in MW/MVAr; a PV/slack bus takes its voltage
  set-point from ``Vg`` of its first in-service generator.
* gencost: only polynomial rows (model 2); the quadratic coefficient
  (in $/MW^2h) seeds the reserve coefficient ``a1`` of the bus.
* flexcost: ``a1``/``a2`` in $/MW^2h, ``b2`` in $/MWh, ``c2`` in $/h,
  ``r_down`` <= 0 <= ``r_up`` and ``shed_cap`` >= 0 in MW.

Load buses without a ``flexcost`` row receive one built by
:class:`FlexDefaults`.
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .network import (
    Branch,
    Bus,
    BusKind,
    CaseValidationError,
    FlexibilityCost,
    Generator,
    NetworkCase,
)

logger = logging.getLogger(__name__)

_ASSIGN = re.compile(r"^\s*(?:mpc\.)?(\w+)\s*=\s*(.*)$")


class CaseFormatError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class FlexDefaults:
    """Rules for synthesising flexibility costs missing from the case file.

    The shedding piece uses ``a2 = a2_ratio * a1`` and ``b2``; ``c2`` is then
    fixed by continuity at the reserve limit.
    """

    shed_fraction: float = 0.9
    a2_ratio: float = 4.0
    b2: float = 0.0
    generator_a1: float = 0.01  # $/MW^2h, used when no gencost row exists
    load_a1: float = 0.05  # $/MW^2h, buses without generators
    reserve_fraction: float = 1.0  # share of generator headroom offered as reserve
    load_reserve_fraction: float = 0.0  # demand-response band as a share of demand


def _strip_comment(line: str) -> str:
    pos = line.find("%")
    return line if pos < 0 else line[:pos]


def _parse_rows(body: list[tuple[int, str]]) -> list[tuple[int, list[float]]]:
    rows = []
    for lineno, text in body:
        for chunk in text.split(";"):
            tokens = chunk.replace(",", " ").split()
            if not tokens:
                continue
            try:
                rows.append((lineno, [float(t) for t in tokens]))
            except ValueError:
                bad = next(t for t in tokens if not _is_number(t))
                raise CaseFormatError(f"non-numeric token {bad!r}", lineno) from None
    return rows


def _is_number(token: str) -> bool:
    try:
        float(token)
    except ValueError:
        return False
    return True


def _scan(text: str) -> tuple[float | None, dict[str, list[tuple[int, list[float]]]]]:
    base = None
    blocks: dict[str, list[tuple[int, list[float]]]] = {}
    lines = text.splitlines()
    i = 0
    while i < len(lines):
        lineno = i + 1
        line = _strip_comment(lines[i]).strip()
        i += 1
        if not line or line.startswith("function"):
            continue
        m = _ASSIGN.match(line)
        if not m:
            raise CaseFormatError(f"unexpected content {line!r}", lineno)
        name, rhs = m.group(1), m.group(2).strip()
        if rhs.startswith("[") or rhs.startswith("{"):
            closer = "]" if rhs.startswith("[") else "}"
            body: list[tuple[int, str]] = []
            rest = rhs[1:]
            while True:
                if closer in rest:
                    body.append((lineno, rest[: rest.index(closer)]))
                    break
                body.append((lineno, rest))
                if i >= len(lines):
                    raise CaseFormatError(f"unterminated block {name!r}", lineno)
                rest = _strip_comment(lines[i])
                i += 1
                lineno = i
            if closer == "]":
                if name in blocks:
                    raise CaseFormatError(f"block {name!r} defined twice", lineno)
                blocks[name] = _parse_rows(body)
        elif name == "baseMVA":
            try:
                base = float(rhs.rstrip(";").strip())
            except ValueError:
                raise CaseFormatError(f"bad baseMVA value {rhs!r}", lineno) from None
    return base, blocks


def _need(row: tuple[int, list[float]], n: int, what: str) -> list[float]:
    lineno, vals = row
    if len(vals) < n:
        raise CaseFormatError(f"{what} row needs at least {n} columns, got {len(vals)}", lineno)
    return vals


def parse_case(text: str, defaults: FlexDefaults | None = None, name: str = "case") -> NetworkCase:
    """Parse case-file text into a validated :class:`NetworkCase`."""
    defaults = defaults or FlexDefaults()
    base, blocks = _scan(text)
    if base is None:
        raise CaseFormatError("missing baseMVA")
    for required in ("bus", "branch", "gen"):
        if required not in blocks:
            raise CaseFormatError(f"missing {required} block")

    gens = []
    for row in blocks["gen"]:
        v = _need(row, 10, "gen")
        gens.append(
            Generator(
                bus=int(v[0]), p_out=v[1], q_out=v[2], q_max=v[3], q_min=v[4],
                v_setpoint=v[5], in_service=v[7] > 0, p_max=v[8], p_min=v[9],
            )
        )
    vset = {}
    for g in gens:
        if g.in_service:
            vset.setdefault(g.bus, g.v_setpoint)

    buses = []
    for row in blocks["bus"]:
        v = _need(row, 13, "bus")
        bid, btype = int(v[0]), int(v[1])
        if btype == 3:
            kind = BusKind.SLACK
        elif btype == 2:
            kind = BusKind.PV if bid in vset else BusKind.PQ
        elif btype == 1:
            kind = BusKind.PQ
        else:
            raise CaseFormatError(f"unsupported bus type {btype} for bus {bid}", row[0])
        buses.append(
            Bus(
                id=bid, kind=kind, p_demand=v[2], q_demand=v[3], g_shunt=v[4], b_shunt=v[5],
                v_setpoint=vset.get(bid, v[7]) if kind is not BusKind.PQ else v[7],
                base_kv=v[9], v_max=v[11], v_min=v[12],
            )
        )
    bus_ids = {b.id for b in buses}

    branches = []
    warned = False
    for k, row in enumerate(blocks["branch"], start=1):
        v = _need(row, 11, "branch")
        f, t = int(v[0]), int(v[1])
        for end in (f, t):
            if end not in bus_ids:
                raise CaseFormatError(f"branch {k} references unknown bus {end}", row[0])
        if v[3] == 0:
            raise CaseFormatError(f"branch {k} has zero reactance", row[0])
        if (v[8] not in (0.0, 1.0) or v[9] != 0.0) and not warned:
            logger.warning("transformer taps/phase shifts are ignored")
            warned = True
        branches.append(
            Branch(
                id=k, from_bus=f, to_bus=t, r=v[2], x=v[3], b_shunt=v[4],
                flow_limit=v[5] if v[5] > 0 else math.inf, in_service=v[10] > 0,
            )
        )

    costs: dict[int, FlexibilityCost] = {}
    for row in blocks.get("flexcost", []):
        v = _need(row, 8, "flexcost")
        bus = int(v[0])
        if bus not in bus_ids:
            raise CaseFormatError(f"flexcost references unknown bus {bus}", row[0])
        q = v[8:10] if len(v) >= 10 else [0.0, 0.0]
        costs[bus] = FlexibilityCost(bus, v[1], v[2], v[3], v[4], v[5], v[6], v[7], q[0], q[1])

    gen_a1 = _gencost_a1(blocks.get("gencost", []), gens)
    try:
        for c in synthesise_costs(buses, gens, gen_a1, defaults):
            costs.setdefault(c.bus, c)
        order = {b.id: i for i, b in enumerate(buses)}
        ordered = tuple(sorted(costs.values(), key=lambda c: order[c.bus]))
        return NetworkCase(base, tuple(buses), tuple(branches), tuple(gens), ordered, name)
    except CaseValidationError as exc:
        raise CaseFormatError(str(exc)) from exc


def _gencost_a1(rows, gens: list[Generator]) -> dict[int, float]:
    """Equivalent quadratic coefficient per bus from polynomial gencost rows."""
    if rows and len(rows) < len(gens):
        raise CaseFormatError("gencost has fewer rows than gen", rows[0][0])
    inv: dict[int, float] = {}
    for g, (lineno, v) in zip(gens, rows):
        if not g.in_service or g.p_max <= 0:
            continue
        if int(v[0]) != 2:
            raise CaseFormatError("only polynomial gencost rows are supported", lineno)
        n = int(v[3])
        a = v[4] if n >= 3 else 0.0
        if a > 0:
            inv[g.bus] = inv.get(g.bus, 0.0) + 1.0 / a
    return {bus: 1.0 / s for bus, s in inv.items()}


def synthesise_costs(buses, gens, gen_a1: dict[int, float], defaults: FlexDefaults):
    """Default flexibility costs for every bus that can offer flexibility."""
    headroom_up: dict[int, float] = {}
    headroom_down: dict[int, float] = {}
    for g in gens:
        if not g.in_service or g.p_max <= 0:
            continue
        headroom_up[g.bus] = headroom_up.get(g.bus, 0.0) + (g.p_max - g.p_out)
        headroom_down[g.bus] = headroom_down.get(g.bus, 0.0) + (g.p_min - g.p_out)
    out = []
    for b in buses:
        demand = max(b.p_demand, 0.0)
        up = defaults.reserve_fraction * max(headroom_up.get(b.id, 0.0), 0.0)
        down = defaults.reserve_fraction * min(headroom_down.get(b.id, 0.0), 0.0)
        if b.id in headroom_up:
            a1 = gen_a1.get(b.id, defaults.generator_a1)
        else:
            a1 = defaults.load_a1
            up += defaults.load_reserve_fraction * demand
            down -= defaults.load_reserve_fraction * demand
        shed = defaults.shed_fraction * demand
        if up == 0 and down == 0 and shed == 0:
            continue  # transit bus
        out.append(
            FlexibilityCost.from_band(b.id, a1, down, up, shed, defaults.a2_ratio, defaults.b2)
        )
    return out


def load_case(path: str | Path, defaults: FlexDefaults | None = None) -> NetworkCase:
    """Read a case file, or a bundled case by name (``"case6"``, ``"case118"``)."""
    p = Path(path)
    if not p.exists() and p.suffix == "" and p.parent == Path("."):
        res = resources.files("loadshed.data").joinpath(f"{p.name}.m")
        if res.is_file():
            return parse_case(res.read_text(encoding="utf-8"), defaults, name=p.name)
    text = p.read_text(encoding="utf-8")
    return parse_case(text, defaults, name=p.stem)


def _num(x: float) -> str:
    if float(x).is_integer() and abs(x) < 1e15:
        return str(int(x))
    return repr(float(x))


def format_case(case: NetworkCase) -> str:
    """Serialise a case; ``parse_case(format_case(c)) == c`` holds exactly."""
    type_code = {BusKind.PQ: 1, BusKind.PV: 2, BusKind.SLACK: 3}
    lines = [f"function mpc = {case.name}", "mpc.version = '2';", f"mpc.baseMVA = {_num(case.base_mva)};", ""]
    lines.append("%% bus: bus_i type Pd Qd Gs Bs area Vm Va baseKV zone Vmax Vmin")
    lines.append("mpc.bus = [")
    for b in case.buses:
        vals = [b.id, type_code[b.kind], b.p_demand, b.q_demand, b.g_shunt, b.b_shunt, 1,
                b.v_setpoint, 0, b.base_kv, 1, b.v_max, b.v_min]
        lines.append("\t" + "\t".join(_num(v) for v in vals) + ";")
    lines += ["];", "", "%% gen: bus Pg Qg Qmax Qmin Vg mBase status Pmax Pmin", "mpc.gen = ["]
    for g in case.generators:
        vals = [g.bus, g.p_out, g.q_out, g.q_max, g.q_min, g.v_setpoint, case.base_mva,
                1 if g.in_service else 0, g.p_max, g.p_min]
        lines.append("\t" + "\t".join(_num(v) for v in vals) + ";")
    lines += ["];", "", "%% branch: fbus tbus r x b rateA rateB rateC ratio angle status",
              "mpc.branch = ["]
    for br in case.branches:
        rate = br.flow_limit if br.limited else 0
        vals = [br.from_bus, br.to_bus, br.r, br.x, br.b_shunt, rate, rate, rate, 0, 0,
                1 if br.in_service else 0]
        lines.append("\t" + "\t".join(_num(v) for v in vals) + ";")
    lines += ["];", "", "%% flexcost: bus a1 a2 b2 c2 r_down r_up shed_cap q_down q_up",
              "mpc.flexcost = ["]
    for c in case.costs:
        vals = [c.bus, c.a1, c.a2, c.b2, c.c2, c.reserve_down, c.reserve_up, c.sheddable_cap,
                c.q_reserve_down, c.q_reserve_up]
        lines.append("\t" + "\t".join(_num(v) for v in vals) + ";")
    lines += ["];", ""]
    return "\n".join(lines)
