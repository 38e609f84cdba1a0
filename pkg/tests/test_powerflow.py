import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from builders import TWO_BUS, ac_mismatch, ring3, two_bus
from loadshed.casefile import parse_case
from loadshed.network import BusKind, build_bbus
from loadshed.powerflow import (
    Contingency,
    IslandingError,
    PowerFlowState,
    check_connectivity,
    frequency_proxy,
    solve_ac,
    solve_dc,
    top_flow_contingencies,
)


# -- connectivity -----------------------------------------------------------

def test_two_bus_outage_disconnects():
    assert not check_connectivity(two_bus(), Contingency("c", (1,)))


@pytest.mark.parametrize("branch", [1, 2, 3])
def test_ring_single_outage_stays_connected(branch):
    assert check_connectivity(ring3(), Contingency("c", (branch,)))


def test_case118_listed_contingencies_connected(case118):
    conts = top_flow_contingencies(case118, [1, 1, 1, 2, 2, 3])
    for c in conts:
        # graph-search oracle independent of the library's component count
        seen, stack = {case118.buses[0].id}, [case118.buses[0].id]
        live = case118.live_branches(c.outaged_branches)
        nbrs = {b.id: [] for b in case118.buses}
        for br in live:
            nbrs[br.from_bus].append(br.to_bus)
            nbrs[br.to_bus].append(br.from_bus)
        while stack:
            for m in nbrs[stack.pop()]:
                if m not in seen:
                    seen.add(m)
                    stack.append(m)
        assert len(seen) == case118.n_bus
        assert check_connectivity(case118, c)


def test_contingency_requires_branches():
    with pytest.raises(ValueError, match="no outaged branches"):
        Contingency("empty", ())


def test_contingency_unknown_branch(case6):
    with pytest.raises(KeyError, match="unknown branch 99"):
        Contingency("bad", (99,)).validate(case6)


# -- AC power flow ------------------------------------------------------------

def test_flat_fixed_point():
    text = TWO_BUS.replace("2 1 50 0", "2 1 0 0").replace("1 50 0 100", "1 0 0 100")
    state = solve_ac(parse_case(text))
    assert state.converged and state.iterations <= 1
    np.testing.assert_allclose(state.v_mag, 1.0, atol=1e-12)
    np.testing.assert_allclose(state.v_ang, 0.0, atol=1e-12)


def test_two_bus_ac():
    case = two_bus()
    state = solve_ac(case)
    assert state.converged
    assert ac_mismatch(case, state) <= 1e-8
    p_from, q_from, p_to, q_to = state.branch_flows[0]
    # lossless branch (r = 0): active power arrives unchanged, reactive losses are positive
    assert p_from == pytest.approx(0.5, abs=1e-8)
    assert p_to == pytest.approx(-0.5, abs=1e-8)
    assert q_from + q_to > 0
    assert state.p_inj[0] == pytest.approx(0.5, abs=1e-8)
    assert state.v_ang[0] == 0.0


@pytest.mark.parametrize("name", ["case6", "case118"])
def test_base_case_residual(name, request):
    case = request.getfixturevalue(name)
    state = solve_ac(case)
    assert state.converged
    assert ac_mismatch(case, state) <= 1e-8
    assert state.v_ang[case.slack_index] == 0.0
    for k, b in enumerate(case.buses):
        if b.kind is not BusKind.PQ:
            assert state.v_mag[k] == pytest.approx(b.v_setpoint, abs=1e-12)


def test_outaged_branch_carries_nothing(case6):
    c = Contingency("c", (5, 9))
    pre = solve_ac(case6)
    post = solve_ac(case6, c, start=pre)
    assert post.converged
    for bid in c.outaged_branches:
        assert np.all(post.branch_flows[case6.branch_index[bid]] == 0)
    assert ac_mismatch(case6, post, c.outaged_branches) <= 1e-8


def test_islanding_raises():
    with pytest.raises(IslandingError):
        solve_ac(two_bus(), Contingency("c", (1,)))


def test_non_convergence_is_reported(case118):
    state = solve_ac(case118, max_iter=1)
    assert not state.converged
    assert state.max_mismatch > 1e-8


def test_q_limits_respected(case118):
    free = solve_ac(case118)
    limited = solve_ac(case118, enforce_q_limits=True)
    assert limited.converged
    q_gen = limited.q_inj + limited.q_demand
    base = case118.base_mva
    lo = np.zeros(case118.n_bus)
    hi = np.zeros(case118.n_bus)
    for g in case118.active_generators:
        lo[case118.bus_index[g.bus]] += g.q_min / base
        hi[case118.bus_index[g.bus]] += g.q_max / base
    pv = [k for k, b in enumerate(case118.buses) if b.kind is BusKind.PV]
    q_free = free.q_inj + free.q_demand
    violated = [k for k in pv if not lo[k] - 1e-9 <= q_free[k] <= hi[k] + 1e-9]
    assert violated, "fixture should exercise at least one limit"
    for k in pv:
        assert lo[k] - 1e-7 <= q_gen[k] <= hi[k] + 1e-7


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), which=st.integers(0, 5))
def test_random_load_residual(case118, seed, which):
    rng = np.random.default_rng(seed)
    pd, qd = case118.demand_pu()
    m = rng.uniform(0.95, 1.05, case118.n_bus)
    c = top_flow_contingencies(case118, [1, 1, 1, 2, 2, 3])[which]
    pre = solve_ac(case118, demand=(pd * m, qd * m))
    post = solve_ac(case118, c, demand=(pd * m, qd * m), start=pre)
    assert pre.converged and post.converged
    assert ac_mismatch(case118, pre) <= 1e-8
    assert ac_mismatch(case118, post, c.outaged_branches) <= 1e-8


# -- DC power flow ------------------------------------------------------------

def test_dc_two_bus():
    theta, f = solve_dc(two_bus(), [1.0, -1.0])
    np.testing.assert_allclose(theta, [0.0, -0.1], atol=1e-15)
    np.testing.assert_allclose(f, [1.0], atol=1e-14)


def test_dc_zero_injection(case6):
    theta, f = solve_dc(case6, np.zeros(6))
    assert np.all(theta == 0) and np.all(f == 0)


def test_dc_ring_split():
    _, f = solve_dc(ring3(), [1.0, -1.0, 0.0])
    # branch 1 = (1,2) direct path; branches 3 = (1,3) and 2 = (2,3) form the detour
    np.testing.assert_allclose(f, [2 / 3, -1 / 3, 1 / 3], atol=1e-14)


def test_dc_islanding():
    with pytest.raises(IslandingError):
        solve_dc(two_bus(), [1.0, -1.0], Contingency("c", (1,)))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_dc_nodal_balance_and_shift(case118, seed):
    rng = np.random.default_rng(seed)
    p = rng.normal(size=case118.n_bus)
    theta, f = solve_dc(case118, p)
    net = np.zeros(case118.n_bus)
    for row, br in enumerate(case118.branches):
        net[case118.bus_index[br.from_bus]] += f[row]
        net[case118.bus_index[br.to_bus]] -= f[row]
    keep = np.arange(case118.n_bus) != case118.slack_index
    assert np.abs(net[keep] - p[keep]).max() <= 1e-10
    _, K = build_bbus(case118)
    np.testing.assert_array_equal(K @ theta, f)
    assert np.abs(K @ (theta + 0.37) - f).max() <= 1e-12


def test_dc_repeatable(case6):
    p = np.linspace(-1, 1, 6)
    a = solve_dc(case6, p)
    b = solve_dc(case6, p, None)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


# -- frequency proxy ----------------------------------------------------------

def _state(p_gen: float) -> PowerFlowState:
    z = np.zeros(1)
    return PowerFlowState(z, z, np.array([p_gen]), z, np.zeros((0, 4)), True, 0, z, z)


def test_frequency_identical():
    assert frequency_proxy(_state(2.0), _state(2.0), 60.0, 1.0) == 60.0


def test_frequency_one_percent():
    assert frequency_proxy(_state(1.0), _state(1.01), 60.0, 1.0) == pytest.approx(59.99)


@given(pre=st.floats(0.1, 10), post=st.floats(0.1, 10))
def test_frequency_sign(pre, post):
    w = frequency_proxy(_state(pre), _state(post))
    assert (w <= 60.0) == (post >= pre)


def test_frequency_zero_generation():
    with pytest.raises(ValueError, match="zero"):
        frequency_proxy(_state(0.0), _state(1.0))


# -- contingency selection -------------------------------------------------

def test_top_flow_contingencies(case118):
    conts = top_flow_contingencies(case118, [1, 1, 1, 2, 2, 3])
    assert [c.id for c in conts] == ["L8", "L51", "L36", "L38+141", "L97+31", "L96+93+33"]
    used = [b for c in conts for b in c.outaged_branches]
    assert len(used) == len(set(used))
    assert conts == top_flow_contingencies(case118, [1, 1, 1, 2, 2, 3])
