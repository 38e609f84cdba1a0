import itertools
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from builders import dc_isf, ring3, two_bus
from loadshed.identifiability import (
    REPORT_COLUMNS,
    check_pair,
    check_set,
    isf_matrix,
    local_submatrix,
    lodf_single,
    outage_sensitivity,
    principal_angles,
    report_csv,
)
from loadshed.powerflow import Contingency, IslandingError, solve_dc, top_flow_contingencies

seeds = st.integers(0, 2**31 - 1)


@pytest.fixture(scope="module")
def top5(case118):
    return top_flow_contingencies(case118, [1, 1, 1, 2, 2])


# -- ISF ------------------------------------------------------------------------

def test_isf_two_bus():
    S = isf_matrix(two_bus())
    np.testing.assert_allclose(S, [[0.0, -1.0]], atol=1e-14)


def test_isf_slack_column_zero(case118):
    assert np.all(isf_matrix(case118)[:, case118.slack_index] == 0)


def test_isf_matches_independent_inverse(case118):
    np.testing.assert_allclose(isf_matrix(case118), dc_isf(case118), atol=1e-10)


@settings(max_examples=50, deadline=None)
@given(seed=seeds)
def test_isf_reproduces_dc_flows(case118, seed):
    p = np.random.default_rng(seed).normal(size=case118.n_bus)
    _, f = solve_dc(case118, p)
    assert np.abs(isf_matrix(case118) @ p - f).max() <= 1e-10


# -- outage sensitivity -----------------------------------------------------

def test_single_outage_own_row_cancels(case6):
    sens = outage_sensitivity(case6, Contingency("c", (4,)))
    assert sens.d[case6.branch_index[4], 0] == -1.0


def test_ring_outage_reroutes_everything():
    case = ring3()
    sens = outage_sensitivity(case, Contingency("c", (1,)))
    # flow on (1,2) moves onto 1 -> 3 -> 2: +f on (1,3), -f on (2,3) by orientation
    np.testing.assert_allclose(sens.d[:, 0], [-1.0, -1.0, 1.0], atol=1e-12)
    p = np.array([0.0, -0.6, -0.4])
    _, pre = solve_dc(case, p)
    _, post = solve_dc(case, p, Contingency("c", (1,)))
    np.testing.assert_allclose(post - pre, sens.delta_flows(pre), atol=1e-12)


def test_islanding_outage():
    with pytest.raises(IslandingError):
        outage_sensitivity(ring3(), Contingency("c", (2, 3)))


def test_single_line_matches_ratio_form(case118):
    S = isf_matrix(case118)
    for br in case118.branches:
        if not case118.is_connected((br.id,)):
            continue
        d = outage_sensitivity(case118, Contingency("c", (br.id,)), S).d[:, 0]
        ref = lodf_single(case118, br.id, S)
        keep = np.arange(case118.n_branch) != case118.branch_index[br.id]
        assert np.abs(d[keep] - ref[keep]).max() <= 1e-10


@settings(max_examples=50, deadline=None)
@given(seed=seeds, size=st.integers(1, 3))
def test_resolve_oracle(case118, seed, size):
    rng = np.random.default_rng(seed)
    ids = [br.id for br in case118.branches]
    out = tuple(int(b) for b in rng.choice(ids, size, replace=False))
    if not case118.is_connected(out):
        return
    c = Contingency("c", out)
    p = rng.normal(size=case118.n_bus)
    pre = dc_isf(case118) @ p
    post = dc_isf(case118, out) @ p
    sens = outage_sensitivity(case118, c)
    assert np.abs((post - pre) - sens.delta_flows(pre)).max() <= 1e-8


def test_local_submatrix_selects_incident_rows(case118, top5):
    sens = outage_sensitivity(case118, top5[3])
    bus = case118.branch(top5[3].outaged_branches[0]).from_bus
    local = local_submatrix(sens, case118, bus)
    assert local.shape == (len(case118.adjacency[bus]), 2)
    rows = [case118.branch_index[b] for b in case118.adjacency[bus]]
    np.testing.assert_array_equal(local, sens.d[rows])
    f = np.random.default_rng(3).normal(size=case118.n_branch)
    f_k = f[[case118.branch_index[b] for b in top5[3].outaged_branches]]
    np.testing.assert_allclose(local @ f_k, sens.delta_flows(f)[rows], atol=1e-14)


def test_local_submatrix_degree_three(case6):
    sens = outage_sensitivity(case6, Contingency("c", (1,)))
    assert local_submatrix(sens, case6, 4).shape == (3, 1)


def test_local_submatrix_unknown_bus(case6):
    sens = outage_sensitivity(case6, Contingency("c", (1,)))
    with pytest.raises(KeyError):
        local_submatrix(sens, case6, 42)


# -- principal angles -------------------------------------------------------

def test_identical_columns():
    sep = principal_angles([1.0, 2.0, 3.0], [2.0, 4.0, 6.0])
    np.testing.assert_allclose(sep.sigma, [1.0])
    np.testing.assert_allclose(sep.beta, [0.0], atol=1e-7)
    assert not sep.identifiable


def test_orthogonal_columns():
    sep = principal_angles([1.0, 0.0], [0.0, 1.0])
    np.testing.assert_allclose(sep.sigma, [0.0], atol=1e-15)
    np.testing.assert_allclose(sep.beta, [np.pi / 2])
    assert sep.identifiable


def test_planes_sharing_one_direction():
    A = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
    B = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
    sep = principal_angles(A, B)
    assert sep.beta[0] == pytest.approx(0.0, abs=1e-7)
    assert sep.beta[1] == pytest.approx(np.pi / 4)
    assert sep.identifiable


def test_zero_rank_warns():
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        sep = principal_angles(np.zeros((3, 1)), [1.0, 0.0, 0.0])
    assert any(issubclass(w.category, RuntimeWarning) for w in caught)
    assert sep.sigma.size == 0 and not sep.identifiable


def test_row_count_mismatch():
    with pytest.raises(ValueError, match="row counts"):
        principal_angles(np.ones((3, 1)), np.ones((2, 1)))


@settings(max_examples=300, deadline=None)
@given(seed=seeds, n=st.integers(2, 6), ka=st.integers(1, 3), kb=st.integers(1, 3))
def test_angle_properties(seed, n, ka, kb):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(n, ka))
    B = rng.normal(size=(n, kb))
    ab, ba = principal_angles(A, B), principal_angles(B, A)
    assert len(ab.sigma) == min(np.linalg.matrix_rank(A), np.linalg.matrix_rank(B))
    np.testing.assert_allclose(ab.sigma, ba.sigma, atol=1e-12)
    assert np.all((ab.sigma >= 0) & (ab.sigma <= 1))
    assert np.all((ab.beta >= 0) & (ab.beta <= np.pi / 2))
    assert np.all(np.diff(ab.beta) >= -1e-12)
    assert ab.overshoot <= 1e-10
    T = rng.normal(size=(ka, ka)) + 3 * np.eye(ka)
    np.testing.assert_allclose(principal_angles(A @ T, B).sigma, ab.sigma, atol=1e-10)


# -- identifiability checks ---------------------------------------------------

def test_same_contingency_not_identifiable(case118, top5):
    ok, sep = check_pair(case118, 34, top5[0], top5[0])
    assert not ok
    np.testing.assert_allclose(sep.sigma, 1.0, atol=1e-12)


def test_single_measurement_bus_not_identifiable(case118):
    leaves = [b for b, adj in case118.adjacency.items() if len(adj) == 1]
    assert leaves
    bus = leaves[0]
    singles = [Contingency(f"L{b}", (b,)) for b in (8, 51, 36)]
    for k, kp in itertools.combinations(singles, 2):
        ok, sep = check_pair(case118, bus, k, kp)
        assert not ok
        assert sep.min_sigma == pytest.approx(1.0, abs=1e-12)


def test_singleton_set_is_identifiable(case118, top5):
    rep = check_set(case118, 34, top5[:1])
    assert rep.identifiable and rep.pairs == ()


def test_duplicate_in_set_fails_on_that_pair(case118, top5):
    dup = Contingency("again", top5[0].outaged_branches)
    rep = check_set(case118, 34, [top5[0], top5[1], dup])
    assert rep.failures() == [(top5[0].id, "again")]


def test_bus34_local_space_has_rank_two(case118, top5):
    """Bus 34 sees every remote outage through a rank-2 local response.

    Its four incident branches are tied by KCL, and the branch pair towards
    buses 36/37 always moves in proportion, so a double-line outage spans the
    whole local space.  Single-line pairs stay separable; any pair with a
    double-line outage does not.
    """
    S = isf_matrix(case118)
    stacked = np.hstack([local_submatrix(outage_sensitivity(case118, c, S), case118, 34)
                         for c in top5])
    sv = np.linalg.svd(stacked, compute_uv=False)
    assert sv[2] <= 1e-10 * sv[0]
    rep = check_set(case118, 34, top5)
    singles = {c.id for c in top5 if len(c.outaged_branches) == 1}
    for p in rep.pairs:
        assert p.identifiable == (p.pair[0] in singles and p.pair[1] in singles)


def test_report_csv(case118, top5):
    text = report_csv([check_set(case118, 34, top5[:3])])
    lines = text.splitlines()
    assert tuple(lines[0].split(",")) == REPORT_COLUMNS
    assert len(lines) == 1 + 3
    assert lines[1].startswith("34,L8,L51,")
