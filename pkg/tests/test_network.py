from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cascadesim.case_io import load_builtin_case
from cascadesim.network import (
    TopologyState,
    build_ybus,
    find_islands,
    real_form,
    real_form_multiply_check,
    trip_branch_update,
)
from conftest import two_bus_case

CASE118 = load_builtin_case("case118")


def test_all_branches_out_leaves_only_shunts():
    case = CASE118
    topo = TopologyState.all_in(case).with_branches_out(range(case.n_branches))
    Y = build_ybus(case, topo).Y.toarray()
    shunt = np.array([complex(b.g_shunt, b.b_shunt) for b in case.buses])
    np.testing.assert_array_equal(Y, np.diag(shunt))


def test_single_series_branch_by_hand():
    case = two_bus_case(x=0.1)
    Y = build_ybus(case, TopologyState.all_in(case)).Y.toarray()
    np.testing.assert_allclose(Y, [[-10j, 10j], [10j, -10j]], atol=1e-12)


def test_trip_changes_four_entries_and_matches_rebuild():
    case = CASE118
    topo = TopologyState.all_in(case)
    Y0 = build_ybus(case, topo).Y
    for j in (0, 7, 100, 185):
        rebuilt = build_ybus(case, topo.with_branches_out([j])).Y
        diff = (rebuilt - Y0).toarray()
        assert np.count_nonzero(np.abs(diff) > 1e-12) == 4
        upd = trip_branch_update(case, Y0, j)
        np.testing.assert_allclose(upd.toarray(), rebuilt.toarray(), atol=1e-10)


def test_real_form_identity_probes():
    case = load_builtin_case("case9")
    Y = build_ybus(case, TopologyState.all_in(case)).Y
    n = case.n_buses
    np.testing.assert_array_equal(real_form_multiply_check(Y, np.zeros(n)), 0.0)
    YN = real_form(Y).toarray()
    for k in range(n):
        e = np.zeros(n, dtype=complex)
        e[k] = 1.0
        np.testing.assert_array_equal(real_form_multiply_check(Y, e), YN[:, k])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_real_form_matches_complex_multiply(seed):
    case = load_builtin_case("case9")
    rng = np.random.default_rng(seed)
    Y = build_ybus(case, TopologyState.all_in(case)).Y
    v = rng.normal(size=case.n_buses) + 1j * rng.normal(size=case.n_buses)
    i = Y @ v
    got = real_form_multiply_check(Y, v)
    scale = max(1.0, np.abs(i).max())
    np.testing.assert_allclose(got, np.concatenate([i.real, i.imag]), rtol=0, atol=1e-12 * scale)


def _bfs_islands(case, topo):
    idx = case.bus_index()
    adj = {i: [] for i in range(case.n_buses)}
    for j, br in enumerate(case.branches):
        f, t = idx[br.from_bus], idx[br.to_bus]
        if topo.branch_in[j] and topo.bus_in[f] and topo.bus_in[t]:
            adj[f].append(t)
            adj[t].append(f)
    seen, comps = set(), []
    for s in range(case.n_buses):
        if s in seen or not topo.bus_in[s]:
            continue
        comp, q = [], deque([s])
        seen.add(s)
        while q:
            u = q.popleft()
            comp.append(u)
            for w in adj[u]:
                if w not in seen:
                    seen.add(w)
                    q.append(w)
        comps.append(sorted(comp))
    return sorted(comps)


def test_intact_network_is_one_island():
    part = find_islands(CASE118, TopologyState.all_in(CASE118))
    assert len(part.islands) == 1
    assert len(part.islands[0].buses) == 118
    assert len(part.islands[0].machines) == 54


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 60))
def test_islands_match_bfs(seed, n_out):
    rng = np.random.default_rng(seed)
    topo = TopologyState.all_in(CASE118).with_branches_out(rng.choice(186, size=n_out, replace=False))
    if rng.random() < 0.5:
        topo = topo.with_nodes_out(CASE118, rng.choice(118, size=3, replace=False))
    part = find_islands(CASE118, topo)
    assert sorted(list(isl.buses) for isl in part.islands) == _bfs_islands(CASE118, topo)
    for k, isl in enumerate(part.islands):
        assert all(part.bus_island[b] == k for b in isl.buses)
    mins = [min(isl.buses) for isl in part.islands]
    assert mins == sorted(mins)


def test_cut_line_gives_two_islands():
    case = two_bus_case()
    part = find_islands(case, TopologyState.all_in(case).with_branches_out([0]))
    assert [isl.buses for isl in part.islands] == [(0,), (1,)]
    assert [isl.machines for isl in part.islands] == [(0,), (1,)]


def test_load_only_island_has_no_generation():
    case = two_bus_case(p_load_mw=50.0, gen2=False)
    part = find_islands(case, TopologyState.all_in(case).with_branches_out([0]))
    assert [isl.has_generation for isl in part.islands] == [True, False]
    assert part.energized() == [0]


def test_node_outage_removes_incident_elements():
    case = load_builtin_case("case9")
    topo = TopologyState.all_in(case).with_nodes_out(case, [0])
    idx = case.bus_index()
    for j, br in enumerate(case.branches):
        assert topo.branch_in[j] == (idx[br.from_bus] != 0 and idx[br.to_bus] != 0)
    assert not topo.machine_in[0] and topo.shed_fraction[0] == 0.0


def test_shed_fraction_bounds():
    topo = TopologyState.all_in(CASE118)
    with pytest.raises(ValueError):
        topo.with_shed([3], 1.5)
