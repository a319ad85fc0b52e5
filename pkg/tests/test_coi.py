import numpy as np
import pytest

from cascadesim.coi import coi_sums, lift_machines, network_voltages, reinitialize_children
from cascadesim.dae import IslandModel
from cascadesim.engine import RunConfig, Simulator, prepare_case
from cascadesim.integrators import IntegratorConfig, implicit_step
from cascadesim.network import TopologyState, build_ybus, find_islands
from cascadesim.protection import Event

CUT = (23, 25)  # splits case39 into a 6-machine and a 4-machine island


def _models(prep, topo):
    Y = build_ybus(prep.case, topo).Y
    out = []
    for isl in find_islands(prep.case, topo).islands:
        if not isl.has_generation:
            continue
        b = np.array(isl.buses)
        out.append(IslandModel(b, isl.machines, Y[b][:, b], prep.ic.params,
                               prep.p_load[b], prep.q_load[b], prep.omega_s))
    return out


@pytest.fixture(scope="module")
def swinging(case39):
    """Intact case39 mid-swing (a machine was kicked) just before the cut."""
    prep = prepare_case(case39)
    sim = Simulator(prep, "TM", RunConfig(integrator=IntegratorConfig.ground_truth()), relays_on=False)
    isl = sim.islands[0]
    th = isl.model.sl(2)
    isl.x[th][3] += 0.2
    isl.x[th] -= (isl.model.p.H @ isl.x[th]) / isl.model.HT
    isl.f = None
    sim.advance(1.3)
    isl = sim.islands[0]
    return prep, (isl.model, isl.x.copy(), isl.V.copy())


def test_identity_partition_is_a_no_op(swinging):
    prep, (model, x, V) = swinging
    child = _models(prep, TopologyState.all_in(prep.case))[0]
    (init,) = reinitialize_children([(model, x, V)], [child], IntegratorConfig().eps)
    assert init.converged
    np.testing.assert_allclose(init.x, x, rtol=0, atol=1e-12)
    # the parent voltages already satisfy the network equations, so no re-solve
    np.testing.assert_allclose(init.V, V, rtol=0, atol=1e-12)


def test_children_are_coi_framed(swinging):
    prep, parent = swinging
    children = _models(prep, TopologyState.all_in(prep.case).with_branches_out(CUT))
    assert [c.M for c in children] == [6, 4]
    for child, init in zip(children, reinitialize_children([parent], children, 1e-8)):
        assert init.converged
        s_th, s_w = coi_sums(child, init.x)
        assert abs(s_th) <= 1e-9 * child.HT
        assert abs(s_w) <= 1e-9 * child.HT


def test_network_frame_machine_quantities_survive_reframing(swinging):
    prep, parent = swinging
    before = lift_machines(*parent[:2])
    children = _models(prep, TopologyState.all_in(prep.case).with_branches_out(CUT))
    after = None
    for child, init in zip(children, reinitialize_children([parent], children, 1e-8)):
        after = lift_machines(child, init.x, after)
    assert sorted(after.delta) == sorted(before.delta)
    for g in before.delta:
        assert after.delta[g] == pytest.approx(before.delta[g], abs=1e-10)
        assert after.omega[g] == pytest.approx(before.omega[g], abs=1e-10)
        np.testing.assert_allclose(after.other[g], before.other[g], rtol=0, atol=1e-10)


def test_network_voltages_round_trip(swinging):
    _, (model, x, V) = swinging
    v = network_voltages(model, x, V)
    vc = np.array([v[int(b)] for b in model.buses]) * np.exp(-1j * x[model.i_dcoi])
    np.testing.assert_allclose(np.concatenate([vc.real, vc.imag]), V, rtol=0, atol=1e-14)


@pytest.mark.parametrize("method", ["TM", "BEM"])
def test_child_restart_matches_standalone_child(case39, method):
    prep = prepare_case(case39)
    cfg = RunConfig(integrator=IntegratorConfig.ground_truth() if method == "TM" else None)
    sim = Simulator(prep, method, cfg, relays_on=False)
    sim.advance(1.0)
    parents = [(i.model, i.x.copy(), i.V.copy()) for i in sim.islands]
    sim.scheduled = [Event(1.0, "line_trip", CUT)]
    sim.advance(1.0)
    assert [e.kind for e in sim.events] == ["line_trip", "island_split"]
    children = [i.model for i in sim.islands]
    inits = reinitialize_children(parents, children, sim.icfg.eps)
    for isl, init in zip(sim.islands, inits):
        assert np.array_equal(isl.x, init.x) and np.array_equal(isl.V, init.V)

    record = []
    sim.advance(4.0, callback=lambda s: record.append((s.dt_last, [(i.x.copy(), i.V.copy()) for i in s.islands])))
    assert len(record) > 10
    for k, (child, init) in enumerate(zip(children, inits)):
        x, V, f = init.x, init.V, None
        for dt, states in record:
            r = implicit_step(child, x, V, dt, method, sim.icfg, f_n=f, mask=child.control_mask())
            x, V, f = r.x, r.V, r.f_next
            assert np.array_equal(x, states[k][0]) and np.array_equal(V, states[k][1])


def test_snapshot_restart_is_bit_identical(case39):
    prep = prepare_case(case39)
    sim = Simulator(prep, "BEM", RunConfig(), scheduled=[Event(1.0, "line_trip", CUT)], relays_on=False)
    sim.advance(1.5)
    copy = sim.snapshot()
    sim.advance(5.0)
    copy.advance(5.0)
    assert sim.t == copy.t
    for a, b in zip(sim.islands, copy.islands):
        assert np.array_equal(a.x, b.x) and np.array_equal(a.V, b.V)
