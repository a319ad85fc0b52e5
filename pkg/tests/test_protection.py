import math
import random

import mpmath
import numpy as np
import pytest

from cascadesim.engine import OutageSpec, RunConfig, Simulator, prepare_case, run_tm_ground_truth
from cascadesim.protection import (
    Event,
    OCRelayBank,
    OscillationDetector,
    RelayConfig,
    UVLSRelayBank,
    check_out_of_step,
    oc_trip_delay,
    schedule_sps,
    shed_fraction_after,
    sort_events,
    update_oc,
    update_uvls,
)
from cascadesim.case_io import synthesize_dynamics
from conftest import two_bus_case

CFG = RelayConfig()


def _mp_delay(ratio):
    mpmath.mp.dps = 50
    r = mpmath.mpf(ratio)
    return 0.14 / (r ** mpmath.mpf("0.02") - 1)


@pytest.mark.parametrize("ratio", [1.1, 1.5, 2.0, 3.7])
def test_oc_delay_against_arbitrary_precision(ratio):
    ref = _mp_delay(ratio)
    assert abs(oc_trip_delay(ratio) - float(ref)) <= 1e-9 * float(ref)


def test_oc_delay_at_one_and_a_half():
    assert oc_trip_delay(1.5) == pytest.approx(17.19, abs=0.01)


def test_no_countdown_at_or_below_pickup():
    assert oc_trip_delay(1.0) == math.inf and oc_trip_delay(0.7) == math.inf
    bank = OCRelayBank(np.array([1.0, 1.0]))
    update_oc(bank, np.array([1.0, 0.5]), 1.0, np.ones(2, dtype=bool))
    assert not bank.active.any()


def test_constant_overload_keeps_trip_instant():
    bank = OCRelayBank(np.array([1.0]))
    on = np.ones(1, dtype=bool)
    for t in range(1, 12):
        update_oc(bank, np.array([1.5]), float(t), on)
        assert bank.trip_time[0] == pytest.approx(1.0 + oc_trip_delay(1.5), rel=1e-12)


def test_changing_overload_accumulates_progress():
    bank = OCRelayBank(np.array([1.0]))
    on = np.ones(1, dtype=bool)
    update_oc(bank, np.array([1.5]), 1.0, on)
    update_oc(bank, np.array([2.0]), 5.0, on)
    done = 4.0 / oc_trip_delay(1.5)
    assert bank.trip_time[0] == pytest.approx(5.0 + (1 - done) * oc_trip_delay(2.0), rel=1e-12)


def test_cleared_overload_never_trips():
    bank = OCRelayBank(np.array([1.0]))
    on = np.ones(1, dtype=bool)
    for t, cur in ((1.0, 1.5), (2.0, 1.5), (3.0, 0.9)):
        update_oc(bank, np.array([cur]), t, on)
    assert not bank.active[0] and bank.trip_time[0] == math.inf


def test_out_of_service_line_has_no_countdown():
    bank = OCRelayBank(np.array([1.0]))
    update_oc(bank, np.array([3.0]), 1.0, np.zeros(1, dtype=bool))
    assert not bank.active[0]


def test_oc_window_freeze():
    bank = OCRelayBank(np.array([1.0]))
    for _ in range(50):
        bank.add_sample(np.array([1.5]))
    bank.window_update(1.0, np.ones(1, dtype=bool), frozen=True)
    assert not bank.active[0] and bank.acc_count == 0
    for _ in range(50):
        bank.add_sample(np.array([1.5]))
    bank.window_update(2.0, np.ones(1, dtype=bool), frozen=False)
    assert bank.active[0]


def _feed_uvls(bank, samples, t0=0.0, dt=0.02):
    """Feed voltage samples; returns the times at which a shed would fire."""
    fired = []
    live = np.ones(bank.n_buses, dtype=bool)
    for k, v in enumerate(samples):
        t = t0 + (k + 1) * dt
        update_uvls(bank, np.atleast_1d(v), t, CFG, live)
        if bank.active[0] and bank.fire_time[0] <= t + 1e-9:
            fired.append(t)
            bank.shed_count[0] += 1
            bank.active[0] = False
            bank.fire_time[0] = math.inf
    return fired


def test_sustained_low_voltage_sheds():
    bank = UVLSRelayBank(1, 150, np.ones(1, dtype=bool))
    fired = _feed_uvls(bank, [0.80] * 160)
    assert fired == [pytest.approx(0.02 + CFG.t_tp_uvls)]
    assert shed_fraction_after(1, CFG.lambda_shed) == 0.75


def test_shed_cap():
    bank = UVLSRelayBank(1, 150, np.ones(1, dtype=bool))
    fired = _feed_uvls(bank, [0.5] * 2000)
    assert len(fired) == CFG.k_shed_max
    assert bank.shed_count[0] == 5
    assert shed_fraction_after(5, 0.25) == pytest.approx(0.75**5)


def test_short_dip_does_not_shed():
    bank = UVLSRelayBank(1, 150, np.ones(1, dtype=bool))
    fired = _feed_uvls(bank, [1.0] * 150 + [0.80] * 50 + [1.0] * 300)
    assert fired == []
    bank = UVLSRelayBank(1, 150, np.ones(1, dtype=bool))
    assert _feed_uvls(bank, [0.80] * 50 + [1.0] * 300) == []


def test_ineligible_bus_never_counts_down():
    bank = UVLSRelayBank(1, 150, np.zeros(1, dtype=bool))
    assert _feed_uvls(bank, [0.3] * 400) == []


def test_out_of_step_rules():
    assert len(check_out_of_step(np.array([0.5, -0.5]), np.array([0.5, -0.5]), math.pi)) == 0
    th_prev = np.array([3.0, 0.1])
    th = np.array([3.2, 0.1])
    assert check_out_of_step(th, th_prev, math.pi).tolist() == [0]
    # past the threshold but swinging back
    assert len(check_out_of_step(np.array([3.2]), np.array([3.3]), math.pi)) == 0


def test_schedule_sps_machine_and_line_variants():
    evs = schedule_sps([7, 3], 10.0, 7.5)
    assert len(evs) == 1
    assert evs[0].t == 17.5 and evs[0].kind == "sps_trip" and evs[0].targets == (3, 7)
    lines = schedule_sps([12], 10.0, 4.5, kind_of_target="lines")
    assert lines[0].kind == "line_trip" and lines[0].t == 14.5
    with pytest.raises(ValueError):
        schedule_sps([], 1.0, 1.0)
    with pytest.raises(ValueError):
        schedule_sps([1], 1.0, -1.0)


def test_zero_delay_sps_fires_on_next_drain(case9):
    prep = prepare_case(case9)
    sim = Simulator(prep, "BEM", RunConfig(), relays_on=False)
    sim.advance(1.0)
    sim.scheduled = sort_events(sim.scheduled + schedule_sps([2], sim.t, 0.0))
    sim.advance(sim.t + 0.01)
    assert [e.kind for e in sim.events] == ["sps_trip"]
    assert sim.events[0].t == pytest.approx(1.0)


def test_simultaneous_events_sorted_deterministically():
    evs = [Event(5.0, "line_trip", (4,)), Event(5.0, "uvls_shed", (2,)), Event(5.0, "line_trip", (1,)),
           Event(5.0, "sps_trip", (0, 1)), Event(4.0, "uvls_shed", (9,)), Event(5.0, "initial_node_outage", (3,))]
    want = sort_events(evs)
    for seed in range(10):
        shuffled = evs[:]
        random.Random(seed).shuffle(shuffled)
        assert sort_events(shuffled) == want
    assert [e.kind for e in want] == ["uvls_shed", "initial_node_outage", "sps_trip", "line_trip", "line_trip",
                                      "uvls_shed"]
    assert want[3].targets == (1,)


def test_radial_trip_deenergizes_load_only_subtree():
    case = synthesize_dynamics(two_bus_case(p_load_mw=50.0, gen2=False), seed=1)
    run = run_tm_ground_truth(case, OutageSpec(lines=(1,), t=1.0))
    es = run.end_state
    assert es["bus_energized"] == [True, False]
    assert es["demand_total_mw"] - es["demand_served_mw"] == pytest.approx(50.0)
    assert run.demand_loss_fraction() == pytest.approx(1.0)


def test_machine_trip_resolves_network(case9):
    prep = prepare_case(case9)
    sim = Simulator(prep, "TM", RunConfig(), relays_on=False)
    sim.advance(0.5)
    sim.apply_events([Event(sim.t, "sps_trip", (2,))])
    assert len(sim.islands) == 1
    isl = sim.islands[0]
    assert isl.model.machines.tolist() == [0, 1]
    assert np.max(np.abs(isl.model.algebraic_residual(isl.x, isl.V))) <= sim.icfg.eps


def test_uvls_in_the_engine_sheds_fixed_fraction_up_to_cap(case9):
    # a threshold above any achievable voltage keeps every load bus "low"
    cfg = RunConfig(relays=RelayConfig(v_th=1.2))
    run = run_tm_ground_truth(case9, OutageSpec(), cfg)
    sheds = [e for e in run.events if e.kind == "uvls_shed"]
    load_buses = [i for i, b in enumerate(case9.buses) if b.p_load > 0]
    assert sorted({e.targets[0] for e in sheds}) == load_buses
    for b in load_buses:
        assert sum(e.targets[0] == b for e in sheds) == 5
    served = sum(b.p_load for b in case9.buses) * 0.75**5
    assert run.end_state["demand_served_mw"] == pytest.approx(served, rel=1e-9)


def test_detector_flags_growth_and_ignores_decay():
    H = np.array([3.0, 5.0])
    det = OscillationDetector(H)
    det.reset(0.0, [(0, 1)])
    for k in range(1, 600):
        t = 0.02 * k
        a = 1e-3 * math.exp(0.15 * t) * math.sin(2 * math.pi * 1.2 * t)
        det.observe(t, np.array([a, -a * H[0] / H[1]]))
    g = det.growing()
    assert len(g) == 1 and g[0].machines == (0, 1)
    det.reset(0.0, [(0, 1)])
    for k in range(1, 600):
        t = 0.02 * k
        a = 1e-2 * math.exp(-0.15 * t) * math.sin(2 * math.pi * 1.2 * t)
        det.observe(t, np.array([a, -a * H[0] / H[1]]))
    assert det.growing() == []


def test_relay_config_checks():
    with pytest.raises(ValueError):
        RelayConfig(lambda_shed=0.0)
    with pytest.raises(ValueError):
        RelayConfig.from_dict({"nope": 1})
    assert RelayConfig.from_dict(CFG.to_dict()) == CFG
    assert (CFG.v_th, CFG.k_shed_max, CFG.lambda_shed) == (0.8645, 5, 0.25)
