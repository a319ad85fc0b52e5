import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment
from scipy.sparse import csr_matrix

from cascadesim.case_io import load_builtin_case, synthesize_dynamics
from cascadesim.dae import JacobianBlocks
from cascadesim.engine import RunConfig, Simulator, prepare_case
from cascadesim.integrators import IntegratorConfig, solve_algebraic
from cascadesim.modal import (
    SettleConfig,
    analyse_states,
    build_a_matrix,
    detect_and_rank,
    eigendecompose,
    settle_equilibrium,
)
from cascadesim.protection import Event
from oracles import equilibrium_island

BEM = IntegratorConfig()


def _scalar_blocks(lam, dt):
    return JacobianBlocks(J11=csr_matrix([[1.0 - dt * lam]]), J12=csr_matrix((1, 0)), J21=csr_matrix((0, 1)),
                          J22=csr_matrix((0, 0)), dt=dt, method="BEM")


@pytest.mark.parametrize("lam", [-3.0, 0.25, -0.5])
def test_scalar_a_matrix_is_lambda(lam):
    A = build_a_matrix(_scalar_blocks(lam, 0.125))
    assert A.shape == (1, 1) and A[0, 0] == lam


def test_eigendecompose_closed_forms():
    s = eigendecompose(np.diag([-1.0, -2.0]))
    assert sorted(s.values.real) == [-2.0, -1.0]
    np.testing.assert_allclose(np.linalg.norm(s.vectors, axis=0), 1.0)
    sigma, w = 0.3, 2.0
    s = eigendecompose(np.array([[sigma, w], [-w, sigma]]))
    got = sorted(s.values, key=lambda z: z.imag)
    assert got[0] == pytest.approx(sigma - 1j * w) and got[1] == pytest.approx(sigma + 1j * w)


def test_eigendecompose_residual_on_random_matrix():
    A = np.random.default_rng(50).normal(size=(50, 50))
    s = eigendecompose(A)
    res = np.linalg.norm(A @ s.vectors - s.vectors * s.values, axis=0)
    assert res.max() <= 1e-8 * np.linalg.norm(A, "fro")


def test_eigendecompose_rejects_non_finite():
    with pytest.raises(ValueError):
        eigendecompose(np.array([[np.nan]]))


def _reduced_ode_jacobian(model, x, V, h=1e-6):
    """Finite-difference linearization of x' = f(x, V(x)) with V re-solved tightly."""
    n = len(x)
    A = np.zeros((n, n))
    for j in range(n):
        cols = []
        for s in (1, -1):
            xp = x.copy()
            xp[j] += s * h
            Vp, ok, _, _ = solve_algebraic(model, xp, V, 1e-13, 30)
            assert ok
            cols.append(model.eval_f(xp, Vp))
        A[:, j] = (cols[0] - cols[1]) / (2 * h)
    return A


@pytest.fixture(scope="module")
def settled9(case9):
    prep = prepare_case(case9)
    sim = Simulator(prep, "TM", RunConfig(), relays_on=False, scheduled=[Event(0.5, "line_trip", (4,))])
    sim.advance(0.5)
    states = [(i.model, i.x, i.V) for i in sim.islands]
    return prep, states, settle_equilibrium(states, BEM, SettleConfig(speed_tol=1e-9, t_cap=300.0))


def test_a_matrix_matches_finite_difference_linearization(settled9):
    _, _, eq = settled9
    assert eq.settled
    (model, x, V), = eq.states
    V, ok, _, _ = solve_algebraic(model, x, V, 1e-13, 30)
    A = build_a_matrix(model.assemble_jacobian(x, V, 0.05, "BEM"))
    ref = _reduced_ode_jacobian(model, x, V)
    la, lr = np.linalg.eigvals(A), np.linalg.eigvals(ref)
    cost = np.abs(la[:, None] - lr[None, :])
    r, c = linear_sum_assignment(cost)
    rel = cost[r, c] / np.maximum(1.0, np.abs(lr[c]))
    assert rel.max() <= 1e-5


def test_a_matrix_independent_of_step(settled9):
    _, _, eq = settled9
    (model, x, V), = eq.states
    for method in ("BEM", "TM"):
        a1 = build_a_matrix(model.assemble_jacobian(x, V, 0.1, method))
        a2 = build_a_matrix(model.assemble_jacobian(x, V, 0.05, method))
        assert np.max(np.abs(a1 - a2)) <= 1e-9 * max(1.0, np.max(np.abs(a1)))


def test_settle_from_equilibrium_is_immediate(case9):
    model, x, V = equilibrium_island(case9)
    eq = settle_equilibrium([(model, x, V)], BEM)
    assert eq.settled and eq.t_d == pytest.approx(5.0, abs=0.5)
    (_, xs, Vs), = eq.states
    mask = model.control_mask()
    np.testing.assert_allclose(xs[mask], x[mask], atol=1e-8)
    np.testing.assert_allclose(Vs, V, atol=1e-8)


def test_settled_point_matches_long_tm_run(settled9):
    prep, states, eq = settled9
    sim = Simulator(prep, "TM", RunConfig(integrator=IntegratorConfig.ground_truth()), relays_on=False,
                    scheduled=[Event(0.5, "line_trip", (4,))])
    sim.advance(200.0)
    (model, x_ref, V_ref), = [(i.model, i.x, i.V) for i in sim.islands]
    (_, x_eq, V_eq), = eq.states
    mask = model.control_mask()
    assert np.max(np.abs(x_eq[mask] - x_ref[mask])) <= 1e-4
    assert np.max(np.abs(V_eq - V_ref)) <= 1e-4


def test_negative_damping_settles_onto_unstable_equilibrium():
    from cascadesim.case_io import make_smib_case, set_damping
    case = set_damping(make_smib_case(), {2: -2.0})
    prep = prepare_case(case)
    sim = Simulator(prep, "BEM", RunConfig(), relays_on=False, scheduled=[Event(0.5, "line_trip", (2,))])
    sim.advance(0.5)
    eq = settle_equilibrium([(i.model, i.x, i.V) for i in sim.islands], BEM)
    assert eq.settled
    spectra, models = analyse_states(eq.states, eq.dt_final)
    v = detect_and_rank(spectra, models)
    assert v.unstable and v.modes[0].eigenvalue.real > 0


def test_stable_base_case_not_flagged(case39):
    spectra, models = analyse_states([equilibrium_island(case39)], 0.05)
    v = detect_and_rank(spectra, models)
    assert not v.unstable and v.top_machines() == []
    assert max(l.real for l in spectra[0].values if abs(l.imag) > 0.1) < 0


def test_injected_negative_damping_ranks_those_machines():
    case = synthesize_dynamics(load_builtin_case("case39"), seed=1, damping_overrides={2: -10.0, 9: -10.0})
    spectra, models = analyse_states([equilibrium_island(case)], 0.05)
    v = detect_and_rank(spectra, models)
    assert v.unstable and len(v.modes) == 2
    for mode in v.modes:
        assert mode.eigenvalue.real > 0 and 1.0 < mode.frequency_hz < 2.0
        assert mode.machines[0].machine in (1, 8) and mode.machines[0].magnitude == 1.0
    assert sorted(v.top_machines(2)) == [1, 8]


class _OneMachine:
    machines = np.array([0])

    def speed_rows(self):
        return np.array([0])

    i_wcoi = 1


def test_real_unstable_root_is_not_oscillatory():
    A = np.diag([0.8, -1.0])
    v = detect_and_rank([eigendecompose(A, np.array([0]))], [_OneMachine()])
    assert not v.unstable


def test_thresholds_are_strict():
    model = _OneMachine()
    for sigma, w, flagged in ((2e-4, 3.0, True), (5e-5, 3.0, False), (0.2, 0.05, False)):
        A = np.array([[sigma, w], [-w, sigma]])
        assert detect_and_rank([eigendecompose(A, np.array([0]))], [model]).unstable == flagged


def test_ranking_invariant_to_eigenvector_scaling():
    case = synthesize_dynamics(load_builtin_case("case39"), seed=1, damping_overrides={2: -10.0, 9: -10.0})
    spectra, models = analyse_states([equilibrium_island(case)], 0.05)
    base = detect_and_rank(spectra, models)
    spectra[0].vectors = spectra[0].vectors * (3.0 - 4.0j)
    scaled = detect_and_rank(spectra, models)
    for a, b in zip(base.modes, scaled.modes):
        assert [m.machine for m in a.machines] == [m.machine for m in b.machines]
        np.testing.assert_allclose([m.magnitude for m in a.machines], [m.magnitude for m in b.machines],
                                   rtol=1e-12)
