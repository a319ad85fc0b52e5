"""Center-of-inertia framing of islands and re-framing across topology changes.

When an island changes (split, machine loss, or just a new network), every
machine's rotor angle and speed are first lifted to the network frame, the
COI of each resulting island is recomputed from the inertia-weighted means,
and the bus voltages are rotated into the new frame and re-solved.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from cascadesim.dae import ED, EF, EQ, PM, TH, WB, IslandModel
from cascadesim.integrators import solve_algebraic

REINIT_ITERS = 50


@dataclass
class MachineSnapshot:
    """Network-frame machine quantities keyed by global machine index."""

    delta: dict
    omega: dict
    other: dict  # machine -> (Eq', Ed', Efd, Pm)


@dataclass
class ChildInit:
    x: np.ndarray
    V: np.ndarray
    converged: bool
    mismatch: float


def lift_machines(model: IslandModel, x: np.ndarray, snap: MachineSnapshot | None = None) -> MachineSnapshot:
    """Absolute angle/speed of each machine: ``delta = theta + delta_coi``."""
    if snap is None:
        snap = MachineSnapshot({}, {}, {})
    dc, wc = x[model.i_dcoi], x[model.i_wcoi]
    th, wb = x[model.sl(TH)], x[model.sl(WB)]
    eq, ed, efd, pm = x[model.sl(EQ)], x[model.sl(ED)], x[model.sl(EF)], x[model.sl(PM)]
    for j, g in enumerate(model.machines):
        g = int(g)
        snap.delta[g] = th[j] + dc
        snap.omega[g] = wb[j] + wc
        snap.other[g] = (eq[j], ed[j], efd[j], pm[j])
    return snap


def network_voltages(model: IslandModel, x: np.ndarray, V: np.ndarray, out: dict | None = None) -> dict:
    """Complex bus voltages in the common network frame, keyed by global bus."""
    if out is None:
        out = {}
    rot = np.exp(1j * x[model.i_dcoi])
    vc = (V[: model.m] + 1j * V[model.m:]) * rot
    for i, b in enumerate(model.buses):
        out[int(b)] = vc[i]
    return out


def frame_state(model: IslandModel, snap: MachineSnapshot) -> np.ndarray:
    """Assemble a COI-frame state vector from network-frame machine data."""
    M = model.M
    x = np.zeros(model.n)
    if M == 0:
        return x
    H = model.p.H
    delta = np.array([snap.delta[int(g)] for g in model.machines])
    omega = np.array([snap.omega[int(g)] for g in model.machines])
    other = np.array([snap.other[int(g)] for g in model.machines]).reshape(M, 4)
    dc = float(H @ delta) / model.HT
    wc = float(H @ omega) / model.HT
    x[model.sl(EQ)] = other[:, 0]
    x[model.sl(ED)] = other[:, 1]
    x[model.sl(TH)] = delta - dc
    x[model.sl(WB)] = omega - wc
    x[model.sl(EF)] = other[:, 2]
    x[model.sl(PM)] = other[:, 3]
    x[model.i_dcoi] = dc
    x[model.i_wcoi] = wc
    return x


def voltage_guess(model: IslandModel, x: np.ndarray, v_net: dict) -> np.ndarray:
    rot = np.exp(-1j * x[model.i_dcoi])
    vc = np.array([v_net.get(int(b), 1.0 + 0j) for b in model.buses]) * rot
    return np.concatenate([vc.real, vc.imag])


def reinitialize_children(parents, children: list[IslandModel], eps: float) -> list[ChildInit]:
    """Carry parent island states into the frames of the child islands.

    ``parents`` is an iterable of ``(model, x, V)`` at the event instant.
    Exciter, governor and flux states are copied unchanged; only angles and
    speeds are re-referenced. Each child's voltages are then re-solved with
    the machine states held fixed; if Newton fails from the pre-event
    voltages (damped, so a solution near the voltage-stability limit is not
    missed) it is retried from the low-voltage branch.
    """
    snap = MachineSnapshot({}, {}, {})
    v_net: dict = {}
    for model, x, V in parents:
        lift_machines(model, x, snap)
        network_voltages(model, x, V, v_net)
    out = []
    for child in children:
        x = frame_state(child, snap)
        V0 = voltage_guess(child, x, v_net)
        V, ok, norm, _ = solve_algebraic(child, x, V0, eps, REINIT_ITERS, damped=True)
        if not ok:
            V, ok, norm, _ = solve_algebraic(child, x, child.low_voltage_guess(x), eps, REINIT_ITERS, damped=True)
        out.append(ChildInit(x=x, V=V, converged=ok, mismatch=norm))
    return out


def coi_sums(model: IslandModel, x: np.ndarray) -> tuple[float, float]:
    """Inertia-weighted sums of COI-relative angles and speeds (zero by construction)."""
    H = model.p.H
    return float(H @ x[model.sl(TH)]), float(H @ x[model.sl(WB)])
