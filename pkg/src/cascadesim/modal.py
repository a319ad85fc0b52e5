"""Predictor machinery: settle to equilibrium, linearize, find unstable modes.

The state matrix is recovered from the blocks of the implicit-step Jacobian
that the integrator already builds, so no separate linearization code is
needed. Eigenvalues come from LAPACK's dense nonsymmetric solver.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csc_matrix
from scipy.sparse.linalg import splu

from cascadesim.dae import JacobianBlocks
from cascadesim.integrators import IntegratorConfig, SingularJacobianError, adapt_step_bem, step_bem

SIGMA_TH = 1e-4
OMEGA_TH = 0.1


@dataclass(frozen=True)
class SettleConfig:
    window: float = 5.0
    speed_tol: float = 1e-6
    t_cap: float = 120.0


@dataclass
class EquilibriumResult:
    states: list  # [(model, x, V)]
    t_d: float
    settled: bool
    blocks: list  # JacobianBlocks per island (empty if not settled)
    dt_final: float
    steps: int = 0


@dataclass
class Spectrum:
    A: np.ndarray
    values: np.ndarray
    vectors: np.ndarray


@dataclass(frozen=True)
class RankedMachine:
    machine: int
    magnitude: float
    phase_deg: float


@dataclass(frozen=True)
class ModeInfo:
    eigenvalue: complex
    island: int
    machines: tuple[RankedMachine, ...]

    @property
    def frequency_hz(self) -> float:
        return abs(self.eigenvalue.imag) / (2 * np.pi)


@dataclass
class InstabilityVerdict:
    unstable: bool
    modes: list[ModeInfo] = field(default_factory=list)
    earliest_tier: float | None = None

    def top_machines(self, k: int = 2) -> list[int]:
        """Machines with the largest normalized speed modeshape over unstable modes."""
        best: dict[int, float] = {}
        for mode in self.modes:
            for rm in mode.machines:
                best[rm.machine] = max(best.get(rm.machine, 0.0), rm.magnitude)
        ranked = sorted(best.items(), key=lambda kv: (-kv[1], kv[0]))
        return [g for g, _ in ranked[:k]]


def build_a_matrix(blocks: JacobianBlocks) -> np.ndarray:
    """State matrix ``A = P11 + P12 P22^-1 P21`` from implicit-step blocks."""
    h = blocks.weight
    n = blocks.J11.shape[0]
    P11 = (np.eye(n) - blocks.J11.toarray()) / h
    P12 = -blocks.J12.toarray() / h
    P21 = -blocks.J21.toarray()
    if blocks.J22.shape[0] == 0:
        return P11
    try:
        lu = splu(csc_matrix(blocks.J22))
    except RuntimeError as exc:
        raise SingularJacobianError(f"algebraic Jacobian is singular: {exc}") from None
    return P11 + P12 @ lu.solve(P21)


def eigendecompose(A: np.ndarray, speed_rows: np.ndarray | None = None) -> Spectrum:
    """Full spectrum with unit-norm right eigenvectors.

    Each eigenvector is rotated so its largest entry among ``speed_rows``
    (or among all rows, if the mode has no speed content) is real positive.
    """
    A = np.asarray(A, dtype=float)
    if not np.all(np.isfinite(A)):
        raise ValueError("state matrix has non-finite entries")
    try:
        vals, vecs = np.linalg.eig(A)
    except np.linalg.LinAlgError as exc:
        raise RuntimeError(f"eigenvalue iteration failed: {exc}") from None
    vecs = vecs / np.linalg.norm(vecs, axis=0, keepdims=True)
    for j in range(vecs.shape[1]):
        v = vecs[:, j]
        rows = speed_rows if speed_rows is not None and len(speed_rows) else np.arange(len(v))
        sub = v[rows]
        k = int(np.argmax(np.abs(sub)))
        if abs(sub[k]) < 1e-12:
            k_all = int(np.argmax(np.abs(v)))
            ref = v[k_all]
        else:
            ref = sub[k]
        vecs[:, j] = v * (abs(ref) / ref)
    return Spectrum(A=A, values=vals, vectors=vecs)


def speed_modeshape(model, vec: np.ndarray) -> np.ndarray:
    """Absolute machine-speed components of an eigenvector."""
    return vec[model.speed_rows()] + vec[model.i_wcoi]


def detect_and_rank(spectra, models, sigma_th: float = SIGMA_TH, omega_th: float = OMEGA_TH) -> InstabilityVerdict:
    """Flag oscillatory modes with ``Re > sigma_th`` and ``|Im| > omega_th``.

    ``spectra`` and ``models`` are parallel lists over islands. Machines in a
    mode are ranked by modeshape magnitude normalized to the largest one.
    """
    modes = []
    for isl, (spec, model) in enumerate(zip(spectra, models)):
        for j, lam in enumerate(spec.values):
            if lam.real > sigma_th and lam.imag > omega_th:
                shape = speed_modeshape(model, spec.vectors[:, j])
                mags = np.abs(shape)
                top = mags.max() if mags.size else 0.0
                if top <= 0:
                    continue
                order = sorted(range(len(mags)), key=lambda i: (-mags[i], i))
                ranked = tuple(
                    RankedMachine(int(model.machines[i]), float(mags[i] / top), float(np.degrees(np.angle(shape[i]))))
                    for i in order
                )
                modes.append(ModeInfo(eigenvalue=complex(lam), island=isl, machines=ranked))
    modes.sort(key=lambda m: (-m.eigenvalue.real, -m.eigenvalue.imag))
    return InstabilityVerdict(unstable=bool(modes), modes=modes)


def analyse_states(states, dt: float) -> tuple[list[Spectrum], list]:
    """Linearize every energized island at its current point."""
    spectra, models = [], []
    for model, x, V in states:
        if model.M == 0:
            continue
        blocks = model.assemble_jacobian(x, V, dt, "BEM")
        A = build_a_matrix(blocks)
        speed_rows = np.concatenate([model.speed_rows(), [model.i_wcoi]])
        spectra.append(eigendecompose(A, speed_rows))
        models.append(model)
    return spectra, models


def settle_equilibrium(states, cfg: IntegratorConfig, settle: SettleConfig = SettleConfig()) -> EquilibriumResult:
    """Variable-step backward Euler with no relays until machine speeds stop moving.

    ``states`` lists ``(model, x, V)`` per energized island right after an
    event; the first ``cfg.k`` steps use the post-event step size.
    """
    states = [(m, x.copy(), V.copy()) for m, x, V in states if m.M > 0]
    if not states:
        return EquilibriumResult([], 0.0, True, [], cfg.dt_max)
    masks = [m.control_mask() for m, _, _ in states]
    f_cache = [None] * len(states)
    hist: deque = deque()
    t = 0.0
    dt_next = cfg.dt_event
    fixed_left = cfg.k
    steps = 0
    dt_used = cfg.dt_event
    hist.append((t, np.concatenate([m.absolute_speeds(x) for m, x, _ in states])))
    while t < settle.t_cap:
        dt = cfg.dt_event if fixed_left else dt_next
        while True:
            results = [step_bem(m, x, V, dt, cfg, f_n=f, mask=mk)
                       for (m, x, V), f, mk in zip(states, f_cache, masks)]
            if all(r.converged for r in results):
                break
            if dt <= cfg.dt_event * (1 + 1e-12):
                return EquilibriumResult(states, t, False, [], dt, steps)
            dt = max(0.5 * dt, cfg.dt_event)
        steps += 1
        t += dt
        dt_used = dt
        states = [(m, r.x, r.V) for (m, _, _), r in zip(states, results)]
        f_cache = [r.f_next for r in results]
        if fixed_left:
            fixed_left -= 1
            dt_next = cfg.dt_event
        else:
            dt_next = adapt_step_bem(dt, max(r.f0_norm for r in results), cfg)
        if max(r.iterations for r in results) > cfg.r:
            dt_next = cfg.dt_event
        speeds = np.concatenate([m.absolute_speeds(x) for m, x, _ in states])
        if not np.all(np.isfinite(speeds)):
            return EquilibriumResult(states, t, False, [], dt, steps)
        hist.append((t, speeds))
        while hist and hist[0][0] < t - settle.window - 1e-9:
            hist.popleft()
        if t >= settle.window:
            block = np.array([s for _, s in hist])
            if float(np.max(block.max(axis=0) - block.min(axis=0))) <= settle.speed_tol:
                blocks = [m.assemble_jacobian(x, V, dt_used, "BEM") for m, x, V in states]
                return EquilibriumResult(states, t, True, blocks, dt_used, steps)
    return EquilibriumResult(states, t, False, [], dt_used, steps)
