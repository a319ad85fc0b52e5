"""Island DAE: two-axis machines, exciters, governors and constant-power loads.

Per island with ``M`` machines the differential state is laid out in
state-major blocks::

    x = [Eq'(M), Ed'(M), theta(M), dw_bar(M), Efd(M), Pm(M), delta_coi, dw_coi]

``theta`` and ``dw_bar`` are measured relative to the island's center of
inertia (COI); ``delta_coi`` and ``dw_coi`` carry the COI itself. The
algebraic vector ``V = [Vr(m); Vi(m)]`` holds bus voltages in the COI frame.

With ``X_q' = X_d'`` the stator behaves as a Norton source
``(E' - V) / (j X_d')`` at the machine bus, which keeps the network
equations linear in ``V`` apart from the loads.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.sparse import csr_matrix

LOAD_VMIN = 0.4  # below this |V| constant-power loads become constant impedance

# block offsets inside one island's state vector
EQ, ED, TH, WB, EF, PM = range(6)


def state_size(n_machines: int) -> int:
    return 6 * n_machines + 2


@dataclass
class MachineArrays:
    """Per-machine parameters of the whole case as flat arrays (system base)."""

    bus: np.ndarray
    H: np.ndarray
    D: np.ndarray
    xd: np.ndarray
    xq: np.ndarray
    xp: np.ndarray
    td0: np.ndarray
    tq0: np.ndarray
    ka: np.ndarray
    ta: np.ndarray
    efd_min: np.ndarray
    efd_max: np.ndarray
    inv_r: np.ndarray
    tg: np.ndarray
    has_gov: np.ndarray
    vref: np.ndarray
    pref: np.ndarray

    @classmethod
    def from_case(cls, case) -> "MachineArrays":
        idx = case.bus_index()
        ms = case.machines
        for k, m in enumerate(ms):
            if abs(m.xq_p - m.xd_p) > 1e-9 * max(1.0, m.xd_p):
                raise ValueError(f"machine {k + 1}: the network model requires X_q' = X_d'")
        gov = np.array([m.governor is not None for m in ms], dtype=bool)
        return cls(
            bus=np.array([idx[m.bus] for m in ms], dtype=int),
            H=np.array([m.H for m in ms], dtype=float),
            D=np.array([m.D for m in ms], dtype=float),
            xd=np.array([m.xd for m in ms], dtype=float),
            xq=np.array([m.xq for m in ms], dtype=float),
            xp=np.array([m.xd_p for m in ms], dtype=float),
            td0=np.array([m.td0_p for m in ms], dtype=float),
            tq0=np.array([m.tq0_p for m in ms], dtype=float),
            ka=np.array([m.exciter.k_a for m in ms], dtype=float),
            ta=np.array([m.exciter.t_a for m in ms], dtype=float),
            efd_min=np.array([m.exciter.efd_min for m in ms], dtype=float),
            efd_max=np.array([m.exciter.efd_max for m in ms], dtype=float),
            inv_r=np.array([1.0 / m.governor.r_droop if m.governor else 0.0 for m in ms]),
            tg=np.array([m.governor.t_g if m.governor else 1.0 for m in ms]),
            has_gov=gov,
            vref=np.zeros(len(ms)),
            pref=np.zeros(len(ms)),
        )

    def subset(self, idx) -> "MachineArrays":
        idx = np.asarray(idx, dtype=int)
        return MachineArrays(**{k: v[idx] for k, v in self.__dict__.items()})


@dataclass
class JacobianBlocks:
    J11: csr_matrix
    J12: csr_matrix
    J21: csr_matrix
    J22: csr_matrix
    dt: float
    method: str

    @property
    def weight(self) -> float:
        """Multiplier on f inside the step residual (dt for BEM, dt/2 for TM)."""
        return self.dt if self.method == "BEM" else 0.5 * self.dt


@dataclass
class Evaluation:
    f: np.ndarray
    I: np.ndarray
    fx: np.ndarray | None = None
    fV: np.ndarray | None = None
    Ix: np.ndarray | None = None
    IV: np.ndarray | None = None


class Parts(NamedTuple):
    f: np.ndarray
    g: np.ndarray
    fx: np.ndarray | None = None
    fV: np.ndarray | None = None
    gx: np.ndarray | None = None
    gV: np.ndarray | None = None


class IslandModel:
    """Equations of one electrical island in its own COI frame.

    ``buses`` and ``machines`` are global indices; ``Y`` is the island's
    complex admittance matrix restricted to ``buses``.
    """

    def __init__(self, buses, machines, Y, params: MachineArrays, p_load, q_load, omega_s: float):
        self.buses = np.asarray(buses, dtype=int)
        self.machines = np.asarray(machines, dtype=int)
        self.m = len(self.buses)
        self.M = len(self.machines)
        self.n = state_size(self.M)
        local = {int(b): i for i, b in enumerate(self.buses)}
        self.p = params.subset(self.machines)
        self.mb = np.array([local[int(b)] for b in self.p.bus], dtype=int)
        self.Y = csr_matrix(Y)
        G = self.Y.real.toarray()
        B = self.Y.imag.toarray()
        self.YN = np.block([[G, -B], [B, G]])
        self.YN_sparse = csr_matrix(self.YN)
        self.p_load = np.asarray(p_load, dtype=float)
        self.q_load = np.asarray(q_load, dtype=float)
        self.omega_s = float(omega_s)
        self.HT = float(self.p.H.sum()) if self.M else 0.0
        self.w = self.p.H / self.HT if self.M else np.zeros(0)
        # index maps reused by every evaluation
        r = np.arange(self.M)
        self._r = r
        self._col = [blk * self.M + r for blk in range(6)]
        self._bus_scatter = np.zeros((self.m, self.M))
        self._bus_scatter[self.mb, r] = 1.0
        self._diag = np.arange(self.m)
        gov = self.p.has_gov
        self._gov_rows = self._col[PM][gov]
        self._gov_wb = self._col[WB][gov]
        # Norton source coupling dI/dV is constant
        IVn = np.zeros((2 * self.m, 2 * self.m))
        np.add.at(IVn, (self.mb, self.m + self.mb), -1.0 / self.p.xp)
        np.add.at(IVn, (self.m + self.mb, self.mb), 1.0 / self.p.xp)
        self._IV_norton = IVn

    # -- layout helpers -------------------------------------------------
    def sl(self, block: int) -> slice:
        return slice(block * self.M, (block + 1) * self.M)

    @property
    def i_dcoi(self) -> int:
        return 6 * self.M

    @property
    def i_wcoi(self) -> int:
        return 6 * self.M + 1

    def speed_rows(self) -> np.ndarray:
        return np.arange(3 * self.M, 4 * self.M)

    def control_mask(self) -> np.ndarray:
        """Rows entering step-size norms (the free-running COI angle is excluded)."""
        mask = np.ones(self.n, dtype=bool)
        mask[self.i_dcoi] = False
        return mask

    # -- evaluation -----------------------------------------------------
    def evaluate(self, x: np.ndarray, V: np.ndarray, jac: bool = False) -> Evaluation:
        M, m, p = self.M, self.m, self.p
        X = p.xp
        eq, ed, th, wb, efd, pm = (x[k * M:(k + 1) * M] for k in range(6))
        wc = x[self.i_wcoi]
        s, c = np.sin(th), np.cos(th)
        VR, VI = V[self.mb], V[m + self.mb]
        Vd = VR * s - VI * c
        Vq = VR * c + VI * s
        Id = (eq - Vq) / X
        Iq = (Vd - ed) / X
        Pe = (eq * Vd - ed * Vq) / X
        efd_out = np.minimum(np.maximum(efd, p.efd_min), p.efd_max)
        Vt = np.sqrt(VR * VR + VI * VI)
        w_abs = wb + wc
        two_h = 2.0 * p.H
        acc = (pm - Pe - p.D * w_abs) / two_h
        a_c = float(self.w @ acc) if M else 0.0

        f = np.empty(self.n)
        f[:M] = (efd_out - eq - (p.xd - X) * Id) / p.td0
        f[M:2 * M] = (-ed + (p.xq - X) * Iq) / p.tq0
        f[2 * M:3 * M] = self.omega_s * wb
        f[3 * M:4 * M] = acc - a_c
        f[4 * M:5 * M] = (p.ka * (p.vref - Vt) - efd) / p.ta
        f[5 * M:6 * M] = (p.pref - w_abs * p.inv_r - pm) / p.tg * p.has_gov
        f[self.i_dcoi] = self.omega_s * wc
        f[self.i_wcoi] = a_c

        ER = ed * s + eq * c
        EI = eq * s - ed * c
        Vr_all, Vi_all = V[:m], V[m:]
        d2 = Vr_all * Vr_all + Vi_all * Vi_all
        low = d2 <= LOAD_VMIN**2
        den = np.where(low, LOAD_VMIN**2, d2)
        P, Q = self.p_load, self.q_load
        a = P * Vr_all + Q * Vi_all
        b = P * Vi_all - Q * Vr_all
        I = np.empty(2 * m)
        I[:m] = self._bus_scatter @ ((EI - VI) / X) - a / den
        I[m:] = self._bus_scatter @ ((VR - ER) / X) - b / den
        ev = Evaluation(f=f, I=I)
        if not jac:
            return ev

        n = self.n
        r = self._r
        cEQ, cED, cTH, cWB, cEF, cPM = self._col
        mbR, mbI = self.mb, m + self.mb
        iw = self.i_wcoi
        fx = np.zeros((n, n))
        fV = np.zeros((n, 2 * m))
        # field and damper windings
        kd = (p.xd - X) / (X * p.td0)
        kq = (p.xq - X) / (X * p.tq0)
        fx[cEQ, cEQ] = -(p.xd / X) / p.td0
        fx[cEQ, cTH] = -kd * Vd
        fx[cEQ, cEF] = ((efd > p.efd_min) & (efd < p.efd_max)) / p.td0
        fx[cED, cED] = -(p.xq / X) / p.tq0
        fx[cED, cTH] = kq * Vq
        fV[cEQ, mbR] = kd * c
        fV[cEQ, mbI] = kd * s
        fV[cED, mbR] = kq * s
        fV[cED, mbI] = -kq * c
        # rotor angle
        fx[cTH, cWB] = self.omega_s
        # swing: derivatives of acc, then COI removal
        accx = np.zeros((M, n))
        accx[r, cEQ] = -(Vd / X) / two_h
        accx[r, cED] = (Vq / X) / two_h
        accx[r, cTH] = -((eq * Vq + ed * Vd) / X) / two_h
        accx[r, cWB] = -p.D / two_h
        accx[r, cPM] = 1.0 / two_h
        accx[:, iw] = -p.D / two_h
        accV = np.zeros((M, 2 * m))
        accV[r, mbR] = -(EI / X) / two_h
        accV[r, mbI] = (ER / X) / two_h
        acx = self.w @ accx
        acV = self.w @ accV
        fx[3 * M:4 * M] = accx - acx
        fV[3 * M:4 * M] = accV - acV
        fx[iw] = acx
        fV[iw] = acV
        # exciter
        fx[cEF, cEF] = -1.0 / p.ta
        kv = -p.ka / p.ta / np.where(Vt > 0, Vt, 1.0)
        fV[cEF, mbR] = kv * VR
        fV[cEF, mbI] = kv * VI
        # governor
        g = p.has_gov
        gain = -p.inv_r[g] / p.tg[g]
        fx[self._gov_rows, self._gov_wb] = gain
        fx[self._gov_rows, iw] = gain
        fx[self._gov_rows, self._gov_rows] = -1.0 / p.tg[g]
        # COI angle
        fx[self.i_dcoi, iw] = self.omega_s

        # machine rows of one bus never share a column, so plain assignment is safe
        Ix = np.zeros((2 * m, n))
        Ix[mbR, cEQ] = s / X
        Ix[mbR, cED] = -c / X
        Ix[mbR, cTH] = ER / X
        Ix[mbI, cEQ] = -c / X
        Ix[mbI, cED] = -s / X
        Ix[mbI, cTH] = EI / X
        IV = self._IV_norton.copy()
        bi = self._diag
        curv = np.where(low, 0.0, 2.0 / den**2)
        IV[bi, bi] += -P / den + a * Vr_all * curv
        IV[bi, m + bi] += -Q / den + a * Vi_all * curv
        IV[m + bi, bi] += Q / den + b * Vr_all * curv
        IV[m + bi, m + bi] += -P / den + b * Vi_all * curv
        ev.fx, ev.fV, ev.Ix, ev.IV = fx, fV, Ix, IV
        return ev

    def parts(self, x, V, jac: bool = False) -> Parts:
        """Residual pieces ``f`` and ``g = Y_N V - I`` with optional derivatives."""
        ev = self.evaluate(x, V, jac)
        g = self.YN @ V - ev.I
        if not jac:
            return Parts(ev.f, g)
        return Parts(ev.f, g, ev.fx, ev.fV, -ev.Ix, self.YN - ev.IV)

    @property
    def n_alg(self) -> int:
        return 2 * self.m

    def eval_f(self, x, V) -> np.ndarray:
        return self.evaluate(x, V).f

    def eval_injections(self, x, V) -> np.ndarray:
        return self.evaluate(x, V).I

    def algebraic_residual(self, x, V) -> np.ndarray:
        return self.YN @ V - self.evaluate(x, V).I

    def assemble_jacobian(self, x, V, dt: float, method: str, ev: Evaluation | None = None) -> JacobianBlocks:
        if dt <= 0:
            raise ValueError("time step must be positive")
        if method not in ("BEM", "TM"):
            raise ValueError(f"unknown method {method!r}")
        if ev is None or ev.fx is None:
            ev = self.evaluate(x, V, jac=True)
        h = dt if method == "BEM" else 0.5 * dt
        J11 = np.eye(self.n) - h * ev.fx
        return JacobianBlocks(
            J11=csr_matrix(J11), J12=csr_matrix(-h * ev.fV), J21=csr_matrix(-ev.Ix),
            J22=csr_matrix(self.YN - ev.IV), dt=dt, method=method,
        )

    def low_voltage_guess(self, x) -> np.ndarray:
        """Network solution with every load in its constant-impedance regime.

        Exact whenever all bus voltages end up below the load switch-over
        level; otherwise a starting point on the low-voltage solution branch.
        """
        m = self.m
        I_src = self.evaluate(x, np.zeros(2 * m)).I  # loads draw nothing at V = 0
        k = 1.0 / LOAD_VMIN**2
        P, Q = self.p_load * k, self.q_load * k
        A = self.YN - self._IV_norton
        i = self._diag
        A[i, i] += P
        A[i, m + i] += Q
        A[m + i, i] -= Q
        A[m + i, m + i] += P
        try:
            return np.linalg.solve(A, I_src)
        except np.linalg.LinAlgError:
            return np.zeros(2 * m)

    # -- derived quantities ----------------------------------------------
    def absolute_speeds(self, x) -> np.ndarray:
        return x[self.sl(WB)] + x[self.i_wcoi]

    def electrical_power(self, x, V) -> np.ndarray:
        th = x[self.sl(TH)]
        s, c = np.sin(th), np.cos(th)
        VR, VI = V[self.mb], V[self.m + self.mb]
        Vd = VR * s - VI * c
        Vq = VR * c + VI * s
        return (x[self.sl(EQ)] * Vd - x[self.sl(ED)] * Vq) / self.p.xp



@dataclass
class InitialConditions:
    """Network-frame equilibrium of every machine derived from a power flow."""

    params: MachineArrays
    delta: np.ndarray
    eq: np.ndarray
    ed: np.ndarray
    efd: np.ndarray
    pm: np.ndarray
    v_bus: np.ndarray  # complex, network frame


def initial_conditions(case, pf) -> InitialConditions:
    """Back-solve machine states so that every derivative vanishes.

    Exciter limits that would clip the initial field voltage are widened
    around it, and the exciter/governor references are set to hold the
    operating point.
    """
    params = MachineArrays.from_case(case)
    V = pf.v_complex
    vt = V[params.bus]
    S = pf.p_gen + 1j * pf.q_gen
    I = np.conj(S / vt)
    e_q = vt + 1j * params.xq * I
    delta = np.angle(e_q)
    rot = np.sin(delta) + 1j * np.cos(delta)  # network frame -> (d + jq)
    vdq = vt * rot
    idq = I * rot
    X = params.xp
    eq = vdq.imag + X * idq.real
    ed = vdq.real - X * idq.imag
    efd = eq + (params.xd - X) * idq.real
    pm = (eq * vdq.real - ed * vdq.imag) / X
    params.efd_max = np.maximum(params.efd_max, efd + 1.0)
    params.efd_min = np.minimum(params.efd_min, efd - 1.0)
    params.vref = np.abs(vt) + efd / params.ka
    params.pref = np.where(params.has_gov, pm, 0.0)
    return InitialConditions(params=params, delta=delta, eq=eq, ed=ed, efd=efd, pm=pm, v_bus=V)
