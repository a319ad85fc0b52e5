"""Cascade orchestration: time stepping with relays, events and island tracking.

A :class:`Simulator` advances every energized island with one common step
size, samples relay inputs on a fixed measurement grid, applies discrete
events as tiers, and re-frames islands after each tier. The runners on top
of it implement the trapezoidal ground truth, plain backward Euler, the
backward Euler predictor-corrector loop and the partitioned RK4 comparator.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import time
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from cascadesim.case_io import CaseDefinition, dump_case, solve_power_flow
from cascadesim.coi import frame_state, reinitialize_children, MachineSnapshot
from cascadesim.dae import TH, WB, IslandModel, initial_conditions
from cascadesim.integrators import (
    IntegratorConfig,
    SingularJacobianError,
    adapt_step_bem,
    adapt_step_tm,
    estimate_lte,
    implicit_step,
    solve_algebraic,
    step_rk4_partitioned,
)
from cascadesim.modal import (
    OMEGA_TH,
    SIGMA_TH,
    InstabilityVerdict,
    SettleConfig,
    build_a_matrix,
    detect_and_rank,
    eigendecompose,
    settle_equilibrium,
)
from cascadesim.network import TopologyState, branch_admittances, build_ybus, find_islands
from cascadesim.protection import (
    Event,
    OCRelayBank,
    OscillationDetector,
    RelayConfig,
    UVLSRelayBank,
    schedule_sps,
    sort_events,
    update_uvls,
)

log = logging.getLogger(__name__)

_EPS_T = 1e-9


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PCConfig:
    round_cap: int = 10
    workers: int = 0
    sps_action: str = "machines"
    sps_line_targets: tuple[int, ...] = ()
    n_sps_machines: int = 2
    sigma_th: float = SIGMA_TH
    omega_th: float = OMEGA_TH
    settle_window: float = 5.0
    settle_speed_tol: float = 1e-6
    settle_cap: float = 120.0

    def __post_init__(self):
        if self.round_cap < 1:
            raise ValueError("round_cap must be at least 1")
        if self.sps_action not in ("machines", "line"):
            raise ValueError("sps_action must be 'machines' or 'line'")
        if self.sps_action == "line" and not self.sps_line_targets:
            raise ValueError("line SPS needs sps_line_targets")

    @property
    def settle(self) -> SettleConfig:
        return SettleConfig(self.settle_window, self.settle_speed_tol, self.settle_cap)


@dataclass(frozen=True)
class RunConfig:
    integrator: IntegratorConfig | None = None
    relays: RelayConfig | None = None
    pc: PCConfig = field(default_factory=PCConfig)
    stop_window: float = 5.0
    stop_speed_tol: float = 1e-5
    t_max: float = 600.0
    wall_budget: float | None = None
    freq_collapse: float = 0.1
    detector_window: float = 1.5
    detector_windows: int = 3
    detector_growth: float = 1.05
    detector_floor: float = 1e-4

    def integrator_for(self, method: str) -> IntegratorConfig:
        if self.integrator is not None and self.integrator.method == method:
            return self.integrator
        if method == "RK4":
            base = IntegratorConfig(method="RK4", dt_min=0.002, dt_max=0.002)
        else:
            base = IntegratorConfig.for_method(method)
        if self.integrator is not None:
            shared = {k: getattr(self.integrator, k) for k in ("eps", "max_newton_iters", "k", "r", "dt_event")}
            base = replace(base, **shared)
        return base


@dataclass(frozen=True)
class OutageSpec:
    """Initial disturbance: buses (by id) and/or branches (by id) removed at ``t``."""

    nodes: tuple[int, ...] = ()
    lines: tuple[int, ...] = ()
    t: float = 3.0

    def events(self, case: CaseDefinition) -> list[Event]:
        out = []
        if self.nodes:
            idx = case.bus_index()
            for b in self.nodes:
                if b not in idx:
                    raise KeyError(f"outage references unknown bus {b}")
            out.append(Event(self.t, "initial_node_outage", tuple(sorted(self.nodes))))
        if self.lines:
            bid = {br.id: j for j, br in enumerate(case.branches)}
            out.append(Event(self.t, "line_trip", tuple(sorted(bid[i] for i in self.lines))))
        return out


# ---------------------------------------------------------------------------
# prepared case (power flow + initial machine states), shared by runs
# ---------------------------------------------------------------------------

@dataclass
class PreparedCase:
    case: CaseDefinition
    pf: object
    ic: object
    p_load: np.ndarray
    q_load: np.ndarray
    f_idx: np.ndarray
    t_idx: np.ndarray
    y_br: tuple
    limits: np.ndarray
    fingerprint: str

    @property
    def omega_s(self) -> float:
        return 2 * math.pi * self.case.f_nominal


def case_fingerprint(case: CaseDefinition) -> str:
    return hashlib.sha256(dump_case(case).encode()).hexdigest()[:16]


def prepare_case(case: CaseDefinition) -> PreparedCase:
    pf = solve_power_flow(case)
    ic = initial_conditions(case, pf)
    idx = case.bus_index()
    base = case.base_mva
    return PreparedCase(
        case=case, pf=pf, ic=ic,
        p_load=np.array([b.p_load for b in case.buses]) / base,
        q_load=np.array([b.q_load for b in case.buses]) / base,
        f_idx=np.array([idx[br.from_bus] for br in case.branches], dtype=int),
        t_idx=np.array([idx[br.to_bus] for br in case.branches], dtype=int),
        y_br=branch_admittances(case),
        limits=np.array([br.current_limit for br in case.branches], dtype=float),
        fingerprint=case_fingerprint(case),
    )


# ---------------------------------------------------------------------------
# simulator state
# ---------------------------------------------------------------------------

@dataclass
class IslandRun:
    model: IslandModel
    x: np.ndarray
    V: np.ndarray
    f: np.ndarray | None = None
    uid: int = 0
    parent: int | None = None


@dataclass
class TierRecord:
    t: float
    index: int
    events: tuple[Event, ...]
    lines_out: int
    demand_loss_mw: float


class Simulator:
    """One cascade trajectory under a single integration method."""

    def __init__(self, prep: PreparedCase, method: str, config: RunConfig, *,
                 scheduled=(), relays_on: bool = True, sps_mode: str | None = None,
                 keep_snapshots: bool = False):
        self.prep = prep
        self.case = prep.case
        self.method = method
        self.config = config
        self.icfg = config.integrator_for(method)
        self.rcfg = config.relays or self.case.relay_config
        self.relays_on = relays_on
        self.sps_mode = sps_mode
        self.keep_snapshots = keep_snapshots
        self.params = prep.ic.params

        self.t = 0.0
        self.topo = TopologyState.all_in(self.case)
        self.scheduled: list[Event] = sort_events(scheduled)
        self.immediate: list[Event] = []
        self.events: list[Event] = []
        self.tiers: list[TierRecord] = []
        self.snapshots: list = []
        self.termination: str | None = None
        self.timed_out = False
        self.steps = 0
        self.dt_last = 0.0
        self.newton_iters = 0
        self._uid = 0
        self.island_parent: dict[int, int | None] = {}

        rc = self.rcfg
        self.dm = rc.measurement_dt
        self.oc_per_window = max(1, int(round(rc.t_w_oc / self.dm)))
        self.oc = OCRelayBank(prep.limits.copy())
        eligible = prep.p_load > 0
        self.uvls = UVLSRelayBank(self.case.n_buses, max(1, int(round(rc.t_w_uvls / self.dm))), eligible)
        self.freeze_until = -math.inf
        self.t_last_event = 0.0
        self.fixed_left = 0
        self.dt_next = self.icfg.dt_event if method != "RK4" else self.icfg.dt_rk4
        self.speed_hist: deque = deque()
        self.detector = OscillationDetector(self.params.H, window=config.detector_window,
                                            windows=config.detector_windows, growth=config.detector_growth,
                                            floor=config.detector_floor)
        self.sps_fired_or_pending = False
        self.islands: list[IslandRun] = []
        self._build_initial()
        self.detector.reset(self.t, [isl.model.machines for isl in self.islands])
        self._meas = self._measure()
        self._push_speed_hist()

    # -- construction ---------------------------------------------------
    def _island_model(self, isl) -> IslandModel:
        buses = np.array(isl.buses, dtype=int)
        Y = self._Y[buses][:, buses]
        sf = self.topo.shed_fraction[buses]
        return IslandModel(buses, isl.machines, Y, self.params,
                           self.prep.p_load[buses] * sf, self.prep.q_load[buses] * sf, self.prep.omega_s)

    def _new_uid(self) -> int:
        self._uid += 1
        return self._uid

    def _build_initial(self):
        ic = self.prep.ic
        self._Y = build_ybus(self.case, self.topo).Y.tocsr()
        part = find_islands(self.case, self.topo)
        snap = MachineSnapshot({}, {}, {})
        for g in range(self.case.n_machines):
            snap.delta[g] = ic.delta[g]
            snap.omega[g] = 0.0
            snap.other[g] = (ic.eq[g], ic.ed[g], ic.efd[g], ic.pm[g])
        for isl in part.islands:
            if not isl.has_generation:
                continue
            model = self._island_model(isl)
            x = frame_state(model, snap)
            vc = ic.v_bus[model.buses] * np.exp(-1j * x[model.i_dcoi])
            V = np.concatenate([vc.real, vc.imag])
            uid = self._new_uid()
            self.island_parent[uid] = None
            self.islands.append(IslandRun(model, x, V, uid=uid))
        self._bus_energized = self._energized_mask()

    def _energized_mask(self) -> np.ndarray:
        mask = np.zeros(self.case.n_buses, dtype=bool)
        for isl in self.islands:
            mask[isl.model.buses] = True
        return mask

    # -- snapshots ------------------------------------------------------
    def snapshot(self) -> "Simulator":
        memo = {id(self.prep): self.prep, id(self.params): self.params, id(self.config): self.config}
        for isl in self.islands:
            memo[id(isl.model)] = isl.model
        saved = self.snapshots
        self.snapshots = []
        try:
            clone = copy.deepcopy(self, memo)
        finally:
            self.snapshots = saved
        return clone

    # -- measurements ---------------------------------------------------
    def global_voltage(self) -> np.ndarray:
        v = np.zeros(self.case.n_buses, dtype=complex)
        for isl in self.islands:
            m = isl.model.m
            v[isl.model.buses] = isl.V[:m] + 1j * isl.V[m:]
        return v

    def branch_currents(self, v: np.ndarray | None = None) -> np.ndarray:
        if v is None:
            v = self.global_voltage()
        y_ff, y_ft, y_tf, y_tt = self.prep.y_br
        vf, vt = v[self.prep.f_idx], v[self.prep.t_idx]
        i_f = np.abs(y_ff * vf + y_ft * vt)
        i_t = np.abs(y_tf * vf + y_tt * vt)
        live = self.topo.branch_in & self._bus_energized[self.prep.f_idx] & self._bus_energized[self.prep.t_idx]
        return np.where(live, np.maximum(i_f, i_t), 0.0)

    def _measure(self):
        v = self.global_voltage()
        speeds = np.full(self.case.n_machines, np.nan)
        rel = np.full(self.case.n_machines, np.nan)
        for isl in self.islands:
            speeds[isl.model.machines] = isl.model.absolute_speeds(isl.x)
            rel[isl.model.machines] = isl.x[isl.model.sl(WB)]
        return np.abs(v), self.branch_currents(v), speeds, rel

    def _push_speed_hist(self):
        sp = self._meas[2]
        self.speed_hist.append((self.t, sp[np.isfinite(sp)]))

    # -- event bookkeeping ----------------------------------------------
    def next_event_time(self) -> float:
        cands = [math.inf]
        if self.scheduled:
            cands.append(self.scheduled[0].t)
        if self.relays_on:
            if self.oc.active.any():
                cands.append(float(self.oc.trip_time[self.oc.active].min()))
            if self.uvls.active.any():
                cands.append(float(self.uvls.fire_time[self.uvls.active].min()))
        return min(cands)

    def _due_events(self) -> list[Event]:
        now = self.t + _EPS_T
        due = list(self.immediate)
        self.immediate = []
        while self.scheduled and self.scheduled[0].t <= now:
            ev = self.scheduled.pop(0)
            due.append(replace(ev, t=self.t))
        if self.relays_on:
            lines = np.flatnonzero(self.oc.active & (self.oc.trip_time <= now))
            if len(lines):
                due.append(Event(self.t, "line_trip", tuple(int(j) for j in lines)))
            buses = np.flatnonzero(self.uvls.active & (self.uvls.fire_time <= now))
            for b in buses:
                due.append(Event(self.t, "uvls_shed", (int(b),)))
        return due

    def lines_disconnected(self) -> np.ndarray:
        live = self.topo.branch_in & self._bus_energized[self.prep.f_idx] & self._bus_energized[self.prep.t_idx]
        return ~live

    def demand_served_mw(self) -> float:
        p = self.prep.p_load * self.topo.shed_fraction * self._bus_energized
        return float(p.sum() * self.case.base_mva)

    def demand_loss_mw(self) -> float:
        return float(self.prep.p_load.sum() * self.case.base_mva) - self.demand_served_mw()

    def apply_events(self, due: list[Event]):
        """Apply all events due now as one tier and re-frame the islands."""
        tier = len(self.tiers)
        topo = self.topo
        applied = []
        for ev in sort_events(due):
            if ev.kind == "initial_node_outage":
                idx = self.case.bus_index()
                topo = topo.with_nodes_out(self.case, [idx[b] for b in ev.targets])
                self.oc.cancel(~topo.branch_in)
            elif ev.kind == "line_trip":
                live = [j for j in ev.targets if topo.branch_in[j]]
                if not live:
                    continue
                topo = topo.with_branches_out(live)
                self.oc.cancel(list(live))
                ev = replace(ev, targets=tuple(live))
            elif ev.kind in ("sps_trip", "machine_trip_oos", "island_collapse"):
                live = [g for g in ev.targets if topo.machine_in[g]]
                if not live:
                    continue
                topo = topo.with_machines_out(live)
                ev = replace(ev, targets=tuple(live))
            elif ev.kind == "uvls_shed":
                b = ev.targets[0]
                if not self._bus_energized[b]:
                    continue
                self.uvls.shed_count[b] += 1
                self.uvls.active[b] = False
                self.uvls.fire_time[b] = math.inf
                frac = (1.0 - self.rcfg.lambda_shed) ** self.uvls.shed_count[b]
                topo = topo.with_shed([b], frac)
            else:
                raise ValueError(f"unknown event kind {ev.kind!r}")
            applied.append(replace(ev, tier=tier, t=self.t))
        if not applied:
            return
        self.events.extend(applied)
        self._retopologize(topo, tier)
        self.tiers.append(TierRecord(self.t, tier, tuple(applied), int(self.lines_disconnected().sum()),
                                     self.demand_loss_mw()))
        self.fixed_left = self.icfg.k
        self.freeze_until = self.t + self.rcfg.oc_freeze_after_event
        self.t_last_event = self.t
        # swings across a topology change are not comparable
        self.detector.reset(self.t, [isl.model.machines for isl in self.islands])
        if any(e.source == "sps" for e in applied):
            self.sps_fired_or_pending = False
        self._meas = self._measure()
        self.speed_hist.clear()
        self._push_speed_hist()
        if self.keep_snapshots:
            self.snapshots.append((self.t, tier, self.snapshot()))

    def _retopologize(self, topo: TopologyState, tier: int):
        """Rebuild islands for ``topo``; islands that fail to re-solve collapse."""
        while True:
            self.topo = topo
            self._Y = build_ybus(self.case, topo).Y.tocsr()
            part = find_islands(self.case, topo)
            old = {(tuple(i.model.buses), tuple(i.model.machines)): i for i in self.islands}
            parents = [(i.model, i.x, i.V) for i in self.islands]
            new_islands, failed = [], []
            n_before = len(self.islands)
            children = []
            for isl in part.islands:
                if not isl.has_generation:
                    continue
                model = self._island_model(isl)
                prev = old.get((tuple(model.buses), tuple(model.machines)))
                if prev is not None and _same_network(prev.model, model):
                    new_islands.append(prev)
                    continue
                children.append(model)
                new_islands.append(None)
            inits = reinitialize_children(parents, children, self.icfg.eps) if children else []
            k = 0
            parent_of = self._parent_lookup()
            for j, entry in enumerate(new_islands):
                if entry is not None:
                    continue
                model, init = children[k], inits[k]
                k += 1
                if not init.converged:
                    failed.append(model)
                    continue
                uid = self._new_uid()
                parents_set = sorted({parent_of[int(g)] for g in model.machines if int(g) in parent_of})
                self.island_parent[uid] = parents_set[0] if parents_set else None
                new_islands[j] = IslandRun(model, init.x, init.V, uid=uid, parent=self.island_parent[uid])
            if failed:
                for model in failed:
                    targets = tuple(int(g) for g in model.machines)
                    ev = Event(self.t, "island_collapse", targets, tier=tier, island=None)
                    self.events.append(ev)
                    topo = topo.with_machines_out(targets)
                continue
            self.islands = [i for i in new_islands if i is not None]
            self._bus_energized = self._energized_mask()
            if len(self.islands) > n_before:
                self.events.append(Event(self.t, "island_split",
                                         tuple(int(self.case.buses[i.model.buses[0]].id) for i in self.islands),
                                         tier=tier))
            return

    def _parent_lookup(self) -> dict[int, int]:
        out = {}
        for isl in self.islands:
            for g in isl.model.machines:
                out[int(g)] = isl.uid
        return out

    # -- stepping -------------------------------------------------------
    def _next_window_boundary(self) -> float:
        w = self.rcfg.t_w_oc
        return (math.floor(self.t / w + 1e-7) + 1) * w

    def _attempt(self, dt: float):
        """Step every island by ``dt``; returns the per-island results."""
        out = []
        for isl in self.islands:
            mask = isl.model.control_mask()
            if self.method == "RK4":
                r = step_rk4_partitioned(isl.model, isl.x, isl.V, dt, self.icfg)
            else:
                try:
                    r = implicit_step(isl.model, isl.x, isl.V, dt, self.method, self.icfg, f_n=isl.f, mask=mask)
                except SingularJacobianError:
                    r = None
            out.append(r)
        return out

    def step(self, t_limit: float = math.inf) -> bool:
        """Advance by one accepted step. Returns False if nothing could be done."""
        cfg = self.icfg
        if self.method == "RK4":
            dt = cfg.dt_rk4
        else:
            dt = cfg.dt_event if self.fixed_left > 0 else self.dt_next
        horizon = min(self.next_event_time(), self._next_window_boundary(), self.config.t_max, t_limit)
        if horizon - self.t <= _EPS_T:
            return False
        if not self.islands:
            # nothing energized left to integrate; wait for the next scheduled event
            self.t = horizon
            return True
        truncated = dt >= horizon - self.t - _EPS_T
        if truncated:
            dt = horizon - self.t
        while True:
            results = self._attempt(dt)
            bad = [j for j, r in enumerate(results) if r is None or not r.converged
                   or not np.all(np.isfinite(r.x))]
            if bad:
                if dt > cfg.dt_event * (1 + 1e-9) and self.method != "RK4":
                    dt = max(0.5 * dt, cfg.dt_event)
                    truncated = False
                    continue
                targets = sorted(int(g) for j in bad for g in self.islands[j].model.machines)
                self.immediate.append(Event(self.t, "island_collapse", tuple(targets)))
                return True
            if self.method == "TM" and self.fixed_left == 0:
                lte = max(estimate_lte(r.x, isl.x, isl.f if isl.f is not None else isl.model.eval_f(isl.x, isl.V),
                                       dt, isl.model.control_mask())
                          for r, isl in zip(results, self.islands))
                ok, dt_new = adapt_step_tm(lte, dt, cfg)
                if not ok and dt > cfg.dt_min * (1 + 1e-9):
                    dt = dt_new
                    truncated = False
                    continue
                self.dt_next = dt_new if ok else cfg.dt_min
            break
        t0 = self.t
        t1 = horizon if truncated else self.t + dt
        prev_theta = [isl.x[isl.model.sl(TH)].copy() for isl in self.islands]
        for isl, r in zip(self.islands, results):
            isl.x, isl.V = r.x, r.V
            isl.f = r.f_next
            self.newton_iters += r.iterations
        self.t = t1
        self.dt_last = dt
        self.steps += 1
        if self.method == "BEM":
            self.dt_next = adapt_step_bem(dt, max(r.f0_norm for r in results), cfg)
        elif self.method == "TM" and self.fixed_left > 0:
            self.dt_next = cfg.dt_event
        if self.fixed_left > 0:
            self.fixed_left -= 1
        if self.method != "RK4" and max(r.iterations for r in results) > cfg.r:
            self.dt_next = cfg.dt_event
        meas0 = self._meas
        self._meas = self._measure()
        if self.relays_on:
            self._sample_relays(t0, t1, meas0, self._meas)
            self._check_machines(prev_theta)
        if self.sps_mode == "measurement":
            self._check_oscillations(t0, t1, meas0, self._meas)
        self._push_speed_hist()
        while self.speed_hist and self.speed_hist[0][0] < self.t - self.config.stop_window - 1e-9:
            if len(self.speed_hist) > 1 and self.speed_hist[1][0] <= self.t - self.config.stop_window + 1e-9:
                self.speed_hist.popleft()
            else:
                break
        return True

    def _sample_grid(self, t0: float, t1: float):
        k0 = math.floor(t0 / self.dm + 1e-7)
        k1 = math.floor(t1 / self.dm + 1e-7)
        ks = np.arange(k0 + 1, k1 + 1)
        alpha = (ks * self.dm - t0) / (t1 - t0)
        return ks, np.clip(alpha, 0.0, 1.0)

    def _sample_relays(self, t0, t1, meas0, meas1):
        ks, alpha = self._sample_grid(t0, t1)
        if not len(ks):
            return
        v0, i0 = meas0[:2]
        v1, i1 = meas1[:2]
        live = self._bus_energized
        for k, a in zip(ks, alpha):
            tk = k * self.dm
            v = (1 - a) * v0 + a * v1
            cur = (1 - a) * i0 + a * i1
            self.oc.add_sample(cur)
            if k % self.oc_per_window == 0:
                in_service = self.topo.branch_in & ~self.lines_disconnected()
                self.oc.window_update(tk, in_service, frozen=tk < self.freeze_until - _EPS_T)
            update_uvls(self.uvls, v, tk, self.rcfg, live)

    def _check_machines(self, prev_theta):
        th_lim = self.rcfg.out_of_step_angle_th
        trips = []
        collapse = []
        for isl, th0 in zip(self.islands, prev_theta):
            th = isl.x[isl.model.sl(TH)]
            over = np.flatnonzero((np.abs(th) > th_lim) & (np.abs(th) > np.abs(th0)))
            trips.extend(int(isl.model.machines[j]) for j in over)
            if abs(isl.x[isl.model.i_wcoi]) > self.config.freq_collapse:
                collapse.extend(int(g) for g in isl.model.machines)
        if trips:
            self.immediate.append(Event(self.t, "machine_trip_oos", tuple(sorted(trips))))
        if collapse:
            self.immediate.append(Event(self.t, "island_collapse", tuple(sorted(collapse))))

    def _check_oscillations(self, t0, t1, meas0, meas1):
        ks, alpha = self._sample_grid(t0, t1)
        # swings relative to the island COI, so common-mode frequency drift is ignored
        s0, s1 = meas0[3], meas1[3]
        for k, a in zip(ks, alpha):
            self.detector.observe(k * self.dm, (1 - a) * s0 + a * s1)
        if self.sps_fired_or_pending:
            return
        growing = self.detector.growing()
        if not growing:
            return
        worst = max(growing, key=lambda g: (g.rms, -g.group))
        targets = list(worst.machines[: self.config.pc.n_sps_machines])
        start = worst.start
        onset = max((tr.t for tr in self.tiers if tr.t <= start + _EPS_T), default=0.0)
        t_fire = max(onset + self.rcfg.sps_delay, self.t)
        pc = self.config.pc
        if pc.sps_action == "line":
            evs = schedule_sps(pc.sps_line_targets, t_fire, 0.0, kind_of_target="line")
            bid = {br.id: j for j, br in enumerate(self.case.branches)}
            evs = [replace(e, targets=tuple(sorted(bid[i] for i in e.targets))) for e in evs]
        else:
            evs = schedule_sps(targets, t_fire, 0.0)
        self.scheduled = sort_events(self.scheduled + evs)
        self.sps_fired_or_pending = True
        log.debug("measurement SPS at t=%.3f targets %s", t_fire, targets)

    # -- stopping -------------------------------------------------------
    def _violations(self) -> bool:
        if not self.relays_on:
            return False
        cur = self._meas[1]
        with np.errstate(divide="ignore", invalid="ignore"):
            over = np.any(cur > self.prep.limits)
        avg = self.uvls.window_average()
        low = (avg < self.rcfg.v_th) & self.uvls.eligible & self._bus_energized & (
            self.uvls.shed_count < self.rcfg.k_shed_max)
        return bool(over or low.any())

    def check_stop(self) -> str | None:
        if not self.islands and not self.scheduled and not self.immediate:
            return "collapsed"
        if self.immediate or self.scheduled:
            return None
        if self.relays_on and (self.oc.active.any() or self.uvls.active.any()):
            return None
        w = self.config.stop_window
        if self.t < self.t_last_event + w - _EPS_T or not self.speed_hist:
            return None
        if self.speed_hist[0][0] > self.t - w + 1e-9:
            return None
        sp = [s for _, s in self.speed_hist]
        if sp and sp[0].shape == sp[-1].shape and len(sp[-1]):
            block = np.array(sp)
            var = float(np.max(block.max(axis=0) - block.min(axis=0)))
        else:
            var = 0.0
        if var > self.config.stop_speed_tol:
            return None
        if self._violations():
            return None
        return "settled"

    def advance(self, t_stop: float, callback=None):
        """Step to ``t_stop`` applying due events but no stop rule.

        ``callback(sim)`` is called after every accepted step. Events due
        exactly at ``t_stop`` are applied before returning.
        """
        while True:
            due = self._due_events()
            if due:
                self.apply_events(due)
                continue
            if self.t >= t_stop - _EPS_T or not (self.islands or self.scheduled):
                return
            if not self.islands:
                self.t = min(self.scheduled[0].t, t_stop) if self.scheduled else t_stop
                continue
            if self.step(t_stop) and callback is not None:
                callback(self)

    def run(self, wall_deadline: float | None = None) -> str:
        """Advance until a stop condition; returns the termination label."""
        while True:
            due = self._due_events()
            if due:
                self.apply_events(due)
                continue
            reason = self.check_stop()
            if reason:
                self.termination = reason
                return reason
            if self.t >= self.config.t_max - _EPS_T:
                self.termination = "nonconverged"
                return self.termination
            if wall_deadline is not None and time.perf_counter() > wall_deadline:
                self.timed_out = True
                self.termination = "nonconverged"
                return self.termination
            if not self.step():
                continue

    # -- results --------------------------------------------------------
    def end_state(self) -> dict:
        case = self.case
        v = self.global_voltage()
        freq = np.zeros(case.n_buses)
        island_of = np.full(case.n_buses, -1)
        islands = []
        for k, isl in enumerate(self.islands):
            f = case.f_nominal * (1.0 + isl.x[isl.model.i_wcoi])
            freq[isl.model.buses] = f
            island_of[isl.model.buses] = k
            islands.append({
                "buses": [case.buses[i].id for i in isl.model.buses],
                "machines": [int(g) + 1 for g in isl.model.machines],
                "frequency_hz": f,
            })
        machine_on = np.zeros(case.n_machines, dtype=bool)
        for isl in self.islands:
            machine_on[isl.model.machines] = True
        return {
            "case_fingerprint": self.prep.fingerprint,
            "t_end": self.t,
            "termination": self.termination,
            "bus_id": [b.id for b in case.buses],
            "bus_energized": self._bus_energized.tolist(),
            "bus_vm": np.abs(v).tolist(),
            "bus_va_deg": np.degrees(np.angle(v)).tolist(),
            "bus_frequency_hz": freq.tolist(),
            "bus_island": island_of.tolist(),
            "machine_connected": machine_on.tolist(),
            "line_connected": (~self.lines_disconnected()).tolist(),
            "islands": islands,
            "demand_served_mw": self.demand_served_mw(),
            "demand_total_mw": float(self.prep.p_load.sum() * case.base_mva),
        }


def _same_network(a: IslandModel, b: IslandModel) -> bool:
    if a.m != b.m or not np.array_equal(a.buses, b.buses) or not np.array_equal(a.machines, b.machines):
        return False
    if not (np.array_equal(a.p_load, b.p_load) and np.array_equal(a.q_load, b.q_load)):
        return False
    d = a.Y - b.Y
    return d.nnz == 0 or not np.any(d.data)


# ---------------------------------------------------------------------------
# run results
# ---------------------------------------------------------------------------

# element kind named by each event's targets (initial outages and splits already carry bus ids)
_TARGET_KIND = {"line_trip": "branch", "uvls_shed": "bus", "sps_trip": "machine",
                "machine_trip_oos": "machine", "island_collapse": "machine"}


@dataclass
class CascadeRun:
    method: str
    events: list[Event]
    tiers: list[TierRecord]
    end_state: dict
    wall_time: float
    termination: str
    initial_lines_out: np.ndarray
    branch_ids: tuple = ()
    bus_ids: tuple = ()
    timings: dict = field(default_factory=dict)
    rounds: int = 1
    verdicts: list = field(default_factory=list)
    mode_rows: list = field(default_factory=list)
    steps: int = 0
    timed_out: bool = False
    pc_failed: bool = False

    @property
    def t_end(self) -> float:
        return float(self.end_state["t_end"])

    def dependent_line_outages(self) -> frozenset[int]:
        connected = np.array(self.end_state["line_connected"], dtype=bool)
        return frozenset(int(j) for j in np.flatnonzero(~connected & ~self.initial_lines_out))

    def demand_loss_fraction(self) -> float:
        tot = self.end_state["demand_total_mw"]
        return 0.0 if tot <= 0 else 1.0 - self.end_state["demand_served_mw"] / tot

    def event_record(self, ev: Event) -> dict:
        """Log form of an event with targets as element ids.

        Buses and branches are reported by their case ids, machines by
        1-based position (the G-number).
        """
        d = ev.to_json_dict()
        kind = _TARGET_KIND.get(ev.kind)
        if kind == "branch":
            d["targets"] = [self.branch_ids[j] for j in ev.targets]
        elif kind == "bus":
            d["targets"] = [self.bus_ids[i] for i in ev.targets]
        elif kind == "machine":
            d["targets"] = [g + 1 for g in ev.targets]
        return d

    def events_jsonl(self) -> str:
        return "".join(json.dumps(self.event_record(e), sort_keys=True) + "\n" for e in self.events)

    def timeline_rows(self) -> list[tuple[float, int, float]]:
        return [(tr.t, tr.lines_out, tr.demand_loss_mw) for tr in self.tiers]

    def summary(self) -> dict:
        es = self.end_state
        return {
            "method": self.method,
            "termination": self.termination,
            "timed_out": self.timed_out,
            "t_end": self.t_end,
            "wall_time_s": self.wall_time,
            "tiers": len(self.tiers),
            "events": len(self.events),
            "rounds": self.rounds,
            "pc_round_cap_exceeded": self.pc_failed,
            "demand_loss_pct": 100.0 * self.demand_loss_fraction(),
            "lines_out": int(np.sum(~np.array(es["line_connected"], dtype=bool))),
            "machines_out": int(np.sum(~np.array(es["machine_connected"], dtype=bool))),
            "dependent_line_outages": sorted(self.branch_ids[j] for j in self.dependent_line_outages()),
            "timings": self.timings,
            "steps": self.steps,
        }


def _initial_lines_out(prep: PreparedCase, outages: OutageSpec, config: RunConfig) -> np.ndarray:
    """Lines disconnected right after the initial-outage tier alone."""
    sim = Simulator(prep, "BEM", config, scheduled=outages.events(prep.case), relays_on=False)
    sim.t = outages.t
    due = sim._due_events()
    if due:
        sim.apply_events(due)
    return sim.lines_disconnected().copy()


def _finish(sim: Simulator, method: str, wall: float, prep, outages, config, **extra) -> CascadeRun:
    return CascadeRun(
        method=method, events=list(sim.events), tiers=list(sim.tiers), end_state=sim.end_state(),
        wall_time=wall, termination=sim.termination or "nonconverged",
        initial_lines_out=_initial_lines_out(prep, outages, config),
        branch_ids=tuple(br.id for br in prep.case.branches), bus_ids=tuple(b.id for b in prep.case.buses),
        steps=sim.steps, timed_out=sim.timed_out, **extra,
    )


def _as_prepared(case) -> PreparedCase:
    return case if isinstance(case, PreparedCase) else prepare_case(case)


def run_tm_ground_truth(case, outages: OutageSpec = OutageSpec(), config: RunConfig = RunConfig()) -> CascadeRun:
    """Variable-step trapezoidal run with measurement-based SPS."""
    return _run_single(case, outages, config, "TM", sps_mode="measurement")


def run_bem_plain(case, outages: OutageSpec = OutageSpec(), config: RunConfig = RunConfig()) -> CascadeRun:
    """Variable-step backward Euler cascade with no predictor."""
    return _run_single(case, outages, config, "BEM", sps_mode=None)


def run_rk4_partitioned(case, outages: OutageSpec = OutageSpec(), config: RunConfig = RunConfig()) -> CascadeRun:
    """Fixed-step explicit RK4 with per-stage algebraic solves."""
    return _run_single(case, outages, config, "RK4", sps_mode="measurement")


def _run_single(case, outages, config, method, sps_mode) -> CascadeRun:
    prep = _as_prepared(case)
    start = time.perf_counter()
    deadline = start + config.wall_budget if config.wall_budget else None
    sim = Simulator(prep, method, config, scheduled=outages.events(prep.case), sps_mode=sps_mode)
    sim.run(deadline)
    wall = time.perf_counter() - start
    return _finish(sim, method, wall, prep, outages, config)


# ---------------------------------------------------------------------------
# predictor-corrector
# ---------------------------------------------------------------------------

@dataclass
class TierAnalysis:
    tier: int
    t: float
    settled: bool
    verdict: InstabilityVerdict
    t_settle: float
    t_a_matrix: float
    t_eig: float
    settle_time: float


def analyse_tier(states, icfg: IntegratorConfig, pc: PCConfig, tier: int = -1, t: float = 0.0) -> TierAnalysis:
    """Settle one tier's post-event state, linearize and look for unstable modes."""
    t0 = time.perf_counter()
    eq = settle_equilibrium(states, replace(icfg, method="BEM"), pc.settle)
    t1 = time.perf_counter()
    spectra, models = [], []
    t_a = t_e = 0.0
    if eq.settled:
        for (model, x, V), blocks in zip(eq.states, eq.blocks):
            ta = time.perf_counter()
            A = build_a_matrix(blocks)
            tb = time.perf_counter()
            speed_rows = np.concatenate([model.speed_rows(), [model.i_wcoi]])
            spectra.append(eigendecompose(A, speed_rows))
            models.append(model)
            t_a += tb - ta
            t_e += time.perf_counter() - tb
    tc = time.perf_counter()
    verdict = detect_and_rank(spectra, models, pc.sigma_th, pc.omega_th)
    t_e += time.perf_counter() - tc
    if verdict.unstable:
        verdict.earliest_tier = t
    return TierAnalysis(tier, t, eq.settled, verdict, t1 - t0, t_a, t_e, eq.t_d)


def _tier_job(args):
    states, icfg, pc, tier, t = args
    return analyse_tier(states, icfg, pc, tier, t)


def _tier_states(sim: Simulator):
    return [(i.model, i.x, i.V) for i in sim.islands]


def run_bem_pc(case, outages: OutageSpec = OutageSpec(), config: RunConfig = RunConfig()) -> CascadeRun:
    """Backward Euler cascade with eigenanalysis-based predictor and SPS corrector."""
    prep = _as_prepared(case)
    pc = config.pc
    start = time.perf_counter()
    timings = {"a": 0.0, "b1": 0.0, "b2": 0.0, "b3": 0.0}
    sim = Simulator(prep, "BEM", config, scheduled=outages.events(prep.case), keep_snapshots=True)
    icfg = sim.icfg
    rounds = 0
    after_tier = -1
    verdicts = []
    mode_rows = []
    failed = False
    pool = ProcessPoolExecutor(max_workers=pc.workers) if pc.workers > 0 else None
    try:
        while True:
            rounds += 1
            ta = time.perf_counter()
            sim.run()
            timings["a"] += time.perf_counter() - ta
            # tiers reached while a corrective action is still pending are skipped
            todo = [(t, tier, snap) for t, tier, snap in sim.snapshots
                    if tier > after_tier and not any(e.source == "sps" for e in snap.scheduled)]
            found = None
            jobs = [(_tier_states(snap), icfg, pc, tier, t) for t, tier, snap in todo]
            if pool is not None:
                results = list(pool.map(_tier_job, jobs))
            else:
                results = []
                for job in jobs:
                    res = _tier_job(job)
                    results.append(res)
                    if res.verdict.unstable:
                        break
            for (t, tier, snap), res in zip(todo, results):
                timings["b1"] += res.t_settle
                timings["b2"] += res.t_a_matrix
                timings["b3"] += res.t_eig
                verdicts.append(res)
                for mode in res.verdict.modes:
                    mode_rows.append(_mode_row(res.tier, mode))
                if res.verdict.unstable:
                    found = (t, tier, snap, res)
                    break
            if found is None:
                break
            if rounds >= pc.round_cap:
                failed = True
                break
            t_f, tier_f, snap, res = found
            restart = snap.snapshot()
            restart.keep_snapshots = True
            restart.snapshots = [s for s in sim.snapshots if s[1] <= tier_f]
            if pc.sps_action == "line":
                bid = {br.id: j for j, br in enumerate(prep.case.branches)}
                targets = [bid[i] for i in pc.sps_line_targets]
                evs = schedule_sps(targets, t_f, restart.rcfg.sps_delay, kind_of_target="line")
            else:
                evs = schedule_sps(res.verdict.top_machines(pc.n_sps_machines), t_f, restart.rcfg.sps_delay)
            restart.scheduled = sort_events(restart.scheduled + evs)
            after_tier = tier_f
            sim = restart
    finally:
        if pool is not None:
            pool.shutdown()
    wall = time.perf_counter() - start
    timings["total"] = wall
    return _finish(sim, "BEM-PC", wall, prep, outages, config, timings=timings, rounds=rounds,
                   verdicts=verdicts, mode_rows=mode_rows, pc_failed=failed)


def _mode_row(tier: int, mode, top_k: int = 3) -> dict:
    lam = mode.eigenvalue
    return {
        "tier": tier,
        "lambda_re": lam.real,
        "lambda_im": lam.imag,
        "freq_hz": mode.frequency_hz,
        "machines": [rm.machine + 1 for rm in mode.machines[:top_k]],
        "shape": [rm.magnitude for rm in mode.machines[:top_k]],
        "phase_deg": [rm.phase_deg for rm in mode.machines[:top_k]],
    }


RUNNERS = {
    "TM": run_tm_ground_truth,
    "BEM": run_bem_plain,
    "BEM-PC": run_bem_pc,
    "RK4": run_rk4_partitioned,
}
