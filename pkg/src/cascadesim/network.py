"""Admittance matrices, topology status and island detection."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.sparse import bmat, coo_matrix, csr_matrix
from scipy.sparse.csgraph import connected_components


@dataclass(frozen=True)
class TopologyState:
    """Breaker status of every element plus remaining load fraction per bus.

    ``bus_in`` is cleared by node outages; a bus that is out carries no load
    and all its incident branches and machines are out as well.
    """

    branch_in: np.ndarray
    machine_in: np.ndarray
    bus_in: np.ndarray
    shed_fraction: np.ndarray

    @classmethod
    def all_in(cls, case) -> "TopologyState":
        return cls(
            branch_in=np.array([br.status == "in" for br in case.branches], dtype=bool),
            machine_in=np.ones(case.n_machines, dtype=bool),
            bus_in=np.ones(case.n_buses, dtype=bool),
            shed_fraction=np.ones(case.n_buses),
        )

    def __post_init__(self):
        sf = self.shed_fraction
        if np.any(sf < 0) or np.any(sf > 1):
            raise ValueError("shed fractions must lie in [0, 1]")

    def copy(self) -> "TopologyState":
        return TopologyState(self.branch_in.copy(), self.machine_in.copy(),
                             self.bus_in.copy(), self.shed_fraction.copy())

    def with_branches_out(self, idx) -> "TopologyState":
        b = self.branch_in.copy()
        b[list(idx)] = False
        return replace(self, branch_in=b)

    def with_machines_out(self, idx) -> "TopologyState":
        m = self.machine_in.copy()
        m[list(idx)] = False
        return replace(self, machine_in=m)

    def with_shed(self, bus_idx, fraction_remaining) -> "TopologyState":
        s = self.shed_fraction.copy()
        s[list(bus_idx)] = fraction_remaining
        return replace(self, shed_fraction=s)

    def with_nodes_out(self, case, bus_idx) -> "TopologyState":
        """Remove buses together with their machines, loads and incident branches."""
        bus_idx = set(int(i) for i in bus_idx)
        ids = {case.buses[i].id for i in bus_idx}
        b_in = self.bus_in.copy()
        b_in[list(bus_idx)] = False
        br = self.branch_in.copy()
        for j, branch in enumerate(case.branches):
            if branch.from_bus in ids or branch.to_bus in ids:
                br[j] = False
        m = self.machine_in.copy()
        for k, mach in enumerate(case.machines):
            if mach.bus in ids:
                m[k] = False
        s = self.shed_fraction.copy()
        s[list(bus_idx)] = 0.0
        return TopologyState(br, m, b_in, s)

    def fingerprint(self) -> tuple:
        return (self.branch_in.tobytes(), self.machine_in.tobytes(), self.bus_in.tobytes())


@dataclass(frozen=True)
class AdmittanceMatrix:
    Y: csr_matrix
    Y_N: csr_matrix


def real_form(Y) -> csr_matrix:
    """Expand complex ``Y = G + jB`` into ``[[G, -B], [B, G]]``."""
    G = csr_matrix(Y.real)
    B = csr_matrix(Y.imag)
    return bmat([[G, -B], [B, G]], format="csr")


def branch_admittances(case):
    """Per-branch (y_ff, y_ft, y_tf, y_tt) of the pi model, without taps."""
    ys = np.array([1.0 / complex(br.r, br.x) for br in case.branches], dtype=complex)
    bc = np.array([br.b_charging for br in case.branches])
    y_ff = ys + 0.5j * bc
    return y_ff, -ys, -ys, y_ff.copy()


def build_ybus(case, topo: TopologyState) -> AdmittanceMatrix:
    n = case.n_buses
    idx = case.bus_index()
    f = np.array([idx[br.from_bus] for br in case.branches], dtype=int)
    t = np.array([idx[br.to_bus] for br in case.branches], dtype=int)
    y_ff, y_ft, y_tf, y_tt = branch_admittances(case)
    on = topo.branch_in.astype(float)
    rows = np.concatenate([f, f, t, t])
    cols = np.concatenate([f, t, f, t])
    vals = np.concatenate([y_ff * on, y_ft * on, y_tf * on, y_tt * on])
    shunt = np.array([complex(b.g_shunt, b.b_shunt) for b in case.buses]) * topo.bus_in
    rows = np.concatenate([rows, np.arange(n)])
    cols = np.concatenate([cols, np.arange(n)])
    vals = np.concatenate([vals, shunt])
    Y = coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    Y.sum_duplicates()
    return AdmittanceMatrix(Y=Y, Y_N=real_form(Y))


def trip_branch_update(case, Y: csr_matrix, branch: int) -> csr_matrix:
    """Remove one branch's contribution from an existing Y (4 entries change)."""
    idx = case.bus_index()
    br = case.branches[branch]
    f, t = idx[br.from_bus], idx[br.to_bus]
    ys = 1.0 / complex(br.r, br.x)
    y_ff = ys + 0.5j * br.b_charging
    delta = coo_matrix(([-y_ff, ys, ys, -y_ff], ([f, f, t, t], [f, t, f, t])), shape=Y.shape)
    out = (Y + delta).tocsr()
    out.sum_duplicates()
    return out


def real_form_multiply_check(Y, v_complex: np.ndarray) -> np.ndarray:
    """Return ``Y_N @ [re(v); im(v)]`` computed through the real-form expansion."""
    v_complex = np.asarray(v_complex, dtype=complex)
    return real_form(Y) @ np.concatenate([v_complex.real, v_complex.imag])


@dataclass(frozen=True)
class Island:
    buses: tuple[int, ...]
    branches: tuple[int, ...]
    machines: tuple[int, ...]

    @property
    def has_generation(self) -> bool:
        return len(self.machines) > 0


@dataclass(frozen=True)
class IslandPartition:
    islands: tuple[Island, ...]
    parent_island: int | None = None
    bus_island: np.ndarray = field(default=None, repr=False)

    def energized(self) -> list[int]:
        return [k for k, isl in enumerate(self.islands) if isl.has_generation]


def find_islands(case, topo: TopologyState) -> IslandPartition:
    """Connected components over in-service branches among in-service buses.

    Islands are ordered by their smallest bus index so the partition is
    deterministic. Machine-less islands have ``has_generation == False``.
    """
    n = case.n_buses
    idx = case.bus_index()
    f = np.array([idx[br.from_bus] for br in case.branches], dtype=int)
    t = np.array([idx[br.to_bus] for br in case.branches], dtype=int)
    on = topo.branch_in & topo.bus_in[f] & topo.bus_in[t] if len(f) else np.zeros(0, dtype=bool)
    adj = csr_matrix((np.ones(int(on.sum())), (f[on], t[on])), shape=(n, n))
    _, labels = connected_components(adj, directed=False)
    live = np.flatnonzero(topo.bus_in)
    groups: dict[int, list[int]] = {}
    for b in live:
        groups.setdefault(int(labels[b]), []).append(int(b))
    mbus = np.array([idx[m.bus] for m in case.machines], dtype=int)
    ordered = sorted(groups.values(), key=min)
    bus_island = np.full(n, -1, dtype=int)
    islands = []
    for k, buses in enumerate(ordered):
        bus_island[buses] = k
    for k, buses in enumerate(ordered):
        branches = tuple(int(j) for j in np.flatnonzero(on) if bus_island[f[j]] == k)
        machines = tuple(int(j) for j in range(len(mbus)) if topo.machine_in[j] and bus_island[mbus[j]] == k)
        islands.append(Island(buses=tuple(buses), branches=branches, machines=machines))
    return IslandPartition(islands=tuple(islands), bus_island=bus_island)
