"""Static case data, synthetic dynamic parameters and the initializing power flow.

Two input formats are understood:

* the native versioned JSON schema written by :func:`dump_case`;
* MATPOWER-style table files (``mpc.bus = [...]`` blocks of whitespace
  separated rows), of which only the standard bus/gen/branch columns are read.

Electrical quantities are per-unit on ``base_mva`` except bus loads and
machine set-points, which are kept in MW / MVAr as in the source tables.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import asdict, dataclass, field, replace
from importlib import resources

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import spsolve

from cascadesim.protection import RelayConfig

CASE_FORMAT = "cascadesim-case"
CASE_VERSION = 1
BUS_KINDS = ("slack", "PV", "PQ")


class CaseError(ValueError):
    """Base class for problems with case data."""


class CaseParseError(CaseError):
    """Syntax error; message carries the line (and field) that failed."""


class CaseValidationError(CaseError):
    """Semantically inconsistent case (dangling references, bad values)."""


class PowerFlowError(RuntimeError):
    def __init__(self, message, solution):
        super().__init__(message)
        self.solution = solution


@dataclass(frozen=True)
class BusRecord:
    id: int
    kind: str
    p_load: float = 0.0
    q_load: float = 0.0
    g_shunt: float = 0.0
    b_shunt: float = 0.0
    base_kv: float = 0.0
    vm0: float = 1.0
    va0: float = 0.0


@dataclass(frozen=True)
class BranchRecord:
    id: int
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_charging: float = 0.0
    current_limit: float = math.inf
    status: str = "in"


@dataclass(frozen=True)
class GovernorParams:
    r_droop: float
    t_g: float


@dataclass(frozen=True)
class ExciterParams:
    k_a: float
    t_a: float
    efd_min: float
    efd_max: float


@dataclass(frozen=True)
class MachineParams:
    """Two-axis machine with static exciter and (for generators) a governor.

    Dynamic quantities are on the system base. ``p_gen``/``q_gen`` are the
    scheduled set-points in MW/MVAr and ``rating_mva`` the machine rating.
    """

    bus: int
    H: float
    D: float
    xd: float
    xq: float
    xd_p: float
    xq_p: float
    td0_p: float
    tq0_p: float
    exciter: ExciterParams
    governor: GovernorParams | None
    is_condenser: bool = False
    p_gen: float = 0.0
    q_gen: float = 0.0
    v_set: float = 1.0
    rating_mva: float = 100.0


@dataclass(frozen=True)
class CaseDefinition:
    base_mva: float
    buses: tuple[BusRecord, ...]
    branches: tuple[BranchRecord, ...]
    machines: tuple[MachineParams, ...]
    f_nominal: float = 60.0
    relay_config: RelayConfig = field(default_factory=RelayConfig)
    name: str = ""

    def bus_index(self) -> dict[int, int]:
        return {b.id: i for i, b in enumerate(self.buses)}

    @property
    def n_buses(self) -> int:
        return len(self.buses)

    @property
    def n_branches(self) -> int:
        return len(self.branches)

    @property
    def n_machines(self) -> int:
        return len(self.machines)


@dataclass
class PowerFlowSolution:
    vm: np.ndarray
    va: np.ndarray
    p_gen: np.ndarray
    q_gen: np.ndarray
    converged: bool
    mismatch_inf_norm: float
    iterations: int = 0

    @property
    def v_complex(self) -> np.ndarray:
        return self.vm * np.exp(1j * self.va)


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

def validate_case(case: CaseDefinition) -> CaseDefinition:
    if not case.base_mva > 0:
        raise CaseValidationError(f"base_mva must be positive, got {case.base_mva}")
    if not case.f_nominal > 0:
        raise CaseValidationError(f"f_nominal must be positive, got {case.f_nominal}")
    ids = [b.id for b in case.buses]
    if len(set(ids)) != len(ids):
        raise CaseValidationError("duplicate bus ids")
    known = set(ids)
    for b in case.buses:
        if b.kind not in BUS_KINDS:
            raise CaseValidationError(f"bus {b.id}: unknown kind {b.kind!r}")
        if not b.vm0 > 0:
            raise CaseValidationError(f"bus {b.id}: vm0 must be positive")
        if not (math.isfinite(b.p_load) and math.isfinite(b.q_load)):
            raise CaseValidationError(f"bus {b.id}: load must be finite")
    for br in case.branches:
        for end in (br.from_bus, br.to_bus):
            if end not in known:
                raise CaseValidationError(f"branch {br.id}: references unknown bus {end}")
        if br.from_bus == br.to_bus:
            raise CaseValidationError(f"branch {br.id}: from_bus equals to_bus")
        if br.r == 0 and br.x == 0:
            raise CaseValidationError(f"branch {br.id}: zero impedance")
        if not br.current_limit > 0:
            raise CaseValidationError(f"branch {br.id}: current limit must be positive")
        if br.status not in ("in", "out"):
            raise CaseValidationError(f"branch {br.id}: status must be 'in' or 'out'")
    for k, m in enumerate(case.machines):
        if m.bus not in known:
            raise CaseValidationError(f"machine {k + 1}: references unknown bus {m.bus}")
        if not m.H > 0:
            raise CaseValidationError(f"machine {k + 1}: H must be positive")
        if not (m.td0_p > 0 and m.tq0_p > 0 and m.exciter.t_a > 0):
            raise CaseValidationError(f"machine {k + 1}: time constants must be positive")
        if not (m.xd >= m.xd_p > 0 and m.xq >= m.xq_p > 0):
            raise CaseValidationError(f"machine {k + 1}: reactances violate xd >= xd' > 0")
        if m.is_condenser and m.governor is not None:
            raise CaseValidationError(f"machine {k + 1}: condensers carry no governor")
        if m.governor is not None and not m.governor.t_g > 0:
            raise CaseValidationError(f"machine {k + 1}: governor time constant must be positive")
    return case


# ---------------------------------------------------------------------------
# native JSON
# ---------------------------------------------------------------------------

def _finite_or_none(v: float):
    return v if math.isfinite(v) else None


def case_to_dict(case: CaseDefinition) -> dict:
    branches = []
    for br in case.branches:
        d = asdict(br)
        d["current_limit"] = _finite_or_none(br.current_limit)
        branches.append(d)
    return {
        "format": CASE_FORMAT,
        "version": CASE_VERSION,
        "name": case.name,
        "base_mva": case.base_mva,
        "f_nominal": case.f_nominal,
        "buses": [asdict(b) for b in case.buses],
        "branches": branches,
        "machines": [asdict(m) for m in case.machines],
        "relays": case.relay_config.to_dict(),
    }


def dump_case(case: CaseDefinition) -> str:
    return json.dumps(case_to_dict(case), indent=1)


def _build(cls, data: dict, where: str):
    try:
        return cls(**data)
    except TypeError as exc:
        raise CaseParseError(f"{where}: {exc}") from None


def case_from_dict(data: dict) -> CaseDefinition:
    if data.get("format", CASE_FORMAT) != CASE_FORMAT:
        raise CaseParseError(f"unsupported format tag {data.get('format')!r}")
    if data.get("version", CASE_VERSION) != CASE_VERSION:
        raise CaseParseError(f"unsupported case version {data.get('version')!r}")
    for key in ("base_mva", "buses", "branches"):
        if key not in data:
            raise CaseParseError(f"missing top-level field {key!r}")
    buses = tuple(_build(BusRecord, b, f"buses[{i}]") for i, b in enumerate(data["buses"]))
    branches = []
    for i, b in enumerate(data["branches"]):
        b = dict(b)
        b.setdefault("status", "in")
        if b.get("current_limit") is None:
            b["current_limit"] = math.inf
        branches.append(_build(BranchRecord, b, f"branches[{i}]"))
    machines = []
    for i, m in enumerate(data.get("machines", [])):
        m = dict(m)
        try:
            m["exciter"] = ExciterParams(**m["exciter"])
            m["governor"] = GovernorParams(**m["governor"]) if m.get("governor") else None
        except (KeyError, TypeError) as exc:
            raise CaseParseError(f"machines[{i}]: {exc}") from None
        machines.append(_build(MachineParams, m, f"machines[{i}]"))
    try:
        relays = RelayConfig.from_dict(data.get("relays"))
    except (TypeError, ValueError) as exc:
        raise CaseParseError(f"relays: {exc}") from None
    case = CaseDefinition(
        base_mva=float(data["base_mva"]),
        f_nominal=float(data.get("f_nominal", 60.0)),
        buses=buses,
        branches=tuple(branches),
        machines=tuple(machines),
        relay_config=relays,
        name=data.get("name", ""),
    )
    return validate_case(case)


# ---------------------------------------------------------------------------
# MATPOWER-style tables
# ---------------------------------------------------------------------------

_BLOCK_RE = re.compile(r"mpc\.(\w+)\s*=\s*\[(.*?)\]\s*;?", re.DOTALL)
_SCALAR_RE = re.compile(r"mpc\.baseMVA\s*=\s*([-+0-9.eE]+)\s*;")
_DEFAULT_EXCITER = ExciterParams(k_a=100.0, t_a=0.02, efd_min=-5.0, efd_max=7.0)


def _parse_block(text: str, body: str, start: int, name: str) -> list[list[float]]:
    rows = []
    line = text.count("\n", 0, start) + 1
    for raw in body.split("\n"):
        content = raw.split("%", 1)[0]
        for chunk in content.split(";"):
            toks = chunk.split()
            if not toks:
                continue
            try:
                rows.append([float(t) for t in toks])
            except ValueError:
                bad = next(t for t in toks if not _is_number(t))
                raise CaseParseError(f"line {line}: mpc.{name}: non-numeric field {bad!r}") from None
        line += 1
    return rows


def _is_number(tok: str) -> bool:
    try:
        float(tok)
    except ValueError:
        return False
    return True


def _machine_rating(mbase: float, pmax: float, pg: float, qmax: float = 0.0, qmin: float = 0.0) -> float:
    """MVA rating covering the real-power range and the symmetric reactive range."""
    return max(mbase, pmax, abs(pg) / 0.9, min(abs(qmax), abs(qmin)), 1.0)


def default_machine(bus: int, base_mva: float, rating: float, p_gen: float, q_gen: float,
                    v_set: float, is_condenser: bool) -> MachineParams:
    """Mid-range parameters; :func:`synthesize_dynamics` replaces them."""
    s = rating / base_mva
    return MachineParams(
        bus=bus,
        H=4.5 * s,
        D=1.0 * s,
        xd=1.6 / s,
        xq=0.9 * 1.6 / s,
        xd_p=0.25 / s,
        xq_p=0.25 / s,
        td0_p=6.0,
        tq0_p=1.0,
        exciter=_DEFAULT_EXCITER,
        governor=None if is_condenser else GovernorParams(r_droop=0.05 / s, t_g=0.45),
        is_condenser=is_condenser,
        p_gen=p_gen,
        q_gen=q_gen,
        v_set=v_set,
        rating_mva=rating,
    )


def parse_matpower(text: str, name: str = "") -> CaseDefinition:
    m = _SCALAR_RE.search(text)
    if not m:
        raise CaseParseError("line 1: missing mpc.baseMVA")
    base = float(m.group(1))
    blocks = {}
    for bm in _BLOCK_RE.finditer(text):
        blocks[bm.group(1)] = _parse_block(text, bm.group(2), bm.start(2), bm.group(1))
    for key in ("bus", "gen", "branch"):
        if key not in blocks:
            raise CaseParseError(f"missing mpc.{key} table")

    kinds = {1: "PQ", 2: "PV", 3: "slack"}
    gen_rows = [r for r in blocks["gen"] if len(r) < 8 or r[7] > 0]
    gen_buses = {int(r[0]) for r in gen_rows}
    buses = []
    for i, r in enumerate(blocks["bus"]):
        if len(r) < 10:
            raise CaseParseError(f"mpc.bus row {i + 1}: expected at least 10 columns")
        code = int(r[1])
        if code not in kinds:
            raise CaseValidationError(f"bus {int(r[0])}: unsupported bus type {code}")
        kind = kinds[code]
        if kind == "PV" and int(r[0]) not in gen_buses:
            kind = "PQ"
        buses.append(BusRecord(
            id=int(r[0]), kind=kind, p_load=r[2], q_load=r[3],
            g_shunt=r[4] / base, b_shunt=r[5] / base, base_kv=r[9],
            vm0=r[7] if r[7] > 0 else 1.0, va0=r[8],
        ))
    slack_ids = {b.id for b in buses if b.kind == "slack"}
    machines = []
    for i, r in enumerate(gen_rows):
        if len(r) < 10:
            raise CaseParseError(f"mpc.gen row {i + 1}: expected at least 10 columns")
        bus, pg, qg, qmax, qmin, vg, mbase, pmax = int(r[0]), r[1], r[2], r[3], r[4], r[5], r[6], r[8]
        condenser = abs(pg) < 1e-9 and bus not in slack_ids
        rating = _machine_rating(mbase, pmax, pg, qmax, qmin)
        machines.append(default_machine(bus, base, rating, pg, qg, vg, condenser))
    branches = []
    for i, r in enumerate(blocks["branch"]):
        if len(r) < 11:
            raise CaseParseError(f"mpc.branch row {i + 1}: expected at least 11 columns")
        rate = r[5]
        branches.append(BranchRecord(
            id=i + 1, from_bus=int(r[0]), to_bus=int(r[1]), r=r[2], x=r[3], b_charging=r[4],
            current_limit=rate / base if rate > 0 else math.inf,
            status="in" if r[10] > 0 else "out",
        ))
    case = CaseDefinition(base_mva=base, buses=tuple(buses), branches=tuple(branches),
                          machines=tuple(machines), name=name)
    return validate_case(case)


def parse_case(text: str, name: str = "") -> CaseDefinition:
    """Parse case text in either the native JSON or the MATPOWER table format."""
    stripped = text.lstrip()
    if stripped.startswith("{"):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise CaseParseError(f"line {exc.lineno} column {exc.colno}: {exc.msg}") from None
        case = case_from_dict(data)
        return replace(case, name=case.name or name)
    return parse_matpower(text, name=name)


def load_case_file(path) -> CaseDefinition:
    from pathlib import Path

    p = Path(path)
    return parse_case(p.read_text(), name=p.stem)


BUILTIN_CASES = ("case9", "case39", "case118", "smib")


def load_builtin_case(name: str) -> CaseDefinition:
    if name == "smib":
        return make_smib_case()
    if name not in BUILTIN_CASES:
        raise KeyError(f"unknown built-in case {name!r}; choose from {BUILTIN_CASES}")
    text = resources.files("cascadesim.data").joinpath(f"{name}.m").read_text()
    return parse_case(text, name=name)


def make_smib_case(p_gen: float = 90.0, x_line: float = 0.5, h_source: float = 1000.0) -> CaseDefinition:
    """Single machine against a stiff source through a double-circuit line.

    Bus 1 holds a very large machine standing in for the infinite bus; bus 2
    the studied generator, bus 3 its terminal load-free high-voltage node.
    """
    base = 100.0
    buses = (
        BusRecord(id=1, kind="slack", vm0=1.0),
        BusRecord(id=2, kind="PV", vm0=1.0),
        BusRecord(id=3, kind="PQ"),
    )
    branches = (
        BranchRecord(id=1, from_bus=2, to_bus=3, r=0.0, x=0.15),
        BranchRecord(id=2, from_bus=3, to_bus=1, r=0.0, x=x_line),
        BranchRecord(id=3, from_bus=3, to_bus=1, r=0.0, x=x_line),
    )
    gen = MachineParams(
        bus=2, H=3.5, D=0.0, xd=1.8, xq=1.7, xd_p=0.3, xq_p=0.3, td0_p=8.0, tq0_p=0.4,
        exciter=ExciterParams(k_a=20.0, t_a=0.05, efd_min=-5.0, efd_max=7.0),
        governor=None, is_condenser=False, p_gen=p_gen, q_gen=0.0, v_set=1.0, rating_mva=100.0,
    )
    source = MachineParams(
        bus=1, H=h_source, D=0.0, xd=0.002, xq=0.002, xd_p=0.001, xq_p=0.001, td0_p=8.0, tq0_p=1.0,
        exciter=ExciterParams(k_a=50.0, t_a=0.02, efd_min=-50.0, efd_max=50.0),
        governor=GovernorParams(r_droop=0.0005, t_g=0.5), is_condenser=False,
        p_gen=-p_gen, q_gen=0.0, v_set=1.0, rating_mva=10000.0,
    )
    return validate_case(CaseDefinition(base_mva=base, buses=buses, branches=branches,
                                        machines=(source, gen), name="smib"))


# ---------------------------------------------------------------------------
# synthetic dynamic data
# ---------------------------------------------------------------------------

def synthesize_dynamics(case: CaseDefinition, seed: int, damping_overrides: dict | None = None,
                        base_damping: float | None = None) -> CaseDefinition:
    """Draw machine parameters from fixed physical ranges.

    Ranges apply on the machine's own rating and are converted to the system
    base. ``damping_overrides`` maps 1-based machine numbers to a damping
    value on the machine base (negative values inject negative damping).
    ``base_damping``, when given, replaces the random damping draw.
    """
    rng = np.random.default_rng(seed)
    overrides = {int(k): float(v) for k, v in (damping_overrides or {}).items()}
    for k in overrides:
        if not 1 <= k <= case.n_machines:
            raise KeyError(f"damping override for unknown machine G{k}")
    out = []
    for k, m in enumerate(case.machines, start=1):
        s = m.rating_mva / case.base_mva
        h, xd, xdp, td0, tq0, d, ka, tg = (
            rng.uniform(2.5, 6.5), rng.uniform(1.0, 2.3), rng.uniform(0.15, 0.4),
            rng.uniform(4.0, 9.0), rng.uniform(0.5, 1.5), rng.uniform(2.0, 4.0),
            rng.uniform(20.0, 80.0), rng.uniform(0.2, 0.7),
        )
        if base_damping is not None:
            d = base_damping
        d = overrides.get(k, d)
        out.append(replace(
            m,
            H=h * s, D=d * s,
            xd=xd / s, xq=0.9 * xd / s, xd_p=xdp / s, xq_p=xdp / s,
            td0_p=td0, tq0_p=tq0,
            exciter=ExciterParams(k_a=ka, t_a=0.02, efd_min=m.exciter.efd_min, efd_max=m.exciter.efd_max),
            governor=None if m.is_condenser else GovernorParams(r_droop=0.05 / s, t_g=tg),
        ))
    return replace(case, machines=tuple(out))


def set_damping(case: CaseDefinition, overrides: dict) -> CaseDefinition:
    """Replace machine damping (machine-base pu, keyed by 1-based number)."""
    machines = list(case.machines)
    for k, d in overrides.items():
        m = machines[int(k) - 1]
        machines[int(k) - 1] = replace(m, D=float(d) * m.rating_mva / case.base_mva)
    return replace(case, machines=tuple(machines))


# ---------------------------------------------------------------------------
# power flow
# ---------------------------------------------------------------------------

def _dS_dV(Y, V):
    """Partial derivatives of complex bus injections w.r.t. angle and magnitude."""
    from scipy.sparse import diags

    I = Y @ V
    dV = diags(V)
    dI = diags(I)
    dVn = diags(V / np.abs(V))
    dS_dVa = 1j * dV @ (dI - Y @ dV).conj()
    dS_dVm = dV @ (Y @ dVn).conj() + dI.conj() @ dVn
    return dS_dVa, dS_dVm


def solve_power_flow(case: CaseDefinition, tol: float = 1e-8, max_iter: int = 30,
                     raise_on_fail: bool = True) -> PowerFlowSolution:
    """Full Newton power flow in polar coordinates.

    Generator reactive limits are not enforced; PV buses hold the machine
    voltage set-point.
    """
    from scipy.sparse import bmat

    from cascadesim.network import TopologyState, build_ybus

    topo = TopologyState.all_in(case)
    Y = build_ybus(case, topo).Y.tocsr()
    n = case.n_buses
    idx = case.bus_index()
    kinds = np.array([b.kind for b in case.buses])

    n_comp, labels = connected_components(_live_adjacency(case, idx), directed=False)
    for c in range(n_comp):
        if np.count_nonzero((labels == c) & (kinds == "slack")) != 1:
            raise CaseValidationError(f"connected component {c} must contain exactly one slack bus")

    p_sched = np.array([-b.p_load for b in case.buses]) / case.base_mva
    q_sched = np.array([-b.q_load for b in case.buses]) / case.base_mva
    vm = np.array([b.vm0 for b in case.buses], dtype=float)
    va = np.deg2rad([b.va0 for b in case.buses])
    for m in case.machines:
        i = idx[m.bus]
        p_sched[i] += m.p_gen / case.base_mva
        if kinds[i] != "PQ":
            vm[i] = m.v_set

    pv = np.flatnonzero(kinds == "PV")
    pq = np.flatnonzero(kinds == "PQ")
    pvpq = np.concatenate([pv, pq])
    s_sched = p_sched + 1j * q_sched

    def mismatch(V):
        mis = V * np.conj(Y @ V) - s_sched
        return np.concatenate([mis.real[pvpq], mis.imag[pq]])

    V = vm * np.exp(1j * va)
    F = mismatch(V)
    norm = float(np.max(np.abs(F))) if F.size else 0.0
    it = 0
    while norm > tol and it < max_iter:
        it += 1
        dSa, dSm = _dS_dV(Y, V)
        J = bmat([
            [dSa[pvpq][:, pvpq].real, dSm[pvpq][:, pq].real],
            [dSa[pq][:, pvpq].imag, dSm[pq][:, pq].imag],
        ], format="csc")
        dx = spsolve(J, -F)
        if not np.all(np.isfinite(dx)):
            break
        va = np.angle(V)
        vm = np.abs(V)
        va[pvpq] += dx[: len(pvpq)]
        vm[pq] += dx[len(pvpq):]
        V = vm * np.exp(1j * va)
        F = mismatch(V)
        norm = float(np.max(np.abs(F))) if F.size else 0.0
        if not np.isfinite(norm):
            break

    converged = bool(np.isfinite(norm) and norm <= tol)
    s_bus = V * np.conj(Y @ V)
    p_gen, q_gen = _split_generation(case, idx, s_bus)
    sol = PowerFlowSolution(vm=np.abs(V), va=np.angle(V), p_gen=p_gen, q_gen=q_gen,
                            converged=converged, mismatch_inf_norm=norm, iterations=it)
    if not converged and raise_on_fail:
        raise PowerFlowError(f"power flow did not converge after {it} iterations "
                             f"(mismatch {norm:.3e} pu)", sol)
    return sol


def _live_adjacency(case, idx):
    rows, cols = [], []
    for br in case.branches:
        if br.status == "in":
            rows += [idx[br.from_bus], idx[br.to_bus]]
            cols += [idx[br.to_bus], idx[br.from_bus]]
    n = case.n_buses
    return csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))


def _split_generation(case, idx, s_bus):
    """Allocate bus generation among the machines connected there.

    Real power is the scheduled set-point except at slack buses; reactive
    power (and slack real power) is shared in proportion to rating.
    """
    base = case.base_mva
    n_m = case.n_machines
    p_gen = np.zeros(n_m)
    q_gen = np.zeros(n_m)
    by_bus: dict[int, list[int]] = {}
    for k, m in enumerate(case.machines):
        by_bus.setdefault(idx[m.bus], []).append(k)
    for i, ks in by_bus.items():
        b = case.buses[i]
        p_tot = s_bus[i].real + b.p_load / base
        q_tot = s_bus[i].imag + b.q_load / base
        ratings = np.array([case.machines[k].rating_mva for k in ks])
        share = ratings / ratings.sum()
        if b.kind == "slack":
            p_gen[ks] = p_tot * share
        else:
            p_gen[ks] = [case.machines[k].p_gen / base for k in ks]
        q_gen[ks] = q_tot * share
    return p_gen, q_gen


def assign_line_limits(case: CaseDefinition, pf: PowerFlowSolution, factor: float,
                       floor: float = 0.0) -> CaseDefinition:
    """Set every branch limit to ``factor`` times its initial current (pu),
    but never below ``floor``."""
    V = pf.v_complex
    idx = case.bus_index()
    out = []
    for br in case.branches:
        f, t = idx[br.from_bus], idx[br.to_bus]
        ys = 1.0 / complex(br.r, br.x)
        i_f = (ys + 0.5j * br.b_charging) * V[f] - ys * V[t]
        i_t = (ys + 0.5j * br.b_charging) * V[t] - ys * V[f]
        i0 = max(abs(i_f), abs(i_t))
        out.append(replace(br, current_limit=max(factor * i0, floor, 1e-6)))
    return replace(case, branches=tuple(out))
