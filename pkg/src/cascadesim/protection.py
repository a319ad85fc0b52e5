"""Relay models: overcurrent, undervoltage load shedding, out-of-step, SPS.

Relays observe the simulated trajectory on a fixed measurement grid so the
content of every averaging window is independent of the integration step.
Each accepted step hands the relay bank the line-current and bus-voltage
magnitudes at both ends of the step; grid samples inside the step are
linearly interpolated.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

# Deterministic tie-break between events scheduled at the same instant.
EVENT_KIND_ORDER = {
    "initial_node_outage": 0,
    "sps_trip": 1,
    "machine_trip_oos": 2,
    "line_trip": 3,
    "uvls_shed": 4,
    "island_collapse": 5,
    "island_split": 6,
}

_TIME_EPS = 1e-9


@dataclass(frozen=True)
class RelayConfig:
    t_w_oc: float = 1.0
    t_w_uvls: float = 3.0
    t_tp_uvls: float = 3.0
    lambda_shed: float = 0.25
    v_th: float = 0.8645
    k_shed_max: int = 5
    oc_freeze_after_event: float = 1.0
    out_of_step_angle_th: float = math.pi
    sps_delay: float = 7.5
    measurement_dt: float = 0.02

    def __post_init__(self):
        for name in ("t_w_oc", "t_w_uvls", "t_tp_uvls", "measurement_dt", "out_of_step_angle_th"):
            if not getattr(self, name) > 0:
                raise ValueError(f"relay setting {name} must be positive")
        if self.sps_delay < 0 or self.oc_freeze_after_event < 0:
            raise ValueError("relay delays must be non-negative")
        if not 0 < self.lambda_shed <= 1:
            raise ValueError("lambda_shed must lie in (0, 1]")
        if self.k_shed_max < 1:
            raise ValueError("k_shed_max must be at least 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict | None) -> "RelayConfig":
        if not data:
            return cls()
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown relay settings: {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class Event:
    """A discrete change applied to the grid at time ``t``.

    ``targets`` are 0-based element positions in the case, except for
    ``initial_node_outage`` and ``island_split`` which name bus ids.
    """

    t: float
    kind: str
    targets: tuple[int, ...]
    tier: int = -1
    island: int | None = None
    source: str = "relay"

    def sort_key(self):
        return (round(self.t, 9), EVENT_KIND_ORDER[self.kind], self.targets)

    def to_json_dict(self) -> dict:
        return {
            "t": self.t,
            "tier": self.tier,
            "kind": self.kind,
            "targets": list(self.targets),
            "island": self.island,
        }


def sort_events(events):
    return sorted(events, key=Event.sort_key)


def oc_trip_delay(ratio: float) -> float:
    """Inverse-time overcurrent delay for current/limit ``ratio``.

    Returns ``inf`` at or below pickup, where the characteristic is undefined.
    """
    if not ratio > 1.0:
        return math.inf
    return 0.14 / (ratio**0.02 - 1.0)


@dataclass
class OCRelayBank:
    """Per-line inverse-time overcurrent relays with window averaging.

    A started countdown accumulates progress ``elapsed / delay`` at each
    window update; the delay itself is refreshed from the latest window
    average, so the trip instant tracks a changing overload.
    """

    limits: np.ndarray
    active: np.ndarray = field(init=False)
    progress: np.ndarray = field(init=False)
    delay: np.ndarray = field(init=False)
    last_update: np.ndarray = field(init=False)
    trip_time: np.ndarray = field(init=False)
    acc_sum: np.ndarray = field(init=False)
    acc_count: int = 0

    def __post_init__(self):
        n = len(self.limits)
        self.active = np.zeros(n, dtype=bool)
        self.progress = np.zeros(n)
        self.delay = np.full(n, math.inf)
        self.last_update = np.zeros(n)
        self.trip_time = np.full(n, math.inf)
        self.acc_sum = np.zeros(n)

    def add_sample(self, current_mag: np.ndarray):
        self.acc_sum += current_mag
        self.acc_count += 1

    def window_update(self, t: float, in_service: np.ndarray, frozen: bool):
        """Close the current averaging window at ``t`` and refresh countdowns."""
        if self.acc_count == 0:
            return
        avg = self.acc_sum / self.acc_count
        self.acc_sum[:] = 0.0
        self.acc_count = 0
        if frozen:
            # Pre-event delays stay in force; countdowns neither start nor stop.
            return
        update_oc(self, avg, t, in_service)

    def cancel(self, idx):
        self.active[idx] = False
        self.progress[idx] = 0.0
        self.delay[idx] = math.inf
        self.trip_time[idx] = math.inf


def update_oc(bank: OCRelayBank, avg_current: np.ndarray, t: float, in_service: np.ndarray):
    """Apply one window update of averaged line currents at time ``t``."""
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(np.isfinite(bank.limits), avg_current / bank.limits, 0.0)
    overloaded = (ratio > 1.0) & in_service
    for i in np.flatnonzero(overloaded):
        new_delay = oc_trip_delay(float(ratio[i]))
        if bank.active[i]:
            bank.progress[i] += (t - bank.last_update[i]) / bank.delay[i]
        else:
            bank.active[i] = True
            bank.progress[i] = 0.0
        bank.delay[i] = new_delay
        bank.last_update[i] = t
        bank.trip_time[i] = t + max(0.0, 1.0 - bank.progress[i]) * new_delay
    cleared = bank.active & ~overloaded
    if cleared.any():
        bank.cancel(cleared)


@dataclass
class UVLSRelayBank:
    """Per-bus undervoltage load shedding with a rolling average window."""

    n_buses: int
    window_samples: int
    eligible: np.ndarray
    buffer: np.ndarray = field(init=False)
    filled: int = 0
    pos: int = 0
    active: np.ndarray = field(init=False)
    fire_time: np.ndarray = field(init=False)
    shed_count: np.ndarray = field(init=False)

    def __post_init__(self):
        self.buffer = np.ones((self.n_buses, self.window_samples))
        self.active = np.zeros(self.n_buses, dtype=bool)
        self.fire_time = np.full(self.n_buses, math.inf)
        self.shed_count = np.zeros(self.n_buses, dtype=int)

    def window_average(self) -> np.ndarray:
        if self.filled == 0:
            return np.ones(self.n_buses)
        return self.buffer[:, : self.filled].mean(axis=1) if self.filled < self.window_samples else self.buffer.mean(axis=1)


def update_uvls(bank: UVLSRelayBank, v_mag: np.ndarray, t: float, cfg: RelayConfig, bus_live: np.ndarray):
    """Push one voltage sample taken at ``t`` and start or cancel countdowns."""
    bank.buffer[:, bank.pos] = v_mag
    bank.pos = (bank.pos + 1) % bank.window_samples
    bank.filled = min(bank.filled + 1, bank.window_samples)
    avg = bank.window_average()
    can_shed = bank.eligible & bus_live & (bank.shed_count < cfg.k_shed_max)
    low = (avg < cfg.v_th) & can_shed
    start = low & ~bank.active
    bank.active[start] = True
    bank.fire_time[start] = t + cfg.t_tp_uvls
    stop = bank.active & ~low
    bank.active[stop] = False
    bank.fire_time[stop] = math.inf


def shed_fraction_after(count: int, lambda_shed: float) -> float:
    """Remaining load fraction after ``count`` sheds."""
    return (1.0 - lambda_shed) ** count


def check_out_of_step(theta: np.ndarray, theta_prev: np.ndarray | None, threshold: float) -> np.ndarray:
    """Indices of machines whose COI-relative angle crosses ``threshold`` while growing."""
    over = np.abs(theta) > threshold
    if theta_prev is not None:
        over &= np.abs(theta) > np.abs(theta_prev)
    return np.flatnonzero(over)


def schedule_sps(targets, t_now: float, delay: float, kind_of_target: str = "machines") -> list[Event]:
    """Queue a pre-designed protective action ``delay`` seconds after ``t_now``."""
    targets = tuple(sorted(int(k) for k in targets))
    if not targets:
        raise ValueError("SPS action needs at least one target")
    if delay < 0:
        raise ValueError("SPS delay must be non-negative")
    kind = "sps_trip" if kind_of_target == "machines" else "line_trip"
    return [Event(t=t_now + delay, kind=kind, targets=targets, source="sps")]


@dataclass(frozen=True)
class GrowingOscillation:
    group: int
    machines: tuple[int, ...]  # ranked by swing amplitude in the latest window
    start: float  # start of the first window of the growing run
    rms: float


@dataclass
class OscillationDetector:
    """Measurement-based growing-oscillation detector on machine speeds.

    Per island, the inertia-weighted kinetic energy of machine motion
    relative to the island COI is tracked as its maximum over consecutive
    windows. Electromechanical modes are close to inertia-orthogonal, so
    the windowed energy of decaying swings falls from window to window even
    when several modes beat. A rise by ``growth`` over ``windows``
    consecutive windows flags an unstable oscillation. The first ``skip``
    windows after a reset hold the disturbance itself and are ignored.
    """

    H: np.ndarray
    window: float = 1.5
    windows: int = 3
    growth: float = 1.05
    floor: float = 1e-4  # rms relative speed (pu) the latest window must reach
    skip: int = 1
    groups: list = field(default_factory=list)
    t0: float = 0.0

    def __post_init__(self):
        self.H = np.asarray(self.H, dtype=float)
        self.reset(self.t0, self.groups)

    def reset(self, t0: float, groups):
        """Start over at ``t0`` with ``groups`` of machine indices (one per island)."""
        self.t0 = float(t0)
        self.groups = [np.asarray(g, dtype=int) for g in groups if len(g) > 1]
        self._k = 0  # index of the open window
        self._emax = np.zeros(len(self.groups))
        self._amax = np.zeros(len(self.H))
        self.history = [[] for _ in self.groups]
        self.amp_history: list[np.ndarray] = []

    def _close_window(self):
        for j in range(len(self.groups)):
            self.history[j].append(self._emax[j])
        self.amp_history.append(self._amax.copy())
        self._emax[:] = 0.0
        self._amax[:] = 0.0
        self._k += 1

    def observe(self, t: float, rel_speeds: np.ndarray):
        """Feed COI-relative speeds sampled at time ``t`` (NaN if not energized)."""
        while t >= self.t0 + (self._k + 1) * self.window - 1e-9:
            self._close_window()
        w = np.nan_to_num(rel_speeds)
        np.maximum(self._amax, np.abs(w), out=self._amax)
        for j, g in enumerate(self.groups):
            e = float(self.H[g] @ (w[g] * w[g]))
            if e > self._emax[j]:
                self._emax[j] = e

    def growing(self) -> list[GrowingOscillation]:
        out = []
        n = self.windows
        for j, g in enumerate(self.groups):
            hist = self.history[j][self.skip:]
            if len(hist) < n:
                continue
            tail = hist[-n:]
            rms = float(np.sqrt(tail[-1] / self.H[g].sum()))
            if rms < self.floor:
                continue
            if all(tail[i + 1] > self.growth * tail[i] for i in range(n - 1)):
                amps = self.amp_history[-1][g]
                order = sorted(range(len(g)), key=lambda i: (-amps[i], int(g[i])))
                first = len(self.history[j]) - n
                out.append(GrowingOscillation(j, tuple(int(g[i]) for i in order), self.t0 + first * self.window, rms))
        return out
