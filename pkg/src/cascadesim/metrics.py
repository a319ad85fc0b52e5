"""Run comparison, path agreement and Monte-Carlo aggregation."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from cascadesim.engine import RUNNERS, OutageSpec, RunConfig, prepare_case

log = logging.getLogger(__name__)


@dataclass
class ComparisonReport:
    bus_status_errors: int
    machine_status_errors: int
    line_status_errors: int
    max_vm_error: float
    max_va_error_deg: float
    max_freq_error_hz: float
    R: float
    runtime_ratio: float

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def jaccard(a, b) -> float:
    a, b = set(a), set(b)
    union = a | b
    if not union:
        return 1.0
    return len(a & b) / len(union)


def path_agreement(pairs) -> float:
    """Mean Jaccard overlap of dependent outage sets over contingencies.

    ``pairs`` is a sequence of ``(A_i, B_i)`` sets. A contingency where both
    sets are empty (no dependent outages in either run) counts as agreement.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("path agreement needs at least one contingency")
    return float(np.mean([jaccard(a, b) for a, b in pairs]))


def _angle_diff_deg(a, b):
    return np.abs((np.asarray(a) - np.asarray(b) + 180.0) % 360.0 - 180.0)


def end_state_compare(run_a, run_b) -> ComparisonReport:
    """Compare two runs of the same case; ``run_a`` is the reference."""
    ea, eb = run_a.end_state, run_b.end_state
    if ea["case_fingerprint"] != eb["case_fingerprint"]:
        raise ValueError("runs were produced from different cases")
    ba = np.array(ea["bus_energized"], dtype=bool)
    bb = np.array(eb["bus_energized"], dtype=bool)
    ma = np.array(ea["machine_connected"], dtype=bool)
    mb = np.array(eb["machine_connected"], dtype=bool)
    la = np.array(ea["line_connected"], dtype=bool)
    lb = np.array(eb["line_connected"], dtype=bool)
    common = ba & bb
    if common.any():
        dv = float(np.max(np.abs(np.array(ea["bus_vm"])[common] - np.array(eb["bus_vm"])[common])))
        da = float(np.max(_angle_diff_deg(np.array(ea["bus_va_deg"])[common], np.array(eb["bus_va_deg"])[common])))
        df = float(np.max(np.abs(np.array(ea["bus_frequency_hz"])[common]
                                 - np.array(eb["bus_frequency_hz"])[common])))
    else:
        dv = da = df = 0.0
    ratio = run_a.wall_time / run_b.wall_time if run_b.wall_time > 0 else float("inf")
    return ComparisonReport(
        bus_status_errors=int(np.sum(ba != bb)),
        machine_status_errors=int(np.sum(ma != mb)),
        line_status_errors=int(np.sum(la != lb)),
        max_vm_error=dv,
        max_va_error_deg=da,
        max_freq_error_hz=df,
        R=jaccard(run_a.dependent_line_outages(), run_b.dependent_line_outages()),
        runtime_ratio=ratio,
    )


def exceedance_curve(values, grid) -> np.ndarray:
    """Fraction of cases with value > x for every x in ``grid``.

    At x = 0 this is the share of cases with any loss at all.
    """
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return np.zeros(len(grid))
    return np.array([np.mean(v > x) for x in grid])


@dataclass
class CaseOutcome:
    index: int
    nodes: tuple[int, ...]
    summaries: dict
    demand_loss_pct: dict
    dependent_lines: dict
    lines_out_pct: dict
    wall_time: dict
    share_a: float | None
    t_end: dict
    terminations: dict
    report: dict | None = None


@dataclass
class MonteCarloSummary:
    methods: tuple[str, ...]
    cases: list[CaseOutcome]
    R_values: list[float]
    grid: np.ndarray
    demand_curves: dict
    line_curves: dict
    resilient: int
    collapsed: dict
    corrected: int
    meta: dict = field(default_factory=dict)

    @property
    def mean_R(self) -> float:
        return float(np.mean(self.R_values)) if self.R_values else float("nan")

    @property
    def median_R(self) -> float:
        return float(np.median(self.R_values)) if self.R_values else float("nan")

    def runtime_ratios(self) -> np.ndarray:
        a, b = self.methods[0], self.methods[1]
        return np.array([c.wall_time[a] / c.wall_time[b] for c in self.cases])

    def as_dict(self) -> dict:
        return {
            "methods": list(self.methods),
            "n_cases": len(self.cases),
            "mean_R": self.mean_R,
            "median_R": self.median_R,
            "min_R": float(np.min(self.R_values)) if self.R_values else None,
            "resilient_cases": self.resilient,
            "collapsed_cases": self.collapsed,
            "hyperstability_corrected_cases": self.corrected,
            "grid_pct": self.grid.tolist(),
            "demand_loss_curves": {k: v.tolist() for k, v in self.demand_curves.items()},
            "line_outage_curves": {k: v.tolist() for k, v in self.line_curves.items()},
            "median_runtime_ratio": float(np.median(self.runtime_ratios())) if len(self.methods) > 1 else None,
            "meta": self.meta,
            "cases": [
                {
                    "index": c.index,
                    "nodes": list(c.nodes),
                    "demand_loss_pct": c.demand_loss_pct,
                    "lines_out_pct": c.lines_out_pct,
                    "dependent_lines": {k: sorted(v) for k, v in c.dependent_lines.items()},
                    "wall_time_s": c.wall_time,
                    "t_end": c.t_end,
                    "termination": c.terminations,
                    "subprocess_a_share": c.share_a,
                    "report": c.report,
                }
                for c in self.cases
            ],
        }


def sample_outages(case, n_cases: int, outage_count: int, seed: int, exclude=()) -> list[tuple[int, ...]]:
    """Deterministic random node-outage sets (bus ids)."""
    rng = np.random.default_rng(seed)
    ids = [b.id for b in case.buses if b.id not in set(exclude)]
    out = []
    for _ in range(n_cases):
        if outage_count == 0:
            out.append(())
            continue
        pick = rng.choice(len(ids), size=outage_count, replace=False)
        out.append(tuple(sorted(ids[i] for i in pick)))
    return out


def _run_case(args):
    prep, index, nodes, methods, config, t_out = args
    outages = OutageSpec(nodes=nodes, t=t_out)
    runs = {m: RUNNERS[m](prep, outages, config) for m in methods}
    n_lines = prep.case.n_branches
    share = None
    for m, r in runs.items():
        if m == "BEM-PC" and r.timings.get("total"):
            share = r.timings["a"] / r.timings["total"]
    report = None
    if len(methods) >= 2:
        report = end_state_compare(runs[methods[0]], runs[methods[1]]).as_dict()
    return CaseOutcome(
        index=index,
        nodes=nodes,
        summaries={m: r.summary() for m, r in runs.items()},
        demand_loss_pct={m: 100.0 * r.demand_loss_fraction() for m, r in runs.items()},
        dependent_lines={m: r.dependent_line_outages() for m, r in runs.items()},
        lines_out_pct={m: 100.0 * len(r.dependent_line_outages()) / n_lines for m, r in runs.items()},
        wall_time={m: r.wall_time for m, r in runs.items()},
        share_a=share,
        t_end={m: r.t_end for m, r in runs.items()},
        terminations={m: r.termination for m, r in runs.items()},
        report=report,
    )


def monte_carlo(case, n_cases: int, outage_count: int, seed: int, methods=("TM", "BEM-PC"),
                config: RunConfig = RunConfig(), t_outage: float = 3.0, workers: int = 0,
                grid=None, progress=None) -> MonteCarloSummary:
    """Run every method on ``n_cases`` random node-outage contingencies.

    The first method is the reference for path agreement and end-state
    comparison. Resilient cases (no dependent outage in either run) enter
    the mean agreement with value 1.
    """
    if n_cases < 1:
        raise ValueError("n_cases must be at least 1")
    for m in methods:
        if m not in RUNNERS:
            raise KeyError(f"unknown method {m!r}")
    prep = prepare_case(case)
    outages = sample_outages(case, n_cases, outage_count, seed)
    jobs = [(prep, i, nodes, tuple(methods), config, t_outage) for i, nodes in enumerate(outages)]
    if workers > 0:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            cases = list(pool.map(_run_case, jobs))
    else:
        cases = []
        for job in jobs:
            cases.append(_run_case(job))
            if progress is not None:
                progress(cases[-1])
    grid = np.linspace(0.0, 100.0, 101) if grid is None else np.asarray(grid, dtype=float)
    R = []
    if len(methods) >= 2:
        a, b = methods[0], methods[1]
        R = [jaccard(c.dependent_lines[a], c.dependent_lines[b]) for c in cases]
    resilient = sum(1 for c in cases if all(not v for v in c.dependent_lines.values()))
    collapsed = {m: sum(1 for c in cases if c.terminations[m] in ("collapsed", "nonconverged")) for m in methods}
    corrected = sum(1 for c in cases if c.summaries.get("BEM-PC", {}).get("rounds", 1) > 1)
    return MonteCarloSummary(
        methods=tuple(methods), cases=cases, R_values=R, grid=grid,
        demand_curves={m: exceedance_curve([c.demand_loss_pct[m] for c in cases], grid) for m in methods},
        line_curves={m: exceedance_curve([c.lines_out_pct[m] for c in cases], grid) for m in methods},
        resilient=resilient, collapsed=collapsed, corrected=corrected,
        meta={"seed": seed, "outage_count": outage_count, "resilient_convention": "empty union counts as R=1"},
    )
