"""Command-line interface: ``cascadesim run|mc|compare|modes``.

Every command reads a JSON run-file::

    {
      "case": "builtin:case39" | "path/to/case.m" | "path/to/case.json",
      "dynamics": {"seed": 1, "damping": {"5": -8.0}},
      "line_limits": {"factor": 1.5, "floor": 0.0},
      "method": "TM" | "BEM" | "BEM-PC" | "RK4",
      "outages": {"nodes": [4, 9], "lines": [], "t": 3.0}
                 | {"random": {"count": 2, "seed": 7}, "t": 3.0},
      "integrator": {...}, "relays": {...}, "pc": {...}, "run": {...},
      "mc": {"n_cases": 100, "methods": ["TM", "BEM-PC"], "workers": 0},
      "output_dir": "out"
    }

Relative paths are resolved against the run-file's directory. Only
``case`` is required.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from cascadesim.case_io import (
    CaseError,
    PowerFlowError,
    assign_line_limits,
    load_builtin_case,
    load_case_file,
    solve_power_flow,
    synthesize_dynamics,
)
from cascadesim.engine import RUNNERS, OutageSpec, PCConfig, RunConfig, prepare_case
from cascadesim.integrators import IntegratorConfig
from cascadesim.metrics import end_state_compare, monte_carlo, sample_outages
from cascadesim.protection import RelayConfig

log = logging.getLogger("cascadesim")

_INTEGRATOR_OF = {"TM": "TM", "BEM": "BEM", "BEM-PC": "BEM", "RK4": "RK4"}


class RunFileError(ValueError):
    pass


def _build(cls, data: dict | None, where: str, **fixed):
    data = dict(data or {})
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise RunFileError(f"{where}: unknown keys {sorted(unknown)}")
    for k, v in data.items():
        if isinstance(v, list):
            data[k] = tuple(v)
    data.update(fixed)
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise RunFileError(f"{where}: {exc}") from None


def load_runfile(path) -> dict:
    p = Path(path)
    try:
        spec = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise RunFileError(f"{p}: line {exc.lineno}: {exc.msg}") from None
    if not isinstance(spec, dict) or "case" not in spec:
        raise RunFileError(f"{p}: run-file must be an object with a 'case' entry")
    spec["_base"] = p.resolve().parent
    return spec


def _resolve(spec: dict, value: str) -> Path:
    q = Path(value)
    return q if q.is_absolute() else spec["_base"] / q


def build_case(spec: dict):
    ref = spec["case"]
    if ref.startswith("builtin:"):
        case = load_builtin_case(ref.split(":", 1)[1])
    else:
        case = load_case_file(_resolve(spec, ref))
    dyn = spec.get("dynamics")
    if dyn is not None:
        case = synthesize_dynamics(case, seed=int(dyn.get("seed", 0)),
                                   damping_overrides=dyn.get("damping"),
                                   base_damping=dyn.get("base_damping"))
    lim = spec.get("line_limits")
    if lim is not None:
        case = assign_line_limits(case, solve_power_flow(case), float(lim.get("factor", 1.5)),
                                  float(lim.get("floor", 0.0)))
    return case


def build_config(spec: dict, method: str | None = None) -> RunConfig:
    method = method or spec.get("method", "BEM-PC")
    if method not in RUNNERS:
        raise RunFileError(f"unknown method {method!r}; choose from {sorted(RUNNERS)}")
    integ = None
    if spec.get("integrator") is not None:
        data = dict(spec["integrator"])
        data.setdefault("method", _INTEGRATOR_OF[method])
        integ = _build(IntegratorConfig, data, "integrator")
    relays = None
    if spec.get("relays") is not None:
        try:
            relays = RelayConfig.from_dict(spec["relays"])
        except (TypeError, ValueError) as exc:
            raise RunFileError(f"relays: {exc}") from None
    pc = _build(PCConfig, spec.get("pc"), "pc")
    run = dict(spec.get("run") or {})
    for key in ("integrator", "relays", "pc"):
        if key in run:
            raise RunFileError(f"run: {key!r} belongs at the top level")
    return _build(RunConfig, run, "run", integrator=integ, relays=relays, pc=pc)


def build_outages(spec: dict, case) -> OutageSpec:
    o = spec.get("outages") or {}
    t = float(o.get("t", 3.0))
    if "random" in o:
        r = o["random"]
        nodes = sample_outages(case, 1, int(r.get("count", 2)), int(r.get("seed", 0)))[0]
        return OutageSpec(nodes=nodes, t=t)
    known = {"nodes", "lines", "t"}
    if set(o) - known:
        raise RunFileError(f"outages: unknown keys {sorted(set(o) - known)}")
    return OutageSpec(nodes=tuple(int(b) for b in o.get("nodes", ())),
                      lines=tuple(int(j) for j in o.get("lines", ())), t=t)


def _output_dir(spec: dict, override) -> Path:
    out = Path(override) if override else _resolve(spec, spec.get("output_dir", "cascadesim_out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.ndarray, frozenset, set, tuple)):
        return sorted(obj) if isinstance(obj, (frozenset, set)) else list(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _write_json(path: Path, data):
    path.write_text(json.dumps(data, indent=1, sort_keys=True, default=_json_default) + "\n")


def write_run_outputs(run, out: Path):
    (out / "events.jsonl").write_text(run.events_jsonl())
    _write_json(out / "end_state.json", run.end_state)
    with open(out / "timeline.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "lines_out", "demand_loss_mw"])
        for t, n, mw in run.timeline_rows():
            w.writerow([repr(float(t)), int(n), repr(float(mw))])
    _write_json(out / "summary.json", run.summary())


def write_modes(run, path: Path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tier", "lambda_re", "lambda_im", "freq_hz", "machines", "shape", "phase_deg"])
        for row in run.mode_rows:
            w.writerow([row["tier"], repr(row["lambda_re"]), repr(row["lambda_im"]), repr(row["freq_hz"]),
                        " ".join(str(g) for g in row["machines"]),
                        " ".join(f"{s:.6g}" for s in row["shape"]),
                        " ".join(f"{p:.3f}" for p in row["phase_deg"])])


def _load_result(path: Path):
    """A finished run from its output directory, shaped for :func:`end_state_compare`."""
    es = json.loads((path / "end_state.json").read_text())
    summ = json.loads((path / "summary.json").read_text())
    deps = frozenset(summ["dependent_line_outages"])
    return SimpleNamespace(end_state=es, wall_time=float(summ["wall_time_s"]), method=summ["method"],
                           dependent_line_outages=lambda: deps)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_run(args) -> int:
    spec = load_runfile(args.runfile)
    method = args.method or spec.get("method", "BEM-PC")
    case = build_case(spec)
    config = build_config(spec, method)
    run = RUNNERS[method](prepare_case(case), build_outages(spec, case), config)
    out = _output_dir(spec, args.out)
    write_run_outputs(run, out)
    if run.mode_rows:
        write_modes(run, out / "modes.csv")
    s = run.summary()
    print(f"{method}: {s['termination']} at t={s['t_end']:.3f} s, {s['tiers']} tiers, "
          f"demand loss {s['demand_loss_pct']:.2f}%, wall {s['wall_time_s']:.2f} s -> {out}")
    return 0


def cmd_mc(args) -> int:
    spec = load_runfile(args.runfile)
    mc = dict(spec.get("mc") or {})
    methods = tuple(mc.get("methods", ("TM", "BEM-PC")))
    case = build_case(spec)
    o = spec.get("outages") or {}
    r = o.get("random", {})
    config = build_config(spec, methods[-1])
    summary = monte_carlo(case, int(mc.get("n_cases", 100)), int(r.get("count", 2)), int(r.get("seed", 0)),
                          methods=methods, config=config, t_outage=float(o.get("t", 3.0)),
                          workers=int(mc.get("workers", 0)),
                          progress=lambda c: log.info("case %d %s done", c.index, c.nodes))
    out = _output_dir(spec, args.out)
    d = summary.as_dict()
    _write_json(out / "mc_summary.json", d)
    with open(out / "curves.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x_pct"] + [f"demand_{m}" for m in methods] + [f"lines_{m}" for m in methods])
        for i, x in enumerate(d["grid_pct"]):
            w.writerow([x] + [d["demand_loss_curves"][m][i] for m in methods]
                       + [d["line_outage_curves"][m][i] for m in methods])
    print(f"{len(summary.cases)} cases: mean R {summary.mean_R:.4f}, median R {summary.median_R:.4f}, "
          f"median runtime ratio {d['median_runtime_ratio']} -> {out}")
    return 0


def cmd_compare(args) -> int:
    runs = []
    for p in (Path(args.run_a), Path(args.run_b)):
        if not (p / "end_state.json").exists():
            raise RunFileError(f"{p} is not a run output directory (missing end_state.json)")
        runs.append(_load_result(p))
    report = end_state_compare(runs[0], runs[1]).as_dict()
    print(json.dumps(report, indent=1, sort_keys=True))
    return 0


def cmd_modes(args) -> int:
    spec = load_runfile(args.runfile)
    case = build_case(spec)
    config = build_config(spec, "BEM-PC")
    run = RUNNERS["BEM-PC"](prepare_case(case), build_outages(spec, case), config)
    out = _output_dir(spec, args.out)
    write_modes(run, out / "modes.csv")
    print(f"{len(run.mode_rows)} unstable modes over {len(run.verdicts)} analysed tiers -> {out / 'modes.csv'}")
    return 0


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cascadesim", description="Dynamic cascading-failure simulation.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="simulate one contingency")
    p.add_argument("runfile")
    p.add_argument("--method", choices=sorted(RUNNERS))
    p.add_argument("--out")
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("mc", help="Monte-Carlo over random node outages")
    p.add_argument("runfile")
    p.add_argument("--out")
    p.set_defaults(func=cmd_mc)
    p = sub.add_parser("compare", help="compare two run output directories (first is the reference)")
    p.add_argument("run_a")
    p.add_argument("run_b")
    p.set_defaults(func=cmd_compare)
    p = sub.add_parser("modes", help="report unstable modes found by the predictor")
    p.add_argument("runfile")
    p.add_argument("--out")
    p.set_defaults(func=cmd_modes)
    return ap


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (RunFileError, CaseError, PowerFlowError, KeyError, FileNotFoundError, ValueError) as exc:
        print(f"cascadesim: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
