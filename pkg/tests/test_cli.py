import csv
import json
import subprocess
import sys

import pytest

from cascadesim.case_io import dump_case, load_builtin_case
from cascadesim.cli import main


def _runfile(tmp_path, name="run.json", **extra):
    spec = {"case": "builtin:case9", "dynamics": {"seed": 1}, "line_limits": {"factor": 1.5},
            "method": "BEM", "outages": {"nodes": [5], "t": 1.0}, "output_dir": "out"}
    spec.update(extra)
    p = tmp_path / name
    p.write_text(json.dumps(spec))
    return p


def test_run_writes_outputs(tmp_path, capsys):
    rf = _runfile(tmp_path)
    assert main(["run", str(rf)]) == 0
    out = tmp_path / "out"
    for f in ("events.jsonl", "end_state.json", "timeline.csv", "summary.json"):
        assert (out / f).exists()
    events = [json.loads(line) for line in (out / "events.jsonl").read_text().splitlines()]
    assert events[0]["kind"] == "initial_node_outage" and events[0]["targets"] == [5]
    summary = json.loads((out / "summary.json").read_text())
    assert summary["method"] == "BEM"
    with open(out / "timeline.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["t", "lines_out", "demand_loss_mw"] and len(rows) == summary["tiers"] + 1
    assert "BEM:" in capsys.readouterr().out


def test_compare_two_runs(tmp_path, capsys):
    rf = _runfile(tmp_path)
    assert main(["run", str(rf), "--out", str(tmp_path / "a")]) == 0
    assert main(["run", str(rf), "--method", "TM", "--out", str(tmp_path / "b")]) == 0
    capsys.readouterr()
    assert main(["compare", str(tmp_path / "b"), str(tmp_path / "a")]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["R"] == 1.0 and report["line_status_errors"] == 0


def test_modes_on_unstable_smib(tmp_path):
    rf = _runfile(tmp_path, case="builtin:smib", dynamics={"seed": 1, "damping": {"2": -2.0}},
                  line_limits=None, outages={"lines": [2], "t": 1.0},
                  integrator={"dt_max": 1.0, "tau": 0.5}, pc={"round_cap": 1})
    assert main(["modes", str(rf)]) == 0
    with open(tmp_path / "out" / "modes.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert rows and float(rows[0]["lambda_re"]) > 0 and float(rows[0]["freq_hz"]) > 0


def test_monte_carlo_command(tmp_path):
    rf = _runfile(tmp_path, outages={"random": {"count": 1, "seed": 3}, "t": 1.0},
                  mc={"n_cases": 2, "methods": ["TM", "BEM"]}, run={"t_max": 60.0})
    assert main(["mc", str(rf)]) == 0
    d = json.loads((tmp_path / "out" / "mc_summary.json").read_text())
    assert d["n_cases"] == 2 and d["methods"] == ["TM", "BEM"]
    with open(tmp_path / "out" / "curves.csv") as fh:
        assert len(list(csv.reader(fh))) == 102


def test_case_file_relative_to_runfile(tmp_path):
    (tmp_path / "cases").mkdir()
    (tmp_path / "cases" / "nine.json").write_text(dump_case(load_builtin_case("case9")))
    rf = _runfile(tmp_path, case="cases/nine.json", outages={})
    assert main(["run", str(rf)]) == 0
    assert json.loads((tmp_path / "out" / "summary.json").read_text())["tiers"] == 0


@pytest.mark.parametrize("bad", [
    {"method": "Euler"},
    {"integrator": {"bogus": 1}},
    {"relays": {"v_th": 0.8, "nope": 2}},
    {"outages": {"nodes": [999]}},
    {"outages": {"bus": [1]}},
    {"run": {"pc": {}}},
    {"case": "builtin:case7"},
    {"case": "missing.m"},
])
def test_bad_runfile_exit_code(tmp_path, capsys, bad):
    rf = _runfile(tmp_path, **bad)
    assert main(["run", str(rf)]) == 2
    assert "error" in capsys.readouterr().err


def test_unparseable_runfile(tmp_path):
    p = tmp_path / "r.json"
    p.write_text("{\n  'case': 1\n")
    assert main(["run", str(p)]) == 2
    p.write_text(json.dumps({"method": "TM"}))
    assert main(["run", str(p)]) == 2


def test_compare_needs_run_directories(tmp_path):
    assert main(["compare", str(tmp_path), str(tmp_path)]) == 2


def test_console_entry_point_help():
    res = subprocess.run([sys.executable, "-m", "cascadesim.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("run", "mc", "compare", "modes"):
        assert cmd in res.stdout
