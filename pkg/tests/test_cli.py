"""CLI contract: exit codes, artifact files, idempotent outputs."""
from __future__ import annotations

import copy
import json
from pathlib import Path

import pytest

from sewerflow import cli
from sewerflow.mpc import ControlError, SolveRecord

from conftest import tiny_scenario_dict

METRIC_NAMES = {
    "flooding", "cso", "release", "regulation", "growth", "slope", "curvature",
    "final_volume", "total_volume", "plant_balance", "time_balance", "treated_volume",
}
RUN_FILES = {
    "metrics.json", "states.csv", "pipes.csv", "controls.csv", "diagnostics.csv",
    "fig_influent.csv", "fig_totals.csv", "fig_plant_outflows.csv",
    "fig_reaction_rates.csv", "fig_plant_concentrations.csv",
}


@pytest.fixture()
def tiny_file(tmp_path):
    p = tmp_path / "tiny.scenario"
    p.write_text(json.dumps(tiny_scenario_dict()))
    return str(p)


def test_validate_ok(tiny_file, capsys):
    assert cli.main(["validate", tiny_file]) == 0
    out = capsys.readouterr().out
    assert "scenario OK: tiny" in out
    assert "1 plants" in out


def test_validate_flag_form(tiny_file):
    assert cli.main(["validate", "--scenario", tiny_file]) == 0


def test_validate_resolves_bundled_name(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)  # no such file in cwd
    assert cli.main(["validate", "paris_like.scenario"]) == 0


def test_missing_file_is_usage_error(capsys):
    assert cli.main(["validate", "no_such_file.scenario"]) == 2
    assert "not found" in capsys.readouterr().err


def test_no_scenario_is_usage_error(tmp_path, capsys):
    assert cli.main(["simulate", "-o", str(tmp_path / "o")]) == 2
    assert "scenario file required" in capsys.readouterr().err


def test_unparseable_scenario_exits_3(tmp_path, capsys):
    p = tmp_path / "broken.scenario"
    p.write_text("{not json")
    assert cli.main(["validate", str(p)]) == 3
    assert "invalid" in capsys.readouterr().err


def test_invalid_network_exits_3(tmp_path, capsys):
    d = tiny_scenario_dict()
    d["network"]["pipes"][0]["to"] = "NOWHERE"
    p = tmp_path / "bad.scenario"
    p.write_text(json.dumps(d))
    assert cli.main(["validate", str(p)]) == 3
    assert "invalid" in capsys.readouterr().err


def test_bad_subcommand_usage_exit():
    with pytest.raises(SystemExit) as e:
        cli.main(["frobnicate"])
    assert e.value.code == 2


def test_bad_kind_usage_exit(tiny_file, tmp_path):
    with pytest.raises(SystemExit) as e:
        cli.main(["control", tiny_file, "-o", str(tmp_path / "o"), "--kind", "pid"])
    assert e.value.code == 2


def test_simulate_writes_artifacts(tiny_file, tmp_path):
    out = tmp_path / "sim"
    assert cli.main(["simulate", tiny_file, "-o", str(out), "--periods", "6"]) == 0
    names = {p.name for p in out.iterdir()}
    assert RUN_FILES - {"diagnostics.csv"} <= names  # open loop: no solves
    header = (out / "states.csv").read_text().splitlines()[0]
    assert header == "t_min,tank_id,V,c_S,c_X,QF,QCSO"
    n_lines = len((out / "states.csv").read_text().splitlines())
    assert n_lines == 1 + 7 * 2  # header + (6 periods + 1 boundary) x 2 tanks


def test_control_writes_artifacts_and_program_dump(tiny_file, tmp_path):
    out = tmp_path / "ctl"
    dump = tmp_path / "prog.txt"
    rc = cli.main(["control", tiny_file, "-o", str(out), "--kind", "fc",
                   "--periods", "2", "--dump-program", str(dump)])
    assert rc == 0
    assert {p.name for p in out.iterdir()} == RUN_FILES
    metrics = json.loads((out / "metrics.json").read_text())
    assert set(metrics) == METRIC_NAMES
    for entry in metrics.values():
        assert set(entry) == {"value", "units"}
    diag = (out / "diagnostics.csv").read_text().splitlines()
    assert len(diag) == 3  # header + 2 control periods
    assert diag[1].startswith("0,plan,optimal,")
    controls = (out / "controls.csv").read_text().splitlines()
    assert controls[0] == "t_min,V1->P1,P1"
    assert len(controls) == 1 + 10  # 2 control periods x 5 fine periods
    text = dump.read_text()
    assert text.startswith("conic program")
    assert "soc[0]" in text  # the pollution-aware program carries cones


def test_control_f_kind_runs(tiny_file, tmp_path):
    out = tmp_path / "f"
    assert cli.main(["control", tiny_file, "-o", str(out), "--kind", "f",
                     "--periods", "2"]) == 0
    diag = (out / "diagnostics.csv").read_text().splitlines()
    assert len(diag) == 3


def test_am_order_override_runs(tiny_file, tmp_path):
    out = tmp_path / "am2"
    assert cli.main(["control", tiny_file, "-o", str(out), "--kind", "f",
                     "--periods", "2", "--am-order", "2"]) == 0
    assert (out / "metrics.json").exists()


def _strip_solve_time(text: str) -> str:
    lines = text.splitlines()
    idx = lines[0].split(",").index("solve_time")
    out = []
    for line in lines:
        cells = line.split(",")
        del cells[idx]
        out.append(",".join(cells))
    return "\n".join(out)


def test_rerun_is_byte_identical(tiny_file, tmp_path):
    outs = []
    for tag in ("a", "b"):
        out = tmp_path / tag
        assert cli.main(["control", tiny_file, "-o", str(out), "--kind", "fc",
                         "--periods", "2", "--seed", "3"]) == 0
        outs.append(out)
    a, b = outs
    for name in sorted(RUN_FILES):
        ta, tb = (a / name).read_text(), (b / name).read_text()
        if name == "diagnostics.csv":  # solver wall time is the one timing field
            ta, tb = _strip_solve_time(ta), _strip_solve_time(tb)
        assert ta == tb, name


def test_compare_writes_summary_and_subruns(tiny_file, tmp_path):
    out = tmp_path / "cmp"
    assert cli.main(["compare", tiny_file, "-o", str(out), "--periods", "2"]) == 0
    assert {p.name for p in (out / "fc").iterdir()} == RUN_FILES
    assert {p.name for p in (out / "f").iterdir()} == RUN_FILES
    summary = json.loads((out / "summary.json").read_text())
    for key in ("release_change_pct", "treated_volume_change_pct", "release",
                "treated_volume", "flooding", "cso", "wall_time_s", "fallbacks"):
        assert key in summary
    assert summary["fallbacks"] == {"fc": 0, "f": 0}


def test_control_abort_exits_4_with_diagnostics(tiny_file, tmp_path, monkeypatch, capsys):
    rec = SolveRecord(control_period=0, applied="abort", solver_status="infeasible",
                      solve_time=0.0, iterations=0, objective=float("nan"),
                      fallback_age=0)

    def boom(*a, **k):
        raise ControlError("planning failed", control_period=0, records=[rec])

    monkeypatch.setattr(cli, "run_closed_loop", boom)
    out = tmp_path / "ctl"
    rc = cli.main(["control", tiny_file, "-o", str(out), "--periods", "2"])
    assert rc == 4
    assert "planning failed" in capsys.readouterr().err
    assert "abort" in (out / "diagnostics.csv").read_text()
    assert "control period 0" in (out / "error.txt").read_text()


def test_compare_abort_exits_4(tiny_file, tmp_path, monkeypatch):
    def boom(*a, **k):
        raise ControlError("no plan", control_period=1, records=[])

    monkeypatch.setattr(cli, "run_closed_loop", boom)
    out = tmp_path / "cmp"
    assert cli.main(["compare", tiny_file, "-o", str(out), "--periods", "2"]) == 4
    assert (out / "error.txt").exists()
    assert (out / "diagnostics_fc.csv").exists()
