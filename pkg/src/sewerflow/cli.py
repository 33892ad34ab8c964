"""Command-line front end: scenario I/O, runs, and plot-ready exports.

Subcommands
-----------
validate   parse a scenario file and report violations
simulate   open-loop run under the scenario's held setpoints
control    one closed-loop run (``--kind fc`` or ``--kind f``)
compare    both controllers on the same scenario plus a delta summary

Every run writes a directory of artifacts: ``metrics.json`` (flat map
metric-name -> {value, units}), ``states.csv``, ``pipes.csv``,
``controls.csv``, per-period ``diagnostics.csv`` for closed-loop runs,
and ``fig_*.csv`` files shaped for direct plotting. CSV output is
deterministic: rerunning with the same inputs and seed reproduces the
files byte for byte (solver wall times live only in diagnostics.csv and
the JSON summaries).

Exit codes: 0 success, 2 usage error, 3 scenario validation failure,
4 runtime failure (a diagnostics file is still written when possible).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .metrics import MetricsReport, compute_metrics
from .model import Scenario, ScenarioError, ScenarioValidationError, bundled_path, load_scenario
from .mpc import ClosedLoopResult, ComparisonResult, ControlError, run_closed_loop
from .simulate import PlantEstimator, TrajectoryLog, initial_observation, run
from . import socp

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INVALID = 3
EXIT_RUNTIME = 4

_DIAG_FIELDS = (
    "control_period", "applied", "solver_status", "solve_time", "iterations",
    "objective", "fallback_age", "gap_worst", "gap_tight_fraction",
    "rate_overrun_worst", "n_rate_triples",
)


def _fmt(v) -> str:
    return format(float(v), ".12g")


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _resolve_scenario(args) -> Path:
    name = args.scenario_opt or args.scenario
    if name is None:
        raise FileNotFoundError("scenario file required (positional or --scenario)")
    path = Path(name)
    if not path.exists():
        candidate = bundled_path(path.name)
        if candidate.exists():
            return candidate
        raise FileNotFoundError(f"scenario file not found: {name}")
    return path


def _load(args) -> Scenario:
    sc = load_scenario(_resolve_scenario(args))
    if getattr(args, "am_order", None):
        sc = dataclasses.replace(
            sc, timing=dataclasses.replace(sc.timing, am_order=args.am_order))
    return sc


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# artifact writers


def write_metrics(path: Path, metrics: MetricsReport) -> None:
    path.write_text(json.dumps(metrics.as_dict(), indent=2) + "\n")


def write_states(path: Path, log: TrajectoryLog) -> None:
    """Grid states per tank; QF/QCSO are the overflow rates over the fine
    period starting at t_min (zero on the final boundary row)."""
    sc = log.scenario
    delta = sc.timing.delta
    n = log.n_periods
    header = ["t_min", "tank_id", "V"] + [f"c_{s}" for s in sc.species] + ["QF", "QCSO"]
    rows = []
    for j in range(n + 1):
        t = _fmt(j * delta)
        for i, tid in enumerate(log.volume_tank_ids):
            qf = log.flood[j, i] + log.spill[j, i] if j < n else 0.0
            rows.append([t, tid, _fmt(log.volume[j, i])]
                        + [_fmt(c) for c in log.tank_conc[j, i]]
                        + [_fmt(qf), _fmt(0.0)])
        for p, pid in enumerate(log.plant_ids):
            qcso = log.plant_cso[j, p] if j < n else 0.0
            rows.append([t, pid, _fmt(sc.network.tank(pid).v_bar)]
                        + [_fmt(c) for c in log.plant_conc[j, p]]
                        + [_fmt(0.0), _fmt(qcso)])
    _write_csv(path, header, rows)


def write_pipes(path: Path, log: TrajectoryLog) -> None:
    delta = log.scenario.timing.delta
    rows = []
    for j in range(log.n_periods):
        t = _fmt(j * delta)
        for k, key in enumerate(log.pipe_keys):
            rows.append([t, key, _fmt(log.pipe_flow[j, k]), _fmt(log.pipe_arrival[j, k])])
    _write_csv(path, ["t_min", "pipe_id", "Q_departure", "Q_arrival"], rows)


def write_controls(path: Path, log: TrajectoryLog) -> None:
    sc = log.scenario
    delta = sc.timing.delta
    rows = [[_fmt(j * delta)] + [_fmt(v) for v in log.setpoints[j]]
            for j in range(log.n_periods)]
    _write_csv(path, ["t_min"] + list(sc.actuator_keys), rows)


def write_diagnostics(path: Path, records) -> None:
    rows = [[getattr(r, f) for f in _DIAG_FIELDS] for r in records]
    out = []
    for row in rows:
        out.append([v if isinstance(v, str) else _fmt(v) for v in row])
    _write_csv(path, _DIAG_FIELDS, out)


def write_figures(out: Path, log: TrajectoryLog) -> None:
    sc = log.scenario
    delta = sc.timing.delta
    n = log.n_periods

    rows = []
    for j in range(n):
        t = _fmt(j * delta)
        for i, inlet in enumerate(log.inlet_ids):
            rows.append([t, inlet, _fmt(log.influent_flow[j, i])]
                        + [_fmt(c) for c in sc.influent.conc_at(inlet, j)])
    _write_csv(out / "fig_influent.csv",
               ["t_min", "inlet_id", "flow"] + [f"c_{s}" for s in sc.species], rows)

    rows = [[_fmt(j * delta), _fmt(log.volume[j].sum()),
             _fmt(log.plant_outflow[j].sum() if j < n else 0.0)]
            for j in range(n + 1)]
    _write_csv(out / "fig_totals.csv",
               ["t_min", "total_volume", "total_plant_outflow"], rows)

    rows = [[_fmt(j * delta)] + [_fmt(q) for q in log.plant_outflow[j]]
            for j in range(n)]
    _write_csv(out / "fig_plant_outflows.csv",
               ["t_min"] + list(log.plant_ids), rows)

    rows = []
    for j in range(n):
        t = _fmt(j * delta)
        for p, pid in enumerate(log.plant_ids):
            names = sc.biology[pid].reaction_names + ("biomass_decay",)
            off = log.reaction_offsets[p]
            for r, name in enumerate(names):
                rows.append([t, pid, name, _fmt(log.reaction_rate[j, off + r])])
    _write_csv(out / "fig_reaction_rates.csv",
               ["t_min", "plant_id", "reaction", "rate"], rows)

    rows = []
    for j in range(n + 1):
        t = _fmt(j * delta)
        for p, pid in enumerate(log.plant_ids):
            rows.append([t, pid] + [_fmt(c) for c in log.plant_conc[j, p]])
    _write_csv(out / "fig_plant_concentrations.csv",
               ["t_min", "plant_id"] + [f"c_{s}" for s in sc.species], rows)


def write_run_artifacts(out: Path, log: TrajectoryLog, metrics: MetricsReport,
                        records=None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    write_metrics(out / "metrics.json", metrics)
    write_states(out / "states.csv", log)
    write_pipes(out / "pipes.csv", log)
    write_controls(out / "controls.csv", log)
    if records is not None:
        write_diagnostics(out / "diagnostics.csv", records)
    write_figures(out, log)


# ---------------------------------------------------------------------------
# subcommands


def cmd_validate(args) -> int:
    try:
        sc = load_scenario(_resolve_scenario(args))
    except ScenarioValidationError as e:
        print("scenario invalid:", file=sys.stderr)
        for v in e.violations:
            print(f"  - {v}", file=sys.stderr)
        return EXIT_INVALID
    except ScenarioError as e:
        print(f"scenario invalid: {e}", file=sys.stderr)
        return EXIT_INVALID
    net = sc.network
    print(f"scenario OK: {sc.name}")
    print(f"  tanks: {len(net.tanks)} ({len(net.plants)} plants), pipes: {len(net.pipes)}")
    print(f"  species: {', '.join(sc.species)}")
    print(f"  fine step {sc.timing.delta:g} min, control period "
          f"{sc.timing.control_period:g} min, horizon {sc.timing.horizon_steps} steps, "
          f"{sc.timing.sim_periods} simulated periods")
    return EXIT_OK


def cmd_simulate(args) -> int:
    sc = _load(args)
    n = args.periods if args.periods else None
    log = run(sc, n_periods=n)
    out = _out_dir(args)
    write_run_artifacts(out, log, compute_metrics(log))
    print(f"simulated {log.n_periods} periods -> {out}")
    return EXIT_OK


def _dump_bootstrap_program(sc: Scenario, kind: str, horizon: int | None, path: str) -> None:
    obs = initial_observation(sc)
    H = sc.timing.horizon_steps if horizon is None else horizon
    if kind == "fc":
        hist = np.array([obs.setpoints[k][0] for k in sc.actuator_keys])
        est = PlantEstimator(sc)
        xi_in_hat, xi_hat = est.preview(np.tile(hist, (H + 1, 1)), H)
        prog, _ = socp.build_traj_fc(sc, obs, xi_in_hat, xi_hat, horizon=H)
    else:
        prog, _ = socp.build_traj_f(sc, obs, horizon=H)
    Path(path).write_text(prog.dump())


def _progress_printer(kind: str):
    def cb(done, total, rec):
        print(f"[{kind}] period {done + 1}/{total}: {rec.applied} "
              f"({rec.solver_status}, {rec.solve_time:.2f} s)", file=sys.stderr)
    return cb


def cmd_control(args) -> int:
    sc = _load(args)
    out = _out_dir(args)
    if args.dump_program:
        _dump_bootstrap_program(sc, args.kind, args.horizon, args.dump_program)
    try:
        res = run_closed_loop(
            sc, args.kind,
            horizon=args.horizon,
            n_control_periods=args.periods,
            noise=args.noise,
            seed=args.seed,
            progress=_progress_printer(args.kind) if args.verbose else None,
        )
    except ControlError as e:
        write_diagnostics(out / "diagnostics.csv", e.records)
        (out / "error.txt").write_text(
            f"control aborted at control period {e.control_period}: {e}\n")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    write_run_artifacts(out, res.log, res.metrics, res.records)
    print(f"{args.kind} run: {len(res.records)} control periods, "
          f"{res.n_fallbacks} fallbacks, wall {res.wall_time:.1f} s -> {out}")
    return EXIT_OK


def cmd_compare(args) -> int:
    sc = _load(args)
    out = _out_dir(args)
    results: dict[str, ClosedLoopResult] = {}
    for kind in ("fc", "f"):
        try:
            results[kind] = run_closed_loop(
                sc, kind,
                horizon=args.horizon,
                n_control_periods=args.periods,
                noise=args.noise,
                seed=args.seed,
                progress=_progress_printer(kind) if args.verbose else None,
            )
        except ControlError as e:
            write_diagnostics(out / f"diagnostics_{kind}.csv", e.records)
            (out / "error.txt").write_text(
                f"{kind} run aborted at control period {e.control_period}: {e}\n")
            print(f"error in {kind} run: {e}", file=sys.stderr)
            return EXIT_RUNTIME
    comparison = ComparisonResult(pollution_aware=results["fc"], volume_based=results["f"])
    for kind, res in results.items():
        write_run_artifacts(out / kind, res.log, res.metrics, res.records)
    summary = comparison.summary()
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    rel = summary["release_change_pct"]
    tv = summary["treated_volume_change_pct"]
    print(f"release change fc vs f: {rel:+.1f}%  treated volume: {tv:+.2f}%")
    print(f"artifacts -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def _add_scenario_arg(p: argparse.ArgumentParser) -> None:
    p.add_argument("scenario", nargs="?", help="scenario file (bundled names also resolve)")
    p.add_argument("--scenario", dest="scenario_opt", metavar="FILE",
                   help="scenario file (alternative to the positional form)")


def _add_run_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("-o", "--out", required=True, help="output directory")
    p.add_argument("--horizon", type=int, default=None,
                   help="override the optimization horizon (fine steps)")
    p.add_argument("--am-order", type=int, choices=(1, 2, 3, 4), default=None,
                   help="override the multistep integration order")
    p.add_argument("--periods", type=int, default=None,
                   help="truncate the run (control periods; simulate: fine periods)")
    p.add_argument("--seed", type=int, default=None, help="observation noise seed")
    p.add_argument("--noise", type=float, default=0.0,
                   help="multiplicative observation noise level")
    p.add_argument("-v", "--verbose", action="store_true",
                   help="print per-period progress to stderr")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="sewerflow",
        description="Pollution-aware predictive control of sewer networks.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("validate", help="check a scenario file")
    _add_scenario_arg(v)
    v.set_defaults(fn=cmd_validate)

    s = sub.add_parser("simulate", help="open-loop run under held setpoints")
    _add_scenario_arg(s)
    _add_run_args(s)
    s.set_defaults(fn=cmd_simulate)

    c = sub.add_parser("control", help="closed-loop run with one controller")
    _add_scenario_arg(c)
    _add_run_args(c)
    c.add_argument("--kind", choices=("fc", "f"), default="fc",
                   help="controller kind (default: fc)")
    c.add_argument("--dump-program", metavar="FILE", default=None,
                   help="write the first trajectory program in text form")
    c.set_defaults(fn=cmd_control)

    m = sub.add_parser("compare", help="run both controllers and summarize")
    _add_scenario_arg(m)
    _add_run_args(m)
    m.set_defaults(fn=cmd_compare)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except SystemExit:
        raise
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ScenarioError as e:
        print(f"scenario error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except (ControlError, RuntimeError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
