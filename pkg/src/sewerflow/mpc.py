"""Closed-loop receding-horizon control of the sewer network.

One control period at a time: apply the committed setpoints to the
nonlinear simulator, observe the new state, refresh the plant
concentration estimates, solve the next trajectory program, and commit
its first step. When a solve fails the previously planned trajectory is
replayed with a growing shift; repeated failures abort the run rather
than silently free-running the network.

Two controller kinds share the loop. ``"fc"`` plans flows and pollutant
loads with the concentration-aware program; ``"f"`` plans flows and
volumes only. Both face the same simulator truth, so their metric
reports are directly comparable.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .kinetics import exactness_gap, rate_eval
from .metrics import MetricsReport, compute_metrics
from .model import Scenario, Weights
from . import socp
from .simulate import (
    PlantEstimator,
    Simulator,
    TrajectoryLog,
    _cum_snapshot,
    _empty_log,
    _finalize_log,
    _record_grid,
    _record_period,
    initial_observation,
    observe,
)
from .solver import ClarabelAdapter, SolverResult

CONTROLLER_KINDS = ("fc", "f")
GAP_TIGHT = 1e-4  # relative exactness threshold counted as "tight"


class ControlError(RuntimeError):
    """Raised when the controller cannot produce plans anymore.

    Carries the per-period solve records collected up to the abort so
    callers can still write diagnostics.
    """

    def __init__(self, message: str, control_period: int, records=()):
        super().__init__(message)
        self.control_period = control_period
        self.records = list(records)


@dataclass
class SolveRecord:
    """Per-control-period diagnostics of the planning step."""

    control_period: int
    applied: str  # "plan" | "fallback" | "idle"
    solver_status: str
    solve_time: float
    iterations: int
    objective: float
    fallback_age: int
    # relaxation quality on the solved plan (concentration-aware runs only)
    gap_worst: float = float("nan")
    gap_tight_fraction: float = float("nan")
    rate_overrun_worst: float = float("nan")
    n_rate_triples: int = 0


@dataclass
class ClosedLoopResult:
    kind: str
    log: TrajectoryLog
    metrics: MetricsReport
    records: list[SolveRecord]
    applied_controls: np.ndarray  # (n_control_periods, n_actuators)
    wall_time: float

    @property
    def n_fallbacks(self) -> int:
        return sum(1 for r in self.records if r.applied != "plan")

    @property
    def mean_solve_time(self) -> float:
        times = [r.solve_time for r in self.records if r.applied == "plan"]
        return float(np.mean(times)) if times else float("nan")

    @property
    def max_solve_time(self) -> float:
        times = [r.solve_time for r in self.records if r.applied == "plan"]
        return float(np.max(times)) if times else float("nan")


def _shift_rows(rows: np.ndarray, shift: int) -> np.ndarray:
    """Drop the first ``shift`` rows and extend by holding the last one."""
    if shift <= 0:
        return rows.copy()
    out = np.empty_like(rows)
    if shift < len(rows):
        out[: len(rows) - shift] = rows[shift:]
        out[len(rows) - shift :] = rows[-1]
    else:
        out[:] = rows[-1]
    return out


def _relaxation_quality(scenario: Scenario, layout, x: np.ndarray) -> tuple[float, float, float, int]:
    """Worst relative gap, tight fraction, worst one-sided overshoot, count."""
    worst = 0.0
    overrun = 0.0
    tight = 0
    total = 0
    for p in layout.plant_ids:
        bio = scenario.biology[p]
        for r, law in enumerate(bio.laws):
            bio_idx = getattr(law, "biomass_index", None)
            if bio_idx is None:
                bio_idx = bio.biomass_index
            for l in range(layout.horizon + 1):
                s = max(float(x[layout.xi(p, law.substrate_index, l)]), 0.0)
                xb = max(float(x[layout.xi(p, bio_idx, l)]), 0.0)
                t = float(x[layout.t(p, r, l)])
                gap = exactness_gap(law, s, xb, t)
                worst = max(worst, gap)
                overrun = max(overrun, t - rate_eval(law, s, xb))
                tight += gap < GAP_TIGHT
                total += 1
    frac = tight / total if total else float("nan")
    return worst, frac, overrun, total


def run_closed_loop(
    scenario: Scenario,
    kind: str = "fc",
    *,
    horizon: int | None = None,
    weights: Weights | None = None,
    adapter: ClarabelAdapter | None = None,
    n_control_periods: int | None = None,
    substeps: int = 10,
    estimator_substeps: int = 5,
    noise: float = 0.0,
    seed: int | None = None,
    with_chords: bool = False,
    max_consecutive_failures: int = 3,
    progress=None,
) -> ClosedLoopResult:
    """Run one controller against the nonlinear simulator.

    ``n_control_periods`` truncates the run (defaults to the scenario's
    full span). ``noise`` adds multiplicative observation noise; the
    simulator truth itself stays exact. ``progress`` is an optional
    callable ``(done, total, record)`` invoked after each planning step.
    """
    if kind not in CONTROLLER_KINDS:
        raise ValueError(f"unknown controller kind {kind!r}; pick one of {CONTROLLER_KINDS}")
    t_start = time.perf_counter()
    timing = scenario.timing
    ratio = timing.steps_per_control
    K = timing.n_control_periods if n_control_periods is None else int(n_control_periods)
    if K < 1:
        raise ValueError("need at least one control period")
    if K * ratio > timing.sim_periods:
        raise ValueError("run length exceeds the scenario's simulated span")
    H = timing.horizon_steps if horizon is None else int(horizon)
    adapter = adapter or ClarabelAdapter(tol=1e-6)
    rng = np.random.default_rng(seed) if noise > 0 else None
    pollution = kind == "fc"

    n_fine = K * ratio
    sim = Simulator(scenario, substeps=substeps)
    log = _empty_log(scenario, sim, n_fine)
    _record_grid(log, sim, 0)
    prev_cum = _cum_snapshot(sim)

    est = PlantEstimator(scenario, substeps=estimator_substeps) if pollution else None
    lo_bounds, _ = socp.actuator_bounds(scenario)
    n_act = len(scenario.actuator_keys)

    plan_rows: np.ndarray | None = None
    plan_age = 0
    failures = 0
    records: list[SolveRecord] = []
    applied = np.zeros((K, n_act))

    def solve_for(period_k: int, obs, nominal_rows) -> tuple[np.ndarray, SolveRecord]:
        nonlocal plan_rows, plan_age, failures
        if pollution:
            xi_in_hat, xi_hat = est.preview(nominal_rows, H)
            prog, layout = socp.build_traj_fc(
                scenario, obs, xi_in_hat, xi_hat,
                horizon=H, weights=weights, with_chords=with_chords,
            )
        else:
            prog, layout = socp.build_traj_f(scenario, obs, horizon=H, weights=weights)
        res: SolverResult = adapter.solve(prog)
        if res.ok:
            plan_rows = socp.extract_plan(layout, res.x, scenario)
            plan_age = 0
            failures = 0
            rec = SolveRecord(
                control_period=period_k,
                applied="plan",
                solver_status=res.status,
                solve_time=res.solve_time,
                iterations=res.iterations,
                objective=res.objective,
                fallback_age=0,
            )
            if pollution:
                (rec.gap_worst, rec.gap_tight_fraction,
                 rec.rate_overrun_worst, rec.n_rate_triples) = _relaxation_quality(
                    scenario, layout, res.x)
            return plan_rows[0].copy(), rec
        failures += 1
        if failures >= max_consecutive_failures:
            records.append(SolveRecord(
                control_period=period_k,
                applied="abort",
                solver_status=res.status,
                solve_time=res.solve_time,
                iterations=res.iterations,
                objective=float("nan"),
                fallback_age=plan_age,
            ))
            raise ControlError(
                f"planning failed {failures} control periods in a row "
                f"(last solver status: {res.status})",
                control_period=period_k,
                records=records,
            )
        if plan_rows is not None:
            plan_age += 1
            row = plan_rows[min(plan_age * ratio, H)].copy()
            mode = "fallback"
        else:
            row = lo_bounds.copy()  # nothing planned yet: idle at the bounds
            mode = "idle"
        rec = SolveRecord(
            control_period=period_k,
            applied=mode,
            solver_status=res.status,
            solve_time=res.solve_time,
            iterations=res.iterations,
            objective=float("nan"),
            fallback_age=plan_age,
        )
        return row, rec

    obs = initial_observation(scenario)
    hist_row = np.array([obs.setpoints[k][0] for k in scenario.actuator_keys])
    nominal = np.tile(hist_row, (H + 1, 1))
    row, rec = solve_for(0, obs, nominal)
    records.append(rec)
    if progress:
        progress(0, K, rec)

    for k in range(K):
        applied[k] = row
        for j in range(ratio):
            per = k * ratio + j
            log.setpoints[per] = row
            sim.step_period(row)
            _record_grid(log, sim, per + 1)
            prev_cum = _record_period(log, sim, per, prev_cum)
        if pollution:
            est.advance(np.tile(row, (ratio, 1)))
        if k == K - 1:
            break
        obs = observe(log, (k + 1) * ratio, noise=noise, rng=rng)
        if pollution:
            est.sync(obs)
        base = plan_rows if plan_rows is not None else np.tile(row, (H + 1, 1))
        nominal = _shift_rows(base, (plan_age + 1) * ratio)
        row, rec = solve_for(k + 1, obs, nominal)
        records.append(rec)
        if progress:
            progress(k + 1, K, rec)

    _finalize_log(log, sim)
    return ClosedLoopResult(
        kind=kind,
        log=log,
        metrics=compute_metrics(log, weights),
        records=records,
        applied_controls=applied,
        wall_time=time.perf_counter() - t_start,
    )


@dataclass
class ComparisonResult:
    """Same scenario driven by both controllers."""

    pollution_aware: ClosedLoopResult
    volume_based: ClosedLoopResult

    def summary(self) -> dict:
        a, b = self.pollution_aware.metrics, self.volume_based.metrics
        def pct(new, ref):
            return 100.0 * (new - ref) / ref if ref else float("nan")
        return {
            "release_change_pct": pct(a.release, b.release),
            "treated_volume_change_pct": pct(a.treated_volume, b.treated_volume),
            "flooding": {"fc": a.flooding, "f": b.flooding},
            "cso": {"fc": a.cso, "f": b.cso},
            "release": {"fc": a.release, "f": b.release},
            "treated_volume": {"fc": a.treated_volume, "f": b.treated_volume},
            "growth": {"fc": a.growth, "f": b.growth},
            "regulation": {"fc": a.regulation, "f": b.regulation},
            "wall_time_s": {
                "fc": self.pollution_aware.wall_time,
                "f": self.volume_based.wall_time,
            },
            "fallbacks": {
                "fc": self.pollution_aware.n_fallbacks,
                "f": self.volume_based.n_fallbacks,
            },
        }


def compare_controllers(scenario: Scenario, **kwargs) -> ComparisonResult:
    """Run the pollution-aware and the volume-based controller on the
    same scenario with identical settings."""
    fc = run_closed_loop(scenario, "fc", **kwargs)
    f = run_closed_loop(scenario, "f", **kwargs)
    return ComparisonResult(pollution_aware=fc, volume_based=f)
