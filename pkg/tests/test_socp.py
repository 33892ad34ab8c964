"""Trajectory program builders: structure, feasible sets, and optima."""

import dataclasses

import numpy as np
import pytest
import scipy.optimize

from conftest import tiny_scenario_dict
from sewerflow.discretize import am_coefficients, stencil_residual
from sewerflow.kinetics import exactness_gap
from sewerflow.model import Weights, scenario_from_dict
from sewerflow.simulate import estimate_plant_concentrations, initial_observation
from sewerflow import socp
from sewerflow.solver import ClarabelAdapter


def tiny_scenario():
    return scenario_from_dict(tiny_scenario_dict())


def split_scenario_dict() -> dict:
    """Two storage tanks around a junction, one delayed branch into the plant."""
    return {
        "name": "split",
        "timing": {
            "delta_min": 3.0,
            "control_period_min": 15.0,
            "horizon_steps": 12,
            "sim_periods": 20,
            "am_order": 3,
        },
        "network": {
            "tanks": [
                {"id": "V1", "kind": "virtual", "v_max": 120.0, "beta": 0.05,
                 "external_inflow": True},
                {"id": "D1", "kind": "diversion"},
                {"id": "V2", "kind": "virtual", "v_max": 90.0, "beta": 0.04},
                {"id": "P1", "kind": "plant", "v_bar": 60.0, "q_out_min": 0.0,
                 "q_out_max": 6.0},
            ],
            "pipes": [
                {"from": "V1", "to": "D1", "q_max": 6.0, "delay_steps": 0,
                 "control": {"type": "volume_limited"}},
                {"from": "D1", "to": "V2", "q_max": 6.0, "delay_steps": 0,
                 "control": {"type": "diversion_branch"}},
                {"from": "D1", "to": "P1", "q_max": 4.0, "delay_steps": 1,
                 "control": {"type": "diversion_branch"}},
                {"from": "V2", "to": "P1", "q_max": 5.0, "delay_steps": 0},
            ],
        },
        "biology": {
            "species": ["S", "X"],
            "biomass": "X",
            "plants": {
                "P1": {
                    "death_rate_per_day": 0.01,
                    "effluent_biomass_factor": 0.1,
                    "reactions": [
                        {"name": "S_uptake",
                         "law": {"type": "contois", "mu_per_day": 2.0,
                                 "half_saturation": 0.01, "substrate": "S",
                                 "biomass": "X"},
                         "kappa": {"S": -1.0, "X": 0.5}},
                    ],
                },
            },
        },
        "weights": {
            "flooding": 100.0, "cso": 50.0,
            "release": {"S": 1.0, "X": 0.0},
            "regulation": {"S": 1.0},
            "growth": 0.2,
            "slope": 0.01, "curvature": 0.01,
            "final_volume": 0.01, "total_volume": 0.001,
        },
        "xi_max": {"S": 1.0, "X": None},
        "initial_state": {
            "volumes": {"V1": 60.0, "V2": 40.0},
            "concentrations": {"V1": {"S": 0.3}, "V2": {"S": 0.2},
                               "P1": {"S": 0.01, "X": 2.0}},
            "setpoints": {"V1->D1": 2.0, "D1->V2": 1.0, "D1->P1": 1.0, "P1": 2.6},
        },
        "influent": {
            "inline": {
                "V1": {"t_min": [-9.0, 96.0], "flow": [2.0, 2.0],
                       "concentrations": {"S": [0.3, 0.3]}},
            },
        },
    }


def split_scenario():
    return scenario_from_dict(split_scenario_dict())


def forecasts(sc, obs, horizon):
    nominal = np.tile(
        [obs.setpoints[k][0] for k in sc.actuator_keys], (horizon + 1, 1)
    )
    return estimate_plant_concentrations(sc, obs, nominal, horizon)


# ----------------------------------------------------------------- layout

def test_layout_indices_match_names():
    sc = tiny_scenario()
    lay = socp.VariableLayout.build(sc, 4, True)
    names = lay.var_names()
    assert len(names) == lay.n_vars == len(set(names))
    assert names[lay.q("V1->P1", 3)] == "Q[V1->P1|3]"
    assert names[lay.qout("P1", 0)] == "QOUT[P1|0]"
    assert names[lay.qf("V1", 2)] == "QF[V1|2]"
    assert names[lay.qcso("P1", 4)] == "QCSO[P1|4]"
    assert names[lay.v("V1", 1)] == "V[V1|1]"
    assert names[lay.xi("P1", 1, 3)] == "XI[P1|X|3]"
    assert names[lay.t("P1", 0, 2)] == "T[P1|0|2]"
    assert names[lay.hinge("P1", 0, 4)] == "HG[P1|S|4]"
    assert names[lay.qout_total("P1")] == "QOUTSUM[P1]"
    with pytest.raises(IndexError):
        lay.v("V1", 5)


def _expected_counts(sc, horizon, with_conc):
    net = sc.network
    n_l = horizon + 1
    ratio = sc.timing.steps_per_control
    n_pipes = len(net.pipes)
    n_plants = len(net.plants)
    n_virtual = len(net.virtual_tanks)
    n_volume = len(net.volume_tanks)
    n_unc = sum(1 for p in net.pipes if not p.is_actuated)
    n_vlim = sum(
        1 for p in net.pipes if type(p.control).__name__ == "VolumeLimited"
    )
    n_held = sum(
        1
        for p in net.actuated_pipes
        if type(p.control).__name__ != "DiversionBranch"
    )
    n_div = len(net.diversion_nodes)
    m = sc.n_species
    per = n_pipes + 2 * n_plants + n_virtual + n_volume
    eq = (
        n_unc * n_l
        + n_held * sum(1 for l in range(1, n_l) if l % ratio)
        + n_div * n_l
        + n_plants * n_l
        + n_plants  # horizon-total definitions
        + n_volume * n_l
    )
    ub = (2 * n_pipes + 3 * n_plants + n_virtual + 2 * n_volume + n_vlim) * n_l
    soc = 0
    if with_conc:
        r_tot = sum(sc.biology[t.id].n_reactions for t in net.plants)
        hinges = sum(1 for v in sc.xi_max if np.isfinite(v))
        per += n_plants * m + r_tot + n_plants * hinges
        eq += n_plants * m * n_l
        ub += (n_plants * m + r_tot + 2 * n_plants * hinges) * n_l
        soc = r_tot * n_l
    return per * n_l + n_plants, eq, ub, soc


@pytest.mark.parametrize("make", [tiny_scenario, split_scenario])
@pytest.mark.parametrize("with_conc", [False, True])
def test_row_counts_match_hand_formulas(make, with_conc):
    sc = make()
    obs = initial_observation(sc)
    prog, lay = socp.build_omega(sc, obs, with_concentration=with_conc)
    n_vars, eq, ub, soc = _expected_counts(sc, sc.timing.horizon_steps, with_conc)
    assert prog.n_vars == n_vars == lay.n_vars
    assert prog.n_eq == eq
    assert prog.n_ub == ub
    assert prog.n_soc_blocks == soc


# ------------------------------------------------------------ drain oracle

def drain_weights():
    return Weights(flooding=100.0, cso=100.0, total_volume=0.001)


def test_volume_controller_drains_at_max_permitted_rate():
    sc = tiny_scenario()
    obs = initial_observation(sc)
    prog, lay = socp.build_traj_f(sc, obs, weights=drain_weights())
    res = ClarabelAdapter().solve(prog)
    assert res.ok
    # one actuator block spans the whole 5-step horizon: a single setpoint q;
    # emptying is fastest when the level cap binds at the last period
    q_star = 3.85 / 1.675
    plan = socp.extract_plan(lay, res.x, sc)
    col = list(sc.actuator_keys).index("V1->P1")
    assert plan[:, col] == pytest.approx(q_star, abs=1e-5)
    v_end = res.x[lay.v("V1", 4)]
    beta = sc.network.tank("V1").beta
    assert beta * v_end == pytest.approx(q_star, abs=1e-5)
    expect_obj = 0.001 * (250.0 + 37.5 * (2.0 - q_star))
    assert res.objective == pytest.approx(expect_obj, abs=1e-6)


def test_volume_program_matches_linprog():
    sc = split_scenario()
    obs = initial_observation(sc)
    prog, _ = socp.build_traj_f(sc, obs, weights=drain_weights())
    assert not prog.quads
    res = ClarabelAdapter().solve(prog)
    ref = scipy.optimize.linprog(
        prog.obj_lin,
        A_ub=prog.a_ub.toarray(),
        b_ub=prog.b_ub,
        A_eq=prog.a_eq.toarray(),
        b_eq=prog.b_eq,
        bounds=(None, None),
        method="highs",
    )
    assert res.ok and ref.status == 0
    assert res.objective == pytest.approx(ref.fun + prog.obj_const, rel=1e-7, abs=1e-7)


def test_solution_respects_structural_rows():
    sc = split_scenario()
    obs = initial_observation(sc)
    prog, lay = socp.build_traj_f(sc, obs)
    res = ClarabelAdapter().solve(prog)
    assert res.ok
    x = res.x
    r = prog.residuals(x)
    assert r["eq"] < 1e-7 and r["ub"] < 1e-7
    beta = sc.network.tank("V2").beta
    for l in range(lay.horizon + 1):
        # junction: instant arrivals split across the two branches
        inflow = x[lay.q("V1->D1", l)]
        assert inflow == pytest.approx(
            x[lay.q("D1->V2", l)] + x[lay.q("D1->P1", l)], abs=1e-7
        )
        # uncontrolled pipe follows its source level
        assert x[lay.q("V2->P1", l)] == pytest.approx(
            beta * x[lay.v("V2", l)], abs=1e-7
        )
    plan = socp.extract_plan(lay, x, sc)
    keys = list(sc.actuator_keys)
    ratio = sc.timing.steps_per_control
    held = plan[:, keys.index("V1->D1")]
    for l in range(1, lay.horizon + 1):
        if l % ratio:
            assert held[l] == pytest.approx(held[l - 1], abs=1e-7)


def test_volume_stencil_matches_reference_residual():
    sc = tiny_scenario()
    obs = initial_observation(sc)
    prog, lay = socp.build_traj_f(sc, obs, weights=drain_weights())
    res = ClarabelAdapter().solve(prog)
    assert res.ok
    scheme = am_coefficients(sc.timing.am_order)
    vols = [obs.volumes["V1"][1]] + [res.x[lay.v("V1", l)] for l in range(5)]
    flows = [obs.setpoints["V1->P1"][0]] + [res.x[lay.q("V1->P1", l)] for l in range(5)]
    qf = [0.0] + [res.x[lay.qf("V1", l)] for l in range(5)]
    derivs = [2.0 - q - f for q, f in zip(flows, qf)]
    derivs[0] = 0.0  # stationary history
    for n in range(1, 6):
        resid = stencil_residual(scheme, vols[n - 1 : n + 1], derivs[n - 1 : n + 1], 3.0)
        assert abs(resid) < 1e-6


# ------------------------------------------------------- concentration side

def test_pollution_program_with_neutral_weights_matches_volume_program():
    sc = split_scenario()
    obs = initial_observation(sc)
    neutral = dataclasses.replace(
        sc.weights,
        release=(0.0, 0.0),
        regulation=(0.0, 0.0),
        growth=(0.0,),
        plant_balance=0.0,
        time_balance=0.0,
    )
    xi_in_hat, xi_hat = forecasts(sc, obs, sc.timing.horizon_steps)
    prog_fc, lay_fc = socp.build_traj_fc(sc, obs, xi_in_hat, xi_hat, weights=neutral)
    prog_f, lay_f = socp.build_traj_f(sc, obs, weights=neutral)
    assert lay_f.n_vars < lay_fc.n_vars
    res_fc = ClarabelAdapter().solve(prog_fc)
    res_f = ClarabelAdapter().solve(prog_f)
    assert res_fc.ok and res_f.ok
    assert res_fc.objective == pytest.approx(res_f.objective, rel=1e-6, abs=1e-6)


def test_relaxed_rates_reach_the_rate_law_when_growth_pays():
    sc = tiny_scenario()
    obs = initial_observation(sc)
    xi_in_hat, xi_hat = forecasts(sc, obs, sc.timing.horizon_steps)
    prog, lay = socp.build_traj_fc(sc, obs, xi_in_hat, xi_hat)
    res = ClarabelAdapter().solve(prog)
    assert res.ok
    law = sc.biology["P1"].laws[0]
    worst = 0.0
    for l in range(lay.horizon + 1):
        s = res.x[lay.xi("P1", 0, l)]
        xb = res.x[lay.xi("P1", 1, l)]
        t = res.x[lay.t("P1", 0, l)]
        worst = max(worst, abs(exactness_gap(law, max(s, 0.0), max(xb, 0.0), t)))
    assert worst < 1e-5


def test_chord_rows_only_tighten():
    sc = tiny_scenario()
    obs = initial_observation(sc)
    xi_in_hat, xi_hat = forecasts(sc, obs, sc.timing.horizon_steps)
    plain, _ = socp.build_traj_fc(sc, obs, xi_in_hat, xi_hat)
    chorded, _ = socp.build_traj_fc(sc, obs, xi_in_hat, xi_hat, with_chords=True)
    assert chorded.n_ub > plain.n_ub
    r_plain = ClarabelAdapter().solve(plain)
    r_chord = ClarabelAdapter().solve(chorded)
    assert r_plain.ok and r_chord.ok
    assert r_chord.objective >= r_plain.objective - 1e-7


def test_adapter_paths_agree_on_full_program():
    sc = tiny_scenario()
    obs = initial_observation(sc)
    xi_in_hat, xi_hat = forecasts(sc, obs, sc.timing.horizon_steps)
    prog, _ = socp.build_traj_fc(sc, obs, xi_in_hat, xi_hat)
    assert prog.quads  # smoothness terms present
    r_native = ClarabelAdapter(use_native_quadratic=True).solve(prog)
    r_epi = ClarabelAdapter(use_native_quadratic=False).solve(prog)
    assert r_native.ok and r_epi.ok
    assert r_epi.objective == pytest.approx(
        r_native.objective, rel=1e-5, abs=1e-5
    )


# ------------------------------------------------------------- edges, misc

def test_zero_scenario_plans_nothing():
    d = tiny_scenario_dict()
    d["initial_state"]["volumes"]["V1"] = 0.0
    d["initial_state"]["setpoints"] = {"V1->P1": 0.0, "P1": 0.0}
    d["influent"]["inline"]["V1"]["flow"] = [0.0, 0.0]
    sc = scenario_from_dict(d)
    obs = initial_observation(sc)
    prog, lay = socp.build_traj_f(sc, obs)
    res = ClarabelAdapter().solve(prog)
    assert res.ok
    assert abs(res.objective) < 1e-7
    plan = socp.extract_plan(lay, res.x, sc)
    assert np.max(np.abs(plan)) < 1e-6


def test_extract_clips_into_actuator_bounds():
    sc = tiny_scenario()
    lay = socp.VariableLayout.build(sc, 4, False)
    x = np.full(lay.n_vars, -1e-9)
    plan = socp.extract_plan(lay, x, sc)
    assert np.min(plan) >= 0.0
    lo, hi = socp.actuator_bounds(sc)
    big = np.full(lay.n_vars, 1e9)
    assert np.all(socp.extract_plan(lay, big, sc) <= hi + 1e-12)
    row = socp.extract_controls(lay, x, sc)
    assert row.shape == (len(sc.actuator_keys),)


def test_forecast_shape_is_validated():
    sc = tiny_scenario()
    obs = initial_observation(sc)
    bad = np.zeros((2, 1, 2))
    with pytest.raises(ValueError, match="shape"):
        socp.build_traj_fc(sc, obs, bad, bad)


def test_observation_history_must_match():
    sc = tiny_scenario()
    obs = initial_observation(sc)
    stale = dataclasses.replace(obs, tau_ic=obs.tau_ic + 1)
    with pytest.raises(ValueError, match="history"):
        socp.build_traj_f(sc, stale)
