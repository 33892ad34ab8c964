"""Metric formulas pinned against hand computations on crafted logs."""
from __future__ import annotations

import copy
import dataclasses

import numpy as np
import pytest

from sewerflow.metrics import MetricsReport, compute_metrics, release_by_species
from sewerflow.model import scenario_from_dict
from sewerflow.simulate import ControlSchedule, run

from conftest import tiny_scenario_dict


def two_plant_dict() -> dict:
    """Two independent catchments with plants of different capacity."""
    return {
        "name": "twin",
        "timing": {
            "delta_min": 2.0,
            "control_period_min": 4.0,
            "horizon_steps": 6,
            "sim_periods": 12,
            "am_order": 1,
        },
        "network": {
            "tanks": [
                {"id": "V1", "kind": "virtual", "v_max": 400.0, "beta": 0.02,
                 "external_inflow": True},
                {"id": "V2", "kind": "virtual", "v_max": 300.0, "beta": 0.02,
                 "external_inflow": True},
                {"id": "P1", "kind": "plant", "v_bar": 80.0, "q_out_min": 0.0,
                 "q_out_max": 6.0},
                {"id": "P2", "kind": "plant", "v_bar": 40.0, "q_out_min": 0.0,
                 "q_out_max": 3.0},
            ],
            "pipes": [
                {"from": "V1", "to": "P1", "q_max": 6.0, "delay_steps": 0,
                 "control": {"type": "pump_or_gate", "q_max": 6.0}},
                {"from": "V2", "to": "P2", "q_max": 3.0, "delay_steps": 0,
                 "control": {"type": "pump_or_gate", "q_max": 3.0}},
            ],
        },
        "biology": {
            "species": ["S", "X"],
            "biomass": "X",
            "plants": {
                pid: {
                    "death_rate_per_day": 0.02,
                    "effluent_biomass_factor": 0.1,
                    "reactions": [
                        {"name": "S_uptake",
                         "law": {"type": "contois", "mu_per_day": 2.0,
                                 "half_saturation": 0.01, "substrate": "S",
                                 "biomass": "X"},
                         "kappa": {"S": -1.0, "X": 0.5}},
                    ],
                }
                for pid in ("P1", "P2")
            },
        },
        "weights": {
            "flooding": 10.0, "cso": 10.0,
            "release": {"S": 1.0, "X": 1.0},
            "regulation": {"S": 2.0},
            "growth": 0.1,
            "slope": 0.01, "curvature": 0.01,
            "final_volume": 0.01, "total_volume": 0.001,
            "plant_balance": 1.0, "time_balance": 0.001,
        },
        "xi_max": {"S": 0.05, "X": None},
        "initial_state": {
            "volumes": {"V1": 150.0, "V2": 100.0},
            "concentrations": {
                "V1": {"S": 0.3}, "V2": {"S": 0.3},
                "P1": {"S": 0.01, "X": 2.0}, "P2": {"S": 0.01, "X": 2.0},
            },
            "setpoints": {"V1->P1": 2.0, "V2->P2": 1.0, "P1": 2.0, "P2": 1.0},
        },
        "influent": {
            "inline": {
                "V1": {"t_min": [-10.0, 60.0], "flow": [2.0, 2.0],
                       "concentrations": {"S": [0.3, 0.3]}},
                "V2": {"t_min": [-10.0, 60.0], "flow": [1.0, 1.0],
                       "concentrations": {"S": [0.3, 0.3]}},
            },
        },
    }


@pytest.fixture(scope="module")
def tiny_log():
    sc = scenario_from_dict(tiny_scenario_dict())
    return run(sc, n_periods=6)


@pytest.fixture(scope="module")
def twin_log():
    sc = scenario_from_dict(two_plant_dict())
    return run(sc, n_periods=8)


def test_report_shape(tiny_log):
    rep = compute_metrics(tiny_log)
    d = rep.as_dict()
    assert set(d) == set(MetricsReport.__dataclass_fields__)
    for name, entry in d.items():
        assert set(entry) == {"value", "units"}
        assert np.isfinite(entry["value"]), name


def test_zero_network_reports_zero():
    d = tiny_scenario_dict()
    d["initial_state"]["volumes"]["V1"] = 0.0
    d["initial_state"]["concentrations"] = {"V1": {}, "P1": {}}
    d["initial_state"]["setpoints"] = {"V1->P1": 0.0, "P1": 0.0}
    d["influent"]["inline"]["V1"]["flow"] = [0.0, 0.0]
    d["influent"]["inline"]["V1"]["concentrations"]["S"] = [0.0, 0.0]
    sc = scenario_from_dict(d)
    sched = ControlSchedule(sc.actuator_keys, np.zeros((6, 2)))
    rep = compute_metrics(run(sc, sched, n_periods=6))
    for name, entry in rep.as_dict().items():
        assert entry["value"] == 0.0, name


def test_flow_volume_metrics_are_integrals(tiny_log):
    log = copy.deepcopy(tiny_log)
    delta = log.scenario.timing.delta
    log.flood[:] = 0.0
    log.flood[2, 0] = 1.5  # rate over one fine period
    log.plant_cso[:] = 0.0
    log.plant_cso[4, 0] = 0.25
    log.plant_outflow[:] = 2.0
    rep = compute_metrics(log)
    assert rep.flooding == pytest.approx(delta * 1.5)
    assert rep.cso == pytest.approx(delta * 0.25)
    assert rep.treated_volume == pytest.approx(delta * 2.0 * log.n_periods)


def test_release_matches_hand_sum(tiny_log):
    log = copy.deepcopy(tiny_log)
    sc = log.scenario
    rate = np.zeros_like(log.effluent_mass_rate)  # (n, 1, 2)
    rate[0, 0] = (0.5, 0.1)
    rate[3, 0] = (0.0, 2.0)
    log.effluent_mass_rate = rate
    rep = compute_metrics(log)
    w = sc.weights.release
    by_hand = sc.timing.delta * (w[0] * 0.5 + w[1] * 0.1 + w[1] * 2.0)
    assert rep.release == pytest.approx(by_hand)
    np.testing.assert_allclose(
        release_by_species(log), sc.timing.delta * np.array([0.5, 2.1]))


def test_release_zero_when_unweighted(tiny_log):
    w = dataclasses.replace(tiny_log.scenario.weights, release=(0.0, 0.0))
    assert compute_metrics(tiny_log, w).release == 0.0
    assert compute_metrics(tiny_log).release > 0.0


def test_regulation_counts_capped_species_only(tiny_log):
    log = copy.deepcopy(tiny_log)
    sc = log.scenario  # xi_max: S capped at 1.0, X uncapped
    conc = np.zeros_like(log.plant_conc)  # (n+1, 1, 2)
    conc[:, 0, 1] = 50.0  # huge biomass, must not count
    conc[2, 0, 0] = 1.4  # 0.4 above the cap
    conc[5, 0, 0] = 0.9  # below the cap
    log.plant_conc = conc
    rep = compute_metrics(log)
    assert rep.regulation == pytest.approx(sc.weights.regulation[0] * 0.4)


def test_growth_ignores_decay_column(tiny_log):
    log = copy.deepcopy(tiny_log)
    sc = log.scenario
    bio = sc.biology["P1"]
    assert log.reaction_rate.shape[1] == bio.n_reactions + 1  # kinetic + decay
    rates = np.zeros_like(log.reaction_rate)
    rates[:, 0] = 0.002  # the Contois reaction
    rates[:, 1] = 99.0  # decay column must not enter
    log.reaction_rate = rates
    rep = compute_metrics(log)
    vbar = sc.network.tank("P1").v_bar
    expect = sc.timing.delta * vbar * sc.weights.growth[0] * 0.002 * log.n_periods
    assert rep.growth == pytest.approx(expect)


def test_smoothness_zero_for_held_setpoints():
    sc = scenario_from_dict(tiny_scenario_dict())
    rep = compute_metrics(run(sc, n_periods=6))  # constant schedule = initial
    assert rep.slope == 0.0
    assert rep.curvature == 0.0


def test_smoothness_counts_single_step():
    sc = scenario_from_dict(tiny_scenario_dict())
    vals = np.tile([2.0, 2.0], (6, 1))
    vals[3:, 0] = 2.7  # one step of 0.7 on the first actuator
    rep = compute_metrics(run(sc, ControlSchedule(sc.actuator_keys, vals), n_periods=6))
    assert rep.slope == pytest.approx(0.7**2)
    assert rep.curvature == pytest.approx(2 * 0.7**2)


def test_smoothness_counts_jump_from_initial_setpoint():
    sc = scenario_from_dict(tiny_scenario_dict())  # initial setpoints (2.0, 2.0)
    vals = np.tile([3.0, 2.0], (6, 1))  # first applied row differs by 1.0
    rep = compute_metrics(run(sc, ControlSchedule(sc.actuator_keys, vals), n_periods=6))
    assert rep.slope == pytest.approx(1.0)
    assert rep.curvature == pytest.approx(2.0)  # +1 then back-to-flat


def test_plant_balance_zero_at_equal_utilization(twin_log):
    log = copy.deepcopy(twin_log)
    caps = np.array([6.0, 3.0])
    log.plant_outflow = np.tile(0.5 * caps, (log.n_periods, 1))  # both at 50%
    rep = compute_metrics(log)
    assert rep.plant_balance == pytest.approx(0.0, abs=1e-12)
    assert rep.time_balance == pytest.approx(0.0, abs=1e-12)


def test_plant_balance_hand_value(twin_log):
    log = copy.deepcopy(twin_log)
    n = log.n_periods
    q = np.zeros((n, 2))
    q[:, 0] = 6.0  # P1 flat out, P2 idle
    log.plant_outflow = q
    rep = compute_metrics(log)
    # share = (1, 0), mix = 6/9 each period
    expect = n * ((1 - 6 / 9) ** 2 + (0 - 6 / 9) ** 2)
    assert rep.plant_balance == pytest.approx(expect)


def test_time_balance_hand_value(twin_log):
    log = copy.deepcopy(twin_log)
    n = log.n_periods
    q = np.zeros((n, 2))
    q[0, 0] = 6.0  # everything in the first period, P1 only
    log.plant_outflow = q
    rep = compute_metrics(log)
    # dev_l = (n*q_l - sum q)/cap: first row (6n-6)/6, others -6/6
    expect = ((n - 1.0)) ** 2 + (n - 1) * 1.0
    assert rep.time_balance == pytest.approx(expect)


def test_metrics_scale_with_network_size():
    """Doubling flows, volumes, and capacities doubles extensive metrics,
    quadruples the quadratic smoothness terms, and leaves the dimensionless
    balance and concentration terms unchanged."""
    base = two_plant_dict()
    scaled = copy.deepcopy(base)
    for t in scaled["network"]["tanks"]:
        for f in ("v_max", "v_bar", "q_out_min", "q_out_max"):
            if f in t:
                t[f] *= 2.0
    for p in scaled["network"]["pipes"]:
        p["q_max"] *= 2.0
        if "q_max" in p["control"]:
            p["control"]["q_max"] *= 2.0
    for tid in scaled["initial_state"]["volumes"]:
        scaled["initial_state"]["volumes"][tid] *= 2.0
    for k in scaled["initial_state"]["setpoints"]:
        scaled["initial_state"]["setpoints"][k] *= 2.0
    for inlet in scaled["influent"]["inline"].values():
        inlet["flow"] = [2.0 * v for v in inlet["flow"]]

    sc1 = scenario_from_dict(base)
    sc2 = scenario_from_dict(scaled)
    n = 10
    vals = np.tile([2.0, 1.0, 2.0, 1.0], (n, 1))
    vals[4:, 0] = 3.2  # step so the smoothness terms are nonzero
    vals[7:, 3] = 0.4  # and the plant shares move around
    rep1 = compute_metrics(run(sc1, ControlSchedule(sc1.actuator_keys, vals), n_periods=n))
    rep2 = compute_metrics(run(sc2, ControlSchedule(sc2.actuator_keys, 2.0 * vals), n_periods=n))

    double = ("flooding", "cso", "release", "growth", "final_volume",
              "total_volume", "treated_volume")
    for name in double:
        assert getattr(rep2, name) == pytest.approx(2 * getattr(rep1, name), rel=1e-9), name
    for name in ("slope", "curvature"):
        assert getattr(rep2, name) == pytest.approx(4 * getattr(rep1, name), rel=1e-12), name
    for name in ("regulation", "plant_balance", "time_balance"):
        assert getattr(rep2, name) == pytest.approx(getattr(rep1, name), rel=1e-9), name
    # the crafted schedule must actually exercise the terms
    assert rep1.slope > 0 and rep1.plant_balance > 0 and rep1.release > 0
