"""Shared reference helpers for the test suite."""
from __future__ import annotations

import numpy as np


def am_reference_lagrange(steps: int) -> np.ndarray:
    """Independent Adams-Moulton construction: integrate Lagrange basis polynomials.

    Nodes t_k = -k for k = 0..steps; alpha_k = integral over [-1, 0] of the k-th
    basis polynomial. Different derivation path from the implementation's
    order-condition solve, so the two cross-check each other.
    """
    out = []
    for k in range(steps + 1):
        num = np.poly1d([1.0])
        den = 1.0
        for j in range(steps + 1):
            if j == k:
                continue
            num *= np.poly1d([1.0, float(j)])  # (t + j)
            den *= (-k) - (-j)
        anti = num.integ()
        out.append((anti(0.0) - anti(-1.0)) / den)
    return np.array(out)


def integrate_decay_am(scheme, delta: float, t_end: float = 1.0) -> float:
    """Max error of the AM scheme on dy/dt = -y, y(0) = 1, against exp(-t).

    Startup history is seeded from the exact solution so only the marching
    error is measured. The implicit step is solved in closed form.
    """
    n_steps = int(round(t_end / delta))
    alpha = np.asarray(scheme.alpha)
    s = scheme.steps
    ts = np.arange(n_steps + 1) * delta
    y = np.empty(n_steps + 1)
    y[: s + 1] = np.exp(-ts[: s + 1])  # exact seed, includes y[0]
    for n in range(s + 1, n_steps + 1):
        # y_n = y_{n-1} + delta*(alpha_0*(-y_n) + sum_{k>=1} alpha_k*(-y_{n-k}))
        hist = sum(alpha[k] * (-y[n - k]) for k in range(1, s + 1))
        y[n] = (y[n - 1] + delta * hist) / (1.0 + delta * alpha[0])
    return float(np.max(np.abs(y - np.exp(-ts))))


def tiny_scenario_dict() -> dict:
    """A minimal valid scenario: one virtual tank feeding one plant.

    Fresh copy per call; tests may mutate freely.
    """
    return {
        "name": "tiny",
        "timing": {
            "delta_min": 3.0,
            "control_period_min": 15.0,
            "horizon_steps": 4,
            "sim_periods": 10,
            "am_order": 1,
        },
        "network": {
            "tanks": [
                {"id": "V1", "kind": "virtual", "v_max": 100.0, "beta": 0.05,
                 "external_inflow": True},
                {"id": "P1", "kind": "plant", "v_bar": 50.0, "q_out_min": 0.0,
                 "q_out_max": 5.0},
            ],
            "pipes": [
                {"from": "V1", "to": "P1", "q_max": 5.0, "delay_steps": 1,
                 "control": {"type": "volume_limited"}},
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
            "flooding": 100.0, "cso": 100.0,
            "release": {"S": 1.0, "X": 1.0},
            "regulation": {"S": 1.0},
            "growth": 0.5,
            "slope": 0.01, "curvature": 0.01,
            "final_volume": 0.01, "total_volume": 0.001,
        },
        "xi_max": {"S": 1.0, "X": None},
        "initial_state": {
            "volumes": {"V1": 50.0},
            "concentrations": {"V1": {"S": 0.3}, "P1": {"S": 0.01, "X": 2.0}},
            "setpoints": {"V1->P1": 2.0, "P1": 2.0},
        },
        "influent": {
            "inline": {
                "V1": {"t_min": [-9.0, 42.0], "flow": [2.0, 2.0],
                       "concentrations": {"S": [0.3, 0.3]}},
            },
        },
    }
