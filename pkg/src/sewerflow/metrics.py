"""Performance metrics evaluated on realized simulation logs.

Everything here is computed from the ground-truth trajectory (the
simulator's record of what actually flowed, overflowed, and left the
plants), never from the controller's internal estimates. Weighted terms
use the scenario's objective weights unless an override is given, so the
same report doubles as an apples-to-apples comparison basis between
controllers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import Weights
from .simulate import TrajectoryLog

_UNITS = {
    "flooding": "m3",
    "cso": "m3",
    "release": "kg",
    "regulation": "kg/m3",
    "growth": "kg",
    "slope": "(m3/min)^2",
    "curvature": "(m3/min)^2",
    "final_volume": "m3",
    "total_volume": "m3",
    "plant_balance": "1",
    "time_balance": "1",
    "treated_volume": "m3",
}


@dataclass(frozen=True)
class MetricsReport:
    """Realized run quality, one number per objective-style term.

    ``release`` and ``growth`` fold in the release/growth weight vectors;
    ``regulation`` folds in the per-species regulation weights. Volumes are
    cubic meters over the whole run. ``slope``/``curvature`` are summed
    squared changes of the applied setpoints between fine periods.
    """

    flooding: float
    cso: float
    release: float
    regulation: float
    growth: float
    slope: float
    curvature: float
    final_volume: float
    total_volume: float
    plant_balance: float
    time_balance: float
    treated_volume: float

    def as_dict(self) -> dict[str, dict]:
        return {
            name: {"value": getattr(self, name), "units": _UNITS[name]}
            for name in _UNITS
        }


def compute_metrics(log: TrajectoryLog, weights: Weights | None = None) -> MetricsReport:
    sc = log.scenario
    w = sc.weights if weights is None else weights
    delta = sc.timing.delta
    net = sc.network
    m = sc.n_species

    flooding = delta * float(log.flood.sum())
    cso = delta * float(log.plant_cso.sum())
    treated = delta * float(log.plant_outflow.sum())

    release = 0.0
    if any(w.release):
        rel_w = np.asarray(w.release, dtype=float)
        # effluent mass rate already carries the settler biomass factor
        release = delta * float(np.einsum("nps,s->", log.effluent_mass_rate, rel_w))

    regulation = 0.0
    if any(w.regulation):
        reg_w = np.asarray(w.regulation, dtype=float)
        caps = np.asarray(sc.xi_max, dtype=float)
        finite = np.isfinite(caps)
        over = np.maximum(log.plant_conc[:, :, finite] - caps[finite], 0.0)
        regulation = float(np.einsum("nps,s->", over, reg_w[finite]))

    growth = 0.0
    if any(w.growth):
        gw = np.asarray(w.growth, dtype=float)
        for pi, pid in enumerate(log.plant_ids):
            bio = sc.biology[pid]
            vbar = net.tank(pid).v_bar
            off = log.reaction_offsets[pi]
            rates = log.reaction_rate[:, off : off + bio.n_reactions]  # kinetic only
            growth += delta * vbar * float(np.einsum("nr,r->", rates, gw[: bio.n_reactions]))

    hist = np.array(
        [sc.initial_state.setpoints[k] for k in sc.actuator_keys], dtype=float
    )
    rows = np.vstack([hist, hist, log.setpoints])  # two history rows for curvature
    d1 = np.diff(rows[1:], axis=0)
    d2 = np.diff(rows, n=2, axis=0)
    slope = float((d1 * d1).sum())
    curvature = float((d2 * d2).sum())

    final_volume = float(log.volume[-1].sum())
    total_volume = float(log.volume.sum())

    caps_out = np.array([net.tank(p).q_out_max for p in log.plant_ids])
    q = log.plant_outflow
    share = q / caps_out
    mix = q.sum(axis=1) / caps_out.sum()
    plant_balance = float(((share - mix[:, None]) ** 2).sum())
    n = log.n_periods
    dev = (n * q - q.sum(axis=0)[None, :]) / caps_out
    time_balance = float((dev * dev).sum())

    return MetricsReport(
        flooding=flooding,
        cso=cso,
        release=release,
        regulation=regulation,
        growth=growth,
        slope=slope,
        curvature=curvature,
        final_volume=final_volume,
        total_volume=total_volume,
        plant_balance=plant_balance,
        time_balance=time_balance,
        treated_volume=treated,
    )


def release_by_species(log: TrajectoryLog) -> np.ndarray:
    """Unweighted released mass per species [kg], settler factor included."""
    return log.scenario.timing.delta * log.effluent_mass_rate.sum(axis=(0, 1))
