"""Nonlinear ground-truth simulator for sewer networks with treatment plants.

Integrates the full network dynamics with classical RK4 at a configurable
substep resolution, tracking tank volumes, pollutant concentrations (in mass
form ``M = V * xi`` for storage tanks), plant reactor concentrations, and
cumulative conservation ledgers that close the volume and species-mass
balances to machine precision.

Pipe transport delays are realized with half-substep-resolution ring buffers:
every RK4 substep writes two history ticks (the substep-start flows and the
midpoint-stage flows), so delayed lookups land exactly on recorded ticks for
every RK4 stage.

Commanded actuator flows are advisory: the simulator scales them down when
the upstream tank cannot physically supply them within a substep, resolves
diversion-node splits algebraically, spills combined-sewer overflow when a
plant's inflow exceeds its hydraulic capacity, and clips virtual tanks at
capacity (logging the excess as flooding).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import (
    DiversionBranch,
    NetworkModel,
    PumpOrGate,
    Scenario,
    TankKind,
    Uncontrolled,
    VolumeLimited,
    diversion_resolution_order,
)

__all__ = [
    "ControlSchedule",
    "Observation",
    "PlantEstimator",
    "SimState",
    "SimulationError",
    "Simulator",
    "TrajectoryLog",
    "estimate_plant_concentrations",
    "initial_observation",
    "observe",
    "resolve_flood_cso",
    "rhs",
    "run",
]

# law codes used by the vectorized rate evaluation
_CONTOIS = 0
_MONOD = 1
_DECAY = 2

_TINY_FLOW = 1e-12  # below this a mixing flow counts as zero (0/0 hold)
_TINY_VOLUME = 1e-12
_HEEL_FRACTION = 0.01  # of capacity; dead storage under actuated draw-down


class SimulationError(RuntimeError):
    """Raised when the integration produces a non-finite state."""

    def __init__(self, message: str, period: int | None = None):
        super().__init__(message)
        self.period = period


# ---------------------------------------------------------------------------
# control schedules


class ControlSchedule:
    """Actuator setpoints on the fine time grid, one row per fine period.

    Columns follow ``scenario.actuator_keys`` (actuated pipes first, then
    plant outflow setpoints; the latter are advisory for the simulator and
    only shape the controller's plans).
    """

    def __init__(self, keys: tuple[str, ...], values: np.ndarray):
        values = np.asarray(values, dtype=float)
        if values.ndim != 2 or values.shape[1] != len(keys):
            raise ValueError("schedule shape does not match actuator keys")
        if not np.all(np.isfinite(values)):
            raise ValueError("schedule contains non-finite setpoints")
        if np.any(values < 0):
            raise ValueError("schedule contains negative setpoints")
        self.keys = tuple(keys)
        self.values = values

    @property
    def n_periods(self) -> int:
        return self.values.shape[0]

    def row(self, period: int) -> np.ndarray:
        # hold the last row when asked beyond the end
        idx = min(period, self.values.shape[0] - 1)
        return self.values[idx]

    @classmethod
    def constant(cls, scenario: Scenario, n_periods: int | None = None) -> "ControlSchedule":
        """Hold the scenario's initial setpoints for the whole run."""
        keys = scenario.actuator_keys
        n = scenario.timing.sim_periods if n_periods is None else n_periods
        row = np.array([scenario.initial_state.setpoints[k] for k in keys])
        return cls(keys, np.tile(row, (n, 1)))

    @classmethod
    def from_control_periods(
        cls, scenario: Scenario, per_control_period: np.ndarray
    ) -> "ControlSchedule":
        """Expand one row per control period to the fine grid (zero-order hold)."""
        per = np.asarray(per_control_period, dtype=float)
        r = scenario.timing.steps_per_control
        return cls(scenario.actuator_keys, np.repeat(per, r, axis=0))


# ---------------------------------------------------------------------------
# public state snapshot


@dataclass
class SimState:
    """Point-in-time snapshot of the physical state (dict view, test friendly)."""

    period: int
    volumes: dict[str, float]
    concentrations: dict[str, np.ndarray]  # volume tanks and plants
    plant_inlet_conc: dict[str, np.ndarray]


# ---------------------------------------------------------------------------
# trajectory log


@dataclass
class TrajectoryLog:
    """Realized trajectory at fine-grid resolution plus conservation ledgers.

    Grid arrays hold states at period boundaries (``n_periods + 1`` rows);
    per-period arrays hold exact integral averages over each fine period, so
    ``delta * column.sum()`` is the exact integral of the quantity.
    """

    scenario: Scenario
    n_periods: int
    volume_tank_ids: tuple[str, ...]
    plant_ids: tuple[str, ...]
    pipe_keys: tuple[str, ...]
    inlet_ids: tuple[str, ...]

    # grid states, shape (n_periods + 1, ...)
    volume: np.ndarray
    tank_conc: np.ndarray  # (n+1, nv, m)
    plant_conc: np.ndarray  # (n+1, np, m)
    plant_inlet_conc: np.ndarray  # (n+1, np, m)

    # per-period integral averages, shape (n_periods, ...)
    pipe_flow: np.ndarray  # departures (n, n_pipes)
    pipe_arrival: np.ndarray  # arrivals (n, n_pipes)
    influent_flow: np.ndarray  # (n, n_inlets)
    plant_arrival: np.ndarray  # (n, np) total inflow reaching each plant
    plant_outflow: np.ndarray  # (n, np) treated flow (inflow minus overflow)
    plant_cso: np.ndarray  # (n, np)
    flood: np.ndarray  # (n, nv) virtual-tank overflow rate
    spill: np.ndarray  # (n, nv) real-tank overflow rate (model violation flag)
    effluent_mass_rate: np.ndarray  # (n, np, m) released mass flux (settler applied)
    reaction_rate: np.ndarray  # (n, sum r_full) averaged rates, plants concatenated
    reaction_offsets: tuple[int, ...]  # slice bounds of each plant's rate block
    setpoints: np.ndarray  # (n, n_actuators) commanded values

    # cumulative ledgers at the end of the run (exact integrals)
    total_influent_volume: float = 0.0
    total_influent_mass: np.ndarray | None = None  # (m,)
    total_effluent_volume: float = 0.0
    total_effluent_mass: np.ndarray | None = None  # (m,)
    total_cso_volume: float = 0.0
    total_cso_mass: np.ndarray | None = None
    total_flood_volume: float = 0.0
    total_flood_mass: np.ndarray | None = None
    total_spill_volume: float = 0.0
    total_spill_mass: np.ndarray | None = None
    pipe_departed_volume: np.ndarray | None = None  # (n_pipes,)
    pipe_arrived_volume: np.ndarray | None = None
    pipe_departed_mass: np.ndarray | None = None  # (n_pipes, m)
    pipe_arrived_mass: np.ndarray | None = None
    initial_in_transit_volume: float = 0.0
    initial_in_transit_mass: np.ndarray | None = None
    initial_stored_volume: float = 0.0
    initial_stored_mass: np.ndarray | None = None
    clip_residual_volume: float = 0.0
    clip_residual_mass: np.ndarray | None = None

    def final_stored_volume(self) -> float:
        v = float(self.volume[-1].sum())
        in_transit = float(
            self.initial_in_transit_volume
            + self.pipe_departed_volume.sum()
            - self.pipe_arrived_volume.sum()
        )
        return v + in_transit

    def final_stored_mass(self) -> np.ndarray:
        m = self.tank_conc[-1] * self.volume[-1][:, None]
        stored = m.sum(axis=0)
        vbar = np.array([self.scenario.network.tank(p).v_bar for p in self.plant_ids])
        stored = stored + (self.plant_conc[-1] * vbar[:, None]).sum(axis=0)
        in_transit = (
            self.initial_in_transit_mass
            + self.pipe_departed_mass.sum(axis=0)
            - self.pipe_arrived_mass.sum(axis=0)
        )
        return stored + in_transit

    def volume_balance_error(self) -> float:
        """Relative closure error of the global water balance."""
        lhs = self.final_stored_volume() - self.initial_stored_volume
        rhs_ = (
            self.total_influent_volume
            - self.total_effluent_volume
            - self.total_cso_volume
            - self.total_flood_volume
            - self.total_spill_volume
            + self.clip_residual_volume
        )
        scale = max(abs(self.initial_stored_volume), self.total_influent_volume, 1.0)
        return abs(lhs - rhs_) / scale

    def species_balance_error(self) -> np.ndarray:
        """Per-species relative closure error (meaningful when reactions are off)."""
        lhs = self.final_stored_mass() - self.initial_stored_mass
        rhs_ = (
            self.total_influent_mass
            - self.total_effluent_mass
            - self.total_cso_mass
            - self.total_flood_mass
            - self.total_spill_mass
            + self.clip_residual_mass
        )
        scale = np.maximum(
            np.abs(self.initial_stored_mass), np.maximum(self.total_influent_mass, 1.0)
        )
        return np.abs(lhs - rhs_) / scale


# ---------------------------------------------------------------------------
# the simulator core


class Simulator:
    """Incremental RK4 integrator over one scenario.

    One instance owns a packed state vector, pipe delay buffers, and
    accumulation ledgers; :meth:`step_period` advances one fine period.
    """

    def __init__(self, scenario: Scenario, substeps: int = 10):
        if substeps < 1:
            raise ValueError("substeps must be >= 1")
        self.scenario = scenario
        self.substeps = int(substeps)
        self.delta = scenario.timing.delta
        self.h = self.delta / self.substeps
        net = scenario.network
        self.net = net
        self.m = scenario.n_species

        self.volume_tank_ids = tuple(t.id for t in net.non_plant_tanks if t.kind is not TankKind.DIVERSION)
        self.plant_ids = tuple(t.id for t in net.plants)
        self.div_ids = tuple(diversion_resolution_order(net))
        self.pipe_keys = tuple(p.key for p in net.pipes)
        self.inlet_ids = tuple(t.id for t in net.tanks if t.has_external_inflow)
        self.actuator_keys = scenario.actuator_keys

        self._vol_index = {tid: i for i, tid in enumerate(self.volume_tank_ids)}
        self._plant_index = {tid: i for i, tid in enumerate(self.plant_ids)}
        self._div_index = {tid: i for i, tid in enumerate(self.div_ids)}
        self._pipe_index = {k: i for i, k in enumerate(self.pipe_keys)}

        self._compile_network()
        self._compile_biology()
        self._compile_influent()
        self._layout_state()
        self._init_state()

    # -- compilation ------------------------------------------------------

    def _compile_network(self) -> None:
        net = self.net
        nv = len(self.volume_tank_ids)
        npl = len(self.plant_ids)
        n_pipes = len(net.pipes)

        self.v_max = np.array([net.tank(t).v_max for t in self.volume_tank_ids])
        self.v_is_virtual = np.array(
            [net.tank(t).kind is TankKind.VIRTUAL for t in self.volume_tank_ids]
        )
        # dead storage actuated draws cannot extract; keeps the outflow
        # concentration dynamics nonstiff as a tank approaches empty
        self.v_heel = _HEEL_FRACTION * self.v_max
        self.beta = np.array([net.tank(t).beta for t in self.volume_tank_ids])
        self.plant_vbar = np.array([net.tank(p).v_bar for p in self.plant_ids])
        self.plant_qmax = np.array([net.tank(p).q_out_max for p in self.plant_ids])

        # pipe tables
        self.pipe_qmax = np.zeros(n_pipes)
        self.pipe_delay = np.zeros(n_pipes, dtype=int)
        self.pipe_kind = np.zeros(n_pipes, dtype=int)  # 0 unc, 1 pump, 2 vol-lim, 3 branch
        self.pipe_ctrl_hi = np.zeros(n_pipes)  # effective command ceiling
        self.pipe_src_vol = np.full(n_pipes, -1, dtype=int)
        self.pipe_src_div = np.full(n_pipes, -1, dtype=int)
        self.pipe_actuator = np.full(n_pipes, -1, dtype=int)
        act_index = {k: i for i, k in enumerate(self.actuator_keys)}

        for j, p in enumerate(net.pipes):
            self.pipe_qmax[j] = p.q_max
            self.pipe_delay[j] = p.delay_steps
            src = net.tank(p.source)
            if src.kind is TankKind.DIVERSION:
                self.pipe_src_div[j] = self._div_index[src.id]
            else:
                self.pipe_src_vol[j] = self._vol_index[src.id]
            c = p.control
            if isinstance(c, Uncontrolled):
                self.pipe_kind[j] = 0
                self.pipe_ctrl_hi[j] = p.q_max
            elif isinstance(c, PumpOrGate):
                self.pipe_kind[j] = 1
                self.pipe_ctrl_hi[j] = min(c.q_max, p.q_max)
                self.pipe_actuator[j] = act_index[p.key]
            elif isinstance(c, VolumeLimited):
                self.pipe_kind[j] = 2
                self.pipe_ctrl_hi[j] = p.q_max
                self.pipe_actuator[j] = act_index[p.key]
            elif isinstance(c, DiversionBranch):
                self.pipe_kind[j] = 3
                self.pipe_ctrl_hi[j] = p.q_max
                self.pipe_actuator[j] = act_index[p.key]
            else:  # pragma: no cover - exhaustive over the union
                raise TypeError(f"unknown control type {type(c).__name__}")

        # per volume tank: outgoing / incoming pipe index lists
        self.vol_out_unc: list[list[int]] = [[] for _ in range(nv)]
        self.vol_out_act: list[list[int]] = [[] for _ in range(nv)]
        self.vol_in: list[list[int]] = [[] for _ in range(nv)]
        self.vol_inlet = np.full(nv, -1, dtype=int)
        for k, tid in enumerate(self.inlet_ids):
            if tid in self._vol_index:
                self.vol_inlet[self._vol_index[tid]] = k
        self.div_in: list[list[int]] = [[] for _ in self.div_ids]
        self.div_branches: list[list[int]] = [[] for _ in self.div_ids]
        self.plant_in: list[list[int]] = [[] for _ in self.plant_ids]

        for j, p in enumerate(net.pipes):
            if self.pipe_src_vol[j] >= 0:
                if self.pipe_kind[j] == 0:
                    self.vol_out_unc[self.pipe_src_vol[j]].append(j)
                else:
                    self.vol_out_act[self.pipe_src_vol[j]].append(j)
            else:
                self.div_branches[self.pipe_src_div[j]].append(j)
            tgt = net.tank(p.target)
            if tgt.kind is TankKind.PLANT:
                self.plant_in[self._plant_index[tgt.id]].append(j)
            elif tgt.kind is TankKind.DIVERSION:
                self.div_in[self._div_index[tgt.id]].append(j)
            else:
                self.vol_in[self._vol_index[tgt.id]].append(j)

        self.plant_setpoint_col = np.array(
            [act_index[pid] for pid in self.plant_ids], dtype=int
        )

    def _compile_biology(self) -> None:
        m = self.m
        self.plant_kappa = []  # (m, r_full) per plant
        self.plant_law_code = []
        self.plant_law_mu = []
        self.plant_law_k = []
        self.plant_law_xbar = []
        self.plant_law_sub = []
        self.plant_law_bio = []
        self.r_full = []
        for pid in self.plant_ids:
            bio = self.scenario.biology[pid]
            kap = np.array(bio.full_kappa(), dtype=float)
            laws = bio.full_laws()
            code = np.zeros(len(laws), dtype=int)
            mu = np.zeros(len(laws))
            kk = np.zeros(len(laws))
            xbar = np.zeros(len(laws))
            sub = np.zeros(len(laws), dtype=int)
            bi = np.zeros(len(laws), dtype=int)
            for r, law in enumerate(laws):
                name = type(law).__name__
                if name == "Contois":
                    code[r] = _CONTOIS
                    mu[r], kk[r] = law.mu, law.k_c
                    sub[r], bi[r] = law.substrate_index, law.biomass_index
                elif name == "MonodFixedBiomass":
                    code[r] = _MONOD
                    mu[r], kk[r], xbar[r] = law.mu, law.k_m, law.x_bar
                    sub[r] = law.substrate_index
                elif name == "FirstOrderDecay":
                    code[r] = _DECAY
                    mu[r] = law.rate
                    bi[r] = law.biomass_index
                else:  # pragma: no cover
                    raise TypeError(f"unknown rate law {name}")
            if kap.shape != (m, len(laws)):
                raise ValueError("stoichiometry shape mismatch")
            self.plant_kappa.append(kap)
            self.plant_law_code.append(code)
            self.plant_law_mu.append(mu)
            self.plant_law_k.append(kk)
            self.plant_law_xbar.append(xbar)
            self.plant_law_sub.append(sub)
            self.plant_law_bio.append(bi)
            self.r_full.append(len(laws))
        self.r_off = np.concatenate([[0], np.cumsum(self.r_full)]).astype(int)
        self.r_total = int(self.r_off[-1])
        # effluent retention: biomass leaves the settler attenuated
        self.plant_eff_factor = np.ones((len(self.plant_ids), m))
        for i, pid in enumerate(self.plant_ids):
            bio = self.scenario.biology[pid]
            self.plant_eff_factor[i, bio.biomass_index] = bio.effluent_biomass_factor

    def _compile_influent(self) -> None:
        inf = self.scenario.influent
        delta = self.delta
        self.hist = inf.history_steps
        self.inf_flow = np.stack([np.asarray(inf.flow[i], dtype=float) for i in self.inlet_ids])
        self.inf_conc = np.stack(
            [np.asarray(inf.conc[i], dtype=float) for i in self.inlet_ids]
        )  # (n_inlets, n_grid, m)
        self.inf_tmax = (self.inf_flow.shape[1] - 1 - self.hist) * delta

    def _influent_at(self, t_min: float) -> tuple[np.ndarray, np.ndarray]:
        """Piecewise-linear influent (flow, concentration) at absolute time t."""
        u = t_min / self.delta + self.hist
        n = self.inf_flow.shape[1]
        if u <= 0:
            return self.inf_flow[:, 0], self.inf_conc[:, 0]
        if u >= n - 1:
            return self.inf_flow[:, -1], self.inf_conc[:, -1]
        i0 = int(math.floor(u))
        w = u - i0
        q = (1 - w) * self.inf_flow[:, i0] + w * self.inf_flow[:, i0 + 1]
        c = (1 - w) * self.inf_conc[:, i0] + w * self.inf_conc[:, i0 + 1]
        return q, c

    # -- packed state layout ----------------------------------------------

    def _layout_state(self) -> None:
        nv = len(self.volume_tank_ids)
        npl = len(self.plant_ids)
        n_pipes = len(self.pipe_keys)
        n_in = len(self.inlet_ids)
        m = self.m
        off = 0

        def claim(size: int) -> slice:
            nonlocal off
            s = slice(off, off + size)
            off += size
            return s

        self.sV = claim(nv)
        self.sM = claim(nv * m)
        self.sXi = claim(npl * m)
        self.sInfV = claim(1)
        self.sInfM = claim(m)
        self.sEffV = claim(npl)
        self.sEffM = claim(npl * m)
        self.sCsoV = claim(npl)
        self.sCsoM = claim(npl * m)
        self.sDepV = claim(n_pipes)
        self.sDepM = claim(n_pipes * m)
        self.sArrV = claim(n_pipes)
        self.sArrM = claim(n_pipes * m)
        self.sInfVk = claim(n_in)  # per-inlet volume, for figure exports
        self.sPhi = claim(self.r_total)
        self.n_state = off

    def _init_state(self) -> None:
        nv = len(self.volume_tank_ids)
        npl = len(self.plant_ids)
        m = self.m
        y = np.zeros(self.n_state)
        init = self.scenario.initial_state
        V0 = np.array([init.volumes[t] for t in self.volume_tank_ids])
        xi0 = np.stack([np.asarray(init.concentrations[t], dtype=float) for t in self.volume_tank_ids]) if nv else np.zeros((0, m))
        y[self.sV] = V0
        y[self.sM] = (xi0 * V0[:, None]).ravel()
        if npl:
            y[self.sXi] = np.stack(
                [np.asarray(init.concentrations[p], dtype=float) for p in self.plant_ids]
            ).ravel()
        self.y = y
        self.period = 0
        self.tick = 0  # half-substep tick counter, two per substep

        # plant inlet mixture hold: seed with the plant's own concentration
        self.xi_plant_in = (
            y[self.sXi].reshape(npl, m).copy() if npl else np.zeros((0, m))
        )

        # flood / spill accumulators (post-substep exact additions)
        self.flood_vol = np.zeros(nv)
        self.flood_mass = np.zeros((nv, m))
        self.spill_vol = np.zeros(nv)
        self.spill_mass = np.zeros((nv, m))
        self.clip_res_vol = 0.0
        self.clip_res_mass = np.zeros(m)

        self._init_delay_buffers()

    def _steady_history_flows(self) -> tuple[np.ndarray, np.ndarray]:
        """Departure flow and concentration per pipe under the initial steady regime."""
        n_pipes = len(self.pipe_keys)
        m = self.m
        init = self.scenario.initial_state
        V0 = self.y[self.sV]
        xi0 = np.divide(
            self.y[self.sM].reshape(-1, m),
            np.maximum(V0, _TINY_VOLUME)[:, None],
            out=np.zeros((len(V0), m)),
            where=V0[:, None] > _TINY_VOLUME,
        )
        flow = np.zeros(n_pipes)
        conc = np.zeros((n_pipes, m))
        # non-branch pipes first
        for j in range(n_pipes):
            sv = self.pipe_src_vol[j]
            if sv < 0:
                continue
            if self.pipe_kind[j] == 0:
                flow[j] = min(self.beta[sv] * V0[sv], self.pipe_qmax[j])
            else:
                key = self.pipe_keys[j]
                flow[j] = min(init.setpoints[key], self.pipe_ctrl_hi[j])
            conc[j] = xi0[sv]
        # branches in topological order, splitting the steady node inflow
        for d, _ in enumerate(self.div_ids):
            q_in = sum(flow[j] for j in self.div_in[d])
            m_in = sum(flow[j] * conc[j] for j in self.div_in[d])
            mix = m_in / q_in if q_in > _TINY_FLOW else np.zeros(m)
            branches = self.div_branches[d]
            cmd = np.array([init.setpoints[self.pipe_keys[j]] for j in branches])
            qmax = np.array([self.pipe_ctrl_hi[j] for j in branches])
            alloc = _split_flow(q_in, cmd, qmax)
            for b, j in enumerate(branches):
                flow[j] = alloc[b]
                conc[j] = mix
        return flow, conc

    def _init_delay_buffers(self) -> None:
        """Pre-load ring buffers as if the initial regime held for all past time."""
        m = self.m
        self.buffers: dict[int, np.ndarray] = {}
        self.buffer_len: dict[int, int] = {}
        hist_flow, hist_conc = self._steady_history_flows()
        self._hist_flow = hist_flow
        self._hist_conc = hist_conc
        for j, d in enumerate(self.pipe_delay):
            if d <= 0:
                continue
            lag = 2 * int(d) * self.substeps
            length = lag + 4
            buf = np.zeros((length, 1 + m))
            buf[:, 0] = hist_flow[j]
            buf[:, 1:] = hist_conc[j]
            self.buffers[j] = buf
            self.buffer_len[j] = length
        self.delay_ticks = {j: 2 * int(self.pipe_delay[j]) * self.substeps for j in self.buffers}
        # departures jump when setpoints change at period boundaries; boundary
        # ticks keep the right limit, these keep the left limit for the reads
        # that close the preceding period's integrals
        self.left_rows: dict[int, dict[int, np.ndarray]] = {j: {} for j in self.buffers}

    def initial_in_transit(self) -> tuple[float, np.ndarray]:
        """Water and mass already travelling in delayed pipes at t = 0."""
        vol = 0.0
        mass = np.zeros(self.m)
        for j, d in enumerate(self.pipe_delay):
            if d <= 0:
                continue
            travel = d * self.delta
            vol += self._hist_flow[j] * travel
            mass += self._hist_flow[j] * self._hist_conc[j] * travel
        return vol, mass

    def stored_volume(self) -> float:
        return float(self.y[self.sV].sum())

    def stored_mass(self) -> np.ndarray:
        m = self.m
        mass = self.y[self.sM].reshape(-1, m).sum(axis=0)
        xi = self.y[self.sXi].reshape(-1, m)
        return mass + (xi * self.plant_vbar[:, None]).sum(axis=0)

    def clone(self) -> "Simulator":
        dup = object.__new__(Simulator)
        dup.__dict__.update(self.__dict__)
        dup.y = self.y.copy()
        dup.xi_plant_in = self.xi_plant_in.copy()
        dup.buffers = {j: b.copy() for j, b in self.buffers.items()}
        dup.left_rows = {j: dict(v) for j, v in self.left_rows.items()}
        dup.flood_vol = self.flood_vol.copy()
        dup.flood_mass = self.flood_mass.copy()
        dup.spill_vol = self.spill_vol.copy()
        dup.spill_mass = self.spill_mass.copy()
        dup.clip_res_mass = self.clip_res_mass.copy()
        return dup

    # -- flow resolution ---------------------------------------------------

    def _read_delayed(self, j: int, tick: int, want_left: bool = False) -> np.ndarray:
        if want_left:
            row = self.left_rows[j].get(tick)
            if row is not None:
                return row
        buf = self.buffers[j]
        return buf[tick % self.buffer_len[j]]

    def _plant_rates(self, p: int, xi: np.ndarray) -> np.ndarray:
        """Reaction rates for plant ``p`` at concentrations ``xi`` (clamped at 0)."""
        code = self.plant_law_code[p]
        mu = self.plant_law_mu[p]
        kk = self.plant_law_k[p]
        xbar = self.plant_law_xbar[p]
        s = np.maximum(xi[self.plant_law_sub[p]], 0.0)
        x = np.maximum(xi[self.plant_law_bio[p]], 0.0)
        rates = np.zeros(len(code))
        for r in range(len(code)):
            if code[r] == _CONTOIS:
                den = kk[r] * x[r] + s[r]
                rates[r] = mu[r] * s[r] * x[r] / den if den > 0 else 0.0
            elif code[r] == _MONOD:
                rates[r] = mu[r] * s[r] * xbar[r] / (kk[r] + s[r])
            else:
                rates[r] = mu[r] * x[r]
        return rates

    def _flows(
        self,
        t_min: float,
        V: np.ndarray,
        M: np.ndarray,
        xiP: np.ndarray,
        setrow: np.ndarray,
        tick: int,
        want_left: bool = False,
    ) -> dict:
        """Resolve every instantaneous flow at one RK4 stage.

        ``tick`` is the absolute half-substep tick of the stage time; delayed
        arrivals are read at ``tick - 2 * delay * substeps``. ``want_left``
        marks a stage evaluation sitting exactly on a period boundary that
        belongs to the closing period (it must see pre-jump departures).
        """
        m = self.m
        nv = len(self.volume_tank_ids)
        npl = len(self.plant_ids)
        n_pipes = len(self.pipe_keys)
        h = self.h

        xi_tank = np.divide(
            M,
            np.maximum(V, _TINY_VOLUME)[:, None],
            out=np.zeros_like(M),
            where=V[:, None] > _TINY_VOLUME,
        )

        inf_q, inf_c = self._influent_at(t_min)

        dep = np.zeros(n_pipes)
        dep_c = np.zeros((n_pipes, m))

        # delayed arrival lookup, shared below
        def arrival(j: int) -> tuple[float, np.ndarray]:
            if self.pipe_delay[j] > 0:
                row = self._read_delayed(j, tick - self.delay_ticks[j], want_left)
                return row[0], row[1:]
            return dep[j], dep_c[j]

        # 1) uncontrolled departures follow the linear storage law
        for v in range(nv):
            for j in self.vol_out_unc[v]:
                dep[j] = min(self.beta[v] * max(V[v], 0.0), self.pipe_qmax[j])
                dep_c[j] = xi_tank[v]

        # 2) actuated departures from storage, scaled to what the tank can supply
        for v in range(nv):
            acts = self.vol_out_act[v]
            if not acts:
                continue
            cmd = np.array([min(setrow[self.pipe_actuator[j]], self.pipe_ctrl_hi[j]) for j in acts])
            total_cmd = cmd.sum()
            if total_cmd <= _TINY_FLOW:
                continue
            credit = 0.0
            if self.vol_inlet[v] >= 0:
                credit += inf_q[self.vol_inlet[v]]
            for j in self.vol_in[v]:
                if self.pipe_delay[j] > 0:
                    credit += self._read_delayed(j, tick - self.delay_ticks[j])[0]
                elif self.pipe_kind[j] == 0:
                    credit += dep[j]  # zero-delay uncontrolled inflow, already resolved
            unc_out = sum(dep[j] for j in self.vol_out_unc[v])
            avail = max(V[v] - self.v_heel[v], 0.0) / h + credit - unc_out
            gamma = min(1.0, max(0.0, avail) / total_cmd)
            for q, j in zip(cmd * gamma, acts):
                dep[j] = q
                dep_c[j] = xi_tank[v]

        # 3) diversion nodes in topological order: split inflow across branches
        div_mix = np.zeros((len(self.div_ids), m))
        for d in range(len(self.div_ids)):
            q_in = 0.0
            m_in = np.zeros(m)
            for j in self.div_in[d]:
                q, c = arrival(j)
                q_in += q
                m_in += q * c
            mix = m_in / q_in if q_in > _TINY_FLOW else np.zeros(m)
            div_mix[d] = mix
            branches = self.div_branches[d]
            cmd = np.array([setrow[self.pipe_actuator[j]] for j in branches])
            qmax = np.array([self.pipe_ctrl_hi[j] for j in branches])
            alloc = _split_flow(q_in, cmd, qmax)
            for b, j in enumerate(branches):
                dep[j] = alloc[b]
                dep_c[j] = mix

        # 4) plants: inflow above hydraulic capacity spills as combined overflow
        plant_arr = np.zeros(npl)
        plant_arr_mass = np.zeros((npl, m))
        for p in range(npl):
            for j in self.plant_in[p]:
                q, c = arrival(j)
                plant_arr[p] += q
                plant_arr_mass[p] += q * c
        q_cso = np.maximum(plant_arr - self.plant_qmax, 0.0)
        q_out = plant_arr - q_cso
        xi_in = np.where(
            (plant_arr > _TINY_FLOW)[:, None],
            plant_arr_mass / np.maximum(plant_arr, _TINY_FLOW)[:, None],
            self.xi_plant_in,
        )

        # 5) arrivals at every pipe target (for ledger + tank derivatives)
        arr = np.zeros(n_pipes)
        arr_c = np.zeros((n_pipes, m))
        for j in range(n_pipes):
            arr[j], arr_c[j] = arrival(j)

        return {
            "inf_q": inf_q,
            "inf_c": inf_c,
            "dep": dep,
            "dep_c": dep_c,
            "arr": arr,
            "arr_c": arr_c,
            "plant_arr": plant_arr,
            "q_cso": q_cso,
            "q_out": q_out,
            "xi_in": xi_in,
        }

    def _rhs(
        self,
        t_min: float,
        y: np.ndarray,
        setrow: np.ndarray,
        tick: int,
        want_left: bool = False,
    ) -> tuple[np.ndarray, dict]:
        m = self.m
        nv = len(self.volume_tank_ids)
        npl = len(self.plant_ids)
        V = y[self.sV]
        M = y[self.sM].reshape(nv, m)
        xiP = y[self.sXi].reshape(npl, m)

        fl = self._flows(t_min, V, M, xiP, setrow, tick, want_left)
        dep, dep_c = fl["dep"], fl["dep_c"]
        arr, arr_c = fl["arr"], fl["arr_c"]

        dV = np.zeros(nv)
        dM = np.zeros((nv, m))
        for v in range(nv):
            if self.vol_inlet[v] >= 0:
                k = self.vol_inlet[v]
                dV[v] += fl["inf_q"][k]
                dM[v] += fl["inf_q"][k] * fl["inf_c"][k]
            for j in self.vol_in[v]:
                dV[v] += arr[j]
                dM[v] += arr[j] * arr_c[j]
            for j in self.vol_out_unc[v] + self.vol_out_act[v]:
                dV[v] -= dep[j]
                dM[v] -= dep[j] * dep_c[j]

        # plants: constant reactor volume, settler retains most biomass
        dXi = np.zeros((npl, m))
        phi = np.zeros(self.r_total)
        eff_mass = np.zeros((npl, m))
        for p in range(npl):
            rates = self._plant_rates(p, xiP[p])
            phi[self.r_off[p] : self.r_off[p + 1]] = rates
            growth = self.plant_kappa[p] @ rates
            xi_out = self.plant_eff_factor[p] * xiP[p]
            dXi[p] = growth + (fl["q_out"][p] / self.plant_vbar[p]) * (fl["xi_in"][p] - xi_out)
            eff_mass[p] = fl["q_out"][p] * xi_out

        dy = np.zeros(self.n_state)
        dy[self.sV] = dV
        dy[self.sM] = dM.ravel()
        dy[self.sXi] = dXi.ravel()
        dy[self.sInfV] = fl["inf_q"].sum()
        dy[self.sInfM] = (fl["inf_q"][:, None] * fl["inf_c"]).sum(axis=0)
        dy[self.sEffV] = fl["q_out"]
        dy[self.sEffM] = eff_mass.ravel()
        dy[self.sCsoV] = fl["q_cso"]
        dy[self.sCsoM] = (fl["q_cso"][:, None] * fl["xi_in"]).ravel()
        dy[self.sDepV] = dep
        dy[self.sDepM] = (dep[:, None] * dep_c).ravel()
        dy[self.sArrV] = arr
        dy[self.sArrM] = (arr[:, None] * arr_c).ravel()
        dy[self.sInfVk] = fl["inf_q"]
        dy[self.sPhi] = phi
        return dy, fl

    # -- integration -------------------------------------------------------

    def _write_tick(self, tick: int, fl: dict) -> None:
        for j, buf in self.buffers.items():
            row = buf[tick % self.buffer_len[j]]
            row[0] = fl["dep"][j]
            row[1:] = fl["dep_c"][j]

    def _store_left(self, tick: int, fl: dict) -> None:
        horizon = max(self.delay_ticks.values(), default=0) + 4
        for j, store in self.left_rows.items():
            store[tick] = np.concatenate(([fl["dep"][j]], fl["dep_c"][j]))
            for old in [t for t in store if t < tick - horizon]:
                del store[old]

    def step_period(self, setrow: np.ndarray) -> None:
        """Advance one fine period under constant setpoints ``setrow``."""
        h = self.h
        m = self.m
        nv = len(self.volume_tank_ids)
        t0_period = self.period * self.delta
        for i in range(self.substeps):
            t0 = t0_period + i * h
            last = i == self.substeps - 1  # stage 4 sits on the period boundary
            y = self.y
            k1, fl1 = self._rhs(t0, y, setrow, self.tick)
            self._write_tick(self.tick, fl1)
            k2, fl2 = self._rhs(t0 + h / 2, y + (h / 2) * k1, setrow, self.tick + 1)
            self._write_tick(self.tick + 1, fl2)
            k3, _ = self._rhs(t0 + h / 2, y + (h / 2) * k2, setrow, self.tick + 1)
            k4, fl4 = self._rhs(t0 + h, y + h * k3, setrow, self.tick + 2, want_left=last)
            if last:
                self._store_left(self.tick + 2, fl4)
            self.y = y + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
            self.tick += 2

            # hold update: latest well-defined plant inlet mixture
            has_inflow = fl4["plant_arr"] > _TINY_FLOW
            self.xi_plant_in = np.where(
                has_inflow[:, None], fl4["xi_in"], self.xi_plant_in
            )

            self._resolve_overflow_and_clip()

        self.period += 1
        if not np.all(np.isfinite(self.y)):
            raise SimulationError(
                f"non-finite state after period {self.period}", period=self.period
            )

    def _resolve_overflow_and_clip(self) -> None:
        """Post-substep: clip tanks at capacity (flood/spill) and at zero."""
        m = self.m
        V = self.y[self.sV]
        M = self.y[self.sM].reshape(-1, m)

        over = V > self.v_max
        for v in np.nonzero(over)[0]:
            excess = V[v] - self.v_max[v]
            frac = excess / V[v]
            lost_mass = M[v] * frac
            if self.v_is_virtual[v]:
                self.flood_vol[v] += excess
                self.flood_mass[v] += lost_mass
            else:
                self.spill_vol[v] += excess
                self.spill_mass[v] += lost_mass
            V[v] = self.v_max[v]
            M[v] -= lost_mass

        # numerical guard: tiny negative volumes / masses are clipped to zero;
        # the residual records what clipping ADDED so the balance still closes
        neg = V < 0
        if np.any(neg):
            self.clip_res_vol -= float(V[neg].sum())
            V[neg] = 0.0
        negm = M < 0
        if np.any(negm):
            self.clip_res_mass -= np.where(negm, M, 0.0).sum(axis=0)
            M[negm] = 0.0
        xiP = self.y[self.sXi].reshape(-1, m)
        negp = xiP < 0
        if np.any(negp):
            self.clip_res_mass -= (
                np.where(negp, xiP, 0.0) * self.plant_vbar[:, None]
            ).sum(axis=0)
            xiP[negp] = 0.0

        self.y[self.sM] = M.ravel()
        self.y[self.sXi] = xiP.ravel()

    # -- snapshots ----------------------------------------------------------

    def grid_state(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        m = self.m
        V = self.y[self.sV].copy()
        M = self.y[self.sM].reshape(-1, m)
        xi = np.divide(
            M,
            np.maximum(V, _TINY_VOLUME)[:, None],
            out=np.zeros_like(M),
            where=V[:, None] > _TINY_VOLUME,
        )
        xiP = self.y[self.sXi].reshape(-1, m).copy()
        return V, xi, xiP, self.xi_plant_in.copy()

    def snapshot(self) -> SimState:
        V, xi, xiP, xi_in = self.grid_state()
        vols = {tid: float(V[i]) for i, tid in enumerate(self.volume_tank_ids)}
        conc = {tid: xi[i].copy() for i, tid in enumerate(self.volume_tank_ids)}
        conc.update({pid: xiP[i].copy() for i, pid in enumerate(self.plant_ids)})
        inlet = {pid: xi_in[i].copy() for i, pid in enumerate(self.plant_ids)}
        return SimState(self.period, vols, conc, inlet)


def _split_flow(q_in: float, commanded: np.ndarray, q_max: np.ndarray) -> np.ndarray:
    """Allocate a junction's inflow across branches.

    Proportional to commanded setpoints (or to branch capacities when nothing
    is commanded), clipped at branch capacity; residual flow cascades to
    branches with spare room. Assumes total capacity can pass ``q_in``.
    """
    n = len(commanded)
    alloc = np.zeros(n)
    remaining = q_in
    weights = commanded.copy()
    if weights.sum() <= _TINY_FLOW:
        weights = q_max.copy()
    for _ in range(n + 1):
        if remaining <= _TINY_FLOW:
            break
        room = q_max - alloc
        open_b = (room > _TINY_FLOW) & (weights > _TINY_FLOW)
        if not np.any(open_b):
            open_b = room > _TINY_FLOW
            if not np.any(open_b):
                break
            weights = np.where(open_b, room, 0.0)
        w = np.where(open_b, weights, 0.0)
        share = remaining * w / w.sum()
        take = np.minimum(share, room)
        alloc += take
        remaining -= take.sum()
    if remaining > 1e-9:
        # should be unreachable on a validated network (in-capacity bounded by
        # out-capacity); preserve mass rather than lose it
        alloc += remaining * q_max / q_max.sum()
    return alloc


# ---------------------------------------------------------------------------
# module-level operations


def rhs(
    scenario: Scenario,
    state: SimState,
    setpoints: dict[str, float],
    t_min: float = 0.0,
    substeps: int = 10,
) -> dict:
    """Instantaneous derivatives at a given state (dict view, for inspection).

    Delay-buffer history is reconstructed as if the scenario's initial regime
    held for all past time, so this is primarily a stationary-point probe.
    """
    sim = Simulator(scenario, substeps=substeps)
    m = sim.m
    V = np.array([state.volumes[t] for t in sim.volume_tank_ids])
    sim.y[sim.sV] = V
    sim.y[sim.sM] = (
        np.stack([np.asarray(state.concentrations[t], dtype=float) for t in sim.volume_tank_ids])
        * V[:, None]
    ).ravel() if len(V) else sim.y[sim.sM]
    if sim.plant_ids:
        sim.y[sim.sXi] = np.stack(
            [np.asarray(state.concentrations[p], dtype=float) for p in sim.plant_ids]
        ).ravel()
        sim.xi_plant_in = np.stack(
            [np.asarray(state.plant_inlet_conc[p], dtype=float) for p in sim.plant_ids]
        )
    setrow = np.array([setpoints[k] for k in sim.actuator_keys])
    dy, fl = sim._rhs(t_min, sim.y, setrow, sim.tick)
    nv = len(sim.volume_tank_ids)
    dV = dy[sim.sV]
    dM = dy[sim.sM].reshape(nv, m)
    xi = np.divide(
        sim.y[sim.sM].reshape(nv, m),
        np.maximum(V, _TINY_VOLUME)[:, None],
        out=np.zeros((nv, m)),
        where=V[:, None] > _TINY_VOLUME,
    )
    # d(xi)/dt from the mass form: (dM - xi dV) / V
    dxi = {}
    for i, tid in enumerate(sim.volume_tank_ids):
        if V[i] > _TINY_VOLUME:
            dxi[tid] = (dM[i] - xi[i] * dV[i]) / V[i]
        else:
            dxi[tid] = np.zeros(m)
    dxiP = dy[sim.sXi].reshape(-1, m)
    return {
        "dV": {tid: float(dV[i]) for i, tid in enumerate(sim.volume_tank_ids)},
        "dM": {tid: dM[i] for i, tid in enumerate(sim.volume_tank_ids)},
        "dxi": dxi
        | {pid: dxiP[i].copy() for i, pid in enumerate(sim.plant_ids)},
        "pipe_flow": {k: float(fl["dep"][j]) for j, k in enumerate(sim.pipe_keys)},
        "plant_inflow": {
            pid: float(fl["plant_arr"][i]) for i, pid in enumerate(sim.plant_ids)
        },
        "plant_outflow": {
            pid: float(fl["q_out"][i]) for i, pid in enumerate(sim.plant_ids)
        },
        "plant_cso": {pid: float(fl["q_cso"][i]) for i, pid in enumerate(sim.plant_ids)},
    }


def resolve_flood_cso(
    network: NetworkModel,
    tentative_volumes: dict[str, float],
    plant_inflows: dict[str, float],
    dt_min: float = 1.0,
) -> tuple[dict[str, float], dict[str, float], dict[str, float]]:
    """Resolve capacity violations in a tentative state.

    Virtual tanks above capacity are clipped, with the excess reported as a
    flood rate over ``dt_min``; plant inflow above hydraulic capacity becomes
    combined-sewer overflow so that inflow minus overflow equals plant flow.

    Returns ``(volumes, flood_rate, cso_rate)``.
    """
    vols = dict(tentative_volumes)
    flood: dict[str, float] = {}
    for tid, v in tentative_volumes.items():
        tank = network.tank(tid)
        if tank.kind is TankKind.VIRTUAL and v > tank.v_max:
            flood[tid] = (v - tank.v_max) / dt_min
            vols[tid] = tank.v_max
        else:
            flood[tid] = 0.0
    cso: dict[str, float] = {}
    for pid, q in plant_inflows.items():
        tank = network.tank(pid)
        cso[pid] = max(q - tank.q_out_max, 0.0)
    return vols, flood, cso


def run(
    scenario: Scenario,
    controls: ControlSchedule | None = None,
    n_periods: int | None = None,
    substeps: int = 10,
) -> TrajectoryLog:
    """Simulate the scenario under a control schedule and return the full log."""
    if controls is None:
        controls = ControlSchedule.constant(scenario)
    if tuple(controls.keys) != tuple(scenario.actuator_keys):
        raise ValueError("control schedule keys do not match scenario actuators")
    n = scenario.timing.sim_periods if n_periods is None else int(n_periods)

    sim = Simulator(scenario, substeps=substeps)
    log = _empty_log(scenario, sim, n)
    _record_grid(log, sim, 0)
    prev_cum = _cum_snapshot(sim)
    for per in range(n):
        setrow = controls.row(per)
        log.setpoints[per] = setrow
        sim.step_period(setrow)
        _record_grid(log, sim, per + 1)
        prev_cum = _record_period(log, sim, per, prev_cum)
    _finalize_log(log, sim)
    return log


def _empty_log(scenario: Scenario, sim: Simulator, n: int) -> TrajectoryLog:
    nv = len(sim.volume_tank_ids)
    npl = len(sim.plant_ids)
    m = sim.m
    return TrajectoryLog(
        scenario=scenario,
        n_periods=n,
        volume_tank_ids=sim.volume_tank_ids,
        plant_ids=sim.plant_ids,
        pipe_keys=sim.pipe_keys,
        inlet_ids=sim.inlet_ids,
        volume=np.zeros((n + 1, nv)),
        tank_conc=np.zeros((n + 1, nv, m)),
        plant_conc=np.zeros((n + 1, npl, m)),
        plant_inlet_conc=np.zeros((n + 1, npl, m)),
        pipe_flow=np.zeros((n, len(sim.pipe_keys))),
        pipe_arrival=np.zeros((n, len(sim.pipe_keys))),
        influent_flow=np.zeros((n, len(sim.inlet_ids))),
        plant_arrival=np.zeros((n, npl)),
        plant_outflow=np.zeros((n, npl)),
        plant_cso=np.zeros((n, npl)),
        flood=np.zeros((n, nv)),
        spill=np.zeros((n, nv)),
        effluent_mass_rate=np.zeros((n, npl, m)),
        reaction_rate=np.zeros((n, sim.r_total)),
        reaction_offsets=tuple(int(o) for o in sim.r_off),
        setpoints=np.zeros((n, len(sim.actuator_keys))),
    )


def _cum_snapshot(sim: Simulator) -> dict:
    return {
        "eff_v": sim.y[sim.sEffV].copy(),
        "eff_m": sim.y[sim.sEffM].copy(),
        "cso_v": sim.y[sim.sCsoV].copy(),
        "dep_v": sim.y[sim.sDepV].copy(),
        "arr_v": sim.y[sim.sArrV].copy(),
        "inf_vk": sim.y[sim.sInfVk].copy(),
        "phi": sim.y[sim.sPhi].copy(),
        "flood": sim.flood_vol.copy(),
        "spill": sim.spill_vol.copy(),
    }


def _record_grid(log: TrajectoryLog, sim: Simulator, row: int) -> None:
    V, xi, xiP, xi_in = sim.grid_state()
    log.volume[row] = V
    log.tank_conc[row] = xi
    log.plant_conc[row] = xiP
    log.plant_inlet_conc[row] = xi_in


def _record_period(log: TrajectoryLog, sim: Simulator, per: int, prev: dict) -> dict:
    cur = _cum_snapshot(sim)
    d = sim.delta
    npl = len(sim.plant_ids)
    m = sim.m
    log.pipe_flow[per] = (cur["dep_v"] - prev["dep_v"]) / d
    log.pipe_arrival[per] = (cur["arr_v"] - prev["arr_v"]) / d
    log.influent_flow[per] = (cur["inf_vk"] - prev["inf_vk"]) / d
    log.plant_outflow[per] = (cur["eff_v"] - prev["eff_v"]) / d
    log.plant_cso[per] = (cur["cso_v"] - prev["cso_v"]) / d
    log.plant_arrival[per] = log.plant_outflow[per] + log.plant_cso[per]
    log.flood[per] = (cur["flood"] - prev["flood"]) / d
    log.spill[per] = (cur["spill"] - prev["spill"]) / d
    log.effluent_mass_rate[per] = ((cur["eff_m"] - prev["eff_m"]) / d).reshape(npl, m)
    log.reaction_rate[per] = (cur["phi"] - prev["phi"]) / d
    return cur


def _finalize_log(log: TrajectoryLog, sim: Simulator) -> None:
    m = sim.m
    log.total_influent_volume = float(sim.y[sim.sInfV][0])
    log.total_influent_mass = sim.y[sim.sInfM].copy()
    log.total_effluent_volume = float(sim.y[sim.sEffV].sum())
    log.total_effluent_mass = sim.y[sim.sEffM].reshape(-1, m).sum(axis=0)
    log.total_cso_volume = float(sim.y[sim.sCsoV].sum())
    log.total_cso_mass = sim.y[sim.sCsoM].reshape(-1, m).sum(axis=0)
    log.total_flood_volume = float(sim.flood_vol.sum())
    log.total_flood_mass = sim.flood_mass.sum(axis=0)
    log.total_spill_volume = float(sim.spill_vol.sum())
    log.total_spill_mass = sim.spill_mass.sum(axis=0)
    log.pipe_departed_volume = sim.y[sim.sDepV].copy()
    log.pipe_arrived_volume = sim.y[sim.sArrV].copy()
    log.pipe_departed_mass = sim.y[sim.sDepM].reshape(-1, m).copy()
    log.pipe_arrived_mass = sim.y[sim.sArrM].reshape(-1, m).copy()
    it_v, it_m = sim.initial_in_transit()
    log.initial_in_transit_volume = it_v
    log.initial_in_transit_mass = it_m
    init = sim.scenario.initial_state
    v0 = sum(init.volumes[t] for t in sim.volume_tank_ids)
    log.initial_stored_volume = v0 + it_v
    m0 = np.zeros(m)
    for i, tid in enumerate(sim.volume_tank_ids):
        m0 += init.volumes[tid] * np.asarray(init.concentrations[tid], dtype=float)
    for pid in sim.plant_ids:
        m0 += sim.net.tank(pid).v_bar * np.asarray(init.concentrations[pid], dtype=float)
    log.initial_stored_mass = m0 + it_m
    log.clip_residual_volume = sim.clip_res_vol
    log.clip_residual_mass = sim.clip_res_mass.copy()


# ---------------------------------------------------------------------------
# observation


@dataclass
class Observation:
    """What the controller can see at the start of fine period ``period``.

    Index ``j`` in each array counts fine periods into the past: ``j = 0`` is
    the current grid instant for states; setpoint history starts at ``j = 1``
    (the value applied during the previous fine period).
    """

    period: int
    tau_ic: int
    volumes: dict[str, np.ndarray]  # volume tank -> (tau_ic + 1,)
    plant_conc: dict[str, np.ndarray]  # plant -> (tau_ic + 1, m)
    setpoints: dict[str, np.ndarray]  # actuator key -> (tau_ic,)


def observe(
    log: TrajectoryLog,
    period: int,
    noise: float = 0.0,
    rng: np.random.Generator | None = None,
) -> Observation:
    """Extract the controller-visible state history at a fine-grid instant.

    History before the start of the run is padded with the initial state and
    initial setpoints (the pre-run regime is stationary by assumption).
    Optional multiplicative Gaussian noise perturbs volumes and plant
    concentrations; concentrations are clamped at zero.
    """
    sc = log.scenario
    tau = sc.tau_ic
    if rng is None and noise > 0:
        rng = np.random.default_rng(0)

    def volume_at(p: int, i: int) -> float:
        if p < 0:
            return sc.initial_state.volumes[log.volume_tank_ids[i]]
        return float(log.volume[p, i])

    def plant_at(p: int, i: int) -> np.ndarray:
        if p < 0:
            return np.asarray(
                sc.initial_state.concentrations[log.plant_ids[i]], dtype=float
            )
        return log.plant_conc[p, i]

    def setpoint_at(p: int, k: int) -> float:
        if p < 0:
            return sc.initial_state.setpoints[sc.actuator_keys[k]]
        return float(log.setpoints[p, k])

    vols = {}
    for i, tid in enumerate(log.volume_tank_ids):
        v = np.array([volume_at(period - j, i) for j in range(tau + 1)])
        if noise > 0:
            v = v * (1.0 + rng.normal(0.0, noise, size=v.shape))
            v = np.clip(v, 0.0, sc.network.tank(tid).v_max)
        vols[tid] = v
    plants = {}
    for i, pid in enumerate(log.plant_ids):
        c = np.stack([plant_at(period - j, i) for j in range(tau + 1)])
        if noise > 0:
            c = c * (1.0 + rng.normal(0.0, noise, size=c.shape))
            c = np.maximum(c, 0.0)
        plants[pid] = c
    sets = {
        key: np.array([setpoint_at(period - j, k) for j in range(1, tau + 1)])
        for k, key in enumerate(sc.actuator_keys)
    }
    return Observation(period, tau, vols, plants, sets)


def initial_observation(scenario: Scenario) -> Observation:
    """Observation at period 0: the initial regime held for all past time."""
    tau = scenario.tau_ic
    m = scenario.n_species
    vols = {
        t.id: np.full(tau + 1, scenario.initial_state.volumes[t.id])
        for t in scenario.network.non_plant_tanks
        if t.kind is not TankKind.DIVERSION
    }
    plants = {
        p.id: np.tile(
            np.asarray(scenario.initial_state.concentrations[p.id], dtype=float), (tau + 1, 1)
        )
        for p in scenario.network.plants
    }
    sets = {
        k: np.full(tau, scenario.initial_state.setpoints[k])
        for k in scenario.actuator_keys
    }
    return Observation(0, tau, vols, plants, sets)


# ---------------------------------------------------------------------------
# plant concentration estimation (the controller's nonlinear preview model)


class PlantEstimator:
    """Maintains a coarse nonlinear model of the network for the controller.

    The estimator advances its own simulator (coarser substeps than the
    ground truth) under the controls actually applied, re-anchors measurable
    states from each observation, and produces plant inlet/reactor
    concentration previews over the optimization horizon under nominal
    future controls. Network concentrations between observations are model
    propagated; they start from the scenario initial state.
    """

    def __init__(self, scenario: Scenario, substeps: int = 5):
        self.scenario = scenario
        self.sim = Simulator(scenario, substeps=substeps)

    def advance(self, setpoint_rows: np.ndarray) -> None:
        """Advance the internal model through applied fine-period setpoints."""
        rows = np.atleast_2d(np.asarray(setpoint_rows, dtype=float))
        for row in rows:
            self.sim.step_period(row)

    def sync(self, obs: Observation) -> None:
        """Re-anchor measured quantities; keep modeled concentrations."""
        sim = self.sim
        m = sim.m
        V = sim.y[sim.sV]
        M = sim.y[sim.sM].reshape(-1, m)
        xi = np.divide(
            M,
            np.maximum(V, _TINY_VOLUME)[:, None],
            out=np.zeros_like(M),
            where=V[:, None] > _TINY_VOLUME,
        )
        for i, tid in enumerate(sim.volume_tank_ids):
            v_obs = float(obs.volumes[tid][0])
            V[i] = v_obs
            M[i] = v_obs * xi[i]
        sim.y[sim.sM] = M.ravel()
        for i, pid in enumerate(sim.plant_ids):
            sim.y[sim.sXi][i * m : (i + 1) * m] = obs.plant_conc[pid][0]

    def preview(self, nominal_rows: np.ndarray, horizon: int) -> tuple[np.ndarray, np.ndarray]:
        """Plant inlet / reactor concentrations over ``horizon`` fine periods.

        Returns ``(xi_in_hat, xi_hat)``, each of shape
        ``(horizon + 1, n_plants, m)``; row ``l`` is the grid instant ``l``
        periods ahead of the estimator's current time. Nominal rows shorter
        than the horizon are padded by holding the last row.
        """
        rows = np.atleast_2d(np.asarray(nominal_rows, dtype=float))
        sim = self.sim.clone()
        m = sim.m
        npl = len(sim.plant_ids)
        xi_in_hat = np.zeros((horizon + 1, npl, m))
        xi_hat = np.zeros((horizon + 1, npl, m))
        _, _, xiP, xi_in = sim.grid_state()
        xi_hat[0] = xiP
        xi_in_hat[0] = xi_in
        for l in range(horizon):
            row = rows[min(l, rows.shape[0] - 1)]
            sim.step_period(row)
            _, _, xiP, xi_in = sim.grid_state()
            xi_hat[l + 1] = xiP
            xi_in_hat[l + 1] = xi_in
        return xi_in_hat, xi_hat


def estimate_plant_concentrations(
    scenario: Scenario,
    observation: Observation,
    nominal_rows: np.ndarray,
    horizon: int,
    estimator: PlantEstimator | None = None,
    substeps: int = 5,
) -> tuple[np.ndarray, np.ndarray]:
    """Forward-simulate plant concentrations over the horizon.

    With no persistent ``estimator``, a fresh internal model is built from
    the scenario initial state, fast-forwarded to the observation instant
    under the observed setpoint history (held constant), and re-anchored to
    the observation. Closed-loop use should pass the persistent estimator.
    """
    if estimator is None:
        estimator = PlantEstimator(scenario, substeps=substeps)
        if observation.period > 0:
            hist = np.tile(
                np.array([
                    observation.setpoints[k][0] if observation.tau_ic > 0
                    else scenario.initial_state.setpoints[k]
                    for k in scenario.actuator_keys
                ]),
                (observation.period, 1),
            )
            estimator.advance(hist)
        estimator.sync(observation)
    return estimator.preview(nominal_rows, horizon)
