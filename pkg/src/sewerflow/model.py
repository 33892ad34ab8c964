"""Network, biology, and scenario types plus loading and validation.

Everything is treated as immutable after construction. Internal units are
m3 for volume, m3/min for flow, kg/m3 for concentration, and 1/min for
kinetic rates. Scenario files may give kinetic rates per day; those are
converted to per-minute at load time.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .kinetics import Contois, FirstOrderDecay, KineticLaw, MonodFixedBiomass

MINUTES_PER_DAY = 1440.0


class ScenarioError(ValueError):
    """Base class for scenario loading problems."""


class ScenarioParseError(ScenarioError):
    """The file cannot be parsed into the expected structure."""


class InfluentCoverageError(ScenarioError):
    """The influent series does not span the runs it must feed."""


class ScenarioValidationError(ScenarioError):
    def __init__(self, violations):
        self.violations = list(violations)
        lines = "\n".join(f"  - {v}" for v in self.violations)
        super().__init__(f"scenario validation failed:\n{lines}")


class TankKind(Enum):
    PLANT = "plant"
    REAL = "real"
    VIRTUAL = "virtual"
    DIVERSION = "diversion"  # zero-volume junction; a real tank in spirit


@dataclass(frozen=True)
class Uncontrolled:
    """Flow follows the source tank volume: Q = beta * V."""


@dataclass(frozen=True)
class PumpOrGate:
    """Actuated flow free within [q_min, q_max]."""

    q_min: float
    q_max: float


@dataclass(frozen=True)
class VolumeLimited:
    """Actuated, but capped by the source tank: Q <= beta * V."""


@dataclass(frozen=True)
class DiversionBranch:
    """Actuated branch out of a zero-volume junction."""


PipeControl = Uncontrolled | PumpOrGate | VolumeLimited | DiversionBranch

_CONTROL_TAGS = {
    Uncontrolled: "uncontrolled",
    PumpOrGate: "pump_or_gate",
    VolumeLimited: "volume_limited",
    DiversionBranch: "diversion_branch",
}


@dataclass(frozen=True)
class Tank:
    id: str
    kind: TankKind
    v_max: float = 0.0  # m3 (real/virtual tanks)
    v_bar: float = 0.0  # m3, constant plant volume
    q_out_min: float = 0.0  # m3/min, plant throughput bounds
    q_out_max: float = 0.0
    beta: float = 0.0  # 1/min
    has_external_inflow: bool = False


@dataclass(frozen=True)
class Pipe:
    source: str
    target: str
    q_max: float  # m3/min
    delay_steps: int  # transport delay, whole trajectory steps
    control: PipeControl = Uncontrolled()

    @property
    def key(self) -> str:
        return f"{self.source}->{self.target}"

    @property
    def is_actuated(self) -> bool:
        return not isinstance(self.control, Uncontrolled)


@dataclass(frozen=True)
class PlantBiology:
    """Reactions inside one treatment plant.

    ``kappa`` maps reaction rates to concentration derivatives; it has one
    row per species and one column per growth reaction. Biomass death is a
    separate first-order term appended by :meth:`full_kappa` /
    :meth:`full_laws` so the dynamics stay in matrix-times-rates form.
    """

    species: tuple[str, ...]
    reaction_names: tuple[str, ...]
    kappa: tuple[tuple[float, ...], ...]  # m x r, growth reactions only
    laws: tuple[KineticLaw, ...]  # rates in 1/min
    death_rate: float  # 1/min
    biomass_index: int
    effluent_biomass_factor: float = 0.1

    def __post_init__(self):
        m, r = len(self.species), len(self.laws)
        if len(self.reaction_names) != r:
            raise ValueError("one name per reaction required")
        if len(self.kappa) != m or any(len(row) != r for row in self.kappa):
            raise ValueError(f"kappa must be {m}x{r}")
        if not all(math.isfinite(v) for row in self.kappa for v in row):
            raise ValueError("kappa entries must be finite")
        if self.death_rate < 0:
            raise ValueError("death_rate must be nonnegative")
        if not 0.0 <= self.effluent_biomass_factor <= 1.0:
            raise ValueError("effluent_biomass_factor must lie in [0, 1]")
        if not 0 <= self.biomass_index < m:
            raise ValueError("biomass_index out of range")

    @property
    def n_reactions(self) -> int:
        return len(self.laws)

    def full_kappa(self) -> np.ndarray:
        """Stoichiometry with the biomass-decay column appended."""
        m = len(self.species)
        kap = np.zeros((m, self.n_reactions + 1))
        if self.n_reactions:
            kap[:, : self.n_reactions] = np.asarray(self.kappa, dtype=float)
        kap[self.biomass_index, -1] = -1.0
        return kap

    def full_laws(self) -> tuple[KineticLaw, ...]:
        decay = FirstOrderDecay(rate=self.death_rate, biomass_index=self.biomass_index)
        return self.laws + (decay,)


@dataclass(frozen=True)
class NetworkModel:
    tanks: tuple[Tank, ...]
    pipes: tuple[Pipe, ...]

    def tank(self, tank_id: str) -> Tank:
        for t in self.tanks:
            if t.id == tank_id:
                return t
        raise KeyError(tank_id)

    def pipe(self, key: str) -> Pipe:
        for p in self.pipes:
            if p.key == key:
                return p
        raise KeyError(key)

    def pipes_in(self, tank_id: str) -> tuple[Pipe, ...]:
        return tuple(p for p in self.pipes if p.target == tank_id)

    def pipes_out(self, tank_id: str) -> tuple[Pipe, ...]:
        return tuple(p for p in self.pipes if p.source == tank_id)

    def of_kind(self, kind: TankKind) -> tuple[Tank, ...]:
        return tuple(t for t in self.tanks if t.kind is kind)

    @property
    def plants(self) -> tuple[Tank, ...]:
        return self.of_kind(TankKind.PLANT)

    @property
    def virtual_tanks(self) -> tuple[Tank, ...]:
        return self.of_kind(TankKind.VIRTUAL)

    @property
    def diversion_nodes(self) -> tuple[Tank, ...]:
        return self.of_kind(TankKind.DIVERSION)

    @property
    def volume_tanks(self) -> tuple[Tank, ...]:
        """Tanks with a volume state (real and virtual, not junctions)."""
        return tuple(t for t in self.tanks if t.kind in (TankKind.REAL, TankKind.VIRTUAL))

    @property
    def non_plant_tanks(self) -> tuple[Tank, ...]:
        return tuple(t for t in self.tanks if t.kind is not TankKind.PLANT)

    @property
    def actuated_pipes(self) -> tuple[Pipe, ...]:
        return tuple(p for p in self.pipes if p.is_actuated)

    @property
    def max_delay(self) -> int:
        return max((p.delay_steps for p in self.pipes), default=0)

    @property
    def actuator_keys(self) -> tuple[str, ...]:
        """Canonical setpoint order: actuated pipes, then plant outflows."""
        return tuple(p.key for p in self.actuated_pipes) + tuple(t.id for t in self.plants)


def diversion_resolution_order(network: NetworkModel) -> tuple[str, ...]:
    """Junction ids ordered so each node's zero-delay feeders come first.

    A branch from one junction into another with no transport delay couples
    their flow balances within a single instant; Kahn's algorithm on those
    edges yields an evaluation order. Raises ValueError on a cycle.
    """
    nodes = [t.id for t in network.diversion_nodes]
    node_set = set(nodes)
    deps: dict[str, set[str]] = {n: set() for n in nodes}
    for p in network.pipes:
        if p.source in node_set and p.target in node_set and p.delay_steps == 0:
            deps[p.target].add(p.source)
    order: list[str] = []
    ready = [n for n in nodes if not deps[n]]
    while ready:
        n = ready.pop(0)
        order.append(n)
        for m in nodes:
            if n in deps[m]:
                deps[m].discard(n)
                if not deps[m] and m not in order and m not in ready:
                    ready.append(m)
    if len(order) != len(nodes):
        cyc = sorted(set(nodes) - set(order))
        raise ValueError(f"zero-delay cycle through junctions {cyc}")
    return tuple(order)


@dataclass(frozen=True)
class Timing:
    delta: float  # trajectory step [min]
    control_period: float  # actuator update interval [min]
    horizon_steps: int  # H
    sim_periods: int  # run length in delta steps
    am_order: int

    def __post_init__(self):
        if self.delta <= 0:
            raise ValueError("delta must be positive")
        ratio = self.control_period / self.delta
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise ValueError(
                f"control period {self.control_period} is not an integer "
                f"multiple of the trajectory step {self.delta}"
            )
        if self.horizon_steps < 1:
            raise ValueError("horizon_steps must be at least 1")
        if self.sim_periods < 1:
            raise ValueError("sim_periods must be at least 1")
        if not isinstance(self.am_order, int) or isinstance(self.am_order, bool):
            raise ValueError("am_order must be an integer")
        if not 1 <= self.am_order <= 4:
            raise ValueError("am_order must be between 1 and 4")

    @property
    def steps_per_control(self) -> int:
        return round(self.control_period / self.delta)

    @property
    def n_control_periods(self) -> int:
        return self.sim_periods // self.steps_per_control


@dataclass(frozen=True)
class Weights:
    """Objective weights. Vector weights follow the species/reaction order."""

    flooding: float = 0.0
    cso: float = 0.0
    release: tuple[float, ...] = ()  # per species
    regulation: tuple[float, ...] = ()  # per species
    growth: tuple[float, ...] = ()  # per growth reaction
    slope: float = 0.0
    curvature: float = 0.0
    final_volume: float = 0.0
    total_volume: float = 0.0
    plant_balance: float = 0.0
    time_balance: float = 0.0


@dataclass(frozen=True)
class InitialState:
    """State at period 0 plus the constant actuator history before it.

    ``setpoints`` holds one value per actuator key, interpreted as having
    been applied over every history period.
    """

    volumes: dict[str, float]
    concentrations: dict[str, tuple[float, ...]]
    setpoints: dict[str, float]


@dataclass(eq=False)
class Influent:
    """External inflow series resampled onto the trajectory-step grid.

    Array index 0 is period ``-history_steps``; the arrays run through the
    simulation end plus one optimization horizon.
    """

    inlets: tuple[str, ...]
    history_steps: int
    flow: dict[str, np.ndarray]  # m3/min, one entry per grid period
    conc: dict[str, np.ndarray]  # (n_periods, n_species) kg/m3

    def n_periods(self) -> int:
        return len(self.flow[self.inlets[0]]) if self.inlets else 0

    def flow_at(self, inlet: str, period: int) -> float:
        return float(self.flow[inlet][period + self.history_steps])

    def conc_at(self, inlet: str, period: int) -> np.ndarray:
        return self.conc[inlet][period + self.history_steps]

    def __eq__(self, other):
        if not isinstance(other, Influent):
            return NotImplemented
        return (
            self.inlets == other.inlets
            and self.history_steps == other.history_steps
            and set(self.flow) == set(other.flow)
            and all(np.array_equal(self.flow[k], other.flow[k]) for k in self.flow)
            and set(self.conc) == set(other.conc)
            and all(np.array_equal(self.conc[k], other.conc[k]) for k in self.conc)
        )


@dataclass(eq=False)
class Scenario:
    name: str
    species: tuple[str, ...]
    network: NetworkModel
    biology: dict[str, PlantBiology]  # keyed by plant id
    timing: Timing
    weights: Weights
    xi_max: tuple[float, ...]  # per species; math.inf = unregulated
    initial_state: InitialState
    influent: Influent

    @property
    def tau_ic(self) -> int:
        """History length needed by delays, stencils, and smoothness terms."""
        return max(self.network.max_delay, self.timing.am_order, 3)

    @property
    def n_species(self) -> int:
        return len(self.species)

    @property
    def actuator_keys(self) -> tuple[str, ...]:
        return self.network.actuator_keys

    def __eq__(self, other):
        if not isinstance(other, Scenario):
            return NotImplemented
        return (
            self.name == other.name
            and self.species == other.species
            and self.network == other.network
            and self.biology == other.biology
            and self.timing == other.timing
            and self.weights == other.weights
            and self.xi_max == other.xi_max
            and self.initial_state == other.initial_state
            and self.influent == other.influent
        )


# ------------------------------------------------------------------ validation

def validate_network(network: NetworkModel) -> list[str]:
    """Structural checks. Returns human-readable violations, empty if clean."""
    out: list[str] = []
    seen_ids: set[str] = set()
    for t in network.tanks:
        if not t.id:
            out.append("tank with empty id")
        elif t.id in seen_ids:
            out.append(f"duplicate tank id {t.id!r}")
        seen_ids.add(t.id)
        if t.beta < 0:
            out.append(f"tank {t.id}: beta must be nonnegative")

    ids = {t.id for t in network.tanks}
    seen_pipes: set[tuple[str, str]] = set()
    for p in network.pipes:
        label = p.key
        if p.source not in ids or p.target not in ids:
            out.append(f"pipe {label}: unknown endpoint")
            continue
        if p.source == p.target:
            out.append(f"pipe {label}: self loop")
        if (p.source, p.target) in seen_pipes:
            out.append(f"duplicate pipe {label}")
        seen_pipes.add((p.source, p.target))
        if p.q_max <= 0:
            out.append(f"pipe {label}: q_max must be positive")
        if not isinstance(p.delay_steps, int) or isinstance(p.delay_steps, bool) or p.delay_steps < 0:
            out.append(f"pipe {label}: delay_steps must be a nonnegative integer")
        src = network.tank(p.source)
        if isinstance(p.control, Uncontrolled):
            if src.kind not in (TankKind.REAL, TankKind.VIRTUAL):
                out.append(f"pipe {label}: uncontrolled flow needs an upstream storage tank")
            elif src.beta <= 0:
                out.append(f"pipe {label}: uncontrolled flow needs beta > 0 at tank {src.id}")
        elif isinstance(p.control, VolumeLimited):
            if src.kind not in (TankKind.REAL, TankKind.VIRTUAL):
                out.append(f"pipe {label}: volume-limited flow needs an upstream storage tank")
            elif src.beta <= 0:
                out.append(f"pipe {label}: volume-limited flow needs beta > 0 at tank {src.id}")
        elif isinstance(p.control, PumpOrGate):
            c = p.control
            if not 0 <= c.q_min <= c.q_max:
                out.append(f"pipe {label}: need 0 <= q_min <= q_max")
            if c.q_max > p.q_max + 1e-12:
                out.append(f"pipe {label}: actuator range exceeds pipe capacity")
        elif isinstance(p.control, DiversionBranch):
            if src.kind is not TankKind.DIVERSION:
                out.append(f"pipe {label}: diversion branch must leave a diversion node")

    for t in network.tanks:
        incoming = network.pipes_in(t.id)
        outgoing = network.pipes_out(t.id)
        if t.kind is TankKind.PLANT:
            if t.v_bar <= 0:
                out.append(f"plant {t.id}: v_bar must be positive")
            if not 0 <= t.q_out_min <= t.q_out_max:
                out.append(f"plant {t.id}: need 0 <= q_out_min <= q_out_max")
            if not incoming:
                out.append(f"plant {t.id}: no inflow pipe")
            for p in outgoing:
                out.append(
                    f"plant {t.id}: second external outflow via pipe {p.key} "
                    "(a plant's only outflow is its effluent)"
                )
            if t.has_external_inflow:
                out.append(f"plant {t.id}: plants only receive inflow from other tanks")
        elif t.kind is TankKind.DIVERSION:
            if t.v_max != 0:
                out.append(f"diversion node {t.id}: must have zero storage volume (v_max = {t.v_max})")
            if t.has_external_inflow:
                out.append(f"diversion node {t.id}: cannot take external influent")
            if len(outgoing) < 2:
                out.append(f"diversion node {t.id}: needs at least two outgoing branches")
            for p in outgoing:
                if not isinstance(p.control, DiversionBranch):
                    out.append(f"diversion node {t.id}: outgoing pipe {p.key} must be a diversion branch")
            if not incoming:
                out.append(f"diversion node {t.id}: no inflow pipe")
            cap_in = sum(p.q_max for p in incoming)
            cap_out = sum(p.q_max for p in outgoing)
            if incoming and outgoing and cap_in > cap_out + 1e-9:
                out.append(
                    f"diversion node {t.id}: outgoing capacity {cap_out} cannot pass peak inflow {cap_in}"
                )
        else:  # REAL or VIRTUAL
            if t.v_max <= 0:
                out.append(f"tank {t.id}: v_max must be positive")

    try:
        diversion_resolution_order(network)
    except ValueError as e:
        out.append(str(e))
    return out


def validate_scenario(scenario: Scenario) -> list[str]:
    out = validate_network(scenario.network)
    net = scenario.network
    m = scenario.n_species

    for plant in net.plants:
        bio = scenario.biology.get(plant.id)
        if bio is None:
            out.append(f"plant {plant.id}: no biology entry")
            continue
        if bio.species != scenario.species:
            out.append(f"plant {plant.id}: species list differs from the scenario's")
    for pid in scenario.biology:
        try:
            t = net.tank(pid)
        except KeyError:
            out.append(f"biology for unknown tank {pid}")
            continue
        if t.kind is not TankKind.PLANT:
            out.append(f"biology attached to non-plant tank {pid}")

    if len(scenario.xi_max) != m:
        out.append(f"xi_max must have {m} entries")
    elif any(v <= 0 for v in scenario.xi_max):
        out.append("xi_max entries must be positive (use inf for unregulated species)")

    w = scenario.weights
    if len(w.release) != m:
        out.append(f"release weights must have {m} entries")
    if len(w.regulation) != m:
        out.append(f"regulation weights must have {m} entries")
    for bio in scenario.biology.values():
        if len(w.growth) != bio.n_reactions:
            out.append(
                f"growth weights must have one entry per growth reaction ({bio.n_reactions})"
            )
            break

    vol_ids = {t.id for t in net.volume_tanks}
    for tid in vol_ids:
        v0 = scenario.initial_state.volumes.get(tid)
        if v0 is None:
            out.append(f"initial volume missing for tank {tid}")
        elif not 0 <= v0 <= net.tank(tid).v_max + 1e-9:
            out.append(f"initial volume for tank {tid} outside [0, v_max]")
    for tid in scenario.initial_state.volumes:
        if tid not in vol_ids:
            out.append(f"initial volume given for tank {tid} which stores no volume")

    conc_ids = vol_ids | {t.id for t in net.plants}
    for tid in conc_ids:
        xi0 = scenario.initial_state.concentrations.get(tid)
        if xi0 is None:
            out.append(f"initial concentrations missing for tank {tid}")
        elif len(xi0) != m:
            out.append(f"initial concentrations for tank {tid} must have {m} entries")
        elif any(v < 0 for v in xi0):
            out.append(f"initial concentrations for tank {tid} must be nonnegative")

    for key in net.actuator_keys:
        sp = scenario.initial_state.setpoints.get(key)
        if sp is None:
            out.append(f"initial setpoint missing for actuator {key}")
        elif sp < 0:
            out.append(f"initial setpoint for actuator {key} must be nonnegative")
    for key in scenario.initial_state.setpoints:
        if key not in net.actuator_keys:
            out.append(f"initial setpoint for unknown actuator {key}")

    inlets = {t.id for t in net.tanks if t.has_external_inflow}
    if set(scenario.influent.inlets) != inlets:
        out.append(
            f"influent inlets {sorted(scenario.influent.inlets)} do not match "
            f"tanks flagged for external inflow {sorted(inlets)}"
        )
    needed = scenario.tau_ic + scenario.timing.sim_periods + scenario.timing.horizon_steps + 1
    if inlets and scenario.influent.n_periods() < needed:
        out.append(
            f"influent series covers {scenario.influent.n_periods()} periods, "
            f"needs {needed} (history + simulation + horizon)"
        )
    if scenario.influent.history_steps != scenario.tau_ic:
        out.append("influent history offset does not match the scenario's history length")

    if scenario.timing.sim_periods % scenario.timing.steps_per_control != 0:
        out.append("sim_periods must be a whole number of control periods")
    return out


# ------------------------------------------------------------------- parsing

def _need(d: dict, key: str, ctx: str):
    if key not in d:
        raise ScenarioParseError(f"{ctx}: missing field {key!r}")
    return d[key]


def _species_vector(obj, species: tuple[str, ...], ctx: str) -> tuple[float, ...]:
    """Accept either a list in species order or a dict by species name."""
    if isinstance(obj, dict):
        unknown = set(obj) - set(species)
        if unknown:
            raise ScenarioParseError(f"{ctx}: unknown species {sorted(unknown)}")
        return tuple(float(obj.get(s, 0.0)) for s in species)
    vals = list(obj)
    if len(vals) != len(species):
        raise ScenarioParseError(f"{ctx}: expected {len(species)} entries, got {len(vals)}")
    return tuple(float(v) for v in vals)


def _parse_rate(d: dict, base: str, ctx: str) -> float:
    per_day, per_min = d.get(f"{base}_per_day"), d.get(f"{base}_per_min")
    if (per_day is None) == (per_min is None):
        raise ScenarioParseError(f"{ctx}: give exactly one of {base}_per_day / {base}_per_min")
    return float(per_min) if per_min is not None else float(per_day) / MINUTES_PER_DAY


def _parse_law(d: dict, species: tuple[str, ...], biomass: int, ctx: str) -> KineticLaw:
    kind = _need(d, "type", ctx)
    mu = _parse_rate(d, "mu", ctx)
    sub = _need(d, "substrate", ctx)
    if sub not in species:
        raise ScenarioParseError(f"{ctx}: unknown substrate {sub!r}")
    s_idx = species.index(sub)
    bio_name = d.get("biomass")
    b_idx = species.index(bio_name) if bio_name is not None else biomass
    if kind == "contois":
        return Contois(mu=mu, k_c=float(_need(d, "half_saturation", ctx)),
                       substrate_index=s_idx, biomass_index=b_idx)
    if kind == "monod_fixed_biomass":
        return MonodFixedBiomass(mu=mu, k_m=float(_need(d, "half_saturation", ctx)),
                                 x_bar=float(_need(d, "x_bar", ctx)),
                                 substrate_index=s_idx, biomass_index=b_idx)
    raise ScenarioParseError(f"{ctx}: unknown kinetic law type {kind!r}")


def _law_to_dict(law: KineticLaw, species: tuple[str, ...]) -> dict:
    if isinstance(law, Contois):
        return {
            "type": "contois",
            "mu_per_min": law.mu,
            "half_saturation": law.k_c,
            "substrate": species[law.substrate_index],
            "biomass": species[law.biomass_index],
        }
    if isinstance(law, MonodFixedBiomass):
        out = {
            "type": "monod_fixed_biomass",
            "mu_per_min": law.mu,
            "half_saturation": law.k_m,
            "x_bar": law.x_bar,
            "substrate": species[law.substrate_index],
        }
        if law.biomass_index is not None:
            out["biomass"] = species[law.biomass_index]
        return out
    raise ValueError(f"cannot serialize law {law!r}")


_KIND_TAGS = {k.value: k for k in TankKind}


def _parse_network(d: dict) -> NetworkModel:
    tanks = []
    for td in _need(d, "tanks", "network"):
        ctx = f"tank {td.get('id', '?')}"
        kind = _KIND_TAGS.get(_need(td, "kind", ctx))
        if kind is None:
            raise ScenarioParseError(f"{ctx}: unknown kind {td.get('kind')!r}")
        tanks.append(Tank(
            id=str(_need(td, "id", "network.tanks")),
            kind=kind,
            v_max=float(td.get("v_max", 0.0)),
            v_bar=float(td.get("v_bar", 0.0)),
            q_out_min=float(td.get("q_out_min", 0.0)),
            q_out_max=float(td.get("q_out_max", 0.0)),
            beta=float(td.get("beta", 0.0)),
            has_external_inflow=bool(td.get("external_inflow", False)),
        ))

    pipes = []
    for pd in _need(d, "pipes", "network"):
        ctx = f"pipe {pd.get('from', '?')}->{pd.get('to', '?')}"
        cd = pd.get("control", {"type": "uncontrolled"})
        ctype = _need(cd, "type", ctx)
        if ctype == "uncontrolled":
            control: PipeControl = Uncontrolled()
        elif ctype == "pump_or_gate":
            control = PumpOrGate(q_min=float(cd.get("q_min", 0.0)),
                                 q_max=float(_need(cd, "q_max", ctx)))
        elif ctype == "volume_limited":
            control = VolumeLimited()
        elif ctype == "diversion_branch":
            control = DiversionBranch()
        else:
            raise ScenarioParseError(f"{ctx}: unknown control type {ctype!r}")
        if "delay_steps" in pd:
            delay = int(pd["delay_steps"])
        elif "delay_min" in pd:
            delay = -1  # resolved against delta by the caller
        else:
            delay = 0
        pipes.append(Pipe(
            source=str(_need(pd, "from", "network.pipes")),
            target=str(_need(pd, "to", "network.pipes")),
            q_max=float(_need(pd, "q_max", ctx)),
            delay_steps=delay,
            control=control,
        ))
    return NetworkModel(tanks=tuple(tanks), pipes=tuple(pipes))


def _resolve_delays(network: NetworkModel, raw_pipes: list[dict], delta: float) -> NetworkModel:
    """Quantize delay_min entries to whole steps (round to nearest)."""
    pipes = []
    for p, pd in zip(network.pipes, raw_pipes):
        if p.delay_steps < 0:
            steps = int(round(float(pd["delay_min"]) / delta))
            pipes.append(Pipe(p.source, p.target, p.q_max, steps, p.control))
        else:
            pipes.append(p)
    return NetworkModel(tanks=network.tanks, pipes=tuple(pipes))


def _parse_biology(d: dict, network: NetworkModel) -> tuple[tuple[str, ...], dict[str, PlantBiology]]:
    species = tuple(str(s) for s in _need(d, "species", "biology"))
    biomass_name = d.get("biomass")
    if biomass_name is not None and biomass_name not in species:
        raise ScenarioParseError(f"biology: biomass {biomass_name!r} not in species list")
    biomass = species.index(biomass_name) if biomass_name is not None else len(species) - 1

    plants = {}
    for pid, bd in d.get("plants", {}).items():
        ctx = f"biology.plants.{pid}"
        names, laws, cols = [], [], []
        for rd in bd.get("reactions", []):
            rctx = f"{ctx}.{rd.get('name', '?')}"
            names.append(str(_need(rd, "name", ctx)))
            laws.append(_parse_law(_need(rd, "law", rctx), species, biomass, rctx))
            cols.append(_species_vector(_need(rd, "kappa", rctx), species, rctx))
        kappa = tuple(tuple(col[i] for col in cols) for i in range(len(species)))
        plants[pid] = PlantBiology(
            species=species,
            reaction_names=tuple(names),
            kappa=kappa,
            laws=tuple(laws),
            death_rate=_parse_rate(bd, "death_rate", ctx) if (
                "death_rate_per_day" in bd or "death_rate_per_min" in bd) else 0.0,
            biomass_index=biomass,
            effluent_biomass_factor=float(bd.get("effluent_biomass_factor", 0.1)),
        )
    return species, plants


def _parse_weights(d: dict, species: tuple[str, ...], n_reactions: int) -> Weights:
    growth_raw = d.get("growth", 0.0)
    if isinstance(growth_raw, (int, float)):
        growth = (float(growth_raw),) * n_reactions
    else:
        growth = tuple(float(v) for v in growth_raw)
    return Weights(
        flooding=float(d.get("flooding", 0.0)),
        cso=float(d.get("cso", 0.0)),
        release=_species_vector(d.get("release", {}), species, "weights.release"),
        regulation=_species_vector(d.get("regulation", {}), species, "weights.regulation"),
        growth=growth,
        slope=float(d.get("slope", 0.0)),
        curvature=float(d.get("curvature", 0.0)),
        final_volume=float(d.get("final_volume", 0.0)),
        total_volume=float(d.get("total_volume", 0.0)),
        plant_balance=float(d.get("plant_balance", 0.0)),
        time_balance=float(d.get("time_balance", 0.0)),
    )


def _resample_inlet(t_raw, flow_raw, conc_raw, grid_t, ctx: str):
    t_raw = np.asarray(t_raw, dtype=float)
    if t_raw.size == 0:
        raise InfluentCoverageError(f"{ctx}: empty influent series")
    order = np.argsort(t_raw, kind="stable")
    t_raw = t_raw[order]
    flow_raw = np.asarray(flow_raw, dtype=float)[order]
    conc_raw = np.asarray(conc_raw, dtype=float)[order]
    if grid_t[0] < t_raw[0] - 1e-9 or grid_t[-1] > t_raw[-1] + 1e-9:
        raise InfluentCoverageError(
            f"{ctx}: series spans [{t_raw[0]}, {t_raw[-1]}] min but "
            f"[{grid_t[0]}, {grid_t[-1]}] is required"
        )
    flow = np.interp(grid_t, t_raw, flow_raw)
    conc = np.column_stack([
        np.interp(grid_t, t_raw, conc_raw[:, j]) for j in range(conc_raw.shape[1])
    ]) if conc_raw.shape[1] else np.zeros((len(grid_t), 0))
    if np.any(flow < 0) or np.any(conc < 0):
        raise ScenarioParseError(f"{ctx}: negative influent values")
    return flow, conc


def _parse_influent(d: dict, species: tuple[str, ...], inlet_ids: list[str],
                    history: int, n_grid: int, delta: float, base_dir: Path) -> Influent:
    grid_t = (np.arange(n_grid) - history) * delta
    flow: dict[str, np.ndarray] = {}
    conc: dict[str, np.ndarray] = {}

    if "csv" in d:
        path = base_dir / d["csv"]
        if not path.exists():
            raise ScenarioParseError(f"influent: file not found: {path}")
        rows: dict[str, list[tuple[float, float, list[float]]]] = {}
        with open(path, newline="") as f:
            reader = csv.DictReader(f)
            cols = reader.fieldnames or []
            if "t_min" not in cols or "inlet_id" not in cols or "flow" not in cols:
                raise ScenarioParseError(
                    f"influent: {path.name} must have t_min, inlet_id, flow columns")
            conc_cols = [f"c_{s}" for s in species]
            for i, row in enumerate(reader, start=2):
                try:
                    t = float(row["t_min"])
                    q = float(row["flow"])
                    c = [float(row[cc]) if cc in row and row[cc] not in (None, "") else 0.0
                         for cc in conc_cols]
                except (TypeError, ValueError) as e:
                    raise ScenarioParseError(f"influent: {path.name} line {i}: {e}") from None
                rows.setdefault(row["inlet_id"], []).append((t, q, c))
        for inlet in inlet_ids:
            if inlet not in rows:
                raise InfluentCoverageError(f"influent: no rows for inlet {inlet}")
            data = rows[inlet]
            t_raw = [r[0] for r in data]
            q_raw = [r[1] for r in data]
            c_raw = [r[2] for r in data]
            flow[inlet], conc[inlet] = _resample_inlet(
                t_raw, q_raw, np.asarray(c_raw, dtype=float).reshape(len(data), len(species)),
                grid_t, f"influent inlet {inlet}")
    elif "inline" in d:
        for inlet in inlet_ids:
            sd = d["inline"].get(inlet)
            if sd is None:
                raise InfluentCoverageError(f"influent: no inline series for inlet {inlet}")
            t_raw = sd["t_min"]
            q_raw = sd["flow"]
            cd = sd.get("concentrations", {})
            c_raw = np.column_stack([
                np.asarray(cd.get(s, [0.0] * len(t_raw)), dtype=float) for s in species
            ]) if species else np.zeros((len(t_raw), 0))
            flow[inlet], conc[inlet] = _resample_inlet(
                t_raw, q_raw, c_raw, grid_t, f"influent inlet {inlet}")
    else:
        if inlet_ids:
            raise ScenarioParseError("influent: need a 'csv' path or 'inline' series")

    return Influent(inlets=tuple(inlet_ids), history_steps=history, flow=flow, conc=conc)


def scenario_from_dict(d: dict, base_dir: Path | str = ".") -> Scenario:
    """Build a Scenario from parsed file content. Validates everything."""
    base_dir = Path(base_dir)
    td = _need(d, "timing", "scenario")
    timing_kwargs = dict(
        delta=float(_need(td, "delta_min", "timing")),
        control_period=float(_need(td, "control_period_min", "timing")),
        horizon_steps=int(_need(td, "horizon_steps", "timing")),
        sim_periods=int(_need(td, "sim_periods", "timing")),
        am_order=int(_need(td, "am_order", "timing")),
    )
    try:
        timing = Timing(**timing_kwargs)
    except ValueError as e:
        raise ScenarioValidationError([f"timing: {e}"]) from None

    nd = _need(d, "network", "scenario")
    network = _parse_network(nd)
    network = _resolve_delays(network, list(nd["pipes"]), timing.delta)

    species, biology = _parse_biology(d.get("biology", {"species": []}), network)
    n_reactions = next(iter(biology.values())).n_reactions if biology else 0
    weights = _parse_weights(d.get("weights", {}), species, n_reactions)

    xm = d.get("xi_max", {})
    if isinstance(xm, dict):
        xi_max = tuple(
            math.inf if xm.get(s) is None else float(xm[s]) for s in species
        )
    else:
        xi_max = tuple(math.inf if v is None else float(v) for v in xm)
        if len(xi_max) != len(species):
            raise ScenarioParseError(f"xi_max: expected {len(species)} entries")

    isd = _need(d, "initial_state", "scenario")
    init = InitialState(
        volumes={k: float(v) for k, v in isd.get("volumes", {}).items()},
        concentrations={
            k: _species_vector(v, species, f"initial_state.concentrations.{k}")
            for k, v in isd.get("concentrations", {}).items()
        },
        setpoints={k: float(v) for k, v in isd.get("setpoints", {}).items()},
    )

    try:
        scenario = Scenario(
            name=str(d.get("name", "unnamed")),
            species=species,
            network=network,
            biology=biology,
            timing=timing,
            weights=weights,
            xi_max=xi_max,
            initial_state=init,
            influent=Influent(inlets=(), history_steps=0, flow={}, conc={}),
        )
        inlet_ids = [t.id for t in network.tanks if t.has_external_inflow]
        n_grid = scenario.tau_ic + timing.sim_periods + timing.horizon_steps + 1
        scenario.influent = _parse_influent(
            d.get("influent", {}), species, inlet_ids,
            scenario.tau_ic, n_grid, timing.delta, base_dir)
    except ScenarioError:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise ScenarioParseError(f"scenario: {e}") from None

    violations = validate_scenario(scenario)
    if violations:
        raise ScenarioValidationError(violations)
    return scenario


def bundled_path(name: str) -> Path:
    """Path to a data file shipped inside the package."""
    return Path(__file__).parent / "data" / name


def load_scenario(path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ScenarioParseError(f"cannot read {path}: {e}") from None
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise ScenarioParseError(
            f"{path.name}: line {e.lineno}, column {e.colno}: {e.msg}") from None
    if not isinstance(d, dict):
        raise ScenarioParseError(f"{path.name}: top level must be a mapping")
    return scenario_from_dict(d, base_dir=path.parent)


# --------------------------------------------------------------- serialization

def scenario_to_dict(scenario: Scenario) -> dict:
    """Inverse of scenario_from_dict, with rates per minute and influent inline."""
    net = scenario.network
    tanks = []
    for t in net.tanks:
        td = {"id": t.id, "kind": t.kind.value}
        if t.kind is TankKind.PLANT:
            td.update(v_bar=t.v_bar, q_out_min=t.q_out_min, q_out_max=t.q_out_max)
        elif t.kind is not TankKind.DIVERSION:
            td["v_max"] = t.v_max
        if t.beta:
            td["beta"] = t.beta
        if t.has_external_inflow:
            td["external_inflow"] = True
        tanks.append(td)

    pipes = []
    for p in net.pipes:
        pd = {"from": p.source, "to": p.target, "q_max": p.q_max,
              "delay_steps": p.delay_steps}
        if isinstance(p.control, PumpOrGate):
            pd["control"] = {"type": "pump_or_gate", "q_min": p.control.q_min,
                             "q_max": p.control.q_max}
        else:
            pd["control"] = {"type": _CONTROL_TAGS[type(p.control)]}
        pipes.append(pd)

    plants = {}
    for pid, bio in scenario.biology.items():
        reactions = []
        for j, (name, law) in enumerate(zip(bio.reaction_names, bio.laws)):
            col = {bio.species[i]: bio.kappa[i][j]
                   for i in range(len(bio.species)) if bio.kappa[i][j] != 0.0}
            reactions.append({"name": name, "law": _law_to_dict(law, bio.species),
                              "kappa": col})
        plants[pid] = {
            "death_rate_per_min": bio.death_rate,
            "effluent_biomass_factor": bio.effluent_biomass_factor,
            "reactions": reactions,
        }

    inf = scenario.influent
    grid_t = ((np.arange(inf.n_periods()) - inf.history_steps) * scenario.timing.delta)
    inline = {}
    for inlet in inf.inlets:
        inline[inlet] = {
            "t_min": grid_t.tolist(),
            "flow": inf.flow[inlet].tolist(),
            "concentrations": {
                s: inf.conc[inlet][:, i].tolist() for i, s in enumerate(scenario.species)
            },
        }

    w = scenario.weights
    return {
        "name": scenario.name,
        "timing": {
            "delta_min": scenario.timing.delta,
            "control_period_min": scenario.timing.control_period,
            "horizon_steps": scenario.timing.horizon_steps,
            "sim_periods": scenario.timing.sim_periods,
            "am_order": scenario.timing.am_order,
        },
        "network": {"tanks": tanks, "pipes": pipes},
        "biology": {
            "species": list(scenario.species),
            "biomass": scenario.species[next(iter(scenario.biology.values())).biomass_index]
            if scenario.biology else None,
            "plants": plants,
        },
        "weights": {
            "flooding": w.flooding, "cso": w.cso,
            "release": dict(zip(scenario.species, w.release)),
            "regulation": dict(zip(scenario.species, w.regulation)),
            "growth": list(w.growth),
            "slope": w.slope, "curvature": w.curvature,
            "final_volume": w.final_volume, "total_volume": w.total_volume,
            "plant_balance": w.plant_balance, "time_balance": w.time_balance,
        },
        "xi_max": {s: (None if math.isinf(v) else v)
                   for s, v in zip(scenario.species, scenario.xi_max)},
        "initial_state": {
            "volumes": dict(scenario.initial_state.volumes),
            "concentrations": {
                k: dict(zip(scenario.species, v))
                for k, v in scenario.initial_state.concentrations.items()
            },
            "setpoints": dict(scenario.initial_state.setpoints),
        },
        "influent": {"inline": inline},
    }


def serialize_scenario(scenario: Scenario) -> str:
    return json.dumps(scenario_to_dict(scenario), indent=2)


def save_scenario(scenario: Scenario, path) -> None:
    Path(path).write_text(serialize_scenario(scenario) + "\n")
