"""Trajectory optimization programs over the sewer network.

Two program families share one feasible flow-and-volume set:

* :func:`build_traj_f` plans flows and volumes only (flood/overflow
  avoidance plus smoothness and emptying incentives).
* :func:`build_traj_fc` additionally carries treatment-plant
  concentration states, relaxed reaction-rate variables inside
  second-order cones, and pollution objective terms, using forecast
  inlet/plant concentrations supplied by an external estimator.

Both are assembled over fine periods ``l = 0..H``. References to periods
before 0 are substituted with constants taken from an
:class:`~sewerflow.simulate.Observation` (measured volumes and
concentrations, applied setpoint history), so the initial conditions live
in the row right-hand sides rather than in pinned variables.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .discretize import am_coefficients, delayed_index
from .kinetics import Contois, soc_rows, underestimator_row
from .model import Scenario, TankKind, Weights
from .simulate import Observation
from .solver import ConicProgram, ProgramBuilder

_VIRTUAL = TankKind.VIRTUAL


# ------------------------------------------------------------------- layout

@dataclass(frozen=True)
class VariableLayout:
    """Column indexing for one trajectory program.

    Variables are grouped per fine period; within a period the order is
    pipe flows, plant outflows, flood rates, plant overflow rates, tank
    volumes, then (concentration-aware programs only) plant concentrations,
    relaxed reaction rates, and regulation slack.
    """

    horizon: int
    with_concentration: bool
    pipe_keys: tuple[str, ...]
    plant_ids: tuple[str, ...]
    virtual_ids: tuple[str, ...]
    volume_ids: tuple[str, ...]
    species: tuple[str, ...]
    n_reactions: tuple[int, ...]  # kinetic reactions per plant
    hinge_species: tuple[int, ...]  # species indices with a finite cap
    per_period: int
    n_vars: int
    _pipe_pos: dict
    _plant_pos: dict
    _virtual_pos: dict
    _volume_pos: dict
    _off: dict

    @classmethod
    def build(cls, scenario: Scenario, horizon: int, with_concentration: bool) -> "VariableLayout":
        net = scenario.network
        pipe_keys = tuple(p.key for p in net.pipes)
        plant_ids = tuple(t.id for t in net.plants)
        virtual_ids = tuple(t.id for t in net.virtual_tanks)
        volume_ids = tuple(t.id for t in net.volume_tanks)
        m = scenario.n_species
        n_reac = tuple(scenario.biology[p].n_reactions for p in plant_ids)
        hinge = tuple(
            s for s in range(m) if np.isfinite(scenario.xi_max[s])
        )
        off = {}
        pos = 0
        off["q"] = pos
        pos += len(pipe_keys)
        off["qout"] = pos
        pos += len(plant_ids)
        off["qf"] = pos
        pos += len(virtual_ids)
        off["qcso"] = pos
        pos += len(plant_ids)
        off["v"] = pos
        pos += len(volume_ids)
        if with_concentration:
            off["xi"] = pos
            pos += len(plant_ids) * m
            off["t"] = pos
            pos += int(sum(n_reac))
            off["h"] = pos
            pos += len(plant_ids) * len(hinge)
        per = pos
        return cls(
            horizon=horizon,
            with_concentration=with_concentration,
            pipe_keys=pipe_keys,
            plant_ids=plant_ids,
            virtual_ids=virtual_ids,
            volume_ids=volume_ids,
            species=scenario.species,
            n_reactions=n_reac,
            hinge_species=hinge,
            per_period=per,
            n_vars=per * (horizon + 1) + len(plant_ids),
            _pipe_pos={k: i for i, k in enumerate(pipe_keys)},
            _plant_pos={k: i for i, k in enumerate(plant_ids)},
            _virtual_pos={k: i for i, k in enumerate(virtual_ids)},
            _volume_pos={k: i for i, k in enumerate(volume_ids)},
            _off=off,
        )

    # index helpers; l must lie in [0, horizon]

    def _at(self, l: int, block: str, pos: int) -> int:
        if not 0 <= l <= self.horizon:
            raise IndexError(f"period {l} outside 0..{self.horizon}")
        return l * self.per_period + self._off[block] + pos

    def q(self, pipe_key: str, l: int) -> int:
        return self._at(l, "q", self._pipe_pos[pipe_key])

    def qout(self, plant: str, l: int) -> int:
        return self._at(l, "qout", self._plant_pos[plant])

    def qf(self, tank: str, l: int) -> int:
        return self._at(l, "qf", self._virtual_pos[tank])

    def qcso(self, plant: str, l: int) -> int:
        return self._at(l, "qcso", self._plant_pos[plant])

    def v(self, tank: str, l: int) -> int:
        return self._at(l, "v", self._volume_pos[tank])

    def xi(self, plant: str, s: int, l: int) -> int:
        m = len(self.species)
        return self._at(l, "xi", self._plant_pos[plant] * m + s)

    def t(self, plant: str, r: int, l: int) -> int:
        p = self._plant_pos[plant]
        base = int(sum(self.n_reactions[:p]))
        return self._at(l, "t", base + r)

    def hinge(self, plant: str, s: int, l: int) -> int:
        pos = self._plant_pos[plant] * len(self.hinge_species) + self.hinge_species.index(s)
        return self._at(l, "h", pos)

    def qout_total(self, plant: str) -> int:
        """Auxiliary: plant outflow summed over the horizon.

        Defined by an equality row; keeps the load-spreading quadratic sparse
        instead of coupling every pair of periods."""
        return self.per_period * (self.horizon + 1) + self._plant_pos[plant]

    def var_names(self) -> list[str]:
        names = []
        for l in range(self.horizon + 1):
            names.extend(f"Q[{k}|{l}]" for k in self.pipe_keys)
            names.extend(f"QOUT[{p}|{l}]" for p in self.plant_ids)
            names.extend(f"QF[{t}|{l}]" for t in self.virtual_ids)
            names.extend(f"QCSO[{p}|{l}]" for p in self.plant_ids)
            names.extend(f"V[{t}|{l}]" for t in self.volume_ids)
            if self.with_concentration:
                for p in self.plant_ids:
                    names.extend(f"XI[{p}|{s}|{l}]" for s in self.species)
                for pi, p in enumerate(self.plant_ids):
                    names.extend(f"T[{p}|{r}|{l}]" for r in range(self.n_reactions[pi]))
                for p in self.plant_ids:
                    names.extend(
                        f"HG[{p}|{self.species[s]}|{l}]" for s in self.hinge_species
                    )
        names.extend(f"QOUTSUM[{p}]" for p in self.plant_ids)
        return names


# ---------------------------------------------------------------- assembly

class _Ctx:
    """Precomputed lookups shared by the row emitters."""

    def __init__(self, scenario: Scenario, layout: VariableLayout, obs: Observation):
        self.scn = scenario
        self.lay = layout
        self.obs = obs
        net = scenario.network
        self.net = net
        self.delta = scenario.timing.delta
        self.ratio = scenario.timing.steps_per_control
        self.tau = scenario.tau_ic
        self.scheme = am_coefficients(scenario.timing.am_order)
        self.start = obs.period
        self.pipes = {p.key: p for p in net.pipes}
        self.tank = {t.id: t for t in net.tanks}
        self.pipes_in = {t.id: net.pipes_in(t.id) for t in net.tanks}
        self.pipes_out = {t.id: net.pipes_out(t.id) for t in net.tanks}

    # ---- history-aware value/variable terms

    def q_term(self, pipe, l: int) -> tuple[int | None, float]:
        """Pipe flow at period l: a variable for l >= 0, else observed history."""
        if l >= 0:
            return self.lay.q(pipe.key, l), 0.0
        j = -l
        if j > self.tau:
            raise IndexError(f"flow history for {pipe.key} at {l} not observed")
        if pipe.is_actuated:
            return None, float(self.obs.setpoints[pipe.key][j - 1])
        src = self.tank[pipe.source]
        return None, src.beta * float(self.obs.volumes[pipe.source][j])

    def qout_term(self, plant: str, l: int) -> tuple[int | None, float]:
        if l >= 0:
            return self.lay.qout(plant, l), 0.0
        j = -l
        if j > self.tau:
            raise IndexError(f"outflow history for {plant} at {l} not observed")
        return None, float(self.obs.setpoints[plant][j - 1])

    def v_const(self, tank: str, l: int) -> float:
        return float(self.obs.volumes[tank][-l])

    def influent_flow(self, tank: str, l: int) -> float:
        inf = self.scn.influent
        if tank not in inf.flow:
            return 0.0
        a = self.start + l
        a = min(max(a, -inf.history_steps), inf.n_periods() - inf.history_steps - 1)
        return inf.flow_at(tank, a)

    # ---- net volume rate of one tank at period n (>=0 variables, <0 constant)

    def dv_terms(self, tank, n: int) -> tuple[dict[int, float], float]:
        if n < 0:
            vv = self.obs.volumes[tank.id]
            j = -n
            if j + 1 > self.tau:
                raise IndexError(f"volume history for {tank.id} at {n} too short")
            return {}, (float(vv[j]) - float(vv[j + 1])) / self.delta
        coeffs: dict[int, float] = {}
        const = 0.0
        if tank.has_external_inflow:
            const += self.influent_flow(tank.id, n)
        for p in self.pipes_in[tank.id]:
            idx, c = self.q_term(p, delayed_index(n, p, self.tau))
            if idx is None:
                const += c
            else:
                coeffs[idx] = coeffs.get(idx, 0.0) + 1.0
        for p in self.pipes_out[tank.id]:
            idx, _ = self.q_term(p, n)
            coeffs[idx] = coeffs.get(idx, 0.0) - 1.0
        if tank.kind is _VIRTUAL:
            coeffs[self.lay.qf(tank.id, n)] = -1.0
        return coeffs, const

    # ---- estimated plant concentration rate at period n

    def dxi_terms(self, plant: str, s: int, n: int, xi_in_hat, xi_hat) -> tuple[dict[int, float], float]:
        if n < 0:
            cc = self.obs.plant_conc[plant]
            j = -n
            if j + 1 > self.tau:
                raise IndexError(f"concentration history for {plant} at {n} too short")
            return {}, (float(cc[j, s]) - float(cc[j + 1, s])) / self.delta
        bio = self.scn.biology[plant]
        kap = bio.full_kappa()
        coeffs: dict[int, float] = {}
        for r in range(bio.n_reactions):
            if kap[s, r]:
                coeffs[self.lay.t(plant, r, n)] = float(kap[s, r])
        decay = float(kap[s, -1]) * bio.death_rate
        if decay:
            xidx = self.lay.xi(plant, bio.biomass_index, n)
            coeffs[xidx] = coeffs.get(xidx, 0.0) + decay
        pi = self.lay._plant_pos[plant]
        f_s = bio.effluent_biomass_factor if s == bio.biomass_index else 1.0
        vbar = self.tank[plant].v_bar
        gain = (float(xi_in_hat[n, pi, s]) - f_s * float(xi_hat[n, pi, s])) / vbar
        if gain:
            qidx = self.lay.qout(plant, n)
            coeffs[qidx] = coeffs.get(qidx, 0.0) + gain
        return coeffs, 0.0


def _merge(dst: dict[int, float], src: dict[int, float], scale: float):
    for i, v in src.items():
        dst[i] = dst.get(i, 0.0) + scale * v


def _add_flow_volume_rows(b: ProgramBuilder, ctx: _Ctx):
    """Shared feasible set: bounds, actuator holds, junction and plant
    balances, level-driven flows, and the tank volume update stencils."""
    lay, scn = ctx.lay, ctx.scn
    net = ctx.net
    H = lay.horizon
    alpha = ctx.scheme.alpha

    for l in range(H + 1):
        for p in net.pipes:
            qi = lay.q(p.key, l)
            lo = float(getattr(p.control, "q_min", 0.0))
            hi = min(p.q_max, float(getattr(p.control, "q_max", p.q_max)))
            b.add_ub({qi: -1.0}, -lo)
            b.add_ub({qi: 1.0}, hi)
        for t in net.plants:
            qi = lay.qout(t.id, l)
            b.add_ub({qi: -1.0}, -t.q_out_min)
            b.add_ub({qi: 1.0}, t.q_out_max)
            b.add_ub({lay.qcso(t.id, l): -1.0}, 0.0)
        for t in net.virtual_tanks:
            b.add_ub({lay.qf(t.id, l): -1.0}, 0.0)
        for t in net.volume_tanks:
            vi = lay.v(t.id, l)
            b.add_ub({vi: -1.0}, 0.0)
            b.add_ub({vi: 1.0}, t.v_max)

    # flows that follow the stored level: equality for uncontrolled pipes,
    # upper bound for volume-limited actuators
    for l in range(H + 1):
        for p in net.pipes:
            if p.is_actuated and type(p.control).__name__ != "VolumeLimited":
                continue
            beta = ctx.tank[p.source].beta
            row = {lay.q(p.key, l): 1.0, lay.v(p.source, l): -beta}
            if p.is_actuated:
                b.add_ub(row, 0.0)
            else:
                b.add_eq(row, 0.0)

    # actuator setpoints held constant inside each control period; branch
    # flows stay free per period because junction arrivals can shift
    # mid-period through transport delays and the split must absorb that
    for p in net.actuated_pipes:
        if type(p.control).__name__ == "DiversionBranch":
            continue
        for l in range(1, H + 1):
            if l % ctx.ratio:
                b.add_eq({lay.q(p.key, l): 1.0, lay.q(p.key, l - 1): -1.0}, 0.0)

    # junction balance: delayed arrivals split across branches, no storage
    for t in net.diversion_nodes:
        for l in range(H + 1):
            coeffs: dict[int, float] = {}
            const = 0.0
            for p in ctx.pipes_in[t.id]:
                idx, c = ctx.q_term(p, delayed_index(l, p, ctx.tau))
                if idx is None:
                    const += c
                else:
                    coeffs[idx] = coeffs.get(idx, 0.0) + 1.0
            for p in ctx.pipes_out[t.id]:
                idx, _ = ctx.q_term(p, l)
                coeffs[idx] = coeffs.get(idx, 0.0) - 1.0
            b.add_eq(coeffs, -const)

    # plant inlet: arrivals either enter treatment or overflow
    for t in net.plants:
        for l in range(H + 1):
            coeffs = {}
            const = 0.0
            for p in ctx.pipes_in[t.id]:
                idx, c = ctx.q_term(p, delayed_index(l, p, ctx.tau))
                if idx is None:
                    const += c
                else:
                    coeffs[idx] = coeffs.get(idx, 0.0) + 1.0
            coeffs[lay.qout(t.id, l)] = coeffs.get(lay.qout(t.id, l), 0.0) - 1.0
            coeffs[lay.qcso(t.id, l)] = coeffs.get(lay.qcso(t.id, l), 0.0) - 1.0
            b.add_eq(coeffs, -const)

    # horizon totals of plant outflow (used by the load-spreading objective;
    # always defined so no variable floats free)
    for t in net.plants:
        coeffs = {lay.qout(t.id, l): -1.0 for l in range(H + 1)}
        coeffs[lay.qout_total(t.id)] = 1.0
        b.add_eq(coeffs, 0.0)

    # multistep volume update
    for t in net.volume_tanks:
        for l in range(H + 1):
            coeffs = {lay.v(t.id, l): 1.0}
            const = 0.0
            if l >= 1:
                coeffs[lay.v(t.id, l - 1)] = -1.0
            else:
                const -= ctx.v_const(t.id, l - 1)
            for k, a_k in enumerate(alpha):
                dv_c, dv_k = ctx.dv_terms(t, l - k)
                _merge(coeffs, dv_c, -ctx.delta * a_k)
                const -= ctx.delta * a_k * dv_k
            b.add_eq(coeffs, -const)


def _add_concentration_rows(b: ProgramBuilder, ctx: _Ctx, xi_in_hat, xi_hat, with_chords: bool):
    """Plant concentration stencils, rate-relaxation cones, nonnegativity,
    and regulation slack rows."""
    lay, scn = ctx.lay, ctx.scn
    H = lay.horizon
    m = scn.n_species
    alpha = ctx.scheme.alpha

    for p in lay.plant_ids:
        bio = scn.biology[p]
        for l in range(H + 1):
            for s in range(m):
                b.add_ub({lay.xi(p, s, l): -1.0}, 0.0)
            for r in range(bio.n_reactions):
                b.add_ub({lay.t(p, r, l): -1.0}, 0.0)
            for s in lay.hinge_species:
                hi = lay.hinge(p, s, l)
                b.add_ub({hi: -1.0}, 0.0)
                b.add_ub({lay.xi(p, s, l): 1.0, hi: -1.0}, float(scn.xi_max[s]))

    for p in lay.plant_ids:
        bio = scn.biology[p]
        for s in range(m):
            for l in range(H + 1):
                coeffs = {lay.xi(p, s, l): 1.0}
                const = 0.0
                if l >= 1:
                    coeffs[lay.xi(p, s, l - 1)] = -1.0
                else:
                    const -= float(ctx.obs.plant_conc[p][1, s])
                for k, a_k in enumerate(alpha):
                    dc, dk = ctx.dxi_terms(p, s, l - k, xi_in_hat, xi_hat)
                    _merge(coeffs, dc, -ctx.delta * a_k)
                    const -= ctx.delta * a_k * dk
                b.add_eq(coeffs, -const)

    # relaxed kinetics: rate variable constrained under the concave rate law
    for p in lay.plant_ids:
        bio = scn.biology[p]
        for r, law in enumerate(bio.laws):
            rows = soc_rows(law)
            bio_idx = getattr(law, "biomass_index", None)
            if bio_idx is None:
                bio_idx = bio.biomass_index
            for l in range(H + 1):
                zmap = (
                    lay.xi(p, law.substrate_index, l),
                    lay.xi(p, bio_idx, l),
                    lay.t(p, r, l),
                )
                for row in rows:
                    lhs = []
                    for ar, br in zip(row.A, row.b):
                        rc: dict[int, float] = {}
                        for c, val in enumerate(ar):
                            if val:
                                rc[zmap[c]] = rc.get(zmap[c], 0.0) + float(val)
                        lhs.append((rc, float(br)))
                    rhs_c: dict[int, float] = {}
                    for c, val in enumerate(row.c):
                        if val:
                            rhs_c[zmap[c]] = rhs_c.get(zmap[c], 0.0) + float(val)
                    b.add_soc(lhs, rhs_c, float(row.d))

    if with_chords:
        _add_chord_rows(b, ctx, xi_in_hat)


def _add_chord_rows(b: ProgramBuilder, ctx: _Ctx, xi_in_hat):
    """Optional secant lower bounds on the relaxed rates.

    Valid only on a bounded substrate range, so each chord comes with a
    matching substrate cap. Tightens the relaxation from below; never needed
    for feasibility."""
    lay, scn = ctx.lay, ctx.scn
    for p in lay.plant_ids:
        bio = scn.biology[p]
        pi = lay._plant_pos[p]
        for r, law in enumerate(bio.laws):
            sub = law.substrate_index
            cap = scn.xi_max[sub]
            if not np.isfinite(cap):
                cap = max(1e-6, 2.0 * float(np.max(xi_in_hat[:, pi, sub])))
            if isinstance(law, Contois):
                x_ref = float(ctx.obs.plant_conc[p][0, bio.biomass_index])
            else:
                x_ref = law.x_bar
            if x_ref <= 0:
                continue
            chord = underestimator_row(law, 0.0, float(cap), x_ref)
            for l in range(lay.horizon + 1):
                b.add_ub({lay.xi(p, sub, l): 1.0}, float(cap))
                b.add_ub(
                    {lay.xi(p, sub, l): chord.slope, lay.t(p, r, l): -1.0},
                    -chord.intercept,
                )


def _smoothness_channels(ctx: _Ctx):
    """Actuated flows whose period-to-period changes are penalized."""
    chans = [("pipe", p.key) for p in ctx.net.actuated_pipes]
    chans += [("plant", t.id) for t in ctx.net.plants]
    return chans


def _channel_term(ctx: _Ctx, kind: str, key: str, l: int):
    if kind == "pipe":
        return ctx.q_term(ctx.pipes[key], l)
    return ctx.qout_term(key, l)


RATE_PUSH = 0.1  # weight per priced unit of in-plant substrate stock


def _substrate_prices(bio) -> np.ndarray:
    """Species prices under which every kinetic reaction consumes one
    priced unit per unit rate (kappa^T pi = -1 over non-biomass species).

    The reaction rates only shrink total objective risk; their timing is
    otherwise flat, so an interior-point solver parks them mid-cone. A
    small linear cost on the plant substrate stocks, priced this way,
    strictly rewards consuming every stock now rather than later, which
    pins each relaxed rate to its kinetic bound. Amplifying steps (one
    consumed unit yielding several downstream units) get correspondingly
    larger upstream prices so the push never reverses along a chain.
    Species the reactions never touch come out at zero (least-norm
    solve); negative components are clipped, which weakens the push on
    the affected reactions instead of flipping its sign.
    """
    kap = bio.full_kappa()[:, : bio.n_reactions]
    m = kap.shape[0]
    out = np.zeros(m)
    sub = [s for s in range(m) if s != bio.biomass_index]
    if not sub or not bio.n_reactions:
        return out
    coeffs = kap[sub, :].T  # one row per reaction
    pi, *_ = np.linalg.lstsq(coeffs, -np.ones(coeffs.shape[0]), rcond=None)
    out[sub] = np.clip(pi, 0.0, None)
    return out


def _add_objective(b: ProgramBuilder, ctx: _Ctx, w: Weights, xi_hat, pollution: bool):
    lay, scn = ctx.lay, ctx.scn
    H = lay.horizon
    delta = ctx.delta

    if w.flooding:
        for t in lay.virtual_ids:
            for l in range(H + 1):
                b.add_obj_lin(lay.qf(t, l), w.flooding)
    if w.cso:
        for p in lay.plant_ids:
            for l in range(H + 1):
                b.add_obj_lin(lay.qcso(p, l), w.cso)
    if w.final_volume:
        for t in lay.volume_ids:
            b.add_obj_lin(lay.v(t, H), w.final_volume)
    if w.total_volume:
        for t in lay.volume_ids:
            for l in range(H + 1):
                b.add_obj_lin(lay.v(t, l), w.total_volume)

    if pollution:
        if any(w.release):
            for p in lay.plant_ids:
                bio = scn.biology[p]
                pi = lay._plant_pos[p]
                for l in range(H + 1):
                    coeff = 0.0
                    for s in range(scn.n_species):
                        f_s = bio.effluent_biomass_factor if s == bio.biomass_index else 1.0
                        coeff += w.release[s] * f_s * float(xi_hat[l, pi, s])
                    b.add_obj_lin(lay.qout(p, l), delta * coeff)
        if any(w.growth):
            for p in lay.plant_ids:
                bio = scn.biology[p]
                vbar = ctx.tank[p].v_bar
                for r in range(bio.n_reactions):
                    for l in range(H + 1):
                        b.add_obj_lin(lay.t(p, r, l), -delta * w.growth[r] * vbar)
            # exactness push: see _substrate_prices
            for p in lay.plant_ids:
                prices = _substrate_prices(scn.biology[p])
                for s in range(scn.n_species):
                    coef = RATE_PUSH * delta * float(prices[s])
                    if not coef:
                        continue
                    for l in range(H + 1):
                        b.add_obj_lin(lay.xi(p, s, l), coef)
        if any(w.regulation):
            for p in lay.plant_ids:
                for s in lay.hinge_species:
                    if not w.regulation[s]:
                        continue
                    for l in range(H + 1):
                        b.add_obj_lin(lay.hinge(p, s, l), w.regulation[s])

    if w.slope:
        b.quad_group("slope", w.slope)
        for kind, key in _smoothness_channels(ctx):
            for l in range(H + 1):
                coeffs: dict[int, float] = {}
                const = 0.0
                i0, c0 = _channel_term(ctx, kind, key, l)
                coeffs[i0] = 1.0
                i1, c1 = _channel_term(ctx, kind, key, l - 1)
                if i1 is None:
                    const -= c1
                else:
                    coeffs[i1] = coeffs.get(i1, 0.0) - 1.0
                b.add_quad_row("slope", coeffs, const)
    if w.curvature:
        b.quad_group("curvature", w.curvature)
        for kind, key in _smoothness_channels(ctx):
            for l in range(H + 1):
                coeffs = {}
                const = 0.0
                for shift, cf in ((0, 1.0), (-1, -2.0), (-2, 1.0)):
                    idx, cv = _channel_term(ctx, kind, key, l + shift)
                    if idx is None:
                        const += cf * cv
                    else:
                        coeffs[idx] = coeffs.get(idx, 0.0) + cf
                b.add_quad_row("curvature", coeffs, const)

    plants = [ctx.tank[p] for p in lay.plant_ids]
    if w.plant_balance and len(plants) > 1:
        b.quad_group("plant_balance", w.plant_balance)
        cap_sum = sum(t.q_out_max for t in plants)
        for l in range(H + 1):
            for t in plants:
                coeffs = {}
                for o in plants:
                    coeffs[lay.qout(o.id, l)] = (
                        (1.0 / t.q_out_max if o.id == t.id else 0.0) - 1.0 / cap_sum
                    )
                b.add_quad_row("plant_balance", coeffs)
    if w.time_balance:
        # per-period deviation from the horizon mean, scaled into capacity
        # units: ((H+1) q(l) - sum_m q(m)) / q_max
        b.quad_group("time_balance", w.time_balance)
        n_per = H + 1
        for t in plants:
            for l in range(H + 1):
                b.add_quad_row(
                    "time_balance",
                    {
                        lay.qout(t.id, l): n_per / t.q_out_max,
                        lay.qout_total(t.id): -1.0 / t.q_out_max,
                    },
                )


# ------------------------------------------------------------------ public

def _check_obs(scenario: Scenario, obs: Observation):
    if obs.tau_ic != scenario.tau_ic:
        raise ValueError(
            f"observation history length {obs.tau_ic} does not match "
            f"the scenario requirement {scenario.tau_ic}"
        )


def _assemble(
    scenario: Scenario,
    obs: Observation,
    horizon: int | None,
    with_concentration: bool,
    xi_in_hat,
    xi_hat,
    weights: Weights | None,
    pollution: bool,
    with_chords: bool = False,
    skip_objective: bool = False,
) -> tuple[ConicProgram, VariableLayout]:
    _check_obs(scenario, obs)
    H = scenario.timing.horizon_steps if horizon is None else int(horizon)
    if H < 1:
        raise ValueError("horizon must cover at least one period")
    layout = VariableLayout.build(scenario, H, with_concentration)
    ctx = _Ctx(scenario, layout, obs)
    b = ProgramBuilder()
    b.add_vars(layout.var_names())
    _add_flow_volume_rows(b, ctx)
    if with_concentration:
        if xi_in_hat is None or xi_hat is None:
            raise ValueError("concentration-aware program needs inlet and plant forecasts")
        xi_in_hat = np.asarray(xi_in_hat, dtype=float)
        xi_hat = np.asarray(xi_hat, dtype=float)
        want = (H + 1, len(layout.plant_ids), scenario.n_species)
        if xi_in_hat.shape != want or xi_hat.shape != want:
            raise ValueError(f"forecast arrays must have shape {want}")
        _add_concentration_rows(b, ctx, xi_in_hat, xi_hat, with_chords)
    if not skip_objective:
        w = scenario.weights if weights is None else weights
        _add_objective(b, ctx, w, xi_hat, pollution)
    return b.build(), layout


def build_omega(
    scenario: Scenario,
    observation: Observation,
    *,
    horizon: int | None = None,
    with_concentration: bool = False,
) -> tuple[ConicProgram, VariableLayout]:
    """Feasible set with no objective: the flow-and-volume rows both
    controllers share, plus (optionally) the concentration block with
    zeroed forecasts for layout and row-count inspection."""
    if not with_concentration:
        return _assemble(
            scenario, observation, horizon, False, None, None,
            weights=None, pollution=False, skip_objective=True,
        )
    H = scenario.timing.horizon_steps if horizon is None else int(horizon)
    zero = np.zeros((H + 1, len(scenario.network.plants), scenario.n_species))
    return _assemble(
        scenario, observation, H, True, zero, zero,
        weights=None, pollution=False, skip_objective=True,
    )


def build_traj_f(
    scenario: Scenario,
    observation: Observation,
    *,
    horizon: int | None = None,
    weights: Weights | None = None,
) -> tuple[ConicProgram, VariableLayout]:
    """Volume-based trajectory program: flood/overflow avoidance and
    smooth, tank-emptying flow plans, with no concentration states."""
    return _assemble(
        scenario, observation, horizon, False, None, None,
        weights=weights, pollution=False,
    )


def build_traj_fc(
    scenario: Scenario,
    observation: Observation,
    xi_in_hat: np.ndarray,
    xi_hat: np.ndarray,
    *,
    horizon: int | None = None,
    weights: Weights | None = None,
    with_chords: bool = False,
) -> tuple[ConicProgram, VariableLayout]:
    """Pollution-aware trajectory program.

    ``xi_in_hat`` and ``xi_hat`` are forecasts of plant inlet and plant
    concentrations on the program grid, shaped ``(horizon+1, n_plants,
    n_species)`` in network plant order. They parameterize the linearized
    treatment dynamics and the release objective.
    """
    return _assemble(
        scenario, observation, horizon, True, xi_in_hat, xi_hat,
        weights=weights, pollution=True, with_chords=with_chords,
    )


def actuator_bounds(scenario: Scenario) -> tuple[np.ndarray, np.ndarray]:
    """Setpoint bounds per actuator key (pipes then plant outflows)."""
    lo, hi = [], []
    for p in scenario.network.actuated_pipes:
        lo.append(float(getattr(p.control, "q_min", 0.0)))
        hi.append(min(p.q_max, float(getattr(p.control, "q_max", p.q_max))))
    for t in scenario.network.plants:
        lo.append(t.q_out_min)
        hi.append(t.q_out_max)
    return np.asarray(lo), np.asarray(hi)


def extract_plan(layout: VariableLayout, x: np.ndarray, scenario: Scenario) -> np.ndarray:
    """Planned setpoint rows, one per fine period, columns in actuator order."""
    keys = scenario.actuator_keys
    rows = np.empty((layout.horizon + 1, len(keys)))
    for a, key in enumerate(keys):
        for l in range(layout.horizon + 1):
            if key in layout._pipe_pos:
                rows[l, a] = x[layout.q(key, l)]
            else:
                rows[l, a] = x[layout.qout(key, l)]
    lo, hi = actuator_bounds(scenario)
    return np.clip(rows, lo, hi)


def extract_controls(layout: VariableLayout, x: np.ndarray, scenario: Scenario) -> np.ndarray:
    """Setpoint row to apply over the next control period.

    Actuated pipes are held constant across the period by the program's
    equality rows, so the first planned period is the applied command.
    """
    return extract_plan(layout, x, scenario)[0]
