"""Growth-rate laws, their second-order-cone relaxations, and exactness diagnostics.

Each kinetic law maps a substrate concentration S and biomass concentration X
to a reaction rate phi(S, X) that is concave on the nonnegative orthant. The
trajectory optimizer never imposes T = phi (nonconvex); it imposes the
hypograph inequality T <= phi expressed exactly as second-order cone rows over
the symbols z = (S, X, T).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

EPS_GAP = 1e-12  # exactness_gap denominator floor


@dataclass(frozen=True)
class Contois:
    """phi(S, X) = mu*S*X / (k_c*X + S); 0 at S = X = 0 (continuous limit along S=X)."""

    mu: float            # max specific rate [1/min]
    k_c: float           # half-saturation [dimensionless]
    substrate_index: int
    biomass_index: int

    def __post_init__(self):
        if self.mu <= 0 or self.k_c <= 0:
            raise ValueError("Contois law requires mu > 0 and k_c > 0")


@dataclass(frozen=True)
class MonodFixedBiomass:
    """phi(S) = mu*S*x_bar / (k_m + S); biomass fixed at exogenous x_bar."""

    mu: float            # [1/min]
    k_m: float           # [kg/m^3]
    x_bar: float         # [kg/m^3]
    substrate_index: int
    biomass_index: int | None = None

    def __post_init__(self):
        if self.mu <= 0 or self.k_m <= 0:
            raise ValueError("Monod law requires mu > 0 and k_m > 0")
        if self.x_bar < 0:
            raise ValueError("x_bar must be nonnegative")


@dataclass(frozen=True)
class FirstOrderDecay:
    """phi(X) = rate*X. Linear; used for the appended biomass-death column."""

    rate: float          # [1/min]
    biomass_index: int
    substrate_index: int | None = None

    def __post_init__(self):
        if self.rate < 0:
            raise ValueError("decay rate must be nonnegative")


KineticLaw = Contois | MonodFixedBiomass | FirstOrderDecay


@dataclass(frozen=True)
class ConeRow:
    """The cone ||A z + b|| <= c.z + d over symbols z = (S, X, T)."""

    A: tuple[tuple[float, float, float], ...]
    b: tuple[float, ...]
    c: tuple[float, float, float]
    d: float

    def residual(self, S: float, X: float, T: float) -> float:
        """||A z + b|| - (c.z + d); feasible iff <= 0."""
        z = np.array([S, X, T], dtype=float)
        lhs = np.linalg.norm(np.asarray(self.A) @ z + np.asarray(self.b))
        rhs = float(np.dot(self.c, z)) + self.d
        return float(lhs - rhs)


@dataclass(frozen=True)
class ChordRow:
    """Linear underestimator T >= slope*S + intercept on a substrate interval."""

    slope: float
    intercept: float
    s_min: float
    s_max: float

    def value(self, S: float) -> float:
        return self.slope * S + self.intercept


def rate_eval(law: KineticLaw, S: float, X: float) -> float:
    """Evaluate phi at concentrations (S, X). Inputs must be nonnegative."""
    if S < 0 or X < 0:
        raise ValueError(f"concentrations must be nonnegative, got S={S}, X={X}")
    if isinstance(law, Contois):
        den = law.k_c * X + S
        if den == 0.0:
            return 0.0
        return law.mu * S * X / den
    if isinstance(law, MonodFixedBiomass):
        # live X is exogenous here; the fixed x_bar stands in for it
        return law.mu * S * law.x_bar / (law.k_m + S)
    if isinstance(law, FirstOrderDecay):
        return law.rate * X
    raise TypeError(f"unknown kinetic law {type(law).__name__}")


def rate_vector(biology, xi) -> np.ndarray:
    """phi(xi): one rate per reaction column of the biology's stoichiometry."""
    xi = np.asarray(xi, dtype=float)
    m = len(biology.species)
    if xi.shape != (m,):
        raise ValueError(f"xi must have length {m}, got shape {xi.shape}")
    out = np.empty(len(biology.laws))
    for j, law in enumerate(biology.laws):
        s = xi[law.substrate_index] if law.substrate_index is not None else 0.0
        x = xi[law.biomass_index] if law.biomass_index is not None else 0.0
        out[j] = rate_eval(law, s, x)
    return out


def soc_rows(law: KineticLaw) -> list[ConeRow]:
    """Cone rows whose feasible set is {(S,X,T) >= 0 componentwise in S,X : T <= phi(S,X)}.

    Emitted in the exact 3-vector form of the source relaxation (no rotated-cone
    rewrite), one row per law.
    """
    if isinstance(law, Contois):
        mu, kc = law.mu, law.k_c
        return [ConeRow(
            A=((mu, 0.0, 0.0), (0.0, 0.0, kc), (0.0, mu * kc, 0.0)),
            b=(0.0, 0.0, 0.0),
            c=(mu, mu * kc, -kc),
            d=0.0,
        )]
    if isinstance(law, MonodFixedBiomass):
        mu, km, xb = law.mu, law.k_m, law.x_bar
        return [ConeRow(
            A=((mu * xb, 0.0, 0.0), (0.0, 0.0, km), (0.0, 0.0, 0.0)),
            b=(0.0, 0.0, mu * km * xb),
            c=(mu * xb, 0.0, -km),
            d=mu * km * xb,
        )]
    if isinstance(law, FirstOrderDecay):
        raise ValueError("decay law is linear and has no cone form; encode it as a linear row")
    raise TypeError(f"unknown kinetic law {type(law).__name__}")


def underestimator_row(law: KineticLaw, s_min: float, s_max: float, x_ref: float) -> ChordRow:
    """Chord of phi(., x_ref) between s_min and s_max; T >= chord limits slack below phi.

    Sound for the fixed-biomass law; for Contois it underestimates phi(., x_ref)
    only (concavity in S), which is why shipped programs leave it off by default.
    """
    if not (0 <= s_min < s_max):
        raise ValueError(f"need 0 <= s_min < s_max, got [{s_min}, {s_max}]")
    lo = rate_eval(law, s_min, x_ref)
    hi = rate_eval(law, s_max, x_ref)
    slope = (hi - lo) / (s_max - s_min)
    intercept = lo - slope * s_min
    return ChordRow(slope=slope, intercept=intercept, s_min=s_min, s_max=s_max)


def exactness_gap(law: KineticLaw, S: float, X: float, T: float) -> float:
    """Relative slack of the relaxation at a solved point: (phi - T)/max(phi, eps)."""
    phi = rate_eval(law, max(S, 0.0), max(X, 0.0))
    return (phi - T) / max(phi, EPS_GAP)
