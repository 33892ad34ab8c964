"""Conic program container plus the Clarabel backend.

The trajectory builders assemble a :class:`ConicProgram` through
:class:`ProgramBuilder`; adapters translate that one structure into a
specific solver's input format. Keeping the program solver-agnostic lets
tests check constraint rows and objectives without invoking a solver, and
lets the backend switch between a native quadratic objective and an
epigraph reformulation without the builders knowing.

Program form (minimization over x):

    c0 + c.x + sum_g w_g ||A_g x + b_g||^2
    s.t.  A_eq x == b_eq
          A_ub x <= b_ub
          ||F_i x + g_i|| <= h_i.x + e_i   (one per cone block)
"""

from __future__ import annotations

import io
import os
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

DEFAULT_TOL = 1e-8
TOL_ENV_VAR = "SEWERFLOW_SOLVER_TOL"


@dataclass(frozen=True)
class QuadTerm:
    """One weighted sum of squares: coeff * ||a x + b||^2."""

    name: str
    coeff: float
    a: sp.csr_matrix
    b: np.ndarray

    def value(self, x: np.ndarray) -> float:
        r = self.a @ x + self.b
        return self.coeff * float(r @ r)


@dataclass(frozen=True)
class ConicProgram:
    n_vars: int
    var_names: tuple[str, ...]
    obj_lin: np.ndarray
    obj_const: float
    a_eq: sp.csr_matrix
    b_eq: np.ndarray
    a_ub: sp.csr_matrix
    b_ub: np.ndarray
    quads: tuple[QuadTerm, ...]
    # cone blocks, stacked: block i covers soc_a rows soc_slices[i] and reads
    # its right-hand side from soc_c row i / soc_d[i]
    soc_a: sp.csr_matrix
    soc_b: np.ndarray
    soc_c: sp.csr_matrix
    soc_d: np.ndarray
    soc_dims: tuple[int, ...]

    @property
    def n_eq(self) -> int:
        return self.a_eq.shape[0]

    @property
    def n_ub(self) -> int:
        return self.a_ub.shape[0]

    @property
    def n_soc_blocks(self) -> int:
        return len(self.soc_dims)

    @property
    def n_rows(self) -> int:
        """Total constraint rows as the solver sees them (cone rows include the bound side)."""
        return self.n_eq + self.n_ub + int(sum(d + 1 for d in self.soc_dims))

    def objective(self, x: np.ndarray) -> float:
        val = self.obj_const + float(self.obj_lin @ x)
        for q in self.quads:
            val += q.value(x)
        return val

    def residuals(self, x: np.ndarray) -> dict[str, float]:
        """Worst-case violation per constraint family; all ~0 for a feasible x."""
        out = {"eq": 0.0, "ub": 0.0, "soc": 0.0}
        if self.n_eq:
            out["eq"] = float(np.max(np.abs(self.a_eq @ x - self.b_eq)))
        if self.n_ub:
            out["ub"] = float(np.max(np.maximum(self.a_ub @ x - self.b_ub, 0.0)))
        if self.n_soc_blocks:
            lhs = self.soc_a @ x + self.soc_b
            rhs = self.soc_c @ x + self.soc_d
            worst = 0.0
            start = 0
            for i, k in enumerate(self.soc_dims):
                norm = float(np.linalg.norm(lhs[start : start + k]))
                worst = max(worst, norm - float(rhs[i]))  # clamped below
                start += k
            out["soc"] = max(worst, 0.0)
        return out

    def dump(self) -> str:
        """Deterministic plain-text rendering of the whole program."""
        buf = io.StringIO()
        w = buf.write
        w("conic program\n")
        w(f"vars {self.n_vars}\n")
        w(
            f"rows eq={self.n_eq} ub={self.n_ub} "
            f"soc_blocks={self.n_soc_blocks} soc_rows={int(sum(self.soc_dims))}\n"
        )
        w(f"objective constant {float(self.obj_const)!r}\n")
        w("objective linear:\n")
        for i in np.nonzero(self.obj_lin)[0]:
            w(f"  {self.var_names[i]} {float(self.obj_lin[i])!r}\n")
        for q in self.quads:
            w(f"quad {q.name} coeff {float(q.coeff)!r} rows {q.a.shape[0]}\n")
            self._dump_rows(w, q.a, q.b, "  sq")
        w("equalities:\n")
        self._dump_rows(w, self.a_eq, self.b_eq, "  eq", "==")
        w("inequalities:\n")
        self._dump_rows(w, self.a_ub, self.b_ub, "  ub", "<=")
        start = 0
        csr_c = self.soc_c.tocsr() if self.n_soc_blocks else None
        for i, k in enumerate(self.soc_dims):
            w(f"soc[{i}] dim {k}\n")
            self._dump_rows(
                w,
                self.soc_a[start : start + k],
                self.soc_b[start : start + k],
                "  lhs",
            )
            row = csr_c.getrow(i)
            terms = " + ".join(
                f"{float(row.data[j])!r}*{self.var_names[row.indices[j]]}"
                for j in range(row.nnz)
            )
            w(f"  rhs: {terms or '0'} + {float(self.soc_d[i])!r}\n")
            start += k
        return buf.getvalue()

    def _dump_rows(self, w, a: sp.csr_matrix, b: np.ndarray, tag: str, rel: str | None = None):
        a = a.tocsr()
        for r in range(a.shape[0]):
            lo, hi = a.indptr[r], a.indptr[r + 1]
            terms = " + ".join(
                f"{float(a.data[j])!r}*{self.var_names[a.indices[j]]}"
                for j in range(lo, hi)
            )
            if rel is None:
                w(f"{tag}[{r}]: {terms or '0'} + {float(b[r])!r}\n")
            else:
                w(f"{tag}[{r}]: {terms or '0'} {rel} {float(b[r])!r}\n")


class ProgramBuilder:
    """Accumulates rows in triplet form, then assembles a ConicProgram.

    Linear expressions are ``(coeffs, const)`` pairs where ``coeffs`` maps a
    variable index to its coefficient. Rows are stored in insertion order so
    the assembled program (and its dump) is deterministic.
    """

    def __init__(self):
        self._names: list[str] = []
        self._obj: dict[int, float] = {}
        self._obj_const = 0.0
        self._eq: list[tuple[dict[int, float], float]] = []
        self._ub: list[tuple[dict[int, float], float]] = []
        # name -> [coeff, rows]; each row is (coeffs, const) inside the norm
        self._quads: dict[str, list] = {}
        self._socs: list[tuple[list[tuple[dict, float]], dict, float]] = []

    # -------------------------------------------------------------- variables

    def add_vars(self, names) -> int:
        """Register a batch of variables; returns the index of the first."""
        start = len(self._names)
        self._names.extend(names)
        return start

    @property
    def n_vars(self) -> int:
        return len(self._names)

    # -------------------------------------------------------------- objective

    def add_obj_lin(self, idx: int, coeff: float):
        if coeff:
            self._obj[idx] = self._obj.get(idx, 0.0) + coeff

    def add_obj_const(self, value: float):
        self._obj_const += value

    def quad_group(self, name: str, coeff: float):
        if name in self._quads:
            raise ValueError(f"duplicate quadratic group {name!r}")
        self._quads[name] = [coeff, []]

    def add_quad_row(self, name: str, coeffs: dict[int, float], const: float = 0.0):
        self._quads[name][1].append((dict(coeffs), const))

    # ------------------------------------------------------------ constraints

    def add_eq(self, coeffs: dict[int, float], rhs: float):
        self._eq.append((dict(coeffs), rhs))

    def add_ub(self, coeffs: dict[int, float], rhs: float):
        """sum coeffs[i]*x[i] <= rhs."""
        self._ub.append((dict(coeffs), rhs))

    def add_soc(self, rows: list[tuple[dict[int, float], float]], rhs_coeffs: dict[int, float], rhs_const: float):
        """||rows(x)|| <= rhs_coeffs.x + rhs_const."""
        self._socs.append(([(dict(c), v) for c, v in rows], dict(rhs_coeffs), rhs_const))

    # ---------------------------------------------------------------- assembly

    def _stack(self, rows: list[tuple[dict, float]], n: int) -> tuple[sp.csr_matrix, np.ndarray]:
        data, ri, ci = [], [], []
        b = np.zeros(len(rows))
        for r, (coeffs, const) in enumerate(rows):
            b[r] = const
            for i, v in coeffs.items():
                if v:
                    ri.append(r)
                    ci.append(i)
                    data.append(v)
        a = sp.csr_matrix((data, (ri, ci)), shape=(len(rows), n))
        return a, b

    def build(self) -> ConicProgram:
        n = self.n_vars
        obj_lin = np.zeros(n)
        for i, v in self._obj.items():
            obj_lin[i] = v
        a_eq, b_eq = self._stack(self._eq, n)
        a_ub, b_ub = self._stack(self._ub, n)
        quads = []
        for name, (coeff, rows) in self._quads.items():
            if not rows or coeff == 0.0:
                continue
            a, b = self._stack(rows, n)
            quads.append(QuadTerm(name=name, coeff=float(coeff), a=a, b=b))
        soc_rows: list[tuple[dict, float]] = []
        soc_c_rows: list[tuple[dict, float]] = []
        dims = []
        for rows, c, d in self._socs:
            dims.append(len(rows))
            soc_rows.extend(rows)
            soc_c_rows.append((c, d))
        soc_a, soc_b = self._stack(soc_rows, n)
        soc_c, soc_d = self._stack(soc_c_rows, n)
        return ConicProgram(
            n_vars=n,
            var_names=tuple(self._names),
            obj_lin=obj_lin,
            obj_const=self._obj_const,
            a_eq=a_eq,
            b_eq=b_eq,
            a_ub=a_ub,
            b_ub=b_ub,
            quads=tuple(quads),
            soc_a=soc_a,
            soc_b=soc_b,
            soc_c=soc_c,
            soc_d=soc_d,
            soc_dims=tuple(dims),
        )


# ------------------------------------------------------------------ solving

@dataclass
class SolverResult:
    status: str  # optimal | infeasible | max_iterations | error
    x: np.ndarray | None
    objective: float | None  # recomputed from x for backend-independent values
    solve_time: float
    iterations: int
    raw_status: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "optimal"


def solver_tolerance(override: float | None = None) -> float:
    """Feasibility/gap tolerance, env-overridable for slow machines."""
    if override is not None:
        return float(override)
    env = os.environ.get(TOL_ENV_VAR)
    return float(env) if env else DEFAULT_TOL


class ClarabelAdapter:
    """Interior-point backend.

    ``use_native_quadratic`` keeps sums of squares in the objective matrix;
    switching it off moves each quadratic group behind an epigraph variable
    and a second-order cone, which exercises the pure-conic path. Both give
    the same optimizer up to solver tolerance.
    """

    def __init__(
        self,
        use_native_quadratic: bool = True,
        tol: float | None = None,
        max_iter: int = 200_000,
        verbose: bool = False,
    ):
        self.use_native_quadratic = use_native_quadratic
        self.tol = tol
        self.max_iter = max_iter
        self.verbose = verbose

    def solve(self, program: ConicProgram) -> SolverResult:
        import clarabel

        tol = solver_tolerance(self.tol)
        n = program.n_vars
        quads = program.quads
        native = self.use_native_quadratic
        n_extra = 0 if native or not quads else len(quads)
        nt = n + n_extra

        q = np.zeros(nt)
        q[:n] = program.obj_lin
        if native and quads:
            p = sp.csc_matrix((n, n))
            for term in quads:
                p = p + (2.0 * term.coeff) * (term.a.T @ term.a)
                q[:n] += 2.0 * term.coeff * (term.a.T @ term.b)
            p = sp.triu(p, format="csc")
            p.resize((nt, nt))
        else:
            p = sp.csc_matrix((nt, nt))
            for g, term in enumerate(quads):
                q[n + g] = term.coeff

        blocks: list[sp.spmatrix] = []
        rhs: list[np.ndarray] = []
        cones = []
        if program.n_eq:
            blocks.append(program.a_eq)
            rhs.append(program.b_eq)
            cones.append(clarabel.ZeroConeT(program.n_eq))
        if program.n_ub:
            blocks.append(program.a_ub)
            rhs.append(program.b_ub)
            cones.append(clarabel.NonnegativeConeT(program.n_ub))
        # cone block i: s = [h_i.x + e_i; F_i x + g_i] in SOC  =>  A = -[h; F], b = [e; g]
        start = 0
        for i, k in enumerate(program.soc_dims):
            a_blk = sp.vstack(
                [program.soc_c[i], program.soc_a[start : start + k]], format="csr"
            )
            blocks.append(-a_blk)
            rhs.append(np.concatenate(([program.soc_d[i]], program.soc_b[start : start + k])))
            cones.append(clarabel.SecondOrderConeT(k + 1))
            start += k
        if not native:
            # w*||Ax+b||^2 taken linear via t >= ||Ax+b||^2:
            # ||[2Ax+2b; 1-t]|| <= 1+t
            for g, term in enumerate(quads):
                k = term.a.shape[0]
                tcol = n + g
                top = sp.csr_matrix(([-1.0], ([0], [tcol])), shape=(1, nt))
                mid = sp.hstack(
                    [-2.0 * term.a, sp.csr_matrix((k, n_extra))], format="csr"
                )
                bot = sp.csr_matrix(([1.0], ([0], [tcol])), shape=(1, nt))
                a_blk = sp.vstack([top, mid, bot], format="csr")
                blocks.append(a_blk)
                rhs.append(np.concatenate(([1.0], 2.0 * term.b, [1.0])))
                cones.append(clarabel.SecondOrderConeT(k + 2))

        if blocks:
            widened = []
            for blk in blocks:
                if blk.shape[1] != nt:
                    blk = sp.hstack(
                        [blk, sp.csr_matrix((blk.shape[0], nt - blk.shape[1]))],
                        format="csr",
                    )
                widened.append(blk)
            a_all = sp.vstack(widened, format="csr").tocsc()
            b_all = np.concatenate(rhs)
        else:
            a_all = sp.csc_matrix((0, nt))
            b_all = np.zeros(0)

        settings = clarabel.DefaultSettings()
        settings.verbose = self.verbose
        settings.max_iter = self.max_iter
        settings.tol_gap_abs = tol
        settings.tol_gap_rel = tol
        settings.tol_feas = tol

        t0 = time.perf_counter()
        solver = clarabel.DefaultSolver(p, q, a_all, b_all, cones, settings)
        sol = solver.solve()
        wall = time.perf_counter() - t0

        status = _map_status(clarabel, sol.status)
        x = None
        obj = None
        if status == "optimal":
            x = np.asarray(sol.x)[:n]
            obj = program.objective(x)
        return SolverResult(
            status=status,
            x=x,
            objective=obj,
            solve_time=wall,
            iterations=int(sol.iterations),
            raw_status=str(sol.status),
        )


def _map_status(clarabel, status) -> str:
    st = clarabel.SolverStatus
    if status in (st.Solved, st.AlmostSolved):
        return "optimal"
    if status in (
        st.PrimalInfeasible,
        st.DualInfeasible,
        st.AlmostPrimalInfeasible,
        st.AlmostDualInfeasible,
    ):
        return "infeasible"
    if status in (st.MaxIterations, st.MaxTime):
        return "max_iterations"
    return "error"


def default_adapter(tol: float | None = None) -> ClarabelAdapter:
    return ClarabelAdapter(tol=tol)
