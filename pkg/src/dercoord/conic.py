"""Sparse conic-program container and interior-point solve adapter.

The container keeps the optimization problem in solver-neutral form:
named variable blocks, a linear + diagonal-quadratic objective, tagged
linear equalities/inequalities, and second-order-cone memberships
(including the rotated form used by branch-flow relaxations).  ``solve``
translates it to the standard embedded form

    min 1/2 x'Px + q'x   s.t.  Ax + s = b,  s in K,

hands it to Clarabel, and maps equality-row multipliers back to their
tags.  Sign convention for reported duals: the dual of a tagged equality
equals ``d(optimal objective)/d(rhs)`` of that row, so the multiplier of
a nodal balance row is directly the marginal cost of serving one more
unit of demand there.  Any engine that can produce these quantities can
replace Clarabel behind the same interface.

Solver tolerances may be overridden with the environment variables
``DERCOORD_TOL_FEAS`` and ``DERCOORD_TOL_GAP``.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Sequence

import numpy as np
from scipy import sparse

from .errors import SolverError

# affine expression: ((idx, coef), ...), constant
Lin = tuple[tuple[tuple[int, float], ...], float]


def lin(*terms: tuple[int, float], const: float = 0.0) -> Lin:
    """Build an affine expression from (index, coefficient) terms."""
    return tuple(terms), const


def lin_var(idx: int, coef: float = 1.0) -> Lin:
    return ((idx, coef),), 0.0


def lin_const(c: float) -> Lin:
    return (), c


@dataclass
class SolveSettings:
    tol_feas: float = 1e-9
    tol_gap_abs: float = 1e-9
    tol_gap_rel: float = 1e-9
    max_iter: int = 200
    verbose: bool = False

    def with_env_overrides(self) -> "SolveSettings":
        feas = os.environ.get("DERCOORD_TOL_FEAS")
        gap = os.environ.get("DERCOORD_TOL_GAP")
        out = SolveSettings(self.tol_feas, self.tol_gap_abs, self.tol_gap_rel,
                            self.max_iter, self.verbose)
        if feas is not None:
            out.tol_feas = float(feas)
        if gap is not None:
            out.tol_gap_abs = float(gap)
            out.tol_gap_rel = float(gap)
        return out


@dataclass
class RawSolution:
    status: str
    objective: float
    x: np.ndarray
    eq_duals: dict[Hashable, float]
    ineq_duals: dict[Hashable, float]
    max_eq_residual: float
    iterations: int
    solve_time: float


class ConicProgram:
    """Incrementally built conic program with tagged constraints."""

    def __init__(self) -> None:
        self._blocks: dict[str, tuple[int, int]] = {}  # name -> (offset, size)
        self.n = 0
        self._lin_cost: dict[int, float] = {}
        self._quad_cost: dict[int, float] = {}  # coef * x_i^2
        self.cost_const = 0.0
        self._eq: list[tuple[dict[int, float], float, Hashable]] = []
        self._eq_tags: dict[Hashable, int] = {}
        self._ineq: list[tuple[dict[int, float], float, Hashable | None]] = []
        self._lb: dict[int, float] = {}
        self._socs: list[tuple[str, tuple]] = []  # ("rot", (u,w,zs)) | ("soc", (t,zs))

    # -- variables ----------------------------------------------------------

    def add_var(self, name: str, size: int = 1, lb: float | None = None) -> np.ndarray:
        """Register a variable block; returns the flat indices."""
        if name in self._blocks:
            raise ValueError(f"duplicate variable block {name!r}")
        off = self.n
        self._blocks[name] = (off, size)
        self.n += size
        idx = np.arange(off, off + size)
        if lb is not None:
            for i in idx:
                self._lb[int(i)] = lb
        return idx

    def block(self, name: str) -> np.ndarray:
        off, size = self._blocks[name]
        return np.arange(off, off + size)

    # -- objective ----------------------------------------------------------

    def add_cost(self, idx: int, coef: float) -> None:
        if coef != 0.0:
            self._lin_cost[idx] = self._lin_cost.get(idx, 0.0) + coef

    def add_quad_cost(self, idx: int, coef: float) -> None:
        """Add coef * x_idx^2 to the objective (coef >= 0)."""
        if coef < 0:
            raise ValueError("quadratic cost coefficients must be nonnegative")
        if coef != 0.0:
            self._quad_cost[idx] = self._quad_cost.get(idx, 0.0) + coef

    # -- constraints --------------------------------------------------------

    def add_eq(self, coeffs: dict[int, float], rhs: float, tag: Hashable) -> None:
        if tag in self._eq_tags:
            raise ValueError(f"duplicate equality tag {tag!r}")
        self._eq_tags[tag] = len(self._eq)
        self._eq.append((coeffs, rhs, tag))

    def add_ineq(self, coeffs: dict[int, float], rhs: float,
                 tag: Hashable | None = None) -> None:
        """Row sum(coeffs * x) <= rhs."""
        self._ineq.append((coeffs, rhs, tag))

    def add_rotated_cone(self, u: Lin, w: Lin, zs: Sequence[Lin]) -> None:
        """Membership u*w >= sum(z^2), u >= 0, w >= 0 (u, w, z affine)."""
        self._socs.append(("rot", (u, w, tuple(zs))))

    def add_soc(self, t: Lin, zs: Sequence[Lin]) -> None:
        """Membership t >= ||z||_2 (t, z affine)."""
        self._socs.append(("soc", (t, tuple(zs))))

    @property
    def n_eq(self) -> int:
        return len(self._eq)

    @property
    def n_ineq(self) -> int:
        return len(self._ineq)

    @property
    def n_cones(self) -> int:
        return len(self._socs)

    def eq_tags(self) -> Iterable[Hashable]:
        return self._eq_tags.keys()

    # -- assembly -----------------------------------------------------------

    def _rows_to_coo(self, rows, row0: int):
        ri, ci, vals, rhs = [], [], [], []
        for k, (coeffs, b, _tag) in enumerate(rows):
            r = row0 + k
            for i, c in coeffs.items():
                if c != 0.0:
                    ri.append(r)
                    ci.append(i)
                    vals.append(c)
            rhs.append(b)
        return ri, ci, vals, rhs

    def _lin_rows(self, exprs: Sequence[Lin], row0: int):
        """Rows realizing s = b - Ax equal to the given affine expressions."""
        ri, ci, vals, rhs = [], [], [], []
        for k, (terms, const) in enumerate(exprs):
            r = row0 + k
            for i, c in terms:
                if c != 0.0:
                    ri.append(r)
                    ci.append(i)
                    vals.append(-c)
            rhs.append(const)
        return ri, ci, vals, rhs

    def assemble(self):
        """Build (P, q, A, b, cone dims) in Clarabel's embedded form."""
        n = self.n
        q = np.zeros(n)
        for i, c in self._lin_cost.items():
            q[i] = c
        pdiag = np.zeros(n)
        for i, c in self._quad_cost.items():
            pdiag[i] = 2.0 * c  # objective carries 1/2 x'Px
        P = sparse.diags(pdiag, format="csc")

        ri: list[int] = []
        ci: list[int] = []
        vals: list[float] = []
        bs: list[float] = []
        row = 0

        r1, c1, v1, b1 = self._rows_to_coo(self._eq, row)
        ri += r1; ci += c1; vals += v1; bs += b1
        row += len(self._eq)
        n_eq = len(self._eq)

        # nonnegative block: variable lower bounds then inequality rows
        for i, lb in self._lb.items():
            ri.append(row); ci.append(i); vals.append(-1.0); bs.append(-lb)
            row += 1
        r2, c2, v2, b2 = self._rows_to_coo(self._ineq, row)
        ri += r2; ci += c2; vals += v2; bs += b2
        row += len(self._ineq)
        n_nonneg = len(self._lb) + len(self._ineq)

        cone_dims: list[int] = []
        for kind, payload in self._socs:
            if kind == "rot":
                u, w, zs = payload
                uterms, uc = u
                wterms, wc = w
                plus = (tuple(uterms) + tuple(wterms), uc + wc)
                minus = (tuple(uterms) + tuple((i, -c) for i, c in wterms), uc - wc)
                exprs = [plus] + [(tuple((i, 2.0 * c) for i, c in zt), 2.0 * zc)
                                  for zt, zc in zs] + [minus]
            else:
                t, zs = payload
                exprs = [t] + list(zs)
            r3, c3, v3, b3 = self._lin_rows(exprs, row)
            ri += r3; ci += c3; vals += v3; bs += b3
            row += len(exprs)
            cone_dims.append(len(exprs))

        A = sparse.coo_matrix((vals, (ri, ci)), shape=(row, n)).tocsc()
        b = np.asarray(bs)
        return P, q, A, b, n_eq, n_nonneg, cone_dims

    def dump(self) -> str:
        """Plain-text rendering: variable blocks, rows, cone list."""
        out = ["variables:"]
        for name, (off, size) in self._blocks.items():
            out.append(f"  {name}: offset={off} size={size}")
        out.append(f"objective: {len(self._lin_cost)} linear terms, "
                   f"{len(self._quad_cost)} quadratic terms, const={self.cost_const}")
        out.append(f"equalities ({len(self._eq)}):")
        for coeffs, rhs, tag in self._eq:
            lhs = " + ".join(f"{c:g}*x{i}" for i, c in sorted(coeffs.items()))
            out.append(f"  [{tag}] {lhs} = {rhs:g}")
        out.append(f"inequalities ({len(self._ineq)}):")
        for coeffs, rhs, tag in self._ineq:
            lhs = " + ".join(f"{c:g}*x{i}" for i, c in sorted(coeffs.items()))
            label = f"[{tag}] " if tag is not None else ""
            out.append(f"  {label}{lhs} <= {rhs:g}")
        out.append(f"bounds ({len(self._lb)}):")
        for i, lb in sorted(self._lb.items()):
            out.append(f"  x{i} >= {lb:g}")
        out.append(f"cones ({len(self._socs)}):")

        def fmt(e: Lin) -> str:
            terms, const = e
            s = " + ".join(f"{c:g}*x{i}" for i, c in terms)
            if const or not terms:
                s = (s + f" + {const:g}") if s else f"{const:g}"
            return s

        for kind, payload in self._socs:
            if kind == "rot":
                u, w, zs = payload
                out.append(f"  rotated: ({fmt(u)})*({fmt(w)}) >= "
                           + " + ".join(f"({fmt(z)})^2" for z in zs))
            else:
                t, zs = payload
                out.append(f"  soc: {fmt(t)} >= ||" + ", ".join(fmt(z) for z in zs) + "||")
        return "\n".join(out)


_OK_STATUSES = {"Solved", "AlmostSolved"}
_FEAS_TARGET = 2e-6     # equality residual this small is erased by projection
_GAP_TARGET = 1e-7      # relative duality gap considered fully converged
# fallback knob sets for stalled factorizations, tried in order
_RETRY_TWEAKS = (
    {"dynamic_regularization_delta": 1e-6},
    {"equilibrate_enable": False, "static_regularization_constant": 1e-10},
    {"dynamic_regularization_delta": 1e-5},
    {"max_step_fraction": 0.95},
)


def solve(program: ConicProgram, settings: SolveSettings | None = None) -> RawSolution:
    """Solve the program with Clarabel; raise SolverError on failure.

    Degenerate instances can stall the interior-point method short of the
    requested tolerances; such solves are retried under a ladder of
    regularization/step settings and the iterate with the best combined
    feasibility and duality-gap quality wins.
    """
    import clarabel

    st = (settings or SolveSettings()).with_env_overrides()
    P, q, A, b, n_eq, n_nonneg, cone_dims = program.assemble()

    cones = []
    if n_eq:
        cones.append(clarabel.ZeroConeT(n_eq))
    if n_nonneg:
        cones.append(clarabel.NonnegativeConeT(n_nonneg))
    cones.extend(clarabel.SecondOrderConeT(d) for d in cone_dims)

    def infeasibility(x: np.ndarray) -> float:
        """Worst violation across equality, nonnegative, and SOC rows."""
        s = b - A @ x
        worst = float(np.max(np.abs(s[:n_eq]))) if n_eq else 0.0
        lo = n_eq
        if n_nonneg:
            worst = max(worst, float(np.max(-np.minimum(s[lo:lo + n_nonneg], 0.0))))
            lo += n_nonneg
        for d in cone_dims:
            blk = s[lo:lo + d]
            worst = max(worst, max(0.0, float(np.linalg.norm(blk[1:]) - blk[0])))
            lo += d
        return worst

    def attempt(tweaks: dict):
        cfg = clarabel.DefaultSettings()
        cfg.verbose = st.verbose
        cfg.tol_feas = st.tol_feas
        cfg.tol_gap_abs = st.tol_gap_abs
        cfg.tol_gap_rel = st.tol_gap_rel
        cfg.max_iter = st.max_iter
        for key, val in tweaks.items():
            setattr(cfg, key, val)
        solver = clarabel.DefaultSolver(P, q, A, b, cones, cfg)
        out = solver.solve()
        status = str(out.status)
        if status not in _OK_STATUSES:
            return None, status
        feas = infeasibility(np.asarray(out.x))
        dgap = abs(out.obj_val - out.obj_val_dual) / max(1.0, abs(out.obj_val))
        score = max(feas / _FEAS_TARGET, dgap / _GAP_TARGET)
        return (out, score), status

    t0 = time.perf_counter()
    best = None
    last_status = "unknown"
    for tweaks in ({},) + _RETRY_TWEAKS:
        result, last_status = attempt(tweaks)
        if result is not None and (best is None or result[1] < best[1]):
            best = result
        if best is not None and best[1] <= 2.0:
            break
    elapsed = time.perf_counter() - t0
    if best is None:
        raise SolverError(last_status, f"{program.n} vars, {A.shape[0]} rows")
    sol, _ = best
    status = str(sol.status)

    x = np.asarray(sol.x)
    z = np.asarray(sol.z)
    if n_eq:
        # least-squares projection onto the equality manifold removes the
        # residual an early-terminated interior-point iterate leaves behind
        Aeq = A[:n_eq].tocsr()
        resid = Aeq @ x - b[:n_eq]
        if np.max(np.abs(resid)) > 1e-12:
            gram = (Aeq @ Aeq.T).tocsc()
            corr = sparse.linalg.spsolve(
                gram + 1e-12 * sparse.eye(n_eq, format="csc"), resid)
            x = x - Aeq.T @ corr
    max_eq_residual = (float(np.max(np.abs(A[:n_eq] @ x - b[:n_eq])))
                       if n_eq else 0.0)

    eq_duals: dict[Hashable, float] = {}
    for tag, k in program._eq_tags.items():
        eq_duals[tag] = -float(z[k])

    ineq_duals: dict[Hashable, float] = {}
    off = n_eq + len(program._lb)
    for k, (_c, _r, tag) in enumerate(program._ineq):
        if tag is not None:
            ineq_duals[tag] = float(z[off + k])

    return RawSolution(
        status=status,
        objective=float(sol.obj_val) + program.cost_const,
        x=x,
        eq_duals=eq_duals,
        ineq_duals=ineq_duals,
        max_eq_residual=max_eq_residual,
        iterations=int(sol.iterations),
        solve_time=elapsed,
    )
