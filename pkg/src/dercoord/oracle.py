"""Ground-truth engines kept independent of the production loop.

The backward-forward sweep solves the exact (nonconvex) radial load-flow
equations by fixed point, giving a physics reference with the
apparent-power relation holding as an equality.  The centralized
benchmark solves the whole planning problem in one program -- same
builders as production, DER setpoints freed -- giving the optimality
reference that the decomposition is measured against.  Production code
never calls into this module.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import conic
from .agents import DerSchedule
from .errors import DercoordError
from .exactness import (GapReport, PenaltySchedule, linearized_dual_resolve,
                        penalty_recovery_loop, relaxation_gap)
from .feeder import FeederModel, Scenario
from .netopt import (DlmcSchedule, NetOptOptions, OpfSolution, build_netopt,
                     extract_dlmc, solve_netopt)


@dataclass
class LoadFlowResult:
    """Exact-physics operating point: cone relation tight by construction."""

    P: np.ndarray
    Q: np.ndarray
    v: np.ndarray
    l: np.ndarray
    iterations: int
    residual: float


def backward_forward_sweep(model: FeederModel, net_p: np.ndarray,
                           net_q: np.ndarray, root_voltage: float | None = None,
                           tol: float = 1e-12,
                           max_sweeps: int = 500) -> LoadFlowResult:
    """Fixed-point radial load flow at constant-power nodal demand.

    ``net_p``/``net_q`` are the DER contributions added on top of the
    model's baseline load.  Backward passes accumulate flows with loss
    terms, forward passes update voltages and squared currents, until the
    largest update falls below ``tol``.
    """
    n = model.n_nodes
    T = model.horizon
    if net_p.shape != (n, T) or net_q.shape != (n, T):
        raise ValueError("injection arrays must be (n_nodes, horizon)")
    dp = model.load_p + net_p
    dq = model.load_q + net_q
    v0 = (root_voltage if root_voltage is not None else model.root_voltage) ** 2

    P = np.zeros((n, T))
    Q = np.zeros((n, T))
    v = np.full((n, T), v0)
    l = np.zeros((n, T))
    worst_iters = 0
    for t in range(T):
        lcol = np.zeros(n)
        vcol = np.full(n, v0)
        Pcol = np.zeros(n)
        Qcol = np.zeros(n)
        converged = False
        for it in range(1, max_sweeps + 1):
            for j in range(n - 1, 0, -1):
                Pcol[j] = dp[j, t] + model.r[j] * lcol[j]
                Qcol[j] = dq[j, t] + model.x[j] * lcol[j]
                for c in model.children[j]:
                    Pcol[j] += Pcol[c]
                    Qcol[j] += Qcol[c]
            delta = 0.0
            for j in range(1, n):
                vu = vcol[int(model.parent[j])]
                vnew = (vu - 2 * model.r[j] * Pcol[j] - 2 * model.x[j] * Qcol[j]
                        + (model.r[j] ** 2 + model.x[j] ** 2) * lcol[j])
                lnew = (Pcol[j] ** 2 + Qcol[j] ** 2) / vu
                delta = max(delta, abs(vnew - vcol[j]), abs(lnew - lcol[j]))
                vcol[j] = vnew
                lcol[j] = lnew
            if delta <= tol:
                converged = True
                break
        if not converged:
            raise DercoordError(
                f"load flow did not converge in {max_sweeps} sweeps at hour {t}")
        worst_iters = max(worst_iters, it)
        P[:, t] = Pcol
        Q[:, t] = Qcol
        v[:, t] = vcol
        l[:, t] = lcol

    # residual: worst violation of balances and the apparent-power equality
    res = 0.0
    for j in range(1, n):
        vu = v[int(model.parent[j])]
        res = max(res, float(np.max(np.abs(vu * l[j] - P[j] ** 2 - Q[j] ** 2))))
        bal = P[j] - model.r[j] * l[j] - dp[j]
        for c in model.children[j]:
            bal = bal - P[c]
        res = max(res, float(np.max(np.abs(bal))))
    return LoadFlowResult(P=P, Q=Q, v=v, l=l, iterations=worst_iters, residual=res)


@dataclass
class BenchmarkResult:
    cost: float
    schedule: DerSchedule
    dlmc: DlmcSchedule
    solution: OpfSolution
    gap: GapReport
    recovery_iterations: int = 0


def centralized_benchmark(model: FeederModel, scenario: Scenario,
                          options: NetOptOptions | None = None,
                          tau: float = 1e-4,
                          penalty: PenaltySchedule | None = None,
                          settings: conic.SolveSettings | None = None) -> BenchmarkResult:
    """One-shot optimal plan with DER setpoints inside the program.

    Applies the same looseness remedy as the iterative method when the
    relaxed solve is not physical.
    """
    base = replace(options or NetOptOptions(), free_der=True,
                   cone_mode="cone", point=None, gap_penalty=0.0)
    sol = solve_netopt(build_netopt(model, scenario, None, base), settings)
    gap = relaxation_gap(sol, model, tau)
    inner = 0
    if not gap.strict_exact:
        rec = penalty_recovery_loop(model, scenario, None, sol,
                                    penalty or PenaltySchedule(), tau, base, settings)
        inner = rec.inner_iterations
        sol = linearized_dual_resolve(model, scenario, None, rec.solution,
                                      base, settings)
        gap = relaxation_gap(sol, model, tau)
    return BenchmarkResult(cost=sol.system_cost, schedule=sol.der_schedule,
                           dlmc=extract_dlmc(sol), solution=sol, gap=gap,
                           recovery_iterations=inner)
