"""Coordination loop: nodal pricing against DER self-scheduling.

Each outer iteration solves the network problem at the previous DER
schedules (repairing loose relaxations when needed), hands the resulting
nodal marginal costs to every resource, and lets the resources adapt
under proximal damping.  The loop records a full trace, checkpoints, and
stops at a fixed point of costs and schedules.  A plain
dual-decomposition baseline is included for contrast: it relaxes the
DER-coupled balance rows and prices them by imbalance, so its iterates
are not balance-feasible until convergence, unlike the main loop whose
network solution satisfies the balances at every iteration.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import conic, thermal
from .agents import (DerSchedule, ProximalConfig, aggregate_to_nodes, solve_fleet)
from .errors import DercoordError, DivergenceError
from .exactness import (PenaltySchedule, linearized_dual_resolve,
                        penalty_recovery_loop, relaxation_gap)
from .feeder import FeederModel, Scenario, TransformerThermalParams
from .netopt import (NetOptOptions, OpfSolution, SoftLimitConfig, build_netopt,
                     extract_dlmc, solve_netopt)

DENSIFY_SCHEDULE = ((10, 2.5), (20, 0.5))  # (outer iteration, breakpoint spacing degC)


@dataclass(frozen=True)
class ConvergenceConfig:
    eps_cost: float = 0.01       # $
    eps_schedule: float = 1e-5   # p.u., max setpoint change
    max_outer: int = 200

    def __post_init__(self):
        if self.eps_cost <= 0 or self.eps_schedule <= 0:
            raise ValueError("tolerances must be positive")


@dataclass
class IterationRecord:
    k: int
    system_cost: float
    cost_real: float
    cost_reactive: float
    cost_degradation: float
    cost_penalty: float          # soft limit penalty
    total_cost: float            # system + penalty (descent quantity)
    gap_total: float
    sigma: float
    inner_iterations: int
    schedule_delta: float
    max_balance_residual: float
    wall_time: float
    root_q: np.ndarray
    lam_p: np.ndarray
    lam_q: np.ndarray
    lol: dict[int, np.ndarray]
    temp: dict[int, np.ndarray]
    recovery_gap_lines: float = 0.0
    recovery_gap_transformers: float = 0.0


@dataclass
class CoordinationTrace:
    records: list[IterationRecord] = field(default_factory=list)

    def total_costs(self) -> list[float]:
        return [r.total_cost for r in self.records]

    def __len__(self) -> int:
        return len(self.records)


@dataclass
class CoordinationResult:
    solution: OpfSolution
    schedule: DerSchedule
    trace: CoordinationTrace
    converged: bool
    iterations: int
    # frozen PWL refinements; a benchmark comparison must share these
    thermal_overrides: dict[int, TransformerThermalParams] = field(default_factory=dict)


def init_schedules(model: FeederModel, scenario: Scenario,
                   free: bool = True) -> DerSchedule:
    """Round-zero schedules: DERs respond to substation prices only.

    This is the undamped ("free") round: against initial prices of
    (energy LMP, zero reactive value), EVs self-schedule exactly and PVs
    run flat out at unit power factor.  Later rounds respond to computed
    nodal prices under proximal damping.
    """
    T = scenario.horizon
    lam_p = np.tile(scenario.price_p, (model.n_nodes, 1))
    lam_q = np.zeros((model.n_nodes, T))
    zeros = DerSchedule.zeros(len(scenario.evs), len(scenario.pvs), T)
    out = solve_fleet(scenario, lam_p, lam_q, zeros, sigma=None if free else 1e-4)
    for k, pv in enumerate(scenario.pvs):
        out.pv_p[k] = pv.cap
        out.pv_q[k] = 0.0
    return out


def sigma_schedule(costs, prox: ProximalConfig, conv: ConvergenceConfig) -> float:
    """Weight for the next round given completed rounds' total costs.

    Holds sigma0 until the cost delta stays below
    shrink_trigger_scale * eps_cost for shrink_trigger_window consecutive
    iterations, then shrinks geometrically down to the floor.
    """
    if hasattr(costs, "total_costs"):
        costs = costs.total_costs()
    if not costs:
        raise ValueError("sigma schedule needs at least one completed iteration")
    deltas = np.abs(np.diff(np.asarray(costs, dtype=float)))
    w = prox.shrink_trigger_window
    threshold = prox.shrink_trigger_scale * conv.eps_cost
    trigger = None
    for i in range(w - 1, len(deltas)):
        if np.all(deltas[i - w + 1: i + 1] < threshold):
            trigger = i
            break
    if trigger is None:
        return prox.sigma0
    shrinks = len(deltas) - trigger
    return max(prox.sigma0 * prox.shrink ** shrinks, prox.sigma_floor)


DENSIFY_COST_FLOOR = 1e-4  # $/day of degradation before a transformer qualifies


def _densify_overrides(overrides: dict[int, TransformerThermalParams],
                       model: FeederModel, sol: OpfSolution,
                       spacing: float) -> dict[int, TransformerThermalParams]:
    """Refine PWL tangents around the optimal peaks, where it matters.

    Only transformers whose degradation cost is economically significant
    qualify: near-duplicate tangents on cold transformers buy no accuracy
    and their near-parallel rows degrade the solver's conditioning.
    """
    out = dict(overrides)
    for j in model.transformer_ids:
        params = out.get(j, model.transformers[j])
        cost = params.lol_cost * float(sol.lol[j].sum())
        if params.curve is None or cost < DENSIFY_COST_FLOOR:
            continue
        hotspot = sol.temp[j] + params.curve.hotspot_gain * sol.l[j]
        new = thermal.densify(params, float(hotspot.max()), spacing)
        if new is not params:
            out[j] = new
    return out


def _save_checkpoint(path: Path, k: int, y: DerSchedule, sigma: float,
                     costs: list[float],
                     overrides: dict[int, TransformerThermalParams]) -> None:
    ov = {}
    for j, p in overrides.items():
        ov[str(j)] = {
            "alpha": p.alpha.tolist(), "beta": p.beta.tolist(),
            "gamma": p.gamma.tolist(), "epsilon": p.epsilon, "delta": p.delta,
            "h0": p.h0, "lol_cost": p.lol_cost, "nameplate_kva": p.nameplate_kva,
            "breakpoints": None if p.breakpoints is None else p.breakpoints.tolist(),
            "curve": None if p.curve is None else
                     [p.curve.rate, p.curve.ref_c, p.curve.hotspot_gain],
        }
    payload = {
        "iteration": k,
        "sigma": sigma,
        "horizon": int(y.ev_p.shape[1] if y.ev_p.size else y.pv_p.shape[1]
                       if y.pv_p.size else 0),
        "total_costs": costs,
        "schedule": {
            "ev_p": y.ev_p.tolist(), "ev_q": y.ev_q.tolist(),
            "pv_p": y.pv_p.tolist(), "pv_q": y.pv_q.tolist(),
        },
        "breakpoint_overrides": ov,
    }
    path.write_text(json.dumps(payload))


def load_checkpoint(path: str | Path):
    """Read back (iteration, schedule, sigma, costs, overrides)."""
    from .feeder import AgingCurve

    data = json.loads(Path(path).read_text())
    s = data["schedule"]
    T = int(data.get("horizon", 0))

    def arr(rows):
        return (np.array(rows, dtype=float) if rows else np.zeros((0, T)))

    y = DerSchedule(ev_p=arr(s["ev_p"]), ev_q=arr(s["ev_q"]),
                    pv_p=arr(s["pv_p"]), pv_q=arr(s["pv_q"]),
                    iteration=int(data["iteration"]))
    overrides = {}
    for js, p in data["breakpoint_overrides"].items():
        curve = None if p["curve"] is None else AgingCurve(*p["curve"])
        overrides[int(js)] = TransformerThermalParams(
            alpha=np.array(p["alpha"]), beta=np.array(p["beta"]),
            gamma=np.array(p["gamma"]), epsilon=p["epsilon"], delta=p["delta"],
            h0=p["h0"], lol_cost=p["lol_cost"], nameplate_kva=p["nameplate_kva"],
            breakpoints=None if p["breakpoints"] is None else np.array(p["breakpoints"]),
            curve=curve)
    return int(data["iteration"]), y, float(data["sigma"]), list(data["total_costs"]), overrides


def run_coordination(model: FeederModel, scenario: Scenario,
                     conv: ConvergenceConfig | None = None,
                     prox: ProximalConfig | None = None,
                     soft: SoftLimitConfig | None = None,
                     tau: float = 1e-4,
                     penalty: PenaltySchedule | None = None,
                     thermal_mode: str = thermal.CYCLIC,
                     rho_pinned: dict[int, float] | None = None,
                     settings: conic.SolveSettings | None = None,
                     checkpoint_path: str | Path | None = None,
                     resume_from: str | Path | None = None,
                     densify_enabled: bool = True,
                     max_workers: int | None = None,
                     on_iteration=None) -> CoordinationResult:
    """Iterate network pricing and DER adaptation to a fixed point.

    Stops when both the total-cost delta and the max schedule change fall
    within tolerance, or at the iteration cap (returning the best-so-far
    state with ``converged=False``).  Every iterate's network solution is
    balance-feasible by construction.
    """
    conv = conv or ConvergenceConfig()
    prox = prox or ProximalConfig()
    soft = soft or SoftLimitConfig()
    penalty = penalty or PenaltySchedule()

    overrides: dict[int, TransformerThermalParams] = {}
    if resume_from is not None:
        k0, y, sigma, costs, overrides = load_checkpoint(resume_from)
        k0 += 1
    else:
        y = init_schedules(model, scenario, free=prox.free_first)
        sigma = prox.sigma0
        costs: list[float] = []
        k0 = 1

    trace = CoordinationTrace()
    sol: OpfSolution | None = None
    converged = False
    k = k0 - 1
    for k in range(k0, conv.max_outer + 1):
        t0 = time.perf_counter()
        inj = aggregate_to_nodes(y, model, scenario)
        options = NetOptOptions(soft=soft, thermal_mode=thermal_mode,
                                rho_pinned=rho_pinned,
                                thermal_overrides=overrides or None)
        sol = solve_netopt(build_netopt(model, scenario, inj, options), settings)
        report = relaxation_gap(sol, model, tau)
        inner = 0
        rec_lines = rec_tf = 0.0
        if not report.strict_exact:
            rec = penalty_recovery_loop(model, scenario, inj, sol, penalty, tau,
                                        options, settings)
            inner = rec.inner_iterations
            rec_lines = rec.gap_history[0].line_total
            rec_tf = rec.gap_history[0].transformer_total
            sol = linearized_dual_resolve(model, scenario, inj, rec.solution,
                                          options, settings)
            report = relaxation_gap(sol, model, tau)
        dlmc = extract_dlmc(sol)

        if densify_enabled:
            for at_k, spacing in DENSIFY_SCHEDULE:
                if k == at_k:
                    overrides = _densify_overrides(overrides, model, sol, spacing)

        y_new = solve_fleet(scenario, dlmc.lam_p, dlmc.lam_q, y,
                            sigma=sigma, max_workers=max_workers)
        y_new.iteration = k
        delta = y_new.delta_inf(y)
        total_cost = sol.system_cost + sol.cost_soft_penalty
        record = IterationRecord(
            k=k, system_cost=sol.system_cost, cost_real=sol.cost_real,
            cost_reactive=sol.cost_reactive, cost_degradation=sol.cost_degradation,
            cost_penalty=sol.cost_soft_penalty, total_cost=total_cost,
            gap_total=report.total, sigma=sigma,
            inner_iterations=inner, schedule_delta=delta,
            max_balance_residual=sol.max_balance_residual,
            wall_time=time.perf_counter() - t0,
            root_q=sol.Q[model.root_line].copy(),
            lam_p=dlmc.lam_p, lam_q=dlmc.lam_q,
            lol={j: arr.copy() for j, arr in sol.lol.items()},
            temp={j: arr.copy() for j, arr in sol.temp.items()},
            recovery_gap_lines=rec_lines, recovery_gap_transformers=rec_tf,
        )
        trace.records.append(record)
        prev_cost = costs[-1] if costs else None
        costs.append(total_cost)
        if checkpoint_path is not None:
            _save_checkpoint(Path(checkpoint_path), k, y_new, sigma, costs, overrides)
        if on_iteration is not None:
            on_iteration(record, y_new)

        if (prev_cost is not None and abs(total_cost - prev_cost) <= conv.eps_cost
                and delta <= conv.eps_schedule):
            y = y_new
            converged = True
            break
        sigma = sigma_schedule(costs, prox, conv)
        y = y_new

    if sol is None:
        raise DercoordError("coordination ran zero iterations")
    return CoordinationResult(solution=sol, schedule=y, trace=trace,
                              converged=converged, iterations=k,
                              thermal_overrides=overrides)


# -- dual-decomposition baseline ----------------------------------------------


@dataclass
class BaselineRecord:
    k: int
    imbalance_inf: float
    x_cost: float                # network-iterate system cost
    lam_p: np.ndarray
    lam_q: np.ndarray


@dataclass
class BaselineTrace:
    records: list[BaselineRecord] = field(default_factory=list)
    relaxed: list[tuple[int, int]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)


def _relaxed_rows(model: FeederModel, scenario: Scenario) -> list[tuple[int, int]]:
    rows = set()
    for ev in scenario.evs:
        for t in ev.hours:
            rows.add((ev.node, int(t)))
    for pv in scenario.pvs:
        for t in pv.sunny:
            rows.add((pv.node, int(t)))
    return sorted(rows)


def dual_decomposition_baseline(model: FeederModel, scenario: Scenario,
                                step0: float = 50.0,
                                step_decay: str = "constant",
                                iters: int = 30,
                                settings: conic.SolveSettings | None = None) -> BaselineTrace:
    """Classic price-update decomposition for contrast with the main loop.

    Balance rows carrying DER terms are relaxed and priced; the rest stay
    hard in the network update.  The multiplier step follows the signed
    imbalance (demand minus delivery), so intermediate iterates violate
    the relaxed balances -- the point being contrasted.  Raises
    DivergenceError if the imbalance grows for 10 straight iterations.
    """
    relaxed = _relaxed_rows(model, scenario)
    T = scenario.horizon
    lam_p = np.tile(scenario.price_p, (model.n_nodes, 1)).astype(float)
    lam_q = np.tile(scenario.price_q, (model.n_nodes, 1)).astype(float)
    trace = BaselineTrace(relaxed=relaxed)
    options = NetOptOptions(soft=SoftLimitConfig(hard=True),
                            relax_balances=frozenset(relaxed))
    zeros = DerSchedule.zeros(len(scenario.evs), len(scenario.pvs), T)
    growth_streak = 0
    prev_imb = None

    for k in range(1, iters + 1):
        # network update: relaxed balances priced in the objective instead
        np_prog = build_netopt(model, scenario, None, options)
        prog = np_prog.prog
        for (j, t) in relaxed:
            rj, xj = float(model.r[j]), float(model.x[j])
            sj = float(np_prog.lscale[j])
            # -lam * (P_j - r l - sum child P): network is paid lam for delivery
            prog.add_cost(int(np_prog.P[j, t]), -lam_p[j, t])
            prog.add_cost(int(np_prog.Q[j, t]), -lam_q[j, t])
            if rj:
                prog.add_cost(int(np_prog.l[j, t]), rj * sj * lam_p[j, t])
            if xj:
                prog.add_cost(int(np_prog.l[j, t]), xj * sj * lam_q[j, t])
            for c in model.children[j]:
                prog.add_cost(int(np_prog.P[c, t]), lam_p[j, t])
                prog.add_cost(int(np_prog.Q[c, t]), lam_q[j, t])
        x_sol = solve_netopt(np_prog, settings)

        # DER update: exact response to current prices, no damping
        y = solve_fleet(scenario, lam_p, lam_q, zeros, sigma=None)
        net_p, net_q = aggregate_to_nodes(y, model, scenario)

        imb = 0.0
        for (j, t) in relaxed:
            deliver_p = x_sol.P[j, t] - model.r[j] * x_sol.l[j, t] \
                - sum(x_sol.P[c, t] for c in model.children[j])
            deliver_q = x_sol.Q[j, t] - model.x[j] * x_sol.l[j, t] \
                - sum(x_sol.Q[c, t] for c in model.children[j])
            gap_p = (model.load_p[j, t] + net_p[j, t]) - deliver_p
            gap_q = (model.load_q[j, t] + net_q[j, t]) - deliver_q
            step = step0 / np.sqrt(k) if step_decay == "sqrt" else step0
            lam_p[j, t] += step * gap_p
            lam_q[j, t] += step * gap_q
            imb = max(imb, abs(gap_p), abs(gap_q))

        trace.records.append(BaselineRecord(
            k=k, imbalance_inf=imb, x_cost=x_sol.system_cost,
            lam_p=lam_p.copy(), lam_q=lam_q.copy()))
        if prev_imb is not None and imb > prev_imb:
            growth_streak += 1
            if growth_streak >= 10:
                raise DivergenceError(
                    f"baseline imbalance grew for {growth_streak} iterations "
                    f"(now {imb:g} p.u.)")
        else:
            growth_streak = 0
        prev_imb = imb
    return trace
