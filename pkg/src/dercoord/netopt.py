"""Network optimization over the branch-flow relaxation, with priced duals.

Assembles the fixed-injection network problem as a conic program: nodal
real/reactive balances (tagged so their multipliers come back as nodal
marginal costs), voltage-drop equalities, rotated-cone apparent-power
memberships, transformer thermal dynamics, and soft voltage/ampacity
limits with quadratic penalties.  Three cone treatments are supported:

* ``cone``      -- the standard second-order-cone inequality;
* ``penalized`` -- cone plus a linearized reverse cut whose slack is
                   priced in the objective (used to recover physics when
                   the relaxation is loose);
* ``linearized``-- the cone replaced by a first-order equality around a
                   physical operating point, which restores meaningful
                   balance multipliers after recovery.

DER injections enter either as fixed nodal constants or, for the
centralized benchmark, as decision variables sharing the same builder.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import conic, thermal
from .agents import DerSchedule
from .feeder import FeederModel, Scenario, TransformerThermalParams

CONE = "cone"
PENALIZED = "penalized"
LINEARIZED = "linearized"


@dataclass(frozen=True)
class SoftLimitConfig:
    """Quadratic penalty weights for voltage/ampacity slack; or hard limits."""

    mv: float = 5000.0   # $ per (p.u.^2)^2 of voltage-band violation
    ml: float = 1000.0   # $ per (p.u.^2)^2 of ampacity violation
    hard: bool = False
    # tiny linear slack cost: economically negligible, but it keeps the
    # slack bounds strictly complementary so the interior-point method
    # does not stall on a degenerate face
    linear_eps: float = 1e-4

    def __post_init__(self):
        if self.mv < 0 or self.ml < 0:
            raise ValueError("penalty weights must be nonnegative")


@dataclass(frozen=True)
class NetOptOptions:
    soft: SoftLimitConfig = field(default_factory=SoftLimitConfig)
    thermal_mode: str = thermal.CYCLIC
    rho_pinned: dict[int, float] | None = None
    cone_mode: str = CONE
    gap_penalty: float = 0.0                 # slack price in penalized mode
    point: "OpfSolution | None" = None       # linearization point
    free_der: bool = False
    thermal_overrides: dict[int, TransformerThermalParams] | None = None
    relax_balances: frozenset | None = None  # (j, t) rows left out of the program


@dataclass
class OpfSolution:
    """Primal operating point, duals, and objective breakdown of one solve."""

    P: np.ndarray            # (N+1, T); row j is the flow entering line j
    Q: np.ndarray
    v: np.ndarray            # (N+1, T) squared voltage; row 0 is the root constant
    l: np.ndarray            # (N+1, T) squared current
    temp: dict[int, np.ndarray]
    lol: dict[int, np.ndarray]
    h_init: dict[int, float]
    dv: np.ndarray | None
    dl: np.ndarray | None
    w: np.ndarray | None
    lam_p: np.ndarray        # (N+1, T), row 0 NaN
    lam_q: np.ndarray
    rho: dict[int, float]
    cost_real: float
    cost_reactive: float
    cost_degradation: float
    cost_soft_penalty: float
    cost_gap_penalty: float
    objective: float
    kind: str                # cone mode the solve used
    status: str
    max_balance_residual: float
    iterations: int
    solve_time: float
    der_schedule: DerSchedule | None = None
    hard_duals: dict = field(default_factory=dict)

    @property
    def system_cost(self) -> float:
        return self.cost_real + self.cost_reactive + self.cost_degradation

    def upstream_v(self, model: FeederModel) -> np.ndarray:
        """v at the sending end of each line: rows 1..N give v_{parent(j)}."""
        T = self.P.shape[1]
        out = np.zeros_like(self.P)
        for j in model.lines:
            out[j] = self.v[int(model.parent[j])]
        return out

    @property
    def duals_valid(self) -> bool:
        return self.kind in (CONE, LINEARIZED)


@dataclass(frozen=True)
class DlmcSchedule:
    """Nodal marginal cost table: $/MWh real, $/MVARh reactive, per hour."""

    lam_p: np.ndarray
    lam_q: np.ndarray

    def at(self, node: int) -> tuple[np.ndarray, np.ndarray]:
        return self.lam_p[node], self.lam_q[node]


def extract_dlmc(solution: OpfSolution) -> DlmcSchedule:
    if not solution.duals_valid:
        raise ValueError(
            f"solution of kind {solution.kind!r} does not carry balance duals")
    return DlmcSchedule(lam_p=solution.lam_p.copy(), lam_q=solution.lam_q.copy())


@dataclass
class NetOptProgram:
    prog: conic.ConicProgram
    model: FeederModel
    scenario: Scenario
    options: NetOptOptions
    P: np.ndarray            # (N+1, T) variable indices, row 0 = -1
    Q: np.ndarray
    v: np.ndarray
    l: np.ndarray
    lscale: np.ndarray       # (N+1,) factor the squared-current columns carry
    tvars: dict[int, thermal.ThermalVars]
    dv: np.ndarray | None
    dl: np.ndarray | None
    w: np.ndarray | None
    ev_idx: list[tuple[np.ndarray, np.ndarray]]  # per EV: (p idx, q idx) on window
    pv_idx: list[tuple[np.ndarray, np.ndarray]]  # per PV: indices on sunny hours
    net_p: np.ndarray
    net_q: np.ndarray
    thermal_params: dict[int, TransformerThermalParams]


def _thermal_for(model: FeederModel, options: NetOptOptions) -> dict[int, TransformerThermalParams]:
    params = dict(model.transformers)
    if options.thermal_overrides:
        params.update(options.thermal_overrides)
    return params


def build_netopt(model: FeederModel, scenario: Scenario,
                 injections: tuple[np.ndarray, np.ndarray] | None = None,
                 options: NetOptOptions | None = None) -> NetOptProgram:
    """Assemble the network program at fixed DER injections.

    ``injections`` is the (net_p, net_q) nodal demand added by DERs; pass
    None (with ``options.free_der``) to instead create DER decision
    variables inside the program.
    """
    options = options or NetOptOptions()
    T = scenario.horizon
    n = model.n_nodes
    if model.horizon != T:
        raise ValueError(f"scenario horizon {T} != feeder horizon {model.horizon}")
    if options.free_der:
        net_p = np.zeros((n, T))
        net_q = np.zeros((n, T))
    else:
        if injections is None:
            net_p = np.zeros((n, T))
            net_q = np.zeros((n, T))
        else:
            net_p, net_q = injections
            if net_p.shape != (n, T) or net_q.shape != (n, T):
                raise ValueError("injection arrays must be (n_nodes, horizon)")

    if options.cone_mode in (PENALIZED, LINEARIZED) and options.point is None:
        raise ValueError(f"cone mode {options.cone_mode!r} needs a linearization point")

    prog = conic.ConicProgram()
    nl = model.n_lines
    P = np.full((n, T), -1, dtype=int)
    Q = np.full((n, T), -1, dtype=int)
    v = np.full((n, T), -1, dtype=int)
    l = np.full((n, T), -1, dtype=int)
    P[1:] = prog.add_var("P", nl * T).reshape(nl, T)
    Q[1:] = prog.add_var("Q", nl * T).reshape(nl, T)
    v[1:] = prog.add_var("v", nl * T).reshape(nl, T)
    l[1:] = prog.add_var("l", nl * T, lb=0.0).reshape(nl, T)
    # squared currents of small transformers are ~1e-4 p.u.^2 while their
    # thermal gains are ~1e5; carrying the ampacity as a column scale keeps
    # the KKT system conditioned
    lscale = np.clip(model.l_max, 1e-6, 1.0)
    lscale[0] = 1.0

    scale = model.base_mva  # p.u.-hour -> MWh at the objective
    root = model.root_line
    v0 = model.root_voltage ** 2

    # DER decision variables (centralized benchmark path)
    ev_idx: list[tuple[np.ndarray, np.ndarray]] = []
    pv_idx: list[tuple[np.ndarray, np.ndarray]] = []
    if options.free_der:
        for k, ev in enumerate(scenario.evs):
            w_len = len(ev.hours)
            pe = prog.add_var(f"ev_p[{k}]", w_len, lb=0.0)
            qe = prog.add_var(f"ev_q[{k}]", w_len)
            prog.add_eq({int(i): 1.0 for i in pe}, ev.energy, ("ev", k))
            for s in range(w_len):
                prog.add_ineq({int(pe[s]): 1.0}, ev.charge_limit)
                prog.add_soc(conic.lin_const(ev.inverter_limit),
                             [conic.lin_var(int(pe[s])), conic.lin_var(int(qe[s]))])
            ev_idx.append((pe, qe))
        for k, pv in enumerate(scenario.pvs):
            sunny = pv.sunny
            ps = prog.add_var(f"pv_p[{k}]", len(sunny), lb=0.0)
            qs = prog.add_var(f"pv_q[{k}]", len(sunny))
            caps = pv.cap
            for s, t in enumerate(sunny):
                prog.add_ineq({int(ps[s]): 1.0}, float(caps[t]))
                prog.add_soc(conic.lin_const(pv.nameplate),
                             [conic.lin_var(int(ps[s])), conic.lin_var(int(qs[s]))])
            pv_idx.append((ps, qs))

    # balances and voltage drop
    relaxed = options.relax_balances or frozenset()
    for j in model.lines:
        rj, xj = float(model.r[j]), float(model.x[j])
        sj = float(lscale[j])
        pj = int(model.parent[j])
        kids = model.children[j]
        for t in range(T):
            cp = {int(P[j, t]): 1.0}
            cq = {int(Q[j, t]): 1.0}
            if rj:
                cp[int(l[j, t])] = -rj * sj
            if xj:
                cq[int(l[j, t])] = -xj * sj
            for c in kids:
                cp[int(P[c, t])] = -1.0
                cq[int(Q[c, t])] = -1.0
            if options.free_der:
                for k, ev in enumerate(scenario.evs):
                    if ev.node == j:
                        pos = np.flatnonzero(ev.hours == t)
                        if pos.size:
                            pe, qe = ev_idx[k]
                            cp[int(pe[pos[0]])] = -1.0
                            cq[int(qe[pos[0]])] = -1.0
                for k, pv in enumerate(scenario.pvs):
                    if pv.node == j:
                        pos = np.flatnonzero(pv.sunny == t)
                        if pos.size:
                            ps, qs = pv_idx[k]
                            cp[int(ps[pos[0]])] = 1.0
                            cq[int(qs[pos[0]])] = 1.0
            if (j, t) not in relaxed:
                prog.add_eq(cp, float(model.load_p[j, t] + net_p[j, t]), ("balP", j, t))
                prog.add_eq(cq, float(model.load_q[j, t] + net_q[j, t]), ("balQ", j, t))

            vd = {int(v[j, t]): 1.0, int(P[j, t]): 2 * rj, int(Q[j, t]): 2 * xj,
                  int(l[j, t]): -(rj * rj + xj * xj) * sj}
            rhs = 0.0
            if pj == 0:
                rhs = v0
            else:
                vd[int(v[pj, t])] = -1.0
            prog.add_eq(vd, rhs, ("vd", j, t))

    # apparent-power coupling, per the selected cone treatment
    point = options.point
    for j in model.lines:
        pj = int(model.parent[j])
        sj = float(lscale[j])
        for t in range(T):
            if pj == 0:
                vu: conic.Lin = conic.lin_const(v0)
            else:
                vu = conic.lin_var(int(v[pj, t]))
            if options.cone_mode == LINEARIZED:
                pk = float(point.P[j, t])
                qk = float(point.Q[j, t])
                vk = float(point.v[pj, t])
                coeffs = {int(l[j, t]): sj,
                          int(P[j, t]): -2.0 * pk / vk,
                          int(Q[j, t]): -2.0 * qk / vk}
                rhs = 0.0
                av = (pk * pk + qk * qk) / (vk * vk)
                if pj == 0:
                    rhs = -av * v0
                else:
                    coeffs[int(v[pj, t])] = av
                prog.add_eq(coeffs, rhs, ("lincur", j, t))
            else:
                prog.add_rotated_cone(
                    vu, conic.lin_var(int(l[j, t]), sj),
                    [conic.lin_var(int(P[j, t])), conic.lin_var(int(Q[j, t]))])

    w = None
    if options.cone_mode == PENALIZED:
        w = np.full((n, T), -1, dtype=int)
        w[1:] = prog.add_var("w", nl * T, lb=0.0).reshape(nl, T)
        for j in model.lines:
            pj = int(model.parent[j])
            sj = float(lscale[j])
            for t in range(T):
                pk = float(point.P[j, t])
                qk = float(point.Q[j, t])
                vk = float(point.v[pj, t])
                lk = float(point.l[j, t])
                d = vk - lk
                # (v_u + l)^2 <= w + first-order expansion of
                # (v_u - l)^2 + 4P^2 + 4Q^2 around the point
                terms = [(int(w[j, t]), 1.0), (int(l[j, t]), -2.0 * d * sj),
                         (int(P[j, t]), 8.0 * pk), (int(Q[j, t]), 8.0 * qk)]
                const = -(d * d) - 4.0 * pk * pk - 4.0 * qk * qk
                if pj == 0:
                    const += 2.0 * d * v0
                    zsum: conic.Lin = ((int(l[j, t]), sj),), v0
                else:
                    terms.append((int(v[pj, t]), 2.0 * d))
                    zsum = ((int(v[pj, t]), 1.0), (int(l[j, t]), sj)), 0.0
                prog.add_rotated_cone((tuple(terms), const), conic.lin_const(1.0),
                                      [zsum])
                prog.add_cost(int(w[j, t]), options.gap_penalty)

    # voltage and ampacity limits
    dv = dl = None
    if options.soft.hard:
        for j in model.lines:
            sj = float(lscale[j])
            for t in range(T):
                prog.add_ineq({int(v[j, t]): 1.0}, float(model.v_max[j]), ("vub", j, t))
                prog.add_ineq({int(v[j, t]): -1.0}, -float(model.v_min[j]), ("vlb", j, t))
                prog.add_ineq({int(l[j, t]): sj}, float(model.l_max[j]), ("lmax", j, t))
    else:
        dv = np.full((n, T), -1, dtype=int)
        dl = np.full((n, T), -1, dtype=int)
        dv[1:] = prog.add_var("dv", nl * T, lb=0.0).reshape(nl, T)
        dl[1:] = prog.add_var("dl", nl * T, lb=0.0).reshape(nl, T)
        for j in model.lines:
            sj = float(lscale[j])
            for t in range(T):
                prog.add_ineq({int(v[j, t]): 1.0, int(dv[j, t]): -1.0},
                              float(model.v_max[j]))
                prog.add_ineq({int(v[j, t]): -1.0, int(dv[j, t]): -1.0},
                              -float(model.v_min[j]))
                prog.add_ineq({int(l[j, t]): sj, int(dl[j, t]): -1.0},
                              float(model.l_max[j]))
                prog.add_quad_cost(int(dv[j, t]), options.soft.mv)
                prog.add_quad_cost(int(dl[j, t]), options.soft.ml)
                prog.add_cost(int(dv[j, t]), options.soft.linear_eps)
                prog.add_cost(int(dl[j, t]), options.soft.linear_eps)

    # transformer thermal blocks
    tparams = _thermal_for(model, options)
    tvars: dict[int, thermal.ThermalVars] = {}
    for j in model.transformer_ids:
        params = tparams[j]
        rho_j = None
        if options.thermal_mode == thermal.PINNED:
            if not options.rho_pinned or j not in options.rho_pinned:
                raise ValueError(f"pinned thermal mode needs rho for transformer {j}")
            rho_j = options.rho_pinned[j]
        tv = thermal.emit_constraints(prog, j, l[j], params, scenario.zeta[j],
                                      options.thermal_mode, rho_j,
                                      sq_current_scale=float(lscale[j]))
        tvars[j] = tv
        for t in range(T):
            prog.add_cost(int(tv.lol[t]), params.lol_cost)

    # substation transaction costs
    for t in range(T):
        prog.add_cost(int(P[root, t]), float(scenario.price_p[t]) * scale)
        prog.add_cost(int(Q[root, t]), float(scenario.price_q[t]) * scale)

    return NetOptProgram(prog=prog, model=model, scenario=scenario, options=options,
                         P=P, Q=Q, v=v, l=l, lscale=lscale,
                         tvars=tvars, dv=dv, dl=dl, w=w,
                         ev_idx=ev_idx, pv_idx=pv_idx, net_p=net_p, net_q=net_q,
                         thermal_params=tparams)


def solve_netopt(np_prog: NetOptProgram,
                 settings: conic.SolveSettings | None = None) -> OpfSolution:
    """Solve the assembled program and unpack primal values plus duals."""
    model = np_prog.model
    scenario = np_prog.scenario
    options = np_prog.options
    T = scenario.horizon
    n = model.n_nodes
    raw = conic.solve(np_prog.prog, settings)
    x = raw.x

    def grid(idx: np.ndarray) -> np.ndarray:
        out = np.zeros((n, T))
        out[1:] = x[idx[1:]]
        return out

    P = grid(np_prog.P)
    Q = grid(np_prog.Q)
    v = grid(np_prog.v)
    v[0, :] = model.root_voltage ** 2
    l = grid(np_prog.l) * np_prog.lscale[:, None]

    temp: dict[int, np.ndarray] = {}
    lol: dict[int, np.ndarray] = {}
    h_init: dict[int, float] = {}
    rho: dict[int, float] = {}
    for j, tv in np_prog.tvars.items():
        temp[j] = x[tv.temp]
        lol[j] = x[tv.lol]
        params = np_prog.thermal_params[j]
        if tv.h_init is not None:
            h_init[j] = float(x[tv.h_init])
            # reported so a pinned re-solve appending -rho*h_T reproduces this one
            rho[j] = raw.eq_duals[("cyclic", j)]
        else:
            h_init[j] = params.h0

    lam_p = np.full((n, T), np.nan)
    lam_q = np.full((n, T), np.nan)
    scale = model.base_mva
    for j in model.lines:
        for t in range(T):
            # rows may be absent when a balance was relaxed into the objective
            lam_p[j, t] = raw.eq_duals.get(("balP", j, t), np.nan) / scale
            lam_q[j, t] = raw.eq_duals.get(("balQ", j, t), np.nan) / scale

    root = model.root_line
    cost_real = float(scenario.price_p @ P[root]) * scale
    cost_reactive = float(scenario.price_q @ Q[root]) * scale
    cost_degradation = sum(float(np_prog.thermal_params[j].lol_cost * lol[j].sum())
                           for j in np_prog.tvars)

    dv = dl = w = None
    cost_soft = 0.0
    if np_prog.dv is not None:
        dv = grid(np_prog.dv)
        dl = grid(np_prog.dl)
        cost_soft = float(options.soft.mv * (dv[1:] ** 2).sum()
                          + options.soft.ml * (dl[1:] ** 2).sum())
    cost_gap = 0.0
    if np_prog.w is not None:
        w = grid(np_prog.w)
        cost_gap = float(options.gap_penalty * w[1:].sum())

    hard_duals = {}
    if options.soft.hard:
        hard_duals = dict(raw.ineq_duals)

    schedule = None
    if options.free_der:
        schedule = DerSchedule.zeros(len(scenario.evs), len(scenario.pvs), T)
        for k, ev in enumerate(scenario.evs):
            pe, qe = np_prog.ev_idx[k]
            schedule.ev_p[k, ev.hours] = x[pe]
            schedule.ev_q[k, ev.hours] = x[qe]
        for k, pv in enumerate(scenario.pvs):
            ps, qs = np_prog.pv_idx[k]
            schedule.pv_p[k, pv.sunny] = x[ps]
            schedule.pv_q[k, pv.sunny] = x[qs]

    return OpfSolution(
        P=P, Q=Q, v=v, l=l, temp=temp, lol=lol, h_init=h_init,
        dv=dv, dl=dl, w=w, lam_p=lam_p, lam_q=lam_q, rho=rho,
        cost_real=cost_real, cost_reactive=cost_reactive,
        cost_degradation=cost_degradation, cost_soft_penalty=cost_soft,
        cost_gap_penalty=cost_gap, objective=raw.objective,
        kind=options.cone_mode, status=raw.status,
        max_balance_residual=raw.max_eq_residual,
        iterations=raw.iterations, solve_time=raw.solve_time,
        der_schedule=schedule, hard_duals=hard_duals,
    )


def balance_residual(sol: OpfSolution, model: FeederModel,
                     net_p: np.ndarray, net_q: np.ndarray) -> float:
    """Max power-balance violation of a solution, recomputed from arrays."""
    T = sol.P.shape[1]
    worst = 0.0
    for j in model.lines:
        rp = sol.P[j] - model.r[j] * sol.l[j] - model.load_p[j] - net_p[j]
        rq = sol.Q[j] - model.x[j] * sol.l[j] - model.load_q[j] - net_q[j]
        for c in model.children[j]:
            rp = rp - sol.P[c]
            rq = rq - sol.Q[c]
        worst = max(worst, float(np.max(np.abs(rp))), float(np.max(np.abs(rq))))
    return worst
