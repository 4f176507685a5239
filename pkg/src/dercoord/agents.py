"""Self-scheduling DER subproblems, solved analytically per resource.

Every PV hour reduces to a Euclidean projection onto a box-disk
intersection; the EV couples hours through its energy requirement and is
solved by bisecting the dual of that single equality, with each inner
evaluation again a per-hour projection.  The first coordination round
drops the proximal terms ("free" mode) and solves the resulting linear
objectives exactly, breaking degenerate ties toward the previous
schedule.

All solves are pure functions of (prices, previous schedule, parameters)
and may run concurrently across resources.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import BisectionError, InfeasibleScheduleError
from .feeder import EvParams, FeederModel, PvParams, Scenario

ENERGY_TOL = 1e-9


@dataclass(frozen=True)
class ProximalConfig:
    """Damping weights for the schedule updates."""

    sigma0: float = 1e-4
    shrink: float = 2.0 / 3.0
    sigma_floor: float = 1e-7
    free_first: bool = True          # initial price response is undamped
    shrink_trigger_window: int = 3   # consecutive small cost deltas before shrinking
    shrink_trigger_scale: float = 1.0   # "small" = scale * cost tolerance


@dataclass
class DerSchedule:
    """Per-resource hourly setpoints; rows follow scenario fleet order."""

    ev_p: np.ndarray
    ev_q: np.ndarray
    pv_p: np.ndarray
    pv_q: np.ndarray
    iteration: int = 0

    @classmethod
    def zeros(cls, n_ev: int, n_pv: int, horizon: int) -> "DerSchedule":
        return cls(ev_p=np.zeros((n_ev, horizon)), ev_q=np.zeros((n_ev, horizon)),
                   pv_p=np.zeros((n_pv, horizon)), pv_q=np.zeros((n_pv, horizon)))

    def copy(self) -> "DerSchedule":
        return DerSchedule(self.ev_p.copy(), self.ev_q.copy(),
                           self.pv_p.copy(), self.pv_q.copy(), self.iteration)

    def delta_inf(self, other: "DerSchedule") -> float:
        """Max setpoint change versus another schedule, p.u."""
        parts = [np.abs(self.ev_p - other.ev_p), np.abs(self.ev_q - other.ev_q),
                 np.abs(self.pv_p - other.pv_p), np.abs(self.pv_q - other.pv_q)]
        return max((float(a.max()) for a in parts if a.size), default=0.0)


def project_box_disk(p0: float, q0: float, p_lo: float, p_hi: float,
                     radius: float) -> tuple[float, float]:
    """Euclidean projection onto {p_lo <= p <= p_hi} ∩ {p^2 + q^2 <= radius^2}.

    Closed-form KKT case analysis: clamp, then radial, then the corner on
    the side the radial projection violates.
    """
    if p_lo > p_hi or p_lo > radius:
        raise InfeasibleScheduleError(
            f"empty feasible set: p in [{p_lo}, {p_hi}], radius {radius}")
    pc = min(max(p0, p_lo), p_hi)
    if pc * pc + q0 * q0 <= radius * radius:
        return pc, q0
    rr = math.hypot(p0, q0)
    if rr > radius:
        pd = radius * p0 / rr
        if p_lo <= pd <= p_hi:
            return pd, radius * q0 / rr
        p_star = min(max(pd, p_lo), p_hi)
    else:
        p_star = pc
    q_mag = math.sqrt(max(radius * radius - p_star * p_star, 0.0))
    return p_star, (q_mag if q0 >= 0 else -q_mag)


def maximize_box_disk(cp: float, cq: float, p_lo: float, p_hi: float,
                      radius: float, tie: tuple[float, float]) -> tuple[float, float]:
    """argmax cp*p + cq*q over the box-disk set, ties broken toward ``tie``."""
    if cp == 0.0 and cq == 0.0:
        return project_box_disk(tie[0], tie[1], p_lo, p_hi, radius)
    nrm = math.hypot(cp, cq)
    zp, zq = radius * cp / nrm, radius * cq / nrm
    if p_lo <= zp <= p_hi:
        return zp, zq
    p_star = min(max(zp, p_lo), p_hi)
    q_mag = math.sqrt(max(radius * radius - p_star * p_star, 0.0))
    if cq != 0.0:
        return p_star, math.copysign(q_mag, cq)
    return p_star, min(max(tie[1], -q_mag), q_mag)


def solve_pv_opt(lam_p: np.ndarray, lam_q: np.ndarray, prev_p: np.ndarray,
                 prev_q: np.ndarray, sigma: float | None,
                 params: PvParams) -> tuple[np.ndarray, np.ndarray]:
    """Hourly PV self-schedule maximizing priced output; separable over hours.

    sigma=None selects free mode (no proximal damping).
    """
    T = len(params.irradiance)
    p = np.zeros(T)
    q = np.zeros(T)
    caps = params.cap
    for t in params.sunny:
        cap_t = float(caps[t])
        if sigma is None:
            p[t], q[t] = maximize_box_disk(
                float(lam_p[t]), float(lam_q[t]), 0.0, cap_t, params.nameplate,
                tie=(float(prev_p[t]), float(prev_q[t])))
        else:
            p[t], q[t] = project_box_disk(
                float(prev_p[t]) + sigma * float(lam_p[t]),
                float(prev_q[t]) + sigma * float(lam_q[t]),
                0.0, cap_t, params.nameplate)
    return p, q


def _ev_hour_point(lam_p_t, lam_q_t, mu, prev_p_t, prev_q_t, sigma, params):
    cap = min(params.charge_limit, params.inverter_limit)
    if sigma is None:
        return maximize_box_disk(-(lam_p_t + mu), -lam_q_t, 0.0,
                                 params.charge_limit, params.inverter_limit,
                                 tie=(prev_p_t, prev_q_t))
    return project_box_disk(prev_p_t - sigma * (lam_p_t + mu),
                            prev_q_t - sigma * lam_q_t,
                            0.0, params.charge_limit, params.inverter_limit)


def solve_ev_opt(lam_p: np.ndarray, lam_q: np.ndarray, prev_p: np.ndarray,
                 prev_q: np.ndarray, sigma: float | None,
                 params: EvParams) -> tuple[np.ndarray, np.ndarray]:
    """EV self-schedule via bisection on the energy-requirement multiplier.

    For a fixed multiplier mu the hours decouple into box-disk projections
    (or exact linear maximizations in free mode); mu is bisected until the
    delivered energy matches the requirement to within 1e-9 p.u.h.
    """
    T = len(lam_p)
    hours = params.hours
    cap = min(params.charge_limit, params.inverter_limit)
    if params.energy > len(hours) * cap + 1e-12:
        raise InfeasibleScheduleError(
            f"EV at node {params.node} cannot deliver {params.energy:g} p.u.h "
            f"within its window")

    lp = lam_p[hours].astype(float)
    lq = lam_q[hours].astype(float)
    pp = prev_p[hours].astype(float)
    pq = prev_q[hours].astype(float)

    def window_points(mu: float):
        pts = [_ev_hour_point(lp[k], lq[k], mu, pp[k], pq[k], sigma, params)
               for k in range(len(hours))]
        return np.array([a for a, _ in pts]), np.array([b for _, b in pts])

    def energy(mu: float) -> float:
        p, _ = window_points(mu)
        return float(p.sum())

    span = float(np.max(np.abs(lp))) if len(lp) else 0.0
    if sigma is not None:
        span += 2.0 * params.charge_limit / sigma
    lo, hi = -span - 1.0, span + 1.0
    grow = 0
    while energy(lo) < params.energy - ENERGY_TOL:
        lo = 2.0 * lo - hi
        grow += 1
        if grow > 80:
            raise BisectionError(f"EV at node {params.node}: no lower bracket")
    grow = 0
    while energy(hi) > params.energy + ENERGY_TOL:
        hi = 2.0 * hi - lo
        grow += 1
        if grow > 80:
            raise BisectionError(f"EV at node {params.node}: no upper bracket")

    mu = 0.0
    for _ in range(200):
        mu = 0.5 * (lo + hi)
        e = energy(mu)
        if abs(e - params.energy) <= ENERGY_TOL:
            break
        if e > params.energy:
            lo = mu
        else:
            hi = mu
    p_win, q_win = window_points(mu)
    residual = params.energy - float(p_win.sum())

    if abs(residual) > ENERGY_TOL:
        # the energy curve jumped across the target: price-indifferent hours
        # (flat objective in p) absorb the residual by water-filling
        if sigma is not None:
            raise BisectionError(
                f"EV at node {params.node}: bisection stalled at residual {residual:g}")
        free = [k for k in range(len(hours))
                if lq[k] == 0.0 and abs(lp[k] + mu) <= 1e-9 * max(1.0, span)]
        if not free:
            raise BisectionError(
                f"EV at node {params.node}: residual {residual:g} with no "
                f"indifferent hours")
        for _ in range(len(free) + 1):
            movable = [k for k in free
                       if (residual > 0 and p_win[k] < cap - 1e-15)
                       or (residual < 0 and p_win[k] > 1e-15)]
            if not movable or abs(residual) <= ENERGY_TOL:
                break
            step = residual / len(movable)
            for k in movable:
                new = min(max(p_win[k] + step, 0.0), cap)
                residual -= new - p_win[k]
                p_win[k] = new
        if abs(residual) > ENERGY_TOL:
            raise BisectionError(
                f"EV at node {params.node}: could not place residual {residual:g}")

    p = np.zeros(T)
    q = np.zeros(T)
    p[hours] = p_win
    q[hours] = q_win
    return p, q


def solve_fleet(scenario: Scenario, lam_p_nodes: np.ndarray, lam_q_nodes: np.ndarray,
                prev: DerSchedule, sigma: float | None,
                max_workers: int | None = None) -> DerSchedule:
    """One coordination round: every resource re-optimizes at its nodal prices.

    Solves fan out over a thread pool and join before returning; results
    are identical to the sequential order because each solve is pure.
    """
    T = scenario.horizon
    out = DerSchedule.zeros(len(scenario.evs), len(scenario.pvs), T)

    def run_ev(k: int):
        ev = scenario.evs[k]
        return solve_ev_opt(lam_p_nodes[ev.node], lam_q_nodes[ev.node],
                            prev.ev_p[k], prev.ev_q[k], sigma, ev)

    def run_pv(k: int):
        pv = scenario.pvs[k]
        return solve_pv_opt(lam_p_nodes[pv.node], lam_q_nodes[pv.node],
                            prev.pv_p[k], prev.pv_q[k], sigma, pv)

    n_tasks = len(scenario.evs) + len(scenario.pvs)
    if n_tasks == 0:
        return out
    workers = max_workers or min(8, n_tasks)
    if workers > 1 and n_tasks > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            ev_res = list(pool.map(run_ev, range(len(scenario.evs))))
            pv_res = list(pool.map(run_pv, range(len(scenario.pvs))))
    else:
        ev_res = [run_ev(k) for k in range(len(scenario.evs))]
        pv_res = [run_pv(k) for k in range(len(scenario.pvs))]
    for k, (p, q) in enumerate(ev_res):
        out.ev_p[k] = p
        out.ev_q[k] = q
    for k, (p, q) in enumerate(pv_res):
        out.pv_p[k] = p
        out.pv_q[k] = q
    return out


def aggregate_to_nodes(schedule: DerSchedule, model: FeederModel,
                       scenario: Scenario) -> tuple[np.ndarray, np.ndarray]:
    """Net DER demand per (node, hour): EV consumption minus PV production."""
    net_p = np.zeros((model.n_nodes, scenario.horizon))
    net_q = np.zeros((model.n_nodes, scenario.horizon))
    for k, ev in enumerate(scenario.evs):
        net_p[ev.node] += schedule.ev_p[k]
        net_q[ev.node] += schedule.ev_q[k]
    for k, pv in enumerate(scenario.pvs):
        net_p[pv.node] -= schedule.pv_p[k]
        net_q[pv.node] -= schedule.pv_q[k]
    return net_p, net_q
