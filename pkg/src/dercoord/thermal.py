"""Transformer top-oil dynamics and piecewise-linear loss-of-life.

Provides standalone evaluators (used by tests and reporting) and the
constraint-emission path used when assembling the network program.  The
top-oil state follows the first-order recursion

    h_t = delta * h_{t-1} + epsilon * l_t + zeta_t

and hourly life consumption is the epigraph of the convex piecewise
function max_m(alpha_m * h + beta_m * l + gamma_m), floored at zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import conic
from .feeder import TransformerThermalParams

CYCLIC = "cyclic"
PINNED = "pinned"


def temperature_trajectory(h0: float, sq_current: np.ndarray,
                           params: TransformerThermalParams,
                           zeta: np.ndarray) -> tuple[np.ndarray, float]:
    """Roll the recursion over the horizon.

    Returns the hourly temperatures and, for cross-checking, the terminal
    temperature evaluated in closed form
    delta^T h0 + sum_t delta^(T-t) (epsilon l_t + zeta_t).
    """
    l = np.asarray(sq_current, dtype=float)
    z = np.asarray(zeta, dtype=float)
    if l.shape != z.shape:
        raise ValueError(f"series length mismatch: {l.shape} vs {z.shape}")
    T = len(l)
    h = np.empty(T)
    prev = h0
    for t in range(T):
        prev = params.delta * prev + params.epsilon * l[t] + zeta[t]
        h[t] = prev
    drive = params.epsilon * l + z
    weights = params.delta ** np.arange(T - 1, -1, -1)
    h_closed = params.delta ** T * h0 + float(weights @ drive)
    return h, h_closed


def degradation_value(h, sq_current, params: TransformerThermalParams):
    """Hourly loss of life: max over PWL segments, floored at zero."""
    h = np.asarray(h, dtype=float)
    l = np.asarray(sq_current, dtype=float)
    seg = (params.alpha[:, None] * h.ravel()[None, :]
           + params.beta[:, None] * l.ravel()[None, :]
           + params.gamma[:, None])
    out = np.maximum(seg.max(axis=0), 0.0).reshape(h.shape)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class ThermalVars:
    """Program variable indices for one transformer."""

    temp: np.ndarray        # (T,) indices of h_t
    lol: np.ndarray         # (T,) indices of D_t
    h_init: int | None      # free initial temperature (cyclic mode only)


def emit_constraints(prog: conic.ConicProgram, j: int, sq_current_idx: np.ndarray,
                     params: TransformerThermalParams, zeta: np.ndarray,
                     mode: str, rho: float | None = None,
                     sq_current_scale: float = 1.0) -> ThermalVars:
    """Add recursion, epigraph and cycle coupling for transformer j.

    In cyclic mode the initial temperature is a free variable tied to the
    terminal one by the tagged equality ("cyclic", j); its dual prices
    end-of-horizon loading.  In pinned mode the initial temperature is the
    parameter value and the objective gains -rho * h_T, with rho supplied
    from a previous cyclic solve.  ``sq_current_scale`` is the factor the
    program's current variables were divided by for conditioning.
    """
    T = len(sq_current_idx)
    if len(zeta) != T:
        raise ValueError("thermal drive length mismatch")
    h_idx = prog.add_var(f"h[{j}]", T)
    d_idx = prog.add_var(f"D[{j}]", T, lb=0.0)
    h_init: int | None = None
    eps = params.epsilon * sq_current_scale

    if mode == CYCLIC:
        h_init = int(prog.add_var(f"h0[{j}]", 1)[0])
    elif mode == PINNED:
        if rho is None:
            raise ValueError(f"pinned thermal mode for transformer {j} needs rho")
    else:
        raise ValueError(f"unknown thermal mode {mode!r}")

    for t in range(T):
        coeffs = {int(h_idx[t]): 1.0, int(sq_current_idx[t]): -eps}
        rhs = float(zeta[t])
        if t > 0:
            coeffs[int(h_idx[t - 1])] = -params.delta
        elif mode == CYCLIC:
            coeffs[h_init] = -params.delta
        else:
            rhs += params.delta * params.h0
        prog.add_eq(coeffs, rhs, ("thermal", j, t))

    for m in range(params.n_segments):
        a, g = params.alpha[m], params.gamma[m]
        b = params.beta[m] * sq_current_scale
        for t in range(T):
            # alpha h + beta l + gamma <= D
            prog.add_ineq({int(h_idx[t]): a, int(sq_current_idx[t]): b,
                           int(d_idx[t]): -1.0}, -g)

    if mode == CYCLIC:
        prog.add_eq({int(h_idx[T - 1]): 1.0, h_init: -1.0}, 0.0, ("cyclic", j))
    else:
        prog.add_cost(int(h_idx[T - 1]), -rho)

    return ThermalVars(temp=h_idx, lol=d_idx, h_init=h_init)


def densify(params: TransformerThermalParams, peak_hotspot: float,
            spacing: float, max_segments: int = 40) -> TransformerThermalParams:
    """Insert tangents at peak +/- spacing around the current optimal peak.

    Requires the generating aging curve; transformers shipped with raw
    coefficients only are left untouched.
    """
    if params.curve is None or params.breakpoints is None:
        return params
    candidates = [peak_hotspot - spacing, peak_hotspot, peak_hotspot + spacing]
    bps = list(params.breakpoints)
    added = False
    for theta in candidates:
        if len(bps) >= max_segments:
            break
        if all(abs(theta - b) > spacing / 4 for b in bps):
            bps.append(theta)
            added = True
    if not added:
        return params
    bps.sort()
    tangents = [params.curve.tangent(theta) for theta in bps]
    return TransformerThermalParams(
        alpha=np.array([a for a, _, _ in tangents]),
        beta=np.array([b for _, b, _ in tangents]),
        gamma=np.array([g for _, _, g in tangents]),
        epsilon=params.epsilon, delta=params.delta, h0=params.h0,
        lol_cost=params.lol_cost, nameplate_kva=params.nameplate_kva,
        breakpoints=np.array(bps), curve=params.curve,
    )
