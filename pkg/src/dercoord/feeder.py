"""Radial feeder and scenario data model, file ingestion, per-unit handling.

Feeder and scenario documents are TOML. Quantities in files are
human-scale (kW, kVAR, kVA, degrees C, $/MWh); everything is normalized
to per-unit on ``base_mva`` at load time and stays per-unit internally.
Voltage limits are entered as magnitudes and stored squared; ampacities
are entered as current magnitudes and stored squared.  Node ids must be
dense integers 0..N with node 0 the root and parent(j) < j, so tree
passes can run over plain arrays.  Time series in files are length-T
arrays indexed from hour 1.
"""

from __future__ import annotations

import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import FeederFormatError, ModelInvariantError

KW_PER_MW = 1000.0


def to_per_unit(value_kw: float, base_mva: float) -> float:
    """Convert a kW/kVAR/kVA quantity to per-unit on the MVA base."""
    if base_mva <= 0:
        raise ValueError(f"base power must be positive, got {base_mva}")
    return value_kw / KW_PER_MW / base_mva


def from_per_unit(value_pu: float, base_mva: float) -> float:
    if base_mva <= 0:
        raise ValueError(f"base power must be positive, got {base_mva}")
    return value_pu * KW_PER_MW * base_mva


@dataclass(frozen=True)
class AgingCurve:
    """Exponential insulation-aging model generating PWL tangents.

    Life consumption per hour is exp(rate/(ref+273) - rate/(theta+273))
    with theta = top_oil + hotspot_gain * squared_current, normalized to
    1.0 at the reference temperature.
    """

    rate: float = 15000.0
    ref_c: float = 110.0
    hotspot_gain: float = 0.0  # degC per p.u.^2 of squared current

    def value(self, top_oil: float, sq_current: float = 0.0) -> float:
        theta = top_oil + self.hotspot_gain * sq_current
        return math.exp(self.rate / (self.ref_c + 273.0) - self.rate / (theta + 273.0))

    def tangent(self, theta: float) -> tuple[float, float, float]:
        """Tangent plane coefficients (alpha, beta, gamma) at hot-spot theta."""
        f = math.exp(self.rate / (self.ref_c + 273.0) - self.rate / (theta + 273.0))
        slope = f * self.rate / (theta + 273.0) ** 2
        alpha = slope
        beta = slope * self.hotspot_gain
        gamma = f - slope * theta
        return alpha, beta, gamma


@dataclass(frozen=True)
class TransformerThermalParams:
    """Per-transformer thermal recursion and PWL loss-of-life coefficients."""

    alpha: np.ndarray   # (M,) degradation per degC of top-oil
    beta: np.ndarray    # (M,) degradation per p.u.^2 of squared current
    gamma: np.ndarray   # (M,) segment intercepts
    epsilon: float      # degC per p.u.^2: current-to-temperature gain
    delta: float = 0.75
    h0: float = 45.0    # initial top-oil temperature, degC
    lol_cost: float = 0.02  # $ per hour of life lost
    nameplate_kva: float = 0.0
    breakpoints: np.ndarray | None = None  # hot-spot temps where tangents were taken
    curve: AgingCurve | None = None

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            arr = np.asarray(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.breakpoints is not None:
            bp = np.asarray(self.breakpoints, dtype=float)
            bp.setflags(write=False)
            object.__setattr__(self, "breakpoints", bp)

    @property
    def n_segments(self) -> int:
        return len(self.alpha)

    def check(self) -> list[str]:
        problems = []
        if self.n_segments < 1:
            problems.append("needs at least one PWL segment")
        if not (len(self.alpha) == len(self.beta) == len(self.gamma)):
            problems.append("alpha/beta/gamma length mismatch")
        if not 0.0 < self.delta < 1.0:
            problems.append(f"delta must be in (0,1), got {self.delta}")
        if np.any(np.diff(self.alpha) < -1e-15):
            problems.append("segment slopes alpha must be nondecreasing")
        return problems


@dataclass(frozen=True)
class EvParams:
    """One EV: plug window, energy requirement, charger and inverter limits."""

    node: int
    hours: np.ndarray        # 0-based hours, sorted
    energy: float            # p.u.-hours to deliver over the window
    charge_limit: float      # p.u., max real-power draw
    inverter_limit: float    # p.u., apparent-power radius

    def __post_init__(self):
        h = np.unique(np.asarray(self.hours, dtype=int))
        h.setflags(write=False)
        object.__setattr__(self, "hours", h)

    def check(self, horizon: int) -> list[str]:
        problems = []
        if self.energy < 0:
            problems.append("energy requirement must be nonnegative")
        if len(self.hours) == 0:
            problems.append("empty plug window")
        elif self.hours[0] < 0 or self.hours[-1] >= horizon:
            problems.append("plug window outside horizon")
        cap = len(self.hours) * min(self.charge_limit, self.inverter_limit)
        if self.energy > cap + 1e-12:
            problems.append(
                f"energy {self.energy:g} p.u.h exceeds window capacity {cap:g}")
        return problems


@dataclass(frozen=True)
class PvParams:
    """One PV: nameplate and hourly irradiance scaling in [0, 1]."""

    node: int
    nameplate: float         # p.u. apparent-power radius
    irradiance: np.ndarray   # (T,) in [0, 1]

    def __post_init__(self):
        arr = np.asarray(self.irradiance, dtype=float)
        arr.setflags(write=False)
        object.__setattr__(self, "irradiance", arr)

    @property
    def cap(self) -> np.ndarray:
        """Hourly real-power cap: irradiance times nameplate."""
        return self.irradiance * self.nameplate

    @property
    def sunny(self) -> np.ndarray:
        return np.flatnonzero(self.irradiance > 0.0)

    def check(self, horizon: int) -> list[str]:
        problems = []
        if len(self.irradiance) != horizon:
            problems.append("irradiance length != horizon")
        if np.any(self.irradiance < 0) or np.any(self.irradiance > 1):
            problems.append("irradiance outside [0, 1]")
        if self.nameplate < 0:
            problems.append("negative nameplate")
        return problems


@dataclass(frozen=True)
class FeederModel:
    """Validated radial network with transformers, limits and baseline load."""

    name: str
    base_mva: float
    horizon: int
    root_voltage: float            # magnitude, p.u.
    parent: np.ndarray             # (N+1,), parent[0] = -1
    r: np.ndarray                  # (N+1,) p.u., index 0 unused
    x: np.ndarray                  # (N+1,) p.u.
    l_max: np.ndarray              # (N+1,) squared ampacity, p.u.^2
    v_min: np.ndarray              # (N+1,) squared magnitude
    v_max: np.ndarray              # (N+1,)
    load_p: np.ndarray             # (N+1, T) p.u.
    load_q: np.ndarray             # (N+1, T) p.u.
    transformers: dict[int, TransformerThermalParams]
    children: tuple[tuple[int, ...], ...] = field(init=False)

    def __post_init__(self):
        for name in ("parent", "r", "x", "l_max", "v_min", "v_max", "load_p", "load_q"):
            arr = np.asarray(getattr(self, name))
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        kids: list[list[int]] = [[] for _ in range(self.n_nodes)]
        for j in range(1, self.n_nodes):
            p = int(self.parent[j])
            if 0 <= p < self.n_nodes:
                kids[p].append(j)
        object.__setattr__(self, "children", tuple(tuple(k) for k in kids))

    @property
    def n_nodes(self) -> int:
        return len(self.parent)

    @property
    def n_lines(self) -> int:
        return self.n_nodes - 1

    @property
    def lines(self) -> range:
        return range(1, self.n_nodes)

    @property
    def transformer_ids(self) -> list[int]:
        return sorted(self.transformers)

    @property
    def root_line(self) -> int:
        """The single line leaving the root; substation flows live here."""
        return self.children[0][0]

    def is_leaf(self, j: int) -> bool:
        return len(self.children[j]) == 0


@dataclass(frozen=True)
class Scenario:
    """Horizon, prices, DER fleets and the thermal drive bound to a feeder."""

    horizon: int
    price_p: np.ndarray            # (T,) $/MWh
    price_q: np.ndarray            # (T,) $/MVARh
    ambient: np.ndarray            # (T,) degC
    evs: tuple[EvParams, ...]
    pvs: tuple[PvParams, ...]
    zeta: dict[int, np.ndarray]    # per transformer: (T,) thermal drive, degC

    def __post_init__(self):
        for name in ("price_p", "price_q", "ambient"):
            arr = np.asarray(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        for z in self.zeta.values():
            z.setflags(write=False)


@dataclass(frozen=True)
class Violation:
    code: str
    node: int | None
    message: str


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, code: str, node: int | None, message: str) -> None:
        self.violations.append(Violation(code, node, message))

    def raise_if_failed(self) -> None:
        if not self.ok:
            lines = "; ".join(v.message for v in self.violations)
            raise ModelInvariantError(lines)


def validate_radial(model: FeederModel) -> ValidationReport:
    """Check every structural invariant; violations become report entries."""
    rep = ValidationReport()
    n = model.n_nodes
    if int(model.parent[0]) != -1:
        rep.add("root-parent", 0, "root node 0 must have no parent")
    for j in range(1, n):
        p = int(model.parent[j])
        if not 0 <= p < n:
            rep.add("parent-range", j, f"node {j} parent {p} out of range")
        elif p >= j:
            rep.add("topo-order", j,
                    f"node {j} has parent {p}; ids must be topologically ordered")
    # reachability from the root covers every node exactly once
    seen = np.zeros(n, dtype=bool)
    seen[0] = True
    stack = [0]
    while stack:
        u = stack.pop()
        for c in model.children[u]:
            if seen[c]:
                rep.add("cycle", c, f"node {c} reached twice; not a tree at node {c}")
            else:
                seen[c] = True
                stack.append(c)
    for j in np.flatnonzero(~seen):
        rep.add("unreachable", int(j), f"node {j} unreachable from root")
    if len(model.children[0]) != 1:
        rep.add("root-children", 0,
                f"root must have exactly one child, has {len(model.children[0])}")
    for j in model.transformer_ids:
        if j < 1 or j >= n:
            rep.add("xfmr-range", j, f"transformer id {j} is not a line")
            continue
        if not model.is_leaf(j):
            rep.add("xfmr-leaf", j,
                    f"transformer line {j} must feed a leaf node")
        problems = model.transformers[j].check()
        for msg in problems:
            rep.add("xfmr-params", j, f"transformer {j}: {msg}")
    for j in range(1, n):
        if model.r[j] < 0:
            rep.add("line-r", j, f"line {j} has negative resistance")
        if model.x[j] < 0:
            rep.add("line-x", j, f"line {j} has negative reactance")
        if model.l_max[j] <= 0:
            rep.add("line-amp", j, f"line {j} ampacity must be positive")
    for j in range(n):
        if not 0.0 < model.v_min[j] < model.v_max[j]:
            rep.add("v-limits", j,
                    f"node {j} voltage limits must satisfy 0 < v_min < v_max")
    if model.load_p.shape != (n, model.horizon) or model.load_q.shape != (n, model.horizon):
        rep.add("load-shape", None, "load arrays must be (n_nodes, horizon)")
    return rep


def validate_scenario(scenario: Scenario, model: FeederModel) -> ValidationReport:
    rep = ValidationReport()
    if scenario.horizon != model.horizon:
        rep.add("horizon", None,
                f"scenario horizon {scenario.horizon} != feeder horizon {model.horizon}")
    for name in ("price_p", "price_q", "ambient"):
        if len(getattr(scenario, name)) != scenario.horizon:
            rep.add("series-length", None, f"{name} length != horizon")
    for k, ev in enumerate(scenario.evs):
        if not 0 < ev.node < model.n_nodes:
            rep.add("ev-node", ev.node, f"ev[{k}] references unknown node {ev.node}")
        for msg in ev.check(scenario.horizon):
            rep.add("ev-params", ev.node, f"ev[{k}]: {msg}")
    for k, pv in enumerate(scenario.pvs):
        if not 0 < pv.node < model.n_nodes:
            rep.add("pv-node", pv.node, f"pv[{k}] references unknown node {pv.node}")
        for msg in pv.check(scenario.horizon):
            rep.add("pv-params", pv.node, f"pv[{k}]: {msg}")
    return rep


# -- parsing ------------------------------------------------------------------


def _series(raw, horizon: int, what: str) -> np.ndarray:
    arr = np.asarray(raw, dtype=float)
    if arr.shape != (horizon,):
        raise FeederFormatError(f"{what} must be a length-{horizon} array")
    return arr


def parse_feeder(text: str) -> FeederModel:
    """Parse and validate a feeder TOML document."""
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise FeederFormatError(f"feeder document is not valid TOML: {e}") from e
    try:
        meta = doc["meta"]
        base_mva = float(meta["base_mva"])
        horizon = int(meta["horizon"])
        name = str(meta.get("name", "feeder"))
        root_voltage = float(meta.get("root_voltage_pu", 1.0))
        volt = doc.get("voltage", {})
        vmin_default = float(volt.get("v_min_pu", 0.95))
        vmax_default = float(volt.get("v_max_pu", 1.05))
        lines = doc["lines"]
    except KeyError as e:
        raise FeederFormatError(f"feeder document missing section/key {e}") from e
    if base_mva <= 0:
        raise FeederFormatError("meta.base_mva must be positive")

    n = len(lines) + 1
    parent = np.full(n, -1, dtype=int)
    seen = set()
    r = np.zeros(n)
    x = np.zeros(n)
    l_max = np.zeros(n)
    for ln in lines:
        try:
            j = int(ln["node"])
            p = int(ln["parent"])
        except KeyError as e:
            raise FeederFormatError(f"line entry missing key {e}") from e
        if j in seen:
            raise FeederFormatError(
                f"node {j} lists two parents; not a tree at node {j}")
        if not 1 <= j < n:
            raise FeederFormatError(
                f"node ids must be dense 1..{n - 1}; got line node {j}")
        seen.add(j)
        parent[j] = p
        r[j] = float(ln.get("r_pu", 0.0))
        x[j] = float(ln.get("x_pu", 0.0))
        amp = float(ln.get("ampacity_pu", 10.0))
        l_max[j] = amp * amp

    v_min = np.full(n, vmin_default ** 2)
    v_max = np.full(n, vmax_default ** 2)
    for ov in volt.get("override", []):
        j = int(ov["node"])
        if "v_min_pu" in ov:
            v_min[j] = float(ov["v_min_pu"]) ** 2
        if "v_max_pu" in ov:
            v_max[j] = float(ov["v_max_pu"]) ** 2

    transformers: dict[int, TransformerThermalParams] = {}
    for tf in doc.get("transformers", []):
        j = int(tf["node"])
        if j in transformers:
            raise FeederFormatError(f"transformer {j} defined twice")
        curve = None
        if "aging_rate" in tf:
            curve = AgingCurve(rate=float(tf["aging_rate"]),
                               ref_c=float(tf.get("aging_ref_c", 110.0)),
                               hotspot_gain=float(tf.get("hotspot_gain_c_per_pu2", 0.0)))
        if "alpha" in tf:
            alpha = np.asarray(tf["alpha"], dtype=float)
            beta = np.asarray(tf["beta"], dtype=float)
            gamma = np.asarray(tf["gamma"], dtype=float)
            bps = (np.asarray(tf["breakpoints_c"], dtype=float)
                   if "breakpoints_c" in tf else None)
        elif curve is not None and "breakpoints_c" in tf:
            bps = np.asarray(tf["breakpoints_c"], dtype=float)
            tangents = [curve.tangent(theta) for theta in bps]
            alpha = np.array([a for a, _, _ in tangents])
            beta = np.array([b for _, b, _ in tangents])
            gamma = np.array([g for _, _, g in tangents])
        else:
            raise FeederFormatError(
                f"transformer {j} needs alpha/beta/gamma or an aging curve with breakpoints")
        transformers[j] = TransformerThermalParams(
            alpha=alpha, beta=beta, gamma=gamma,
            epsilon=float(tf["epsilon_c_per_pu2"]),
            delta=float(tf.get("delta", 0.75)),
            h0=float(tf.get("h0_c", 45.0)),
            lol_cost=float(tf.get("lol_cost_per_hour", 0.02)),
            nameplate_kva=float(tf.get("nameplate_kva", 0.0)),
            breakpoints=bps,
            curve=curve,
        )

    load_p = np.zeros((n, horizon))
    load_q = np.zeros((n, horizon))
    for ld in doc.get("loads", []):
        j = int(ld["node"])
        if not 0 <= j < n:
            raise FeederFormatError(f"load references unknown node {j}")
        load_p[j] = _series(ld["p_kw"], horizon, f"loads[{j}].p_kw") / KW_PER_MW / base_mva
        load_q[j] = _series(ld["q_kvar"], horizon, f"loads[{j}].q_kvar") / KW_PER_MW / base_mva

    model = FeederModel(
        name=name, base_mva=base_mva, horizon=horizon, root_voltage=root_voltage,
        parent=parent, r=r, x=x, l_max=l_max, v_min=v_min, v_max=v_max,
        load_p=load_p, load_q=load_q, transformers=transformers,
    )
    validate_radial(model).raise_if_failed()
    return model


def load_feeder(path: str | Path) -> FeederModel:
    return parse_feeder(Path(path).read_text())


def thermal_drive(params: TransformerThermalParams, ambient: np.ndarray) -> np.ndarray:
    """Hourly temperature drive from ambient: zero-load steady state = ambient."""
    return (1.0 - params.delta) * np.asarray(ambient, dtype=float)


def parse_scenario(text: str, model: FeederModel) -> Scenario:
    """Parse a scenario TOML document and bind it to a feeder."""
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise FeederFormatError(f"scenario document is not valid TOML: {e}") from e
    try:
        horizon = int(doc["meta"]["horizon"])
        prices = doc["prices"]
        price_p = _series(prices["energy_usd_per_mwh"], horizon, "prices.energy")
    except KeyError as e:
        raise FeederFormatError(f"scenario document missing section/key {e}") from e
    if "reactive_usd_per_mvarh" in prices:
        price_q = _series(prices["reactive_usd_per_mvarh"], horizon, "prices.reactive")
    else:
        price_q = 0.1 * price_p
    ambient = _series(doc.get("ambient", {}).get("temperature_c", np.full(horizon, 25.0)),
                      horizon, "ambient.temperature_c")

    evs = []
    for ev in doc.get("ev", []):
        hours = np.asarray(ev["hours"], dtype=int) - 1  # files are 1-based
        evs.append(EvParams(
            node=int(ev["node"]),
            hours=hours,
            energy=to_per_unit(float(ev["energy_kwh"]), model.base_mva),
            charge_limit=to_per_unit(float(ev["charger_kw"]), model.base_mva),
            inverter_limit=to_per_unit(float(ev["inverter_kva"]), model.base_mva),
        ))
    pvs = []
    for pv in doc.get("pv", []):
        pvs.append(PvParams(
            node=int(pv["node"]),
            nameplate=to_per_unit(float(pv["nameplate_kva"]), model.base_mva),
            irradiance=_series(pv["irradiance"], horizon, "pv.irradiance"),
        ))

    zeta = {j: thermal_drive(params, ambient)
            for j, params in model.transformers.items()}
    scenario = Scenario(horizon=horizon, price_p=price_p, price_q=price_q,
                        ambient=ambient, evs=tuple(evs), pvs=tuple(pvs), zeta=zeta)
    validate_scenario(scenario, model).raise_if_failed()
    return scenario


def load_scenario(path: str | Path, model: FeederModel) -> Scenario:
    return parse_scenario(Path(path).read_text(), model)


# -- serialization ------------------------------------------------------------


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        f = float(v)
        if math.isinf(f) or math.isnan(f):
            raise ValueError(f"cannot serialize {f}")
        s = repr(f)
        return s if ("." in s or "e" in s or "E" in s) else s + ".0"
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (list, tuple, np.ndarray)):
        return "[" + ", ".join(_toml_value(e) for e in v) + "]"
    raise TypeError(f"cannot serialize {type(v)}")


def _emit_table(out: list[str], header: str, kv: dict) -> None:
    out.append(header)
    for k, v in kv.items():
        if v is not None:
            out.append(f"{k} = {_toml_value(v)}")
    out.append("")


def dump_feeder(model: FeederModel) -> str:
    """Serialize to the feeder TOML schema; parse_feeder round-trips it."""
    out: list[str] = []
    _emit_table(out, "[meta]", {
        "name": model.name, "base_mva": model.base_mva,
        "horizon": model.horizon, "root_voltage_pu": model.root_voltage,
    })
    # limits are uniform in generated models; emit per-node overrides otherwise
    vmin0 = math.sqrt(model.v_min[1])
    vmax0 = math.sqrt(model.v_max[1])
    _emit_table(out, "[voltage]", {"v_min_pu": vmin0, "v_max_pu": vmax0})
    overrides = [j for j in range(model.n_nodes)
                 if abs(model.v_min[j] - vmin0 ** 2) > 1e-15
                 or abs(model.v_max[j] - vmax0 ** 2) > 1e-15]
    for j in overrides:
        _emit_table(out, "[[voltage.override]]", {
            "node": j, "v_min_pu": math.sqrt(model.v_min[j]),
            "v_max_pu": math.sqrt(model.v_max[j]),
        })
    for j in model.lines:
        _emit_table(out, "[[lines]]", {
            "node": j, "parent": int(model.parent[j]),
            "r_pu": model.r[j], "x_pu": model.x[j],
            "ampacity_pu": math.sqrt(model.l_max[j]),
        })
    for j in model.transformer_ids:
        tf = model.transformers[j]
        kv = {
            "node": j, "nameplate_kva": tf.nameplate_kva,
            "delta": tf.delta, "epsilon_c_per_pu2": tf.epsilon,
            "h0_c": tf.h0, "lol_cost_per_hour": tf.lol_cost,
            "alpha": tf.alpha, "beta": tf.beta, "gamma": tf.gamma,
        }
        if tf.breakpoints is not None:
            kv["breakpoints_c"] = tf.breakpoints
        if tf.curve is not None:
            kv["aging_rate"] = tf.curve.rate
            kv["aging_ref_c"] = tf.curve.ref_c
            kv["hotspot_gain_c_per_pu2"] = tf.curve.hotspot_gain
        _emit_table(out, "[[transformers]]", kv)
    scale = KW_PER_MW * model.base_mva
    for j in range(model.n_nodes):
        if np.any(model.load_p[j] != 0) or np.any(model.load_q[j] != 0):
            _emit_table(out, "[[loads]]", {
                "node": j,
                "p_kw": model.load_p[j] * scale,
                "q_kvar": model.load_q[j] * scale,
            })
    return "\n".join(out)


def dump_scenario(scenario: Scenario, base_mva: float) -> str:
    out: list[str] = []
    _emit_table(out, "[meta]", {"horizon": scenario.horizon})
    _emit_table(out, "[prices]", {
        "energy_usd_per_mwh": scenario.price_p,
        "reactive_usd_per_mvarh": scenario.price_q,
    })
    _emit_table(out, "[ambient]", {"temperature_c": scenario.ambient})
    scale = KW_PER_MW * base_mva
    for ev in scenario.evs:
        _emit_table(out, "[[ev]]", {
            "node": ev.node,
            "hours": (ev.hours + 1).tolist(),
            "energy_kwh": ev.energy * scale,
            "charger_kw": ev.charge_limit * scale,
            "inverter_kva": ev.inverter_limit * scale,
        })
    for pv in scenario.pvs:
        _emit_table(out, "[[pv]]", {
            "node": pv.node,
            "nameplate_kva": pv.nameplate * scale,
            "irradiance": pv.irradiance,
        })
    return "\n".join(out)
