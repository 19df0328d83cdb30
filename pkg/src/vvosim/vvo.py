"""Volt/VAR optimization: cost model, setpoint search and CVR factor.

The controller minimizes grid-loss cost plus device operating costs (tap
moves, capacitor steps, inverter reactive support) subject to the ANSI
voltage band, regulator ratio limits and the inverter capability curve.
Regulator taps and capacitor steps are searched exhaustively inside a
±``radius`` box around the present position; each inverter's Volt/VAR
plateau is tuned by golden-section search for every discrete candidate.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping

import numpy as np

from .feeder import FeederModel, VoltVarCurve
from .powerflow import OperatingPoint, PowerFlowSolution, SweepProblem, zip_power

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


class VvoError(ValueError):
    pass


@dataclass(frozen=True)
class PriceBook:
    c_energy: float = 0.20     # $/kWh
    c_vr_step: float = 0.05    # $/tap change
    c_cb_step: float = 0.0     # $/capacitor step change
    c_grid: float = 0.20       # $/kVArh reactive incentive

    def __post_init__(self):
        for name in ("c_energy", "c_vr_step", "c_cb_step", "c_grid"):
            if getattr(self, name) < 0:
                raise VvoError(f"price {name} must be non-negative")


@dataclass(frozen=True)
class VvoSetpoints:
    taps: Mapping[str, int] = field(default_factory=dict)
    cap_steps: Mapping[str, int] = field(default_factory=dict)
    curves: Mapping[str, VoltVarCurve] = field(default_factory=dict)
    objective_value: float = 0.0
    feasible: bool = True
    status: str = "OK"          # OK | INFEASIBLE | STALE
    v_pred_min: float = float("nan")
    v_pred_max: float = float("nan")

    @classmethod
    def from_model(cls, model: FeederModel) -> "VvoSetpoints":
        return cls(
            taps={r.id: r.tap for r in model.regulators},
            cap_steps={c.id: c.step for c in model.capacitors},
            curves={i.id: i.curve for i in model.inverters},
        )


@dataclass
class MeasurementSet:
    """Controller's view of the feeder at one control instant.

    ``buses`` maps bus id to (v p.u., p kW, q kVAr) of the metered load;
    ``taps``/``cap_steps`` are device position readbacks and ``pv`` maps an
    inverter id to (available kW, delivered kVAr).
    """

    timestamp: float
    buses: Mapping[int, tuple[float, float, float]]
    staleness: float = 0.0
    taps: Mapping[str, float] = field(default_factory=dict)
    cap_steps: Mapping[str, float] = field(default_factory=dict)
    pv: Mapping[str, tuple[float, float]] = field(default_factory=dict)
    stale: bool = False
    control_period: float = 900.0

    def __post_init__(self):
        if self.staleness < 0:
            raise VvoError("staleness must be non-negative")

    @property
    def degraded(self) -> bool:
        return self.stale or self.staleness > self.control_period


@dataclass(frozen=True)
class VvoConfig:
    cvr_mode: bool = False
    cvr_v_max: float = 0.98
    cvr_weight: float = 10.0    # $ per p.u. per bus above the CVR target
    v_min: float = 0.95
    v_max: float = 1.05
    radius: int = 4
    q_tol: float = 1e-3
    dt_hours: float = 0.25
    bias_correction: bool = True


def objective(
    model: FeederModel,
    sp_prev: VvoSetpoints,
    sp_cand: VvoSetpoints,
    pf: PowerFlowSolution,
    prices: PriceBook,
    dt: float,
) -> float:
    """Operating cost in $ of moving from ``sp_prev`` to ``sp_cand`` for ``dt`` hours."""
    return sum(cost_terms(model, sp_prev, sp_cand, pf, prices, dt).values())


def cost_terms(model, sp_prev, sp_cand, pf, prices, dt) -> dict[str, float]:
    if not pf.converged:
        raise VvoError("objective needs a converged power flow")
    dtap, dstep = _moves(model, sp_prev.taps, sp_prev.cap_steps, sp_cand.taps, sp_cand.cap_steps)
    q = sum(abs(v) for v in pf.q_pvsi.values())
    return {
        "loss": prices.c_energy * pf.loss_kw * dt,
        "vr": prices.c_vr_step * dtap,
        "cb": prices.c_cb_step * dstep,
        "pvsi": prices.c_grid * q * dt,
    }


def _moves(model, taps0, steps0, taps1, steps1) -> tuple[int, int]:
    dtap = sum(abs(taps1.get(r.id, r.tap) - taps0.get(r.id, r.tap)) for r in model.regulators)
    dstep = sum(abs(steps1.get(c.id, c.step) - steps0.get(c.id, c.step)) for c in model.capacitors)
    return dtap, dstep


def _cost_sum(model, taps0, steps0, taps1, steps1, loss_kw, q_kvar, prices, dt) -> float:
    # same terms and summation order as cost_terms()
    dtap, dstep = _moves(model, taps0, steps0, taps1, steps1)
    return sum((
        prices.c_energy * loss_kw * dt,
        prices.c_vr_step * dtap,
        prices.c_cb_step * dstep,
        prices.c_grid * sum(q_kvar) * dt,
    ))


def golden_section(f: Callable[[float], float], lo: float, hi: float, tol: float) -> list[tuple[float, float]]:
    """Golden-section search; returns every (x, f(x)) evaluated, in order."""
    evals = []

    def g(x):
        y = f(x)
        evals.append((x, y))
        return y

    a, b = lo, hi
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = g(c), g(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = g(c)
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = g(d)
    return evals


# --- measurement handling ------------------------------------------------------

def _valid(x) -> bool:
    return x is not None and math.isfinite(x)


def estimate_operating_point(model: FeederModel, meas: MeasurementSet, sp_prev: VvoSetpoints) -> OperatingPoint:
    """Per-load multipliers and PV availability inferred from meter data."""
    by_bus: dict[int, list] = {}
    for ld in model.loads:
        by_bus.setdefault(ld.bus, []).append(ld)
    mult: dict[str, float] = {}
    for bus, loads in by_bus.items():
        rec = meas.buses.get(bus)
        m = 1.0
        if rec is not None and _valid(rec[0]) and rec[0] > 0 and _valid(rec[1]):
            v, p, q = rec
            p_nom = sum(zip_power(ld, v)[0] for ld in loads)
            q_nom = sum(zip_power(ld, v)[1] for ld in loads)
            if p_nom > 1e-9:
                m = max(p, 0.0) / p_nom
            elif q_nom > 1e-9 and _valid(q):
                m = max(q, 0.0) / q_nom
        for ld in loads:
            mult[ld.name or f"{ld.bus}"] = m
    p_avail = {}
    for inv in model.inverters:
        rec = meas.pv.get(inv.id)
        p = inv.p_avail
        if rec is not None and _valid(rec[0]):
            p = min(max(rec[0], 0.0), inv.s_rating)
        p_avail[inv.id] = p
    return OperatingPoint(
        time=meas.timestamp,
        p_avail_pvsi=p_avail,
        taps=dict(sp_prev.taps),
        cap_steps=dict(sp_prev.cap_steps),
        curves=dict(sp_prev.curves),
        load_mult=mult,
    )


class _Evaluator:
    """Scores candidates on one prepared sweep problem; memoizes by candidate."""

    def __init__(self, model: FeederModel, op: OperatingPoint, sp_prev: VvoSetpoints,
                 prices: PriceBook, cfg: VvoConfig):
        self.model = model
        self.prob = SweepProblem(model, op)
        self.sp_prev = sp_prev
        self.prices = prices
        self.cfg = cfg
        self.metered = np.array([b.meter for b in model.buses])
        self.v_lo = np.array([max(b.v_min, cfg.v_min) for b in model.buses])
        self.v_hi = np.array([min(b.v_max, cfg.v_max) for b in model.buses])
        self.bias = np.zeros(len(model.buses))
        self.n_calls = 0
        self._memo: dict = {}

    def raw(self, taps, curves):
        self.n_calls += 1
        return self.prob.run(self.prob.ratios(taps), self.prob.curve_params(curves))

    def score(self, taps, steps, curves):
        """(violation p.u., objective $, raw sweep) for one candidate."""
        key = (tuple(sorted(taps.items())), tuple(sorted(steps.items())),
               tuple((k, curves[k]) for k in sorted(curves)))
        hit = self._memo.get(key)
        if hit is not None:
            return hit
        raw = self.raw(taps, curves)
        vr, vi, jr, ji, inv_q, _, converged, _ = raw
        if not converged:
            out = (math.inf, math.inf, raw)
        else:
            v = np.hypot(vr, vi) + self.bias
            viol = float(np.sum(np.maximum(self.v_lo - v, 0.0) + np.maximum(v - self.v_hi, 0.0)))
            q_kvar = [abs(float(q)) * self.prob.base for q in inv_q]
            q_kvar += [abs(float(self.prob.op.q_pvsi[i.id])) for i in self.model.inverters
                       if i.id not in self.prob.curve_ids]
            obj = _cost_sum(self.model, self.sp_prev.taps, self.sp_prev.cap_steps, taps, steps,
                            self.prob.loss_kw(jr, ji), q_kvar, self.prices, self.cfg.dt_hours)
            if self.cfg.cvr_mode:
                obj += self.cfg.cvr_weight * float(np.sum(np.maximum(v[self.metered] - self.cfg.cvr_v_max, 0.0)))
            out = (viol, obj, raw)
        self._memo[key] = out
        return out


def solve_vvo(
    model: FeederModel,
    meas: MeasurementSet,
    sp_prev: VvoSetpoints,
    prices: PriceBook,
    config: VvoConfig | None = None,
) -> VvoSetpoints:
    """Optimal setpoints for the next control period.

    Degraded measurements return ``sp_prev`` unchanged with status STALE.
    When no candidate satisfies the voltage band the least-violating one is
    returned with ``feasible=False``.
    """
    cfg = config or VvoConfig()
    if meas.degraded:
        return replace(sp_prev, feasible=False, status="STALE")

    sp_prev = _normalized_prev(model, sp_prev)
    op = estimate_operating_point(model, meas, sp_prev)
    ev = _Evaluator(model, op, sp_prev, prices, cfg)
    ids = model.bus_ids

    if cfg.bias_correction and meas.buses:
        vr, vi, _, _, _, _, converged, _ = ev.raw(sp_prev.taps, sp_prev.curves)
        if converged:
            now = np.hypot(vr, vi)
            for k, b in enumerate(ids):
                rec = meas.buses.get(b)
                if rec is not None and _valid(rec[0]) and rec[0] > 0:
                    ev.bias[k] = rec[0] - now[k]

    inv_idx = [ev.prob.topo.index[i.bus] for i in model.inverters]

    def in_deadband(raw, curves, k, inv):
        vr, vi = raw[0], raw[1]
        v = math.hypot(vr[inv_idx[k]], vi[inv_idx[k]])
        c = curves[inv.id]
        return raw[6] and c.v2 < v < c.v3

    def tune_curves(taps, steps):
        """Per-inverter golden-section on q_max_frac, coordinate-wise."""
        curves = dict(sp_prev.curves)
        best = ev.score(taps, steps, curves)
        for k, inv in enumerate(model.inverters):
            base_curve = curves[inv.id]
            # inside the deadband Q is zero whatever the plateau height
            if in_deadband(best[2], curves, k, inv):
                continue

            def with_q(q):
                c = dict(curves)
                c[inv.id] = replace(base_curve, q_max_frac=q)
                return c

            def f(q):
                s = ev.score(taps, steps, with_q(q))
                return s[0] * 1e6 + s[1]

            trial = golden_section(f, 0.0, 0.6, cfg.q_tol)
            points = {round(x, 12) for x, _ in trial}
            points |= {0.0, 0.6, base_curve.q_max_frac}
            q_prev = base_curve.q_max_frac
            ranked = []
            for q in sorted(points):
                s = ev.score(taps, steps, with_q(q))
                ranked.append((_bucket(s[0]), s[1], abs(q - q_prev), q, s))
            ranked.sort(key=lambda r: r[:4])
            curves = with_q(ranked[0][3])
            best = ranked[0][4]
        return curves, best

    axes = []
    for r in model.regulators:
        t0 = int(sp_prev.taps[r.id])
        axes.append(range(max(r.tap_min, t0 - cfg.radius), min(r.tap_max, t0 + cfg.radius) + 1))
    for c in model.capacitors:
        s0 = int(sp_prev.cap_steps[c.id])
        axes.append(range(max(0, s0 - cfg.radius), min(c.n_steps, s0 + cfg.radius) + 1))
    n_reg = len(model.regulators)

    best_key = None
    best = None
    for combo in itertools.product(*axes):
        taps = {r.id: combo[k] for k, r in enumerate(model.regulators)}
        steps = {c.id: combo[n_reg + k] for k, c in enumerate(model.capacitors)}
        curves, (viol, obj, raw) = tune_curves(taps, steps)
        moves = sum(abs(combo[k] - int(sp_prev.taps[r.id])) for k, r in enumerate(model.regulators))
        key = (_bucket(viol), obj, moves, combo)
        if best_key is None or key < best_key:
            best_key = key
            best = (taps, steps, curves, viol, obj, raw)

    taps, steps, curves, viol, obj, raw = best
    feasible = _bucket(viol) == 0 and math.isfinite(obj)
    v = np.hypot(raw[0], raw[1]) + ev.bias
    return VvoSetpoints(
        taps=taps,
        cap_steps=steps,
        curves=curves,
        objective_value=obj,
        feasible=feasible,
        status="OK" if feasible else "INFEASIBLE",
        v_pred_min=float(v.min()),
        v_pred_max=float(v.max()),
    )


def _bucket(viol: float) -> int:
    """Violation quantized to 1e-9 p.u. so float noise cannot reorder candidates."""
    if not math.isfinite(viol):
        return 1 << 62
    return int(round(viol * 1e9))


def _normalized_prev(model: FeederModel, sp: VvoSetpoints) -> VvoSetpoints:
    taps = {}
    for r in model.regulators:
        t = sp.taps.get(r.id, r.tap)
        taps[r.id] = int(min(max(round(t), r.tap_min), r.tap_max))
    steps = {}
    for c in model.capacitors:
        s = sp.cap_steps.get(c.id, c.step)
        steps[c.id] = int(min(max(round(s), 0), c.n_steps))
    curves = {i.id: sp.curves.get(i.id, i.curve) for i in model.inverters}
    return replace(sp, taps=taps, cap_steps=steps, curves=curves)


# --- CVR factor -------------------------------------------------------------------

def cvr_factor(baseline, cvr_run) -> float | None:
    """Percent energy saved divided by percent voltage reduction, vs ``baseline``.

    Both arguments are :class:`~vvosim.report.ScenarioReport`. Returns None when
    the voltage reduction is zero (0/0 is not a factor).
    """
    if baseline.duration != cvr_run.duration:
        raise VvoError("cvr_factor needs runs over identical spans")
    e0, e1 = baseline.total_operational_cost, cvr_run.total_operational_cost
    v0, v1 = baseline.mean_voltage, cvr_run.mean_voltage
    if not (v0 > 0) or abs(v0 - v1) < 1e-12 or e0 <= 0:
        return None
    pct_e = 100.0 * (e0 - e1) / e0
    pct_v = 100.0 * (v0 - v1) / v0
    return pct_e / pct_v
