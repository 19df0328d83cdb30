"""Radial power flow by backward/forward sweep (current summation).

Regulators are ideal ratio devices at the sending end of their line, ZIP loads
are evaluated at the present iterate, and smart inverters either inject a
fixed Q or follow their Volt/VAR curve self-consistently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import _kernels
from .feeder import FeederModel, PvSmartInverter, VoltVarCurve, ZipLoad

DEFAULT_TOL = 1e-6
DEFAULT_MAX_ITER = 100


@dataclass
class OperatingPoint:
    """Everything that varies between solves of the same feeder.

    Device entries left out fall back to the model's own state. A ``None`` in
    ``q_pvsi`` (the default) means the inverter follows its Volt/VAR curve.
    """

    time: float = 0.0
    load_scale: float = 1.0
    p_avail_pvsi: Mapping[str, float] = field(default_factory=dict)
    taps: Mapping[str, int] = field(default_factory=dict)
    cap_steps: Mapping[str, int] = field(default_factory=dict)
    q_pvsi: Mapping[str, float | None] = field(default_factory=dict)
    curves: Mapping[str, VoltVarCurve] = field(default_factory=dict)
    load_mult: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.load_scale < 0:
            raise ValueError(f"load_scale must be non-negative, got {self.load_scale}")


@dataclass
class PowerFlowSolution:
    bus_ids: tuple[int, ...]
    v: np.ndarray                  # |V| per bus, model.buses order
    angle: np.ndarray              # rad
    i_line: np.ndarray             # |I| per line, model.lines order
    loss_kw: float
    p_sub_kw: float                # substation injection
    q_sub_kvar: float
    load_kw: float                 # sum of ZIP load P at solved voltages
    load_kvar: float
    p_pvsi: dict[str, float]
    q_pvsi: dict[str, float]
    converged: bool
    iterations: int
    history: np.ndarray            # max |dV| per iteration
    bus_load_kw: np.ndarray = None
    bus_load_kvar: np.ndarray = None
    loss_kvar: float = 0.0
    cap_kvar: float = 0.0          # capacitor bank injection
    base_kva: float = 1000.0

    def v_at(self, bus_id: int) -> float:
        return float(self.v[self.bus_ids.index(bus_id)])

    @property
    def v_min(self) -> float:
        return float(self.v.min())

    @property
    def v_max(self) -> float:
        return float(self.v.max())

    @property
    def mismatch(self) -> float:
        return float(self.history[self.iterations - 1]) if self.iterations else 0.0

    @property
    def balance_residual(self) -> float:
        """Largest of the P and Q power-balance errors, in p.u."""
        dp = self.p_sub_kw + sum(self.p_pvsi.values()) - self.load_kw - self.loss_kw
        dq = self.q_sub_kvar + sum(self.q_pvsi.values()) + self.cap_kvar - self.load_kvar - self.loss_kvar
        return max(abs(dp), abs(dq)) / self.base_kva


def zip_power(load: ZipLoad, v: float) -> tuple[float, float]:
    """(kW, kVAr) drawn by ``load`` at voltage ``v`` p.u."""
    if v <= 0:
        raise ValueError(f"voltage must be positive, got {v}")
    f = load.z_frac * v * v + load.i_frac * v + load.p_frac
    return load.p0 * f, load.q0 * f


def volt_var_q(curve: VoltVarCurve, v: float, inv: PvSmartInverter, p: float | None = None) -> float:
    """Inverter reactive output in kVAr (positive = injected).

    Follows the piecewise-linear curve, then caps |Q| by the apparent-power
    circle and by 60 % of the rating.
    """
    p = inv.p_avail if p is None else p
    s = inv.s_rating
    q = curve.q_frac(v) * s
    cap = min(0.6 * s, math.sqrt(max(s * s - p * p, 0.0)))
    return max(-cap, min(cap, q))


class _Topology:
    """Index arrays for one feeder model; cached per model instance."""

    def __init__(self, model: FeederModel):
        ids = model.bus_ids
        self.index = {b: k for k, b in enumerate(ids)}
        parents = model.parents()
        # BFS order: parents() was filled breadth-first from the substation
        order = [self.index[model.substation]] + [self.index[b] for b in parents]
        self.order = np.array(order, dtype=np.int64)
        n = len(ids)
        self.parent = np.full(n, -1, dtype=np.int64)
        for child, par in parents.items():
            self.parent[self.index[child]] = self.index[par]
        self.zr = np.zeros(n)
        self.zx = np.zeros(n)
        self.line_child = np.zeros(len(model.lines), dtype=np.int64)
        for li, ln in enumerate(model.lines):
            if parents.get(ln.to_bus) == ln.from_bus:
                child = ln.to_bus
            else:
                child = ln.from_bus
            c = self.index[child]
            self.zr[c] = ln.r
            self.zx[c] = ln.x
            self.line_child[li] = c
        self.reg_child = {r.id: self.index[r.line[1]] for r in model.regulators}
        self.load_bus = np.array([self.index[ld.bus] for ld in model.loads], dtype=np.int64)
        self.n = n


_TOPO_CACHE: dict[int, tuple[FeederModel, _Topology]] = {}


def topology(model: FeederModel) -> _Topology:
    hit = _TOPO_CACHE.get(id(model))
    if hit is not None and hit[0] is model:
        return hit[1]
    topo = _Topology(model)
    if len(_TOPO_CACHE) > 64:
        _TOPO_CACHE.clear()
    _TOPO_CACHE[id(model)] = (model, topo)
    return topo


class SweepProblem:
    """Arrays for repeated sweeps of one (model, operating point).

    Only regulator ratios and inverter curve parameters change between
    ``run`` calls; loads, PV output and capacitor states are frozen here.
    """

    def __init__(self, model: FeederModel, op: OperatingPoint | None = None):
        op = op or OperatingPoint()
        self.model = model
        self.op = op
        topo = self.topo = topology(model)
        n = topo.n
        base = self.base = model.base_kva

        self.ratio = self.ratios(op.taps)
        coef = np.zeros((6, n))
        for k, ld in enumerate(model.loads):
            m = op.load_scale * op.load_mult.get(ld.name, 1.0) / base
            b = topo.load_bus[k]
            coef[0, b] += ld.p0 * ld.z_frac * m
            coef[1, b] += ld.p0 * ld.i_frac * m
            coef[2, b] += ld.p0 * ld.p_frac * m
            coef[3, b] += ld.q0 * ld.z_frac * m
            coef[4, b] += ld.q0 * ld.i_frac * m
            coef[5, b] += ld.q0 * ld.p_frac * m
        self.load_coef = coef.copy()
        for c in model.capacitors:
            step = op.cap_steps.get(c.id, c.step)
            coef[3, topo.index[c.bus]] -= step * c.step_kvar / base
        self.coef = coef

        self.pg = np.zeros(n)
        self.qg = np.zeros(n)
        self.p_pv: dict[str, float] = {}
        self.curve_ids: list[str] = []
        rows = []
        buses = []
        for inv in model.inverters:
            b = topo.index[inv.bus]
            p = min(op.p_avail_pvsi.get(inv.id, inv.p_avail), inv.s_rating)
            self.p_pv[inv.id] = p
            self.pg[b] += p / base
            q = op.q_pvsi.get(inv.id)
            if q is None:
                self.curve_ids.append(inv.id)
                buses.append(b)
                rows.append(self._curve_row(inv, op.curves.get(inv.id, inv.curve)))
            else:
                self.qg[b] += q / base
        self.inv_bus = np.array(buses, dtype=np.int64)
        self.inv_par = np.array(rows, dtype=float).reshape(len(rows), 7)
        self._inv = {inv.id: inv for inv in model.inverters}

    def ratios(self, taps: Mapping[str, int]) -> np.ndarray:
        ratio = np.ones(self.topo.n)
        for r in self.model.regulators:
            ratio[self.topo.reg_child[r.id]] = 1.0 + taps.get(r.id, r.tap) * r.step_ratio
        return ratio

    def _curve_row(self, inv: PvSmartInverter, curve: VoltVarCurve) -> tuple:
        p = self.p_pv[inv.id]
        return (inv.s_rating / self.base, p / self.base, curve.v1, curve.v2,
                curve.v3, curve.v4, curve.q_max_frac)

    def curve_params(self, curves: Mapping[str, VoltVarCurve]) -> np.ndarray:
        par = self.inv_par.copy()
        for k, iid in enumerate(self.curve_ids):
            c = curves.get(iid)
            if c is not None:
                par[k] = self._curve_row(self._inv[iid], c)
        return par

    def run(self, ratio: np.ndarray | None = None, inv_par: np.ndarray | None = None,
            tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER):
        """Raw sweep; returns (vr, vi, jr, ji, inv_q, iterations, converged, history)."""
        topo = self.topo
        ratio = self.ratio if ratio is None else ratio
        inv_par = self.inv_par if inv_par is None else inv_par
        n = topo.n
        # flat start through the regulator ratios
        vr = np.empty(n)
        vi = np.zeros(n)
        vr[topo.order[0]] = self.model.source_voltage
        for k in topo.order[1:]:
            vr[k] = vr[topo.parent[k]] * ratio[k]
        jr = np.zeros(n)
        ji = np.zeros(n)
        inv_q = np.zeros(len(inv_par))
        history = np.zeros(max_iter)
        c = self.coef
        it, converged = _kernels.sweep(
            topo.order, topo.parent, topo.zr, topo.zx, ratio,
            c[0], c[1], c[2], c[3], c[4], c[5], self.pg, self.qg,
            self.inv_bus, inv_par, float(self.model.source_voltage), float(tol), int(max_iter),
            vr, vi, jr, ji, inv_q, history,
        )
        return vr, vi, jr, ji, inv_q, int(it), bool(converged), history[:it]

    def loss_kw(self, jr: np.ndarray, ji: np.ndarray) -> float:
        return float(np.sum((jr * jr + ji * ji) * self.topo.zr)) * self.base

    def solution(self, raw) -> PowerFlowSolution:
        vr, vi, jr, ji, inv_q, it, converged, history = raw
        topo = self.topo
        base = self.base
        model = self.model
        vm = np.hypot(vr, vi)
        jm2 = jr * jr + ji * ji
        root = topo.order[0]
        p_sub = float(vr[root] * jr[root] + vi[root] * ji[root]) * base
        q_sub = float(vi[root] * jr[root] - vr[root] * ji[root]) * base
        v2 = vm * vm
        lc = self.load_coef
        bus_p = (lc[0] * v2 + lc[1] * vm + lc[2]) * base
        bus_q = (lc[3] * v2 + lc[4] * vm + lc[5]) * base
        q_pv = {iid: float(inv_q[k]) * base for k, iid in enumerate(self.curve_ids)}
        for inv in model.inverters:
            if inv.id not in q_pv:
                q_pv[inv.id] = float(self.op.q_pvsi[inv.id])
        return PowerFlowSolution(
            bus_ids=tuple(model.bus_ids),
            v=vm,
            angle=np.arctan2(vi, vr),
            i_line=np.sqrt(jm2[topo.line_child]),
            loss_kw=float(np.sum(jm2 * topo.zr)) * base,
            p_sub_kw=p_sub,
            q_sub_kvar=q_sub,
            load_kw=float(bus_p.sum()),
            load_kvar=float(bus_q.sum()),
            p_pvsi=dict(self.p_pv),
            q_pvsi={inv.id: q_pv[inv.id] for inv in model.inverters},
            converged=converged,
            iterations=it,
            history=history.copy(),
            bus_load_kw=bus_p,
            bus_load_kvar=bus_q,
            loss_kvar=float(np.sum(jm2 * topo.zx)) * base,
            cap_kvar=float(np.sum((lc[3] - self.coef[3]) * v2)) * base,
            base_kva=base,
        )


def solve(
    model: FeederModel,
    op: OperatingPoint | None = None,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> PowerFlowSolution:
    """Solve the feeder at ``op``. Divergence is reported via ``converged=False``."""
    prob = SweepProblem(model, op)
    return prob.solution(prob.run(tol=tol, max_iter=max_iter))
