"""Discrete-event co-simulation of plant, DNP3 associations, channel and VVO.

Events are ordered by (time, priority, insertion order). Priorities put
attack-window edges first, then profile steps, frame deliveries, request
timeouts, meter samples and finally control cycles.
"""

from __future__ import annotations

import csv
import heapq
import json
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np

from . import dnp3
from .attack import Channel, DosAttack, ModpAttack, attack_from_dict, attack_to_dict
from .dnp3 import ControlStatus, Diagnostic, Master, Outstation
from .feeder import FeederError, FeederModel, VoltVarCurve, build_ieee34_modified, load_feeder
from .powerflow import OperatingPoint, PowerFlowSolution, solve, volt_var_q
from .vvo import MeasurementSet, PriceBook, VvoConfig, VvoSetpoints, solve_vvo

ATTACK_EDGE = 0
PROFILE_STEP = 1
DELIVERY = 2
TIMEOUT = 3
METER = 4
CONTROL = 5

OUTSTATION_BASE = 100

# physical limits of the inverter's curve registers: v2, v3, q_max_frac, slope
_CURVE_LIMITS = ((0.90, 1.00), (1.00, 1.10), (0.0, 0.6), (0.0, 1000.0))


class ScenarioError(ValueError):
    pass


# --- profiles -------------------------------------------------------------------------

@dataclass(frozen=True)
class Profile:
    """Piecewise-constant series; each value holds from its time to the next."""

    times: tuple[float, ...]
    values: tuple[float, ...]
    segments: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.times:
            raise ScenarioError("profile is empty")
        if self.times[0] != 0:
            raise ScenarioError(f"profile must start at time 0, starts at {self.times[0]}")
        if any(b <= a for a, b in zip(self.times, self.times[1:])):
            raise ScenarioError("profile times must be strictly increasing")
        if any(not math.isfinite(v) or v < 0 for v in self.values):
            raise ScenarioError("profile values must be finite and non-negative")

    def _index(self, t: float) -> int:
        lo, hi = 0, len(self.times) - 1
        while lo < hi:
            mid = (lo + hi + 1) // 2
            if self.times[mid] <= t:
                lo = mid
            else:
                hi = mid - 1
        return lo

    def value_at(self, t: float) -> float:
        return self.values[self._index(t)]

    def segment_at(self, t: float) -> str:
        return self.segments[self._index(t)] if self.segments else ""


def read_profile(path: str | Path, value_column: str) -> Profile:
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            cols = reader.fieldnames or []
            if "time_s" not in cols or value_column not in cols:
                raise ScenarioError(f"{path}: need columns time_s and {value_column}, found {cols}")
            times, values, segs = [], [], []
            for lineno, row in enumerate(reader, start=2):
                try:
                    times.append(float(row["time_s"]))
                    values.append(float(row[value_column]))
                except (TypeError, ValueError) as exc:
                    raise ScenarioError(f"{path}:{lineno}: {exc}") from None
                if "segment" in cols:
                    segs.append((row["segment"] or "").strip())
    except OSError as exc:
        raise ScenarioError(f"cannot read profile {path}: {exc}") from None
    return Profile(tuple(times), tuple(values), tuple(segs))


# --- config ---------------------------------------------------------------------------

BUILTIN = "builtin:"


def data_path(name: str) -> Path:
    """Path of a file shipped in the package's data directory."""
    return Path(str(resources.files("vvosim") / "data" / name))


def _resolve(ref: str, base_dir: Path) -> Path:
    if ref.startswith(BUILTIN):
        return data_path(ref[len(BUILTIN):])
    p = Path(ref)
    return p if p.is_absolute() else base_dir / p


@dataclass
class ScenarioConfig:
    name: str = "scenario"
    feeder: str = "builtin:ieee34.json"
    load_profile: str = "builtin:load_24h.csv"
    pv_profile: str = "builtin:pv_24h.csv"
    prices: PriceBook = field(default_factory=PriceBook)
    cvr_mode: bool = False
    vvo: dict = field(default_factory=dict)
    control_period: float = 900.0
    metering_period: float = 60.0
    duration: float = 86400.0
    attacks: list = field(default_factory=list)
    seed: int = 0
    latency_ms: float = 5.0
    poll_timeout: float = 2.0
    # bus V/P/Q handed to the VVO are means over polls in the trailing window
    # (None: one control period, 0: latest poll only)
    measurement_window: float | None = None
    events: list = field(default_factory=list)
    initial_taps: dict = field(default_factory=dict)
    base_dir: Path = field(default_factory=Path.cwd)

    def __post_init__(self):
        for name in ("control_period", "metering_period", "duration"):
            if not getattr(self, name) > 0 and name != "duration":
                raise ScenarioError(f"{name} must be positive")
        if self.duration < 0:
            raise ScenarioError("duration must be non-negative")
        ratio = self.control_period / self.metering_period
        if abs(ratio - round(ratio)) > 1e-9:
            raise ScenarioError("control_period must be a multiple of metering_period")
        if 0 < self.duration < self.control_period:
            raise ScenarioError("duration must cover at least one control period")
        if self.poll_timeout <= 0:
            raise ScenarioError("poll_timeout must be positive")
        if self.measurement_window is None:
            self.measurement_window = self.control_period
        if self.measurement_window < 0:
            raise ScenarioError("measurement_window must be non-negative")
        if 2 * self.latency_ms / 1000.0 >= self.poll_timeout:
            raise ScenarioError("round-trip latency must be shorter than poll_timeout")
        known = set(VvoConfig.__dataclass_fields__) - {"cvr_mode", "dt_hours"}
        bad = set(self.vvo) - known
        if bad:
            raise ScenarioError(f"unknown vvo options: {sorted(bad)}")
        for ev in self.events:
            if ev.get("type") != "load_step" or "time" not in ev or "load" not in ev:
                raise ScenarioError(f"bad event {ev!r}: need type=load_step, time, load, factor")
        self.attacks = [a if isinstance(a, (ModpAttack, DosAttack)) else attack_from_dict(a)
                        for a in self.attacks]

    @property
    def vvo_config(self) -> VvoConfig:
        return VvoConfig(cvr_mode=self.cvr_mode, dt_hours=self.control_period / 3600.0, **self.vvo)

    def feeder_path(self) -> Path:
        return _resolve(self.feeder, self.base_dir)

    def load_profile_path(self) -> Path:
        return _resolve(self.load_profile, self.base_dir)

    def pv_profile_path(self) -> Path:
        return _resolve(self.pv_profile, self.base_dir)

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "feeder": self.feeder,
            "load_profile": self.load_profile,
            "pv_profile": self.pv_profile,
            "prices": dict(vars(self.prices)),
            "cvr_mode": self.cvr_mode,
            "vvo": dict(self.vvo),
            "control_period": self.control_period,
            "metering_period": self.metering_period,
            "duration": self.duration,
            "attacks": [attack_to_dict(a) for a in self.attacks],
            "seed": self.seed,
            "latency_ms": self.latency_ms,
            "poll_timeout": self.poll_timeout,
            "measurement_window": self.measurement_window,
            "events": list(self.events),
            "initial_taps": dict(self.initial_taps),
        }


_CONFIG_KEYS = set(ScenarioConfig.__dataclass_fields__) - {"base_dir"}


def config_from_dict(data: dict, base_dir: str | Path = ".") -> ScenarioConfig:
    if not isinstance(data, dict):
        raise ScenarioError("scenario config must be a JSON object")
    unknown = set(data) - _CONFIG_KEYS
    if unknown:
        raise ScenarioError(f"unknown config keys: {sorted(unknown)}")
    kw = dict(data)
    try:
        kw["prices"] = PriceBook(**data.get("prices", {}))
    except TypeError as exc:
        raise ScenarioError(f"prices: {exc}") from None
    for i, a in enumerate(kw.get("attacks", [])):
        if not isinstance(a, dict):
            raise ScenarioError(f"attacks[{i}] must be an object")
    try:
        return ScenarioConfig(base_dir=Path(base_dir), **kw)
    except (TypeError, ValueError) as exc:
        raise ScenarioError(str(exc)) from None


def load_config(path: str | Path) -> ScenarioConfig:
    if isinstance(path, str) and path.startswith(BUILTIN):
        path = data_path(path[len(BUILTIN):])
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ScenarioError(f"cannot read config {path}: {exc}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    return config_from_dict(data, path.parent)


# --- plant ----------------------------------------------------------------------------

class Plant:
    """Physical feeder state: taps, curves, profiles, held inverter Q."""

    def __init__(self, model: FeederModel, initial_taps: dict | None = None):
        self.model = model
        self.taps = {r.id: r.tap for r in model.regulators}
        for rid, tap in (initial_taps or {}).items():
            r = model.regulator(rid)
            self.taps[rid] = int(min(max(tap, r.tap_min), r.tap_max))
        self.curves = {i.id: i.curve for i in model.inverters}
        self.curve_regs = {i.id: [i.curve.v2, i.curve.v3, i.curve.q_max_frac, i.curve.slope]
                           for i in model.inverters}
        self.load_scale = 1.0
        self.load_mult: dict[str, float] = {}
        self.p_avail = {i.id: i.p_avail for i in model.inverters}
        self.q = {i.id: 0.0 for i in model.inverters}
        self.last: PowerFlowSolution | None = None
        self.diverged = 0

    def op(self, t: float) -> OperatingPoint:
        return OperatingPoint(
            time=t,
            load_scale=self.load_scale,
            p_avail_pvsi=dict(self.p_avail),
            taps=dict(self.taps),
            q_pvsi=dict(self.q),
            load_mult=dict(self.load_mult),
        )

    def solve(self, t: float) -> tuple[PowerFlowSolution, bool]:
        """Solve at the present state; on divergence keep the last converged state."""
        pf = solve(self.model, self.op(t))
        if pf.converged or self.last is None:
            self.last = pf
            return pf, pf.converged
        self.diverged += 1
        return self.last, False

    def update_inverters(self) -> None:
        """Inverter Q for the next interval from the last sampled terminal voltage."""
        if self.last is None:
            return
        for inv in self.model.inverters:
            v = self.last.v_at(inv.bus)
            self.q[inv.id] = volt_var_q(self.curves[inv.id], v, inv, self.p_avail[inv.id])

    def set_tap(self, rid: str, raw: float) -> ControlStatus:
        if not math.isfinite(raw):
            return ControlStatus.FORMAT_ERROR
        r = self.model.regulator(rid)
        # the device accepts anything within its hard limits
        self.taps[rid] = int(min(max(round(raw), r.tap_min), r.tap_max))
        return ControlStatus.SUCCESS

    def set_curve_register(self, iid: str, k: int, raw: float) -> ControlStatus:
        if not math.isfinite(raw) or not 0 <= k < 4:
            return ControlStatus.FORMAT_ERROR
        lo, hi = _CURVE_LIMITS[k]
        self.curve_regs[iid][k] = min(max(raw, lo), hi)
        return ControlStatus.SUCCESS

    def commit_curve(self, iid: str) -> bool:
        v2, v3, q, slope = self.curve_regs[iid]
        try:
            curve = VoltVarCurve.from_slope(v2, v3, q, slope if q == 0 else max(slope, 1e-3))
        except FeederError:
            return False
        self.curves[iid] = curve
        return True


# --- point map ------------------------------------------------------------------------

@dataclass
class BusPoints:
    bus: int
    address: int
    regulators: list = field(default_factory=list)     # (reg id, ai index, ao index)
    inverters: list = field(default_factory=list)      # (inv id, ai index, ao start)


def point_map(model: FeederModel) -> dict[int, BusPoints]:
    """Outstation per bus: AI0..2 = V, P, Q; device points follow."""
    out = {}
    for b in model.buses:
        bp = BusPoints(b.id, OUTSTATION_BASE + b.id)
        ai, ao = 3, 0
        for r in model.regulators:
            if r.line[1] == b.id:
                bp.regulators.append((r.id, ai, ao))
                ai += 1
                ao += 1
        for inv in model.inverters:
            if inv.bus == b.id:
                bp.inverters.append((inv.id, ai, ao))
                ai += 2
                ao += 4
        out[b.id] = bp
    return out


# --- capture log ----------------------------------------------------------------------

class CaptureLog:
    """In-memory capture, serialized as JSON lines on demand."""

    def __init__(self):
        self.entries: list[tuple] = []

    def frame(self, t: float, data: bytes, status: str) -> None:
        self.entries.append(("frame", t, bytes(data), status))

    def reject(self, t: float, data: bytes, diag: Diagnostic, receiver: int) -> None:
        self.entries.append(("reject", t, bytes(data), f"{diag.kind.value} at {receiver}"))

    def perturbation(self, rec) -> None:
        self.entries.append(("perturbation", rec.time, rec, ""))

    def event(self, t: float, text: str) -> None:
        self.entries.append(("event", t, b"", text))

    def lines(self):
        for kind, t, payload, note in self.entries:
            if kind == "perturbation":
                d = payload.to_dict()
                d = {"kind": kind, "t": t, **{k: v for k, v in d.items() if k != "time"}}
            elif kind == "event":
                d = {"kind": kind, "t": t, "text": note}
            else:
                addr = (int.from_bytes(payload[6:8], "little"), int.from_bytes(payload[4:6], "little")) \
                    if len(payload) >= 8 else (-1, -1)
                d = {"kind": kind, "t": t, "src": addr[0], "dest": addr[1], "status": note,
                     "hex": payload.hex(), "summary": describe(payload)}
            yield json.dumps(d, sort_keys=True)

    def write(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for line in self.lines():
                fh.write(line + "\n")


def describe(data: bytes) -> str:
    res = dnp3.decode_message(data)
    if isinstance(res, Diagnostic):
        return f"<{res}>"
    return f"{res.src}->{res.dest} {res.fragment.summary()}"


# --- event loop -----------------------------------------------------------------------

@dataclass
class Command:
    t_sent: float
    assoc: int
    device: str
    seq: int
    intended: tuple[float, ...]
    previous: tuple[float, ...]
    delivered: tuple[float, ...] = ()
    status: str = "PENDING"
    t_ack: float | None = None
    t_applied: float | None = None
    applied: tuple[float, ...] = ()

    @property
    def changed(self) -> bool:
        return any(a != b for a, b in zip(self.intended, self.previous))

    def to_dict(self) -> dict:
        return {
            "t_sent": self.t_sent, "assoc": self.assoc, "device": self.device, "seq": self.seq,
            "intended": list(self.intended), "previous": list(self.previous),
            "delivered": list(self.delivered), "status": self.status, "t_ack": self.t_ack,
            "t_applied": self.t_applied, "applied": list(self.applied),
        }


@dataclass
class RunData:
    """Raw series and logs of one run; input to :func:`report.summarize`."""

    name: str
    duration: float
    prices: PriceBook
    cvr_mode: bool
    bus_ids: tuple[int, ...]
    regulators: tuple[str, ...]
    inverters: tuple[str, ...]
    times: list = field(default_factory=list)
    kinds: list = field(default_factory=list)
    segments: list = field(default_factory=list)
    v: list = field(default_factory=list)
    taps: list = field(default_factory=list)
    q_pv: list = field(default_factory=list)
    p_pv: list = field(default_factory=list)
    p_sub: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    load_kw: list = field(default_factory=list)
    converged: list = field(default_factory=list)
    commands: list = field(default_factory=list)
    cycles: list = field(default_factory=list)
    assoc_status: list = field(default_factory=list)
    messages: dict = field(default_factory=dict)
    perturbations: list = field(default_factory=list)
    events: list = field(default_factory=list)
    segment_bounds: list = field(default_factory=list)


class Simulation:
    def __init__(self, cfg: ScenarioConfig, model: FeederModel | None = None):
        self.cfg = cfg
        if model is None:
            try:
                model = load_feeder(cfg.feeder_path())
            except OSError as exc:
                raise ScenarioError(f"cannot read feeder {cfg.feeder_path()}: {exc}") from None
        self.model = model
        self.load_profile = read_profile(cfg.load_profile_path(), "multiplier")
        self.pv_profile = read_profile(cfg.pv_profile_path(), "p_avail_kw")
        for ev in cfg.events:
            if not any(ld.name == ev["load"] for ld in model.loads):
                raise ScenarioError(f"event references unknown load {ev['load']!r}")
        for rid in cfg.initial_taps:
            model.regulator(rid)
        self.plant = Plant(model, cfg.initial_taps)
        self.points = point_map(model)
        self.channel = Channel(cfg.latency_ms, cfg.attacks, cfg.seed)
        self.capture = CaptureLog()
        self.masters: dict[int, Master] = {}
        self.outstations: dict[int, Outstation] = {}
        self._dirty: set[str] = set()
        for bp in self.points.values():
            self.masters[bp.address] = Master(bp.address, timeout=cfg.poll_timeout)
            self.outstations[bp.address] = Outstation(bp.address, on_operate=self._operate_handler(bp))
            db = self.outstations[bp.address].db
            for rid, _, ao in bp.regulators:
                db.analog_outputs[ao] = float(self.plant.taps[rid])
            for iid, _, ao in bp.inverters:
                for k, val in enumerate(self.plant.curve_regs[iid]):
                    db.analog_outputs[ao + k] = float(dnp3.f32(val))
        self.sp = VvoSetpoints.from_model(model)
        self.sp = replace(self.sp, taps=dict(self.plant.taps))
        self.vvo_cfg = cfg.vvo_config
        self.now = 0.0
        self._queue: list = []
        self._seq = 0
        self.vvo_solves = 0
        self.commands: dict[tuple[int, int], Command] = {}
        self.command_log: list[Command] = []
        self.poll_outcome: dict[tuple[int, int], str] = {}
        self.msg = {a: {"polls": 0, "responses": 0, "timeouts": 0, "dropped": 0} for a in self.masters}
        self.status = {a: Master.UP for a in self.masters}
        self._bus_samples: dict[int, list] = {a: [] for a in self.masters}
        segs = self.load_profile.segments
        self.data = RunData(
            name=cfg.name, duration=cfg.duration, prices=cfg.prices, cvr_mode=cfg.cvr_mode,
            bus_ids=tuple(model.bus_ids), regulators=tuple(r.id for r in model.regulators),
            inverters=tuple(i.id for i in model.inverters),
            segment_bounds=[(t, s) for t, s in zip(self.load_profile.times, segs)] if segs else [],
        )
        self._schedule_all()
        # time-zero events (first profile values, first poll) are the initial state
        self.step(0.0)

    # scheduling
    def schedule(self, t: float, prio: int, kind: str, payload: Any = None) -> None:
        heapq.heappush(self._queue, (t, prio, self._seq, kind, payload))
        self._seq += 1

    def _schedule_all(self) -> None:
        cfg = self.cfg
        for a in cfg.attacks:
            self.schedule(a.window[0], ATTACK_EDGE, "attack_edge", (a.name, "start"))
            if math.isfinite(a.window[1]):
                self.schedule(a.window[1], ATTACK_EDGE, "attack_edge", (a.name, "end"))
        for t, v in zip(self.load_profile.times, self.load_profile.values):
            if t < cfg.duration:
                self.schedule(t, PROFILE_STEP, "load", v)
        for t, v in zip(self.pv_profile.times, self.pv_profile.values):
            if t < cfg.duration:
                self.schedule(t, PROFILE_STEP, "pv", v)
        for ev in cfg.events:
            if ev["time"] < cfg.duration:
                self.schedule(float(ev["time"]), PROFILE_STEP, "load_step", ev)
        n_meter = int(math.ceil(cfg.duration / cfg.metering_period - 1e-9))
        for k in range(n_meter):
            self.schedule(k * cfg.metering_period, METER, "meter")
        n_ctrl = int(math.ceil(cfg.duration / cfg.control_period - 1e-9))
        for k in range(1, n_ctrl):
            self.schedule(k * cfg.control_period, CONTROL, "control")

    def step(self, t: float) -> None:
        """Execute every event with timestamp <= ``t``."""
        if t < self.now:
            raise ScenarioError(f"cannot step back from {self.now} to {t}")
        q = self._queue
        while q and q[0][0] <= t:
            te, _, _, kind, payload = heapq.heappop(q)
            self.now = te
            getattr(self, "_on_" + kind)(te, payload)
        self.now = t

    def run(self) -> RunData:
        self.step(max(self.cfg.duration, self._last_event_time()))
        return self.finish()

    def _last_event_time(self) -> float:
        return max((e[0] for e in self._queue), default=0.0)

    # handlers
    def _on_attack_edge(self, t, payload):
        name, edge = payload
        self.capture.event(t, f"attack {name} {edge}")
        self.data.events.append((t, f"attack {name} {edge}"))

    def _on_load(self, t, value):
        self.plant.load_scale = value

    def _on_pv(self, t, value):
        for inv in self.model.inverters:
            self.plant.p_avail[inv.id] = min(value, inv.s_rating)

    def _on_load_step(self, t, ev):
        name = ev["load"]
        self.plant.load_mult[name] = self.plant.load_mult.get(name, 1.0) * float(ev.get("factor", 1.0))
        self.capture.event(t, f"load {name} x{ev.get('factor', 1.0)}")
        self.data.events.append((t, f"load {name} x{ev.get('factor', 1.0)}"))

    def _sample(self, t: float, kind: str) -> PowerFlowSolution:
        pf, ok = self.plant.solve(t)
        if not ok:
            self.data.events.append((t, "power flow diverged; holding last converged state"))
            self.capture.event(t, "power flow diverged")
        d = self.data
        d.times.append(t)
        d.kinds.append(kind)
        d.segments.append(self.load_profile.segment_at(t))
        d.v.append(pf.v.copy())
        d.taps.append([self.plant.taps[r] for r in d.regulators])
        d.q_pv.append([self.plant.q[i] for i in d.inverters])
        d.p_pv.append([pf.p_pvsi[i] for i in d.inverters])
        d.p_sub.append(pf.p_sub_kw)
        d.loss.append(pf.loss_kw)
        d.load_kw.append(pf.load_kw)
        d.converged.append(ok)
        return pf

    def _on_meter(self, t, _):
        self.plant.update_inverters()
        pf = self._sample(t, "meter")
        for k, b in enumerate(pf.bus_ids):
            bp = self.points[b]
            db = self.outstations[bp.address].db
            db.set_ai(0, dnp3.f32(pf.v[k]), t)
            db.set_ai(1, dnp3.f32(pf.bus_load_kw[k]), t)
            db.set_ai(2, dnp3.f32(pf.bus_load_kvar[k]), t)
            for rid, ai, _ in bp.regulators:
                db.set_ai(ai, float(self.plant.taps[rid]), t)
            for iid, ai, _ in bp.inverters:
                db.set_ai(ai, dnp3.f32(self.plant.p_avail[iid]), t)
                db.set_ai(ai + 1, dnp3.f32(self.plant.q[iid]), t)
        for addr, m in self.masters.items():
            data = m.poll(t)
            seq = (m.seq - 1) & 0x0F
            self.msg[addr]["polls"] += 1
            self.poll_outcome[(addr, seq)] = "pending"
            self.schedule(t + m.timeout, TIMEOUT, "timeout", addr)
            self._send(t, data, (addr, seq))

    def _send(self, t: float, data: bytes, poll_key=None) -> None:
        n_rec = len(self.channel.records)
        d = self.channel.transmit(data, t)
        for rec in self.channel.records[n_rec:]:
            self.capture.perturbation(rec)
            self.data.perturbations.append(rec)
        if d is None:
            self.capture.frame(t, data, "dropped")
            if poll_key is not None and self.poll_outcome.get(poll_key) == "pending":
                self.poll_outcome[poll_key] = "dropped"
            return
        self.capture.frame(t, d.data if d.record is None else data, "sent")
        if d.record is not None:
            self.capture.frame(t, d.data, "mutated")
        self.schedule(d.time, DELIVERY, "delivery", (d, poll_key))

    def _on_delivery(self, t, payload):
        d, poll_key = payload
        if d.dest in self.outstations:
            out = self.outstations[d.dest]
            before = out.rejected
            self._dirty.clear()
            resp = out.respond(d.data)
            if out.rejected > before:
                res = dnp3.decode_message(d.data)
                if isinstance(res, Diagnostic):
                    self.capture.reject(t, d.data, res, d.dest)
            if self._dirty:
                for iid in sorted(self._dirty):
                    if iid in self.plant.curves:
                        self.plant.commit_curve(iid)
                self._dirty.clear()
                self._sample(t, "apply")
                self._mark_applied(t, d.dest)
            if resp is not None:
                self._send(t, resp, poll_key)
            return
        m = self.masters.get(d.src)
        if m is None:
            return
        n_ops = len(m.operate_results)
        pending_before = dict(m.pending)
        res = m.handle(d.data, t)
        if isinstance(res, Diagnostic):
            self.capture.reject(t, d.data, res, m.address)
            return
        if res is None:
            return
        seq = res.seq
        req = pending_before.get(seq)
        if req is None:
            return
        if req.kind == "poll":
            if self.poll_outcome.get((d.src, seq)) in ("pending", "dropped"):
                self.poll_outcome[(d.src, seq)] = "done"
                self.msg[d.src]["responses"] += 1
                ai = m.mirror.analog_inputs
                if all(k in ai for k in (0, 1, 2)):
                    self._bus_samples[d.src].append((t, ai[0][0], ai[1][0], ai[2][0]))
            self._set_status(t, d.src, m.status)
        elif len(m.operate_results) > n_ops:
            _, _, statuses = m.operate_results[-1]
            cmd = self.commands.pop((d.src, seq), None)
            if cmd is not None:
                cmd.t_ack = t
                vals = tuple(v for ob in res.objects for v in ob.values)
                cmd.delivered = tuple(float(v) for v in vals)
                ok = statuses and all(s == ControlStatus.SUCCESS for s in statuses)
                cmd.status = "SUCCESS" if ok else "REJECTED"
            self._set_status(t, d.src, m.status)

    def _mark_applied(self, t, addr):
        for (a, _), cmd in self.commands.items():
            if a == addr and cmd.t_applied is None:
                cmd.t_applied = t
                bp = self.points[addr - OUTSTATION_BASE]
                if cmd.device in self.plant.taps:
                    cmd.applied = (float(self.plant.taps[cmd.device]),)
                elif cmd.device in self.plant.curve_regs:
                    cmd.applied = tuple(float(x) for x in self.plant.curve_regs[cmd.device])

    def _on_timeout(self, t, addr):
        m = self.masters[addr]
        for req in m.expire(t):
            if req.kind == "poll":
                key = (addr, req.seq)
                outcome = self.poll_outcome.get(key)
                if outcome == "dropped":
                    self.msg[addr]["dropped"] += 1
                elif outcome == "pending":
                    self.msg[addr]["timeouts"] += 1
                self.poll_outcome[key] = "done"
            else:
                cmd = self.commands.pop((addr, req.seq), None)
                if cmd is not None:
                    cmd.status = "TIMEOUT"
        self._set_status(t, addr, m.status)

    def _set_status(self, t, addr, status):
        if self.status[addr] != status:
            self.status[addr] = status
            self.data.assoc_status.append((t, addr, status))
            self.capture.event(t, f"association {addr} {status}")

    def _operate_handler(self, bp: BusPoints):
        def handler(index: int, value: float) -> ControlStatus:
            for rid, _, ao in bp.regulators:
                if index == ao:
                    self._dirty.add(rid)
                    return self.plant.set_tap(rid, value)
            for iid, _, ao in bp.inverters:
                if ao <= index < ao + 4:
                    self._dirty.add(iid)
                    return self.plant.set_curve_register(iid, index - ao, value)
            return ControlStatus.NOT_SUPPORTED
        return handler

    def _windowed(self, addr: int, t: float):
        win = self.cfg.measurement_window
        hist = self._bus_samples[addr]
        if win <= 0 or not hist:
            return None
        keep = [h for h in hist if h[0] > t - win]
        self._bus_samples[addr] = keep
        if not keep:
            return None
        n = len(keep)
        return tuple(math.fsum(h[i] for h in keep) / n for i in (1, 2, 3))

    def measurements(self, t: float) -> MeasurementSet:
        buses, taps, pv = {}, {}, {}
        last = []
        for b, bp in self.points.items():
            m = self.masters[bp.address]
            ai = m.mirror.analog_inputs
            last.append(m.last_update)
            if all(k in ai for k in (0, 1, 2)):
                buses[b] = self._windowed(bp.address, t) or (ai[0][0], ai[1][0], ai[2][0])
            for rid, idx, _ in bp.regulators:
                if idx in ai:
                    taps[rid] = ai[idx][0]
            for iid, idx, _ in bp.inverters:
                if idx in ai and idx + 1 in ai:
                    pv[iid] = (ai[idx][0], ai[idx + 1][0])
        if any(x is None for x in last):
            staleness = math.inf
        else:
            staleness = max(0.0, t - min(last))
        stale = any(s == Master.DOWN for s in self.status.values())
        return MeasurementSet(t, buses, staleness if math.isfinite(staleness) else 1e18,
                              taps, {}, pv, stale, self.cfg.control_period)

    def _on_control(self, t, _):
        meas = self.measurements(t)
        prev = replace(self.sp, taps={r: int(round(meas.taps.get(r, self.sp.taps[r]))) for r in self.sp.taps})
        sp = solve_vvo(self.model, meas, prev, self.cfg.prices, self.vvo_cfg)
        self.vvo_solves += 1
        self.data.cycles.append({
            "t": t, "status": sp.status, "feasible": sp.feasible,
            "taps": dict(sp.taps),
            "q_max_frac": {k: c.q_max_frac for k, c in sp.curves.items()},
            "objective": sp.objective_value, "staleness": min(meas.staleness, 1e18),
        })
        self.capture.event(t, f"vvo {sp.status} taps={dict(sorted(sp.taps.items()))}")
        if sp.status == "STALE":
            return
        self.sp = sp
        for bp in self.points.values():
            m = self.masters[bp.address]
            for rid, _, ao in bp.regulators:
                pts = [(ao, float(sp.taps[rid]))]
                self._command(t, m, rid, pts, (float(prev.taps[rid]),))
            for iid, _, ao in bp.inverters:
                c = sp.curves[iid]
                regs = [c.v2, c.v3, c.q_max_frac, c.slope]
                pts = [(ao + k, dnp3.f32(x)) for k, x in enumerate(regs)]
                old = prev.curves[iid]
                self._command(t, m, iid, pts, tuple(dnp3.f32(x) for x in (old.v2, old.v3, old.q_max_frac, old.slope)))

    def _command(self, t, m: Master, device, pts, previous):
        data = m.operate(t, pts)
        seq = (m.seq - 1) & 0x0F
        cmd = Command(t, m.outstation, device, seq, tuple(v for _, v in pts), previous)
        self.commands[(m.outstation, seq)] = cmd
        self.command_log.append(cmd)
        self.schedule(t + m.timeout, TIMEOUT, "timeout", m.outstation)
        self._send(t, data)

    def finish(self) -> RunData:
        for cmd in self.commands.values():
            if cmd.status == "PENDING":
                cmd.status = "TIMEOUT"
        self.data.commands = [c.to_dict() for c in self.command_log]
        self.data.messages = {a: dict(v) for a, v in sorted(self.msg.items())}
        return self.data


def run_scenario(cfg: ScenarioConfig, model: FeederModel | None = None):
    """Run ``cfg`` to completion and summarize. Returns (report, simulation)."""
    from .report import summarize

    sim = Simulation(cfg, model)
    data = sim.run()
    return summarize(data), sim
