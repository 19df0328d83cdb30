"""Scenario metrics (setpoint updates, violations, costs, CVR factor) and emitters."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

from .attack import PerturbationRecord

V_LOW = 0.95
V_HIGH = 1.05
BAND_TOL = 1e-9

FORMATS = ("structured", "csv", "text-table")


class ReportError(ValueError):
    pass


@dataclass
class ScenarioReport:
    name: str = ""
    duration: float = 0.0
    cvr_mode: bool = False
    prices: dict = field(default_factory=dict)
    bus_ids: list = field(default_factory=list)
    regulators: list = field(default_factory=list)
    inverters: list = field(default_factory=list)
    # raw series, one entry per plant sample
    times: list = field(default_factory=list)
    kinds: list = field(default_factory=list)
    segments: list = field(default_factory=list)
    voltages: list = field(default_factory=list)
    taps: list = field(default_factory=list)
    q_pv: list = field(default_factory=list)
    p_sub: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    load_kw: list = field(default_factory=list)
    commands: list = field(default_factory=list)
    cycles: list = field(default_factory=list)
    assoc_status: list = field(default_factory=list)
    messages: dict = field(default_factory=dict)
    perturbations: list = field(default_factory=list)
    events: list = field(default_factory=list)
    capture_log: str | None = None  # file name of the frame capture, when one was written
    # aggregates
    setpoint_updates: dict = field(default_factory=dict)
    violations: dict = field(default_factory=dict)
    energy_kwh: float = 0.0
    energy_purchased: float = 0.0
    energy_loss_cost: float = 0.0
    vr_operating_cost: float = 0.0
    total_operational_cost: float = 0.0
    mean_voltage: float = 0.0
    v_peak: dict = field(default_factory=dict)
    by_segment: dict = field(default_factory=dict)
    stale_cycles: int = 0
    # comparison against a baseline run
    baseline: str | None = None
    pct_energy_saved: float | None = None
    pct_cost_saved: float | None = None
    cvr_factor: float | None = None

    def updates(self, device: str) -> int:
        return sum(self.setpoint_updates.get(device, {}).values())

    def to_dict(self) -> dict[str, Any]:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["perturbations"] = [p.to_dict() if isinstance(p, PerturbationRecord) else p for p in self.perturbations]
        d["messages"] = {str(k): v for k, v in self.messages.items()}
        d["v_peak"] = {str(k): v for k, v in self.v_peak.items()}
        return _jsonable(d)

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioReport":
        names = {f.name for f in fields(cls)}
        kw = {k: v for k, v in d.items() if k in names}
        kw["perturbations"] = [_record_from_dict(p) for p in d.get("perturbations", [])]
        kw["messages"] = {int(k): v for k, v in d.get("messages", {}).items()}
        kw["v_peak"] = {int(k): v for k, v in d.get("v_peak", {}).items()}
        return cls(**kw)


def _record_from_dict(p: dict) -> PerturbationRecord:
    return PerturbationRecord(
        time=p["time"], attack=p["attack"], src=p["src"], dest=p["dest"],
        original=bytes.fromhex(p["original"]), perturbed=bytes.fromhex(p["perturbed"]),
        diff=tuple(tuple(x) for x in p["diff"]),
        value_delta=tuple(tuple(x) for x in p["value_delta"]),
        warning=p.get("warning", ""),
    )


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return x


# --- aggregation ---------------------------------------------------------------------

def sample_weights(times, duration: float) -> np.ndarray:
    """Seconds each sample's state is held (until the next sample or the end)."""
    t = np.asarray(times, dtype=float)
    if t.size == 0:
        return t
    nxt = np.append(t[1:], max(duration, t[-1]))
    return np.maximum(nxt - t, 0.0)


def violation_flags(voltages) -> np.ndarray:
    v = np.asarray(voltages, dtype=float)
    if v.size == 0:
        return np.zeros(0, dtype=bool)
    return ((v < V_LOW - BAND_TOL) | (v > V_HIGH + BAND_TOL)).any(axis=1)


def count_excursions(flags) -> int:
    """Number of entries into the violated state."""
    count, prev = 0, False
    for f in flags:
        if f and not prev:
            count += 1
        prev = bool(f)
    return count


def count_updates(commands, regulators_and_inverters, segment_of) -> dict:
    out = {dev: {} for dev in regulators_and_inverters}
    for c in commands:
        if c["device"] not in out or c["status"] != "SUCCESS":
            continue
        if not any(a != b for a, b in zip(c["intended"], c["previous"])):
            continue
        seg = segment_of(c["t_sent"])
        out[c["device"]][seg] = out[c["device"]].get(seg, 0) + 1
    return out


def summarize(data, baseline: ScenarioReport | None = None) -> ScenarioReport:
    """Aggregate a run's raw data into a report, optionally against ``baseline``."""
    prices = dict(vars(data.prices))
    rep = ScenarioReport(
        name=data.name,
        duration=float(data.duration),
        cvr_mode=bool(data.cvr_mode),
        prices=prices,
        bus_ids=list(data.bus_ids),
        regulators=list(data.regulators),
        inverters=list(data.inverters),
        times=[float(t) for t in data.times],
        kinds=list(data.kinds),
        segments=list(data.segments),
        voltages=[[float(x) for x in row] for row in data.v],
        taps=[list(row) for row in data.taps],
        q_pv=[[float(x) for x in row] for row in data.q_pv],
        p_sub=[float(x) for x in data.p_sub],
        loss=[float(x) for x in data.loss],
        load_kw=[float(x) for x in data.load_kw],
        commands=list(data.commands),
        cycles=list(data.cycles),
        assoc_status=[list(x) for x in data.assoc_status],
        messages=dict(data.messages),
        perturbations=list(data.perturbations),
        events=[list(e) for e in data.events],
    )
    bounds = list(getattr(data, "segment_bounds", []))

    def segment_of(t):
        seg = ""
        for tb, s in bounds:
            if tb <= t:
                seg = s
        return seg

    aggregate(rep, segment_of)
    if baseline is not None:
        compare_to(rep, baseline)
    return rep


def aggregate(rep: ScenarioReport, segment_of=None) -> ScenarioReport:
    """(Re)compute every aggregate from the raw series the report carries."""
    if segment_of is None:
        segs = dict(zip(rep.times, rep.segments))
        # commands fall between samples; use the latest sample at or before them
        times = sorted(segs)

        def segment_of(t):
            seg = rep.segments[0] if rep.segments else ""
            for ts in times:
                if ts <= t:
                    seg = segs[ts]
            return seg

    c_e = rep.prices.get("c_energy", 0.0)
    c_vr = rep.prices.get("c_vr_step", 0.0)
    w = sample_weights(rep.times, rep.duration)
    v = np.asarray(rep.voltages, dtype=float).reshape(len(rep.times), len(rep.bus_ids))
    flags = violation_flags(v)

    rep.setpoint_updates = count_updates(rep.commands, list(rep.regulators) + list(rep.inverters), segment_of)
    per_bus = {}
    for k, b in enumerate(rep.bus_ids):
        n = count_excursions((v[:, k] < V_LOW - BAND_TOL) | (v[:, k] > V_HIGH + BAND_TOL)) if len(v) else 0
        if n:
            per_bus[str(b)] = n
    rep.violations = {
        "count": count_excursions(flags),
        "duration_s": float(np.sum(w[flags])) if len(w) else 0.0,
        "per_bus": per_bus,
        "first_time": float(np.asarray(rep.times)[flags][0]) if flags.any() else None,
    }
    p_sub = np.asarray(rep.p_sub, dtype=float)
    loss = np.asarray(rep.loss, dtype=float)
    rep.energy_kwh = float(np.sum(p_sub * w) / 3600.0) if len(w) else 0.0
    rep.energy_purchased = rep.energy_kwh * c_e
    rep.energy_loss_cost = float(np.sum(loss * w) / 3600.0) * c_e if len(w) else 0.0
    n_vr_updates = sum(rep.updates(r) for r in rep.regulators)
    rep.vr_operating_cost = n_vr_updates * c_vr
    # losses are part of the purchased energy and are not added twice
    rep.total_operational_cost = rep.energy_purchased + rep.vr_operating_cost
    rep.mean_voltage = float(np.sum(v.mean(axis=1) * w) / np.sum(w)) if len(w) and np.sum(w) > 0 else 0.0
    rep.v_peak = {int(b): float(v[:, k].max()) for k, b in enumerate(rep.bus_ids)} if len(v) else {}
    rep.stale_cycles = sum(1 for c in rep.cycles if c.get("status") == "STALE")

    by_seg: dict[str, dict] = {}
    for k, t in enumerate(rep.times):
        seg = rep.segments[k] if k < len(rep.segments) else ""
        acc = by_seg.setdefault(seg, {"energy_kwh": 0.0, "loss_kwh": 0.0, "seconds": 0.0, "v_weighted": 0.0})
        acc["energy_kwh"] += p_sub[k] * w[k] / 3600.0
        acc["loss_kwh"] += loss[k] * w[k] / 3600.0
        acc["seconds"] += w[k]
        acc["v_weighted"] += float(v[k].mean()) * w[k]
    for seg, acc in by_seg.items():
        vr_updates = sum(rep.setpoint_updates.get(r, {}).get(seg, 0) for r in rep.regulators)
        acc["energy_purchased"] = acc["energy_kwh"] * c_e
        acc["vr_operating_cost"] = vr_updates * c_vr
        acc["energy_loss_cost"] = acc.pop("loss_kwh") * c_e
        acc["total_operational_cost"] = acc["energy_purchased"] + acc["vr_operating_cost"]
        acc["mean_voltage"] = acc["v_weighted"] / acc["seconds"] if acc["seconds"] > 0 else 0.0
        del acc["v_weighted"]
    rep.by_segment = {k: {kk: float(vv) for kk, vv in sorted(a.items())} for k, a in sorted(by_seg.items())}
    return rep


def _pct(base: float, new: float) -> float | None:
    if not base > 0:
        return None
    return 100.0 * (base - new) / base


def compare_to(rep: ScenarioReport, baseline: ScenarioReport) -> ScenarioReport:
    if abs(rep.duration - baseline.duration) > 1e-9:
        raise ReportError(f"baseline spans {baseline.duration} s, run spans {rep.duration} s")
    from .vvo import cvr_factor

    rep.baseline = baseline.name
    rep.pct_energy_saved = _pct(baseline.energy_kwh, rep.energy_kwh)
    rep.pct_cost_saved = _pct(baseline.total_operational_cost, rep.total_operational_cost)
    rep.cvr_factor = cvr_factor(baseline, rep)
    for seg, acc in rep.by_segment.items():
        base = baseline.by_segment.get(seg)
        if base is None:
            continue
        acc["pct_cost_saved"] = _pct(base["total_operational_cost"], acc["total_operational_cost"])
        dv = _pct(base["mean_voltage"], acc["mean_voltage"])
        acc["cvr_factor"] = (acc["pct_cost_saved"] / dv
                             if dv is not None and abs(dv) > 1e-12 and acc["pct_cost_saved"] is not None else None)
    return rep


# --- emitters ---------------------------------------------------------------------------

def _fmt(x, nd=4) -> str:
    if x is None:
        return "-"
    if isinstance(x, float):
        return f"{x:.{nd}f}"
    return str(x)


def text_table(rep: ScenarioReport) -> str:
    segs = sorted({s for s in rep.segments if s}) or [""]
    out = io.StringIO()
    out.write(f"Scenario: {rep.name}  (CVR {'on' if rep.cvr_mode else 'off'}, {rep.duration / 3600:.1f} h)\n\n")
    out.write("Setpoint updates\n")
    head = ["Device"] + [s or "all" for s in segs] + ["total"]
    rows = []
    for dev in list(rep.regulators) + list(rep.inverters):
        counts = rep.setpoint_updates.get(dev, {})
        rows.append([dev] + [str(counts.get(s, 0)) for s in segs] + [str(sum(counts.values()))])
    out.write(_grid(head, rows))
    out.write("\nCosts\n")
    head = ["Metric"] + [s or "all" for s in segs] + ["total"]
    metrics = [
        ("Energy purchased ($)", "energy_purchased", rep.energy_purchased),
        ("VR operating cost ($)", "vr_operating_cost", rep.vr_operating_cost),
        ("Cost of energy loss ($)", "energy_loss_cost", rep.energy_loss_cost),
        ("Total operational cost ($)", "total_operational_cost", rep.total_operational_cost),
        ("Mean voltage (p.u.)", "mean_voltage", rep.mean_voltage),
    ]
    if rep.baseline is not None:
        metrics += [
            (f"Cost saved vs {rep.baseline} (%)", "pct_cost_saved", rep.pct_cost_saved),
            ("CVR factor", "cvr_factor", rep.cvr_factor),
        ]
    rows = []
    for label, key, total in metrics:
        rows.append([label] + [_fmt(rep.by_segment.get(s, {}).get(key)) for s in segs] + [_fmt(total)])
    out.write(_grid(head, rows))
    out.write("\nVoltage band\n")
    vio = rep.violations
    rows = [
        ["Violations (excursions)", str(vio.get("count", 0))],
        ["Time outside band (s)", _fmt(vio.get("duration_s", 0.0), 1)],
        ["First violation (s)", _fmt(vio.get("first_time"), 3)],
        ["Peak voltage (p.u.)", _fmt(max(rep.v_peak.values()) if rep.v_peak else None)],
        ["Stale VVO cycles", str(rep.stale_cycles)],
    ]
    if rep.baseline is not None:
        rows.insert(0, [f"Energy saved vs {rep.baseline} (%)", _fmt(rep.pct_energy_saved)])
    out.write(_grid(["Metric", "Value"], rows))
    return out.getvalue()


def _grid(head, rows) -> str:
    widths = [max(len(str(r[k])) for r in [head] + rows) for k in range(len(head))]
    sep = "+" + "+".join("-" * (w + 2) for w in widths) + "+\n"

    def line(r):
        cells = [f" {str(c):<{widths[0]}} " if k == 0 else f" {str(c):>{widths[k]}} " for k, c in enumerate(r)]
        return "|" + "|".join(cells) + "|\n"

    return sep + line(head) + sep + "".join(line(r) for r in rows) + sep


def voltage_csv(rep: ScenarioReport) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["time_s", "kind", "segment"] + [f"v_{b}" for b in rep.bus_ids]
               + [f"tap_{r}" for r in rep.regulators] + [f"q_{i}_kvar" for i in rep.inverters]
               + ["p_sub_kw", "loss_kw"])
    for k, t in enumerate(rep.times):
        w.writerow([repr(t), rep.kinds[k], rep.segments[k]] + [f"{x:.9f}" for x in rep.voltages[k]]
                   + list(rep.taps[k]) + [f"{x:.6f}" for x in rep.q_pv[k]]
                   + [f"{rep.p_sub[k]:.6f}", f"{rep.loss[k]:.6f}"])
    return out.getvalue()


def summary_rows(rep: ScenarioReport) -> list[tuple[str, Any]]:
    rows = [
        ("name", rep.name), ("duration_s", rep.duration), ("cvr_mode", rep.cvr_mode),
        ("energy_kwh", rep.energy_kwh), ("energy_purchased", rep.energy_purchased),
        ("energy_loss_cost", rep.energy_loss_cost), ("vr_operating_cost", rep.vr_operating_cost),
        ("total_operational_cost", rep.total_operational_cost), ("mean_voltage", rep.mean_voltage),
        ("violations", rep.violations.get("count", 0)),
        ("violation_seconds", rep.violations.get("duration_s", 0.0)),
        ("stale_cycles", rep.stale_cycles),
        ("baseline", rep.baseline), ("pct_energy_saved", rep.pct_energy_saved),
        ("pct_cost_saved", rep.pct_cost_saved), ("cvr_factor", rep.cvr_factor),
    ]
    for dev, counts in rep.setpoint_updates.items():
        for seg, n in sorted(counts.items()):
            rows.append((f"updates_{dev}_{seg or 'all'}", n))
    return rows


def emit(rep: ScenarioReport, fmt: str, path: str | Path) -> list[Path]:
    """Write ``rep`` in ``fmt`` under directory ``path``; returns files written."""
    if fmt not in FORMATS:
        raise ReportError(f"unknown format {fmt!r}; choose from {', '.join(FORMATS)}")
    out_dir = Path(path)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    stem = rep.name or "report"
    if fmt == "structured":
        p = out_dir / f"{stem}.report.json"
        p.write_text(json.dumps(rep.to_dict(), sort_keys=True, indent=1) + "\n")
        written.append(p)
    elif fmt == "csv":
        p = out_dir / f"{stem}.voltages.csv"
        p.write_text(voltage_csv(rep))
        written.append(p)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        for k, v in summary_rows(rep):
            w.writerow([k, "" if v is None else (repr(v) if isinstance(v, float) else v)])
        p = out_dir / f"{stem}.summary.csv"
        p.write_text(buf.getvalue())
        written.append(p)
    else:
        p = out_dir / f"{stem}.table.txt"
        p.write_text(text_table(rep))
        written.append(p)
    return written


def load_report(path: str | Path) -> ScenarioReport:
    try:
        d = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ReportError(f"cannot read report {path}: {exc}") from None
    return ScenarioReport.from_dict(d)
