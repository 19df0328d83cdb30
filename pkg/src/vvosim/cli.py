"""Command-line entry point: ``vvosim run | compare | replay-log | validate``."""

from __future__ import annotations

import json
import sys
from dataclasses import replace
from pathlib import Path

import click

from .attack import AttackConfigError, DosAttack, ModpAttack, attack_cost
from .cosim import ScenarioError, load_config, point_map, read_profile, run_scenario
from .feeder import FeederError, load_feeder
from .report import FORMATS, ReportError, compare_to, emit, load_report, summary_rows, text_table


def _fail(msg: str) -> None:
    raise click.ClickException(msg)


@click.group()
@click.version_option(package_name="vvosim")
def main():
    """Volt/VAR optimization co-simulation with an attackable DNP3 channel."""


@main.command()
@click.option("--config", "config_path", required=True, help="Scenario config JSON (or builtin:scenarios/<name>.json).")
@click.option("--out-dir", type=click.Path(file_okay=False), default="out", show_default=True)
@click.option("--seed", type=int, default=None, help="Override the config's seed.")
@click.option("--format", "fmt", type=click.Choice(FORMATS + ("all",)), default="all", show_default=True)
@click.option("--baseline", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Structured report of a baseline run to compare against.")
def run(config_path, out_dir, seed, fmt, baseline):
    """Run a scenario and write its report files and capture log."""
    try:
        cfg = load_config(config_path)
        if seed is not None:
            cfg = replace(cfg, seed=seed)
        base = load_report(baseline) if baseline else None
        rep, sim = run_scenario(cfg)
        if base is not None:
            compare_to(rep, base)
    except (ScenarioError, FeederError, ReportError, AttackConfigError) as exc:
        _fail(str(exc))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cap = out / f"{rep.name}.capture.jsonl"
    sim.capture.write(cap)
    rep.capture_log = cap.name
    written = [cap]
    for f in (FORMATS if fmt == "all" else (fmt,)):
        written += emit(rep, f, out)
    click.echo(f"{rep.name}: {rep.duration / 3600:g} h, energy {rep.energy_kwh:.1f} kWh, "
               f"violations {rep.violations.get('count', 0)}, stale cycles {rep.stale_cycles}")
    if rep.baseline is not None:
        click.echo(f"vs {rep.baseline}: energy saved {_pct(rep.pct_energy_saved)}, cvr factor {_num(rep.cvr_factor)}")
    for p in written:
        click.echo(f"  wrote {p}")


def _pct(x):
    return "-" if x is None else f"{x:.3f}%"


def _num(x):
    return "-" if x is None else f"{x:.3f}"


@main.command()
@click.argument("report", type=click.Path(exists=True, dir_okay=False))
@click.option("--baseline", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--format", "fmt", type=click.Choice(["text-table", "structured"]), default="text-table",
              show_default=True)
@click.option("--out-dir", type=click.Path(file_okay=False), default=None,
              help="Also write the compared report here.")
@click.option("--lam", type=float, default=1.0, show_default=True,
              help="Weight of the perturbation-size term in the attack score.")
def compare(report, baseline, fmt, out_dir, lam):
    """Compare REPORT against a baseline: savings, CVR factor and attack score."""
    try:
        rep, base = load_report(report), load_report(baseline)
        compare_to(rep, base)
        score = attack_cost(rep, lam, base)
    except (ReportError, AttackConfigError) as exc:
        _fail(str(exc))
    if fmt == "structured":
        rows = dict(summary_rows(rep))
        rows.update(attack_damage=score.damage, attack_similarity=score.similarity, attack_score=score.score)
        click.echo(json.dumps(rows, sort_keys=True, indent=1))
    else:
        click.echo(text_table(rep), nl=False)
        click.echo(f"\nAttack score (lambda={lam:g}): damage ${score.damage:.2f}, "
                   f"mean |perturbation| {score.similarity:.4g}, total {score.score:.4f}")
    if out_dir:
        emit(rep, "structured", out_dir)


@main.command("replay-log")
@click.argument("capture", type=click.Path(exists=True, dir_okay=False))
@click.option("--format", "fmt", type=click.Choice(["text", "structured"]), default="text", show_default=True)
@click.option("--kind", "kinds", multiple=True, type=click.Choice(["frame", "reject", "perturbation", "event"]),
              help="Only show these record kinds (repeatable).")
def replay_log(capture, fmt, kinds):
    """Decode a capture log into a readable frame listing."""
    from .cosim import describe

    with open(capture) as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                _fail(f"{capture}:{n}: {exc.msg}")
            kind = rec.get("kind")
            if kinds and kind not in kinds:
                continue
            if fmt == "structured":
                if "hex" in rec:
                    rec["decoded"] = describe(bytes.fromhex(rec["hex"]))
                click.echo(json.dumps(rec, sort_keys=True))
                continue
            click.echo(_replay_line(rec, describe))


def _replay_line(rec: dict, describe) -> str:
    t = f"{rec.get('t', 0.0):12.3f}"
    kind = rec.get("kind")
    if kind == "event":
        return f"{t}  event     {rec['text']}"
    if kind == "perturbation":
        vals = ", ".join(f"[{i}] {a:g} -> {b:g}" for i, a, b in rec.get("value_delta", []))
        head = f"{t}  MODP      {rec['attack']} {rec['src']}->{rec['dest']}"
        lines = [head + (f"  values: {vals}" if vals else "") + (f"  ({rec['warning']})" if rec.get("warning") else "")]
        lines.append(f"{'':14s}before {rec['original']}")
        lines.append(f"{'':14s}after  {rec['perturbed']}")
        return "\n".join(lines)
    data = bytes.fromhex(rec.get("hex", ""))
    return f"{t}  {rec.get('status', kind):9s} {describe(data)}\n{'':14s}{data.hex(' ')}"


@main.command()
@click.option("--config", "config_path", default=None, help="Scenario config to lint.")
@click.argument("paths", nargs=-1, type=click.Path(exists=True, dir_okay=False))
def validate(config_path, paths):
    """Lint scenario configs and feeder files (exit status 1 on any problem)."""
    targets = ([config_path] if config_path else []) + list(paths)
    if not targets:
        _fail("nothing to validate: pass --config or file paths")
    bad = 0
    for t in targets:
        problems = _lint(t)
        for p in problems:
            click.echo(p if p.startswith(t) else f"{t}: {p}", err=True)
        if not problems:
            click.echo(f"{t}: ok")
        bad += bool(problems)
    if bad:
        sys.exit(1)


def _lint(path: str) -> list[str]:
    is_feeder = False
    if not path.startswith("builtin:"):
        try:
            is_feeder = "buses" in json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            return [str(exc)]
    if is_feeder:
        try:
            load_feeder(path)
        except FeederError as exc:
            return [str(exc)]
        return []
    try:
        cfg = load_config(path)
    except (ScenarioError, AttackConfigError, TypeError) as exc:
        return [str(exc)]
    problems = []
    model = None
    try:
        model = load_feeder(cfg.feeder_path())
    except FeederError as exc:
        problems.append(f"feeder: {exc}")
    for label, ref, col in (("load profile", cfg.load_profile_path(), "multiplier"),
                            ("pv profile", cfg.pv_profile_path(), "p_avail_kw")):
        try:
            read_profile(ref, col)
        except ScenarioError as exc:
            problems.append(f"{label}: {exc}")
    if model is not None:
        addrs = {bp.address for bp in point_map(model).values()}
        loads = {ld.name for ld in model.loads}
        for a in cfg.attacks:
            if isinstance(a, (ModpAttack, DosAttack)) and a.target is not None and a.target not in addrs:
                problems.append(f"attack {a.name}: no outstation at address {a.target}")
        for ev in cfg.events:
            if ev["load"] not in loads:
                problems.append(f"event at {ev['time']}: unknown load {ev['load']!r}")
        regs = {r.id for r in model.regulators}
        for rid in cfg.initial_taps:
            if rid not in regs:
                problems.append(f"initial_taps: unknown regulator {rid!r}")
    return problems


if __name__ == "__main__":
    main()
