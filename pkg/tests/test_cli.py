import json

import pytest
from click.testing import CliRunner

from vvosim.cli import main


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    """A clean and an offset-attacked 30-minute run written through the CLI."""
    root = tmp_path_factory.mktemp("cli")
    runner = CliRunner()
    cfgs = {}
    for name in ("step_clean", "step_attack1"):
        res = runner.invoke(main, ["run", "--config", f"builtin:scenarios/{name}.json", "--out-dir", str(root)])
        assert res.exit_code == 0, res.output
        cfgs[name] = root / f"{name}.report.json"
    return root, cfgs


def test_run_writes_all_formats(runs):
    root, _ = runs
    names = sorted(p.name for p in root.iterdir())
    for stem in ("step_clean", "step_attack1"):
        for suffix in (".report.json", ".voltages.csv", ".summary.csv", ".table.txt", ".capture.jsonl"):
            assert stem + suffix in names
    rep = json.loads((root / "step_attack1.report.json").read_text())
    assert rep["capture_log"] == "step_attack1.capture.jsonl"


def test_run_single_format_and_seed(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"name": "short", "duration": 900}))
    res = CliRunner().invoke(main, ["run", "--config", str(cfg), "--out-dir", str(tmp_path / "o"),
                                    "--format", "text-table", "--seed", "3"])
    assert res.exit_code == 0, res.output
    assert sorted(p.name for p in (tmp_path / "o").iterdir()) == ["short.capture.jsonl", "short.table.txt"]
    assert "| VR1" in (tmp_path / "o" / "short.table.txt").read_text()


def test_run_with_baseline(runs, tmp_path):
    _, reps = runs
    res = CliRunner().invoke(main, ["run", "--config", "builtin:scenarios/step_attack1.json",
                                    "--out-dir", str(tmp_path), "--format", "structured",
                                    "--baseline", str(reps["step_clean"])])
    assert res.exit_code == 0, res.output
    assert "vs step_clean" in res.output
    rep = json.loads((tmp_path / "step_attack1.report.json").read_text())
    assert rep["baseline"] == "step_clean"


def test_run_reports_config_errors(tmp_path):
    cfg = tmp_path / "bad.json"
    cfg.write_text('{"duration": 100}')
    res = CliRunner().invoke(main, ["run", "--config", str(cfg), "--out-dir", str(tmp_path)])
    assert res.exit_code == 1
    assert "control period" in res.output


def test_compare_text_and_structured(runs):
    _, reps = runs
    runner = CliRunner()
    res = runner.invoke(main, ["compare", str(reps["step_attack1"]), "--baseline", str(reps["step_clean"])])
    assert res.exit_code == 0, res.output
    assert "Attack score" in res.output
    assert "| VR1" in res.output
    res = runner.invoke(main, ["compare", str(reps["step_attack1"]), "--baseline", str(reps["step_clean"]),
                               "--format", "structured", "--lam", "0.5"])
    rows = json.loads(res.output)
    assert rows["attack_damage"] > 0
    assert rows["attack_similarity"] == 6.0
    assert rows["attack_score"] == pytest.approx(rows["attack_damage"] + 3.0)


def test_compare_self_scores_zero(runs):
    _, reps = runs
    res = CliRunner().invoke(main, ["compare", str(reps["step_clean"]), "--baseline", str(reps["step_clean"]),
                                    "--format", "structured"])
    rows = json.loads(res.output)
    assert rows["attack_score"] == 0.0


def test_replay_log_shows_before_and_after(runs):
    root, _ = runs
    res = CliRunner().invoke(main, ["replay-log", str(root / "step_attack1.capture.jsonl")])
    assert res.exit_code == 0, res.output
    modp = [ln for ln in res.output.splitlines() if "MODP" in ln]
    assert modp and "[0] 1 -> 7" in modp[0]
    assert "before 0564" in res.output and "after  0564" in res.output
    assert "DIRECT_OPERATE" in res.output


def test_replay_log_filter_and_structured(runs):
    root, _ = runs
    res = CliRunner().invoke(main, ["replay-log", str(root / "step_attack1.capture.jsonl"),
                                    "--kind", "perturbation", "--format", "structured"])
    recs = [json.loads(ln) for ln in res.output.splitlines()]
    assert recs and all(r["kind"] == "perturbation" for r in recs)


def test_replay_log_bad_line(tmp_path):
    p = tmp_path / "cap.jsonl"
    p.write_text('{"kind": "event", "t": 0, "text": "x"}\nnot json\n')
    res = CliRunner().invoke(main, ["replay-log", str(p)])
    assert res.exit_code == 1
    assert "cap.jsonl:2" in res.output


def test_validate(tmp_path):
    runner = CliRunner()
    res = runner.invoke(main, ["validate", "--config", "builtin:scenarios/attack2.json"])
    assert res.exit_code == 0, res.output
    assert "ok" in res.output
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"attacks": [{"type": "dos", "target": 999}],
                               "events": [{"type": "load_step", "time": 5, "load": "nope", "factor": 2}]}))
    res = runner.invoke(main, ["validate", "--config", str(bad)])
    assert res.exit_code == 1
    assert "no outstation at address 999" in res.output
    assert "unknown load 'nope'" in res.output


def test_validate_feeder_file(tmp_path):
    from vvosim.cosim import data_path

    runner = CliRunner()
    assert runner.invoke(main, ["validate", str(data_path("ieee34.json"))]).exit_code == 0
    feeder = json.loads(data_path("ieee34.json").read_text())
    feeder["lines"].append(dict(feeder["lines"][0], to_bus=feeder["lines"][5]["to_bus"]))
    p = tmp_path / "mesh.json"
    p.write_text(json.dumps(feeder))
    res = runner.invoke(main, ["validate", str(p)])
    assert res.exit_code == 1
    assert "radial" in res.output
    assert res.output.count(str(p)) == 1


def test_validate_needs_target():
    assert CliRunner().invoke(main, ["validate"]).exit_code != 0
