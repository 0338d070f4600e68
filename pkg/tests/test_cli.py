from __future__ import annotations

import json

import pytest

from coevo import cli, scenarios
from coevo.scenarios import preset_raw


def write_cfg(tmp_path, raw, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(raw))
    return str(p)


def test_validate_shipped_configs(tmp_path):
    for name in scenarios.preset_names():
        path = write_cfg(tmp_path, preset_raw(name), f"{name}.json")
        assert cli.main(["validate", "--config", path, "--quiet"]) == cli.EXIT_OK


def test_validate_bad_config_exits_2(tmp_path, capsys):
    raw = preset_raw("basic")
    raw["society"]["edges"] = [[0, 5]]
    assert cli.main(["validate", "--config", write_cfg(tmp_path, raw)]) == cli.EXIT_CONFIG
    assert "edge endpoint out of range" in capsys.readouterr().err
    assert cli.main(["validate", "--config", str(tmp_path / "missing.json")]) == cli.EXIT_CONFIG


def test_run_twice_byte_identical(tmp_path):
    path = write_cfg(tmp_path, preset_raw("basic"))
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["run", "--config", path, "--out", str(a), "--quiet"]) == 0
    assert cli.main(["run", "--config", path, "--out", str(b), "--quiet"]) == 0
    for f in ("log.jsonl", "log.csv", "detectors.json", "config.json", "seed"):
        assert (a / f).read_bytes() == (b / f).read_bytes()


def test_seed_override_changes_snapshot(tmp_path):
    path = write_cfg(tmp_path, preset_raw("basic"))
    out = tmp_path / "s"
    assert cli.main(["run", "--config", path, "--out", str(out), "--seed", "42", "--quiet"]) == 0
    assert (out / "seed").read_text() == "42\n"
    assert json.loads((out / "config.json").read_text())["seed"] == 42


def test_analyze_reproduces_detectors(tmp_path):
    path = write_cfg(tmp_path, preset_raw("basic"))
    out = tmp_path / "r"
    cli.main(["run", "--config", path, "--out", str(out), "--quiet"])
    before = (out / "detectors.json").read_bytes()
    assert cli.main(["analyze", str(out), "--quiet"]) == 0
    assert (out / "detectors.json").read_bytes() == before


def test_analyze_empty_log(tmp_path):
    (tmp_path / "log.jsonl").write_text("")
    assert cli.main(["analyze", str(tmp_path), "--quiet"]) == 0
    rep = json.loads((tmp_path / "detectors.json").read_text())
    assert rep["escape"] == [] and rep["runaway"] == []


def test_contract_violation_exits_3(tmp_path):
    raw = preset_raw("basic")
    raw["limit"] = 1
    assert cli.main(["run", "--config", write_cfg(tmp_path, raw), "--out", str(tmp_path / "o"), "--quiet"]) == 3


def test_interrupt_writes_truncation_marker(tmp_path, monkeypatch):
    path = write_cfg(tmp_path, preset_raw("basic"))
    out = tmp_path / "i"
    calls = {"n": 0}
    real = scenarios.run_simulation

    def interrupted(*args, on_record=None, **kw):
        def hook(rec):
            calls["n"] += 1
            on_record(rec)
            if calls["n"] == 2:
                raise KeyboardInterrupt

        return real(*args, on_record=hook, **kw)

    monkeypatch.setattr(scenarios, "run_simulation", interrupted)
    assert cli.main(["run", "--config", path, "--out", str(out), "--quiet"]) == cli.EXIT_INTERRUPTED
    lines = [json.loads(x) for x in (out / "log.jsonl").read_text().splitlines()]
    assert lines[-1] == {"kind": "end", "status": "truncated"}
    assert sum(1 for x in lines if x["kind"] == "iteration") == 2


def test_unknown_experiment(capsys):
    assert cli.main(["experiment", "nope"]) == cli.EXIT_CONFIG
    assert "malthus" in capsys.readouterr().err


@pytest.mark.parametrize("name", ["malthus", "runaway"])
def test_growth_presets_flag_as_designed(tmp_path, name):
    summary = scenarios.run_scenario(name, cli.parse_config(preset_raw(name)), tmp_path / name)
    if name == "malthus":
        assert summary["escape_flags"] and summary["control_escape_flags"] == []
    else:
        assert summary["runaway_flags"]
