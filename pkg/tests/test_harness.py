import csv
import json
import time
from pathlib import Path

import numpy as np
import pytest

from skdvb import cli
from skdvb.harness import (
    OUT_ENV,
    PRESETS,
    ConfigError,
    canonical_json,
    load_config,
    parse_config,
    preset,
    read_csv,
    report,
    run,
    run_directory,
    write_csv,
)

SMALL_SIM = {"kind": "simulate", "N": 8, "seed": 5,
             "simulate": {"T": 0.02, "dt": 1e-3, "paths": 3, "initial": {"kind": "white-noise"}}}


def payload_bytes(run_dir: Path) -> dict[str, bytes]:
    return {p.name: p.read_bytes() for p in sorted(run_dir.iterdir()) if p.is_file() and p.name != "manifest.json"}


# --------------------------------------------------------------------------- configuration


def test_defaults_and_hash_ignore_output_location():
    a = parse_config({"kind": "simulate"})
    b = parse_config({"kind": "simulate", "out": "/elsewhere", "threads": 4})
    assert a.config_hash() == b.config_hash()
    assert parse_config({"kind": "simulate", "seed": 1}).config_hash() != a.config_hash()
    assert set(a.resolved()) >= {"kind", "seed", "N", "phi", "simulate"}
    assert "invariance" not in a.resolved()


@pytest.mark.parametrize(
    "data, where",
    [
        ({"kind": "simulate", "simulate": {"bogus": 1}}, "simulate.bogus"),
        ({"kind": "simulate", "simulate": {"dt": -1}}, "simulate.dt"),
        ({"kind": "teleport"}, "kind"),
        ({"kind": "simulate", "seed": -1}, "seed"),
        ({"kind": "simulate", "seed": 2**64}, "seed"),
        ({"kind": "simulate", "phi": {"power": 1, "table": [1, 2]}}, "phi"),
        ({"kind": "mild", "mild": {"eps": 0.1}}, "mild.eps"),
        ({"kind": "simulate", "N": 8, "M": 4}, "<root>"),
    ],
)
def test_schema_errors_carry_a_path(data, where):
    with pytest.raises(ConfigError) as info:
        parse_config(data)
    assert any(loc == where for loc, _ in info.value.errors), info.value.errors


def test_non_mapping_rejected():
    with pytest.raises(ConfigError):
        parse_config([1, 2])


def test_load_yaml_with_overrides(tmp_path):
    path = tmp_path / "exp.yaml"
    path.write_text("kind: simulate\nN: 8\nseed: 3\nsimulate:\n  T: 0.01\n  dt: 0.001\n")
    cfg = load_config(path, seed=11)
    assert cfg.seed == 11 and cfg.N == 8 and cfg.simulate.T == 0.01
    bad = tmp_path / "bad.yaml"
    bad.write_text("kind: [simulate\n")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_every_preset_validates():
    for name in PRESETS:
        assert preset(name).name == name
    with pytest.raises(ConfigError):
        preset("no-such-preset")


# --------------------------------------------------------------------------- serialisation


def test_csv_is_rfc4180_with_round_trip_floats(tmp_path):
    x = [0.1, 1 / 3, 2.0**-1074, -1e300, 123456789.123456789]
    path = tmp_path / "t.csv"
    write_csv(path, ["label", "value", "flag"], [[f"r,{i}", v, i % 2 == 0] for i, v in enumerate(x)])
    raw = path.read_bytes()
    assert raw.startswith(b"label,value,flag\r\n") and raw.count(b"\r\n") == len(x) + 1
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[1][0] == "r,0"
    assert [float(r[1]) for r in rows[1:]] == x
    assert rows[1][2] == "true" and rows[2][2] == "false"
    header, body = read_csv(path)
    assert header == ["label", "value", "flag"] and len(body) == len(x)


def test_json_key_order_is_stable():
    assert canonical_json({"b": 1, "a": {"d": 2, "c": np.float64(0.5)}}) == canonical_json(
        {"a": {"c": 0.5, "d": 2}, "b": 1})
    assert json.loads(canonical_json({"x": float("nan")}))["x"] is None


# --------------------------------------------------------------------------- runs


def test_simulate_zero_horizon_gives_single_snapshot(tmp_path):
    cfg = parse_config({"kind": "simulate", "N": 8, "simulate": {"T": 0.0, "paths": 2, "snapshots": True}})
    out = run(cfg, tmp_path)
    assert out.status == 0 and out.passed
    header, rows = read_csv(out.run_dir / "trajectory.csv")
    assert len(rows) == 2 and {float(r[header.index("time")]) for r in rows} == {0.0}
    manifest = json.loads((out.run_dir / "manifest.json").read_text())
    assert manifest["status"] == "ok" and not manifest["partial"]
    assert "trajectory.csv" in manifest["files"] and "snapshots.bin" in manifest["files"]
    assert manifest["config_hash"] == cfg.config_hash()
    assert {"numpy", "scipy", "python"} <= set(manifest["versions"])


def test_rerun_and_threads_are_byte_identical(tmp_path):
    cfg = parse_config({**SMALL_SIM, "simulate": {**SMALL_SIM["simulate"], "paths": 600}})
    first = run(cfg, tmp_path / "a")
    second = run(cfg, tmp_path / "b")
    threaded = run(cfg.model_copy(update={"threads": 3}), tmp_path / "c")
    assert first.run_dir.name == second.run_dir.name == threaded.run_dir.name
    a = payload_bytes(first.run_dir)
    assert a == payload_bytes(second.run_dir) == payload_bytes(threaded.run_dir)
    assert "trajectory.csv" in a and "results.json" in a


def test_invariance_threads_identical(tmp_path):
    cfg = preset("invariance-smoke", seed=9)
    one = run(cfg, tmp_path / "a")
    three = run(cfg.model_copy(update={"threads": 3}), tmp_path / "b")
    assert payload_bytes(one.run_dir) == payload_bytes(three.run_dir)


def test_runtime_failure_is_flagged_partial(tmp_path):
    cfg = parse_config({"kind": "simulate", "N": 8, "simulate": {"T": 0.0105, "dt": 1e-3}})
    out = run(cfg, tmp_path)
    assert out.status == 1 and not out.passed and "whole number" in out.error
    manifest = json.loads((out.run_dir / "manifest.json").read_text())
    assert manifest["partial"] and manifest["status"] == "failed"
    assert "Run failed" in (out.run_dir / "summary.md").read_text()
    assert json.loads((out.run_dir / "results.json").read_text())["complete"] is False


def test_output_root_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(OUT_ENV, str(tmp_path / "env"))
    cfg = parse_config({"kind": "simulate", "N": 8, "simulate": {"T": 0.0}})
    assert run_directory(cfg) == tmp_path / "env" / f"simulate-{cfg.config_hash()[:12]}"
    assert run_directory(cfg, tmp_path / "flag").parent == tmp_path / "flag"


def test_smoke_preset_is_fast_and_has_verdict(tmp_path):
    start = time.perf_counter()
    out = run(preset("invariance-smoke"), tmp_path)
    assert time.perf_counter() - start < 60
    payload = json.loads((out.run_dir / "invariance.json").read_text())
    assert payload["reports"][0]["paths"] == 1000 and payload["reports"][0]["n_modes"] == 8
    results = json.loads((out.run_dir / "results.json").read_text())
    assert results["verdict"] and out.status == 0


# --------------------------------------------------------------------------- reports


def test_report_needs_manifest(tmp_path):
    with pytest.raises(FileNotFoundError):
        report(tmp_path)


def test_report_on_empty_results(tmp_path):
    cfg = parse_config({"kind": "lemma-check", "lemma": {"checks": []}})
    out = run(cfg, tmp_path)
    assert json.loads((out.run_dir / "results.json").read_text())["records"] == 0
    text = report(out.run_dir).read_text()
    assert "zero records" in text


def test_energy_balance_report_pairs_drifts(tmp_path):
    cfg = parse_config({"kind": "simulate", "N": 8, "phi": {"power": 1.0},
                        "simulate": {"mode": "energy-balance", "T": 0.05, "dt": 1e-3, "paths": 40,
                                     "checkpoints": 5}})
    out = run(cfg, tmp_path)
    header, rows = read_csv(out.run_dir / "energy_balance.csv")
    assert {"observed_drift", "predicted_drift", "z"} <= set(header) and len(rows) == 5
    report(out.run_dir)
    sh, srows = read_csv(out.run_dir / "series" / "energy_drift.csv")
    assert sh == ["time", "observed_drift", "predicted_drift"]
    assert [r[1:] for r in srows] == [[r[header.index("observed_drift")], r[header.index("predicted_drift")]]
                                      for r in rows]


def test_report_zscores_match_raw_json(tmp_path):
    out = run(preset("invariance-smoke", seed=2), tmp_path)
    report(out.run_dir)
    raw = json.loads((out.run_dir / "invariance.json").read_text())
    _, rows = read_csv(out.run_dir / "series" / "zscores.csv")
    stats = raw["reports"][0]["statistics"]
    assert len(rows) == len(stats)
    for r in rows:
        assert float(r[3]) == stats[r[2]]["z"] and float(r[4]) == stats[r[2]]["p"]


def test_bilinear_report_histogram(tmp_path):
    cfg = parse_config({"kind": "bilinear", "bilinear": {"modes": [4, 8], "samples": 6, "T": 0.5}})
    out = run(cfg, tmp_path)
    report(out.run_dir)
    _, rows = read_csv(out.run_dir / "series" / "ratio_histogram.csv")
    counts = {}
    for r in rows:
        counts[r[0]] = counts.get(r[0], 0) + int(r[3])
    assert counts == {"4": 6, "8": 6}


# --------------------------------------------------------------------------- CLI


def test_cli_preset_and_report(tmp_path, capsys):
    assert cli.main(["invariance", "--preset", "invariance-smoke", "--out", str(tmp_path), "--threads", "2"]) == 0
    lines = capsys.readouterr().out.splitlines()
    run_dir = Path(lines[0])
    assert run_dir.parent == tmp_path and any(line.startswith("PASS") for line in lines[1:])
    assert cli.main(["report", str(run_dir)]) == 0
    assert (run_dir / "report.md").is_file()


def test_cli_seed_override_and_config_file(tmp_path, capsys):
    path = tmp_path / "sim.yaml"
    path.write_text("kind: simulate\nN: 8\nsimulate:\n  T: 0.0\n")
    assert cli.main(["simulate", "--config", str(path), "--seed", "0xff", "--out", str(tmp_path)]) == 0
    run_dir = Path(capsys.readouterr().out.splitlines()[0])
    assert json.loads((run_dir / "manifest.json").read_text())["seed"] == 255


def test_cli_errors(tmp_path, capsys):
    path = tmp_path / "sim.yaml"
    path.write_text("kind: simulate\n")
    assert cli.main(["mild", "--config", str(path)]) == 2
    assert "kind" in capsys.readouterr().err
    path.write_text("kind: simulate\nsimulate:\n  paths: 0\n")
    assert cli.main(["simulate", "--config", str(path)]) == 2
    assert "simulate.paths" in capsys.readouterr().err
    assert cli.main(["simulate", "--config", str(tmp_path / "missing.yaml")]) == 2
    assert cli.main(["report", str(tmp_path)]) == 2
    with pytest.raises(SystemExit):
        cli.main(["simulate", "--seed", "-1"])
    with pytest.raises(SystemExit):
        cli.main(["simulate", "--preset", "invariance-smoke", "--config", str(path)])
