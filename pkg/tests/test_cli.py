from __future__ import annotations

import json

import pytest

from superclt.cli import main
from superclt.schema import SCHEMA_VERSION


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_validate_s1(capsys, scenario_dir):
    code, out, _ = run(capsys, "validate", scenario_dir / "S1.cfg")
    assert code == 0
    assert "lambda1=-0.5\n" in out and "M=1.5\n" in out


def test_validate_invalid_scenario_exits_1(capsys, tmp_path, scenario_dir):
    d = json.loads((scenario_dir / "S1.cfg").read_text())
    d["branching"]["b"] = [-0.1]
    p = tmp_path / "bad.cfg"
    p.write_text(json.dumps(d))
    code, out, _ = run(capsys, "validate", p)
    assert code == 1 and "b must be nonnegative" in out


def test_usage_errors(capsys, tmp_path, scenario_dir):
    assert run(capsys, "validate", tmp_path / "missing.cfg")[0] == 2
    code, _, err = run(capsys, "validate", scenario_dir / "S1.cfg", "--bogus")
    assert code == 2 and "usage" in err
    assert run(capsys, "nonsense")[0] == 2
    assert run(capsys, "simulate", scenario_dir / "S1.cfg", "--replicates", "0")[0] == 2


def test_clt_constants(capsys, scenario_dir):
    code, out, _ = run(capsys, "clt-constants", scenario_dir / "S2a1.cfg", "--f", "phi2")
    doc = json.loads(out)
    assert code == 0
    assert doc["sigma2"] == pytest.approx(0.235702, abs=1e-6)
    assert doc["schema_version"] == SCHEMA_VERSION
    assert run(capsys, "clt-constants", scenario_dir / "S2a1.cfg", "--h", "phi2")[0] == 2


def test_spectral_and_moments(capsys, scenario_dir):
    code, out, _ = run(capsys, "spectral", scenario_dir / "S2a4.cfg")
    rows = [json.loads(x) for x in out.splitlines()]
    assert code == 0 and [r["lambda"] for r in rows] == pytest.approx([-4.0, -2.0])
    code, out, _ = run(capsys, "moments", scenario_dir / "S1.cfg", "--f", "one", "--t", "1")
    assert code == 0
    header, row = out.splitlines()
    assert header.split(",")[:4] == ["t", "f_name", "mean", "second"]
    assert float(row.split(",")[2]) == pytest.approx(1.9082097789801795, abs=1e-12)


def test_laplace(capsys, scenario_dir):
    code, out, _ = run(capsys, "laplace", scenario_dir / "S1.cfg", "--theta", "1", "--t", "1")
    assert code == 0
    assert float(out.splitlines()[1].split(",")[3]) == pytest.approx(0.301194211912, abs=1e-10)
    assert run(capsys, "laplace", scenario_dir / "S2a1.cfg", "--f", "phi2")[0] == 2


def test_simulate_writes_csv_and_manifest(capsys, tmp_path, scenario_dir):
    out_dir = tmp_path / "o"
    args = ("simulate", scenario_dir / "S2a1.cfg", "--replicates", "3", "--dt", "0.1", "--snapshots", "0.5,1",
            "--seed", "4", "--out", out_dir)
    assert run(capsys, *args)[0] == 0
    csvs = sorted(out_dir.glob("*.csv"))
    assert len(csvs) == 1
    lines = csvs[0].read_text().splitlines()
    assert lines[0] == "replicate,stream_id,t,y_1,y_2,z_1,z_2"
    assert len(lines) == 1 + 3 * 2
    manifest = json.loads(next(out_dir.glob("*.manifest.json")).read_text())
    assert manifest["master_seed"] == 4 and manifest["exit_code"] == 0
    assert manifest["outputs"] == [csvs[0].name]
    # identical rerun is fine; a differing result under the same name is refused
    assert run(capsys, *args)[0] == 0
    csvs[0].write_text("tampered\n")
    code, _, err = run(capsys, *args)
    assert code == 2 and "refusing to overwrite" in err


def test_martingale_cli_refuses_small_runs(capsys, scenario_dir):
    code, _, err = run(capsys, "martingale-test", scenario_dir / "S1.cfg", "--replicates", "10")
    assert code == 1 and "insufficient replicates" in err


def test_full_battery_with_ten_replicates(capsys, tmp_path):
    code, out, _ = run(capsys, "full-battery", "--replicates", "10", "--out", tmp_path)
    assert code == 1
    assert "insufficient replicates" in out
    assert list(tmp_path.glob("full-battery_*.manifest.json"))


def test_noise_free_battery_passes(capsys, tmp_path, scenario_dir):
    code, out, _ = run(capsys, "full-battery", scenario_dir / "D.cfg", "--no-bias-study", "--out", tmp_path)
    assert code == 0, out
    assert "full-battery: PASS" in out
