import json
import subprocess
import sys
from pathlib import Path

import pytest

from vanetchain.cli import main
from vanetchain.experiment import read_report

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def test_capacity_csv_to_stdout(capsys):
    assert main(["capacity", "--runs", "200"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].startswith("# capacity ts=10.0")
    assert lines[1].startswith("lambda_v,lambda_mb,mu_d,ts,e_nb") and len(lines) == 5


def test_capacity_json(capsys):
    assert main(["capacity", "--runs", "0", "--ts", "30", "--format", "json"]) == 0
    rows = json.loads(capsys.readouterr().out)
    assert [r["lambda_v"] for r in rows] == [16.0, 32.0, 48.0]
    assert all(r["e_nwb"] == r["e_nv"] + r["e_nmv"] for r in rows)
    assert all(r["e_nb"] > r["e_nwb"] for r in rows)


def test_econ_writes_file(tmp_path, capsys):
    assert main(["econ", "--n", "3", "--i-steps", "4", "--size", "0", "--out", str(tmp_path)]) == 0
    err = capsys.readouterr().err
    assert "beta=9000000.0: I*=" in err and "beta=18000000.0" in err
    rows = read_report(tmp_path / "econ.csv")
    assert len(rows) == 8 and list(rows[0])[:3] == ["beta", "I", "s_star_1"]


def test_run_tiny(tmp_path, capsys):
    assert main(["run", str(CONFIGS / "tiny.yaml"), "--out", str(tmp_path), "--seed", "5"]) == 0
    assert (tmp_path / "dissemination.csv").exists()
    assert "seeds=" in (tmp_path / "final_loss.csv").read_text().splitlines()[0]


def test_run_invalid_spec_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("sim:\n  h_max: 0\n")
    assert main(["run", str(bad), "--out", str(tmp_path / "out")]) == 2
    assert "sim.h_max" in capsys.readouterr().err


def test_run_with_failed_repetition_exits_1(tmp_path):
    spec = tmp_path / "sparse.yaml"
    spec.write_text((CONFIGS / "tiny.yaml").read_text().replace("area_width_m: 600.0", "area_width_m: 2500.0")
                    .replace("area_height_m: 600.0", "area_height_m: 2500.0")
                    .replace("num_vehicles: 10", "num_vehicles: 3").replace("num_designated: 2",
                                                                            "num_designated: 1"))
    assert main(["run", str(spec), "--out", str(tmp_path / "out")]) == 1


def test_disseminate_grid_override(tmp_path, capsys):
    code = main(["disseminate", "--config", str(CONFIGS / "tiny.yaml"), "--consensus", "pofl", "--consensus", "pos",
                 "--guard", "none", "--out", str(tmp_path)])
    assert code == 0
    out = capsys.readouterr().out.splitlines()
    rows = [line for line in out if line.startswith(("pofl,", "pos,"))]
    assert len(rows) == 2


def test_ledger_verify_pass_and_tamper(tmp_path, capsys):
    assert main(["run", str(CONFIGS / "tiny.yaml"), "--out", str(tmp_path)]) == 0
    path = tmp_path / "ledger_rep0.txt"
    capsys.readouterr()
    assert main(["ledger", "verify", str(path)]) == 0
    assert "PASS" in capsys.readouterr().out
    lines = path.read_text().splitlines()
    # Flip one hex digit inside the first keyblock after genesis.
    target = next(i for i, line in enumerate(lines) if line.startswith("K") and i > 1)
    line = lines[target]
    pos = len(line) - 5
    lines[target] = line[:pos] + ("0" if line[pos] != "0" else "1") + line[pos + 1:]
    path.write_text("\n".join(lines) + "\n")
    assert main(["ledger", "verify", str(path)]) == 1
    assert "FAIL" in capsys.readouterr().out


def test_ledger_verify_unreadable(tmp_path):
    assert main(["ledger", "verify", str(tmp_path / "missing.txt")]) == 2


def test_console_script_help():
    out = subprocess.run([sys.executable, "-m", "vanetchain.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("run", "capacity", "econ", "disseminate", "ledger"):
        assert cmd in out.stdout


def test_unknown_command_is_an_error():
    with pytest.raises(SystemExit) as exc:
        main(["bogus"])
    assert exc.value.code == 2
