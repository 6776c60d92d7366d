import csv
import io
import subprocess
import sys

import pytest

from npinteq.cli import run


def call(*argv):
    out = io.StringIO()
    code = run(list(argv), out)
    return code, out.getvalue().splitlines()


def test_variance_triangle():
    code, lines = call("variance", "--model", "ic-triangle", "--epsilon", "0.1",
                       "--functional", "mean", "--grid", "2000")
    assert code == 0
    assert lines[0].startswith("# variance ")
    label, value, grid, resid = lines[1].split(",")
    assert label == "mean" and grid == "2000"
    assert float(value) == pytest.approx(0.11427, abs=5e-4)


def test_fit_cs_negative_z(tmp_path, capsys):
    p = tmp_path / "cs.csv"
    p.write_text("z,delta\n0.2,1\n-0.4,0\n")
    code, _ = call("fit-cs", str(p))
    assert code == 2
    assert "line 3, column z" in capsys.readouterr().err


def test_fit_cs_writes_fit(tmp_path):
    p = tmp_path / "cs.csv"
    p.write_text("z,delta\n0.2,0\n0.5,1\n0.7,1\n")
    out = tmp_path / "F.csv"
    code, lines = call("fit-cs", str(p), "--out", str(out))
    assert code == 0 and lines[1] == "jumps=1,total_mass=1.0"
    assert out.exists()


def test_local_phi_doubles_jump_node(tmp_path):
    out = tmp_path / "phi.csv"
    code, lines = call("phi", "--model", "deconv-elbow", "--t", "0.5", "--grid", "400",
                       "--out", str(out))
    assert code == 0 and "jump_at=0.5" in lines[1]
    rows = list(csv.reader(open(out)))
    assert rows[0] == ["x", "phi"]
    xs = [float(r[0]) for r in rows[1:]]
    assert xs.count(0.5) == 2
    assert all(b >= a for a, b in zip(xs, xs[1:]))


def test_simulate_needs_seed(capsys):
    code, _ = call("simulate", "--n", "50", "--reps", "5")
    assert code == 2
    assert "--seed" in capsys.readouterr().err
    code, _ = call("fit-deconv", "--model", "deconv-elbow", "--n", "50")
    assert code == 2


def test_simulate_ledger(tmp_path):
    out = tmp_path / "ledger.csv"
    code, lines = call("simulate", "--n", "50", "--reps", "8", "--seed", "3", "--out", str(out))
    assert code == 0
    rows = list(csv.reader(open(out)))
    assert rows[0] == ["config_hash", "estimate", "se", "reps", "n", "seed"]
    assert lines[1].split(",")[0] == rows[1][0]
    again = call("simulate", "--n", "50", "--reps", "8", "--seed", "3")[1]
    assert again[1] == lines[1]


def test_unknown_verb_and_flag():
    with pytest.raises(SystemExit) as exc:
        run(["explode"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        run(["variance", "--colour", "red"])
    assert exc.value.code == 2


def test_console_entry_point():
    res = subprocess.run([sys.executable, "-m", "npinteq", "xi", "--t", "0.5"],
                         capture_output=True, text=True)
    assert res.returncode == 0
    assert res.stdout.startswith("# xi ")
    assert "scale=0.347" in res.stdout


def test_config_file_and_precedence(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment\nmodel = deconv-elbow\nt = 0.3\n")
    code, lines = call("xi", "--config", str(cfg))
    assert code == 0 and "model=deconv-elbow" in lines[0] and lines[1].startswith("t=0.3,")
    code, lines = call("xi", "--config", str(cfg), "--t", "0.5")
    assert "t=0.5" in lines[0]
    assert float(lines[1].split("standardizing_factor=")[1]) == pytest.approx(2.202, abs=1e-3)


def test_bad_config_file(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("model = deconv-elbow\nwidth = 3\n")
    assert call("xi", "--config", str(cfg), "--t", "0.5")[0] == 2
    assert "line 2" in capsys.readouterr().err
    cfg.write_text("model = nothing\n")
    assert call("xi", "--config", str(cfg), "--t", "0.5")[0] == 2


def test_deconv_uniform_variance():
    code, lines = call("variance", "--model", "deconv-uniform")
    assert code == 0
    assert float(lines[1].split(",")[1]) == pytest.approx(1 / 6)


def test_msle_curve(tmp_path):
    out = tmp_path / "msle.csv"
    code, lines = call("msle", "--n", "300", "--seed", "2", "--f0", "quadratic", "--grid", "100",
                       "--out", str(out))
    assert code == 0
    rows = list(csv.reader(open(out)))
    assert rows[0] == ["x", "msle", "mle", "F0"] and len(rows) > 50
