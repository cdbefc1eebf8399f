import csv
import math

import numpy as np
import pytest

from fkstable import cli
from fkstable.config import DEFAULTS, UnknownKeyError, load_config
from fkstable.verify import BoundReport, Check

SMALL_GRID = "[grid]\ntime_nodes = 16\nspace_nodes = 128\n"


def write_config(path, text):
    path.write_text(text)
    return str(path)


def read_csv(path):
    with open(path) as fh:
        body = [line for line in fh if not line.startswith("#")]
    return list(csv.DictReader(body))


def header_lines(path):
    with open(path) as fh:
        return [line.rstrip("\n") for line in fh if line.startswith("#")]


def test_every_key_has_a_default():
    cfg = load_config()
    for section, keys in DEFAULTS.items():
        for key, (default, doc) in keys.items():
            assert cfg.get(section, key) == default
            assert doc


def test_unknown_key_names_the_key(tmp_path, capsys):
    path = write_config(tmp_path / "bad.ini", "[model]\nalhpa = 1\n")
    with pytest.raises(UnknownKeyError, match="alhpa"):
        load_config(path)
    assert cli.main(["validate", "--config", path, "--out", str(tmp_path)]) == 1
    assert "alhpa" in capsys.readouterr().err


def test_unknown_section(tmp_path, capsys):
    path = write_config(tmp_path / "bad.ini", "[modle]\nname = cauchy\n")
    assert cli.main(["validate", "--config", path, "--out", str(tmp_path)]) == 1
    assert "modle" in capsys.readouterr().err


def test_missing_files(tmp_path):
    assert cli.main(["validate", "--config", str(tmp_path / "none.ini"), "--out", str(tmp_path)]) == 1
    path = write_config(tmp_path / "t.ini", "[model]\nname = table\ntable = missing.csv\n")
    assert cli.main(["qn", "--config", path, "--out", str(tmp_path)]) == 1


def test_bad_value_is_input_error(tmp_path):
    path = write_config(tmp_path / "v.ini", "[sim]\nepsilon = small\n")
    assert cli.main(["mc", "--config", path, "--out", str(tmp_path)]) == 1


def test_validation_failure_exit_code(tmp_path):
    path = write_config(tmp_path / "v.ini", "[model]\nname = stable\nalpha = 2.5\n")
    assert cli.main(["validate", "--config", path, "--out", str(tmp_path)]) == 2
    assert "invalid" in (tmp_path / "validate.txt").read_text()
    path = write_config(tmp_path / "h.ini", "[perturbation]\nname = holder\nbeta = 0.5\n")
    assert cli.main(["qn", "--config", path, "--out", str(tmp_path)]) == 2


def test_identity_check(tmp_path):
    rc = cli.main(["identity-check", "--n-max", "6", "--trials", "100", "--seed", "1", "--out", str(tmp_path)])
    assert rc == 0
    rows = read_csv(tmp_path / "identity.csv")
    assert len(rows) == 600
    assert list(rows[0]) == ["trial", "n", "lhs", "rhs", "residual"]
    assert max(float(r["residual"]) for r in rows) <= 1e-10


def test_identity_check_flags_failure(tmp_path):
    rc = cli.main(["identity-check", "--n-max", "2", "--trials", "5", "--tol", "-1", "--out", str(tmp_path)])
    assert rc == 3


def test_density_zero_perturbation_is_baseline(tmp_path):
    path = write_config(tmp_path / "z.ini", "[perturbation]\nname = zero\n" + SMALL_GRID
                        + "[series]\nx = 0,0.3\nz = -0.4,0,1.7\n")
    assert cli.main(["density", "--config", path, "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "density.csv")
    assert len(rows) == 2 * 2 * 3
    for r in rows:
        assert abs(float(r["q"]) - float(r["p"])) <= 1e-12


def test_header_records_run(tmp_path):
    path = write_config(tmp_path / "c.ini", SMALL_GRID)
    assert cli.main(["kato", "--config", path, "--seed", "7", "--out", str(tmp_path)]) == 0
    head = header_lines(tmp_path / "kato.csv")
    assert head[0].startswith("# fkstable ")
    assert any(h.startswith("# config_sha256 ") and len(h.split()[-1]) == 64 for h in head)
    assert "# seed 7" in head
    assert "# [grid]" in head and "# time_nodes = 16" in head
    rows = read_csv(tmp_path / "kato.csv")
    for r in rows:
        assert float(r["C_t"]) == pytest.approx(1.6 * float(r["t"]), rel=1e-6)


def test_outputs_are_deterministic(tmp_path):
    path = write_config(tmp_path / "c.ini", "[sim]\npaths = 3000\n")
    for sub in ("simulate", "mc"):
        a, b = tmp_path / "a", tmp_path / "b"
        assert cli.main([sub, "--config", path, "--out", str(a)]) == 0
        assert cli.main([sub, "--config", path, "--out", str(b), "--threads", "0"]) == 0
        name = f"{sub}.csv"
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_simulate_columns(tmp_path):
    path = write_config(tmp_path / "c.ini", "[model]\nname = isotropic\ndimension = 2\nalpha = 1.5\n"
                        "[perturbation]\nname = zero\n[sim]\npaths = 50\nx0 = 1,2\n")
    assert cli.main(["simulate", "--config", path, "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "simulate.csv")
    assert list(rows[0]) == ["path_id", "n_jumps", "A_t", "X_t_1", "X_t_2"]
    assert [int(r["path_id"]) for r in rows] == list(range(50))


def test_mc_estimators(tmp_path):
    path = write_config(tmp_path / "c.ini", "[sim]\npaths = 20000\nestimator = moment\nmoment = 1\n")
    assert cli.main(["mc", "--config", path, "--out", str(tmp_path)]) == 0
    (row,) = read_csv(tmp_path / "mc.csv")
    exact = 0.1 * 4 / math.pi
    assert abs(float(row["estimate"]) - exact) <= 4 * float(row["std_error"])
    bad = write_config(tmp_path / "d.ini", "[sim]\nestimator = median\n")
    assert cli.main(["mc", "--config", bad, "--out", str(tmp_path)]) == 1


def test_qn_and_constants(tmp_path):
    path = write_config(tmp_path / "c.ini", SMALL_GRID + "[series]\nn_max = 4\norders = 0,2\n")
    assert cli.main(["qn", "--config", path, "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "qn.csv")
    assert {r["n"] for r in rows} == {"0", "2"}
    assert all(abs(float(r["q"])) <= float(r["qbar"]) for r in rows)
    assert cli.main(["constants", "--config", path, "--out", str(tmp_path)]) == 0
    text = (tmp_path / "constants.txt").read_text()
    assert "k = 173" in text and "self-convergence" in text
    table = read_csv(tmp_path / "series_table.csv")
    assert list(table[0]) == ["n", "t", "x", "z", "q", "qbar"]


def test_bounds_report_exit_codes(tmp_path, monkeypatch):
    path = write_config(tmp_path / "c.ini", SMALL_GRID + "[series]\nn_max = 6\n[verify]\ninclude_mc = false\n")
    out = tmp_path / "rep" / "report.txt"
    assert cli.main(["bounds-report", "--config", path, "--out", str(out)]) == 0
    assert "summary:" in out.read_text()

    import fkstable.verify as verify

    def failing(*args, **kwargs):
        return BoundReport([Check("forced", "x <= y", "test", -1.0)]), None, None

    monkeypatch.setattr(verify, "bounds_report", failing)
    assert cli.main(["bounds-report", "--config", path, "--out", str(out)]) == 3


def test_set_override_and_help(capsys):
    cfg = load_config(None, ["sim.paths=10", "model.alpha = 1.5"])
    assert cfg.int("sim", "paths") == 10 and cfg.float("model", "alpha") == 1.5
    with pytest.raises(UnknownKeyError):
        load_config(None, ["sim.pahts=10"])
    with pytest.raises(SystemExit) as exc:
        cli.main(["--help"])
    assert exc.value.code == 0
    assert "model.alpha" in capsys.readouterr().out


def test_table_baseline_from_csv(tmp_path):
    ts = np.linspace(0.05, 0.6, 12)
    xs = np.linspace(-10, 10, 81)
    with open(tmp_path / "p.csv", "w") as fh:
        fh.write("t,x,y,p\n")
        for t in ts:
            for x in xs:
                for y in xs:
                    fh.write(f"{t},{x},{y},{t / math.pi / (t * t + (x - y) ** 2)}\n")
    path = write_config(tmp_path / "c.ini", f"[model]\nname = table\ntable = {tmp_path / 'p.csv'}\n")
    assert cli.main(["validate", "--config", path, "--out", str(tmp_path)]) == 0
