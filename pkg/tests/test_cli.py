import csv

import numpy as np
import pytest

from coefid.cli import main
from coefid.mesh import Mesh, validate


def write_yaml(tmp_path, text):
    p = tmp_path / "cfg.yaml"
    p.write_text(text)
    return str(p)


def test_mesh_command(tmp_path, capsys):
    assert main(["mesh", "--out", str(tmp_path)]) == 0
    assert "nodes" in capsys.readouterr().out
    mesh = Mesh.load(tmp_path / "mesh.txt")
    assert validate(mesh) == []


def test_mesh_custom_vertices(tmp_path):
    assert main(["mesh", "--out", str(tmp_path), "--vertices", "0", "0", "1", "0", "0", "1",
                 "--edge-length", "0.2"]) == 0
    assert Mesh.load(tmp_path / "mesh.txt").area == pytest.approx(0.5)
    assert main(["mesh", "--out", str(tmp_path), "--vertices", "0", "0", "1"]) == 1


def test_direct_then_identify_roundtrip(tmp_path):
    cfg = write_yaml(tmp_path, "domain: {edge_length: 0.1}\n")
    assert main(["direct", "--config", cfg, "--N", "200", "--out", str(tmp_path / "d")]) == 0
    data = tmp_path / "d" / "observation_N200.csv"
    assert main(["identify", "--config", cfg, "--data", str(data), "--N", "50", "--coefficient", "ramp_step",
                 "--out", str(tmp_path / "i")]) == 0
    with open(tmp_path / "i" / "p_recovered.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 50
    p = np.array([float(r["p_recovered"]) for r in rows])
    ex = np.array([float(r["p_exact"]) for r in rows])
    assert np.abs(p - ex)[5:20].max() < 5.0


@pytest.mark.parametrize("scheme", ["crank_nicolson", "hybrid", "transform", "nonlinear_implicit"])
def test_identify_schemes(tmp_path, scheme):
    cfg = write_yaml(tmp_path, "domain: {edge_length: 0.15}\n")
    assert main(["direct", "--config", cfg, "--N", "20", "--out", str(tmp_path / "d")]) == 0
    code = main(["identify", "--config", cfg, "--data", str(tmp_path / "d" / "observation_N20.csv"),
                 "--scheme", scheme, "--out", str(tmp_path / "i")])
    assert code == 0


def test_identify_divisibility(tmp_path):
    cfg = write_yaml(tmp_path, "domain: {edge_length: 0.15}\n")
    main(["direct", "--config", cfg, "--N", "20", "--out", str(tmp_path / "d")])
    assert main(["identify", "--config", cfg, "--data", str(tmp_path / "d" / "observation_N20.csv"),
                 "--N", "7", "--out", str(tmp_path / "i")]) == 1


def test_identify_bad_csv(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("time,obs\n0,1\n")
    assert main(["identify", "--data", str(bad), "--out", str(tmp_path)]) == 1
    bad.write_text("t,value\n0,1\n0.3,0.5\n0.4,0.4\n")
    assert main(["identify", "--data", str(bad), "--out", str(tmp_path)]) == 1


def test_config_divisibility_error(tmp_path, capsys):
    cfg = write_yaml(tmp_path, "time: {N_data: 1000, N_inverse: [300]}\n")
    assert main(["run-config", cfg, "--out", str(tmp_path / "o")]) == 1
    assert "time.N_inverse[0]" in capsys.readouterr().err


def test_unknown_preset(tmp_path):
    assert main(["run", "fig9", "--out", str(tmp_path)]) == 1


def test_bad_arguments():
    with pytest.raises(SystemExit) as info:
        main(["identify"])
    assert info.value.code == 1


def test_degenerate_initial_state(tmp_path, capsys):
    cfg = write_yaml(tmp_path, "domain: {edge_length: 0.15}\nproblem: {u0: 0}\n"
                               "time: {N_data: 20, N_inverse: [10]}\nschemes: [crank_nicolson]\n")
    assert main(["run-config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert "numerical failure" in capsys.readouterr().err
    for f in (tmp_path / "o").rglob("*.csv"):
        text = f.read_text().lower()
        assert "nan" not in text and "inf" not in text


def test_zero_coefficient_preset(tmp_path):
    assert main(["run", "fig4", "--coefficient", "zero", "--out", str(tmp_path)]) == 0
    with open(tmp_path / "summary.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert max(float(r["max_error"]) for r in rows) < 1e-6


def test_seed_option(tmp_path):
    cfg = write_yaml(tmp_path, "domain: {edge_length: 0.15}\ntime: {N_data: 20, N_inverse: [10]}\n"
                               "noise: {level: 0.01}\n")
    main(["run-config", cfg, "--seed", "5", "--out", str(tmp_path / "a")])
    main(["run-config", cfg, "--seed", "5", "--out", str(tmp_path / "b")])
    main(["run-config", cfg, "--seed", "6", "--out", str(tmp_path / "c")])
    a = (tmp_path / "a" / "observations.csv").read_bytes()
    assert a == (tmp_path / "b" / "observations.csv").read_bytes()
    assert a != (tmp_path / "c" / "observations.csv").read_bytes()
