import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ssblab.cli import main
from ssblab.io import (config_from_mapping, dumps, emit_results, fmt, histogram_csv, operator_csv, parse_config,
                       series_csv)
from ssblab.protocol import ConfigError, ProtocolConfig, run_quench

SMALL = dict(n=7, t_max=10.0, n_times=11, hist_samples=10, n_long=3)


def write_config(path, data):
    path.write_text(json.dumps(data))
    return path


# ---------------------------------------------------------------- config parsing


def test_parse_config_example(tmp_path):
    cfg = parse_config(write_config(tmp_path / "c.json", {"n": 11, "alpha": 1.5, "h2": 0.4, "epsilons": [0.01, 1]}))
    assert cfg == ProtocolConfig(n=11, alpha=1.5, h2=0.4, epsilons=(0.01, 1.0))
    assert parse_config(write_config(tmp_path / "d.json", {"n": 5.0})).n == 5


@pytest.mark.parametrize("data,key", [({"n": 9, "colour": 1}, "colour"), ({"alpha": 1.0}, "n"),
                                      ({"n": "nine"}, "n"), ({"n": 9, "p": "half"}, "p"),
                                      ({"n": 9, "fit_gge": 1}, "fit_gge"), ({"n": 9, "epsilons": [0.1, "x"]},
                                                                           "epsilons[1]"),
                                      ({"n": 9, "model": 3}, "model"), ({"n": 9, "p": 2.0}, "p"),
                                      ({"n": 2.5}, "n")])
def test_parse_config_errors_name_key(data, key):
    with pytest.raises(ConfigError) as exc:
        config_from_mapping(data)
    assert exc.value.key == key


def test_parse_config_bad_files(tmp_path):
    with pytest.raises(ConfigError):
        parse_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{n: 3")
    with pytest.raises(ConfigError):
        parse_config(bad)
    with pytest.raises(ConfigError):
        config_from_mapping([1, 2])


@given(st.integers(2, 24), st.floats(0, 3), st.floats(0, 1), st.floats(-1, 1).filter(lambda x: x != 0))
def test_config_round_trip(n, alpha, p, eps):
    cfg = ProtocolConfig(n=n, alpha=alpha, p=p, epsilon=eps, epsilons=(eps, 2 * eps))
    text = dumps(cfg.to_dict())
    assert config_from_mapping(json.loads(text)) == cfg


# ---------------------------------------------------------------- formatting


def test_fmt_examples():
    assert fmt(0.1) == "0.10000000000000001"
    assert fmt(3) == "3" and fmt(True) == "true"
    assert fmt(math.nan) == "NaN" and fmt(-math.inf) == "-Infinity"
    assert float(fmt(1 / 3)) == 1 / 3


def test_dumps_nested():
    text = dumps({"a": [1, 2.5], "b": {"c": None, "d": "x"}, "e": []})
    assert json.loads(text) == {"a": [1, 2.5], "b": {"c": None, "d": "x"}, "e": []}
    with pytest.raises(TypeError):
        dumps(object())


def test_empty_outputs_are_header_only():
    assert series_csv(None) == "t,m,W,C,K,Pi,E\n"
    assert histogram_csv(None) == "m,mean_p,std_p\n"
    res = run_quench(ProtocolConfig(**dict(SMALL, n_times=0, hist_samples=0), fit_gge=False))
    assert series_csv(res.series) == "t,m,W,C,K,Pi,E\n"


def test_operator_csv_triplets():
    text = operator_csv(np.array([[1.0, 2j], [-2j, 0.0]]))
    assert text.splitlines() == ["row,col,re,im", "0,0,1,0", "0,1,0,2", "1,0,0,-2"]


# ---------------------------------------------------------------- emission


@pytest.fixture(scope="module")
def quench_result():
    return run_quench(ProtocolConfig(**SMALL))


def test_emit_file_set(tmp_path, quench_result):
    digests = emit_results(quench_result, tmp_path)
    names = {p.name for p in tmp_path.iterdir()}
    assert names == {"config.json", "series.csv", "hist.csv", "gge.json", "long.csv", "charge_grid.csv",
                     "scalars.json", "manifest.json"}
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["files"] == digests
    assert manifest["config"]["n"] == 7
    rows = (tmp_path / "series.csv").read_text().splitlines()
    assert rows[0] == "t,m,W,C,K,Pi,E" and len(rows) == 12
    assert config_from_mapping(json.loads((tmp_path / "config.json").read_text())) == ProtocolConfig(**SMALL)


def test_emit_is_byte_stable(tmp_path):
    cfg = ProtocolConfig(**SMALL)
    a, b = tmp_path / "a", tmp_path / "b"
    emit_results(run_quench(cfg), a)
    emit_results(run_quench(cfg), b)
    for f in a.iterdir():
        if f.name != "manifest.json":
            assert f.read_bytes() == (b / f.name).read_bytes(), f.name


def test_emit_unwritable(tmp_path, quench_result):
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(OSError):
        emit_results(quench_result, blocker / "sub")


# ---------------------------------------------------------------- command line


def test_cli_basis(capsys, tmp_path):
    assert main(["basis", "--n", "19"]) == 0
    assert capsys.readouterr().out.strip() == "14310"
    assert main(["basis", "--n", "4", "--parity", "+", "--out", str(tmp_path / "b.csv")]) == 0
    lines = (tmp_path / "b.csv").read_text().splitlines()
    assert lines[0] == "rep_bits,orbit_size,parity" and len(lines) == 5


def test_cli_operator_and_spectrum(capsys):
    assert main(["operator", "--n", "2", "--name", "Pi"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "row,col,re,im" and len(out) == 4
    assert main(["spectrum", "--n", "5", "--h", "0.3"]) == 0
    rows = capsys.readouterr().out.splitlines()
    assert rows[0] == "index,energy,parity" and len(rows) == 9
    energies = [float(r.split(",")[1]) for r in rows[1:]]
    assert energies == sorted(energies)


def test_cli_operator_models(capsys, tmp_path):
    assert main(["operator", "--n", "20", "--model", "fully-connected", "--h", "0.0"]) == 0
    rows = capsys.readouterr().out.splitlines()[1:]
    assert max(int(r.split(",")[0]) for r in rows) == 20
    assert main(["operator", "--n", "5", "--model", "tfim", "--h", "0.3", "--dump", str(tmp_path / "h.csv")]) == 0
    tfim = (tmp_path / "h.csv").read_text()
    assert main(["operator", "--n", "5", "--model", "perturbed", "--h", "0.3", "--eps", "0"]) == 0
    assert capsys.readouterr().out == tfim
    with pytest.raises(SystemExit):
        main(["operator", "--n", "5", "--model", "tfim", "--eps", "0.1"])


def test_cli_quench_and_distribution(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", SMALL)
    assert main(["quench", "--config", str(cfg), "--out", str(tmp_path / "q")]) == 0
    gge = json.loads(capsys.readouterr().out)
    assert gge["lambda_pi"] == 0
    assert (tmp_path / "q" / "manifest.json").exists()
    assert main(["quench", "--config", str(cfg), "--out", str(tmp_path / "s.csv")]) == 0
    capsys.readouterr()
    assert (tmp_path / "s.csv").read_text().startswith("t,m,W,C,K,Pi,E\n")
    assert main(["distribution", "--config", str(cfg)]) == 0
    assert capsys.readouterr().out.startswith("m,mean_p,std_p\n")


def test_cli_gge_fit_and_predict(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", SMALL)
    assert main(["gge-fit", "--config", str(cfg), "--targets", "0,0.5,0.5,-5.0"]) == 0
    res = json.loads(capsys.readouterr().out)
    assert abs(res["residuals"]["E"]) < 1e-6
    assert res["lambda_c"] == pytest.approx(res["lambda_k"])
    params = f"{res['beta']},{res['lambda_c']},{res['lambda_k']},{res['lambda_pi']}"
    assert main(["gge-predict", "--config", str(cfg), "--params", params, "--observable", "C"]) == 0
    pred = json.loads(capsys.readouterr().out)
    assert pred["value"] == pytest.approx(0.5 + res["residuals"]["C"], abs=1e-12)


def test_cli_sweep_and_protocol(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", SMALL)
    assert main(["sweep", "--config", str(cfg), "--epsilons", "0.01", "--out", str(tmp_path / "sw")]) == 0
    assert (tmp_path / "sw" / "eps=0.01" / "series.csv").exists()
    fc = write_config(tmp_path / "f.json", {"n": 6, "model": "fully-connected", "tau_q": 5.0, "n_tau_r": 6})
    assert main(["protocol", "--config", str(fc), "--out", str(tmp_path / "p"), "--threads", "1"]) == 0
    assert (tmp_path / "p" / "tau_r.csv").exists()
    capsys.readouterr()


def test_cli_config_error_exit_code(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", {"n": 7, "bogus": 1})
    assert main(["quench", "--config", str(cfg), "--out", str(tmp_path / "x")]) == 2
    assert "bogus" in capsys.readouterr().err


def test_cli_bad_arguments():
    with pytest.raises(SystemExit):
        main(["gge-fit", "--targets", "1,2"])
    with pytest.raises(SystemExit):
        main(["quench"])
