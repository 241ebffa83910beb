import json
import math

import numpy as np
import pytest

from hawkeslab import __version__
from hawkeslab.cli import run_cli
from hawkeslab.cluster import simulate_paths
from hawkeslab.errors import ParseError, UnreachableDepartureError
from hawkeslab.io import (builtin_config, dump_model, event_log_to_csv, model_to_dict, parse_model,
                          read_event_log, write_event_log)
from hawkeslab.thinning import simulate_network

MINIMAL = {
    "d": 1, "lambda0": [1.0],
    "kernels": [[{"type": "exponential", "rate": 2.0, "scale": 1.0}]],
    "marks": [[{"type": "deterministic", "value": 1.0}]],
    "services": [{"type": "exponential", "rate": 1.0}],
    "mu": [1.0],
}


def _write(tmp_path, obj, name="m.json"):
    p = tmp_path / name
    p.write_text(json.dumps(obj, indent=2) if not isinstance(obj, str) else obj)
    return str(p)


def test_minimal_config():
    m = parse_model(MINIMAL)
    assert m.d == 1 and m.mode.value == "delayed" and m.mu_route == ((0.0,),)


def test_missing_mu_names_field():
    obj = {k: v for k, v in MINIMAL.items() if k != "mu"}
    with pytest.raises(ParseError) as err:
        parse_model(json.dumps(obj, indent=2))
    assert err.value.field == "mu" and "mu" in str(err.value)


def test_bad_json_reports_line():
    with pytest.raises(ParseError) as err:
        parse_model('{\n "d": 1,\n "lambda0": [1.0,,]\n}')
    assert err.value.line == 3


def test_unknown_kernel_type_located():
    obj = json.loads(json.dumps(MINIMAL))
    obj["kernels"][0][0] = {"type": "spline"}
    text = json.dumps(obj, indent=2)
    with pytest.raises(ParseError) as err:
        parse_model(text)
    assert err.value.field == "kernels[0][0].type"
    assert err.value.line is not None


def test_validation_errors_propagate():
    obj = dict(MINIMAL, mu=[0.0], services=[{"type": "deterministic", "value": 1.0}])
    with pytest.raises(UnreachableDepartureError):
        parse_model(obj)


def test_figure1_config():
    m = parse_model(builtin_config("figure1"))
    assert m.lambda0 == (1.0,)
    assert (m.marks[0][0].kind, m.marks[0][0].a, m.marks[0][0].b) == ("beta", 3.5, 1.5)
    assert m.services[0].kind == "exponential" and m.services[0].rate == 1.0
    assert m.kernels[0][0](0.7) == pytest.approx(math.exp(-0.7))


@pytest.mark.parametrize("name", ["figure1", "reference"])
def test_round_trip_byte_identical(name):
    text = builtin_config(name)
    assert dump_model(parse_model(text)) == text
    assert dump_model(parse_model(dump_model(parse_model(text)))) == text


def test_round_trip_rich_model():
    obj = {
        "d": 2, "lambda0": [1.0, 0.0], "mode": "hawkes",
        "kernels": [[{"type": "power_law", "exponent": 2.5, "scale": 0.3, "cutoff": 1.0}, {"type": "zero"}],
                    [{"type": "piecewise_constant", "breakpoints": [0, 1, 2], "values": [0.3, 0.1]},
                     {"type": "exponential", "rate": 1.0, "scale": 0.2}]],
        "marks": [[{"type": "gamma", "shape": 2.0, "rate": 3.0}, {"type": "pareto", "alpha": 1.5, "scale": 0.2}],
                  [{"type": "exponential", "rate": 1.0}, {"type": "beta", "a": 2.0, "b": 2.0}]],
        "services": [{"type": "lognormal", "log_mean": 0.0, "log_sd": 0.5}, {"type": "deterministic", "value": 2.0}],
        "mu": [1.0, 0.5], "mu_route": [[0, 0], [0, 0]],
        "phi": [{"kind": "clamp", "cap": 10.0}, {"kind": "linear"}], "service_semantics": "scheduled",
    }
    m = parse_model(obj)
    assert model_to_dict(parse_model(dump_model(m))) == model_to_dict(m)


@pytest.mark.parametrize("engine", ["cluster", "thinning"])
def test_event_log_csv_round_trip(engine, tmp_path):
    m = parse_model(builtin_config("figure1"))
    log = simulate_paths(m, 15.0, 3) if engine == "cluster" else simulate_network(m, 15.0, 3)
    path = tmp_path / "log.csv"
    write_event_log(log, path)
    back = read_event_log(path, model=m)
    assert np.array_equal(back.time, log.time) and np.array_equal(back.kind, log.kind)
    assert np.array_equal(back.particle_id, log.particle_id)
    assert np.allclose(back.mark, log.mark, equal_nan=True)
    assert path.read_text().splitlines()[0] == "time,coordinate,kind,mark,service,particle_id,parent_id"
    assert event_log_to_csv(back) == path.read_text()


def test_cli_version(capsys):
    assert run_cli(["--version"]) == 0
    assert capsys.readouterr().out.strip() == f"hawkeslab {__version__} (config schema 1)"


def test_cli_check_stability(tmp_path, capsys):
    assert run_cli(["check-stability", "--config", _write(tmp_path, MINIMAL)]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["spectral_radius"] == pytest.approx(0.5) and out["stable"]
    unstable = dict(MINIMAL, kernels=[[{"type": "exponential", "rate": 0.5}]])
    assert run_cli(["check-stability", "--config", _write(tmp_path, unstable, "u.json")]) == 1


def test_cli_usage_errors(tmp_path, capsys):
    assert run_cli(["frobnicate"]) == 1
    assert "usage" in capsys.readouterr().err
    assert run_cli([]) == 1
    cfg = _write(tmp_path, MINIMAL)
    assert run_cli(["simulate", "--config", cfg, "--horizon", "5"]) == 1
    assert "missing seed" in capsys.readouterr().err
    assert run_cli(["check-stability", "--config", str(tmp_path / "nope.json")]) == 1
    bad = {k: v for k, v in MINIMAL.items() if k != "mu"}
    assert run_cli(["check-stability", "--config", _write(tmp_path, bad, "b.json")]) == 1


def test_cli_runtime_error_exit_two(tmp_path):
    unstable = dict(MINIMAL, kernels=[[{"type": "exponential", "rate": 0.5}]])
    cfg = _write(tmp_path, unstable)
    assert run_cli(["transform", "--config", cfg, "--t", "2", "--z", "0.5", "--steps", "64"]) == 2


def test_cli_simulate_deterministic(tmp_path, monkeypatch):
    cfg = _write(tmp_path, MINIMAL)
    a, b = tmp_path / "a", tmp_path / "b"
    assert run_cli(["simulate", "--config", cfg, "--horizon", "10", "--reps", "5", "--seed", "4",
                    "--out", str(a), "--threads", "1"]) == 0
    monkeypatch.setenv("HAWKESLAB_THREADS", "3")
    assert run_cli(["simulate", "--config", cfg, "--horizon", "10", "--reps", "5", "--seed", "4",
                    "--out", str(b)]) == 0
    names = sorted(p.name for p in a.iterdir())
    assert names == ["rep_0.csv", "rep_1.csv", "rep_2.csv", "rep_3.csv", "rep_4.csv", "run.json"]
    for n in names:
        assert (a / n).read_bytes() == (b / n).read_bytes()
    c = tmp_path / "c"
    assert run_cli(["simulate", "--config", cfg, "--horizon", "10", "--reps", "2", "--seed", "4",
                    "--engine", "thinning", "--out", str(c)]) == 0
    assert (c / "rep_1.csv").exists()


def test_cli_moments_and_transform(tmp_path, capsys):
    cfg = _write(tmp_path, MINIMAL)
    assert run_cli(["moments", "--config", cfg, "--order", "2", "--t", "50", "--grid", "5"]) == 0
    tab = json.loads(capsys.readouterr().out)
    assert tab["moments"]["(1|0)"][-1] == pytest.approx(2.0, abs=1e-6)
    assert tab["times"][-1] == 50.0
    assert run_cli(["moments", "--config", cfg, "--order", "2", "--t", "1", "--raw"]) == 0
    assert json.loads(capsys.readouterr().out)["kind"] == "raw"
    assert run_cli(["transform", "--config", cfg, "--t", "5", "--z", "0.5", "--s", "0.3", "--steps", "512"]) == 0
    fp = json.loads(capsys.readouterr().out)
    assert set(fp) == {"value", "iterations", "residual", "method"} and fp["iterations"] > 0
    assert run_cli(["transform", "--config", cfg, "--t", "5", "--z", "0.5", "--s", "0.3",
                    "--method", "characteristics"]) == 0
    ch = json.loads(capsys.readouterr().out)
    assert ch["value"] == pytest.approx(fp["value"], abs=1e-4)


def test_cli_cluster_size(tmp_path):
    cfg = _write(tmp_path, MINIMAL)
    out = tmp_path / "cs.csv"
    assert run_cli(["cluster-size", "--config", cfg, "--n-max", "10", "--clusters", "5000", "--seed", "2",
                    "--out", str(out)]) == 0
    rows = out.read_text().splitlines()
    assert rows[0] == "n,closed_form,oracle,simulated_freq" and len(rows) == 11
    n, closed, oracle, freq = map(float, rows[1].split(","))
    assert closed == pytest.approx(math.exp(-0.5)) and oracle == pytest.approx(closed, abs=1e-12)
    assert abs(freq - closed) < 0.03


def test_cli_experiment(tmp_path, capsys):
    _write(tmp_path, MINIMAL)
    exp = _write(tmp_path, {"model": "m.json", "t": 30.0, "reps": 500}, "exp.json")
    out = tmp_path / "res.json"
    assert run_cli(["experiment", "stationarity", "--config", exp, "--seed", "5", "--out", str(out)]) == 0
    res = json.loads(out.read_text())
    assert res["experiment"] == "stationarity" and res["config"]["seed"] == 5
    assert res["thresholds"]["ks_p_min"] == 0.01
    assert run_cli(["experiment", "stationarity", "--config", exp]) == 1
    bad = _write(tmp_path, {"t": 3}, "bad.json")
    assert run_cli(["experiment", "stationarity", "--config", bad, "--seed", "1"]) == 1
