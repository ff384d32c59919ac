import csv
import io
import json

import numpy as np
import pytest

from conftest import MC_SEED
from r2ive.cli import main
from r2ive.data import Dataset, write_csv
from r2ive.simulation import format_report, generate_dataset, preset


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def model1_csv(tmp_path_factory):
    cfg = preset("linear-s2-10")
    ds, truth = generate_dataset(cfg, 2)
    path = tmp_path_factory.mktemp("data") / "model1.csv"
    write_csv(ds, path)
    return path, truth


def test_estimate_recovers_invalid_set(model1_csv, capsys, tmp_path):
    path, truth = model1_csv
    out_json = tmp_path / "res.json"
    code, out, _ = run(["estimate", "--input", path, "--format", "csv", "--output", out_json], capsys)
    assert code == 0
    fields = dict(row for row in csv.reader(io.StringIO(out)))
    assert set(fields["invalid_set"].split()) == {f"z{j + 1}" for j in truth.invalid}
    assert abs(float(fields["beta_hat"]) - 0.75) < 0.1
    full = json.loads(out_json.read_text())
    assert full["invalid_set"] == fields["invalid_set"].split()
    assert len(full["d_hat"]) == 200
    for key in ("m_n", "lambda_n0", "lambda_n", "lambda2", "lambda1", "lambda1_star"):
        assert key in full["tuning"]


def test_estimate_single_instrument(tmp_path, capsys):
    rng = np.random.default_rng(0)
    z = rng.normal(size=100)
    e = rng.normal(size=100)
    d = z + e
    path = tmp_path / "one.csv"
    rows = zip((0.75 * d + e).tolist(), d.tolist(), z.tolist())
    path.write_text("y,d,z\n" + "".join(f"{a},{b},{c}\n" for a, b, c in rows))
    code, out, err = run(["estimate", "--input", path, "--instruments", "z"], capsys)
    assert code == 0
    assert "warning:" in err and "one instrument" in err
    assert "| invalid_set | (none) |" in out


def test_trade_shaped_fixture(tmp_path, capsys):
    rng = np.random.default_rng(42)
    n, L = 158, 12
    S = rng.normal(size=(n, 2))  # two size covariates
    Z = rng.normal(size=(n, L)) + 0.3 * S[:, :1]
    u = rng.normal(size=(n, 2))
    D = 1.0 * Z[:, 0] + 0.8 * Z[:, 1] + 0.6 * Z[:, 2] + 0.5 * S[:, 0] + u[:, 0]
    Y = 0.5 * D + 0.7 * Z[:, 11] + 0.4 * S[:, 1] + 0.6 * u[:, 0] + 0.8 * u[:, 1]
    ds = Dataset(Y=Y, D=D, Z=Z, X=S, instrument_names=tuple(f"iv{j}" for j in range(L)))
    path = tmp_path / "trade.csv"
    write_csv(ds, path, exogenous_prefix="size")
    code, out, _ = run(["estimate", "--input", path, "--instruments", "iv*", "--exogenous", "size1,size2",
                        "--format", "json"], capsys)
    assert code == 0
    res = json.loads(out)
    assert res["beta_hat"] > 0
    assert res["diagnostics"]["residualization"] != "intercept"


def test_baselines_command(model1_csv, capsys):
    path, _ = model1_csv
    code, out, _ = run(["baselines", "--input", path, "--format", "csv"], capsys)
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out)))
    assert [r["estimator"] for r in rows] == ["OLS", "2SLS", "NAIVE", "sisVIVE", "sisVIVE.post"]


def test_error_paths(tmp_path, capsys):
    code, _, err = run(["simulate", "--preset", "no-such-design"], capsys)
    assert code != 0 and "linear-s2-10" in err and err.count("\n") == 1
    bad = tmp_path / "bad.csv"
    bad.write_text("y,d,z1\n1,2,3\n1,x,3\n")
    code, _, err = run(["estimate", "--input", bad], capsys)
    assert code != 0 and err.startswith("error:") and "row 2" in err
    code, _, err = run(["estimate", "--input", tmp_path / "missing.csv"], capsys)
    assert code != 0
    code, _, err = run(["simulate", "--n", "100"], capsys)
    assert code != 0 and "--L" in err
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"bogus": 1}))
    code, _, err = run(["simulate", "--preset", "linear-s2-10", "--config", cfg], capsys)
    assert code != 0 and "bogus" in err
    with pytest.raises(SystemExit) as info:
        main(["simulate", "--undocumented-flag"])
    assert info.value.code != 0
    capsys.readouterr()


def test_help_lists_flags(capsys):
    with pytest.raises(SystemExit):
        main(["simulate", "--help"])
    text = capsys.readouterr().out
    for flag in ("--preset", "--n", "--L", "--s1", "--s2", "--q", "--model", "--reps", "--seed", "--workers",
                 "--format", "--output", "--degree", "--mn-grid", "--ebic-gamma", "--tau-mode",
                 "--no-standardize"):
        assert flag in text


def test_config_file_and_env_seed(tmp_path, capsys, monkeypatch):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"n": 80, "L": 10, "s1": 3, "s2": 2, "q": 3, "reps": 2, "format": "csv"}))
    monkeypatch.setenv("R2IVE_SEED", "5")
    _, from_env, _ = run(["simulate", "--config", cfg, "--estimators", "OLS"], capsys)
    _, explicit, _ = run(["simulate", "--config", cfg, "--estimators", "OLS", "--seed", "5"], capsys)
    _, other, _ = run(["simulate", "--config", cfg, "--estimators", "OLS", "--seed", "6"], capsys)
    assert from_env == explicit != other
    _, flag_wins, _ = run(["simulate", "--config", cfg, "--estimators", "OLS", "--seed", "5", "--reps", "3"],
                          capsys)
    assert flag_wins != explicit


def test_simulate_is_byte_identical(tmp_path, capsys):
    argv = ["simulate", "--n", 100, "--L", 12, "--s1", 3, "--s2", 2, "--q", 3, "--reps", 3, "--seed", 11]
    outs = [run(argv + ["--format", f], capsys)[1] for f in ("markdown", "markdown", "csv", "csv")]
    assert outs[0] == outs[1] and outs[2] == outs[3]
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    run(argv + ["--dump", a, "--workers", 1], capsys)
    run(argv + ["--dump", b, "--workers", 2], capsys)
    assert a.read_bytes() == b.read_bytes()


def test_preset_run_matches_library_and_bias(capsys, mc):
    code, out, _ = run(["simulate", "--preset", "linear-s2-10", "--reps", 200, "--seed", MC_SEED,
                        "--format", "csv"], capsys)
    assert code == 0
    rep = mc("linear-s2-10", 200)
    assert out == format_report(rep, "csv")
    row = next(r for r in csv.DictReader(io.StringIO(out)) if r["estimator"] == "R2IVE")
    assert abs(float(row["bias"])) <= 0.01
