import csv

import pytest

from flexvc.cli import main
from flexvc.model import Dataset, save_model, write_csv
from flexvc.simulation import MODEL_A, gen_model_a


@pytest.fixture
def inputs(tmp_path):
    save_model(MODEL_A.spec, tmp_path / "model.yaml")
    write_csv(gen_model_a(300, 11), tmp_path / "data.csv")
    return tmp_path


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.mark.parametrize("estimator", ["nw", "ll", "spline"])
def test_fit_writes_curves_and_trace(inputs, estimator):
    out = inputs / estimator
    code = main(["fit", "--data", str(inputs / "data.csv"), "--model", str(inputs / "model.yaml"),
                 "--estimator", estimator, "--bandwidths", "0.45,0.35", "--grid", "21",
                 "--out", str(out)])
    assert code == 0
    rows = _rows(out / "curves.csv")
    assert list(rows[0]) == ["component", "j", "k", "z", "value"]
    assert len(rows) == 6 * 21
    trace = (out / "trace.txt").read_text()
    assert "converged = true" in trace


def test_bandwidth_command(inputs, capsys):
    out = inputs / "bw"
    assert main(["bandwidth", "--data", str(inputs / "data.csv"),
                 "--model", str(inputs / "model.yaml"), "--out", str(out)]) == 0
    h = [float(v) for v in capsys.readouterr().out.strip().split(",")]
    assert len(h) == 2 and all(v > 0 for v in h)
    surface = _rows(out / "objective_surface.csv")
    assert {r["covariate"] for r in surface} == {"3", "4"}
    assert "h = " in (out / "bandwidths.txt").read_text()


def test_fit_with_automatic_bandwidths(inputs):
    out = inputs / "auto"
    assert main(["fit", "--data", str(inputs / "data.csv"), "--model", str(inputs / "model.yaml"),
                 "--grid", "21", "--out", str(out)]) == 0
    assert "bandwidths = [" in (out / "trace.txt").read_text()


def test_check_design_command(inputs):
    out = inputs / "design.csv"
    assert main(["check-design", "--data", str(inputs / "data.csv"),
                 "--model", str(inputs / "model.yaml"), "--bandwidths", "0.4",
                 "--out", str(out)]) == 0
    rows = _rows(out)
    assert len(rows) == 2 * 101
    assert all(r["flagged"] == "False" for r in rows)


def test_invalid_data_exit_code(inputs, capsys):
    data = gen_model_a(50, 1)
    X = data.covariates.copy()
    X[3, 2] = 1.5
    write_csv(Dataset(X, data.response), inputs / "bad.csv")
    with pytest.raises(SystemExit) as exc:
        main(["fit", "--data", str(inputs / "bad.csv"), "--model", str(inputs / "model.yaml"),
              "--bandwidths", "0.4", "--out", str(inputs / "x")])
    assert exc.value.code == 2
    assert "row 4, column x3" in capsys.readouterr().err


def test_simulate_command(tmp_path, capsys):
    out = tmp_path / "sim"
    assert main(["simulate", "--model", "a", "--estimator", "sbf,spline", "--n", "150",
                 "--reps", "2", "--bandwidths", "0.45,0.4", "--grid", "31",
                 "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "sbf n=150" in text and "spline n=150" in text
    assert (out / "metrics.csv").exists() and (out / "manifest.txt").exists()
