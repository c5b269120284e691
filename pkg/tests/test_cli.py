"""Command line surface: flags, exit codes, file outputs, determinism."""

import csv
import json

import numpy as np
import pytest

from atrel.cli import main


def _run(argv, capsys=None):
    code = main(argv)
    return code


class TestSimulate:
    def test_writes_dataset(self, tmp_path):
        out = tmp_path / "d.csv"
        assert main(["simulate", "--config", "iv", "--n", "60", "--N", "90",
                     "--seed", "1", "--out", str(out)]) == 0
        lines = out.read_text().splitlines()
        assert lines[0].split(",")[:2] == ["population", "y"]
        assert len(lines) == 1 + 60 + 90

    def test_deterministic_bytes(self, tmp_path):
        a = tmp_path / "a.csv"
        b = tmp_path / "b.csv"
        args = ["simulate", "--config", "ii", "--n", "50", "--N", "70",
                "--seed", "3"]
        assert main(args + ["--out", str(a)]) == 0
        assert main(args + ["--out", str(b)]) == 0
        assert a.read_bytes() == b.read_bytes()


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "d.csv"
    assert main(["simulate", "--config", "iv", "--n", "300", "--N", "400",
                 "--seed", "5", "--out", str(path)]) == 0
    return path


@pytest.fixture(scope="module")
def fitted(small_dataset, tmp_path_factory):
    prefix = tmp_path_factory.mktemp("fit") / "run"
    code = main(["fit", "--data", str(small_dataset),
                 "--a", "x1,x2,x3", "--z", "x1", "--seed", "2",
                 "--folds", "3", "--out", str(prefix)])
    assert code == 0
    return prefix


class TestFit:
    def test_manifest_and_csv(self, fitted):
        manifest = json.loads((fitted.parent / "run.json").read_text())
        assert manifest["command"] == "fit"
        assert len(manifest["results"]["loadings"]) == 4
        for entry in manifest["results"]["loadings"]:
            assert np.isfinite(entry["value"])
        assert "settings_hash" in manifest
        assert manifest["tunings"]["bandwidth"][0] > 0
        rows = list(csv.reader(open(str(fitted) + "_coefficients.csv")))
        assert rows[0] == ["estimator", "parameter", "metric", "value"]
        assert any(r[0] == "atrel" and r[2] == "estimate" for r in rows[1:])

    def test_deterministic_outputs(self, small_dataset, tmp_path):
        args = ["fit", "--data", str(small_dataset), "--a", "x1,x2,x3",
                "--z", "x1", "--seed", "2", "--folds", "3"]
        p1 = tmp_path / "r1"
        p2 = tmp_path / "r2"
        assert main(args + ["--out", str(p1)]) == 0
        assert main(args + ["--out", str(p2)]) == 0
        assert (tmp_path / "r1_coefficients.csv").read_bytes() == \
               (tmp_path / "r2_coefficients.csv").read_bytes()
        m1 = json.loads((tmp_path / "r1.json").read_text())
        m2 = json.loads((tmp_path / "r2.json").read_text())
        assert m1["results"] == m2["results"]

    def test_usage_error_exit_code(self, small_dataset, capsys):
        code = main(["fit", "--data", str(small_dataset),
                     "--a", "x1", "--z", "nope_column", "--out", "/tmp/x"])
        assert code == 1
        err = json.loads(capsys.readouterr().err)
        assert "nope_column" in err["message"]

    def test_missing_data_flags(self, capsys):
        code = main(["fit", "--a", "x1", "--z", "x1", "--out", "/tmp/x"])
        assert code == 1

    def test_data_error_exit_code(self, tmp_path, capsys):
        bad = tmp_path / "bad.csv"
        bad.write_text("population,y,x1\nsource,1,abc\n")
        code = main(["fit", "--data", str(bad), "--a", "x1", "--z", "x1",
                     "--out", str(tmp_path / "o")])
        assert code == 2
        err = json.loads(capsys.readouterr().err)
        assert err["context"]["line"] == 2


class TestBootstrapCommand:
    def test_adds_intervals(self, fitted, tmp_path):
        out = tmp_path / "boot"
        code = main(["bootstrap", "--manifest", str(fitted) + ".json",
                     "--reps", "6", "--out", str(out)])
        assert code == 0
        manifest = json.loads((tmp_path / "boot.json").read_text())
        for entry in manifest["results"]["loadings"]:
            lo, hi = entry["interval"]
            assert lo <= hi


class TestEvaluate:
    def test_metrics_report(self, small_dataset, fitted, tmp_path):
        out = tmp_path / "metrics.csv"
        manifest = json.loads((fitted.parent / "run.json").read_text())
        beta = [lo["value"] for lo in manifest["results"]["loadings"]]
        beta_text = ",".join(str(v) for v in beta)
        code = main(["evaluate", "--data", str(small_dataset),
                     "--fit", str(fitted) + ".json",
                     "--beta-valid", beta_text, "--out", str(out)])
        assert code == 0
        rows = {r[2]: float(r[3]) for r in
                list(csv.reader(open(out)))[1:]}
        assert rows["rmspe"] == 0.0
        assert rows["cc"] == pytest.approx(1.0, abs=1e-12)
        assert rows["fcr"] == 0.0

    def test_auc_with_labels(self, small_dataset, fitted, tmp_path):
        out = tmp_path / "metrics2.csv"
        # label file: reuse the source rows of the simulated dataset
        code = main(["evaluate", "--data", str(small_dataset),
                     "--fit", str(fitted) + ".json",
                     "--beta-valid", "0.0,0.3,0.2,0.1",
                     "--labels", str(small_dataset), "--out", str(out)])
        assert code == 0
        rows = {r[2]: float(r[3]) for r in list(csv.reader(open(out)))[1:]}
        assert 0.0 <= rows["auc"] <= 1.0


class TestBench:
    def test_report_shape(self, tmp_path):
        out = tmp_path / "report.csv"
        manifest = tmp_path / "bench.json"
        code = main(["bench", "--config", "iv", "--reps", "2", "--seed", "4",
                     "--n", "120", "--N", "160", "--estimators", "source,parametric",
                     "--bootstrap-reps", "0", "--oracle-rows", "50000",
                     "--out", str(out), "--manifest", str(manifest)])
        assert code == 0
        rows = list(csv.reader(open(out)))[1:]
        estimators = {r[0] for r in rows}
        assert estimators == {"source", "parametric"}
        metrics = {r[2] for r in rows if r[1] == "beta1"}
        assert metrics == {"rmse", "bias", "cp"}
        agg = {r[2] for r in rows if r[1] == "all"}
        assert {"average_rmse", "average_abs_bias",
                "max_cp_deviance", "failures"} <= agg
        m = json.loads(manifest.read_text())
        assert m["config"]["id"] == "iv"
        assert len(m["truth"]) == 4
