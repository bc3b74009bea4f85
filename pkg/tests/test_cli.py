import csv
import json

import pytest

from revieweval.cli import main


@pytest.fixture(scope="module")
def venue_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("synth")
    code = main(["synth", "--n-reviewers", "8", "--n-papers", "8", "--cap", "2", "--attrition", "0.1", "--seed", "2", "--out-dir", str(d)])
    assert code == 0
    return d


def inputs(d, outcomes=True):
    args = ["--venue", str(d / "venue.json"), "--scores", str(d / "scores.csv")]
    return args + (["--outcomes", str(d / "outcomes.csv")] if outcomes else [])


@pytest.fixture(scope="module")
def off_policy(venue_dir):
    out = venue_dir / "off.csv"
    code = main(["assign", *inputs(venue_dir, outcomes=False), "--family", "aaai22", "--w-text", "0.25", "--q", "0.6",
                 "--noise", str(venue_dir / "noise.csv"), "--out", str(out)])
    assert code == 0
    return out


@pytest.fixture(scope="module")
def cov(venue_dir):
    out = venue_dir / "cov.bin"
    assert main(["sample", *inputs(venue_dir, outcomes=False), "--marginals", str(venue_dir / "on_policy.csv"), "--n", "300", "--out", str(out)]) == 0
    return out


def test_validate_prints_partition(venue_dir, capsys):
    assert main(["validate", *inputs(venue_dir), "--on-policy", str(venue_dir / "on_policy.csv")]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["partition"]["observed"] > 0


def test_estimate_and_bounds_reports(venue_dir, off_policy, cov, tmp_path):
    common = [*inputs(venue_dir), "--on-policy", str(venue_dir / "on_policy.csv"), "--off-policy", str(off_policy), "--cov", str(cov)]
    assert main(["estimate", *common, "--out", str(tmp_path / "e.json")]) == 0
    est = json.loads((tmp_path / "e.json").read_text())
    assert {"point", "variance", "counts", "n_reviews"} <= set(est["estimate"])
    for method, extra in (("manski", []), ("mono", []), ("lip", ["--calibrate", "f=0.05"])):
        out = tmp_path / f"{method}.json"
        assert main(["bounds", *common, "--method", method, *extra, "--out", str(out)]) == 0
        doc = json.loads(out.read_text())
        assert doc["interval"]["lower"] <= doc["lower"]["point"] <= doc["upper"]["point"] <= doc["interval"]["upper"]


def test_bounds_without_covariance_carries_a_note(venue_dir, off_policy, tmp_path):
    out = tmp_path / "b.json"
    args = [*inputs(venue_dir), "--on-policy", str(venue_dir / "on_policy.csv"), "--off-policy", str(off_policy), "--out", str(out)]
    assert main(["bounds", *args]) == 0
    assert "note" in json.loads(out.read_text())["interval"]


def test_models_fit_and_model_estimate(venue_dir, off_policy, tmp_path):
    model = tmp_path / "m.json"
    base = [*inputs(venue_dir), "--on-policy", str(venue_dir / "on_policy.csv")]
    assert main(["models", *base, "--fit", "cf-knn", "--folds", "3", "--out", str(model)]) == 0
    assert json.loads(model.read_text())["kind"] in ("cf-knn", "constant")
    out = tmp_path / "e.json"
    assert main(["estimate", *base, "--off-policy", str(off_policy), "--impute", "model", "--model", str(model), "--out", str(out)]) == 0


def test_sweep_then_report_round_trip(venue_dir, tmp_path):
    args = [*inputs(venue_dir), "--on-policy", str(venue_dir / "on_policy.csv"), "--policy", str(venue_dir / "policy.json"),
            "--noise", str(venue_dir / "noise.csv"), "--param", "q", "--grid", "0.5,1.0", "--methods", "mean,manski,lip",
            "--calibrate", "f=0.05", "--out-dir", str(tmp_path)]
    assert main(["sweep", *args]) == 0
    rows = list(csv.DictReader((tmp_path / "sweep.csv").open()))
    assert len(rows) == 6
    assert all(r["status"] == "ok" for r in rows)
    assert json.loads((tmp_path / "sweep.manifest.json").read_text())["calibration"]["target"] == 0.05
    assert main(["report", "--table", str(tmp_path / "sweep.rows.json"), "--name", "again", "--out-dir", str(tmp_path)]) == 0
    assert (tmp_path / "again.csv").read_text() == (tmp_path / "sweep.csv").read_text()


def test_cost_and_power(venue_dir, tmp_path):
    assert main(["cost", *inputs(venue_dir, outcomes=False), "--q-grid", "0.5,1.0", "--out", str(tmp_path / "c.csv")]) == 0
    rows = list(csv.DictReader((tmp_path / "c.csv").open()))
    assert float(rows[-1]["ratio"]) == 1.0
    power = tmp_path / "p.json"
    assert main(["power", *inputs(venue_dir), "--on-policy", str(venue_dir / "on_policy.csv"), "--methods", "manski,mono", "--out", str(power)]) == 0
    assert [r["policy"] for r in json.loads(power.read_text())["rows"]] == ["max", "min"]


def test_config_supplies_defaults(venue_dir, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"q_grid": "0.75,1.0"}))
    out = tmp_path / "c.csv"
    assert main(["cost", *inputs(venue_dir, outcomes=False), "--config", str(cfg), "--out", str(out)]) == 0
    assert [r["q"] for r in csv.DictReader(out.open())] == ["0.75", "1"]


def test_exit_codes(venue_dir, tmp_path, capsys):
    assert main(["validate", "--venue", str(tmp_path / "missing.json"), "--scores", str(venue_dir / "scores.csv")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"papers": []}))
    assert main(["validate", "--venue", str(bad), "--scores", str(venue_dir / "scores.csv")]) == 2
    # cap 2 with load 1 cannot spread 8 papers at q = 0.05
    assert main(["assign", *inputs(venue_dir, outcomes=False), "--q", "0.05", "--out", str(tmp_path / "x.csv")]) == 3
    # a logged pair with zero on-policy probability is inconsistent
    zero = tmp_path / "zero.csv"
    zero.write_text("reviewer,paper,probability\n")
    args = [*inputs(venue_dir), "--on-policy", str(zero), "--off-policy", str(zero), "--out", str(tmp_path / "e.json")]
    assert main(["estimate", *args]) == 4
    assert "error:" in capsys.readouterr().err
