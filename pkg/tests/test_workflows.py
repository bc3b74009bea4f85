import csv
import io
import json
import math

import numpy as np
import pytest

from revieweval.domain import PairTable, Status, load_venue
from revieweval.errors import ValidationError
from revieweval.lp import deterministic_assignment, perturb_tpdp
from revieweval.sampler import estimate_covariance
from revieweval.similarity import PolicyParams, similarity_matrix
from revieweval.synthetic import SyntheticSpec, generate_synthetic_venue, write_synthetic
from revieweval.workflows import (
    REPORT_COLUMNS,
    StudyContext,
    SweepSpec,
    bad_policy_analysis,
    cost_of_randomization,
    evaluate_method,
    rows_to_csv,
    run_sweep,
    write_report,
)

from conftest import make_venue

POLICY = PolicyParams("aaai22", w_text=0.75, lambda_bid=1.0, q=0.5)


@pytest.fixture(scope="module")
def study():
    spec = SyntheticSpec(n_reviewers=8, n_papers=8, cap=2, q_on=0.5, attrition=0.15, policy=POLICY, seed=11)
    return generate_synthetic_venue(spec)


@pytest.fixture(scope="module")
def ctx(study):
    p_on = study.on_policy.probabilities
    cov = estimate_covariance(p_on, study.venue, 400, seed=1)
    return StudyContext(study.venue, study.table, study.records, p_on, covariance=cov, noise=study.noise, L=study.spec.lipschitz_constant)


def _check_row_invariants(rows):
    for row in rows:
        if row["status"] != "ok":
            continue
        if not math.isnan(row["point"]):
            assert row["lo"] - 1e-9 <= row["point"] <= row["hi"] + 1e-9
        assert row["lo"] <= row["hi"] + 1e-9
        if not math.isnan(row["ci_lo"]):
            assert row["ci_lo"] <= row["lo"] + 1e-9 and row["hi"] <= row["ci_hi"] + 1e-9


def test_sweep_contains_the_on_policy_cell(ctx):
    marg, record = ctx.off_policy(POLICY)
    assert np.allclose(marg.probabilities, ctx.p_on, atol=1e-9)
    inputs = ctx.inputs(marg.probabilities)
    w = inputs.weights.values[ctx.p_on > 0]
    assert np.allclose(w, 1.0)
    rows, perts = run_sweep(SweepSpec(POLICY, "q", (0.5, 0.75), ("mean", "manski")), ctx)
    assert [r["value"] for r in rows] == [0.5, 0.5, 0.75, 0.75]
    assert perts[0]["mode"] == "tpdp"
    assert rows[0]["positivity_violations"] == 0
    _check_row_invariants(rows)


def test_q_one_grid_equals_a_single_deterministic_evaluation(ctx, study):
    rows, _ = run_sweep(SweepSpec(POLICY, "q", (1.0,), ("mean",)), ctx)
    S = perturb_tpdp(similarity_matrix(study.venue, study.table, POLICY.replace(q=1.0)), study.noise)
    det = deterministic_assignment(S, study.venue)
    cell = evaluate_method(ctx, ctx.inputs(det.probabilities), "mean")
    assert rows[0]["point"] == pytest.approx(cell["point"], abs=1e-12)


def test_manski_rows_bracket_assumption_rows(ctx):
    rows, _ = run_sweep(SweepSpec(POLICY, "w_text", (0.25, 0.75, 1.0), ("manski", "mono", "lip")), ctx, threads=2)
    assert len(rows) == 9
    _check_row_invariants(rows)
    for k in range(0, 9, 3):
        manski, mono, lip = rows[k : k + 3]
        assert [manski["method"], mono["method"], lip["method"]] == ["manski", "mono", "lip"]
        for other in (mono, lip):
            assert manski["lo"] <= other["lo"] + 1e-9
            assert other["hi"] <= manski["hi"] + 1e-9


def test_sweep_records_failing_cells_and_continues(study):
    ctx = StudyContext(study.venue, study.table, study.records, study.on_policy.probabilities, noise=study.noise)
    rows, _ = run_sweep(SweepSpec(POLICY, "q", (0.5,), ("mean", "lip")), ctx)
    assert rows[0]["status"] == "ok"
    assert rows[1]["status"] == "error" and "Lipschitz" in rows[1]["error"]


def test_sweep_spec_validation():
    with pytest.raises(ValidationError):
        SweepSpec(POLICY, "k", (1,))
    with pytest.raises(ValidationError):
        SweepSpec(POLICY, "q", ())
    with pytest.raises(ValidationError):
        SweepSpec(POLICY, "q", (1.5,))
    with pytest.raises(ValidationError):
        SweepSpec(POLICY, "q", (0.5,), ("median",))


# ---------------------------------------------------------------------------
# cost of randomization


def test_cost_two_by_two_values():
    rows = cost_of_randomization(np.array([[2.0, 1.0], [1.0, 2.0]]), make_venue(2, 2), [1.0, 0.5, 0.75, 0.4])
    assert [r["q"] for r in rows] == [0.4, 0.5, 0.75, 1.0]
    assert not rows[0]["feasible"] and math.isnan(rows[0]["ratio"])
    assert rows[1]["ratio"] == pytest.approx(0.75, abs=1e-12)
    assert rows[3]["ratio"] == 1.0
    ratios = [r["ratio"] for r in rows if r["feasible"]]
    assert all(a <= b + 1e-12 for a, b in zip(ratios, ratios[1:]))
    with pytest.raises(ValidationError):
        cost_of_randomization(np.eye(2), make_venue(2, 2), [0.0])


def test_cost_curve_nondecreasing_on_random_fixtures(rng):
    grid = np.linspace(0.3, 1.0, 8)
    for _ in range(5):
        venue = make_venue(5, 4, caps=2)
        rows = cost_of_randomization(rng.random((5, 4)), venue, grid)
        ratios = [r["ratio"] for r in rows if r["feasible"]]
        assert ratios[-1] == 1.0
        assert all(a <= b + 1e-9 for a, b in zip(ratios, ratios[1:]))


# ---------------------------------------------------------------------------
# bad-policy analysis


def test_equal_similarities_give_identical_rows(study):
    shape = study.venue.shape
    table = PairTable(np.full(shape, 0.5), np.full(shape, 0.5), np.full(shape, None, dtype=object))
    ctx = StudyContext(study.venue, table, study.records, study.on_policy.probabilities, tie_break="none")
    comp = bad_policy_analysis(ctx, POLICY, methods=("manski",))
    assert comp.details["max"]["objective"] == pytest.approx(comp.details["min"]["objective"])
    assert comp.rows[0]["manski"] == comp.rows[1]["manski"]


def test_bad_policy_table_shape(ctx):
    comp = bad_policy_analysis(ctx, POLICY)
    assert [r["policy"] for r in comp.rows] == ["max", "min"]
    for row in comp.rows:
        assert list(row) == ["policy", "manski", "monotonicity", "lipschitz"]
    assert comp.details["max"]["objective"] >= comp.details["min"]["objective"]


# ---------------------------------------------------------------------------
# synthetic venues


def _read_all(paths):
    return {k: p.read_bytes() for k, p in paths.items()}


def test_synthetic_files_are_deterministic(tmp_path):
    spec = SyntheticSpec(n_reviewers=6, n_papers=5, cap=2, attrition=0.2, seed=3)
    a = _read_all(write_synthetic(generate_synthetic_venue(spec), tmp_path / "a"))
    b = _read_all(write_synthetic(generate_synthetic_venue(spec), tmp_path / "b"))
    c = _read_all(write_synthetic(generate_synthetic_venue(SyntheticSpec(n_reviewers=6, n_papers=5, cap=2, attrition=0.2, seed=4)), tmp_path / "c"))
    assert a == b
    assert a["scores"] != c["scores"]


def test_zero_attrition_gives_all_observed(tmp_path):
    spec = SyntheticSpec(n_reviewers=6, n_papers=5, cap=2, seed=1)
    paths = write_synthetic(generate_synthetic_venue(spec), tmp_path)
    venue, _, records = load_venue(paths["venue"], paths["scores"], paths["outcomes"])
    assert len(records) == venue.n_reviews
    assert all(r.status is Status.OBSERVED for r in records)
    truth = json.loads(paths["truth"].read_text())
    assert truth["lipschitz_constant"] == spec.lipschitz_constant
    assert paths["truth"].parent.name == "truth"


def test_synthetic_outcomes_within_scale_and_true_mean():
    study = generate_synthetic_venue(SyntheticSpec(n_reviewers=6, n_papers=6, cap=2, seed=5))
    assert study.truth.min() >= 1.0 and study.truth.max() <= 5.0
    p = study.on_policy.probabilities
    assert study.true_mean(p) == pytest.approx(float((p * study.truth).sum()) / 6)
    with pytest.raises(ValidationError):
        SyntheticSpec(attrition=1.5)


# ---------------------------------------------------------------------------
# reports


def test_empty_report_is_header_only(tmp_path):
    paths = write_report([], tmp_path)
    lines = paths["csv"].read_text().splitlines()
    assert len(lines) == 1
    assert lines[0].split(",")[: len(REPORT_COLUMNS)] == list(REPORT_COLUMNS)
    assert json.loads(paths["manifest"].read_text())["rows"] == 0


def test_five_by_three_sweep_has_fifteen_rows_and_reruns_identically(ctx, tmp_path):
    spec = SweepSpec(POLICY, "w_text", (0.0, 0.25, 0.5, 0.75, 1.0), ("mean", "manski", "mono"))
    rows, perts = run_sweep(spec, ctx)
    a = write_report(rows, tmp_path / "a", {"seed": 0, "perturbations": perts})
    rows2, perts2 = run_sweep(spec, ctx)
    b = write_report(rows2, tmp_path / "b", {"seed": 0, "perturbations": perts2})
    body = a["csv"].read_text()
    assert len(list(csv.reader(io.StringIO(body)))) == 16
    assert body == b["csv"].read_text()
    assert a["manifest"].read_text() == b["manifest"].read_text()
    _check_row_invariants(rows)


def test_rows_to_csv_formats_missing_as_blank():
    out = rows_to_csv([{"param": "q", "value": 0.5, "method": "mean", "point": math.nan}], columns=("param", "value", "point"))
    assert out == "param,value,point\nq,0.5,\n"
