"""Acceptance criteria 1-11.

Each test records one PASS/FAIL line in ``RESULTS``; the conftest hook
prints them at the end of the run. Thresholds are the stated ones and are
never relaxed here.
"""

import json
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from revieweval.bounds import (
    DistanceSpec,
    lipschitz_bounds,
    manski_bounds,
    monotonicity_bounds,
    pairwise_distances,
)
from revieweval.domain import Covariates
from revieweval.errors import InfeasibleError
from revieweval.estimator import EstimationInputs, imbens_manski_z, mean_imputation
from revieweval.lp import deterministic_assignment, randomized_assignment
from revieweval.rounding import enumerate_outcomes
from revieweval.sampler import estimate_covariance
from revieweval.similarity import PolicyParams, similarity_aaai
from revieweval.synthetic import SyntheticSpec, generate_synthetic_venue
from revieweval.workflows import StudyContext, bad_policy_analysis, cost_of_randomization

from conftest import make_records, make_venue
from fixtures import bounds_fixture, bounds_fixtures
from oracles import best_assignment_value, feasible_assignments
from test_bounds import _oracle_case, lip_constraints, mono_constraints

RESULTS = {}


def record(number, ok, detail):
    RESULTS[number] = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}: {detail}"
    assert ok, RESULTS[number]


# ---------------------------------------------------------------------------
# 1. LP against exhaustive search


def test_criterion_01_lp_matches_enumeration():
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    checked, worst = 0, 0.0
    while checked < 50:
        n_r, n_p = int(rng.integers(2, 5)), int(rng.integers(1, 5))
        caps = rng.integers(1, 3, size=n_r)
        conflicts = [(r, p) for r in range(n_r) for p in range(n_p) if rng.random() < 0.15]
        allowed = [[(r, p) not in conflicts for p in range(n_p)] for r in range(n_r)]
        S = rng.random((n_r, n_p))
        best = best_assignment_value(S.tolist(), 1, caps.tolist(), allowed)
        if best is None:
            continue
        venue = make_venue(n_r, n_p, caps=caps.tolist(), conflicts=conflicts)
        det = deterministic_assignment(S, venue).objective
        rnd = randomized_assignment(S, venue, 1.0).objective
        worst = max(worst, abs(det - best), abs(rnd - best))
        checked += 1
    elapsed = time.perf_counter() - start
    record(1, worst <= 1e-6 and elapsed < 10, f"50 venues, max |LP - search| = {worst:.2e}, {elapsed:.1f} s")


# ---------------------------------------------------------------------------
# 2 and 3. sampler fidelity and exact covariance


@pytest.fixture(scope="module")
def sampled():
    n = 100_000
    start = time.perf_counter()
    v22 = make_venue(2, 2)
    p22 = np.full((2, 2), 0.5)
    acc22 = estimate_covariance(p22, v22, n, seed=7)
    v54 = make_venue(5, 4)
    S = np.random.default_rng(54).random((5, 4))
    p54 = randomized_assignment(S, v54, 0.4).probabilities
    acc54 = estimate_covariance(p54, v54, n, seed=8)
    return {"n": n, "elapsed": time.perf_counter() - start, "fixtures": [(p22, acc22), (p54, acc54)]}


def test_criterion_02_sampler_marginal_fidelity(sampled):
    n = sampled["n"]
    shares = []
    for p, acc in sampled["fixtures"]:
        target = p.ravel()[acc.pairs]
        band = 3 * np.sqrt(target * (1 - target) / n)
        within = np.abs(acc.means() - target) <= band + 1e-12
        # pairs outside the sampled set have marginal 0 and are never drawn
        shares.append(float(within.mean()))
    ok = min(shares) >= 0.99 and sampled["elapsed"] < 60
    record(2, ok, f"share within 3 sigma {shares[0]:.3f} (2x2), {shares[1]:.3f} (5x4); {sampled['elapsed']:.1f} s for 2 x 100k draws")


def test_criterion_03_exact_covariance(sampled):
    _, acc = sampled["fixtures"][0]
    idx = {int(f): i for i, f in enumerate(acc.pairs)}
    C = acc.full_covariance()
    c11_22 = C[idx[0], idx[3]]
    c11_12 = C[idx[0], idx[1]]
    ok = abs(c11_22 - 0.25) <= 0.005 and abs(c11_12 + 0.25) <= 0.005
    record(3, ok, f"Cov[Z11,Z22] = {c11_22:+.4f}, Cov[Z11,Z12] = {c11_12:+.4f}")


# ---------------------------------------------------------------------------
# 4. unbiasedness by total enumeration


def _exact(p):
    return [[Fraction(float(x)).limit_denominator(1000) for x in row] for row in p]


def test_criterion_04_unbiased_by_enumeration():
    rng = np.random.default_rng(404)
    shapes = [(2, 2, 1), (3, 2, 1), (3, 3, 1), (2, 3, 2), (4, 2, 1)]
    start = time.perf_counter()
    worst, cases = 0.0, 0
    for n_r, n_p, cap in shapes * 3:
        allowed = [[True] * n_p for _ in range(n_r)]
        n_assign = len(feasible_assignments(n_r, n_p, 1, [cap] * n_r, allowed))
        if n_assign > 8:
            continue
        venue = make_venue(n_r, n_p, caps=cap)
        try:
            q = float(rng.choice([0.5, 0.75]))
            p_exact = _exact(randomized_assignment(rng.random((n_r, n_p)), venue, q).probabilities)
        except InfeasibleError:
            continue
        p_on = np.array([[float(x) for x in row] for row in p_exact])
        p_off = randomized_assignment(rng.random((n_r, n_p)), venue.with_conflicts(p_on <= 0), 0.75).probabilities
        y = rng.integers(1, 6, size=(n_r, n_p)).astype(float)
        truth = float((p_off * y).sum()) / venue.n_reviews
        expected = 0.0
        for prob, z in enumerate_outcomes(p_exact, venue.caps):
            inputs = EstimationInputs.build(venue, make_records(venue, z, y), p_on, p_off)
            expected += float(prob) * mean_imputation(inputs).point
        worst = max(worst, abs(expected - truth))
        cases += 1
    elapsed = time.perf_counter() - start
    record(4, cases >= 10 and worst <= 1e-9 and elapsed < 5, f"{cases} venues, max |E[mu_hat] - mu_B| = {worst:.2e}, {elapsed:.2f} s")


# ---------------------------------------------------------------------------
# 5. bound ordering


def test_criterion_05_bound_ordering():
    fixtures = bounds_fixtures(100, n_r=5, n_p=4, caps=2, attrition=0.3)
    tol = 1e-8
    failures = []
    n_viol = n_att = 0
    for k, (inputs, X) in enumerate(fixtures):
        n_viol += bool(inputs.partition.violations.any())
        n_att += bool((inputs.partition.attrition | inputs.partition.absent).any())
        manski = manski_bounds(inputs)
        mono = monotonicity_bounds(inputs, X)
        # outcomes are Lipschitz with constant 4, so both constants are admissible
        lip1 = lipschitz_bounds(inputs, X, L=4.0)
        lip2 = lipschitz_bounds(inputs, X, L=8.0)
        U = np.flatnonzero(inputs.partition.universe.ravel())
        spec = DistanceSpec.from_points(X[U])
        D = pairwise_distances(X[U], spec)
        d_min = D[np.triu_indices(len(U), 1)].min()
        big = lipschitz_bounds(inputs, X, L=inputs.scale.width / d_min, spec=spec)

        def inside(outer, inner):
            return outer.lower.point <= inner.lower.point + tol and inner.upper.point <= outer.upper.point + tol

        checks = {
            "mono in manski": inside(manski, mono),
            "lip in manski": inside(manski, lip2) and inside(manski, lip1),
            "lip(L1) in lip(L2)": inside(lip2, lip1),
            "large L equals manski": abs(big.lower.point - manski.lower.point) <= tol and abs(big.upper.point - manski.upper.point) <= tol,
        }
        failures += [f"fixture {k}: {name}" for name, ok in checks.items() if not ok]
    ok = not failures and n_viol > 0 and n_att > 0
    record(5, ok, f"100 fixtures ({n_viol} with violations, {n_att} with missing outcomes), {len(failures)} ordering failures")


# ---------------------------------------------------------------------------
# 6. surrogate programs against grid search


def test_criterion_06_surrogate_lp_oracle():
    spec = DistanceSpec((4.0, 4.0))
    cases, worst, seed = 0, 0.0, 0
    while cases < 40:
        fx = bounds_fixture(seed, n_r=3, n_p=2, caps=1, q_on=1.0, q_off=0.5, attrition=0.3, integer=True)
        seed += 1
        if fx is None:
            continue
        inputs, X = fx
        if not 2 <= inputs.partition.universe.sum() <= 4:
            continue
        for res, fn in ((monotonicity_bounds(inputs, X), mono_constraints), (lipschitz_bounds(inputs, X, L=8.0, spec=spec), lip_constraints(8.0))):
            primary, lo, hi = _oracle_case(res, inputs, X, fn)
            gaps = [
                res.surrogates["lower"].primary - primary,
                res.surrogates["upper"].primary - primary,
                res.surrogates["lower"].secondary - lo,
                res.surrogates["upper"].secondary - hi,
            ]
            if not inputs.partition.absent.any():
                # every surrogate coefficient reaches the estimate directly
                sup = float(np.nansum(np.where(inputs.partition.observed, inputs.outcomes * inputs.weights.values, 0.0)))
                gaps.append(res.lower.point - (sup + lo) / inputs.n_reviews)
                gaps.append(res.upper.point - (sup + hi) / inputs.n_reviews)
            worst = max(worst, max(abs(g) for g in gaps))
        cases += 1
    record(6, worst <= 1e-6, f"{cases} universes of size <= 4, both programs, max deviation {worst:.2e}")


# ---------------------------------------------------------------------------
# 7. Imbens-Manski multiplier


def test_criterion_07_imbens_manski_limits():
    z0 = imbens_manski_z(0.0)
    z100 = imbens_manski_z(100.0)
    grid = np.linspace(0.0, 10.0, 50)
    zs = [imbens_manski_z(w) for w in grid]
    monotone = all(b <= a + 1e-12 for a, b in zip(zs, zs[1:]))
    ok = abs(z0 - 1.959964) <= 1e-4 and abs(z100 - 1.644854) <= 1e-3 and monotone
    record(7, ok, f"z'(0) = {z0:.6f}, z'(100) = {z100:.6f}, nonincreasing on 50 points: {monotone}")


# ---------------------------------------------------------------------------
# 8. coverage


def test_criterion_08_coverage():
    start = time.perf_counter()
    policy = PolicyParams("aaai22", w_text=0.75, q=0.5)
    spec = SyntheticSpec(n_reviewers=12, n_papers=12, cap=2, q_on=0.5, attrition=0.1, policy=policy, seed=8)
    study = generate_synthetic_venue(spec)
    p_on = study.on_policy.probabilities
    off = randomized_assignment(np.random.default_rng(88).random(p_on.shape), study.venue.with_conflicts(p_on <= 0), 0.5)
    truth = study.true_mean(off)
    cov = estimate_covariance(p_on, study.venue, 20_000, seed=9)
    hits = 0
    for k in range(500):
        records = study.redraw(1000 + k)
        inputs = EstimationInputs.build(study.venue, records, p_on, off.probabilities, cov)
        iv = manski_bounds(inputs).interval
        hits += iv.lower <= truth <= iv.upper
    elapsed = time.perf_counter() - start
    rate = hits / 500
    record(8, rate >= 0.93 and elapsed < 600, f"coverage {rate:.3f} over 500 redraws (mu_B = {truth:.4f}), {elapsed:.1f} s")


# ---------------------------------------------------------------------------
# 9. cost of randomization


def test_criterion_09_cost_shape():
    q_grid = [0.3, 0.4, 0.5, 0.6, 0.75, 0.9, 1.0]
    rows = cost_of_randomization(np.array([[2.0, 1.0], [1.0, 2.0]]), make_venue(2, 2), q_grid)
    at_half = next(r["ratio"] for r in rows if r["q"] == 0.5)
    curves = [rows]
    rng = np.random.default_rng(909)
    for _ in range(10):
        n_r, n_p = int(rng.integers(3, 7)), int(rng.integers(2, 6))
        curves.append(cost_of_randomization(rng.random((n_r, n_p)), make_venue(n_r, n_p, caps=2), q_grid))
    monotone = all(
        all(a <= b + 1e-9 for a, b in zip(r, r[1:]))
        for r in ([row["ratio"] for row in c if row["feasible"]] for c in curves)
    )
    ok = abs(at_half - 0.75) <= 1e-12 and monotone
    record(9, ok, f"2x2 ratio at q=0.5 = {at_half:.12f}; nondecreasing on {len(curves)} fixtures: {monotone}")


# ---------------------------------------------------------------------------
# 10. power separation


def test_criterion_10_power_separation():
    spec = SyntheticSpec(
        n_reviewers=40, n_papers=200, paper_load=1, cap=6, q_on=0.5, attrition=0.1,
        policy=PolicyParams("aaai22", w_text=0.75), bid_scheme="aaai", outcome_weights=(1.0, 0.0, 0.0),
        y_min=1.0, y_max=5.0, experts_per_paper=1, seed=0,
    )
    st = generate_synthetic_venue(spec)
    ctx = StudyContext(st.venue, st.table, st.records, st.on_policy.probabilities, noise=st.noise, tie_break="tpdp")
    comp = bad_policy_analysis(ctx, spec.policy, methods=("mono",))
    hi_min = comp.details["min"]["mono"]["hi"]
    lo_max = comp.details["max"]["mono"]["lo"]
    record(10, hi_min < lo_max, f"min-policy upper {hi_min:.4f} < max-policy lower {lo_max:.4f}")


# ---------------------------------------------------------------------------
# 11. similarity cascade golden file


def test_criterion_11_golden_cascade():
    cases = json.loads((Path(__file__).parent / "data" / "aaai_cascade.json").read_text())
    worst = 0.0
    branches = {"positive_bid_zero_subject": 0, "floor_rescue": 0}
    for c in cases:
        trace = {}
        got = similarity_aaai(Covariates(c["text"], c["subject"], c["bid"]), c["w_text"], c["lambda_bid"], c["profile"], trace)
        worst = max(worst, abs(got - c["expected"]))
        for key in trace:
            branches[key] += 1
    covered = (
        any(c["text"] is None and c["subject"] is None for c in cases)
        and any((c["text"] is None) != (c["subject"] is None) for c in cases)
        and branches["positive_bid_zero_subject"] > 0
        and branches["floor_rescue"] > 0
        and any(not c["profile"] for c in cases)
    )
    ok = len(cases) == 12 and worst <= 1e-9 and covered
    record(11, ok, f"{len(cases)} golden cases, max error {worst:.1e}, every branch exercised: {covered}")
