import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import sparse

from revieweval.errors import InfeasibleError, UnboundedError, ValidationError
from revieweval.lp import (
    LinearProgram,
    check_marginals,
    deterministic_assignment,
    noise_matrix,
    perturb_aaai,
    perturb_tpdp,
    randomized_assignment,
    solve_lp,
)

from conftest import make_venue
from oracles import best_assignment_value, feasible_assignments


def test_solve_lp_trivial_max():
    sol = solve_lp(LinearProgram(c=[1.0], lower=[-np.inf], upper=[3.0], sense="max"))
    assert sol.x[0] == pytest.approx(3.0)
    assert sol.objective == pytest.approx(3.0)


def test_solve_lp_infeasible_and_unbounded_are_distinct():
    # one reviewer with cap 1 cannot cover a load of 2
    lp = LinearProgram(
        c=[1.0], lower=[0.0], upper=[1.0],
        A_eq=sparse.csr_matrix([[1.0]]), b_eq=np.array([2.0]), sense="max", hint="load 2 > cap 1",
    )
    with pytest.raises(InfeasibleError, match="load 2"):
        solve_lp(lp)
    with pytest.raises(UnboundedError):
        solve_lp(LinearProgram(c=[1.0], lower=[0.0], upper=[np.inf], sense="max"))


def test_linear_program_validation():
    with pytest.raises(ValidationError):
        LinearProgram(c=[1.0], lower=[2.0], upper=[1.0])
    with pytest.raises(ValidationError):
        LinearProgram(c=[1.0, 2.0], lower=0, upper=1, A_ub=sparse.csr_matrix([[1.0]]), b_ub=np.array([1.0]))


def test_identity_similarity_picks_diagonal():
    venue = make_venue(2, 2)
    res = deterministic_assignment(np.eye(2), venue)
    assert np.array_equal(res.probabilities, np.eye(2))
    assert res.objective == pytest.approx(2.0)


def test_three_by_three_matches_permutation_search(rng):
    venue = make_venue(3, 3)
    for _ in range(10):
        S = rng.random((3, 3))
        best = max(sum(S[r, p] for p, r in enumerate(perm)) for perm in itertools.permutations(range(3)))
        res = deterministic_assignment(S, venue)
        assert res.objective == pytest.approx(best, abs=1e-9)
        assert set(np.unique(res.probabilities)) <= {0.0, 1.0}


def test_conflict_on_argmax_gives_next_best():
    S = np.array([[5.0, 1.0, 0.0], [1.0, 4.0, 0.5], [0.0, 0.5, 3.0]])
    venue = make_venue(3, 3, conflicts=[(0, 0)])
    allowed = [[not (r == 0 and p == 0) for p in range(3)] for r in range(3)]
    best = best_assignment_value(S.tolist(), 1, [1, 1, 1], allowed)
    res = deterministic_assignment(S, venue)
    assert res.probabilities[0, 0] == 0.0
    assert res.objective == pytest.approx(best)


def test_randomized_two_by_two_examples():
    S = np.array([[2.0, 1.0], [1.0, 2.0]])
    venue = make_venue(2, 2)
    half = randomized_assignment(S, venue, 0.5)
    assert np.allclose(half.probabilities, 0.5)
    assert half.objective == pytest.approx(3.0)
    full = randomized_assignment(S, venue, 1.0)
    assert np.allclose(full.probabilities, np.eye(2))
    assert full.objective == pytest.approx(4.0)


def test_randomized_infeasible_cap_is_reported():
    venue = make_venue(2, 2)
    with pytest.raises(InfeasibleError, match="cannot reach load"):
        randomized_assignment(np.ones((2, 2)), venue, 0.4)
    with pytest.raises(ValidationError):
        randomized_assignment(np.ones((2, 2)), venue, 0.0)


@st.composite
def small_venue(draw):
    n_r = draw(st.integers(2, 4))
    n_p = draw(st.integers(1, 4))
    caps = [draw(st.integers(1, 2)) for _ in range(n_r)]
    if sum(caps) < n_p:
        caps = [2] * n_r
    seed = draw(st.integers(0, 2**31))
    return n_r, n_p, caps, seed


@given(small_venue())
def test_objective_nondecreasing_in_q_and_marginals_feasible(case):
    n_r, n_p, caps, seed = case
    venue = make_venue(n_r, n_p, caps=caps)
    S = np.random.default_rng(seed).random((n_r, n_p))
    last = -np.inf
    for q in (0.5, 0.6, 0.75, 0.9, 1.0):
        try:
            res = randomized_assignment(S, venue, q)
        except InfeasibleError:
            # feasible sets nest, so infeasibility can only precede feasibility
            assert last == -np.inf
            continue
        assert check_marginals(res.probabilities, venue, q) == []
        assert res.objective >= last - 1e-9
        last = res.objective
    det = deterministic_assignment(S, venue)
    assert det.objective == pytest.approx(last, abs=1e-9)


def test_check_marginals_detects_problems():
    venue = make_venue(2, 2, conflicts=[(0, 1)])
    bad = np.array([[0.5, 0.5], [0.5, 0.6]])
    problems = check_marginals(bad, venue, q=0.5)
    assert any("paper loads" in p for p in problems)
    assert any("conflict" in p for p in problems)
    assert any("outside" in p for p in problems)


# ---------------------------------------------------------------------------
# tie-breaking


def test_perturb_tpdp_zero_lambda_and_ties():
    S = np.ones((2, 2))
    E = noise_matrix((2, 2), 3)
    assert np.array_equal(perturb_tpdp(S, E, lam=0.0), S)
    assert np.array_equal(noise_matrix((2, 2), 3), E)
    E = np.array([[0.9, 0.1], [0.2, 0.8]])
    Sp = perturb_tpdp(S, E)
    allowed = [[True, True], [True, True]]
    values = [sum(Sp[r, p] for p, team in enumerate(a) for r in team) for a in feasible_assignments(2, 2, 1, [1, 1], allowed)]
    assert len(values) == 2 and values[0] != values[1]
    res = deterministic_assignment(Sp, make_venue(2, 2))
    assert np.array_equal(res.probabilities, np.eye(2))
    with pytest.raises(ValidationError):
        perturb_tpdp(S, np.full((2, 2), 2.0))


def test_perturb_aaai_all_supported_is_unchanged():
    venue = make_venue(2, 2)
    S = np.array([[1.0, 0.2], [0.3, 0.9]])
    res = perturb_aaai(S, np.ones((2, 2), dtype=bool), venue, 1.0)
    assert np.array_equal(res.similarity, S)


def test_perturb_aaai_picks_largest_admissible_epsilon():
    # the diagonal wins by 1e-4 but sits outside the on-policy support;
    # eps = 1e-3 flips the optimum (gap 1e-4 > 1e-5), eps = 1e-6 does not
    venue = make_venue(2, 2)
    S = np.array([[1.0, 1.0 - 0.5e-4], [1.0 - 0.5e-4, 1.0]])
    support = np.array([[False, True], [True, False]])
    res = perturb_aaai(S, support, venue, 1.0)
    assert res.epsilon == 1e-6
    assert res.tried[1e-3] == pytest.approx(1e-4, abs=1e-9)
    assert res.within_tolerance


def test_perturb_aaai_reproduces_on_policy_marginals(rng):
    venue = make_venue(4, 4)
    S = np.round(rng.random((4, 4)), 1)
    on = randomized_assignment(S, venue, 0.5)
    res = perturb_aaai(S, on.support, venue, 0.5)
    again = randomized_assignment(res.similarity, venue, 0.5)
    assert np.allclose(again.probabilities, on.probabilities)
