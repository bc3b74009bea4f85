"""Independent reference computations used as test oracles.

Each oracle is written from the defining formula with plain loops and
exhaustive enumeration; none of them calls into the package.
"""

import itertools
import math

import mpmath


def feasible_assignments(n_r, n_p, load, caps, allowed):
    """Every 0/1 assignment (as a tuple of reviewer tuples per paper) meeting loads, caps and conflicts."""
    per_paper = []
    for p in range(n_p):
        ok = [r for r in range(n_r) if allowed[r][p]]
        per_paper.append(list(itertools.combinations(ok, load)))
    out = []
    for choice in itertools.product(*per_paper):
        used = [0] * n_r
        for team in choice:
            for r in team:
                used[r] += 1
        if all(used[r] <= caps[r] for r in range(n_r)):
            out.append(choice)
    return out


def best_assignment_value(S, load, caps, allowed):
    """Exhaustive-search optimum of the total similarity; None when infeasible."""
    n_r, n_p = len(S), len(S[0])
    best = None
    for choice in feasible_assignments(n_r, n_p, load, caps, allowed):
        value = sum(S[r][p] for p, team in enumerate(choice) for r in team)
        if best is None or value > best:
            best = value
    return best


def ht_reference(n_reviews, cells, ybar):
    """Off-policy estimate from its defining sum.

    ``cells`` is an iterable of dicts with keys ``kind`` (one of
    ``"supported"``, ``"attrition"``, ``"absent"``, ``"violation"``),
    ``z`` (0/1 logged assignment), ``p_on``, ``p_off``, ``y`` (observed
    outcome or None) and ``imputed`` (plan value or None).
    """
    total = 0.0
    for c in cells:
        if c["kind"] == "violation":
            total += c["imputed"] * c["p_off"]
            continue
        if c["z"] == 0:
            continue
        w = c["p_off"] / c["p_on"]
        if c["kind"] == "supported":
            total += c["y"] * w
        elif c["kind"] == "attrition":
            total += c["imputed"] * w
        elif c["kind"] == "absent":
            total += ybar * w
    return total / n_reviews


def surrogate_grid_search(levels, observed, coef, constraints):
    """Lexicographic surrogate optimum by enumerating every level assignment.

    Parameters
    ----------
    levels : sequence of float
        Admissible values for every surrogate.
    observed : dict
        Index -> observed outcome for the observed members of U.
    coef : sequence of float
        Secondary objective coefficient per member of U.
    constraints : iterable of (i, j, bound)
        Rows ``T_i - T_j <= bound``.

    Returns
    -------
    (primary, lowest secondary, highest secondary) over the assignments that
    minimize the repair cost sum |T_o - Y_o|.
    """
    n = len(coef)
    best, lo, hi = math.inf, math.inf, -math.inf
    for t in itertools.product(levels, repeat=n):
        if any(t[i] - t[j] > b + 1e-12 for i, j, b in constraints):
            continue
        primary = sum(abs(t[i] - y) for i, y in observed.items())
        secondary = sum(c * v for c, v in zip(coef, t))
        if primary < best - 1e-12:
            best, lo, hi = primary, secondary, secondary
        elif abs(primary - best) <= 1e-12:
            lo, hi = min(lo, secondary), max(hi, secondary)
    return best, lo, hi


def imbens_manski_root(scaled_width, alpha=0.95):
    """z solving Phi(z + w) - Phi(-z) = alpha, by high-precision root finding."""
    mpmath.mp.dps = 30
    f = lambda z: mpmath.ncdf(z + scaled_width) - mpmath.ncdf(-z) - alpha
    return float(mpmath.findroot(f, (mpmath.mpf("1.6"), mpmath.mpf("2.0")), solver="anderson"))
