"""Assignment linear programs: deterministic, probability-capped randomized, and tie-breaking perturbations."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import sparse
from scipy.optimize import linprog

from .domain import Venue
from .errors import InfeasibleError, SolverError, UnboundedError, ValidationError
from .rounding import round_deterministic

logger = logging.getLogger(__name__)

FEASIBILITY_TOL = 1e-9
AAAI_EPSILONS = (1e-3, 1e-6, 1e-9)


@dataclass
class LinearProgram:
    """``sense`` c.x subject to A_ub x <= b_ub, A_eq x = b_eq and lower <= x <= upper."""

    c: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    A_ub: Optional[sparse.spmatrix] = None
    b_ub: Optional[np.ndarray] = None
    A_eq: Optional[sparse.spmatrix] = None
    b_eq: Optional[np.ndarray] = None
    sense: str = "min"
    hint: str = ""

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float)
        n = self.c.size
        self.lower = np.broadcast_to(np.asarray(self.lower, dtype=float), (n,)).copy()
        self.upper = np.broadcast_to(np.asarray(self.upper, dtype=float), (n,)).copy()
        if np.any(self.lower > self.upper):
            raise ValidationError("variable bounds need lower <= upper")
        for A, b, name in ((self.A_ub, self.b_ub, "inequality"), (self.A_eq, self.b_eq, "equality")):
            if A is not None and (A.shape[1] != n or A.shape[0] != len(b)):
                raise ValidationError(f"{name} constraints do not match {n} variables")
        if self.sense not in ("min", "max"):
            raise ValidationError(f"sense must be 'min' or 'max', got {self.sense!r}")

    @property
    def n_vars(self) -> int:
        return self.c.size


@dataclass
class LPSolution:
    x: np.ndarray
    objective: float
    iterations: int = 0
    message: str = ""


def solve_lp(lp: LinearProgram, tolerance: float = 1e-8, vertex: bool = False) -> LPSolution:
    """Solve ``lp`` with HiGHS.

    ``vertex=True`` forces dual simplex, which returns a basic (vertex)
    optimum. Raises InfeasibleError / UnboundedError / SolverError.
    """
    c = -lp.c if lp.sense == "max" else lp.c
    options = {
        "primal_feasibility_tolerance": 1e-10,
        "dual_feasibility_tolerance": min(max(tolerance * 1e-2, 1e-10), 1e-7),
        "presolve": True,
    }
    res = linprog(
        c,
        A_ub=lp.A_ub,
        b_ub=lp.b_ub,
        A_eq=lp.A_eq,
        b_eq=lp.b_eq,
        bounds=np.column_stack([lp.lower, lp.upper]),
        method="highs-ds" if vertex else "highs",
        options=options,
    )
    if res.status == 2:
        raise InfeasibleError("linear program is infeasible" + (f" ({lp.hint})" if lp.hint else ""))
    if res.status == 3:
        raise UnboundedError("linear program is unbounded")
    if res.status != 0:
        raise SolverError(f"solver failed: {res.message}")
    x = np.clip(res.x, lp.lower, lp.upper)
    objective = float(lp.c @ x)
    return LPSolution(x=x, objective=objective, iterations=int(getattr(res, "nit", 0) or 0), message=res.message)


@dataclass
class MarginalMatrix:
    """Per-pair assignment probabilities produced by an assignment LP."""

    probabilities: np.ndarray
    objective: float
    q: float = 1.0
    params: Optional[dict] = None
    perturbation: dict = field(default_factory=dict)

    @property
    def support(self) -> np.ndarray:
        return self.probabilities > 0


def _assignment_hint(venue: Venue, allowed: np.ndarray, q: float) -> str:
    eligible = allowed.sum(axis=0)
    short = [venue.papers[p] for p in range(venue.shape[1]) if q * eligible[p] < venue.paper_load - 1e-12]
    if short:
        return f"papers {short[:5]} cannot reach load {venue.paper_load} with q={q}"
    caps = np.minimum(venue.cap_array(), q * allowed.sum(axis=1))
    if caps.sum() < venue.n_reviews - 1e-9:
        return f"total usable capacity {caps.sum():g} < N={venue.n_reviews}"
    return "reviewer caps and paper loads are jointly inconsistent"


def assignment_lp(similarity: np.ndarray, venue: Venue, q: float = 1.0) -> LinearProgram:
    """Build the (expected) sum-of-similarities LP over a venue.

    Variables are flattened row-major over ``[reviewer, paper]``; NaN
    similarities and conflict pairs are fixed to zero.
    """
    if not 0.0 < q <= 1.0:
        raise ValidationError(f"q must lie in (0, 1], got {q}")
    n_r, n_p = venue.shape
    s = np.asarray(similarity, dtype=float)
    if s.shape != venue.shape:
        raise ValidationError(f"similarity shape {s.shape} does not match venue {venue.shape}")
    allowed = ~venue.conflict_mask() & ~np.isnan(s)
    c = np.where(allowed, s, 0.0).ravel()
    upper = np.where(allowed, q, 0.0).ravel()
    idx = np.arange(n_r * n_p).reshape(n_r, n_p)
    A_eq = sparse.csr_matrix((np.ones(n_r * n_p), (np.repeat(np.arange(n_p), n_r), idx.T.ravel())), shape=(n_p, n_r * n_p))
    A_ub = sparse.csr_matrix((np.ones(n_r * n_p), (np.repeat(np.arange(n_r), n_p), idx.ravel())), shape=(n_r, n_r * n_p))
    return LinearProgram(
        c=c,
        lower=np.zeros(n_r * n_p),
        upper=upper,
        A_ub=A_ub,
        b_ub=venue.cap_array(),
        A_eq=A_eq,
        b_eq=np.full(n_p, float(venue.paper_load)),
        sense="max",
        hint=_assignment_hint(venue, allowed, q),
    )


def check_marginals(p: np.ndarray, venue: Venue, q: float = 1.0, tol: float = FEASIBILITY_TOL) -> list:
    """Independent feasibility audit of a marginal matrix; returns a list of violations."""
    p = np.asarray(p, dtype=float)
    problems = []
    col = p.sum(axis=0)
    bad = np.abs(col - venue.paper_load) > tol
    if bad.any():
        problems.append(f"paper loads off by up to {np.abs(col - venue.paper_load).max():.3g}")
    row = p.sum(axis=1)
    if np.any(row > venue.cap_array() + tol):
        problems.append(f"reviewer caps exceeded by up to {(row - venue.cap_array()).max():.3g}")
    if np.any(p < -tol) or np.any(p > q + tol):
        problems.append(f"entries outside [0, {q}]")
    conflicts = venue.conflict_mask()
    if np.any(np.abs(p[conflicts]) > tol):
        problems.append("positive probability on a conflict pair")
    return problems


def _finish(x: np.ndarray, venue: Venue, q: float) -> np.ndarray:
    p = np.clip(x.reshape(venue.shape), 0.0, q)
    p[np.abs(p) < 1e-12] = 0.0
    p[np.abs(p - q) < 1e-12] = q
    p[venue.conflict_mask()] = 0.0
    return p


def randomized_assignment(similarity: np.ndarray, venue: Venue, q: float, tolerance: float = 1e-8, params: Optional[dict] = None) -> MarginalMatrix:
    """Marginals maximizing expected similarity with every pair probability capped at ``q``."""
    lp = assignment_lp(similarity, venue, q)
    sol = solve_lp(lp, tolerance=tolerance, vertex=True)
    p = _finish(sol.x, venue, q)
    problems = check_marginals(p, venue, q)
    if problems:
        raise SolverError("solver returned infeasible marginals: " + "; ".join(problems))
    objective = float(np.nansum(np.where(np.isnan(similarity), 0.0, similarity) * p))
    return MarginalMatrix(probabilities=p, objective=objective, q=q, params=params)


def deterministic_assignment(similarity: np.ndarray, venue: Venue, tolerance: float = 1e-8, params: Optional[dict] = None) -> MarginalMatrix:
    """Binary assignment maximizing total similarity.

    The dual simplex optimum is a vertex and hence integral; any residual
    fractional part is removed by cycle/path rounding at equal objective.
    """
    lp = assignment_lp(similarity, venue, 1.0)
    sol = solve_lp(lp, tolerance=tolerance, vertex=True)
    p = _finish(sol.x, venue, 1.0)
    frac = (p > 1e-9) & (p < 1 - 1e-9)
    if frac.any():
        logger.info("dual simplex returned %d fractional entries; rounding at equal objective", int(frac.sum()))
        p = round_deterministic(p, venue.caps)
    z = np.rint(p)
    problems = check_marginals(z, venue, 1.0)
    if problems:
        raise SolverError("deterministic assignment infeasible after rounding: " + "; ".join(problems))
    s = np.where(np.isnan(similarity), 0.0, similarity)
    return MarginalMatrix(probabilities=z, objective=float((s * z).sum()), q=1.0, params=params)


def assign(similarity: np.ndarray, venue: Venue, q: float, params: Optional[dict] = None) -> MarginalMatrix:
    """Dispatch: deterministic assignment at ``q == 1``, capped randomized assignment otherwise."""
    if q >= 1.0:
        return deterministic_assignment(similarity, venue, params=params)
    return randomized_assignment(similarity, venue, q, params=params)


# ---------------------------------------------------------------------------
# tie-breaking


def noise_matrix(shape, seed: int) -> np.ndarray:
    """Uniform [0, 1] tie-breaking noise, reproducible from ``seed``."""
    return np.random.default_rng(seed).uniform(0.0, 1.0, size=shape)


def perturb_tpdp(similarity: np.ndarray, noise: np.ndarray, lam: float = 1e-8) -> np.ndarray:
    """Blend similarities with fixed noise so that ties are broken consistently."""
    noise = np.asarray(noise, dtype=float)
    if noise.shape != np.shape(similarity):
        raise ValidationError("noise matrix must match the similarity shape")
    if np.any(noise < 0) or np.any(noise > 1):
        raise ValidationError("noise entries must lie in [0, 1]")
    return (1.0 - lam) * np.asarray(similarity, dtype=float) + lam * noise


@dataclass
class PerturbationResult:
    similarity: np.ndarray
    epsilon: float
    gap: float
    within_tolerance: bool
    tried: dict


def perturb_aaai(
    similarity: np.ndarray,
    support: np.ndarray,
    venue: Venue,
    q: float,
    tolerance: float = 1e-5,
    candidates: Sequence[float] = AAAI_EPSILONS,
) -> PerturbationResult:
    """Penalize pairs outside the on-policy support by the largest admissible epsilon.

    An epsilon is admissible when the perturbed LP solution loses at most
    ``tolerance`` total (unperturbed) similarity against the unperturbed
    optimum. Falls back to the smallest candidate, flagged, if none is.
    """
    s = np.asarray(similarity, dtype=float)
    outside = ~np.asarray(support, dtype=bool)
    if not outside[~venue.conflict_mask() & ~np.isnan(s)].any():
        return PerturbationResult(s.copy(), max(candidates), 0.0, True, {})
    base = assign(s, venue, q).objective
    s0 = np.where(np.isnan(s), 0.0, s)
    tried = {}
    for eps in sorted(candidates, reverse=True):
        perturbed = s - eps * outside
        sol = assign(perturbed, venue, q)
        gap = base - float((s0 * sol.probabilities).sum())
        tried[eps] = gap
        if gap <= tolerance:
            return PerturbationResult(perturbed, eps, gap, True, tried)
    eps = min(candidates)
    logger.warning("no epsilon keeps the similarity gap within %g; using %g", tolerance, eps)
    return PerturbationResult(s - eps * outside, eps, tried[eps], False, tried)
