"""Partial identification of the off-policy mean.

Manski bounds impute the extremes of the outcome scale. The monotonicity
and Lipschitz variants first repair the observed outcomes into surrogate
values that satisfy the assumption (minimizing total absolute change), then
push the unobserved surrogates down or up as far as the assumption allows.
Both levels are solved as linear programs.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import sparse

from .domain import PairTable, Venue
from .errors import SolverError, ValidationError
from .estimator import EstimateReport, EstimationInputs, Interval, bounds_interval
from .lp import LinearProgram, solve_lp
from .similarity import bid_matrix

logger = logging.getLogger(__name__)

PSI = 1e9
CONSTRAINT_TOL = 1e-8


# ---------------------------------------------------------------------------
# covariates and distances


def covariate_matrix(venue: Venue, table: PairTable, lambda_bid: float = 1.0, dims: Optional[Sequence[str]] = None) -> tuple:
    """Stack per-pair covariates into a ``(n_reviewers * n_papers, c)`` array.

    Columns are drawn from ``text``, ``subject`` and ``bid`` (numeric bid
    value under the venue's scheme). By default a column is kept only if
    some pair has it. Returns ``(X, names)``; missing entries are NaN.
    """
    columns = {
        "text": np.asarray(table.text, dtype=float),
        "subject": np.asarray(table.subject, dtype=float),
        "bid": bid_matrix(table, venue.bid_scheme, lambda_bid),
    }
    if dims is None:
        dims = [name for name in ("text", "subject", "bid") if not np.all(np.isnan(columns[name]))]
    X = np.column_stack([columns[d].ravel() for d in dims]) if dims else np.zeros((table.text.size, 0))
    return X, tuple(dims)


@dataclass(frozen=True)
class DistanceSpec:
    """Per-dimension normalization ranges for the averaged L1 distance.

    A component missing on either side contributes the maximal distance 1.
    """

    ranges: tuple
    missing_penalty: float = 1.0

    def __post_init__(self):
        ranges = tuple(float(r) for r in self.ranges)
        if any(not r > 0 for r in ranges):
            raise ValidationError("normalization ranges must be positive")
        object.__setattr__(self, "ranges", ranges)

    @property
    def dimension(self) -> int:
        return len(self.ranges)

    @classmethod
    def from_points(cls, X: np.ndarray) -> "DistanceSpec":
        """Ranges = max - min per column over the present values (1 for constant columns)."""
        X = np.asarray(X, dtype=float)
        ranges = []
        for col in X.T:
            present = col[~np.isnan(col)]
            span = float(present.max() - present.min()) if present.size else 0.0
            ranges.append(span if span > 0 else 1.0)
        return cls(tuple(ranges))


def covariate_distance(x_i, x_j, spec: DistanceSpec) -> float:
    """Averaged normalized L1 distance; 1 for any component missing on either side."""
    x_i, x_j = np.asarray(x_i, dtype=float), np.asarray(x_j, dtype=float)
    if x_i.size != spec.dimension or x_j.size != spec.dimension:
        raise ValidationError("covariate vectors do not match the distance spec")
    total = 0.0
    for a, b, r in zip(x_i, x_j, spec.ranges):
        if math.isnan(a) or math.isnan(b):
            total += spec.missing_penalty
        else:
            total += min(abs(a - b) / r, 1.0)
    return total / spec.dimension


def pairwise_distances(X: np.ndarray, spec: DistanceSpec, Y: Optional[np.ndarray] = None) -> np.ndarray:
    """Distance matrix between rows of ``X`` (and ``Y`` if given)."""
    X = np.asarray(X, dtype=float)
    Y = X if Y is None else np.asarray(Y, dtype=float)
    out = np.zeros((X.shape[0], Y.shape[0]))
    for k, r in enumerate(spec.ranges):
        diff = np.abs(X[:, k][:, None] - Y[:, k][None, :]) / r
        diff = np.minimum(diff, 1.0)
        diff[np.isnan(diff)] = spec.missing_penalty
        out += diff
    return out / spec.dimension


# ---------------------------------------------------------------------------
# dominance


@dataclass(frozen=True)
class DominanceGraph:
    """Transitively reduced dominance edges ``(i, j)`` meaning X_i dominates X_j."""

    edges: np.ndarray
    n_nodes: int
    n_edges_full: int

    @property
    def n_edges(self) -> int:
        return len(self.edges)


def dominance_matrix(X: np.ndarray) -> np.ndarray:
    """``D[i, j]`` iff X_i >= X_j everywhere and > somewhere; rows with NaN compare with nothing."""
    X = np.asarray(X, dtype=float)
    complete = ~np.isnan(X).any(axis=1)
    ge = np.all(X[:, None, :] >= X[None, :, :], axis=2)
    gt = np.any(X[:, None, :] > X[None, :, :], axis=2)
    D = ge & gt & complete[:, None] & complete[None, :]
    return D


def dominance_graph(X: np.ndarray) -> DominanceGraph:
    """Dominance DAG over the rows of ``X`` with implied (transitive) edges removed."""
    D = dominance_matrix(X)
    n = D.shape[0]
    if n == 0:
        return DominanceGraph(np.zeros((0, 2), dtype=np.int64), 0, 0)
    Di = D.astype(np.int32)
    implied = (Di @ Di) > 0
    reduced = D & ~implied
    edges = np.argwhere(reduced).astype(np.int64)
    return DominanceGraph(edges, n, int(D.sum()))


# ---------------------------------------------------------------------------
# results


@dataclass
class SurrogateSolution:
    """Surrogate outcomes on the universe U for one side of a bound."""

    values: np.ndarray
    side: str
    primary: float
    secondary: float
    universe: np.ndarray
    observed: np.ndarray


@dataclass
class BoundsResult:
    method: str
    lower: EstimateReport
    upper: EstimateReport
    interval: Interval
    L: Optional[float] = None
    constraints: dict = field(default_factory=dict)
    surrogates: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "L": self.L,
            "lower": self.lower.to_dict(),
            "upper": self.upper.to_dict(),
            "interval": {"lower": self.interval.lower, "upper": self.interval.upper, "z": self.interval.z},
            "constraints": self.constraints,
        }


def manski_bounds(inputs: EstimationInputs, alpha: float = 0.95) -> BoundsResult:
    """Bounds from imputing the scale minimum and maximum for every missing outcome."""
    scale = inputs.scale
    lower = inputs.estimate(inputs.constant_plan(scale.y_min, "manski-lower"))
    upper = inputs.estimate(inputs.constant_plan(scale.y_max, "manski-upper"))
    return BoundsResult("manski", lower, upper, bounds_interval(lower, upper, alpha))


# ---------------------------------------------------------------------------
# surrogate programs


@dataclass
class _Universe:
    flat: np.ndarray          # grid indices of U
    observed: np.ndarray      # bool over U
    y: np.ndarray             # observed outcome over U (NaN otherwise)
    objective: np.ndarray     # secondary objective coefficients over U
    X: np.ndarray             # covariates over U


def _universe(inputs: EstimationInputs, X: np.ndarray, include_absent: bool = True) -> _Universe:
    part = inputs.partition
    U = part.universe.ravel()
    flat = np.flatnonzero(U)
    observed = part.observed.ravel()[flat]
    y = inputs.outcomes.ravel()[flat]
    z = inputs.assigned.ravel()[flat]
    w = np.nan_to_num(inputs.weights.values.ravel()[flat])
    coef = np.zeros(flat.size)
    att = part.attrition.ravel()[flat]
    absent = part.absent.ravel()[flat]
    viol = part.violations.ravel()[flat]
    coef[att] = (z * w)[att]
    if include_absent:
        coef[absent] = (z * w)[absent]
    coef[viol] = inputs.p_off.ravel()[flat][viol]
    X = np.asarray(X, dtype=float)
    if X.shape[0] != inputs.p_on.size:
        raise ValidationError("covariate matrix must have one row per reviewer-paper pair")
    return _Universe(flat, observed, y, coef, X[flat])


def _surrogate_lp_parts(univ: _Universe, rows_ub: list, cols_ub: list, vals_ub: list, b_ub: list, y_min: float, y_max: float):
    n = univ.flat.size
    obs_idx = np.flatnonzero(univ.observed)
    m = obs_idx.size
    n_vars = n + 2 * m
    # T_o - s+_o + s-_o = Y_o
    eq_rows = np.concatenate([np.arange(m)] * 3)
    eq_cols = np.concatenate([obs_idx, n + np.arange(m), n + m + np.arange(m)])
    eq_vals = np.concatenate([np.ones(m), -np.ones(m), np.ones(m)])
    A_eq = sparse.csr_matrix((eq_vals, (eq_rows, eq_cols)), shape=(m, n_vars)) if m else None
    b_eq = univ.y[obs_idx] if m else None
    A_ub = sparse.csr_matrix((vals_ub, (rows_ub, cols_ub)), shape=(len(b_ub), n_vars)) if b_ub else None
    lower = np.concatenate([np.full(n, y_min), np.zeros(2 * m)])
    upper = np.concatenate([np.full(n, y_max), np.full(2 * m, np.inf)])
    return n_vars, m, A_eq, b_eq, A_ub, (np.asarray(b_ub, dtype=float) if b_ub else None), lower, upper


def _solve_two_level(univ, rows_ub, cols_ub, vals_ub, b_ub, scale, side: str, big_psi: Optional[float]):
    n = univ.flat.size
    n_vars, m, A_eq, b_eq, A_ub, b_ub_arr, lower, upper = _surrogate_lp_parts(univ, rows_ub, cols_ub, vals_ub, b_ub, scale.y_min, scale.y_max)
    slack_cost = np.concatenate([np.zeros(n), np.ones(2 * m)])
    sign = 1.0 if side == "lower" else -1.0
    secondary = np.concatenate([univ.objective, np.zeros(2 * m)])
    if big_psi is not None:
        lp = LinearProgram(big_psi * slack_cost + sign * secondary, lower, upper, A_ub, b_ub_arr, A_eq, b_eq, "min")
        sol = solve_lp(lp, tolerance=1e-12)
        x = sol.x
        primary = float(slack_cost @ x)
    else:
        first = solve_lp(LinearProgram(slack_cost, lower, upper, A_ub, b_ub_arr, A_eq, b_eq, "min"))
        primary = float(first.objective)
        pin_row = sparse.csr_matrix(slack_cost[None, :])
        pin = primary + 1e-10 * max(1.0, abs(primary))
        A2 = pin_row if A_ub is None else sparse.vstack([A_ub, pin_row]).tocsr()
        b2 = np.array([pin]) if b_ub_arr is None else np.concatenate([b_ub_arr, [pin]])
        second = solve_lp(LinearProgram(sign * secondary, lower, upper, A2, b2, A_eq, b_eq, "min"))
        x = second.x
        primary = float(slack_cost @ x)
    t = x[:n]
    return t, primary, float(univ.objective @ t)


def _verify(t, univ, rows_ub, cols_ub, vals_ub, b_ub, scale, tol=CONSTRAINT_TOL):
    """Re-check surrogates against box and pairwise constraints without trusting the solver."""
    if np.any(t < scale.y_min - tol) or np.any(t > scale.y_max + tol):
        raise SolverError("surrogate outside the outcome scale")
    if b_ub:
        n = t.size
        A = sparse.csr_matrix((vals_ub, (rows_ub, cols_ub)), shape=(len(b_ub), n))
        excess = A @ t - np.asarray(b_ub)
        if np.any(excess > tol):
            raise SolverError(f"surrogate violates a pairwise constraint by {excess.max():.3g}")


def _bounds_from_surrogates(inputs, univ, rows_ub, cols_ub, vals_ub, b_ub, method, big_psi, alpha, extra):
    scale = inputs.scale
    reports, surrogates = {}, {}
    for side in ("lower", "upper"):
        t, primary, secondary = _solve_two_level(univ, rows_ub, cols_ub, vals_ub, b_ub, scale, side, big_psi)
        t = np.clip(t, scale.y_min, scale.y_max)
        _verify(t, univ, rows_ub, cols_ub, vals_ub, b_ub, scale)
        grid = np.full(inputs.venue.shape, np.nan)
        grid.ravel()[univ.flat] = t
        surrogates[side] = SurrogateSolution(grid, side, primary, secondary, univ.flat, univ.observed)
        reports[side] = inputs.estimate(inputs.plan_from_values(grid, f"{method}-{side}"))
        reports[side].details = {"primary_objective": primary, "secondary_objective": secondary}
    interval = bounds_interval(reports["lower"], reports["upper"], alpha)
    return BoundsResult(method, reports["lower"], reports["upper"], interval, constraints=extra, surrogates=surrogates)


def monotonicity_bounds(
    inputs: EstimationInputs,
    X: np.ndarray,
    alpha: float = 0.95,
    big_psi: Optional[float] = None,
    include_absent: bool = True,
) -> BoundsResult:
    """Bounds under monotonicity of outcomes in the covariates.

    ``X`` holds one covariate row per reviewer-paper pair (row-major grid
    order). ``big_psi`` switches from two sequential LPs to a single
    weighted objective with that weight on the repair term.
    """
    univ = _universe(inputs, X, include_absent)
    graph = dominance_graph(univ.X)
    # T_j - T_i <= 0 for every reduced edge i -> j
    k = graph.n_edges
    rows = np.concatenate([np.arange(k), np.arange(k)]).tolist()
    cols = np.concatenate([graph.edges[:, 1], graph.edges[:, 0]]).tolist() if k else []
    vals = np.concatenate([np.ones(k), -np.ones(k)]).tolist() if k else []
    b = [0.0] * k
    extra = {"universe": int(univ.flat.size), "dominance_edges": graph.n_edges_full, "reduced_edges": graph.n_edges}
    return _bounds_from_surrogates(inputs, univ, rows, cols, vals, b, "monotonicity", big_psi, alpha, extra)


def lipschitz_constraints(univ_X: np.ndarray, spec: DistanceSpec, L: float, width: float) -> tuple:
    """Pairwise |T_i - T_j| <= L d_ij rows, dropping pairs already implied by the box."""
    D = pairwise_distances(univ_X, spec)
    n = D.shape[0]
    iu, ju = np.triu_indices(n, k=1)
    limits = L * D[iu, ju]
    keep = limits < width
    iu, ju, limits = iu[keep], ju[keep], limits[keep]
    k = iu.size
    rows = np.concatenate([np.arange(k), np.arange(k), k + np.arange(k), k + np.arange(k)])
    cols = np.concatenate([iu, ju, ju, iu])
    vals = np.concatenate([np.ones(k), -np.ones(k), np.ones(k), -np.ones(k)])
    b = np.concatenate([limits, limits])
    return rows.tolist(), cols.tolist(), vals.tolist(), b.tolist(), int(n * (n - 1) // 2), int(k)


def lipschitz_bounds(
    inputs: EstimationInputs,
    X: np.ndarray,
    L: float,
    spec: Optional[DistanceSpec] = None,
    alpha: float = 0.95,
    big_psi: Optional[float] = None,
    include_absent: bool = True,
) -> BoundsResult:
    """Bounds under |Y_i - Y_j| <= L d(X_i, X_j).

    ``spec`` defaults to min/max normalization over the universe U.
    """
    if not L > 0:
        raise ValidationError(f"Lipschitz constant must be positive, got {L}")
    univ = _universe(inputs, X, include_absent)
    spec = spec or DistanceSpec.from_points(univ.X)
    rows, cols, vals, b, n_pairs, n_kept = lipschitz_constraints(univ.X, spec, L, inputs.scale.width)
    extra = {"universe": int(univ.flat.size), "pairs": n_pairs, "kept_pairs": n_kept, "pruned_pairs": n_pairs - n_kept}
    result = _bounds_from_surrogates(inputs, univ, rows, cols, vals, b, "lipschitz", big_psi, alpha, extra)
    result.L = float(L)
    return result


# ---------------------------------------------------------------------------
# calibration


@dataclass
class Calibration:
    targets: dict
    hard_violations: int
    n_pairs: int
    ratios: np.ndarray

    def violation_fraction(self, L: float) -> float:
        if self.ratios.size == 0:
            return 0.0
        return float(np.mean(self.ratios > L))


def calibrate_lipschitz(
    X_obs: np.ndarray,
    y_obs: np.ndarray,
    targets: Sequence[float] = (0.10, 0.05, 0.01),
    spec: Optional[DistanceSpec] = None,
    grid: Optional[Sequence[float]] = None,
) -> Calibration:
    """Smallest L whose share of violating observed pairs falls below each target.

    A pair (i, j) violates L when |Y_i - Y_j| > L d(X_i, X_j). Pairs at zero
    distance with different outcomes violate every L; they are counted
    separately and left out of the fractions. The default grid is the set of
    breakpoints |dY| / d plus 0. A target of 0 requires no violation at all.
    """
    X_obs = np.asarray(X_obs, dtype=float)
    y_obs = np.asarray(y_obs, dtype=float)
    if X_obs.shape[0] < 2:
        raise ValidationError("calibration needs at least two observed pairs")
    spec = spec or DistanceSpec.from_points(X_obs)
    D = pairwise_distances(X_obs, spec)
    iu, ju = np.triu_indices(X_obs.shape[0], k=1)
    d = D[iu, ju]
    dy = np.abs(y_obs[iu] - y_obs[ju])
    if np.all(d == 0):
        raise ValidationError("all observed covariates coincide; distances are all zero")
    hard = int(np.sum((d == 0) & (dy > 0)))
    usable = d > 0
    ratios = np.sort(dy[usable] / d[usable])
    candidates = np.unique(np.concatenate([[0.0], ratios])) if grid is None else np.sort(np.asarray(grid, dtype=float))
    result = {}
    for f in targets:
        chosen = None
        for L in candidates:
            frac = float(np.mean(ratios > L)) if ratios.size else 0.0
            if (frac < f) or (f == 0 and frac == 0):
                chosen = float(L)
                break
        result[f] = chosen
    return Calibration(result, hard, int(d.size), ratios)
