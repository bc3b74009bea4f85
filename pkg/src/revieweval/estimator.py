"""Horvitz-Thompson off-policy estimation with imputation, variance and Imbens-Manski intervals."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from statistics import NormalDist
from typing import Optional, Sequence

import numpy as np

from .domain import OutcomeRecord, OutcomeScale, PairPartition, Venue, classify_pairs, observed_assignment, outcome_matrix
from .errors import ValidationError

_STANDARD_NORMAL = NormalDist()


def normal_cdf(x: float) -> float:
    """Standard normal CDF via the complementary error function."""
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def normal_ppf(p: float) -> float:
    return _STANDARD_NORMAL.inv_cdf(p)


@dataclass(frozen=True)
class WeightTable:
    """Importance weights P_B/P_A; NaN where the on-policy probability is zero."""

    values: np.ndarray

    @property
    def defined(self) -> np.ndarray:
        return ~np.isnan(self.values)


@dataclass(frozen=True)
class ImputationPlan:
    """Imputed outcomes for attrition and positivity-violation pairs, plus the absent-reviewer mean."""

    values: np.ndarray
    ybar: float
    provenance: str = "custom"

    def clipped(self, scale: OutcomeScale) -> "ImputationPlan":
        return ImputationPlan(np.clip(self.values, scale.y_min, scale.y_max), self.ybar, self.provenance)


@dataclass
class EstimateReport:
    point: float
    variance: Optional[float]
    n_reviews: int
    counts: dict
    provenance: str
    ybar: float
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "point": self.point,
            "variance": self.variance,
            "n_reviews": self.n_reviews,
            "counts": self.counts,
            "provenance": self.provenance,
            "ybar": self.ybar,
            **({"details": self.details} if self.details else {}),
        }


def importance_weights(p_on: np.ndarray, p_off: np.ndarray, partition: Optional[PairPartition] = None) -> WeightTable:
    """W = P_B / P_A wherever P_A > 0; undefined (NaN) elsewhere, never divided."""
    p_on = np.asarray(p_on, dtype=float)
    p_off = np.asarray(p_off, dtype=float)
    w = np.full(p_on.shape, np.nan)
    pos = p_on > 0
    w[pos] = p_off[pos] / p_on[pos]
    if partition is not None and np.any(partition.violations & pos):
        raise ValidationError("partition marks a pair with positive on-policy probability as a positivity violation")
    return WeightTable(w)


def mean_observed(outcomes: np.ndarray, weights: WeightTable, supported: np.ndarray, assigned: np.ndarray) -> float:
    """Weighted mean outcome over assigned pairs in the supported set."""
    mask = np.asarray(supported, dtype=bool) & (np.asarray(assigned) > 0) & weights.defined
    w = np.where(mask, weights.values, 0.0)
    total = w.sum()
    if not mask.any() or total <= 0:
        raise ValidationError("weighted mean undefined: no observed pair carries positive weight")
    if np.any(np.isnan(outcomes[mask & (w > 0)])):
        raise ValidationError("supported assigned pair without an observed outcome")
    return float((np.where(mask, np.nan_to_num(outcomes), 0.0) * w).sum() / total)


def _coefficients(assigned, weights: WeightTable, partition: PairPartition, p_off) -> dict:
    """Per-set coefficient grids multiplying outcomes in the estimator numerator."""
    zw = np.where(weights.defined, np.asarray(assigned, dtype=float) * np.nan_to_num(weights.values), 0.0)
    return {
        "supported": np.where(partition.supported, zw, 0.0),
        "attrition": np.where(partition.attrition, zw, 0.0),
        "absent": np.where(partition.absent, zw, 0.0),
        "violations": np.where(partition.violations, np.asarray(p_off, dtype=float), 0.0),
    }


def ht_estimate(
    assigned: np.ndarray,
    outcomes: np.ndarray,
    weights: WeightTable,
    partition: PairPartition,
    plan: ImputationPlan,
    p_off: np.ndarray,
    n_reviews: int,
) -> EstimateReport:
    """Horvitz-Thompson estimate of the off-policy mean with imputed outcomes.

    Observed outcomes enter with weight Z^A W, attrition pairs with their
    imputed value and weight Z^A W, absent-reviewer pairs with the weighted
    observed mean, and positivity violations with their imputed value
    weighted by the off-policy probability.
    """
    coef = _coefficients(assigned, weights, partition, p_off)
    needs = (partition.attrition & (coef["attrition"] != 0)) | (partition.violations & (coef["violations"] != 0))
    if np.any(np.isnan(plan.values[needs])):
        raise ValidationError("imputation plan does not cover every attrition / positivity-violation pair")
    obs = coef["supported"] != 0
    if np.any(np.isnan(outcomes[obs])):
        raise ValidationError("supported pair with positive weight has no observed outcome")
    if np.any(coef["absent"] != 0) and not math.isfinite(plan.ybar):
        raise ValidationError("absent-reviewer pairs need a finite mean outcome")
    total = (
        (coef["supported"] * np.nan_to_num(outcomes)).sum()
        + (coef["attrition"] * np.nan_to_num(plan.values)).sum()
        + (coef["absent"].sum() * plan.ybar if np.any(coef["absent"] != 0) else 0.0)
        + (coef["violations"] * np.nan_to_num(plan.values)).sum()
    )
    return EstimateReport(
        point=float(total / n_reviews),
        variance=None,
        n_reviews=int(n_reviews),
        counts=partition.counts(),
        provenance=plan.provenance,
        ybar=plan.ybar,
    )


def effective_outcomes(outcomes: np.ndarray, partition: PairPartition, plan: ImputationPlan) -> np.ndarray:
    """Y' grid: observed values on the supported set, plan values on attrition/violations, the mean on absent pairs."""
    y = np.full(outcomes.shape, np.nan)
    y[partition.supported] = outcomes[partition.supported]
    fill = partition.attrition | partition.violations
    y[fill] = plan.values[fill]
    y[partition.absent] = plan.ybar
    return y


def variance_estimate(
    covariance,
    assigned: np.ndarray,
    weights: WeightTable,
    partition: PairPartition,
    plan: ImputationPlan,
    outcomes: np.ndarray,
    n_reviews: int,
) -> float:
    """Plug-in variance (1/N^2) sum_ij Cov[Z_i, Z_j] Z^A_i Z^A_j W_i W_j Y'_i Y'_j.

    ``covariance`` is a CovarianceAccumulator (or any object exposing
    ``covariance(flat_pairs)``) estimated under the on-policy.
    """
    y = effective_outcomes(outcomes, partition, plan)
    z = np.asarray(assigned) > 0
    active = z & weights.defined & ~partition.ignored
    flat = np.flatnonzero(active.ravel())
    if flat.size == 0:
        return 0.0
    v = weights.values.ravel()[flat] * y.ravel()[flat]
    zero_weight = weights.values.ravel()[flat] == 0
    v[zero_weight] = 0.0
    if np.any(np.isnan(v)):
        raise ValidationError("assigned pair with undefined effective outcome in the variance sum")
    cov = covariance.covariance(flat)
    var = float(v @ cov @ v) / n_reviews**2
    return max(var, 0.0)


# ---------------------------------------------------------------------------
# Imbens-Manski


@dataclass(frozen=True)
class Interval:
    lower: float
    upper: float
    z: Optional[float]


def imbens_manski_z(scaled_width: float, alpha: float = 0.95, tol: float = 1e-12) -> float:
    """Solve Phi(z + w) - Phi(-z) = alpha for z by bisection.

    ``scaled_width`` is sqrt(N) (upper - lower) / max(sigma_lower, sigma_upper).
    The root lies between the one-sided and two-sided normal quantiles.
    """
    if scaled_width < 0:
        raise ValidationError("scaled width must be nonnegative")
    lo, hi = normal_ppf(alpha), normal_ppf((1.0 + alpha) / 2.0)
    if math.isinf(scaled_width):
        return lo

    def f(z):
        return normal_cdf(z + scaled_width) - normal_cdf(-z) - alpha

    if f(lo) >= 0:
        return lo
    if f(hi) <= 0:
        return hi
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if f(mid) < 0:
            lo = mid
        else:
            hi = mid
        if hi - lo < tol:
            break
    return 0.5 * (lo + hi)


def imbens_manski_interval(lower: float, upper: float, var_lower: float, var_upper: float, n: int, alpha: float = 0.95) -> Interval:
    """Confidence interval for a partially identified mean.

    ``var_lower`` / ``var_upper`` are the asymptotic variances sigma^2 of the
    sqrt(n)-scaled endpoint estimators, so each endpoint moves by
    ``z * sqrt(var / n)``.
    """
    if lower > upper:
        raise ValidationError(f"lower endpoint {lower} exceeds upper endpoint {upper}")
    if var_lower < 0 or var_upper < 0:
        raise ValidationError("variances must be nonnegative")
    sigma = max(math.sqrt(var_lower), math.sqrt(var_upper))
    if sigma == 0:
        return Interval(lower, upper, None)
    z = imbens_manski_z(math.sqrt(n) * (upper - lower) / sigma, alpha)
    return Interval(lower - z * math.sqrt(var_lower / n), upper + z * math.sqrt(var_upper / n), z)


def bounds_interval(lower: EstimateReport, upper: EstimateReport, alpha: float = 0.95) -> Interval:
    """Imbens-Manski interval around two endpoint estimates.

    The estimator variances Var[mu_hat] are converted to sqrt(N)-scale
    asymptotic variances (N * Var) so the endpoint margin is z * sqrt(Var).
    Missing variances are treated as zero.
    """
    n = lower.n_reviews
    vl = (lower.variance or 0.0) * n
    vu = (upper.variance or 0.0) * n
    lo, hi = lower.point, upper.point
    if lo > hi:
        # endpoints may cross by rounding noise only
        lo = hi = 0.5 * (lo + hi)
    return imbens_manski_interval(lo, hi, vl, vu, n, alpha)


# ---------------------------------------------------------------------------
# bundled inputs


@dataclass(frozen=True)
class EstimationInputs:
    """Everything the estimators need for one (on-policy, off-policy) pair."""

    venue: Venue
    p_on: np.ndarray
    p_off: np.ndarray
    assigned: np.ndarray
    outcomes: np.ndarray
    partition: PairPartition
    weights: WeightTable
    covariance: object = None

    @classmethod
    def build(cls, venue: Venue, records: Sequence[OutcomeRecord], p_on, p_off, covariance=None) -> "EstimationInputs":
        p_on = np.asarray(p_on, dtype=float)
        p_off = np.asarray(p_off, dtype=float)
        partition = classify_pairs(venue, p_on, p_off, records)
        return cls(
            venue=venue,
            p_on=p_on,
            p_off=p_off,
            assigned=observed_assignment(venue, records),
            outcomes=outcome_matrix(venue, records),
            partition=partition,
            weights=importance_weights(p_on, p_off, partition),
            covariance=covariance,
        )

    @property
    def n_reviews(self) -> int:
        return self.venue.n_reviews

    @property
    def scale(self) -> OutcomeScale:
        if self.venue.scale is None:
            raise ValidationError("venue has no outcome scale")
        return self.venue.scale

    def ybar(self) -> float:
        return mean_observed(self.outcomes, self.weights, self.partition.supported, self.assigned)

    def ybar_or_nan(self) -> float:
        """Weighted observed mean, or NaN when it is undefined and no absent pair needs it."""
        try:
            return self.ybar()
        except ValidationError:
            if np.any(self.partition.absent & (self.assigned > 0) & (np.nan_to_num(self.weights.values) > 0)):
                raise
            return math.nan

    def constant_plan(self, value: float, provenance: str) -> ImputationPlan:
        values = np.full(self.venue.shape, np.nan)
        values[self.partition.attrition | self.partition.violations] = value
        return ImputationPlan(values, self.ybar_or_nan(), provenance)

    def plan_from_values(self, grid: np.ndarray, provenance: str) -> ImputationPlan:
        values = np.full(self.venue.shape, np.nan)
        mask = self.partition.attrition | self.partition.violations
        values[mask] = np.asarray(grid, dtype=float)[mask]
        return ImputationPlan(values, self.ybar_or_nan(), provenance)

    def estimate(self, plan: ImputationPlan) -> EstimateReport:
        report = ht_estimate(self.assigned, self.outcomes, self.weights, self.partition, plan, self.p_off, self.n_reviews)
        if self.covariance is not None:
            report.variance = variance_estimate(
                self.covariance, self.assigned, self.weights, self.partition, plan, self.outcomes, self.n_reviews
            )
        return report


def mean_imputation(inputs: EstimationInputs) -> EstimateReport:
    """Point estimate imputing the weighted observed mean for every missing outcome."""
    ybar = inputs.ybar()
    return inputs.estimate(inputs.constant_plan(ybar, "mean"))
