"""Batch analyses: policy sweeps, cost of randomization, bad-policy power check, reports."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .bounds import BoundsResult, DistanceSpec, covariate_matrix, lipschitz_bounds, manski_bounds, monotonicity_bounds
from .domain import PairTable, Venue
from .errors import InfeasibleError, ReviewEvalError, ValidationError
from .estimator import EstimateReport, EstimationInputs, mean_imputation
from .lp import assign, deterministic_assignment, perturb_aaai, perturb_tpdp
from .models import TrainedImputer, model_plan_values
from .similarity import PolicyParams, similarity_matrix

logger = logging.getLogger(__name__)

METHODS = ("mean", "model", "manski", "mono", "lip")
SWEEP_PARAMS = ("w_text", "lambda_bid", "q")
REPORT_COLUMNS = ("param", "value", "method", "point", "lo", "hi", "ci_lo", "ci_hi")
EXTRA_COLUMNS = ("status", "error", "observed", "positivity_violations", "attrition", "absent")
Z_95 = 1.959963984540054


@dataclass
class StudyContext:
    """Fixed ingredients of a study shared by every evaluated policy.

    ``tie_break`` is ``"tpdp"`` (fixed noise blend), ``"aaai"`` (support
    penalty with a chosen epsilon) or ``"none"``.
    """

    venue: Venue
    table: PairTable
    records: Sequence
    p_on: np.ndarray
    covariance: object = None
    noise: Optional[np.ndarray] = None
    tie_break: str = "tpdp"
    L: Optional[float] = None
    distance: Optional[DistanceSpec] = None
    imputer: Optional[TrainedImputer] = None
    alpha: float = 0.95
    big_psi: Optional[float] = None
    include_absent: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.tie_break not in ("tpdp", "aaai", "none"):
            raise ValidationError(f"unknown tie-breaking mode {self.tie_break!r}")
        if self.tie_break == "tpdp" and self.noise is None:
            raise ValidationError("tpdp tie-breaking needs a noise matrix")

    def covariates(self, lambda_bid: float) -> np.ndarray:
        X, _ = covariate_matrix(self.venue, self.table, lambda_bid)
        return X

    def off_policy(self, params: PolicyParams, venue: Optional[Venue] = None) -> tuple:
        """Off-policy marginals for ``params`` under the study's tie-breaking rule."""
        venue = venue or self.venue
        S = similarity_matrix(venue, self.table, params)
        record = {"mode": self.tie_break}
        if self.tie_break == "tpdp":
            S = perturb_tpdp(S, self.noise)
        elif self.tie_break == "aaai":
            res = perturb_aaai(S, self.p_on > 0, venue, params.q)
            S = res.similarity
            record.update(epsilon=res.epsilon, gap=res.gap, within_tolerance=res.within_tolerance)
        return assign(S, venue, params.q, params=params.to_dict()), record

    def inputs(self, p_off: np.ndarray) -> EstimationInputs:
        return EstimationInputs.build(self.venue, self.records, self.p_on, p_off, self.covariance)


def _ci(report: EstimateReport) -> tuple:
    if report.variance is None:
        return math.nan, math.nan
    half = Z_95 * math.sqrt(report.variance)
    return report.point - half, report.point + half


def evaluate_method(ctx: StudyContext, inputs: EstimationInputs, method: str, lambda_bid: float = 1.0) -> dict:
    """One report row (without param/value) for ``method`` on prepared inputs."""
    if method == "mean":
        rep = mean_imputation(inputs)
        lo_ci, hi_ci = _ci(rep)
        return {"point": rep.point, "lo": rep.point, "hi": rep.point, "ci_lo": lo_ci, "ci_hi": hi_ci, "counts": rep.counts}
    if method == "model":
        if ctx.imputer is None:
            raise ValidationError("model imputation needs a trained imputer")
        mask = inputs.partition.attrition | inputs.partition.violations
        grid, _ = model_plan_values(ctx.imputer, ctx.venue, ctx.table, mask, fallback=inputs.ybar_or_nan())
        rep = inputs.estimate(inputs.plan_from_values(grid, f"model:{ctx.imputer.kind}").clipped(inputs.scale))
        lo_ci, hi_ci = _ci(rep)
        return {"point": rep.point, "lo": rep.point, "hi": rep.point, "ci_lo": lo_ci, "ci_hi": hi_ci, "counts": rep.counts}
    if method == "manski":
        res = manski_bounds(inputs, ctx.alpha)
    elif method == "mono":
        res = monotonicity_bounds(inputs, ctx.covariates(lambda_bid), ctx.alpha, ctx.big_psi, ctx.include_absent)
    elif method == "lip":
        if ctx.L is None:
            raise ValidationError("Lipschitz bounds need a constant L")
        res = lipschitz_bounds(inputs, ctx.covariates(lambda_bid), ctx.L, ctx.distance, ctx.alpha, ctx.big_psi, ctx.include_absent)
    else:
        raise ValidationError(f"unknown method {method!r}; choose from {METHODS}")
    return bounds_row(res)


def bounds_row(res: BoundsResult) -> dict:
    return {
        "point": math.nan,
        "lo": res.lower.point,
        "hi": res.upper.point,
        "ci_lo": res.interval.lower,
        "ci_hi": res.interval.upper,
        "counts": res.lower.counts,
    }


# ---------------------------------------------------------------------------
# sweeps


@dataclass(frozen=True)
class SweepSpec:
    base: PolicyParams
    param: str
    grid: tuple
    methods: tuple = ("mean", "manski", "mono", "lip")
    seed: int = 0

    def __post_init__(self):
        if self.param not in SWEEP_PARAMS:
            raise ValidationError(f"sweep parameter must be one of {SWEEP_PARAMS}")
        if not self.grid:
            raise ValidationError("sweep grid is empty")
        for v in self.grid:
            self.base.replace(**{self.param: v})  # validates the domain
        for m in self.methods:
            if m not in METHODS:
                raise ValidationError(f"unknown method {m!r}")


def _row(param, value, method, cell: Optional[dict], error: str = "") -> dict:
    row = {"param": param, "value": value, "method": method}
    if cell is None:
        row.update({k: math.nan for k in ("point", "lo", "hi", "ci_lo", "ci_hi")})
        row.update(status="error", error=error)
        row.update({k: "" for k in EXTRA_COLUMNS[2:]})
        return row
    counts = cell.get("counts", {})
    row.update({k: cell[k] for k in ("point", "lo", "hi", "ci_lo", "ci_hi")})
    row.update(status="ok", error="")
    row.update({k: counts.get(k, "") for k in EXTRA_COLUMNS[2:]})
    return row


def _sweep_cell(ctx: StudyContext, spec: SweepSpec, value) -> tuple:
    params = spec.base.replace(**{spec.param: value})
    try:
        p_off, record = ctx.off_policy(params)
        inputs = ctx.inputs(p_off.probabilities)
    except ReviewEvalError as exc:
        return [_row(spec.param, value, m, None, f"{type(exc).__name__}: {exc}") for m in spec.methods], {"value": value, "error": str(exc)}
    rows = []
    for m in spec.methods:
        try:
            rows.append(_row(spec.param, value, m, evaluate_method(ctx, inputs, m, params.lambda_bid)))
        except ReviewEvalError as exc:
            logger.warning("sweep cell %s=%s method %s failed: %s", spec.param, value, m, exc)
            rows.append(_row(spec.param, value, m, None, f"{type(exc).__name__}: {exc}"))
    return rows, {"value": value, **record}


def run_sweep(spec: SweepSpec, ctx: StudyContext, threads: int = 1) -> tuple:
    """Evaluate every grid value with every method.

    Returns ``(rows, perturbations)``; rows follow grid order then method
    order. Failing cells are recorded with ``status="error"`` and the sweep
    continues.
    """
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            cells = list(pool.map(lambda v: _sweep_cell(ctx, spec, v), spec.grid))
    else:
        cells = [_sweep_cell(ctx, spec, v) for v in spec.grid]
    rows = [r for cell_rows, _ in cells for r in cell_rows]
    return rows, [rec for _, rec in cells]


# ---------------------------------------------------------------------------
# cost of randomization


def cost_of_randomization(similarity: np.ndarray, venue: Venue, q_grid: Sequence[float]) -> list:
    """Expected total similarity at each q as a ratio to the deterministic (q = 1) optimum.

    Rows are sorted by q; infeasible q values carry ``feasible=False`` and
    NaN ratios.
    """
    grid = sorted(float(q) for q in q_grid)
    for q in grid:
        if not 0 < q <= 1:
            raise ValidationError(f"q must lie in (0, 1], got {q}")
    best = deterministic_assignment(similarity, venue).objective
    rows = []
    for q in grid:
        try:
            obj = assign(similarity, venue, q).objective if q < 1 else best
        except InfeasibleError as exc:
            rows.append({"q": q, "objective": math.nan, "ratio": math.nan, "feasible": False, "error": str(exc)})
            continue
        ratio = obj / best if best != 0 else math.nan
        rows.append({"q": q, "objective": obj, "ratio": ratio, "feasible": True, "error": ""})
    return rows


# ---------------------------------------------------------------------------
# bad-policy power check


@dataclass
class PolicyComparison:
    rows: list
    details: dict = field(default_factory=dict)


def bad_policy_analysis(ctx: StudyContext, params: PolicyParams, methods: Sequence[str] = ("manski", "mono", "lip")) -> PolicyComparison:
    """Contrast the similarity-maximizing and -minimizing deterministic policies.

    Pairs outside the on-policy support are treated as conflicts, so both
    policies stay inside the logged support. Each row carries the policy
    name and one ``(ci_lo, ci_hi)`` interval per method, plus the raw
    bounds under ``details``.
    """
    restricted = ctx.venue.with_conflicts(ctx.p_on <= 0)
    S = similarity_matrix(restricted, ctx.table, params)
    policies = {
        "max": deterministic_assignment(S, restricted),
        "min": deterministic_assignment(-S, restricted),
    }
    names = {"manski": "manski", "mono": "monotonicity", "lip": "lipschitz"}
    rows, details = [], {}
    for label, marg in policies.items():
        inputs = ctx.inputs(marg.probabilities)
        row = {"policy": label}
        details[label] = {"objective": float(np.nansum(np.where(np.isnan(S), 0, S) * marg.probabilities))}
        for m in methods:
            cell = evaluate_method(ctx, inputs, m, params.lambda_bid)
            row[names.get(m, m)] = (cell["ci_lo"], cell["ci_hi"])
            details[label][m] = {"lo": cell["lo"], "hi": cell["hi"], "ci_lo": cell["ci_lo"], "ci_hi": cell["ci_hi"]}
        rows.append(row)
    return PolicyComparison(rows, details)


# ---------------------------------------------------------------------------
# reports


def _fmt(v) -> str:
    if isinstance(v, float):
        return "" if math.isnan(v) else format(v, ".9g")
    return str(v)


def rows_to_csv(rows: Sequence[dict], columns: Sequence[str] = REPORT_COLUMNS + EXTRA_COLUMNS) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row.get(c, "")) for c in columns])
    return buf.getvalue()


def write_report(rows: Sequence[dict], out_dir, manifest: Optional[dict] = None, name: str = "report") -> dict:
    """Write ``<name>.csv`` and ``<name>.manifest.json`` into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{name}.csv"
    csv_path.write_text(rows_to_csv(rows), encoding="utf-8")
    doc = {
        "software": {"package": "revieweval", "version": __version__},
        "columns": list(REPORT_COLUMNS + EXTRA_COLUMNS),
        "rows": len(rows),
        "covariance_note": "covariance-dependent outputs (variances, CI widths) reflect this package's sampler only",
        **(manifest or {}),
    }
    man_path = out_dir / f"{name}.manifest.json"
    man_path.write_text(json.dumps(doc, indent=1, sort_keys=True, default=str), encoding="utf-8")
    return {"csv": csv_path, "manifest": man_path}
