"""Command-line interface.

Exit codes: 0 success, 2 validation failure, 3 solver failure,
4 inconsistent data (including sampling failures), 1 anything else.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .bounds import DistanceSpec, calibrate_lipschitz, covariate_matrix, lipschitz_bounds, manski_bounds, monotonicity_bounds
from .domain import load_venue
from .errors import DataInconsistencyError, ReviewEvalError, SamplingError, SolverError, ValidationError
from .estimator import EstimationInputs, mean_imputation
from .lp import assign, noise_matrix, perturb_aaai, perturb_tpdp
from .models import KINDS, Observations, Preprocessing, TrainedImputer, evaluate_imputers, fit_imputer, model_plan_values
from .sampler import CovarianceAccumulator, estimate_covariance
from .similarity import FAMILIES, PolicyParams, similarity_matrix
from .synthetic import SyntheticSpec, generate_synthetic_venue, marginals_to_csv, write_synthetic
from .workflows import (
    StudyContext,
    SweepSpec,
    bad_policy_analysis,
    cost_of_randomization,
    rows_to_csv,
    run_sweep,
    write_report,
)

logger = logging.getLogger("revieweval")


# ---------------------------------------------------------------------------
# file helpers


def read_marginals(path, venue) -> np.ndarray:
    """Marginal matrix from a ``reviewer,paper,probability`` CSV; unlisted pairs are 0."""
    p = np.zeros(venue.shape)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"reviewer", "paper", "probability"} - set(reader.fieldnames or ())
        if missing:
            raise ValidationError(f"missing columns {sorted(missing)}", source=str(path))
        for line, row in enumerate(reader, start=2):
            if not venue.has_reviewer(row["reviewer"]) or not venue.has_paper(row["paper"]):
                raise ValidationError(f"unknown pair ({row['reviewer']}, {row['paper']})", row=line, source=str(path))
            try:
                value = float(row["probability"])
            except ValueError:
                raise ValidationError(f"bad probability {row['probability']!r}", row=line, source=str(path)) from None
            if not 0.0 <= value <= 1.0:
                raise ValidationError(f"probability {value} outside [0, 1]", row=line, source=str(path))
            p[venue.reviewer_index(row["reviewer"]), venue.paper_index(row["paper"])] = value
    return p


def read_noise(path, shape) -> np.ndarray:
    E = np.loadtxt(path, delimiter=",", ndmin=2)
    if E.shape != shape:
        raise ValidationError(f"noise matrix has shape {E.shape}, expected {shape}", source=str(path))
    return E


def _out_path(args, name: str) -> Path:
    if getattr(args, "out", None):
        path = Path(args.out)
    else:
        path = Path(args.out_dir or ".") / name
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _dump(doc, path: Path) -> None:
    path.write_text(json.dumps(doc, indent=1, sort_keys=True, default=_json_default) + "\n", encoding="utf-8")


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return str(obj)


def _clean(value):
    """NaN -> None for JSON output."""
    if isinstance(value, float) and math.isnan(value):
        return None
    if isinstance(value, dict):
        return {k: _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    return value


def _policy(args) -> PolicyParams:
    base = PolicyParams.load(args.policy) if getattr(args, "policy", None) else PolicyParams()
    changes = {}
    for flag, name in (("family", "family"), ("w_text", "w_text"), ("lambda_bid", "lambda_bid"), ("q", "q")):
        value = getattr(args, flag, None)
        if value is not None:
            changes[name] = value
    return base.replace(**changes) if changes else base


def _load(args, outcomes: bool = True):
    return load_venue(args.venue, args.scores, args.outcomes if outcomes else None)


def _noise(args, venue) -> np.ndarray:
    if getattr(args, "noise", None):
        return read_noise(args.noise, venue.shape)
    return noise_matrix(venue.shape, args.seed)


def _covariance(args) -> Optional[CovarianceAccumulator]:
    return CovarianceAccumulator.load(args.cov) if getattr(args, "cov", None) else None


# ---------------------------------------------------------------------------
# subcommands


def cmd_validate(args) -> int:
    venue, table, records = _load(args, outcomes=bool(args.outcomes))
    doc = {
        "reviewers": len(venue.reviewers),
        "papers": len(venue.papers),
        "paper_load": venue.paper_load,
        "n_reviews": venue.n_reviews,
        "conflicts": len(venue.conflicts),
        "candidate_pairs": len(venue.candidate_pairs()),
        "missing_text": int(np.isnan(table.text).sum()),
        "missing_subject": int(np.isnan(table.subject).sum()),
        "outcome_records": len(records),
    }
    if args.on_policy:
        p_on = read_marginals(args.on_policy, venue)
        part = EstimationInputs.build(venue, records, p_on, p_on).partition
        doc["partition"] = part.counts()
    print(json.dumps(doc, indent=1, sort_keys=True))
    return 0


def cmd_assign(args) -> int:
    venue, table, _ = _load(args, outcomes=False)
    params = _policy(args)
    S = similarity_matrix(venue, table, params)
    record = {"mode": args.tie_break}
    if args.tie_break == "tpdp":
        S = perturb_tpdp(S, _noise(args, venue))
        record["noise"] = args.noise or f"seed:{args.seed}"
    elif args.tie_break == "aaai":
        if not args.on_policy:
            raise ValidationError("aaai tie-breaking needs --on-policy marginals")
        res = perturb_aaai(S, read_marginals(args.on_policy, venue) > 0, venue, params.q)
        S = res.similarity
        record.update(epsilon=res.epsilon, gap=res.gap, within_tolerance=res.within_tolerance)
    marg = assign(S, venue, params.q, params=params.to_dict())
    out = _out_path(args, "marginals.csv")
    out.write_text(marginals_to_csv(venue, marg.probabilities), encoding="utf-8")
    _dump({"policy": params.to_dict(), "objective": marg.objective, "tie_break": record}, Path(str(out) + ".json"))
    print(f"objective {marg.objective:.9g}; wrote {out}")
    return 0


def cmd_sample(args) -> int:
    venue, _, _ = _load(args, outcomes=False)
    p = read_marginals(args.marginals, venue)
    acc = estimate_covariance(p, venue, args.n, seed=args.seed, workers=args.threads)
    out = _out_path(args, "cov.bin")
    rows, cols = np.divmod(acc.pairs, venue.shape[1])
    acc.save(out, [(venue.reviewers[r], venue.papers[c]) for r, c in zip(rows, cols)])
    print(f"{acc.count} samples over {len(acc.pairs)} pairs; wrote {out}")
    return 0


def _inputs(args):
    venue, table, records = _load(args)
    p_on = read_marginals(args.on_policy, venue)
    p_off = read_marginals(args.off_policy, venue)
    return venue, table, EstimationInputs.build(venue, records, p_on, p_off, _covariance(args))


def _calibrated_L(args, venue, table, inputs) -> tuple:
    if args.L is not None:
        return float(args.L), None
    if not args.calibrate:
        raise ValidationError("Lipschitz bounds need --L or --calibrate f=<fraction>")
    f = float(args.calibrate.split("=", 1)[1] if "=" in args.calibrate else args.calibrate)
    X, _ = covariate_matrix(venue, table, args.lambda_bid or 1.0)
    universe = inputs.partition.universe.ravel()
    spec = DistanceSpec.from_points(X[universe])
    obs = inputs.partition.observed.ravel()
    cal = calibrate_lipschitz(X[obs], inputs.outcomes.ravel()[obs], targets=(f,), spec=spec)
    if cal.targets[f] is None:
        raise ValidationError(f"no grid L reaches violation fraction below {f}")
    L = cal.targets[f]
    if L <= 0:
        L = float(np.finfo(float).eps)
    return L, {"target": f, "L": cal.targets[f], "hard_violations": cal.hard_violations, "pairs": cal.n_pairs}


def cmd_estimate(args) -> int:
    venue, table, inputs = _inputs(args)
    method = args.impute
    doc = {"method": method, "covariance": "our sampler" if inputs.covariance is not None else None}
    if method == "mean":
        doc["estimate"] = mean_imputation(inputs).to_dict()
    elif method == "model":
        if not args.model:
            raise ValidationError("--impute model needs --model <model.json>")
        model = TrainedImputer.load(args.model)
        mask = inputs.partition.attrition | inputs.partition.violations
        grid, cold = model_plan_values(model, venue, table, mask, fallback=inputs.ybar_or_nan())
        rep = inputs.estimate(inputs.plan_from_values(grid, f"model:{model.kind}").clipped(inputs.scale))
        doc["estimate"] = rep.to_dict()
        doc["cold_start_pairs"] = int(cold.sum())
    else:
        doc.update(_bounds_doc(args, venue, table, inputs, method))
    out = _out_path(args, "report.json")
    _dump(_clean(doc), out)
    print(f"wrote {out}")
    return 0


def _bounds_doc(args, venue, table, inputs, method: str) -> dict:
    X, dims = covariate_matrix(venue, table, args.lambda_bid or 1.0)
    if method == "manski":
        res = manski_bounds(inputs, args.alpha)
        calib = None
    elif method == "mono":
        res = monotonicity_bounds(inputs, X, args.alpha, args.big_psi, not args.exclude_absent)
        calib = None
    elif method == "lip":
        L, calib = _calibrated_L(args, venue, table, inputs)
        res = lipschitz_bounds(inputs, X, L, None, args.alpha, args.big_psi, not args.exclude_absent)
    else:
        raise ValidationError(f"unknown method {method!r}")
    doc = res.to_dict()
    doc["covariates"] = list(dims)
    if inputs.covariance is None:
        doc["interval"]["note"] = "no covariance file given; sampling variance treated as zero"
        logger.warning("no --cov given: the confidence interval ignores sampling variance")
    if calib:
        doc["calibration"] = calib
    return doc


def cmd_bounds(args) -> int:
    venue, table, inputs = _inputs(args)
    doc = _bounds_doc(args, venue, table, inputs, args.method)
    out = _out_path(args, "bounds.json")
    _dump(_clean(doc), out)
    print(f"[{doc['lower']['point']:.6g}, {doc['upper']['point']:.6g}] CI [{doc['interval']['lower']:.6g}, {doc['interval']['upper']:.6g}]; wrote {out}")
    return 0


def cmd_models(args) -> int:
    venue, table, records = _load(args)
    p_on = read_marginals(args.on_policy, venue)
    inputs = EstimationInputs.build(venue, records, p_on, p_on)
    data = Observations.from_mask(table, inputs.partition.observed, inputs.outcomes)
    pre = Preprocessing(bid_encoding=args.bid_encoding, standardize=not args.no_standardize, scheme=venue.bid_scheme, lambda_bid=args.lambda_bid or 1.0)
    if args.evaluate:
        kinds = [args.fit] if args.fit else list(KINDS)
        rows = evaluate_imputers(data, inputs.scale, kinds, repeats=args.repeats, seed=args.seed, preprocessing=pre, grid_shape=venue.shape)
        out = _out_path(args, "imputer_mae.json")
        _dump([r.__dict__ for r in rows], out)
        for r in rows:
            print(f"{r.model:14s} MAE {r.mean:.4f} [{r.lower:.4f}, {r.upper:.4f}]")
        return 0
    if not args.fit:
        raise ValidationError("choose --fit <kind> or --evaluate")
    model = fit_imputer(args.fit, data, inputs.scale, folds=args.folds, seed=args.seed, preprocessing=pre, grid_shape=venue.shape)
    out = _out_path(args, "model.json")
    model.save(out)
    print(f"{model.kind}: selected {model.cv.get('selected')}; wrote {out}")
    return 0


def _context(args, venue, table, records) -> StudyContext:
    p_on = read_marginals(args.on_policy, venue)
    imputer = TrainedImputer.load(args.model) if getattr(args, "model", None) else None
    if args.L is None and args.calibrate:
        # one L for every cell, calibrated against the on-policy partition
        args.L, args.calibration = _calibrated_L(args, venue, table, EstimationInputs.build(venue, records, p_on, p_on))
    return StudyContext(
        venue, table, records, p_on,
        covariance=_covariance(args),
        noise=_noise(args, venue) if args.tie_break == "tpdp" else None,
        tie_break=args.tie_break,
        L=args.L,
        imputer=imputer,
        alpha=args.alpha,
        big_psi=args.big_psi,
        include_absent=not args.exclude_absent,
        seed=args.seed,
    )


def cmd_sweep(args) -> int:
    venue, table, records = _load(args)
    ctx = _context(args, venue, table, records)
    grid = tuple(float(v) for v in args.grid.split(","))
    methods = tuple(m.strip() for m in args.methods.split(","))
    spec = SweepSpec(_policy(args), args.param, grid, methods, args.seed)
    rows, perturbations = run_sweep(spec, ctx, threads=args.threads)
    out_dir = Path(args.out_dir or ".")
    manifest = {
        "seed": args.seed,
        "sweep": {"param": spec.param, "grid": list(grid), "methods": list(methods), "base": spec.base.to_dict()},
        "perturbations": perturbations,
        "covariance": {"path": args.cov, "sampler": "dependent rounding (this package)"} if args.cov else None,
        "L": args.L,
        "calibration": getattr(args, "calibration", None),
        "inputs": {"venue": args.venue, "scores": args.scores, "outcomes": args.outcomes, "on_policy": args.on_policy},
    }
    paths = write_report(rows, out_dir, manifest, name=args.name)
    (out_dir / f"{args.name}.rows.json").write_text(json.dumps(_clean(rows), indent=1) + "\n", encoding="utf-8")
    failed = sum(r["status"] != "ok" for r in rows)
    print(f"{len(rows)} rows ({failed} failed); wrote {paths['csv']}")
    return 0


def cmd_cost(args) -> int:
    venue, table, _ = _load(args, outcomes=False)
    params = _policy(args)
    S = similarity_matrix(venue, table, params)
    if args.tie_break == "tpdp":
        S = perturb_tpdp(S, _noise(args, venue))
    rows = cost_of_randomization(S, venue, [float(q) for q in args.q_grid.split(",")])
    out = _out_path(args, "cost.csv")
    out.write_text(rows_to_csv(rows, ("q", "objective", "ratio", "feasible", "error")), encoding="utf-8")
    for r in rows:
        print(f"q={r['q']:.3g} ratio={r['ratio']:.6g}" + ("" if r["feasible"] else " (infeasible)"))
    return 0


def cmd_power(args) -> int:
    venue, table, records = _load(args)
    args.tie_break = "none"
    ctx = _context(args, venue, table, records)
    methods = tuple(m.strip() for m in args.methods.split(","))
    result = bad_policy_analysis(ctx, _policy(args), methods)
    out = _out_path(args, "power.json")
    _dump(_clean({"rows": result.rows, "details": result.details, "L": args.L}), out)
    for row in result.rows:
        print(row["policy"], " ".join(f"{k}=[{v[0]:.4f}, {v[1]:.4f}]" for k, v in row.items() if k != "policy"))
    return 0


def cmd_synth(args) -> int:
    doc = json.loads(Path(args.spec).read_text(encoding="utf-8")) if args.spec else {}
    if "policy" in doc:
        doc["policy"] = PolicyParams.from_dict(doc["policy"])
    if "outcome_weights" in doc:
        doc["outcome_weights"] = tuple(doc["outcome_weights"])
    for name in ("n_reviewers", "n_papers", "paper_load", "cap", "q_on", "attrition", "absence"):
        value = getattr(args, name)
        if value is not None:
            doc[name] = value
    doc.setdefault("seed", args.seed)
    study = generate_synthetic_venue(SyntheticSpec(**doc))
    paths = write_synthetic(study, args.out_dir or "synthetic")
    print("wrote " + ", ".join(str(p) for p in paths.values()))
    return 0


def cmd_report(args) -> int:
    rows = json.loads(Path(args.table).read_text(encoding="utf-8"))
    rows = [{k: (math.nan if v is None else v) for k, v in r.items()} for r in rows]
    manifest = {"seed": args.seed, "source": args.table}
    paths = write_report(rows, args.out_dir or ".", manifest, name=args.name)
    print(f"wrote {paths['csv']} and {paths['manifest']}")
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_inputs(p, outcomes=True, on_policy=False, off_policy=False):
    p.add_argument("--venue", required=True, help="venue.json")
    p.add_argument("--scores", required=True, help="scores.csv")
    if outcomes:
        p.add_argument("--outcomes", required=True, help="outcomes.csv")
    if on_policy:
        p.add_argument("--on-policy", required=True, help="on-policy marginals CSV")
    if off_policy:
        p.add_argument("--off-policy", required=True, help="off-policy marginals CSV")


def _add_policy(p):
    p.add_argument("--policy", help="JSON policy file (family, w_text, lambda_bid, q)")
    p.add_argument("--family", choices=FAMILIES)
    p.add_argument("--w-text", type=float)
    p.add_argument("--lambda-bid", type=float)
    p.add_argument("--q", type=float)


def _add_bounds_opts(p):
    p.add_argument("--cov", help="covariance file from the sample subcommand")
    p.add_argument("--L", type=float, help="Lipschitz constant")
    p.add_argument("--calibrate", help="calibrate L from observed pairs, e.g. f=0.05")
    p.add_argument("--alpha", type=float, default=0.95)
    p.add_argument("--big-psi", type=float, default=None, help="solve the surrogate program as one LP with this weight")
    p.add_argument("--exclude-absent", action="store_true", help="drop absent-reviewer pairs from the surrogate objective")
    if "--lambda-bid" not in p._option_string_actions:
        p.add_argument("--lambda-bid", type=float, default=None, help="bid scaling used for covariates")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="revieweval", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", help="JSON file of option defaults (keys are option names with underscores)")
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("--out-dir", default=None)
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    subs = {}

    def add(name, func, help_text):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.set_defaults(func=func)
        subs[name] = p
        return p

    p = add("validate", cmd_validate, "check input files and print a summary")
    p.add_argument("--venue", required=True)
    p.add_argument("--scores", required=True)
    p.add_argument("--outcomes")
    p.add_argument("--on-policy")

    p = add("assign", cmd_assign, "solve an assignment LP and write marginals")
    _add_inputs(p, outcomes=False)
    _add_policy(p)
    p.add_argument("--tie-break", choices=("tpdp", "aaai", "none"), default="tpdp")
    p.add_argument("--noise", help="noise matrix CSV (default: drawn from --seed)")
    p.add_argument("--on-policy", help="on-policy marginals (aaai tie-breaking)")
    p.add_argument("--out")

    p = add("sample", cmd_sample, "Monte Carlo covariance of assignment indicators")
    p.add_argument("--venue", required=True)
    p.add_argument("--scores", required=True)
    p.add_argument("--marginals", required=True)
    p.add_argument("--n", type=int, default=100_000)
    p.add_argument("--out")

    p = add("estimate", cmd_estimate, "off-policy estimate with an imputation method")
    _add_inputs(p, on_policy=True, off_policy=True)
    _add_bounds_opts(p)
    p.add_argument("--impute", choices=("mean", "model", "manski", "mono", "lip"), default="mean")
    p.add_argument("--model", help="trained imputer JSON")
    p.add_argument("--out")

    p = add("bounds", cmd_bounds, "partial-identification bounds")
    _add_inputs(p, on_policy=True, off_policy=True)
    _add_bounds_opts(p)
    p.add_argument("--method", choices=("manski", "mono", "lip"), default="manski")
    p.add_argument("--out")

    p = add("models", cmd_models, "fit or evaluate imputation models")
    _add_inputs(p, on_policy=True)
    p.add_argument("--fit", choices=KINDS)
    p.add_argument("--evaluate", action="store_true")
    p.add_argument("--folds", type=int, default=10)
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--bid-encoding", choices=("numeric", "onehot", "none"), default="numeric")
    p.add_argument("--no-standardize", action="store_true")
    p.add_argument("--lambda-bid", type=float, default=None)
    p.add_argument("--out")

    p = add("sweep", cmd_sweep, "evaluate a grid of off-policies")
    _add_inputs(p, on_policy=True)
    _add_policy(p)
    _add_bounds_opts(p)
    p.add_argument("--param", choices=("w_text", "lambda_bid", "q"), required=True)
    p.add_argument("--grid", required=True, help="comma-separated values")
    p.add_argument("--methods", default="mean,manski,mono,lip")
    p.add_argument("--tie-break", choices=("tpdp", "aaai", "none"), default="tpdp")
    p.add_argument("--noise")
    p.add_argument("--model")
    p.add_argument("--name", default="sweep")

    p = add("cost", cmd_cost, "cost of randomization curve")
    _add_inputs(p, outcomes=False)
    _add_policy(p)
    p.add_argument("--q-grid", default="0.4,0.5,0.6,0.7,0.8,0.9,1.0")
    p.add_argument("--tie-break", choices=("tpdp", "none"), default="none")
    p.add_argument("--noise")
    p.add_argument("--out")

    p = add("power", cmd_power, "max- vs min-similarity policies inside the on-policy support")
    _add_inputs(p, on_policy=True)
    _add_policy(p)
    _add_bounds_opts(p)
    p.add_argument("--methods", default="manski,mono,lip")
    p.add_argument("--out")

    p = add("synth", cmd_synth, "generate a synthetic venue with known outcomes")
    p.add_argument("--spec", help="JSON SyntheticSpec fields")
    for name, typ in (("n-reviewers", int), ("n-papers", int), ("paper-load", int), ("cap", int), ("q-on", float), ("attrition", float), ("absence", float)):
        p.add_argument(f"--{name}", type=typ)

    p = add("report", cmd_report, "re-emit a results table as CSV plus manifest")
    p.add_argument("--table", required=True, help="rows JSON written by sweep")
    p.add_argument("--name", default="report")

    parser._subs = subs
    return parser


def _apply_config(parser, argv):
    """Use ``--config`` JSON values as defaults for the chosen subcommand."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    try:
        doc = json.loads(Path(known.config).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read config: {exc}", source=known.config) from None
    if not isinstance(doc, dict):
        raise ValidationError("config must be a JSON object", source=known.config)
    for p in parser._subs.values():
        valid = {a.dest for a in p._actions}
        p.set_defaults(**{k.replace("-", "_"): v for k, v in doc.items() if k.replace("-", "_") in valid})


EXIT_CODES = ((ValidationError, 2), (SolverError, 3), (DataInconsistencyError, 4), (SamplingError, 4))


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except ReviewEvalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        for cls, code in EXIT_CODES:
            if isinstance(exc, cls):
                return code
        return 1
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
