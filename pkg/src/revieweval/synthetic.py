"""Synthetic venues with known outcomes, for desk-scale verification.

The true outcome of a pair is an affine function of a weighted mean of its
normalized covariates (missing components count as 0), so it is monotone
in every covariate and Lipschitz in the averaged L1 distance with constant
``(y_max - y_min) * n_dims * max(weight)``, which is ``y_max - y_min`` for
equal weights. The ground truth is written to a separate ``truth/``
directory that estimation code never reads.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .domain import (
    BID_VOCABULARIES,
    OutcomeRecord,
    OutcomeScale,
    PairTable,
    Status,
    Venue,
    format_float,
    save_venue,
)
from .errors import ValidationError
from .lp import MarginalMatrix, noise_matrix, perturb_tpdp, randomized_assignment, deterministic_assignment
from .rounding import round_once
from .similarity import PolicyParams, bid_value, similarity_matrix

BID_WEIGHTS = {
    "aaai": (0.1, 0.45, 0.15, 0.2, 0.1),
    "tpdp": (0.1, 0.15, 0.45, 0.2, 0.1),
}


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of a synthetic venue.

    Rates are per assigned pair (attrition), per reviewer (absence) and per
    pair (missing covariates, conflicts). Text scores are ``U ** text_skew``
    for uniform ``U``. With ``experts_per_paper > 0`` every paper gets that
    many expert reviewers (spread evenly over reviewers) whose text score
    lies in [0.6, 1]; all other text scores are squeezed into [0, 0.4].
    ``q_on`` and ``policy`` define the logging policy; its tie-breaking
    noise is drawn from ``seed``.
    """

    n_reviewers: int = 12
    n_papers: int = 12
    paper_load: int = 1
    cap: int = 2
    q_on: float = 0.5
    policy: PolicyParams = field(default_factory=PolicyParams)
    bid_scheme: str = "aaai"
    y_min: float = 1.0
    y_max: float = 5.0
    attrition: float = 0.0
    absence: float = 0.0
    missing_text: float = 0.0
    missing_subject: float = 0.0
    conflict_rate: float = 0.0
    include_bid: bool = True
    outcome_weights: tuple = (1.0, 1.0, 1.0)
    text_skew: float = 1.0
    experts_per_paper: int = 0
    seed: int = 0

    def __post_init__(self):
        for name in ("attrition", "absence", "missing_text", "missing_subject", "conflict_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1], got {v}")
        if not 0 <= self.experts_per_paper <= self.n_reviewers:
            raise ValidationError("experts_per_paper must lie between 0 and the number of reviewers")
        if not self.text_skew > 0:
            raise ValidationError("text_skew must be positive")
        if not 0 < self.q_on <= 1:
            raise ValidationError("q_on must lie in (0, 1]")
        if self.y_min >= self.y_max:
            raise ValidationError("y_min must be below y_max")
        if self.bid_scheme not in BID_VOCABULARIES:
            raise ValidationError(f"unknown bid scheme {self.bid_scheme!r}")
        w = self.weights
        if len(self.outcome_weights) != 3 or np.any(np.asarray(self.outcome_weights) < 0) or w.sum() <= 0:
            raise ValidationError("outcome_weights needs three nonnegative entries (text, subject, bid) with a positive used sum")

    @property
    def weights(self) -> np.ndarray:
        """Normalized outcome weights over the covariates in use."""
        w = np.asarray(self.outcome_weights, dtype=float)[: 3 if self.include_bid else 2]
        return w / w.sum() if w.sum() > 0 else w

    @property
    def lipschitz_constant(self) -> float:
        """L* for the averaged L1 distance over the covariates in use."""
        return float((self.y_max - self.y_min) * self.weights.size * self.weights.max())

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["policy"] = self.policy.to_dict()
        return doc


@dataclass
class SyntheticVenue:
    """In-memory synthetic study: inputs, logged data and the hidden truth."""

    spec: SyntheticSpec
    venue: Venue
    table: PairTable
    noise: np.ndarray
    on_policy: MarginalMatrix
    assignment: np.ndarray
    records: list
    truth: np.ndarray

    def true_mean(self, marginals) -> float:
        """Exact policy mean (1/N) sum_i P(Z_i) Y_i under full outcomes."""
        p = marginals.probabilities if isinstance(marginals, MarginalMatrix) else np.asarray(marginals, dtype=float)
        return float((p * self.truth).sum() / self.venue.n_reviews)

    def redraw(self, seed: int, attrition: Optional[float] = None, absence: Optional[float] = None) -> list:
        """Fresh logged records from a new on-policy draw; the venue and truth are unchanged."""
        rng = np.random.default_rng(seed)
        z = round_once(self.on_policy.probabilities, self.venue.caps, rng)
        return _records(self.venue, z, self.truth, rng, self.spec.attrition if attrition is None else attrition,
                        self.spec.absence if absence is None else absence)


def outcome_function(text, subject, bids, scheme: str, lambda_bid: float, y_min: float, y_max: float, include_bid: bool = True, weights=None) -> np.ndarray:
    """True outcome: ``y_min + (y_max - y_min) * weighted mean of normalized covariates``.

    Each covariate is scaled by its declared range (T and K in [0, 1], bid
    over the scheme's value range); a missing covariate contributes 0.
    ``weights`` (default equal) are normalized to sum to one.
    """
    t = np.nan_to_num(np.asarray(text, dtype=float))
    k = np.nan_to_num(np.asarray(subject, dtype=float))
    parts = [t, k]
    if include_bid:
        values = [bid_value(lab, scheme, lambda_bid) for lab in BID_VOCABULARIES[scheme]]
        lo, hi = min(values), max(values)
        b = np.vectorize(lambda lab: bid_value(lab, scheme, lambda_bid), otypes=[float])(bids)
        parts.append((b - lo) / (hi - lo) if hi > lo else np.zeros_like(t))
    w = np.ones(len(parts)) if weights is None else np.asarray(weights, dtype=float)[: len(parts)]
    w = w / w.sum()
    f = sum(wi * part for wi, part in zip(w, parts))
    return y_min + (y_max - y_min) * f


def _records(venue: Venue, z: np.ndarray, truth: np.ndarray, rng: np.random.Generator, attrition: float, absence: float) -> list:
    n_r = venue.shape[0]
    absent = rng.random(n_r) < absence
    records = []
    for r, p in zip(*np.nonzero(z > 0.5)):
        rid, pid = venue.reviewers[r], venue.papers[p]
        if absent[r]:
            records.append(OutcomeRecord(rid, pid, None, Status.ABSENT))
        elif rng.random() < attrition:
            records.append(OutcomeRecord(rid, pid, None, Status.ATTRITION))
        else:
            records.append(OutcomeRecord(rid, pid, float(truth[r, p]), Status.OBSERVED))
    return records


def generate_synthetic_venue(spec: SyntheticSpec) -> SyntheticVenue:
    """Build a synthetic venue, its logging policy, one logged assignment and outcomes.

    Deterministic in ``spec`` (including its seed).
    """
    root = np.random.SeedSequence(spec.seed)
    cov_seq, noise_seq, draw_seq = root.spawn(3)
    rng = np.random.default_rng(cov_seq)
    shape = (spec.n_reviewers, spec.n_papers)
    reviewers = tuple(f"r{i:03d}" for i in range(spec.n_reviewers))
    papers = tuple(f"p{j:03d}" for j in range(spec.n_papers))

    # skew > 1 makes strong text matches rare
    text = rng.uniform(0.0, 1.0, size=shape) ** spec.text_skew
    if spec.experts_per_paper > 0:
        expert = np.zeros(shape, dtype=bool)
        order = rng.permutation(spec.n_reviewers)
        for j in range(spec.n_papers):
            for t in range(spec.experts_per_paper):
                expert[order[(j * spec.experts_per_paper + t) % spec.n_reviewers], j] = True
        text = np.where(expert, 0.6 + 0.4 * text, 0.4 * text)
    subject = rng.uniform(0.0, 1.0, size=shape)
    text[rng.random(shape) < spec.missing_text] = np.nan
    subject[rng.random(shape) < spec.missing_subject] = np.nan
    vocab = BID_VOCABULARIES[spec.bid_scheme]
    if spec.include_bid:
        bids = rng.choice(np.array(vocab, dtype=object), size=shape, p=BID_WEIGHTS[spec.bid_scheme])
    else:
        bids = np.full(shape, None, dtype=object)
    conflicts = [(reviewers[r], papers[p]) for r, p in zip(*np.nonzero(rng.random(shape) < spec.conflict_rate))]

    scale = OutcomeScale(spec.y_min, spec.y_max)
    venue = Venue(reviewers, papers, spec.paper_load, (spec.cap,) * spec.n_reviewers, frozenset(conflicts), spec.bid_scheme, scale=scale)
    table = PairTable(text, subject, bids)
    truth = outcome_function(text, subject, bids, spec.bid_scheme, spec.policy.lambda_bid, spec.y_min, spec.y_max, spec.include_bid, spec.weights)

    noise = noise_matrix(shape, int(noise_seq.generate_state(1)[0]))
    S = perturb_tpdp(similarity_matrix(venue, table, spec.policy), noise)
    if spec.q_on >= 1:
        on = deterministic_assignment(S, venue, params=spec.policy.to_dict())
    else:
        on = randomized_assignment(S, venue, spec.q_on, params=spec.policy.to_dict())
    draw_rng = np.random.default_rng(draw_seq)
    z = round_once(on.probabilities, venue.caps, draw_rng)
    records = _records(venue, z, truth, draw_rng, spec.attrition, spec.absence)
    return SyntheticVenue(spec, venue, table, noise, on, z, records, truth)


def marginals_to_csv(venue: Venue, probabilities: np.ndarray) -> str:
    """``reviewer,paper,probability`` rows for every non-zero marginal."""
    lines = ["reviewer,paper,probability"]
    for r, p in zip(*np.nonzero(probabilities > 0)):
        lines.append(f"{venue.reviewers[r]},{venue.papers[p]},{format_float(probabilities[r, p])}")
    return "\n".join(lines) + "\n"


def write_synthetic(study: SyntheticVenue, directory) -> dict:
    """Write venue/scores/outcomes/marginals/policy files plus ``truth/truth.json``.

    Returns a mapping from role to written path.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = save_venue(directory, study.venue, study.table, study.records)
    marg = directory / "on_policy.csv"
    marg.write_text(marginals_to_csv(study.venue, study.on_policy.probabilities), encoding="utf-8")
    policy = directory / "policy.json"
    policy.write_text(json.dumps({**study.spec.policy.to_dict(), "q": study.spec.q_on}, indent=1, sort_keys=True), encoding="utf-8")
    noise = directory / "noise.csv"
    noise.write_text(
        "\n".join(",".join(format_float(x) for x in row) for row in study.noise) + "\n", encoding="utf-8"
    )
    truth_dir = directory / "truth"
    truth_dir.mkdir(exist_ok=True)
    truth = truth_dir / "truth.json"
    truth.write_text(
        json.dumps(
            {
                "outcome_function": "y_min + (y_max - y_min) * weighted mean of covariates scaled by their declared ranges; missing covariates count as 0",
                "outcome_weights": study.spec.weights.tolist(),
                "lipschitz_constant": study.spec.lipschitz_constant,
                "monotone": True,
                "spec": study.spec.to_dict(),
                "outcomes": [[float(v) for v in row] for row in study.truth],
                "on_policy_mean": study.true_mean(study.on_policy),
            },
            indent=1,
            sort_keys=True,
        ),
        encoding="utf-8",
    )
    return {**paths, "on_policy": marg, "policy": policy, "noise": noise, "truth": truth}
