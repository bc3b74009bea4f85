"""Composite similarity scores under the parameterized policy families."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .domain import AAAI_BIDS, DEFAULT_BIDS, TPDP_BIDS, Covariates, PairTable, Venue, normalize_bid
from .errors import ValidationError

FAMILIES = ("tpdp-linear", "aaai22", "neurips16", "aaai21")

# AAAI bid value = base + slope * lambda_bid
_AAAI_BID_TERMS = {
    "not willing": (0.05, 0.0),
    "not entered": (1.0, 0.0),
    "in a pinch": (1.0, 0.5),
    "willing": (1.0, 1.5),
    "eager": (1.0, 3.0),
}
_TPDP_BID_VALUES = {"very low": -1.0, "low": -0.5, "neutral": 0.0, "high": 0.5, "very high": 1.0}
_POSITIVE_BIDS_K_OVERRIDE = ("willing", "eager")
SCORE_FLOOR = 0.15
NO_PROFILE_FACTOR = 0.9


@dataclass(frozen=True)
class BidScheme:
    name: str
    labels: tuple
    default: str

    def __post_init__(self):
        if self.default not in self.labels:
            raise ValidationError(f"default bid {self.default!r} not in scheme {self.name}")


SCHEMES = {
    "tpdp": BidScheme("tpdp", TPDP_BIDS, DEFAULT_BIDS["tpdp"]),
    "aaai": BidScheme("aaai", AAAI_BIDS, DEFAULT_BIDS["aaai"]),
}


@dataclass(frozen=True)
class PolicyParams:
    family: str = "aaai22"
    w_text: float = 0.75
    lambda_bid: float = 1.0
    q: float = 1.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValidationError(f"unknown policy family {self.family!r}; expected one of {FAMILIES}")
        if not 0.0 <= self.w_text <= 1.0:
            raise ValidationError(f"w_text must lie in [0, 1], got {self.w_text}")
        if self.lambda_bid < 0:
            raise ValidationError(f"lambda_bid must be >= 0, got {self.lambda_bid}")
        if not 0.0 < self.q <= 1.0:
            raise ValidationError(f"q must lie in (0, 1], got {self.q}")

    def replace(self, **changes) -> "PolicyParams":
        values = asdict(self)
        values.update(changes)
        return PolicyParams(**values)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "PolicyParams":
        unknown = set(doc) - {"family", "w_text", "lambda_bid", "q"}
        if unknown:
            raise ValidationError(f"unknown policy fields {sorted(unknown)}")
        return cls(**{k: (v if k == "family" else float(v)) for k, v in doc.items()})

    @classmethod
    def load(cls, path) -> "PolicyParams":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    @property
    def scheme(self) -> str:
        return "tpdp" if self.family == "tpdp-linear" else "aaai"


def bid_value(label: Optional[str], scheme: str | BidScheme = "aaai", lambda_bid: float = 1.0) -> float:
    """Numeric bid score of ``label``; a missing label takes the scheme default."""
    if isinstance(scheme, BidScheme):
        scheme = scheme.name
    if scheme not in SCHEMES:
        raise ValidationError(f"unknown bid scheme {scheme!r}")
    label = normalize_bid(label)
    if label is None:
        label = SCHEMES[scheme].default
    if scheme == "tpdp":
        try:
            return _TPDP_BID_VALUES[label]
        except KeyError:
            raise ValidationError(f"unknown bid label {label!r} for the tpdp scheme") from None
    try:
        base, slope = _AAAI_BID_TERMS[label]
    except KeyError:
        raise ValidationError(f"unknown bid label {label!r} for the aaai scheme") from None
    return base + slope * lambda_bid


def similarity_tpdp(text: Optional[float], bid: Optional[str], w_text: float) -> float:
    """Convex combination of text similarity and the TPDP bid score."""
    if text is None or (isinstance(text, float) and math.isnan(text)):
        raise ValidationError("tpdp-linear similarity requires a text-similarity score")
    return w_text * text + (1.0 - w_text) * bid_value(bid, "tpdp")


def _present(x) -> bool:
    return x is not None and not (isinstance(x, float) and math.isnan(x))


def similarity_aaai(
    cov: Covariates,
    w_text: float = 0.75,
    lambda_bid: float = 1.0,
    profile_provided: bool = True,
    trace: Optional[dict] = None,
) -> float:
    """Final AAAI'22 score for one pair, including every special case.

    The steps run in order: base score from whichever of text/subject score
    is present (0 when neither), the willing/eager override when the subject
    score is exactly 0, the bid exponent, the 0.15 floor rescue through the
    subject score, and the 10% reduction for reviewers without a profile.
    ``trace`` (if given) receives the names of the rules that fired.
    """
    t, k = cov.text, cov.subject
    has_t, has_k = _present(t), _present(k)
    if has_t and has_k:
        base = w_text * t + (1.0 - w_text) * k
    elif has_t:
        base = t
    elif has_k:
        base = k
    else:
        base = 0.0
    label = normalize_bid(cov.bid) or DEFAULT_BIDS["aaai"]
    if label in _POSITIVE_BIDS_K_OVERRIDE and has_k and k == 0.0 and has_t:
        base = t
        if trace is not None:
            trace["positive_bid_zero_subject"] = trace.get("positive_bid_zero_subject", 0) + 1
    b = bid_value(label, "aaai", lambda_bid)
    assert b > 0, "bid values are bounded below by 0.05"
    score = 0.0 if base == 0.0 else base ** (1.0 / b)
    if score < SCORE_FLOOR and has_k:
        score = min(k ** (1.0 / b), SCORE_FLOOR)
        if trace is not None:
            trace["floor_rescue"] = trace.get("floor_rescue", 0) + 1
    if not profile_provided:
        score *= NO_PROFILE_FACTOR
    return score


def similarity_neurips16(text: float, subject: float, bid: Optional[str], w_text: float = 0.5, scheme: str = "aaai", lambda_bid: float = 1.0) -> float:
    if not (_present(text) and _present(subject)):
        raise ValidationError("neurips16 similarity requires both text and subject scores")
    return (w_text * text + (1.0 - w_text) * subject) * 2.0 ** bid_value(bid, scheme, lambda_bid)


def similarity_aaai21(text: float, subject: float, bid: Optional[str], w_text: float = 0.5, scheme: str = "aaai", lambda_bid: float = 1.0) -> float:
    if not (_present(text) and _present(subject)):
        raise ValidationError("aaai21 similarity requires both text and subject scores")
    b = bid_value(bid, scheme, lambda_bid)
    if b <= 0:
        raise ValidationError(f"aaai21 similarity needs a positive bid value, got {b}")
    base = w_text * text + (1.0 - w_text) * subject
    return 0.0 if base == 0.0 else base ** (1.0 / b)


def bid_matrix(table: PairTable, scheme: str, lambda_bid: float = 1.0) -> np.ndarray:
    """Numeric bid values for every pair (defaults filled in)."""
    values = {label: bid_value(label, scheme, lambda_bid) for label in SCHEMES[scheme].labels}
    default = values[SCHEMES[scheme].default]
    return np.array([[values.get(b, default) if b is not None else default for b in row] for row in table.bids], dtype=float).reshape(table.shape)


def similarity_matrix(venue: Venue, table: PairTable, params: PolicyParams, diagnostics: Optional[dict] = None) -> np.ndarray:
    """Similarity for every non-conflict pair; conflict pairs are NaN.

    ``diagnostics`` (if given) is filled with per-rule counts for the
    aaai22 family.
    """
    if table.shape != venue.shape:
        raise ValidationError(f"score table shape {table.shape} does not match venue {venue.shape}")
    if params.family in ("tpdp-linear",) and venue.bid_scheme != "tpdp":
        raise ValidationError("tpdp-linear needs a venue with the tpdp bid scheme")
    if params.family == "aaai22" and venue.bid_scheme != "aaai":
        raise ValidationError("aaai22 needs a venue with the aaai bid scheme")
    conflicts = venue.conflict_mask()
    t, k = table.text, table.subject
    bids = bid_matrix(table, venue.bid_scheme, params.lambda_bid)
    w = params.w_text

    if params.family == "tpdp-linear":
        bad = np.isnan(t) & ~conflicts
        if bad.any():
            r, p = np.argwhere(bad)[0]
            raise ValidationError(f"missing text similarity for ({venue.reviewers[r]}, {venue.papers[p]})")
        s = w * t + (1.0 - w) * bids
    elif params.family in ("neurips16", "aaai21"):
        bad = (np.isnan(t) | np.isnan(k)) & ~conflicts
        if bad.any():
            r, p = np.argwhere(bad)[0]
            raise ValidationError(f"{params.family} needs text and subject scores for ({venue.reviewers[r]}, {venue.papers[p]})")
        base = w * t + (1.0 - w) * k
        if params.family == "neurips16":
            s = base * np.power(2.0, bids)
        else:
            if np.any(bids[~conflicts] <= 0):
                raise ValidationError("aaai21 needs positive bid values")
            with np.errstate(divide="ignore", invalid="ignore"):
                s = np.where(base == 0.0, 0.0, np.power(base, 1.0 / bids))
    else:
        s = _aaai_cascade(t, k, table.bids, bids, w, np.asarray(venue.profile_provided), diagnostics)
    s = np.array(s, dtype=float)
    s[conflicts] = np.nan
    return s


def _aaai_cascade(t, k, labels, b, w_text, profiles, diagnostics):
    has_t, has_k = ~np.isnan(t), ~np.isnan(k)
    t0, k0 = np.nan_to_num(t), np.nan_to_num(k)
    base = np.where(has_t & has_k, w_text * t0 + (1.0 - w_text) * k0, np.where(has_t, t0, np.where(has_k, k0, 0.0)))
    positive = np.isin(labels.astype(str), _POSITIVE_BIDS_K_OVERRIDE)
    override = positive & has_k & (k0 == 0.0) & has_t
    base = np.where(override, t0, base)
    with np.errstate(divide="ignore", invalid="ignore"):
        score = np.where(base == 0.0, 0.0, np.power(base, 1.0 / b))
        rescue = (score < SCORE_FLOOR) & has_k
        score = np.where(rescue, np.minimum(np.where(k0 == 0.0, 0.0, np.power(k0, 1.0 / b)), SCORE_FLOOR), score)
    score = np.where(profiles[:, None], score, NO_PROFILE_FACTOR * score)
    if diagnostics is not None:
        diagnostics["positive_bid_zero_subject"] = int(override.sum())
        diagnostics["floor_rescue"] = int(rescue.sum())
        diagnostics["no_profile_pairs"] = int((~profiles).sum() * t.shape[1])
    return score
