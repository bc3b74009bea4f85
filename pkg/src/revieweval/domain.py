"""Core data model: venues, pair covariates, outcome records and the pair partition.

Every matrix in the package is indexed ``[reviewer, paper]`` following the
order of ``Venue.reviewers`` and ``Venue.papers``. Missing real values are NaN,
missing bid labels are ``None``.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .errors import DataInconsistencyError, ValidationError

logger = logging.getLogger(__name__)

TPDP_BIDS = ("very low", "low", "neutral", "high", "very high")
AAAI_BIDS = ("not willing", "not entered", "in a pinch", "willing", "eager")
BID_VOCABULARIES = {"tpdp": TPDP_BIDS, "aaai": AAAI_BIDS}
DEFAULT_BIDS = {"tpdp": "neutral", "aaai": "not entered"}


def normalize_bid(label: Optional[str]) -> Optional[str]:
    """Canonical form of a bid label: lower case, single spaces, ``_``/``-`` as spaces."""
    if label is None:
        return None
    text = " ".join(label.replace("_", " ").replace("-", " ").lower().split())
    return text or None


def format_float(value: float) -> str:
    """Serialize a float with 9 significant digits; NaN becomes an empty cell."""
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return ""
    return f"{float(value):.9g}"


class Status(str, enum.Enum):
    OBSERVED = "observed"
    ATTRITION = "attrition"
    ABSENT = "absent-reviewer"
    ADDED = "manually-added"
    REMOVED = "manually-removed"


MISSING_STATUSES = (Status.ATTRITION, Status.ABSENT, Status.REMOVED)


@dataclass(frozen=True)
class OutcomeScale:
    y_min: float
    y_max: float
    levels: Optional[tuple] = None

    def __post_init__(self):
        if not self.y_min < self.y_max:
            raise ValidationError(f"outcome scale needs y_min < y_max, got [{self.y_min}, {self.y_max}]")
        if self.levels is not None:
            levels = tuple(sorted(float(v) for v in self.levels))
            if levels and (levels[0] < self.y_min or levels[-1] > self.y_max):
                raise ValidationError("outcome levels must lie inside [y_min, y_max]")
            object.__setattr__(self, "levels", levels)

    @property
    def width(self) -> float:
        return self.y_max - self.y_min

    def contains(self, value: float) -> bool:
        return self.y_min <= value <= self.y_max


@dataclass(frozen=True)
class Venue:
    """Reviewers, papers, conflicts and load constraints of one assignment stage."""

    reviewers: tuple
    papers: tuple
    paper_load: int
    caps: tuple
    conflicts: frozenset = frozenset()
    bid_scheme: str = "aaai"
    profile_provided: Optional[tuple] = None
    scale: Optional[OutcomeScale] = None
    _reviewer_index: dict = field(init=False, repr=False, compare=False)
    _paper_index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "reviewers", tuple(self.reviewers))
        object.__setattr__(self, "papers", tuple(self.papers))
        object.__setattr__(self, "caps", tuple(int(c) for c in self.caps))
        object.__setattr__(self, "conflicts", frozenset(tuple(c) for c in self.conflicts))
        if len(set(self.reviewers)) != len(self.reviewers):
            raise ValidationError("duplicate reviewer id")
        if len(set(self.papers)) != len(self.papers):
            raise ValidationError("duplicate paper id")
        if len(self.caps) != len(self.reviewers):
            raise ValidationError("one cap per reviewer required")
        if int(self.paper_load) < 1:
            raise ValidationError(f"paper load must be a positive integer, got {self.paper_load}")
        object.__setattr__(self, "paper_load", int(self.paper_load))
        if any(c < 1 for c in self.caps):
            raise ValidationError("reviewer caps must be positive integers")
        if self.bid_scheme not in BID_VOCABULARIES:
            raise ValidationError(f"unknown bid scheme {self.bid_scheme!r}")
        if self.profile_provided is None:
            object.__setattr__(self, "profile_provided", (True,) * len(self.reviewers))
        else:
            object.__setattr__(self, "profile_provided", tuple(bool(v) for v in self.profile_provided))
            if len(self.profile_provided) != len(self.reviewers):
                raise ValidationError("one profile flag per reviewer required")
        object.__setattr__(self, "_reviewer_index", {r: i for i, r in enumerate(self.reviewers)})
        object.__setattr__(self, "_paper_index", {p: i for i, p in enumerate(self.papers)})
        for r, p in self.conflicts:
            if r not in self._reviewer_index or p not in self._paper_index:
                raise ValidationError(f"conflict references unknown pair ({r}, {p})")
        if sum(self.caps) < self.paper_load * len(self.papers):
            raise ValidationError(
                f"infeasible venue: total capacity {sum(self.caps)} < "
                f"{self.paper_load} x {len(self.papers)} required reviews"
            )

    @property
    def shape(self) -> tuple:
        return (len(self.reviewers), len(self.papers))

    @property
    def n_reviews(self) -> int:
        """Total number of reviews N, fixed ahead of time."""
        return self.paper_load * len(self.papers)

    def reviewer_index(self, reviewer: str) -> int:
        return self._reviewer_index[reviewer]

    def paper_index(self, paper: str) -> int:
        return self._paper_index[paper]

    def has_reviewer(self, reviewer: str) -> bool:
        return reviewer in self._reviewer_index

    def has_paper(self, paper: str) -> bool:
        return paper in self._paper_index

    def conflict_mask(self) -> np.ndarray:
        mask = np.zeros(self.shape, dtype=bool)
        for r, p in self.conflicts:
            mask[self._reviewer_index[r], self._paper_index[p]] = True
        return mask

    def cap_array(self) -> np.ndarray:
        return np.asarray(self.caps, dtype=float)

    def candidate_pairs(self) -> list:
        """All non-conflict (reviewer, paper) id pairs."""
        return [
            (r, p) for r in self.reviewers for p in self.papers if (r, p) not in self.conflicts
        ]

    def with_conflicts(self, extra_mask: np.ndarray) -> "Venue":
        """Copy of the venue with every pair flagged in ``extra_mask`` added as a conflict."""
        rows, cols = np.nonzero(extra_mask)
        extra = {(self.reviewers[r], self.papers[c]) for r, c in zip(rows, cols)}
        return Venue(
            reviewers=self.reviewers,
            papers=self.papers,
            paper_load=self.paper_load,
            caps=self.caps,
            conflicts=self.conflicts | extra,
            bid_scheme=self.bid_scheme,
            profile_provided=self.profile_provided,
            scale=self.scale,
        )


@dataclass(frozen=True)
class Covariates:
    text: Optional[float] = None
    subject: Optional[float] = None
    bid: Optional[str] = None


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class PairTable:
    """Per-pair covariates: text similarity, subject score (NaN = missing) and bid label."""

    text: np.ndarray
    subject: np.ndarray
    bids: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "text", _frozen(np.asarray(self.text, dtype=float)))
        object.__setattr__(self, "subject", _frozen(np.asarray(self.subject, dtype=float)))
        object.__setattr__(self, "bids", _frozen(np.asarray(self.bids, dtype=object)))
        if not (self.text.shape == self.subject.shape == self.bids.shape):
            raise ValidationError("covariate matrices must share one shape")

    @classmethod
    def empty(cls, shape) -> "PairTable":
        return cls(np.full(shape, np.nan), np.full(shape, np.nan), np.full(shape, None, dtype=object))

    @property
    def shape(self) -> tuple:
        return self.text.shape

    def covariates(self, r: int, p: int) -> Covariates:
        t, k = self.text[r, p], self.subject[r, p]
        return Covariates(
            text=None if np.isnan(t) else float(t),
            subject=None if np.isnan(k) else float(k),
            bid=self.bids[r, p],
        )

    def __eq__(self, other):
        if not isinstance(other, PairTable):
            return NotImplemented
        return (
            np.array_equal(self.text, other.text, equal_nan=True)
            and np.array_equal(self.subject, other.subject, equal_nan=True)
            and bool(np.all(self.bids == other.bids))
        )

    __hash__ = None


@dataclass(frozen=True)
class OutcomeRecord:
    reviewer: str
    paper: str
    value: Optional[float]
    status: Status


@dataclass(frozen=True, eq=False)
class PairPartition:
    """Boolean masks over the reviewer-paper grid.

    ``violations`` (positivity violations), ``attrition``, ``absent`` and
    ``supported`` are mutually disjoint; ``observed`` is the subset of
    ``supported`` with a logged outcome; ``ignored`` holds manually added
    assignments that are left out of every sum.
    """

    observed: np.ndarray
    violations: np.ndarray
    attrition: np.ndarray
    absent: np.ndarray
    supported: np.ndarray
    ignored: np.ndarray

    def __post_init__(self):
        for name in ("observed", "violations", "attrition", "absent", "supported", "ignored"):
            object.__setattr__(self, name, _frozen(np.asarray(getattr(self, name), dtype=bool)))

    @property
    def universe(self) -> np.ndarray:
        """Pairs that enter the surrogate programs: observed, attrition, absent, violations."""
        return self.observed | self.attrition | self.absent | self.violations

    def counts(self) -> dict:
        return {
            "observed": int(self.observed.sum()),
            "positivity_violations": int(self.violations.sum()),
            "attrition": int(self.attrition.sum()),
            "absent": int(self.absent.sum()),
            "supported": int(self.supported.sum()),
            "ignored": int(self.ignored.sum()),
        }

    def pairs(self, name: str, venue: Venue) -> frozenset:
        mask = getattr(self, name)
        rows, cols = np.nonzero(mask)
        return frozenset((venue.reviewers[r], venue.papers[c]) for r, c in zip(rows, cols))

    def __eq__(self, other):
        if not isinstance(other, PairPartition):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, n), getattr(other, n))
            for n in ("observed", "violations", "attrition", "absent", "supported", "ignored")
        )

    __hash__ = None


# ---------------------------------------------------------------------------
# parsing


def parse_venue(doc: Mapping) -> Venue:
    """Build a Venue from the parsed ``venue.json`` document."""
    try:
        papers = [str(p) for p in doc["papers"]]
        reviewers = doc["reviewers"]
        load = doc["paper_load"]
    except KeyError as exc:
        raise ValidationError(f"missing key {exc.args[0]!r}", source="venue.json") from None
    ids, caps, profiles = [], [], []
    for i, entry in enumerate(reviewers):
        if not isinstance(entry, Mapping) or "id" not in entry or "cap" not in entry:
            raise ValidationError("reviewer entries need 'id' and 'cap'", row=i, source="venue.json reviewers")
        cap = entry["cap"]
        if isinstance(cap, bool) or not isinstance(cap, int) or cap < 1:
            raise ValidationError(f"cap must be a positive integer, got {cap!r}", row=i, source="venue.json reviewers")
        ids.append(str(entry["id"]))
        caps.append(cap)
        profiles.append(bool(entry.get("profile", True)))
    if isinstance(load, bool) or not isinstance(load, int):
        raise ValidationError(f"paper_load must be an integer, got {load!r}", source="venue.json")
    scale = None
    if doc.get("outcome_scale") is not None:
        s = doc["outcome_scale"]
        scale = OutcomeScale(float(s["min"]), float(s["max"]), tuple(s["levels"]) if s.get("levels") else None)
    conflicts = []
    for i, pair in enumerate(doc.get("conflicts", [])):
        if len(pair) != 2:
            raise ValidationError("conflict must be a [reviewer, paper] pair", row=i, source="venue.json conflicts")
        conflicts.append((str(pair[0]), str(pair[1])))
    if len(set(conflicts)) != len(conflicts):
        raise ValidationError("duplicate conflict pair", source="venue.json conflicts")
    return Venue(
        reviewers=ids,
        papers=papers,
        paper_load=load,
        caps=caps,
        conflicts=conflicts,
        bid_scheme=doc.get("bid_scheme", "aaai"),
        profile_provided=profiles,
        scale=scale,
    )


def _open_text(doc):
    if isinstance(doc, (str, Path)):
        return open(doc, newline="", encoding="utf-8")
    return doc


def _read_csv(doc, required: Sequence[str], source: str):
    handle = _open_text(doc)
    try:
        reader = csv.DictReader(handle)
        if reader.fieldnames is None:
            raise ValidationError("header row is mandatory", source=source)
        missing = [c for c in required if c not in reader.fieldnames]
        if missing:
            raise ValidationError(f"missing columns {missing}", source=source)
        # header is line 1, first data row is line 2
        return [(i + 2, row) for i, row in enumerate(reader)]
    finally:
        if handle is not doc:
            handle.close()


def _parse_unit(text: str, name: str, row: int, source: str) -> float:
    text = (text or "").strip()
    if text == "":
        return math.nan
    try:
        value = float(text)
    except ValueError:
        raise ValidationError(f"{name} is not a number: {text!r}", row=row, source=source) from None
    if not 0.0 <= value <= 1.0:
        raise ValidationError(f"{name}={value} outside [0, 1]", row=row, source=source)
    return value


def _pair_indices(venue: Venue, row: dict, line: int, source: str) -> tuple:
    r, p = (row.get("reviewer") or "").strip(), (row.get("paper") or "").strip()
    if not venue.has_reviewer(r):
        raise ValidationError(f"unknown reviewer {r!r}", row=line, source=source)
    if not venue.has_paper(p):
        raise ValidationError(f"unknown paper {p!r}", row=line, source=source)
    return venue.reviewer_index(r), venue.paper_index(p)


def parse_scores(venue: Venue, doc) -> PairTable:
    """Read ``scores.csv``; pairs without a row keep every covariate missing."""
    source = "scores.csv"
    vocab = BID_VOCABULARIES[venue.bid_scheme]
    text = np.full(venue.shape, np.nan)
    subject = np.full(venue.shape, np.nan)
    bids = np.full(venue.shape, None, dtype=object)
    seen = set()
    for line, row in _read_csv(doc, ("reviewer", "paper", "T", "K", "bid"), source):
        r, p = _pair_indices(venue, row, line, source)
        if (r, p) in seen:
            raise ValidationError("duplicate pair", row=line, source=source)
        seen.add((r, p))
        text[r, p] = _parse_unit(row["T"], "T", line, source)
        subject[r, p] = _parse_unit(row["K"], "K", line, source)
        label = normalize_bid(row["bid"])
        if label is not None and label not in vocab:
            raise ValidationError(f"bid label {row['bid']!r} not in the {venue.bid_scheme} vocabulary", row=line, source=source)
        bids[r, p] = label
    return PairTable(text, subject, bids)


def parse_outcomes(venue: Venue, doc) -> tuple:
    """Read ``outcomes.csv`` into a tuple of OutcomeRecords."""
    source = "outcomes.csv"
    scale = venue.scale
    records, seen = [], set()
    for line, row in _read_csv(doc, ("reviewer", "paper", "value", "status"), source):
        r, p = _pair_indices(venue, row, line, source)
        if (r, p) in seen:
            raise ValidationError("duplicate pair", row=line, source=source)
        seen.add((r, p))
        try:
            status = Status((row["status"] or "").strip())
        except ValueError:
            raise ValidationError(f"unknown status {row['status']!r}", row=line, source=source) from None
        raw = (row["value"] or "").strip()
        value = None
        if raw:
            try:
                value = float(raw)
            except ValueError:
                raise ValidationError(f"value is not a number: {raw!r}", row=line, source=source) from None
        if status is Status.OBSERVED and value is None:
            raise ValidationError("status=observed requires a value", row=line, source=source)
        if status in MISSING_STATUSES and value is not None:
            raise ValidationError(f"status={status.value} must not carry a value", row=line, source=source)
        if value is not None:
            if scale is None:
                raise ValidationError("venue.json needs an outcome_scale to validate outcome values", source=source)
            if not scale.contains(value):
                raise ValidationError(f"value {value} outside [{scale.y_min}, {scale.y_max}]", row=line, source=source)
        records.append(OutcomeRecord(venue.reviewers[r], venue.papers[p], value, status))
    return tuple(records)


def load_venue(venue_doc, scores_doc, outcomes_doc=None) -> tuple:
    """Load and cross-reference the three input documents.

    ``venue_doc`` may be a path or an already parsed mapping; the CSV documents
    may be paths or open text streams. Returns ``(venue, table, records)``.
    """
    if isinstance(venue_doc, Mapping):
        venue = parse_venue(venue_doc)
    else:
        with open(venue_doc, encoding="utf-8") as fh:
            try:
                venue = parse_venue(json.load(fh))
            except json.JSONDecodeError as exc:
                raise ValidationError(f"invalid JSON: {exc}", source="venue.json") from None
    table = parse_scores(venue, scores_doc)
    records = parse_outcomes(venue, outcomes_doc) if outcomes_doc is not None else ()
    return venue, table, records


# ---------------------------------------------------------------------------
# serialization


def venue_to_doc(venue: Venue) -> dict:
    doc = {
        "papers": list(venue.papers),
        "reviewers": [
            {"id": r, "cap": c, "profile": prof}
            for r, c, prof in zip(venue.reviewers, venue.caps, venue.profile_provided)
        ],
        "paper_load": venue.paper_load,
        "conflicts": sorted([list(c) for c in venue.conflicts]),
        "bid_scheme": venue.bid_scheme,
    }
    if venue.scale is not None:
        doc["outcome_scale"] = {"min": venue.scale.y_min, "max": venue.scale.y_max}
        if venue.scale.levels is not None:
            doc["outcome_scale"]["levels"] = list(venue.scale.levels)
    return doc


def scores_to_csv(venue: Venue, table: PairTable) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["reviewer", "paper", "T", "K", "bid"])
    for r, rid in enumerate(venue.reviewers):
        for p, pid in enumerate(venue.papers):
            t, k, b = table.text[r, p], table.subject[r, p], table.bids[r, p]
            if np.isnan(t) and np.isnan(k) and b is None:
                continue
            writer.writerow([rid, pid, format_float(t), format_float(k), b or ""])
    return buf.getvalue()


def outcomes_to_csv(records: Iterable[OutcomeRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["reviewer", "paper", "value", "status"])
    for rec in records:
        writer.writerow([rec.reviewer, rec.paper, format_float(rec.value) if rec.value is not None else "", rec.status.value])
    return buf.getvalue()


def save_venue(directory, venue: Venue, table: PairTable, records=()) -> dict:
    """Write ``venue.json``, ``scores.csv`` and ``outcomes.csv`` into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {
        "venue": directory / "venue.json",
        "scores": directory / "scores.csv",
        "outcomes": directory / "outcomes.csv",
    }
    paths["venue"].write_text(json.dumps(venue_to_doc(venue), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    paths["scores"].write_text(scores_to_csv(venue, table), encoding="utf-8")
    paths["outcomes"].write_text(outcomes_to_csv(records), encoding="utf-8")
    return paths


# ---------------------------------------------------------------------------
# derived matrices


def observed_assignment(venue: Venue, records: Iterable[OutcomeRecord]) -> np.ndarray:
    """The logged on-policy assignment Z^A: every record except manual additions."""
    z = np.zeros(venue.shape)
    for rec in records:
        if rec.status is not Status.ADDED:
            z[venue.reviewer_index(rec.reviewer), venue.paper_index(rec.paper)] = 1.0
    return z


def outcome_matrix(venue: Venue, records: Iterable[OutcomeRecord]) -> np.ndarray:
    """Observed outcome values on the grid (NaN where nothing was observed)."""
    y = np.full(venue.shape, np.nan)
    for rec in records:
        if rec.status is Status.OBSERVED:
            y[venue.reviewer_index(rec.reviewer), venue.paper_index(rec.paper)] = rec.value
    return y


def classify_pairs(venue: Venue, p_on: np.ndarray, p_off: np.ndarray, records: Sequence[OutcomeRecord]) -> PairPartition:
    """Partition reviewer-paper pairs into supported, attrition, absent and violation sets.

    Parameters
    ----------
    venue : Venue
    p_on, p_off : ndarray, shape (n_reviewers, n_papers)
        Marginal assignment probabilities of the logging policy and of the
        evaluated policy.
    records : sequence of OutcomeRecord
        Logged outcomes. Manual additions are ignored; manual removals are
        treated as attrition.

    Raises
    ------
    DataInconsistencyError
        A logged (non-added) assignment sits on a pair with zero on-policy
        probability, or a record claims an absent reviewer who did submit.
    """
    p_on = np.asarray(p_on, dtype=float)
    p_off = np.asarray(p_off, dtype=float)
    if p_on.shape != venue.shape or p_off.shape != venue.shape:
        raise ValidationError(f"marginal matrices must have shape {venue.shape}")

    masks = {s: np.zeros(venue.shape, dtype=bool) for s in Status}
    per_reviewer: dict = {}
    for rec in records:
        r, p = venue.reviewer_index(rec.reviewer), venue.paper_index(rec.paper)
        masks[rec.status][r, p] = True
        if rec.status is Status.ADDED:
            continue
        if p_on[r, p] <= 0.0:
            raise DataInconsistencyError(
                f"pair ({rec.reviewer}, {rec.paper}) was logged as assigned ({rec.status.value}) "
                "but has zero on-policy probability"
            )
        per_reviewer.setdefault(r, []).append(rec.status)

    absent_reviewers = set()
    for r, statuses in per_reviewer.items():
        all_missing = all(s in (Status.ATTRITION, Status.ABSENT) for s in statuses)
        if all_missing:
            absent_reviewers.add(r)
        elif Status.ABSENT in statuses:
            raise DataInconsistencyError(
                f"reviewer {venue.reviewers[r]!r} is marked absent but has submitted or removed reviews"
            )

    relevant = (p_on > 0) | (p_off > 0)
    violations = (p_on <= 0) & (p_off > 0)
    missing = masks[Status.ATTRITION] | masks[Status.ABSENT]
    removed = masks[Status.REMOVED]
    absent_rows = np.zeros(venue.shape, dtype=bool)
    for r in absent_reviewers:
        absent_rows[r, :] = True
    absent = missing & absent_rows
    attrition = (missing & ~absent_rows) | removed
    ignored = masks[Status.ADDED] & ~violations
    supported = relevant & ~(violations | attrition | absent | ignored)
    observed = supported & masks[Status.OBSERVED]

    z = observed_assignment(venue, records)
    if int(z.sum()) != venue.n_reviews:
        logger.warning("logged assignment has %d reviews, venue expects N=%d", int(z.sum()), venue.n_reviews)
    return PairPartition(observed, violations, attrition, absent, supported, ignored)
