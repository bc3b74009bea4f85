import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from revieweval.domain import OutcomeRecord, OutcomeScale, PairTable, Status, Venue

settings.register_profile("repo", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


def make_venue(n_r, n_p, load=1, caps=1, conflicts=(), scale=(1.0, 5.0), scheme="aaai", profiles=None):
    """Venue with ids r0.. and p0..; ``conflicts`` given as (r, p) index pairs."""
    caps = (caps,) * n_r if np.isscalar(caps) else tuple(caps)
    return Venue(
        reviewers=tuple(f"r{i}" for i in range(n_r)),
        papers=tuple(f"p{j}" for j in range(n_p)),
        paper_load=load,
        caps=caps,
        conflicts=frozenset((f"r{r}", f"p{p}") for r, p in conflicts),
        bid_scheme=scheme,
        profile_provided=profiles,
        scale=None if scale is None else OutcomeScale(*scale),
    )


def make_records(venue, z, y, status=None):
    """Records for every assigned pair of ``z``; ``status`` maps (r, p) to a Status (default observed)."""
    status = status or {}
    out = []
    for r, p in zip(*np.nonzero(np.asarray(z) > 0.5)):
        st = status.get((int(r), int(p)), Status.OBSERVED)
        value = float(y[r, p]) if st in (Status.OBSERVED, Status.ADDED) else None
        out.append(OutcomeRecord(venue.reviewers[r], venue.papers[p], value, st))
    return out


def table_from(text, subject=None, bids=None):
    text = np.asarray(text, dtype=float)
    subject = np.full(text.shape, np.nan) if subject is None else np.asarray(subject, dtype=float)
    bids = np.full(text.shape, None, dtype=object) if bids is None else np.asarray(bids, dtype=object)
    return PairTable(text, subject, bids)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    """Print the acceptance criteria lines recorded during the run."""
    import sys

    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        terminalreporter.write_line(results[number])
