"""Randomized logged-data fixtures for the bounds tests and the acceptance suite."""

import numpy as np

from revieweval.domain import OutcomeRecord, Status
from revieweval.errors import InfeasibleError, ValidationError
from revieweval.estimator import EstimationInputs
from revieweval.lp import randomized_assignment
from revieweval.sampler import sample_assignment

from conftest import make_venue


def bounds_fixture(seed, n_r=4, n_p=3, caps=2, q_on=0.75, q_off=0.5, attrition=0.25, absence=0.0, integer=False):
    """Logged data with attrition and positivity violations plus per-pair covariates.

    With ``integer=False`` covariates are continuous in [0, 1]^2 and outcomes
    ``1 + 2 (x1 + x2)``, which is Lipschitz with constant 4 under any
    normalization whose ranges do not exceed 1. With ``integer=True``
    covariates lie on {0..4}^2 and outcomes are arbitrary levels 1..5.

    Returns ``(inputs, X)``, or None when the drawn policies are infeasible or
    absent-reviewer pairs need an observed mean that is undefined.
    """
    rng = np.random.default_rng(seed)
    venue = make_venue(n_r, n_p, caps=caps)
    try:
        p_on = randomized_assignment(rng.random((n_r, n_p)), venue, q_on).probabilities
        p_off = randomized_assignment(rng.random((n_r, n_p)), venue, q_off).probabilities
    except InfeasibleError:
        return None
    z = sample_assignment(p_on, venue, rng)
    n = n_r * n_p
    if integer:
        X = rng.integers(0, 5, size=(n, 2)).astype(float)
        y = rng.integers(1, 6, size=(n_r, n_p)).astype(float)
    else:
        X = rng.random((n, 2))
        y = (1.0 + 2.0 * X.sum(axis=1)).reshape(n_r, n_p)
    absent = rng.random(n_r) < absence
    records = []
    for r, p in zip(*np.nonzero(z > 0.5)):
        if absent[r]:
            status = Status.ABSENT
        elif rng.random() < attrition:
            status = Status.ATTRITION
        else:
            status = Status.OBSERVED
        value = float(y[r, p]) if status is Status.OBSERVED else None
        records.append(OutcomeRecord(venue.reviewers[r], venue.papers[p], value, status))
    inputs = EstimationInputs.build(venue, records, p_on, p_off)
    try:
        inputs.ybar_or_nan()
    except ValidationError:
        return None
    return inputs, X


def bounds_fixtures(count, start=0, **kwargs):
    """The first ``count`` usable fixtures from consecutive seeds."""
    out, seed = [], start
    while len(out) < count:
        fx = bounds_fixture(seed, **kwargs)
        if fx is not None:
            out.append(fx)
        seed += 1
    return out
