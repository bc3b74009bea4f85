"""Off-policy evaluation of reviewer-paper assignment policies.

Point estimates, partial-identification bounds and confidence intervals for
the mean outcome of a counterfactual assignment policy, from data logged
under a randomized assignment policy.
"""

__version__ = "0.1.0"

from .domain import OutcomeRecord, OutcomeScale, PairPartition, PairTable, Status, Venue, classify_pairs, load_venue
from .errors import (
    DataInconsistencyError,
    InfeasibleError,
    ReviewEvalError,
    SamplingError,
    SolverError,
    UnboundedError,
    ValidationError,
)

__all__ = [
    "__version__",
    "OutcomeRecord",
    "OutcomeScale",
    "PairPartition",
    "PairTable",
    "Status",
    "Venue",
    "classify_pairs",
    "load_venue",
    "DataInconsistencyError",
    "InfeasibleError",
    "ReviewEvalError",
    "SamplingError",
    "SolverError",
    "UnboundedError",
    "ValidationError",
]
