"""Assignment sampling and Monte Carlo estimation of pairwise assignment covariances."""

from __future__ import annotations

import json
import struct
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np
from scipy import sparse

from .domain import Venue
from .errors import SamplingError, ValidationError
from .lp import MarginalMatrix, check_marginals
from .rounding import round_once

COV_MAGIC = b"RVCOV\x00\x01\x00"
_HEADER = struct.Struct("<8sQQQ")
TRIPLET_DTYPE = np.dtype([("a", "<i8"), ("b", "<i8"), ("value", "<f8")])


def _probabilities(marginals) -> np.ndarray:
    if isinstance(marginals, MarginalMatrix):
        return marginals.probabilities
    return np.asarray(marginals, dtype=float)


def sample_assignment(marginals, venue: Venue, seed: Union[int, np.random.Generator, None] = None) -> np.ndarray:
    """Draw one binary assignment whose per-pair marginals equal ``marginals``."""
    p = _probabilities(marginals)
    problems = check_marginals(p, venue, q=1.0, tol=1e-7)
    if problems:
        raise SamplingError("marginals are not feasible for the venue: " + "; ".join(problems))
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return round_once(p, venue.caps, rng)


class CovarianceAccumulator:
    """Streaming first and second moments of assignment indicators.

    Only pairs with positive marginal probability are tracked. Second
    moments are co-occurrence counts kept as a sparse symmetric matrix;
    pairs that never co-occur have a zero count and covariance
    ``-p_i * p_j``, which is recovered from the first moments.
    """

    def __init__(self, pairs: np.ndarray, shape: tuple, seed_record: Optional[dict] = None, batch_size: int = 4096):
        self.pairs = np.asarray(pairs, dtype=np.int64)
        self.shape = tuple(shape)
        self.n = 0
        self.first = np.zeros(len(self.pairs), dtype=np.int64)
        self.second = sparse.csr_matrix((len(self.pairs), len(self.pairs)), dtype=np.int64)
        self.seed_record = dict(seed_record or {})
        self._position = {int(f): i for i, f in enumerate(self.pairs)}
        self._buffer: list = []
        self._batch_size = batch_size

    @classmethod
    def for_marginals(cls, marginals, seed_record: Optional[dict] = None) -> "CovarianceAccumulator":
        p = _probabilities(marginals)
        return cls(np.flatnonzero(p.ravel() > 0), p.shape, seed_record)

    def add(self, assignment: np.ndarray) -> None:
        flat = np.flatnonzero(np.asarray(assignment).ravel() > 0.5)
        try:
            self._buffer.append(np.array([self._position[int(f)] for f in flat], dtype=np.int64))
        except KeyError as exc:
            raise SamplingError(f"sampled pair {exc.args[0]} lies outside the tracked support") from None
        if len(self._buffer) >= self._batch_size:
            self._flush()

    def _flush(self) -> None:
        if not self._buffer:
            return
        lengths = [len(b) for b in self._buffer]
        rows = np.repeat(np.arange(len(self._buffer)), lengths)
        cols = np.concatenate(self._buffer) if rows.size else np.zeros(0, dtype=np.int64)
        z = sparse.csr_matrix((np.ones(rows.size, dtype=np.int64), (rows, cols)), shape=(len(self._buffer), len(self.pairs)))
        self.first += np.asarray(z.sum(axis=0)).ravel()
        self.second = (self.second + (z.T @ z)).tocsr()
        self.n += len(self._buffer)
        self._buffer = []

    def merge(self, other: "CovarianceAccumulator") -> "CovarianceAccumulator":
        self._flush()
        other._flush()
        if not np.array_equal(self.pairs, other.pairs):
            raise ValidationError("cannot merge accumulators over different pair sets")
        self.n += other.n
        self.first += other.first
        self.second = (self.second + other.second).tocsr()
        return self

    @property
    def count(self) -> int:
        self._flush()
        return self.n

    def means(self) -> np.ndarray:
        self._flush()
        return self.first / self.n

    def _require(self, flat_pairs) -> np.ndarray:
        try:
            return np.array([self._position[int(f)] for f in flat_pairs], dtype=np.int64)
        except KeyError as exc:
            r, p = divmod(int(exc.args[0]), self.shape[1])
            raise ValidationError(f"no covariance recorded for pair ({r}, {p}); it has zero sampled probability") from None

    def covariance(self, flat_pairs) -> np.ndarray:
        """Dense empirical covariance matrix restricted to ``flat_pairs`` (row-major grid indices)."""
        self._flush()
        if self.n < 1:
            raise ValidationError("covariance needs at least one sample")
        idx = self._require(flat_pairs)
        second = self.second[idx][:, idx].toarray() / self.n
        m = self.first[idx] / self.n
        return second - np.outer(m, m)

    def cov(self, i: int, j: int) -> float:
        return float(self.covariance([i, j])[0, 1])

    def full_covariance(self) -> np.ndarray:
        """Covariance over every tracked pair (small problems only)."""
        return self.covariance(self.pairs)

    # -- persistence ------------------------------------------------------

    def triplets(self) -> np.ndarray:
        """Upper-triangular second moments E[Z_a Z_b] (diagonal = E[Z_a])."""
        self._flush()
        upper = sparse.triu(self.second).tocoo()
        out = np.empty(upper.nnz, dtype=TRIPLET_DTYPE)
        out["a"], out["b"] = upper.row, upper.col
        out["value"] = upper.data / max(self.n, 1)
        order = np.lexsort((out["b"], out["a"]))
        return out[order]

    def save(self, path, pair_ids: Optional[list] = None) -> Path:
        """Write the binary triplet file and its ``.json`` sidecar."""
        path = Path(path)
        trip = self.triplets()
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(COV_MAGIC, self.n, len(self.pairs), len(trip)))
            fh.write(trip.tobytes())
        rows, cols = np.divmod(self.pairs, self.shape[1])
        sidecar = {
            "format": "revieweval-covariance-v1",
            "layout": "header <8s magic, u64 n_samples, u64 n_pairs, u64 n_triplets>; then n_triplets records <i8 a, i8 b, f8 value>",
            "value": "empirical second moment E[Z_a Z_b] over n_samples draws, a <= b; diagonal holds E[Z_a]; Cov = value(a,b) - value(a,a) * value(b,b)",
            "n_samples": self.n,
            "grid_shape": list(self.shape),
            "pairs": [
                {"index": i, "row": int(r), "col": int(c), **({"reviewer": pair_ids[i][0], "paper": pair_ids[i][1]} if pair_ids else {})}
                for i, (r, c) in enumerate(zip(rows, cols))
            ],
            "seed": self.seed_record,
            "note": "covariances reflect this package's dependent-rounding sampler; the joint law of other samplers may differ",
        }
        Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=1), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path) -> "CovarianceAccumulator":
        path = Path(path)
        sidecar = json.loads(Path(str(path) + ".json").read_text(encoding="utf-8"))
        raw = path.read_bytes()
        magic, n, n_pairs, n_trip = _HEADER.unpack_from(raw, 0)
        if magic != COV_MAGIC:
            raise ValidationError("not a covariance file", source=str(path))
        trip = np.frombuffer(raw, dtype=TRIPLET_DTYPE, count=n_trip, offset=_HEADER.size)
        shape = tuple(sidecar["grid_shape"])
        pairs = np.array([e["row"] * shape[1] + e["col"] for e in sidecar["pairs"]], dtype=np.int64)
        if len(pairs) != n_pairs:
            raise ValidationError("sidecar pair count disagrees with the binary header", source=str(path))
        acc = cls(pairs, shape, sidecar.get("seed"))
        counts = np.rint(trip["value"] * n).astype(np.int64)
        upper = sparse.coo_matrix((counts, (trip["a"], trip["b"])), shape=(n_pairs, n_pairs))
        diag = sparse.diags(upper.diagonal())
        acc.second = (upper + upper.T - diag).tocsr().astype(np.int64)
        acc.first = upper.diagonal().astype(np.int64)
        acc.n = int(n)
        return acc


def _draw_into(p: np.ndarray, caps: tuple, n: int, seed_seq: np.random.SeedSequence) -> CovarianceAccumulator:
    rng = np.random.default_rng(seed_seq)
    acc = CovarianceAccumulator.for_marginals(p)
    for _ in range(n):
        acc.add(round_once(p, caps, rng))
    acc._flush()
    return acc


def estimate_covariance(marginals, venue: Venue, n_samples: int, seed: int = 0, workers: int = 1) -> CovarianceAccumulator:
    """Empirical covariance of assignment indicators over ``n_samples`` independent draws.

    Draws are split across ``workers`` streams spawned from ``seed``; the
    result depends only on ``(seed, workers)``.
    """
    if n_samples < 2:
        raise ValidationError("need at least 2 samples")
    p = _probabilities(marginals)
    problems = check_marginals(p, venue, q=1.0, tol=1e-7)
    if problems:
        raise SamplingError("marginals are not feasible for the venue: " + "; ".join(problems))
    workers = max(1, int(workers))
    streams = np.random.SeedSequence(seed).spawn(workers)
    sizes = [n_samples // workers + (1 if w < n_samples % workers else 0) for w in range(workers)]
    if workers == 1:
        parts = [_draw_into(p, venue.caps, sizes[0], streams[0])]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_draw_into, [p] * workers, [venue.caps] * workers, sizes, streams))
    total = parts[0]
    for part in parts[1:]:
        total.merge(part)
    total.seed_record = {"root_seed": seed, "workers": workers, "n_samples": n_samples}
    return total


def resampled_statistic(
    marginals,
    venue: Venue,
    statistic: Callable[[CovarianceAccumulator], float],
    n_samples: int,
    repeats: int = 10,
    seed: int = 0,
) -> np.ndarray:
    """Evaluate ``statistic`` on ``repeats`` independent accumulators of ``n_samples`` draws each.

    Used to gauge the Monte Carlo stability of covariance-dependent outputs
    such as variance estimates.
    """
    streams = np.random.SeedSequence(seed).spawn(repeats)
    p = _probabilities(marginals)
    return np.array([statistic(_draw_into(p, venue.caps, n_samples, s)) for s in streams])
