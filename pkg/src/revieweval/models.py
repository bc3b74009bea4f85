"""Learned imputation models for unobserved outcomes.

Two kinds are provided:

* ``clf-logistic``: multinomial logistic regression on the pair covariates,
  predicting the most probable outcome level.
* ``cf-knn``: neighborhood collaborative filtering on the reviewer x paper
  outcome matrix, ignoring covariates.

Hyperparameters are chosen by k-fold cross-validation on mean absolute error.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .domain import BID_VOCABULARIES, DEFAULT_BIDS, OutcomeScale, PairTable, Venue
from .errors import ValidationError
from .similarity import bid_value

logger = logging.getLogger(__name__)

KINDS = ("clf-logistic", "cf-knn")
PENALTY_GRID = (0.01, 0.1, 1.0, 10.0)
NEIGHBOR_GRID = (1, 3, 5, 10, 20)
GRAD_TOL = 1e-6
MAX_ITER = 10_000


@dataclass(frozen=True)
class Observations:
    """Pairs with covariates, grid position and (for training) an outcome.

    ``bid`` holds raw labels (None for missing); ``rows``/``cols`` index the
    reviewer x paper grid.
    """

    text: np.ndarray
    subject: np.ndarray
    bid: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    y: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.rows)

    def subset(self, idx) -> "Observations":
        idx = np.asarray(idx)
        return Observations(
            self.text[idx], self.subject[idx], self.bid[idx], self.rows[idx], self.cols[idx],
            None if self.y is None else self.y[idx],
        )

    @classmethod
    def from_mask(cls, table: PairTable, mask: np.ndarray, outcomes: Optional[np.ndarray] = None) -> "Observations":
        rows, cols = np.nonzero(mask)
        y = None if outcomes is None else np.asarray(outcomes, dtype=float)[rows, cols]
        return cls(
            np.asarray(table.text, dtype=float)[rows, cols],
            np.asarray(table.subject, dtype=float)[rows, cols],
            np.asarray(table.bids, dtype=object)[rows, cols],
            rows, cols, y,
        )


# ---------------------------------------------------------------------------
# preprocessing


@dataclass(frozen=True)
class Preprocessing:
    """Feature construction record: bid encoding, standardization and fill values."""

    bid_encoding: str = "numeric"
    standardize: bool = True
    scheme: str = "aaai"
    lambda_bid: float = 1.0
    use_text: bool = True
    use_subject: bool = True
    fill: tuple = ()
    center: tuple = ()
    scale: tuple = ()

    def __post_init__(self):
        if self.bid_encoding not in ("numeric", "onehot", "none"):
            raise ValidationError(f"unknown bid encoding {self.bid_encoding!r}")

    def raw(self, obs: Observations) -> tuple:
        """Raw feature matrix (with NaN for missing numeric values) and missingness indicators."""
        cols, names = [], []
        if self.use_text:
            cols.append(obs.text)
            names.append("text")
        if self.use_subject:
            cols.append(obs.subject)
            names.append("subject")
        if self.bid_encoding == "numeric":
            cols.append(np.array([bid_value(b, self.scheme, self.lambda_bid) for b in obs.bid], dtype=float))
            names.append("bid")
        elif self.bid_encoding == "onehot":
            default = DEFAULT_BIDS[self.scheme]
            labels = [default if b is None else b for b in obs.bid]
            for level in BID_VOCABULARIES[self.scheme]:
                cols.append(np.array([lab == level for lab in labels], dtype=float))
                names.append(f"bid={level}")
        X = np.column_stack(cols) if cols else np.zeros((len(obs), 0))
        return X, names

    def fitted(self, obs: Observations) -> "Preprocessing":
        X, _ = self.raw(obs)
        fill = np.array([np.nanmean(c) if np.any(~np.isnan(c)) else 0.0 for c in X.T])
        Xf = np.where(np.isnan(X), fill, X)
        if self.standardize and Xf.shape[0] > 0:
            center = Xf.mean(axis=0)
            scale = Xf.std(axis=0)
            scale[scale == 0] = 1.0
        else:
            center, scale = np.zeros(X.shape[1]), np.ones(X.shape[1])
        return Preprocessing(
            self.bid_encoding, self.standardize, self.scheme, self.lambda_bid, self.use_text, self.use_subject,
            tuple(fill.tolist()), tuple(center.tolist()), tuple(scale.tolist()),
        )

    def transform(self, obs: Observations) -> np.ndarray:
        """Design matrix with missing values mean-filled, a missingness flag per numeric column, and a bias column."""
        X, _ = self.raw(obs)
        miss = np.isnan(X)
        X = np.where(miss, np.asarray(self.fill), X)
        X = (X - np.asarray(self.center)) / np.asarray(self.scale)
        flags = miss[:, : (int(self.use_text) + int(self.use_subject))].astype(float)
        return np.column_stack([X, flags, np.ones(len(obs))])

    def to_dict(self) -> dict:
        return {
            "bid_encoding": self.bid_encoding,
            "standardize": self.standardize,
            "scheme": self.scheme,
            "lambda_bid": self.lambda_bid,
            "use_text": self.use_text,
            "use_subject": self.use_subject,
            "fill": list(self.fill),
            "center": list(self.center),
            "scale": list(self.scale),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Preprocessing":
        return cls(**{**doc, "fill": tuple(doc["fill"]), "center": tuple(doc["center"]), "scale": tuple(doc["scale"])})


# ---------------------------------------------------------------------------
# multinomial logistic regression


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def fit_logistic(X: np.ndarray, labels: np.ndarray, n_classes: int, penalty: float, tol: float = GRAD_TOL, max_iter: int = MAX_ITER) -> tuple:
    """Multinomial logistic regression by Nesterov-accelerated batch gradient descent.

    Minimizes mean cross-entropy plus ``penalty / (2n)`` times the squared
    norm of the non-bias weights (the last column of ``X`` is the bias).
    Stops when the gradient norm drops below ``tol`` or after ``max_iter``
    iterations. Returns ``(W, iterations, grad_norm)``.
    """
    n, d = X.shape
    Y = np.zeros((n, n_classes))
    Y[np.arange(n), labels] = 1.0
    reg = np.ones((d, 1))
    reg[-1] = 0.0
    lip = 0.5 * np.linalg.norm(X, 2) ** 2 / n + penalty / n
    step = 1.0 / lip

    def grad(W):
        return X.T @ (_softmax(X @ W) - Y) / n + (penalty / n) * reg * W

    W = np.zeros((d, n_classes))
    V = W.copy()
    t = 1.0
    g_norm = math.inf
    it = 0
    for it in range(1, max_iter + 1):
        g = grad(V)
        W_next = V - step * g
        t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        V = W_next + ((t - 1.0) / t_next) * (W_next - W)
        # restart momentum when it points uphill
        if np.sum(g * (W_next - W)) > 0:
            V = W_next.copy()
            t_next = 1.0
        W, t = W_next, t_next
        g_norm = float(np.linalg.norm(grad(W)))
        if g_norm < tol:
            break
    return W, it, g_norm


# ---------------------------------------------------------------------------
# neighborhood collaborative filtering


def _cosine(a: np.ndarray, b: np.ndarray, mask_a: np.ndarray, mask_b: np.ndarray) -> np.ndarray:
    """Cosine similarity of vector ``a`` against each row of ``b`` over co-rated entries."""
    common = mask_a[None, :] & mask_b
    num = (np.where(common, a[None, :] * b, 0.0)).sum(axis=1)
    na = np.sqrt(np.where(common, a[None, :] ** 2, 0.0).sum(axis=1))
    nb = np.sqrt(np.where(common, b**2, 0.0).sum(axis=1))
    with np.errstate(invalid="ignore", divide="ignore"):
        sim = np.where((na > 0) & (nb > 0), num / (na * nb), 0.0)
    return sim


def _neighbor_vote(values: np.ndarray, sims: np.ndarray, order_key: np.ndarray, k: int) -> float:
    order = np.lexsort((order_key, -sims))[:k]
    s = sims[order]
    v = values[order]
    pos = s > 0
    if pos.any():
        return float((s[pos] * v[pos]).sum() / s[pos].sum())
    return float(v.mean())


def knn_predict(ratings: np.ndarray, rows: np.ndarray, cols: np.ndarray, k: int, fallback: float) -> tuple:
    """Predict entries of a partially observed matrix from nearest neighbors.

    Item-based first: the target reviewer's own ratings on the ``k`` papers
    most similar to the target paper (cosine over co-rating reviewers),
    similarity-weighted, or plainly averaged when no similarity is positive.
    A reviewer with no ratings falls back to the user-based rule on the
    target paper's column. With neither, ``fallback`` is returned and the
    pair is flagged as cold start.
    """
    rated = ~np.isnan(ratings)
    filled = np.nan_to_num(ratings)
    out = np.empty(len(rows))
    cold = np.zeros(len(rows), dtype=bool)
    for n, (r, p) in enumerate(zip(rows, cols)):
        own = np.flatnonzero(rated[r])
        if own.size:
            sims = _cosine(filled[:, p], filled[:, own].T, rated[:, p], rated[:, own].T)
            out[n] = _neighbor_vote(ratings[r, own], sims, own, k)
            continue
        others = np.flatnonzero(rated[:, p])
        if others.size:
            sims = _cosine(filled[r], filled[others], rated[r], rated[others])
            out[n] = _neighbor_vote(ratings[others, p], sims, others, k)
            continue
        out[n] = fallback
        cold[n] = True
    return out, cold


# ---------------------------------------------------------------------------
# trained imputer


@dataclass
class TrainedImputer:
    """A fitted imputation model plus the record needed to reproduce it."""

    kind: str
    params: dict
    preprocessing: Optional[Preprocessing]
    classes: tuple
    scale: OutcomeScale
    cv: dict = field(default_factory=dict)
    seed: int = 0

    def predict(self, obs: Observations) -> tuple:
        """Clamped predictions and a cold-start flag per target."""
        if self.kind == "constant":
            values = np.full(len(obs), float(self.params["value"]))
            cold = np.zeros(len(obs), dtype=bool)
        elif self.kind == "clf-logistic":
            W = np.asarray(self.params["weights"], dtype=float)
            X = self.preprocessing.transform(obs)
            values = np.asarray(self.classes)[np.argmax(X @ W, axis=1)]
            cold = np.zeros(len(obs), dtype=bool)
        elif self.kind == "cf-knn":
            shape = tuple(self.params["grid_shape"])
            ratings = np.full(shape, np.nan)
            for r, c, v in self.params["ratings"]:
                ratings[int(r), int(c)] = v
            values, cold = knn_predict(ratings, obs.rows, obs.cols, int(self.params["k"]), float(self.params["fallback"]))
        else:
            raise ValidationError(f"unknown imputer kind {self.kind!r}")
        return np.clip(values, self.scale.y_min, self.scale.y_max), cold

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "params": self.params,
            "preprocessing": None if self.preprocessing is None else self.preprocessing.to_dict(),
            "classes": list(self.classes),
            "scale": {"min": self.scale.y_min, "max": self.scale.y_max},
            "cv": self.cv,
            "seed": self.seed,
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=1), encoding="utf-8")
        return path

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainedImputer":
        pre = doc.get("preprocessing")
        return cls(
            kind=doc["kind"],
            params=doc["params"],
            preprocessing=None if pre is None else Preprocessing.from_dict(pre),
            classes=tuple(doc["classes"]),
            scale=OutcomeScale(doc["scale"]["min"], doc["scale"]["max"]),
            cv=doc.get("cv", {}),
            seed=int(doc.get("seed", 0)),
        )

    @classmethod
    def load(cls, path) -> "TrainedImputer":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _fit_once(kind: str, train: Observations, hyper, scale: OutcomeScale, preprocessing: Preprocessing, shape: tuple) -> TrainedImputer:
    classes = tuple(np.unique(train.y).tolist())
    if kind == "clf-logistic":
        pre = preprocessing.fitted(train)
        X = pre.transform(train)
        labels = np.searchsorted(np.asarray(classes), train.y)
        W, iters, g = fit_logistic(X, labels, len(classes), float(hyper))
        params = {"penalty": float(hyper), "weights": W.tolist(), "iterations": iters, "grad_norm": g}
        return TrainedImputer(kind, params, pre, classes, scale)
    if kind == "cf-knn":
        ratings = [[int(r), int(c), float(v)] for r, c, v in zip(train.rows, train.cols, train.y)]
        params = {"k": int(hyper), "ratings": ratings, "grid_shape": list(shape), "fallback": float(np.mean(train.y))}
        return TrainedImputer(kind, params, None, classes, scale)
    raise ValidationError(f"unknown imputer kind {kind!r}; choose from {KINDS}")


def _folds(n: int, folds: int, rng: np.random.Generator) -> list:
    perm = rng.permutation(n)
    return [perm[i::folds] for i in range(folds)]


def fit_imputer(
    kind: str,
    data: Observations,
    scale: OutcomeScale,
    grid: Optional[Sequence] = None,
    folds: int = 10,
    seed: int = 0,
    preprocessing: Optional[Preprocessing] = None,
    grid_shape: Optional[tuple] = None,
) -> TrainedImputer:
    """Select hyperparameters by k-fold CV on MAE, then refit on all data.

    Grid defaults: L2 penalties {0.01, 0.1, 1, 10} for ``clf-logistic`` and
    neighbor counts {1, 3, 5, 10, 20} for ``cf-knn``. Ties in CV MAE go to
    the most regularizing value (largest penalty, largest neighbor count).
    A single observed outcome level yields a constant predictor.
    """
    if kind not in KINDS:
        raise ValidationError(f"unknown imputer kind {kind!r}; choose from {KINDS}")
    if data.y is None:
        raise ValidationError("training observations need outcomes")
    n = len(data)
    if n < folds:
        raise ValidationError(f"need at least {folds} observed pairs for {folds}-fold cross-validation, got {n}")
    preprocessing = preprocessing or Preprocessing()
    shape = grid_shape or (int(data.rows.max()) + 1, int(data.cols.max()) + 1)
    classes = np.unique(data.y)
    if classes.size == 1:
        logger.warning("all observed outcomes equal %g; using a constant predictor", classes[0])
        return TrainedImputer(
            "constant", {"value": float(classes[0]), "requested": kind}, None, (float(classes[0]),), scale,
            cv={"mae": {"constant": 0.0}, "baseline_mae": 0.0, "selected": None, "note": "single outcome level"}, seed=seed,
        )
    grid = list(grid if grid is not None else (PENALTY_GRID if kind == "clf-logistic" else NEIGHBOR_GRID))
    rng = np.random.default_rng(seed)
    parts = _folds(n, folds, rng)
    mae = {}
    baseline = []
    for h in grid:
        errs = []
        for f, test_idx in enumerate(parts):
            train_idx = np.concatenate([p for g, p in enumerate(parts) if g != f])
            model = _fit_once(kind, data.subset(train_idx), h, scale, preprocessing, shape)
            pred, _ = model.predict(data.subset(test_idx))
            errs.append(np.abs(pred - data.y[test_idx]))
            if h == grid[0]:
                baseline.append(np.abs(np.mean(data.y[train_idx]) - data.y[test_idx]))
        mae[h] = float(np.mean(np.concatenate(errs)))
    best = min(mae.values())
    tied = [h for h in grid if abs(mae[h] - best) <= 1e-12]
    chosen = max(tied)
    model = _fit_once(kind, data, chosen, scale, preprocessing, shape)
    model.cv = {
        "folds": folds,
        "mae": {str(h): v for h, v in mae.items()},
        "baseline_mae": float(np.mean(np.concatenate(baseline))),
        "selected": chosen,
        "tie_rule": "largest value among grid points with minimal MAE",
    }
    model.seed = seed
    return model


def impute_with_model(model: TrainedImputer, targets: Observations) -> tuple:
    """Predicted outcome per target pair (clamped to the scale) and cold-start flags."""
    return model.predict(targets)


# ---------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class MAERow:
    model: str
    mean: float
    lower: float
    upper: float
    per_repeat: tuple


def evaluate_imputers(
    data: Observations,
    scale: OutcomeScale,
    kinds: Sequence[str] = KINDS,
    split: float = 0.75,
    repeats: int = 10,
    seed: int = 0,
    folds: int = 10,
    preprocessing: Optional[Preprocessing] = None,
    grid_shape: Optional[tuple] = None,
) -> list:
    """Repeated train/test evaluation with a mean-prediction baseline row.

    Each repeat splits the data at random, fits every model kind (with
    inner cross-validation) on the training part and records test MAE.
    Bands are mean +/- 1.96 standard errors across repeats.
    """
    if not 0 < split < 1:
        raise ValidationError("split fraction must lie in (0, 1)")
    n = len(data)
    n_train = int(round(split * n))
    if n_train < 2 or n - n_train < 1:
        raise ValidationError("not enough observations for a train/test split")
    shape = grid_shape or (int(data.rows.max()) + 1, int(data.cols.max()) + 1)
    rng = np.random.default_rng(seed)
    results = {k: [] for k in kinds}
    results["mean-baseline"] = []
    for rep in range(repeats):
        perm = rng.permutation(n)
        train, test = data.subset(perm[:n_train]), data.subset(perm[n_train:])
        results["mean-baseline"].append(float(np.mean(np.abs(np.mean(train.y) - test.y))))
        for kind in kinds:
            model = fit_imputer(kind, train, scale, folds=min(folds, len(train)), seed=seed + rep, preprocessing=preprocessing, grid_shape=shape)
            pred, _ = model.predict(test)
            results[kind].append(float(np.mean(np.abs(pred - test.y))))
    rows = []
    for name in list(kinds) + ["mean-baseline"]:
        vals = np.asarray(results[name])
        m = float(vals.mean())
        half = 1.96 * float(vals.std(ddof=1)) / math.sqrt(len(vals)) if len(vals) > 1 else 0.0
        rows.append(MAERow(name, m, m - half, m + half, tuple(vals.tolist())))
    return rows


def model_plan_values(model: TrainedImputer, venue: Venue, table: PairTable, mask: np.ndarray, fallback: Optional[float] = None) -> tuple:
    """Grid of model predictions on ``mask`` (NaN elsewhere) and the cold-start grid.

    ``fallback`` (typically the weighted observed mean) replaces the
    predictions of cold-start pairs when given.
    """
    targets = Observations.from_mask(table, mask)
    values, cold = impute_with_model(model, targets)
    if fallback is not None:
        values = np.where(cold, fallback, values)
    grid = np.full(venue.shape, np.nan)
    flags = np.zeros(venue.shape, dtype=bool)
    grid[targets.rows, targets.cols] = values
    flags[targets.rows, targets.cols] = cold
    return grid, flags
