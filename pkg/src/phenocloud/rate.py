"""Canopy-architecture rating models from plant traits.

Two models predict a 1-10 rating per plant: ordinary least squares with
bidirectional stepwise feature selection driven by coefficient p-values,
and k-nearest-neighbour regression whose features and k are picked greedily
by cross-validated mean squared error.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import stats
from scipy.linalg import solve_triangular

from .errors import EmptyModel, FoldError, InvalidArgument, RankDeficient, SchemaError

log = logging.getLogger(__name__)

P_THRESHOLD = 0.05
DEFAULT_K_GRID = tuple(range(1, 16))
DEFAULT_FOLDS = 4
TIE_RTOL = 1e-9  # relative tolerance when comparing RSS / CV errors


@dataclass
class FeatureMatrix:
    names: list
    X: np.ndarray
    y: np.ndarray
    ids: list = field(default_factory=list)
    groups: list = field(default_factory=list)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64).reshape(len(self.y), -1)
        self.y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        self.names = list(self.names)
        if len(set(self.names)) != len(self.names):
            raise SchemaError("feature names must be unique")
        if self.X.shape[1] != len(self.names):
            raise SchemaError(f"{self.X.shape[1]} columns but {len(self.names)} names")
        if not self.ids:
            self.ids = [str(i) for i in range(len(self.y))]

    def __len__(self) -> int:
        return len(self.y)

    def columns(self, names: Sequence[str]) -> np.ndarray:
        missing = [n for n in names if n not in self.names]
        if missing:
            raise SchemaError(f"missing feature columns: {', '.join(missing)}")
        idx = [self.names.index(n) for n in names]
        cols = self.X[:, idx]
        if np.isnan(cols).any():
            raise SchemaError("selected feature columns contain missing values")
        return cols

    def rows(self, index) -> "FeatureMatrix":
        index = np.asarray(index)
        pick = lambda seq: [seq[i] for i in index] if seq else []
        return FeatureMatrix(self.names, self.X[index], self.y[index], pick(self.ids), pick(self.groups))


# ordinary least squares

@dataclass(frozen=True)
class OlsFit:
    coefficients: np.ndarray  # intercept first
    p_values: np.ndarray  # intercept first
    std_errors: np.ndarray
    rss: float
    dof: int


def ols_fit(X, y) -> OlsFit:
    """Least squares with an intercept, solved by QR, with two-sided t-test p-values.

    Raises:
        RankDeficient: the design matrix (with intercept) is not full rank or
            leaves no residual degrees of freedom.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if X.ndim == 1:
        X = X[:, None]
    n, p = X.shape
    dof = n - p - 1
    if dof < 1:
        raise RankDeficient(f"{n} rows cannot support {p} features plus intercept")
    design = np.column_stack([np.ones(n), X])
    q, r = np.linalg.qr(design)
    diag = np.abs(np.diag(r))
    if diag.min() <= 1e-10 * max(diag.max(), 1.0) * max(n, 1):
        raise RankDeficient("design matrix is rank deficient")
    coef = solve_triangular(r, q.T @ y)
    resid = y - design @ coef
    rss = float(resid @ resid)
    sigma2 = rss / dof
    r_inv = solve_triangular(r, np.eye(p + 1))
    se = np.sqrt(sigma2 * np.einsum("ij,ij->i", r_inv, r_inv))
    with np.errstate(divide="ignore", invalid="ignore"):
        t = coef / se
    p_values = 2.0 * stats.t.sf(np.abs(t), dof)
    # exact fits: a coefficient with a visible effect is certain, one at round-off level carries no evidence
    scale = max(float(np.abs(y).max()), 1e-300)
    if rss <= (1e-10 * scale) ** 2 * n:
        se = np.zeros_like(se)
        effect = np.abs(coef[1:]) * np.ptp(X, axis=0)
        p_values = np.concatenate([[0.0], np.where(effect > 1e-9 * scale, 0.0, 1.0)])
    return OlsFit(coef, p_values, se, rss, dof)


@dataclass
class OlsModel:
    features: list
    coefficients: np.ndarray  # intercept first
    p_values: np.ndarray
    rss: float
    history: list = field(default_factory=list)  # (action, feature, rss)
    kind: str = "mlr"

    def predict(self, data: FeatureMatrix) -> np.ndarray:
        X = data.columns(self.features)
        return self.coefficients[0] + X @ self.coefficients[1:]

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "features": list(self.features),
            "coefficients": [float(c) for c in self.coefficients],
            "p_values": [float(p) for p in self.p_values],
            "rss": self.rss,
            "history": [list(h) for h in self.history],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OlsModel":
        return cls(list(d["features"]), np.array(d["coefficients"], float), np.array(d["p_values"], float),
                   float(d["rss"]), [tuple(h) for h in d.get("history", [])])


def _close(a: float, b: float) -> bool:
    if not (np.isfinite(a) and np.isfinite(b)):
        return a == b
    return abs(a - b) <= TIE_RTOL * max(abs(a), abs(b), 1e-300)


def stepwise_mlr(train: FeatureMatrix, p_threshold: float = P_THRESHOLD) -> OlsModel:
    """Bidirectional stepwise OLS.

    Each round adds the candidate that lowers the training RSS the most
    (column order breaks ties; rank-deficient candidates are skipped), then
    drops every feature whose p-value exceeds ``p_threshold``. The search
    stops when the added feature is itself dropped right away, when no
    candidate remains, or when a selection repeats.

    Raises:
        EmptyModel: no feature survives.
    """
    if len(train.names) < 2:
        raise InvalidArgument("stepwise selection needs at least 2 candidate features")
    if len(train) == 0:
        raise InvalidArgument("training set is empty")
    selected: list = []
    history = []
    seen = {()}
    while True:
        best = None
        for name in train.names:
            if name in selected:
                continue
            try:
                fit = ols_fit(train.columns(selected + [name]), train.y)
            except RankDeficient:
                continue
            if best is None or (fit.rss < best[1].rss and not _close(fit.rss, best[1].rss)):
                best = (name, fit)
        if best is None:
            break
        name, fit = best
        trial = selected + [name]
        history.append(("add", name, fit.rss))
        drop = [f for f, p in zip(trial, fit.p_values[1:]) if p > p_threshold]
        if name in drop:
            history.append(("reject", name, fit.rss))
            break
        for f in drop:
            trial.remove(f)
        if drop:
            rss = ols_fit(train.columns(trial), train.y).rss if trial else float(np.sum((train.y - train.y.mean()) ** 2))
            for f in drop:
                history.append(("remove", f, rss))
        key = tuple(sorted(trial))
        if key in seen:
            break
        seen.add(key)
        selected = trial
    if not selected:
        raise EmptyModel(intercept_only(train))
    # removals can leave other p-values above the threshold; prune to a stable set
    while True:
        fit = ols_fit(train.columns(selected), train.y)
        worst = int(np.argmax(fit.p_values[1:]))
        if fit.p_values[1 + worst] <= p_threshold:
            break
        history.append(("remove", selected[worst], fit.rss))
        selected.pop(worst)
        if not selected:
            raise EmptyModel(intercept_only(train))
    return OlsModel(selected, fit.coefficients, fit.p_values, fit.rss, history)


def intercept_only(train: FeatureMatrix) -> OlsModel:
    """Constant model predicting the training mean."""
    y = train.y
    return OlsModel([], np.array([y.mean()]), np.array([np.nan]), float(np.sum((y - y.mean()) ** 2)))


# k nearest neighbours

def fold_assignment(n: int, folds: int = DEFAULT_FOLDS, seed: int = 0) -> np.ndarray:
    """Fold id per row: seeded shuffle, then round-robin."""
    if folds < 2:
        raise FoldError("need at least 2 folds")
    if n < folds:
        raise FoldError(f"{n} rows cannot fill {folds} folds")
    out = np.empty(n, dtype=np.int64)
    out[np.random.default_rng(seed).permutation(n)] = np.arange(n) % folds
    return out


def _standardize(train_x: np.ndarray):
    mean = train_x.mean(axis=0)
    std = train_x.std(axis=0)
    return mean, np.where(std > 0, std, 1.0)


def knn_predict_raw(train_z: np.ndarray, train_y: np.ndarray, query_z: np.ndarray, k: int) -> np.ndarray:
    """Mean target of the k nearest training rows; lower row index wins distance ties."""
    if k < 1 or k > len(train_z):
        raise InvalidArgument(f"k={k} outside 1..{len(train_z)}")
    d = np.sqrt(((query_z[:, None, :] - train_z[None, :, :]) ** 2).sum(axis=2))
    order = np.argsort(d, axis=1, kind="stable")[:, :k]
    return train_y[order].mean(axis=1)


def cv_mse(X: np.ndarray, y: np.ndarray, k: int, fold: np.ndarray) -> float:
    """Mean over folds of the validation MSE, standardizing by each fold's training rows."""
    errs = []
    for f in range(fold.max() + 1):
        tr, va = fold != f, fold == f
        mean, std = _standardize(X[tr])
        pred = knn_predict_raw((X[tr] - mean) / std, y[tr], (X[va] - mean) / std, k)
        errs.append(np.mean((pred - y[va]) ** 2))
    return float(np.mean(errs))


@dataclass
class KnnModel:
    k: int
    features: list
    mean: np.ndarray
    std: np.ndarray
    train_x: np.ndarray  # raw selected columns
    train_y: np.ndarray
    cv_mse: float = float("nan")
    seed: int = 0
    folds: int = DEFAULT_FOLDS
    history: list = field(default_factory=list)  # (feature, k, cv mse)
    kind: str = "knn"

    def __post_init__(self):
        if self.k < 1:
            raise InvalidArgument("k must be >= 1")
        if np.any(np.asarray(self.std) <= 0):
            raise InvalidArgument("standard deviations must be > 0")

    def predict(self, data: FeatureMatrix) -> np.ndarray:
        X = data.columns(self.features)
        z_train = (self.train_x - self.mean) / self.std
        return knn_predict_raw(z_train, self.train_y, (X - self.mean) / self.std, self.k)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "k": self.k,
            "features": list(self.features),
            "mean": [float(v) for v in self.mean],
            "std": [float(v) for v in self.std],
            "train_x": [[float(v) for v in row] for row in self.train_x],
            "train_y": [float(v) for v in self.train_y],
            "cv_mse": self.cv_mse,
            "seed": self.seed,
            "folds": self.folds,
            "history": [list(h) for h in self.history],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KnnModel":
        nf = len(d["features"])
        return cls(int(d["k"]), list(d["features"]), np.array(d["mean"], float), np.array(d["std"], float),
                   np.array(d["train_x"], float).reshape(-1, nf), np.array(d["train_y"], float),
                   float(d.get("cv_mse", "nan")), int(d.get("seed", 0)), int(d.get("folds", DEFAULT_FOLDS)),
                   [tuple(h) for h in d.get("history", [])])


def knn_fit_select(train: FeatureMatrix, k_grid: Sequence[int] = DEFAULT_K_GRID, folds: int = DEFAULT_FOLDS,
                   seed: int = 0) -> KnnModel:
    """Greedy forward feature selection for k-NN by cross-validated MSE.

    Every step tries each unused feature with each k of the grid and keeps
    the pair with the lowest mean CV MSE (column order, then smaller k,
    breaks ties). Selection stops when the best addition does not improve
    the previous CV MSE. Constant features are skipped.
    """
    fold = fold_assignment(len(train), folds, seed)
    min_train = min(int(np.sum(fold != f)) for f in range(folds))
    grid = sorted({int(k) for k in k_grid if 1 <= int(k) <= min_train})
    if not grid:
        raise FoldError("no k of the grid fits inside the fold training sets")
    usable = []
    for j, name in enumerate(train.names):
        col = train.X[:, j]
        if np.isnan(col).any():
            log.warning("feature %s has missing values; skipped", name)
        elif np.ptp(col) == 0:
            log.warning("feature %s is constant; skipped", name)
        else:
            usable.append(name)
    if not usable:
        raise EmptyModel()
    selected: list = []
    best_k, best_mse = None, np.inf
    history = []
    while True:
        step = None
        for name in usable:
            if name in selected:
                continue
            X = train.columns(selected + [name])
            for k in grid:
                mse = cv_mse(X, train.y, k, fold)
                if step is None or (mse < step[2] and not _close(mse, step[2])):
                    step = (name, k, mse)
        if step is None or not (step[2] < best_mse and not _close(step[2], best_mse)):
            break
        selected.append(step[0])
        best_k, best_mse = step[1], step[2]
        history.append(step)
    X = train.columns(selected)
    mean, std = _standardize(X)
    return KnnModel(best_k, selected, mean, std, X, train.y.copy(), best_mse, seed, folds, history)


# evaluation and data handling

@dataclass(frozen=True)
class Scores:
    r2: float  # NaN when y has zero variance
    mae: float

    @property
    def r2_defined(self) -> bool:
        return not np.isnan(self.r2)


def evaluate(y_hat, y) -> Scores:
    """Coefficient of determination and mean absolute error of predictions ``y_hat``."""
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y_hat.shape != y.shape or len(y) < 2:
        raise InvalidArgument("need equal-length arrays of at least 2 values")
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    ss_res = float(np.sum((y - y_hat) ** 2))
    if ss_tot == 0:
        log.warning("R^2 undefined: targets have zero variance")
        r2 = float("nan")
    else:
        r2 = 1.0 - ss_res / ss_tot
    return Scores(r2, float(np.mean(np.abs(y_hat - y))))


def stratified_split(groups: Sequence, n_train: int = 8, n_test: int = 2, seed: int = 0):
    """Per-group seeded split into train and test row indices.

    Each group contributes ``n_train`` training rows and ``n_test`` test rows.

    Returns:
        (sorted train indices, sorted test indices)
    """
    rng = np.random.default_rng(seed)
    groups = list(groups)
    train, test = [], []
    for g in sorted(set(groups), key=str):
        rows = np.array([i for i, v in enumerate(groups) if v == g])
        if len(rows) < n_train + n_test:
            raise InvalidArgument(f"group {g!r} has {len(rows)} rows, needs {n_train + n_test}")
        rows = rows[rng.permutation(len(rows))]
        train.extend(rows[:n_train].tolist())
        test.extend(rows[n_train:n_train + n_test].tolist())
    return np.array(sorted(train), dtype=np.int64), np.array(sorted(test), dtype=np.int64)


def read_ratings(path) -> dict:
    """plant_id -> (rating, genotype) from a CSV with columns plant_id, rating[, genotype]."""
    out = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        if "plant_id" not in cols or "rating" not in cols:
            raise SchemaError(f"{path}: ratings need 'plant_id' and 'rating' columns")
        for row in reader:
            out[row["plant_id"]] = (float(row["rating"]), row.get("genotype") or "")
    return out


def join_ratings(ids: list, names: list, X: np.ndarray, ratings: dict) -> FeatureMatrix:
    """FeatureMatrix of the plants that have a rating, in feature-file order."""
    keep = [i for i, pid in enumerate(ids) if pid in ratings]
    missing = sorted(set(ratings) - set(ids))
    if missing:
        log.warning("%d rated plants have no features", len(missing))
    if not keep:
        raise SchemaError("no plant has both features and a rating")
    y = [ratings[ids[i]][0] for i in keep]
    groups = [ratings[ids[i]][1] for i in keep]
    return FeatureMatrix(names, X[keep], y, [ids[i] for i in keep], groups)


def save_model(model, path, extra: Optional[dict] = None) -> None:
    data = model.to_dict()
    if extra:
        data.update(extra)
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_model(path):
    with open(path) as fh:
        data = json.load(fh)
    kind = data.get("kind")
    if kind == "mlr":
        return OlsModel.from_dict(data)
    if kind == "knn":
        return KnnModel.from_dict(data)
    raise SchemaError(f"{path}: unknown model kind {kind!r}")
