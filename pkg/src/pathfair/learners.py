"""Supervised learners used for every nuisance fit.

Two interfaces: a regressor exposing ``predict`` and a binary classifier
exposing ``predict_proba`` (probability of label 1).  Implementations:

``ridge`` / ``logistic``
    Linear family.  Ridge solves the penalized normal equations; logistic
    regression runs iteratively reweighted least squares (Newton) with step
    halving.  Features are standardized and the intercept is never penalized.
``stumps``
    Histogram gradient boosting of shallow trees with an L2 leaf penalty
    (squared loss for regression, logistic loss for classification).
``frequency``
    Cell means over the distinct feature rows.  Exact when features are
    discrete and every query cell was seen in training.

``fit_regressor`` with kind ``logistic`` falls back to ridge and
``fit_classifier`` with kind ``ridge`` falls back to logistic, so one name
selects the linear family for both roles.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import Protocol

import numpy as np
from scipy.special import expit

KINDS = ("ridge", "logistic", "stumps", "frequency")


class LearnerError(ValueError):
    pass


class RankError(LearnerError, np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class LearnerConfig:
    kind: str = "ridge"
    l2: float = 1.0
    max_iter: int = 100
    tol: float = 1e-8
    depth: int = 3
    n_trees: int = 50
    learning_rate: float = 0.1
    max_bins: int = 32
    min_child_weight: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise LearnerError(f"unknown learner kind {self.kind!r}; expected one of {KINDS}")
        if self.l2 < 0:
            raise LearnerError("l2 must be non-negative")
        if self.max_iter < 1 or self.tol <= 0:
            raise LearnerError("max_iter and tol must be positive")
        if self.depth < 1 or self.n_trees < 0 or not 0 < self.learning_rate <= 1:
            raise LearnerError("depth >= 1, n_trees >= 0 and learning_rate in (0, 1] required")
        if self.max_bins < 2:
            raise LearnerError("max_bins must be at least 2")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LearnerConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise LearnerError(f"unknown learner fields: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class LearnerSet:
    """Learner configs for outcome regressions and propensity classifiers."""

    regressor: LearnerConfig
    classifier: LearnerConfig

    @classmethod
    def named(cls, name: str, **overrides) -> "LearnerSet":
        if name in ("ridge", "logistic", "linear"):
            return cls(LearnerConfig("ridge", **overrides), LearnerConfig("logistic", **overrides))
        if name == "stumps":
            return cls(LearnerConfig("stumps", **overrides), LearnerConfig("stumps", **overrides))
        if name == "frequency":
            return cls(LearnerConfig("frequency", **overrides), LearnerConfig("frequency", **overrides))
        raise LearnerError(f"unknown learner name {name!r}")

    def to_dict(self) -> dict:
        return {"regressor": self.regressor.to_dict(), "classifier": self.classifier.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "LearnerSet":
        return cls(LearnerConfig.from_dict(d["regressor"]), LearnerConfig.from_dict(d["classifier"]))


def as_learner_set(spec) -> LearnerSet:
    if isinstance(spec, LearnerSet):
        return spec
    if isinstance(spec, LearnerConfig):
        return LearnerSet(spec, spec)
    if isinstance(spec, str):
        return LearnerSet.named(spec)
    if isinstance(spec, dict):
        return LearnerSet.from_dict(spec)
    raise LearnerError(f"cannot interpret {spec!r} as learner configuration")


class Regressor(Protocol):
    def predict(self, features: np.ndarray) -> np.ndarray: ...


class ProbClassifier(Protocol):
    def predict_proba(self, features: np.ndarray) -> np.ndarray: ...


# ---------------------------------------------------------------------------
# helpers


def _as_features(features) -> np.ndarray:
    a = np.asarray(features, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if not np.all(np.isfinite(a)):
        raise LearnerError("features contain non-finite entries")
    return a


def _norm_weights(weights, n: int) -> np.ndarray:
    if weights is None:
        return np.ones(n)
    w = np.asarray(weights, float).reshape(-1)
    if len(w) != n or np.any(w < 0) or w.sum() <= 0:
        raise LearnerError("weights must be non-negative with positive total")
    return w * (n / w.sum())


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, features: np.ndarray, weights: np.ndarray) -> "Standardizer":
        tot = weights.sum()
        mean = weights @ features / tot
        var = weights @ (features - mean) ** 2 / tot
        scale = np.sqrt(var)
        scale[~(scale > 1e-12 * np.maximum(1.0, np.abs(mean)))] = 1.0
        return cls(mean, scale)

    def transform(self, features: np.ndarray) -> np.ndarray:
        return (features - self.mean) / self.scale


def _design(z: np.ndarray) -> np.ndarray:
    return np.column_stack([np.ones(len(z)), z])


# ---------------------------------------------------------------------------
# linear family


class RidgeRegressor:
    def __init__(self, l2: float = 1.0):
        self.l2 = float(l2)

    def fit(self, features, targets, weights=None) -> "RidgeRegressor":
        X = _as_features(features)
        y = np.asarray(targets, float).reshape(-1)
        if not np.all(np.isfinite(y)):
            raise LearnerError("targets contain non-finite entries")
        w = _norm_weights(weights, len(y))
        self.standardizer_ = Standardizer.fit(X, w)
        A = _design(self.standardizer_.transform(X))
        penalty = np.full(A.shape[1], self.l2)
        penalty[0] = 0.0
        gram = A.T @ (A * w[:, None]) + np.diag(penalty)
        rhs = A.T @ (w * y)
        if self.l2 == 0.0 and np.linalg.matrix_rank(gram) < gram.shape[0]:
            raise RankError("design is rank deficient and l2 = 0; add a penalty")
        beta = np.linalg.solve(gram, rhs)
        self.penalty_ = penalty
        self.beta_ = beta
        self.coef_ = beta[1:] / self.standardizer_.scale
        self.intercept_ = float(beta[0] - self.coef_ @ self.standardizer_.mean)
        return self

    def normal_equation_residual(self, features, targets, weights=None) -> float:
        """Relative residual of the penalized normal equations at the fitted solution."""
        X = _as_features(features)
        y = np.asarray(targets, float)
        w = _norm_weights(weights, len(y))
        A = _design(self.standardizer_.transform(X))
        gram = A.T @ (A * w[:, None]) + np.diag(self.penalty_)
        rhs = A.T @ (w * y)
        return float(np.linalg.norm(gram @ self.beta_ - rhs) / max(np.linalg.norm(rhs), 1e-300))

    def predict(self, features) -> np.ndarray:
        return _as_features(features) @ self.coef_ + self.intercept_


class LogisticIRLS:
    def __init__(self, l2: float = 1.0, max_iter: int = 100, tol: float = 1e-8):
        self.l2 = float(l2)
        self.max_iter = int(max_iter)
        self.tol = float(tol)

    def _objective(self, eta, y, w, beta) -> float:
        # log(1 + exp(eta)) - y * eta, computed stably
        nll = np.logaddexp(0.0, eta) - y * eta
        return float(w @ nll + 0.5 * self.l2 * beta[1:] @ beta[1:])

    def fit(self, features, labels, weights=None) -> "LogisticIRLS":
        X = _as_features(features)
        y = np.asarray(labels, float).reshape(-1)
        _check_labels(y)
        w = _norm_weights(weights, len(y))
        self.standardizer_ = Standardizer.fit(X, w)
        A = _design(self.standardizer_.transform(X))
        penalty = np.full(A.shape[1], self.l2)
        penalty[0] = 0.0
        beta = np.zeros(A.shape[1])
        ybar = np.clip(w @ y / w.sum(), 1e-6, 1 - 1e-6)
        beta[0] = np.log(ybar / (1 - ybar))
        eta = A @ beta
        obj = self._objective(eta, y, w, beta)
        path = [obj]
        self.converged_ = False
        for _ in range(self.max_iter):
            p = expit(eta)
            grad = A.T @ (w * (p - y)) + penalty * beta
            hess = A.T @ (A * (w * p * (1 - p))[:, None]) + np.diag(penalty)
            try:
                step = np.linalg.solve(hess, grad)
            except np.linalg.LinAlgError:
                step = np.linalg.lstsq(hess, grad, rcond=None)[0]
            t = 1.0
            while True:
                cand = beta - t * step
                cand_eta = A @ cand
                cand_obj = self._objective(cand_eta, y, w, cand)
                if cand_obj <= obj or t < 1e-10:
                    break
                t *= 0.5
            if cand_obj > obj:
                break
            beta, eta, prev, obj = cand, cand_eta, obj, cand_obj
            path.append(obj)
            if np.max(np.abs(t * step)) < self.tol or prev - obj <= self.tol * (1.0 + abs(obj)):
                self.converged_ = True
                break
        self.n_iter_ = len(path) - 1
        self.objective_path_ = np.asarray(path)
        self.beta_ = beta
        self.coef_ = beta[1:] / self.standardizer_.scale
        self.intercept_ = float(beta[0] - self.coef_ @ self.standardizer_.mean)
        return self

    def decision_function(self, features) -> np.ndarray:
        return _as_features(features) @ self.coef_ + self.intercept_

    def predict_proba(self, features) -> np.ndarray:
        return expit(self.decision_function(features))


def _check_labels(y: np.ndarray) -> None:
    if not np.all(np.isin(y, (0.0, 1.0))):
        raise LearnerError("classifier labels must be 0/1")
    if y.min() == y.max():
        raise LearnerError("classifier needs both classes present")


# ---------------------------------------------------------------------------
# boosted shallow trees


class _Tree:
    __slots__ = ("feature", "threshold", "left", "right", "value", "depth")

    def predict(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        for _ in range(self.depth):
            f = self.feature[node]
            leaf = f < 0
            if leaf.all():
                break
            go_left = X[rows, np.maximum(f, 0)] < self.threshold[node]
            nxt = np.where(go_left, self.left[node], self.right[node])
            node = np.where(leaf, node, nxt)
        return self.value[node]


def _bin_edges(X: np.ndarray, max_bins: int) -> list[np.ndarray]:
    qs = np.linspace(0, 1, max_bins + 1)[1:-1]
    edges = []
    for j in range(X.shape[1]):
        col = X[:, j]
        uniq = np.unique(col)
        if len(uniq) <= max_bins:
            cuts = 0.5 * (uniq[1:] + uniq[:-1])
        else:
            cuts = np.unique(np.quantile(col, qs))
        edges.append(cuts)
    return edges


class BoostedTrees:
    """Gradient boosting of depth-limited trees on histogram-binned features."""

    def __init__(self, loss: str = "squared", n_trees=50, depth=3, learning_rate=0.1, l2=1.0,
                 max_bins=32, min_child_weight=1.0):
        if loss not in ("squared", "logistic"):
            raise LearnerError(f"unknown loss {loss!r}")
        self.loss = loss
        self.n_trees = int(n_trees)
        self.depth = int(depth)
        self.learning_rate = float(learning_rate)
        self.l2 = float(l2)
        self.max_bins = int(max_bins)
        self.min_child_weight = float(min_child_weight)

    def _grad(self, F, y):
        if self.loss == "squared":
            return F - y, np.ones_like(y)
        p = expit(F)
        return p - y, np.maximum(p * (1 - p), 1e-16)

    def _build(self, bins, edges, g, h) -> _Tree:
        n, d = bins.shape
        nb = self.max_bins
        max_nodes = 2 ** (self.depth + 1) - 1
        tree = _Tree()
        tree.depth = self.depth
        tree.feature = np.full(max_nodes, -1, dtype=np.int64)
        tree.threshold = np.zeros(max_nodes)
        tree.left = np.zeros(max_nodes, dtype=np.int64)
        tree.right = np.zeros(max_nodes, dtype=np.int64)
        tree.value = np.zeros(max_nodes)
        offsets = (np.arange(d) * nb)[None, :]
        frontier = [(0, np.arange(n))]
        next_id = 1
        lam = self.l2
        for _level in range(self.depth + 1):
            new_frontier = []
            for node, idx in frontier:
                G, H = g[idx].sum(), h[idx].sum()
                tree.value[node] = -G / (H + lam) * self.learning_rate
                if _level == self.depth or d == 0 or len(idx) < 2:
                    continue
                codes = (bins[idx] + offsets).ravel()
                gh = np.bincount(codes, weights=np.repeat(g[idx], d), minlength=d * nb).reshape(d, nb)
                hh = np.bincount(codes, weights=np.repeat(h[idx], d), minlength=d * nb).reshape(d, nb)
                GL = np.cumsum(gh, axis=1)[:, :-1]
                HL = np.cumsum(hh, axis=1)[:, :-1]
                GR, HR = G - GL, H - HL
                gain = GL**2 / (HL + lam) + GR**2 / (HR + lam) - G**2 / (H + lam)
                ok = (HL >= self.min_child_weight) & (HR >= self.min_child_weight)
                for j, e in enumerate(edges):
                    ok[j, len(e):] = False
                gain = np.where(ok, gain, -np.inf)
                flat = int(np.argmax(gain))
                j, b = divmod(flat, nb - 1)
                if not np.isfinite(gain[j, b]) or gain[j, b] <= 1e-12:
                    continue
                tree.feature[node] = j
                tree.threshold[node] = edges[j][b]
                go_left = bins[idx, j] <= b
                tree.left[node], tree.right[node] = next_id, next_id + 1
                new_frontier.append((next_id, idx[go_left]))
                new_frontier.append((next_id + 1, idx[~go_left]))
                next_id += 2
            frontier = new_frontier
            if not frontier:
                break
        return tree

    def fit(self, features, targets, weights=None) -> "BoostedTrees":
        X = _as_features(features)
        y = np.asarray(targets, float).reshape(-1)
        if self.loss == "logistic":
            _check_labels(y)
        w = _norm_weights(weights, len(y))
        self.edges_ = _bin_edges(X, self.max_bins)
        bins = np.column_stack(
            [np.searchsorted(e, X[:, j], side="right") for j, e in enumerate(self.edges_)]
        ) if X.shape[1] else np.zeros((len(y), 0), dtype=np.int64)
        ybar = w @ y / w.sum()
        if self.loss == "squared":
            self.base_ = float(ybar)
        else:
            pb = np.clip(ybar, 1e-6, 1 - 1e-6)
            self.base_ = float(np.log(pb / (1 - pb)))
        F = np.full(len(y), self.base_)
        self.trees_ = []
        for _ in range(self.n_trees):
            g, h = self._grad(F, y)
            tree = self._build(bins, self.edges_, g * w, h * w)
            self.trees_.append(tree)
            F += tree.predict(X)
        return self

    def decision_function(self, features) -> np.ndarray:
        X = _as_features(features)
        F = np.full(len(X), self.base_)
        for tree in self.trees_:
            F += tree.predict(X)
        return F

    def predict(self, features) -> np.ndarray:
        return self.decision_function(features)

    def predict_proba(self, features) -> np.ndarray:
        if self.loss != "logistic":
            raise LearnerError("predict_proba needs the logistic loss")
        return expit(self.decision_function(features))


# ---------------------------------------------------------------------------
# cell frequencies


class CellMean:
    """Weighted mean target per distinct feature row; unseen rows get the global mean."""

    def _codes(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Mixed-radix integer key per row and a mask of rows whose values were all seen."""
        key = np.zeros(len(X), dtype=np.int64)
        seen = np.ones(len(X), dtype=bool)
        for j, lv in enumerate(self.levels_):
            pos = np.clip(np.searchsorted(lv, X[:, j]), 0, len(lv) - 1)
            seen &= lv[pos] == X[:, j]
            key = key * len(lv) + pos
        return key, seen

    def fit(self, features, targets, weights=None) -> "CellMean":
        X = _as_features(features)
        y = np.asarray(targets, float).reshape(-1)
        w = np.ones(len(y)) if weights is None else np.asarray(weights, float)
        self.levels_ = [np.unique(X[:, j]) for j in range(X.shape[1])]
        if np.prod([float(len(lv)) for lv in self.levels_]) > 2.0**62:
            raise LearnerError("too many distinct feature values for cell means")
        key, _ = self._codes(X)
        uniq, inv = np.unique(key, return_inverse=True)
        tot = np.bincount(inv, weights=w, minlength=len(uniq))
        sums = np.bincount(inv, weights=w * y, minlength=len(uniq))
        keep = tot > 0
        self.keys_ = uniq[keep]
        self.means_ = sums[keep] / tot[keep]
        self.global_ = float(w @ y / w.sum())
        return self

    def _lookup(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        key, seen = self._codes(X)
        pos = np.clip(np.searchsorted(self.keys_, key), 0, len(self.keys_) - 1)
        hit = seen & (self.keys_[pos] == key)
        return pos, hit

    def predict(self, features) -> np.ndarray:
        pos, hit = self._lookup(_as_features(features))
        return np.where(hit, self.means_[pos], self.global_)

    def coverage(self, features) -> float:
        """Fraction of query rows whose cell was seen in training."""
        return float(np.mean(self._lookup(_as_features(features))[1]))


class CellFrequency(CellMean):
    def fit(self, features, labels, weights=None) -> "CellFrequency":
        y = np.asarray(labels, float).reshape(-1)
        _check_labels(y)
        return super().fit(features, y, weights)

    def predict_proba(self, features) -> np.ndarray:
        return self.predict(features)


# ---------------------------------------------------------------------------
# constants (misspecification harness)


@dataclass(frozen=True)
class ConstantRegressor:
    value: float = 0.0

    def predict(self, features) -> np.ndarray:
        return np.full(len(np.asarray(features)), self.value)


@dataclass(frozen=True)
class ConstantClassifier:
    prob: float

    def predict_proba(self, features) -> np.ndarray:
        return np.full(len(np.asarray(features)), self.prob)


# ---------------------------------------------------------------------------
# entry points


def fit_regressor(features, targets, config: LearnerConfig, weights=None) -> Regressor:
    y = np.asarray(targets, float)
    if len(y) == 0:
        raise LearnerError("cannot fit a regressor on zero rows")
    if config.kind in ("ridge", "logistic"):
        return RidgeRegressor(config.l2).fit(features, y, weights)
    if config.kind == "stumps":
        return BoostedTrees(
            "squared", config.n_trees, config.depth, config.learning_rate, config.l2,
            config.max_bins, config.min_child_weight,
        ).fit(features, y, weights)
    return CellMean().fit(features, y, weights)


def fit_classifier(features, labels, config: LearnerConfig, weights=None) -> ProbClassifier:
    if config.kind in ("ridge", "logistic"):
        return LogisticIRLS(config.l2, config.max_iter, config.tol).fit(features, labels, weights)
    if config.kind == "stumps":
        return BoostedTrees(
            "logistic", config.n_trees, config.depth, config.learning_rate, config.l2,
            config.max_bins, config.min_child_weight,
        ).fit(features, labels, weights)
    return CellFrequency().fit(features, labels, weights)


def kfold_score(features, targets, config: LearnerConfig, task: str = "regression",
                folds: int = 5, seed: int = 0) -> float:
    """Out-of-fold mean squared error (regression) or Brier score (classification)."""
    X = _as_features(features)
    y = np.asarray(targets, float)
    perm = np.random.default_rng(seed).permutation(len(y))
    fold_of = np.empty(len(y), dtype=np.int64)
    fold_of[perm] = np.arange(len(y)) % folds
    losses = np.empty(len(y))
    for k in range(folds):
        tr, te = fold_of != k, fold_of == k
        if task == "classification":
            pred = fit_classifier(X[tr], y[tr], config).predict_proba(X[te])
        else:
            pred = fit_regressor(X[tr], y[tr], config).predict(X[te])
        losses[te] = (pred - y[te]) ** 2
    return float(losses.mean())


def select_config(features, targets, grid: list[LearnerConfig], task: str = "regression",
                  folds: int = 5, seed: int = 0) -> tuple[LearnerConfig, list[float]]:
    """Pick the grid entry with the lowest k-fold score."""
    scores = [kfold_score(features, targets, c, task, folds, seed) for c in grid]
    return grid[int(np.argmin(scores))], scores


def with_overrides(config: LearnerConfig, **kw) -> LearnerConfig:
    return replace(config, **kw)


__all__ = [
    "LearnerConfig", "LearnerSet", "LearnerError", "RankError", "RidgeRegressor", "LogisticIRLS",
    "BoostedTrees", "CellMean", "CellFrequency", "ConstantRegressor", "ConstantClassifier",
    "fit_regressor", "fit_classifier", "kfold_score", "select_config", "as_learner_set",
]
