"""Intervals, conditional summaries, weight diagnostics and replication studies."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Sequence

import numpy as np
from scipy.stats import norm

from . import oracle as _oracle
from . import scm as _scm
from .cohort import Cohort
from .estimators import (
    EFFECT_TERMS,
    EFFECTS,
    CrossfitRun,
    EffectEstimate,
    EstimationError,
    as_mode,
    crossfit,
    estimate_effects,
)
from .nuisance import DEFAULT_CLIP

MAX_REDRAWS = 100


def derive_seed(seed: int, *keys: int) -> int:
    """Deterministic child seed; independent streams for distinct key tuples."""
    return int(np.random.SeedSequence([int(seed), *map(int, keys)]).generate_state(1, np.uint64)[0] >> 1)


def _map(fn: Callable, items: Sequence, jobs: int = 1) -> list:
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


# ---------------------------------------------------------------------------
# intervals


def bootstrap_effects(cohort: Cohort, effects=("vde",), x0: int = 0, x1: int = 1, B: int = 500,
                      level: float = 0.95, mode="dr", learners="ridge", seed: int = 0, folds: int = 5,
                      clip: float = DEFAULT_CLIP, jobs: int = 1) -> dict[str, EffectEstimate]:
    """Percentile intervals from full-pipeline row resampling.

    Every replicate redraws rows with replacement and refits all nuisances.
    A replicate whose resample has a single exposure class, or whose folds
    cannot be made non-degenerate, is redrawn with a shifted seed; the count
    of such redraws is reported.  The point estimate is the bootstrap mean.
    """
    if B < 2:
        raise EstimationError("B must be at least 2")
    if not 0.0 < level < 1.0:
        raise EstimationError("level must lie in (0, 1)")
    effects = [e.replace("-", "_") for e in effects]
    n = cohort.n

    def replicate(b: int):
        for attempt in range(MAX_REDRAWS):
            rng = np.random.default_rng([int(seed), b, attempt])
            idx = rng.integers(0, n, size=n)
            sub = cohort.take(idx)
            if np.all(sub.x == sub.x[0]):
                continue
            try:
                res = estimate_effects(sub, effects, x0, x1, folds, mode, learners,
                                       derive_seed(seed, b, attempt), clip, 1, level)
            except EstimationError:
                continue
            return [res[e].estimate for e in effects], attempt
        raise EstimationError(f"bootstrap replicate {b} stayed degenerate after {MAX_REDRAWS} redraws")

    out = _map(replicate, range(B), jobs)
    draws = np.array([o[0] for o in out])
    redraws = int(sum(o[1] for o in out))
    alpha = 1.0 - level
    mname = as_mode(mode).label()
    result = {}
    for j, e in enumerate(effects):
        col = draws[:, j]
        lo, hi = np.quantile(col, [alpha / 2, 1 - alpha / 2])
        result[e] = EffectEstimate(
            effect=e, x0=x0, x1=x1, estimate=float(col.mean()), ci_low=float(lo), ci_high=float(hi),
            ci_method="bootstrap-percentile", level=level, folds=folds, mode=mname, seed=seed, n=n,
            std_error=float(col.std(ddof=1)),
            diagnostics={"B": B, "redraws": redraws, "replicates": col.tolist()},
        )
    return result


def bootstrap_ci(cohort: Cohort, effect: str = "vde", x0: int = 0, x1: int = 1, B: int = 500,
                 level: float = 0.95, mode="dr", learners="ridge", seed: int = 0, folds: int = 5,
                 clip: float = DEFAULT_CLIP, jobs: int = 1) -> EffectEstimate:
    return bootstrap_effects(cohort, (effect,), x0, x1, B, level, mode, learners, seed, folds, clip, jobs)[
        effect.replace("-", "_")
    ]


def analytic_ci(cohort: Cohort, effect: str = "vde", x0: int = 0, x1: int = 1, level: float = 0.95,
                mode="dr", learners="ridge", seed: int = 0, folds: int = 5, clip: float = DEFAULT_CLIP,
                jobs: int = 1) -> EffectEstimate:
    """psi +- z * rho / sqrt(n), rho^2 the sample variance of per-row contributions."""
    if as_mode(mode).name not in ("dr", "sn_dr"):
        raise EstimationError("analytic intervals need the dr or sn_dr mode")
    return estimate_effects(cohort, (effect,), x0, x1, folds, mode, learners, seed, clip, jobs, level)[
        effect.replace("-", "_")
    ]


# ---------------------------------------------------------------------------
# conditional effects on a two-axis grid


@dataclass
class BinnedEffect:
    """Cell averages of per-row VDE contributions over a rectangular grid.

    Rows outside the grid are counted in ``out_of_range`` and belong to no cell.
    """

    axis1: str
    axis2: str
    edges1: np.ndarray
    edges2: np.ndarray
    mean: np.ndarray
    std_error: np.ndarray
    count: np.ndarray
    mass: np.ndarray
    missing: np.ndarray
    min_count: int
    global_estimate: float
    out_of_range: int

    def pooled_mean(self, include_missing: bool = False) -> float:
        """Mass-weighted mean of cell averages (non-missing cells unless asked otherwise)."""
        keep = self.count > 0 if include_missing else (~self.missing) & (self.count > 0)
        if not keep.any():
            raise EstimationError("no cells to pool")
        return float(np.sum(self.mean[keep] * self.mass[keep]) / np.sum(self.mass[keep]))

    def to_rows(self) -> list[dict[str, Any]]:
        rows = []
        for i in range(len(self.edges1) - 1):
            for j in range(len(self.edges2) - 1):
                rows.append({
                    f"{self.axis1}_low": float(self.edges1[i]), f"{self.axis1}_high": float(self.edges1[i + 1]),
                    f"{self.axis2}_low": float(self.edges2[j]), f"{self.axis2}_high": float(self.edges2[j + 1]),
                    "mean": float(self.mean[i, j]), "std_error": float(self.std_error[i, j]),
                    "count": int(self.count[i, j]), "missing": bool(self.missing[i, j]),
                })
        return rows

    def to_dict(self) -> dict[str, Any]:
        return {
            "axis1": self.axis1, "axis2": self.axis2, "edges1": self.edges1.tolist(),
            "edges2": self.edges2.tolist(), "min_count": self.min_count,
            "global_estimate": self.global_estimate, "out_of_range": self.out_of_range,
            "cells": self.to_rows(),
        }


def _bin(values: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """Cell index with half-open bins [e_k, e_k+1) and a closed last bin; -1 outside."""
    idx = np.searchsorted(edges, values, side="right") - 1
    idx[values == edges[-1]] = len(edges) - 2
    idx[(values < edges[0]) | (values > edges[-1])] = -1
    return idx


def _check_edges(edges) -> np.ndarray:
    e = np.asarray(edges, float)
    if e.ndim != 1 or len(e) < 2 or np.any(np.diff(e) <= 0):
        raise EstimationError("bin edges must be a strictly increasing sequence of at least two values")
    return e


def binned_contributions(contrib: np.ndarray, a1: np.ndarray, a2: np.ndarray, edges1, edges2,
                         min_count: int = 20, row_weights: np.ndarray | None = None,
                         global_estimate: float | None = None, axis1: str = "axis1",
                         axis2: str = "axis2") -> BinnedEffect:
    e1, e2 = _check_edges(edges1), _check_edges(edges2)
    if min_count < 1:
        raise EstimationError("min_count must be at least 1")
    rw = np.ones(len(contrib)) if row_weights is None else row_weights
    i1, i2 = _bin(np.asarray(a1, float), e1), _bin(np.asarray(a2, float), e2)
    inside = (i1 >= 0) & (i2 >= 0)
    shape = (len(e1) - 1, len(e2) - 1)
    flat = np.ravel_multi_index((i1[inside], i2[inside]), shape)
    size = shape[0] * shape[1]
    count = np.bincount(flat, minlength=size).reshape(shape)
    mass = np.bincount(flat, weights=rw[inside], minlength=size).reshape(shape)
    s1 = np.bincount(flat, weights=rw[inside] * contrib[inside], minlength=size).reshape(shape)
    s2 = np.bincount(flat, weights=rw[inside] * contrib[inside] ** 2, minlength=size).reshape(shape)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(mass > 0, s1 / mass, np.nan)
        var = np.where(mass > 0, np.maximum(s2 / mass - mean**2, 0.0), np.nan)
        se = np.where(count > 1, np.sqrt(var * count / np.maximum(count - 1, 1) / np.maximum(count, 1)), np.nan)
    if global_estimate is None:
        global_estimate = float(np.sum(rw * contrib) / np.sum(rw))
    return BinnedEffect(axis1, axis2, e1, e2, mean, se, count, mass, count < min_count, int(min_count),
                        float(global_estimate), int(np.count_nonzero(~inside)))


def conditional_vde(cohort: Cohort, axis1: str, axis2: str, edges1, edges2, min_count: int = 20, mode="dr",
                    learners="ridge", seed: int = 0, x0: int = 0, x1: int = 1, folds: int = 5,
                    clip: float = DEFAULT_CLIP, jobs: int = 1) -> BinnedEffect:
    """Bin per-row VDE contributions (backdoor minus nested functional) from one cross-fitted run."""
    a1, a2 = cohort.column(axis1), cohort.column(axis2)
    run = crossfit(cohort, ("m1", "vde"), x0, x1, folds, mode, learners, clip, seed, jobs)
    contrib = run.contributions["m1"] - run.contributions["vde"]
    return binned_contributions(contrib, a1, a2, edges1, edges2, min_count, cohort.weights,
                                run.term("m1") - run.term("vde"), axis1, axis2)


# ---------------------------------------------------------------------------
# importance-weight diagnostics


@dataclass
class WeightDiagnostics:
    rows: list[dict[str, Any]]
    n: int
    small_sample: bool

    def deviation(self, family: str, which: str = "pre") -> np.ndarray:
        return np.array([abs(r[which] - 1.0) for r in self.rows if r["family"] == family])

    def median_deviation(self, which: str = "pre") -> dict[str, float]:
        fams = sorted({r["family"] for r in self.rows})
        return {f: float(np.median(self.deviation(f, which))) for f in fams}


def nuisance_mean_diagnostics(run: CrossfitRun, small_n: int = 4000, tol: float = 0.25) -> WeightDiagnostics:
    """Per-fold empirical means of each weight family before and after normalization.

    Each weight has theoretical mean 1.  A fold mean off by more than ``tol``
    is flagged when the cohort is smaller than ``small_n``.
    """
    n = len(run.plan.assignment)
    small = n < small_n
    rows = []
    for r in run.weight_mean_table():
        r = dict(r)
        r["flagged"] = bool(small and abs(r["pre"] - 1.0) > tol)
        rows.append(r)
    if not rows:
        raise EstimationError("weight diagnostics need a run with importance weights (ipw, dr or sn_dr)")
    return WeightDiagnostics(rows, n, small)


# ---------------------------------------------------------------------------
# replication studies

STUDY_QUERIES = {
    "mean_Y0": ("m0", _oracle.EffectQuery("mean_Yx", 1, 0)),
    "mean_Y1": ("m1", _oracle.EffectQuery("mean_Yx", 0, 1)),
    "nested_nde": ("nde", _oracle.EffectQuery("nested_nde")),
    "nested_vde": ("vde", _oracle.EffectQuery("nested_vde")),
}


def reference_values(spec: _scm.ScmSpec, queries: dict[str, _oracle.EffectQuery], n_mc: int = 1_000_000,
                     seed: int = 0) -> dict[str, float]:
    """Exact oracle values where available, Monte Carlo otherwise."""
    out = {}
    for name, q in queries.items():
        try:
            out[name] = _oracle.exact_value(spec, q)
        except _oracle.OracleError:
            out[name] = _oracle.mc_counterfactual(spec, q, n_mc, seed).value
    return out


@dataclass
class StudyResult:
    """Replication summaries, one record per (grid point, mode, query)."""

    grid_name: str
    records: list[dict[str, Any]]
    reference: dict[str, float]
    replications: int
    seed: int
    estimates: dict[tuple, np.ndarray] = field(default_factory=dict, repr=False)

    def select(self, **match) -> list[dict[str, Any]]:
        return [r for r in self.records if all(r.get(k) == v for k, v in match.items())]

    def series(self, column: str, **match) -> tuple[np.ndarray, np.ndarray]:
        rows = self.select(**match)
        return np.array([r[self.grid_name] for r in rows]), np.array([r[column] for r in rows])

    def loglog_slope(self, column: str = "rmse", **match) -> float:
        g, v = self.series(column, **match)
        return float(np.polyfit(np.log(g), np.log(v), 1)[0])

    def to_rows(self) -> list[dict[str, Any]]:
        return [dict(r) for r in self.records]


def _summarize(grid_name, grid_value, mode_label, query, est: np.ndarray, ref: float,
               covered: np.ndarray | None) -> dict[str, Any]:
    err = est - ref
    rel = err / ref if ref != 0 else np.full_like(err, np.nan)
    return {
        grid_name: grid_value, "mode": mode_label, "query": query, "reference": ref,
        "mean_estimate": float(est.mean()), "mean_rel_error": float(np.mean(rel)),
        "mean_abs_rel_error": float(np.mean(np.abs(rel))),
        "variance": float(est.var(ddof=1)) if len(est) > 1 else 0.0,
        "rmse": float(np.sqrt(np.mean(err**2))),
        "coverage": float(np.mean(covered)) if covered is not None else float("nan"),
        "replications": int(len(est)),
    }


def convergence_study(spec: _scm.ScmSpec, sizes: Iterable[int], replications: int = 20,
                      modes=("dr", "sn_dr"), learners="ridge", seed: int = 0, folds: int = 5,
                      clip: float = DEFAULT_CLIP, n_mc: int = 1_000_000, level: float = 0.95,
                      jobs: int = 1) -> StudyResult:
    """Fresh cohorts per (size, replication); errors against oracle constants.

    Queries are E[Y_x0], E[Y_x1], E[Y_{x1, M_x0}], E[Y_{x1, V_{x0, W_x1}}]
    and the VDE itself.  Analytic-interval coverage is recorded for the VDE.
    """
    sizes = [int(n) for n in sizes]
    if not sizes:
        raise EstimationError("sizes must be non-empty")
    queries = {k: q for k, (_, q) in STUDY_QUERIES.items()}
    queries["vde"] = _oracle.EffectQuery("vde")
    ref = reference_values(spec, queries, n_mc, seed)
    modes = [as_mode(m) for m in modes]
    records, raw = [], {}
    for i, n in enumerate(sizes):
        def one(r, n=n, i=i):
            cohort = _scm.sample(spec, n, derive_seed(seed, i, r))
            out = {}
            for m in modes:
                run = crossfit(cohort, ("m1", "m0", "vde", "nde"), 0, 1, folds, m, learners, clip,
                               derive_seed(seed, i, r, 1))
                vals = {k: run.term(t) for k, (t, _) in STUDY_QUERIES.items()}
                vals["vde"] = vals["mean_Y1"] - vals["nested_vde"]
                contrib = run.contributions["m1"] - run.contributions["vde"]
                se = np.std(contrib, ddof=1) / np.sqrt(n)
                half = norm.ppf(0.5 + level / 2) * se
                vals["vde_covered"] = float(abs(vals["vde"] - ref["vde"]) <= half)
                out[m.label()] = vals
            return out

        reps = _map(one, range(replications), jobs)
        for m in modes:
            lab = m.label()
            for q in queries:
                est = np.array([rep[lab][q] for rep in reps])
                cov = np.array([rep[lab]["vde_covered"] for rep in reps]) if q == "vde" and m.name in (
                    "dr", "sn_dr") else None
                raw[(n, lab, q)] = est
                records.append(_summarize("n", n, lab, q, est, ref[q], cov))
    return StudyResult("n", records, ref, replications, seed, raw)


def imbalance_study(spec: _scm.ScmSpec, etas: Iterable[float] = (0.1, 0.2, 0.33, 0.5), n: int = 32_000,
                    replications: int = 20, learners="ridge", mode="dr", seed: int = 0,
                    effects=EFFECTS, folds: int = 5, clip: float = DEFAULT_CLIP, n_mc: int = 1_000_000,
                    jobs: int = 1) -> StudyResult:
    """Re-threshold X to each exposure rate eta, then estimate every effect."""
    etas = [float(e) for e in etas]
    if not etas or any(not 0 < e < 1 for e in etas):
        raise EstimationError("etas must be a non-empty subset of (0, 1)")
    effects = [e.replace("-", "_") for e in effects]
    m = as_mode(mode)
    records, raw = [], {}
    reference: dict[str, float] = {}
    for i, eta in enumerate(etas):
        spec_eta = _scm.calibrate_imbalance(spec, eta, seed=seed)
        qs = {e: _oracle.EffectQuery(e, mediators="v" if e == "nie_star" else "wv") for e in effects}
        ref = reference_values(spec_eta, qs, n_mc, seed)
        for e in effects:
            reference[f"{e}@{eta}"] = ref[e]

        def one(r, i=i, spec_eta=spec_eta):
            cohort = _scm.sample(spec_eta, n, derive_seed(seed, i, r))
            res = estimate_effects(cohort, effects, 0, 1, folds, m, learners, derive_seed(seed, i, r, 1), clip)
            return {e: res[e].estimate for e in effects} | {"x1_rate": float(cohort.x.mean())}

        reps = _map(one, range(replications), jobs)
        for e in effects:
            est = np.array([rep[e] for rep in reps])
            raw[(eta, m.label(), e)] = est
            rec = _summarize("eta", eta, m.label(), e, est, ref[e], None)
            rec["x1_rate"] = float(np.mean([rep["x1_rate"] for rep in reps]))
            rec["finite"] = bool(np.all(np.isfinite(est)))
            records.append(rec)
    return StudyResult("eta", records, reference, replications, seed, raw)
