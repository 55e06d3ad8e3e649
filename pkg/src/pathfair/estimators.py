"""Cross-fitted estimators of counterfactual means and the effects built from them.

Four *terms* are estimated, each as the average over folds of the fold mean of
a per-row functional ``phi`` scored on rows the nuisances never saw:

``m1`` / ``m0``
    Backdoor means E[Y_x1] and E[Y_x0] (AIPW).
``vde``
    The nested mean E[Y_{x1, V_{x0, W_{x1}}}]:
    phi = pi3 (Y - mu3) + pi2 (mu3 - mu2) + pi1 (mu2 - mu1) + mu1.
``nde`` / ``nde_v``
    E[Y_{x1, M_{x0}}] with M = (W, V), or M = V alone:
    phi = pi2 (Y - mu2) + pi1 (mu2 - mu1) + mu1.

Effects are differences of terms from one shared run, so TE = NDE + NIE
holds to rounding for any data, mode and seed.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np
from scipy.stats import norm

from .cohort import Cohort
from .learners import LearnerError, LearnerSet, as_learner_set
from .nuisance import (
    DEFAULT_CLIP,
    POSITIVITY_WARN_FRACTION,
    ClipCounter,
    NuisanceError,
    clip_probability,
    feats_vwz,
    feats_wz,
    feats_z,
    fit_nested,
    fit_outcome,
    fit_propensities,
    fit_two_stage,
    mediator_feats,
    nde_pi_weights,
    pi_weights,
    prob_of,
    weighted_mean,
)

MODES = ("plugin", "ipw", "dr", "sn_dr")
BREAKS = ("break_mu", "break_pi")
EFFECTS = ("te", "nde", "nie", "nie_star", "vde")
TERMS = ("m1", "m0", "vde", "nde", "nde_v")
EFFECT_TERMS = {
    "te": (("m1", 1.0), ("m0", -1.0)),
    "nde": (("nde", 1.0), ("m0", -1.0)),
    "nie": (("m1", 1.0), ("nde", -1.0)),
    "nie_star": (("m1", 1.0), ("nde_v", -1.0)),
    "vde": (("m1", 1.0), ("vde", -1.0)),
}
MAX_FOLD_RETRIES = 10


class EstimationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# modes


@dataclass(frozen=True)
class EstimatorMode:
    """Estimator family plus the nuisances deliberately replaced by constants."""

    name: str = "dr"
    broken: tuple[str, ...] = ()

    def __post_init__(self):
        name = {"sndr": "sn_dr", "sn-dr": "sn_dr"}.get(self.name, self.name)
        if name not in MODES:
            raise EstimationError(f"unknown mode {self.name!r}; expected one of {MODES}")
        bad = set(self.broken) - set(BREAKS)
        if bad:
            raise EstimationError(f"unknown misspecification {sorted(bad)}; expected {BREAKS}")
        object.__setattr__(self, "name", name)
        object.__setattr__(self, "broken", tuple(sorted(set(self.broken))))

    @property
    def break_mu(self) -> bool:
        return "break_mu" in self.broken

    @property
    def break_pi(self) -> bool:
        return "break_pi" in self.broken

    @property
    def normalized(self) -> bool:
        return self.name == "sn_dr"

    def label(self) -> str:
        return "+".join((self.name,) + self.broken)


def as_mode(mode) -> EstimatorMode:
    return mode if isinstance(mode, EstimatorMode) else EstimatorMode(str(mode))


def inject_misspecification(mode, which: str) -> EstimatorMode:
    """Return ``mode`` with the named nuisance family replaced by a constant.

    ``break_mu`` makes every regression predict 0; ``break_pi`` makes every
    propensity the training-fold marginal frequency of X.  Calls compose.
    """
    if which not in BREAKS:
        raise EstimationError(f"which must be one of {BREAKS}")
    m = as_mode(mode)
    return replace(m, broken=m.broken + (which,))


# ---------------------------------------------------------------------------
# folds


@dataclass(frozen=True)
class FoldPlan:
    folds: int
    assignment: np.ndarray
    seed: int
    attempts: int = 1

    def eval_index(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == k)

    def train_index(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.assignment != k)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.folds)


def _assign(n: int, folds: int, seed: int) -> np.ndarray:
    perm = np.random.default_rng(seed).permutation(n)
    out = np.empty(n, dtype=np.int64)
    out[perm] = np.arange(n) % folds
    return out


def _degenerate(assignment, x, weights, folds, x0, x1) -> bool:
    pos = np.ones(len(x), bool) if weights is None else weights > 0
    for k in range(folds):
        train = (assignment != k) & pos
        if not (np.any(train & (x == x0)) and np.any(train & (x == x1))):
            return True
        if x0 == x1 and not np.any(train & (x != x1)):
            return True
        if not np.any((assignment == k) & pos):
            return True
    return False


def make_folds(n: int, folds: int = 5, seed: int = 0, x=None, x0: int = 0, x1: int = 1,
               weights=None) -> FoldPlan:
    """Random partition into ``folds`` parts whose sizes differ by at most one.

    With exposures ``x``, a partition leaving some training complement
    without both exposure groups is redrawn with a shifted seed, up to
    ten times.
    """
    if folds < 2:
        raise EstimationError("at least two folds are required")
    if n < folds:
        raise EstimationError(f"cannot split {n} rows into {folds} folds")
    for attempt in range(MAX_FOLD_RETRIES + 1):
        a = _assign(n, folds, seed + attempt)
        if x is None or not _degenerate(a, np.asarray(x), weights, folds, x0, x1):
            return FoldPlan(folds, a, seed, attempt + 1)
    raise EstimationError(
        f"every fold partition tried ({MAX_FOLD_RETRIES + 1}) left a training complement without both exposure groups"
    )


# ---------------------------------------------------------------------------
# per-fold scoring


@dataclass
class FoldScore:
    """Per-row functionals for one evaluation fold plus what produced them."""

    phi: dict[str, np.ndarray]
    weight_means: dict[str, float]
    weight_means_normalized: dict[str, float]
    clipped: int
    evaluated: int
    nuisances: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def clipped_fraction(self) -> float:
        return self.clipped / self.evaluated if self.evaluated else 0.0


def _normalize(weights: dict[str, np.ndarray], rw, normalize: bool, pre: dict, post: dict, prefix: str):
    out = {}
    for k, w in weights.items():
        m = weighted_mean(w, rw)
        pre[prefix + k] = m
        if normalize:
            if not m > 0:
                raise EstimationError(f"weight family {prefix + k} is zero on an evaluation fold")
            w = w / m
        post[prefix + k] = weighted_mean(w, rw)
        out[k] = w
    return out


def fit_and_score(train: Cohort, evaluate: Cohort, terms=TERMS, x0: int = 0, x1: int = 1,
                  learners: Any = "ridge", clip: float = DEFAULT_CLIP, mode: Any = "dr") -> FoldScore:
    """Fit nuisances on ``train`` and score the requested terms on ``evaluate``.

    Cross-fitting calls this once per fold with disjoint slices; calling it
    with the same cohort for both gives the in-sample (non-split) estimator.
    """
    learners = as_learner_set(learners)
    mode = as_mode(mode)
    terms = tuple(terms)
    unknown = set(terms) - set(TERMS)
    if unknown:
        raise EstimationError(f"unknown terms {sorted(unknown)}")
    rw = evaluate.weights
    x, y = evaluate.x, evaluate.y
    counter = ClipCounter()
    pre: dict[str, float] = {}
    post: dict[str, float] = {}
    phi: dict[str, np.ndarray] = {}
    nuis: dict[str, np.ndarray] = {}
    want_pi = mode.name != "plugin"
    want_mu = mode.name != "ipw"

    props = fit_propensities(
        train, learners,
        need_wz="vde" in terms and want_pi,
        need_vwz=("vde" in terms or "nde" in terms) and want_pi,
        need_vz="nde_v" in terms and want_pi,
        eps=clip, constant=mode.break_pi,
    ) if want_pi else None
    p1_z = props.p_z.predict_proba(feats_z(evaluate)) if want_pi else None

    for label, xx in (("m1", x1), ("m0", x0)):
        if label not in terms:
            continue
        mu = fit_outcome(train, xx, learners, mode.break_mu).predict(feats_z(evaluate)) if want_mu else 0.0
        if want_pi:
            c = clip_probability(p1_z, clip, counter)
            ws = _normalize({"pi": (x == xx) / prob_of(c, xx)}, rw, mode.normalized, pre, post, label + "_")
            pi = ws["pi"]
            nuis[label + "_pi"] = pi
        if want_mu:
            nuis[label + "_mu"] = mu
        if mode.name == "plugin":
            phi[label] = mu
        elif mode.name == "ipw":
            phi[label] = pi * y
        else:
            phi[label] = pi * (y - mu) + mu

    if "vde" in terms:
        if want_mu:
            reg = fit_nested(train, learners, x0, x1, mode.break_mu)
            mu3, mu2, mu1 = reg.eval_mu3(evaluate), reg.eval_mu2(evaluate), reg.eval_mu1(evaluate)
            nuis.update(vde_mu3=mu3, vde_mu2=mu2, vde_mu1=mu1)
        if want_pi:
            pw = pi_weights(x, p1_z, props.p_wz.predict_proba(feats_wz(evaluate)),
                            props.p_vwz.predict_proba(feats_vwz(evaluate)), x0, x1, clip, counter)
            ws = _normalize(pw.families(), rw, mode.normalized, pre, post, "vde_")
            nuis.update({"vde_" + k: v for k, v in ws.items()})
        if mode.name == "plugin":
            phi["vde"] = mu1
        elif mode.name == "ipw":
            phi["vde"] = ws["pi3"] * y
        else:
            phi["vde"] = ws["pi3"] * (y - mu3) + ws["pi2"] * (mu3 - mu2) + ws["pi1"] * (mu2 - mu1) + mu1

    for label, med in (("nde", "wv"), ("nde_v", "v")):
        if label not in terms:
            continue
        if want_mu:
            reg2 = fit_two_stage(train, med, learners, x0, x1, mode.break_mu)
            mu2, mu1 = reg2.eval_mu2(evaluate), reg2.eval_mu1(evaluate)
            nuis.update({label + "_mu2": mu2, label + "_mu1": mu1})
        if want_pi:
            p1_m = props.p_m(med).predict_proba(mediator_feats(evaluate, med))
            pi1, pi2 = nde_pi_weights(x, p1_z, p1_m, x0, x1, clip, counter)
            ws = _normalize({"pi1": pi1, "pi2": pi2}, rw, mode.normalized, pre, post, label + "_")
            nuis.update({label + "_" + k: v for k, v in ws.items()})
        if mode.name == "plugin":
            phi[label] = mu1
        elif mode.name == "ipw":
            phi[label] = ws["pi2"] * y
        else:
            phi[label] = ws["pi2"] * (y - mu2) + ws["pi1"] * (mu2 - mu1) + mu1

    return FoldScore(phi, pre, post, counter.clipped, counter.total, nuis)


# ---------------------------------------------------------------------------
# cross-fitting


@dataclass
class CrossfitRun:
    """Everything produced by one cross-fitted pass over a cohort.

    ``contributions[t]`` is rescaled per row so that its (row-weighted) mean
    equals the average of fold means; ``fold_means[t]`` keeps those means.
    """

    plan: FoldPlan
    terms: tuple[str, ...]
    x0: int
    x1: int
    mode: EstimatorMode
    learners: LearnerSet
    clip: float
    seed: int
    contributions: dict[str, np.ndarray]
    fold_means: dict[str, np.ndarray]
    fold_scores: list[FoldScore]
    row_weights: np.ndarray | None

    def term(self, t: str) -> float:
        return float(np.mean(self.fold_means[t]))

    @property
    def clipped_fraction(self) -> float:
        c = sum(s.clipped for s in self.fold_scores)
        e = sum(s.evaluated for s in self.fold_scores)
        return c / e if e else 0.0

    def weight_mean_table(self) -> list[dict[str, Any]]:
        rows = []
        for k, s in enumerate(self.fold_scores):
            for fam, pre in s.weight_means.items():
                rows.append({"fold": k, "family": fam, "pre": pre, "post": s.weight_means_normalized[fam]})
        return rows


def crossfit(cohort: Cohort, terms=TERMS, x0: int = 0, x1: int = 1, folds: int = 5, mode: Any = "dr",
             learners: Any = "ridge", clip: float = DEFAULT_CLIP, seed: int = 0, jobs: int = 1) -> CrossfitRun:
    """Fit out-of-fold nuisances and average fold means of each term's functional."""
    learners = as_learner_set(learners)
    mode = as_mode(mode)
    terms = tuple(t for t in TERMS if t in set(terms))
    plan = make_folds(cohort.n, folds, seed, cohort.x, x0, x1, cohort.weights)

    def one(k: int) -> FoldScore:
        train = cohort.take(plan.train_index(k))
        ev = cohort.take(plan.eval_index(k))
        try:
            return fit_and_score(train, ev, terms, x0, x1, learners, clip, mode)
        except (LearnerError, NuisanceError) as exc:
            raise EstimationError(f"fold {k}: {exc}") from exc

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            scores = list(pool.map(one, range(folds)))
    else:
        scores = [one(k) for k in range(folds)]

    rw = cohort.weights
    total = cohort.n if rw is None else float(rw.sum())
    contributions = {t: np.empty(cohort.n) for t in terms}
    fold_means = {t: np.empty(folds) for t in terms}
    for k, s in enumerate(scores):
        idx = plan.eval_index(k)
        fw = None if rw is None else rw[idx]
        mass = len(idx) if fw is None else float(fw.sum())
        for t in terms:
            fold_means[t][k] = weighted_mean(s.phi[t], fw)
            contributions[t][idx] = s.phi[t] * (total / (folds * mass))
    return CrossfitRun(plan, terms, x0, x1, mode, learners, clip, seed, contributions, fold_means, scores, rw)


# ---------------------------------------------------------------------------
# estimates


@dataclass
class EffectEstimate:
    effect: str
    x0: int
    x1: int
    estimate: float
    ci_low: float
    ci_high: float
    ci_method: str
    level: float
    folds: int
    mode: str
    seed: int
    n: int
    std_error: float = float("nan")
    clipped_fraction: float = 0.0
    positivity_warning: bool = False
    terms: dict[str, float] = field(default_factory=dict)
    diagnostics: dict[str, Any] = field(default_factory=dict)
    contributions: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.ci_low > self.ci_high:
            raise EstimationError("confidence bounds out of order")

    def to_dict(self) -> dict[str, Any]:
        return {
            "effect": self.effect, "x0": self.x0, "x1": self.x1, "estimate": self.estimate,
            "ci": {"low": self.ci_low, "high": self.ci_high, "method": self.ci_method, "level": self.level},
            "std_error": self.std_error, "folds": self.folds, "mode": self.mode, "seed": self.seed,
            "n": self.n, "clipped_fraction": self.clipped_fraction,
            "positivity_warning": self.positivity_warning, "terms": dict(self.terms),
            "diagnostics": self.diagnostics,
        }


def _combine(run: CrossfitRun, pairs) -> tuple[float, np.ndarray]:
    est = sum(c * run.term(t) for t, c in pairs)
    contrib = sum(c * run.contributions[t] for t, c in pairs)
    return float(est), contrib


def _weighted_var(values: np.ndarray, weights: np.ndarray | None) -> float:
    if weights is None:
        return float(np.var(values, ddof=1)) if len(values) > 1 else 0.0
    m = weighted_mean(values, weights)
    return float(weights @ (values - m) ** 2 / weights.sum())


def _effective_n(weights: np.ndarray | None, n: int) -> float:
    if weights is None:
        return float(n)
    return float(weights.sum() ** 2 / (weights @ weights))


def _estimate_from_run(run: CrossfitRun, label: str, pairs, level: float = 0.95) -> EffectEstimate:
    est, contrib = _combine(run, pairs)
    n = len(contrib)
    diag: dict[str, Any] = {"fold_sizes": run.plan.sizes().tolist(), "fold_attempts": run.plan.attempts}
    if run.mode.name in ("dr", "sn_dr", "ipw"):
        diag["weight_means"] = run.weight_mean_table()
    if run.mode.broken:
        diag["misspecified"] = list(run.mode.broken)
    ci_low = ci_high = est
    se = float("nan")
    method = "none"
    if run.mode.name in ("dr", "sn_dr"):
        rho = np.sqrt(_weighted_var(contrib, run.row_weights))
        se = float(rho / np.sqrt(_effective_n(run.row_weights, n)))
        half = norm.ppf(0.5 + level / 2) * se
        ci_low, ci_high, method = est - half, est + half, "analytic"
        diag["rho"] = float(rho)
    frac = run.clipped_fraction
    return EffectEstimate(
        effect=label, x0=run.x0, x1=run.x1, estimate=est, ci_low=ci_low, ci_high=ci_high,
        ci_method=method, level=level, folds=run.plan.folds, mode=run.mode.label(), seed=run.seed, n=n,
        std_error=se, clipped_fraction=frac, positivity_warning=frac > POSITIVITY_WARN_FRACTION,
        terms={t: run.term(t) for t, _ in pairs}, diagnostics=diag, contributions=contrib,
    )


def crossfit_nested_vde(cohort: Cohort, x0: int = 0, x1: int = 1, folds: int = 5, mode="dr",
                        learners="ridge", seed: int = 0, clip: float = DEFAULT_CLIP, jobs: int = 1,
                        level: float = 0.95) -> EffectEstimate:
    """E[Y_{x1, V_{x0, W_{x1}}}]."""
    run = crossfit(cohort, ("vde",), x0, x1, folds, mode, learners, clip, seed, jobs)
    return _estimate_from_run(run, "nested_vde", (("vde", 1.0),), level)


def crossfit_backdoor_mean(cohort: Cohort, x: int = 1, folds: int = 5, mode="dr", learners="ridge",
                           seed: int = 0, clip: float = DEFAULT_CLIP, jobs: int = 1,
                           level: float = 0.95) -> EffectEstimate:
    """E[Y_x] by cross-fitted AIPW."""
    run = crossfit(cohort, ("m1",), 1 - x, x, folds, mode, learners, clip, seed, jobs)
    est = _estimate_from_run(run, "mean_Yx", (("m1", 1.0),), level)
    est.x0 = est.x1 = x
    return est


def crossfit_nested_nde(cohort: Cohort, mediators: str = "wv", x0: int = 0, x1: int = 1, folds: int = 5,
                        mode="dr", learners="ridge", seed: int = 0, clip: float = DEFAULT_CLIP,
                        jobs: int = 1, level: float = 0.95) -> EffectEstimate:
    """E[Y_{x1, M_{x0}}] with M = (W, V) for ``mediators='wv'`` or M = V for ``'v'``."""
    term = "nde" if mediators == "wv" else "nde_v"
    if mediators not in ("wv", "v"):
        raise EstimationError(f"unknown mediator selector {mediators!r}")
    run = crossfit(cohort, (term,), x0, x1, folds, mode, learners, clip, seed, jobs)
    return _estimate_from_run(run, "nested_nde", ((term, 1.0),), level)


def estimate_effects(cohort: Cohort, effects=EFFECTS, x0: int = 0, x1: int = 1, folds: int = 5, mode="dr",
                     learners="ridge", seed: int = 0, clip: float = DEFAULT_CLIP, jobs: int = 1,
                     level: float = 0.95) -> dict[str, EffectEstimate]:
    """Several effects from a single cross-fitted run (shared terms computed once)."""
    effects = [e.replace("-", "_") for e in effects]
    bad = set(effects) - set(EFFECTS)
    if bad:
        raise EstimationError(f"unknown effects {sorted(bad)}; expected {EFFECTS}")
    terms = {t for e in effects for t, _ in EFFECT_TERMS[e]}
    run = crossfit(cohort, terms, x0, x1, folds, mode, learners, clip, seed, jobs)
    return {e: _estimate_from_run(run, e, EFFECT_TERMS[e], level) for e in effects}


def estimate_effect(cohort: Cohort, effect: str = "vde", x0: int = 0, x1: int = 1, folds: int = 5, mode="dr",
                    learners="ridge", seed: int = 0, clip: float = DEFAULT_CLIP, jobs: int = 1,
                    level: float = 0.95) -> EffectEstimate:
    """One effect of ``te | nde | nie | nie_star | vde`` as a difference of cross-fitted terms."""
    return estimate_effects(cohort, (effect,), x0, x1, folds, mode, learners, seed, clip, jobs, level)[
        effect.replace("-", "_")
    ]
