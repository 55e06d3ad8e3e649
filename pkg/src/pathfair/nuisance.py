"""Nuisance functions for the nested-mean estimators.

Importance weights are never built from densities of W or V.  Each density
ratio is rewritten with Bayes' rule as a ratio of exposure propensities, so
only classifiers of X given growing covariate sets are needed:

    pi1 = 1[X=x1] / p(x1|Z)
    pi2 = 1[X=x0] p(x1|W,Z) / (p(x0|W,Z) p(x1|Z))
    pi3 = 1[X=x1] p(x0|V,W,Z) p(x1|W,Z) / (p(x1|V,W,Z) p(x0|W,Z) p(x1|Z))

Every component probability is clipped to [eps, 1 - eps] before the ratio
is formed.  The nested regressions are fit on exposure-restricted rows:
mu3 = E[Y | V, W, Z] on X = x1, mu2 = E[mu3 | W, Z] on X = x0 and
mu1 = E[mu2 | Z] on X = x1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cohort import Cohort
from .learners import (
    ConstantClassifier,
    ConstantRegressor,
    LearnerSet,
    ProbClassifier,
    Regressor,
    fit_classifier,
    fit_regressor,
)

DEFAULT_CLIP = 1e-4
POSITIVITY_WARN_FRACTION = 0.05


class NuisanceError(ValueError):
    pass


# feature blocks, always in the order (v, w, z)


def feats_z(c: Cohort) -> np.ndarray:
    return c.z


def feats_wz(c: Cohort) -> np.ndarray:
    return np.hstack([c.w, c.z])


def feats_vwz(c: Cohort) -> np.ndarray:
    return np.hstack([c.v, c.w, c.z])


def feats_vz(c: Cohort) -> np.ndarray:
    return np.hstack([c.v, c.z])


def mediator_feats(c: Cohort, mediators: str) -> np.ndarray:
    if mediators == "wv":
        return feats_vwz(c)
    if mediators == "v":
        return feats_vz(c)
    raise NuisanceError(f"unknown mediator selector {mediators!r}")


# ---------------------------------------------------------------------------
# propensities


@dataclass
class ClipCounter:
    clipped: int = 0
    total: int = 0

    @property
    def fraction(self) -> float:
        return self.clipped / self.total if self.total else 0.0


def clip_probability(p1: np.ndarray, eps: float, counter: ClipCounter | None = None) -> np.ndarray:
    """Clip P(X=1) into [eps, 1 - eps]; P(X=0) = 1 - result is then clipped too."""
    if not 0.0 < eps < 0.5:
        raise NuisanceError("clip epsilon must lie in (0, 0.5)")
    p1 = np.asarray(p1, float)
    out = np.clip(p1, eps, 1.0 - eps)
    if counter is not None:
        counter.clipped += int(np.count_nonzero(out != p1))
        counter.total += p1.size
    return out


def prob_of(p1: np.ndarray, x: int) -> np.ndarray:
    return p1 if x == 1 else 1.0 - p1


@dataclass(frozen=True)
class PropensitySet:
    """Classifiers for P(X=1 | Z), P(X=1 | W,Z), P(X=1 | V,W,Z) and P(X=1 | V,Z).

    Unneeded models are ``None``.  P(X | V,W,Z) doubles as P(X | M,Z) for the
    merged mediator; P(X | V,Z) serves the V-only mediator.
    """

    p_z: ProbClassifier
    p_wz: ProbClassifier | None = None
    p_vwz: ProbClassifier | None = None
    p_vz: ProbClassifier | None = None
    eps: float = DEFAULT_CLIP

    def p_m(self, mediators: str) -> ProbClassifier:
        model = self.p_vwz if mediators == "wv" else self.p_vz
        if model is None:
            raise NuisanceError(f"propensity for mediators {mediators!r} was not fitted")
        return model


def fit_propensities(train: Cohort, learners: LearnerSet, need_wz=True, need_vwz=True, need_vz=False,
                     eps: float = DEFAULT_CLIP, constant: bool = False) -> PropensitySet:
    """Fit the exposure classifiers; ``constant`` replaces each by the marginal X frequency."""
    wts = train.weights
    x = train.x
    if constant:
        rate = float(np.average(x, weights=wts))
        c = ConstantClassifier(rate)
        return PropensitySet(c, c if need_wz else None, c if need_vwz else None, c if need_vz else None, eps)
    cfg = learners.classifier

    def fit(feats):
        return fit_classifier(feats, x, cfg, wts)

    return PropensitySet(
        fit(feats_z(train)),
        fit(feats_wz(train)) if need_wz else None,
        fit(feats_vwz(train)) if need_vwz else None,
        fit(feats_vz(train)) if need_vz else None,
        eps,
    )


@dataclass(frozen=True)
class PiWeights:
    pi1: np.ndarray
    pi2: np.ndarray
    pi3: np.ndarray

    def families(self) -> dict[str, np.ndarray]:
        return {"pi1": self.pi1, "pi2": self.pi2, "pi3": self.pi3}


def pi_weights(x, p1_z, p1_wz, p1_vwz, x0: int, x1: int, eps: float = DEFAULT_CLIP,
               counter: ClipCounter | None = None) -> PiWeights:
    """Bayes-form importance weights from unclipped P(X=1 | .) evaluations."""
    x = np.asarray(x)
    cz = clip_probability(p1_z, eps, counter)
    cwz = clip_probability(p1_wz, eps, counter)
    cvwz = clip_probability(p1_vwz, eps, counter)
    in1 = (x == x1).astype(float)
    in0 = (x == x0).astype(float)
    pi1 = in1 / prob_of(cz, x1)
    pi2 = in0 * prob_of(cwz, x1) / (prob_of(cwz, x0) * prob_of(cz, x1))
    pi3 = in1 * prob_of(cvwz, x0) * prob_of(cwz, x1) / (prob_of(cvwz, x1) * prob_of(cwz, x0) * prob_of(cz, x1))
    return PiWeights(pi1, pi2, pi3)


def nde_pi_weights(x, p1_z, p1_mz, x0: int, x1: int, eps: float = DEFAULT_CLIP,
                   counter: ClipCounter | None = None) -> tuple[np.ndarray, np.ndarray]:
    """(pi1, pi2) for the two-stage nested mean with mediator block M."""
    x = np.asarray(x)
    cz = clip_probability(p1_z, eps, counter)
    cmz = clip_probability(p1_mz, eps, counter)
    pi1 = (x == x0) / prob_of(cz, x0)
    pi2 = (x == x1) * prob_of(cmz, x0) / (prob_of(cmz, x1) * prob_of(cz, x0))
    return pi1, pi2


def weighted_mean(values: np.ndarray, weights: np.ndarray | None = None) -> float:
    if weights is None:
        return float(np.mean(values))
    return float(np.dot(weights, values) / np.sum(weights))


def self_normalize(weights, sample_weights=None) -> np.ndarray:
    """Divide by the empirical (optionally row-weighted) mean so the mean becomes 1."""
    w = np.asarray(weights, float)
    if not np.all(np.isfinite(w)):
        raise NuisanceError("weights must be finite")
    m = weighted_mean(w, sample_weights)
    if not m > 0:
        raise NuisanceError("cannot self-normalize weights with non-positive mean (no rows of the exposure group)")
    return w / m


# ---------------------------------------------------------------------------
# nested regressions


def _fit(feats, target, learners: LearnerSet, wts, broken: bool) -> Regressor:
    if broken:
        return ConstantRegressor(0.0)
    return fit_regressor(feats, target, learners.regressor, wts)


def _subset(c: Cohort, mask: np.ndarray, what: str) -> Cohort:
    if not mask.any():
        raise NuisanceError(f"no rows with X = {what} in the training slice")
    return c.take(np.flatnonzero(mask))


@dataclass(frozen=True)
class NestedRegressionSet:
    """mu3(V,W,x1,Z), mu2(W,x0,Z), mu1(x1,Z) for the nested VDE mean."""

    mu3: Regressor
    mu2: Regressor
    mu1: Regressor

    def eval_mu3(self, c: Cohort) -> np.ndarray:
        return self.mu3.predict(feats_vwz(c))

    def eval_mu2(self, c: Cohort) -> np.ndarray:
        return self.mu2.predict(feats_wz(c))

    def eval_mu1(self, c: Cohort) -> np.ndarray:
        return self.mu1.predict(feats_z(c))


def fit_nested(train: Cohort, learners: LearnerSet, x0: int = 0, x1: int = 1,
               broken: bool = False) -> NestedRegressionSet:
    """Three-stage nested regression; each stage regresses the previous stage's prediction."""
    g1 = _subset(train, train.x == x1, str(x1))
    g0 = _subset(train, train.x == x0, str(x0))
    mu3 = _fit(feats_vwz(g1), g1.y, learners, g1.weights, broken)
    mu2 = _fit(feats_wz(g0), mu3.predict(feats_vwz(g0)), learners, g0.weights, broken)
    mu1 = _fit(feats_z(g1), mu2.predict(feats_wz(g1)), learners, g1.weights, broken)
    return NestedRegressionSet(mu3, mu2, mu1)


@dataclass(frozen=True)
class TwoStageRegressionSet:
    """mu2(M,x1,Z) and mu1(x0,Z) for the merged or V-only nested mean."""

    mu2: Regressor
    mu1: Regressor
    mediators: str

    def eval_mu2(self, c: Cohort) -> np.ndarray:
        return self.mu2.predict(mediator_feats(c, self.mediators))

    def eval_mu1(self, c: Cohort) -> np.ndarray:
        return self.mu1.predict(feats_z(c))


def fit_two_stage(train: Cohort, mediators: str, learners: LearnerSet, x0: int = 0, x1: int = 1,
                  broken: bool = False) -> TwoStageRegressionSet:
    g1 = _subset(train, train.x == x1, str(x1))
    g0 = _subset(train, train.x == x0, str(x0))
    mu2 = _fit(mediator_feats(g1, mediators), g1.y, learners, g1.weights, broken)
    mu1 = _fit(feats_z(g0), mu2.predict(mediator_feats(g0, mediators)), learners, g0.weights, broken)
    return TwoStageRegressionSet(mu2, mu1, mediators)


def fit_nde_nuisances(train: Cohort, mediators: str, learners: LearnerSet, x0: int = 0, x1: int = 1,
                      eps: float = DEFAULT_CLIP, broken_mu=False, broken_pi=False
                      ) -> tuple[PropensitySet, TwoStageRegressionSet]:
    props = fit_propensities(train, learners, need_wz=False, need_vwz=mediators == "wv",
                             need_vz=mediators == "v", eps=eps, constant=broken_pi)
    return props, fit_two_stage(train, mediators, learners, x0, x1, broken_mu)


def fit_outcome(train: Cohort, x: int, learners: LearnerSet, broken: bool = False) -> Regressor:
    """mu(x, Z) = E[Y | X = x, Z] for the backdoor mean."""
    g = _subset(train, train.x == x, str(x))
    return _fit(feats_z(g), g.y, learners, g.weights, broken)
