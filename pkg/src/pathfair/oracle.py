"""Ground-truth values for every estimand, by two independent routes.

Route one works on the structural model itself: Monte Carlo over exogenous
draws (any kind), exact enumeration of finite noise, one-dimensional
quadrature for the binary threshold model, or closed-form expectations for the
linear model.  Route two evaluates the identification formulas on a finite
joint table of (z, x, w, v) cells with the conditional outcome mean per cell.
Agreement between the routes checks identification; agreement between an
estimator and either route checks estimation.

Effects are linear combinations of nested potential-outcome means
``E[Y_{a, W_b, V_{c, W_d}}]``, written as exposure tuples ``(a, b, c, d)``:

======================  ======================================
``mean_Yx``             ``(x1, x1, x1, x1)``
``nested_vde``          ``(x1, x1, x0, x1)``
``nested_nde``          ``(x1, x0, x0, x0)``  (W and V both at x0)
``nested_nde`` V-only   ``(x1, x1, x0, x0)``  (only V at x0)
======================  ======================================

The V-only tuple is the counterfactual an analyst ignoring W would name.  Its
identification formula (which treats V as the lone mediator) is a different
quantity whenever W carries part of the X -> V path; both are exposed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import integrate
from scipy.special import ndtr

from . import scm as _scm
from .cohort import Cohort

QUERY_KINDS = ("mean_Yx", "nested_vde", "nested_nde", "te", "nde", "nie", "nie_star", "vde")
MEDIATORS = ("wv", "v")


class OracleError(ValueError):
    pass


class PositivityError(OracleError):
    """A conditional needed by the identification formula has zero mass."""

    def __init__(self, cell: str):
        super().__init__(f"positivity violated: zero probability for conditioning cell {cell}")
        self.cell = cell


@dataclass(frozen=True)
class EffectQuery:
    kind: str
    x0: int = 0
    x1: int = 1
    mediators: str = "wv"

    def __post_init__(self):
        if self.kind not in QUERY_KINDS:
            raise OracleError(f"unknown query kind {self.kind!r}; expected one of {QUERY_KINDS}")
        if self.x0 not in (0, 1) or self.x1 not in (0, 1):
            raise OracleError("x0 and x1 must be 0 or 1")
        if self.mediators not in MEDIATORS:
            raise OracleError(f"mediators must be one of {MEDIATORS}")

    def terms(self) -> dict[tuple[int, int, int, int], float]:
        """Coefficients on nested potential-outcome means; equal tuples are merged."""
        a, b = self.x0, self.x1
        m1, m0 = (b, b, b, b), (a, a, a, a)
        vde = (b, b, a, b)
        nde = (b, a, a, a)
        nie_star = (b, b, a, a)
        combo = {
            "mean_Yx": [(m1, 1.0)],
            "nested_vde": [(vde, 1.0)],
            "nested_nde": [(nie_star if self.mediators == "v" else nde, 1.0)],
            "te": [(m1, 1.0), (m0, -1.0)],
            "nde": [(nde, 1.0), (m0, -1.0)],
            "nie": [(m1, 1.0), (nde, -1.0)],
            "nie_star": [(m1, 1.0), (nie_star, -1.0)],
            "vde": [(m1, 1.0), (vde, -1.0)],
        }[self.kind]
        out: dict[tuple[int, int, int, int], float] = {}
        for t, c in combo:
            out[t] = out.get(t, 0.0) + c
        return {t: c for t, c in out.items() if c != 0.0}

    def to_dict(self) -> dict:
        return {"kind": self.kind, "x0": self.x0, "x1": self.x1, "mediators": self.mediators}


@dataclass(frozen=True)
class OracleValue:
    query: EffectQuery
    value: float
    std_error: float
    n_mc: int
    seed: int
    method: str

    def to_dict(self) -> dict:
        return {
            "query": self.query.to_dict(),
            "value": self.value,
            "std_error": self.std_error,
            "n_mc": self.n_mc,
            "seed": self.seed,
            "method": self.method,
        }


def _contrast(spec: _scm.ScmSpec, u, query: EffectQuery) -> np.ndarray:
    n = len(u["u_xz"])
    out = np.zeros(n)
    for (a, b, c, d), coef in query.terms().items():
        out += coef * _scm.potential_outcome(spec, u, a, b, c, d)
    return out


def mc_counterfactual(spec: _scm.ScmSpec, query: EffectQuery, n_mc: int = 1_000_000, seed: int = 0,
                      chunk: int = 500_000) -> OracleValue:
    """Monte Carlo mean of the per-draw contrast, with its standard error.

    Draws are split into fixed-size partitions, each seeded from
    ``(spec.seed, seed, partition index)`` and reduced in partition order, so
    the value does not depend on how partitions are scheduled.
    """
    n_mc = int(n_mc)
    if n_mc < 1:
        raise OracleError("n_mc must be at least 1")
    total = total_sq = 0.0
    for k, start in enumerate(range(0, n_mc, chunk)):
        m = min(chunk, n_mc - start)
        rng = np.random.default_rng([int(spec.seed), int(seed), k])
        vals = _contrast(spec, _scm.draw_noise(spec, m, rng), query)
        total += vals.sum()
        total_sq += vals @ vals
    mean = total / n_mc
    var = max(total_sq / n_mc - mean * mean, 0.0) * n_mc / max(n_mc - 1, 1)
    return OracleValue(query, float(mean), float(np.sqrt(var / n_mc)), n_mc, int(seed), "monte-carlo")


def enumerate_exact(spec: _scm.ScmSpec, query: EffectQuery) -> float:
    """Exact expectation by summing over every atom of finite noise."""
    if spec.kind != "discrete-enumerable":
        raise OracleError(f"enumeration needs a discrete-enumerable spec, got {spec.kind!r}")
    u, prob = _enumerated(spec)
    return float(prob @ _contrast(spec, u, query))


_ENUM_CACHE: dict[int, tuple] = {}


def _enumerated(spec: _scm.ScmSpec):
    key = id(spec)
    hit = _ENUM_CACHE.get(key)
    if hit is None or hit[0] is not spec:
        u, prob = _scm.enumerate_noise(spec)
        hit = (spec, u, prob)
        _ENUM_CACHE.clear()
        _ENUM_CACHE[key] = hit
    return hit[1], hit[2]


# ---------------------------------------------------------------------------
# binary threshold model: quadrature over the shared confounder


def _scalar(spec, key) -> float:
    return float(np.ravel(spec.weights[key])[0])


def _thr(spec, key) -> float:
    return float(np.ravel(spec.thresholds[key])[0])


def _tail(c, scale: float):
    """P(u > c) for u ~ N(0, scale^2); scale 0 is a point mass at 0."""
    c = np.asarray(c, float)
    if scale == 0.0:
        return (c < 0).astype(float)
    return ndtr(-c / scale)


def _interval(lo, hi, scale: float) -> float:
    """P(lo < u <= hi) for u ~ N(0, scale^2)."""
    if hi <= lo:
        return 0.0
    return float(_tail(lo, scale) - _tail(hi, scale))


def _check_binary(spec):
    if spec.kind != "binary-threshold":
        raise OracleError(f"quadrature oracle needs a binary-threshold spec, got {spec.kind!r}")
    if any(spec.links[k] != "step" for k in ("z", "w", "v", "y")):
        raise OracleError("quadrature oracle needs step links throughout")


def _z_x_table(spec) -> np.ndarray:
    """P(Z = z, X = x) integrated over the shared confounder; shape (2, 2)."""
    s_xz, s_z, s_x = (spec.noise[k].scale for k in ("u_xz", "u_z", "u_x"))
    a_z, t_z = _scalar(spec, "z_uxz"), _thr(spec, "z")
    a_x, b_x, t_x = _scalar(spec, "x_uxz"), _scalar(spec, "x_z"), _thr(spec, "x")
    if s_xz == 0.0:
        raise OracleError("quadrature oracle needs a non-degenerate shared confounder")
    out = np.zeros((2, 2))
    brk = [0.0]
    if s_z == 0.0 and a_z != 0.0:
        brk.append(t_z / a_z)
    for z in (0, 1):
        if s_x == 0.0 and a_x != 0.0:
            brk.append((t_x - b_x * z) / a_x)
    brk = sorted(set(brk))
    edges = [-np.inf] + brk + [np.inf]

    for z in (0, 1):
        for x in (0, 1):
            def f(a, z=z, x=x):
                pz = _tail(t_z - a_z * a, s_z)
                pz = pz if z else 1.0 - pz
                px = _tail(t_x - b_x * z - a_x * a, s_x)
                px = px if x else 1.0 - px
                return float(pz * px) * np.exp(-0.5 * (a / s_xz) ** 2) / (s_xz * np.sqrt(2 * np.pi))

            out[z, x] = sum(
                integrate.quad(f, lo, hi, epsabs=1e-14, epsrel=1e-12, limit=200)[0]
                for lo, hi in zip(edges[:-1], edges[1:])
            )
    return out


def _w_cut(spec, x, z) -> float:
    return _thr(spec, "w") - _scalar(spec, "w_x") * x - _scalar(spec, "w_z") * z


def _p_w(spec, x, z) -> float:
    return float(_tail(_w_cut(spec, x, z), spec.noise["u_w"].scale))


def _p_v(spec, x, z, w) -> float:
    c = _thr(spec, "v") - _scalar(spec, "v_x") * x - _scalar(spec, "v_z") * z - _scalar(spec, "v_w") * w
    return float(_tail(c, spec.noise["u_v"].scale))


def _p_y(spec, x, z, w, v) -> float:
    c = (_thr(spec, "y") - _scalar(spec, "y_x") * x - _scalar(spec, "y_z") * z
         - _scalar(spec, "y_w") * w - _scalar(spec, "y_v") * v)
    return float(_tail(c, spec.noise["u_y"].scale))


def _bern(p: float, b: int) -> float:
    return p if b else 1.0 - p


def quadrature_exact(spec: _scm.ScmSpec, query: EffectQuery) -> float:
    """Exact nested counterfactual means for the binary threshold model.

    Given Z, the only dependence between the two W responses (under
    different exposures) is their shared ``u_w``; their joint law is the
    Gaussian mass of the intersection of two half-lines.
    """
    _check_binary(spec)
    pz = _z_x_table(spec).sum(axis=1)
    s_w = spec.noise["u_w"].scale
    total = 0.0
    for (a, b, c, d), coef in query.terms().items():
        val = 0.0
        for z in (0, 1):
            cb, cd = _w_cut(spec, b, z), _w_cut(spec, d, z)
            for wy in (0, 1):
                for wv in (0, 1):
                    lo = max(cb if wy else -np.inf, cd if wv else -np.inf)
                    hi = min(np.inf if wy else cb, np.inf if wv else cd)
                    pw = _interval(lo, hi, s_w)
                    if pw == 0.0:
                        continue
                    for v in (0, 1):
                        val += pz[z] * pw * _bern(_p_v(spec, c, z, wv), v) * _p_y(spec, a, z, wy, v)
        total += coef * val
    return float(total)


def linear_exact(spec: _scm.ScmSpec, query: EffectQuery) -> float:
    """Closed-form nested means for the linear model (noise has mean zero)."""
    if spec.kind != "linear-gaussian" or any(spec.links[k] != "identity" for k in ("z", "w", "v", "y")):
        raise OracleError("closed-form oracle needs a linear-gaussian spec with identity links")
    W, T = spec.weights, spec.thresholds
    ez = -T["z"]

    def ew(x):
        return W["w_x"] * x + W["w_z"] @ ez - T["w"]

    def ev(x, w):
        return W["v_x"] * x + W["v_z"] @ ez + W["v_w"] @ w - T["v"]

    total = 0.0
    for (a, b, c, d), coef in query.terms().items():
        ey = (W["y_x"][0] * a + W["y_z"] @ ez + W["y_w"] @ ew(b) + W["y_v"] @ ev(c, ew(d)) - T["y"][0])
        total += coef * float(ey)
    return total


def exact_value(spec: _scm.ScmSpec, query: EffectQuery) -> float:
    """Exact value where the model kind admits one; nonlinear models raise."""
    if spec.kind == "discrete-enumerable":
        return enumerate_exact(spec, query)
    if spec.kind == "binary-threshold":
        return quadrature_exact(spec, query)
    if spec.kind == "linear-gaussian":
        return linear_exact(spec, query)
    raise OracleError(f"no exact oracle for {spec.kind!r}; use mc_counterfactual")


# ---------------------------------------------------------------------------
# joint tables and identification formulas


@dataclass(frozen=True)
class JointTable:
    """Finite distribution over (z, x, w, v) cells with E[Y | cell].

    ``prob`` sums to one; ``ey`` is the conditional outcome mean per cell.
    """

    z: np.ndarray
    x: np.ndarray
    w: np.ndarray
    v: np.ndarray
    prob: np.ndarray
    ey: np.ndarray
    z_codes: np.ndarray = field(repr=False, default=None)
    w_codes: np.ndarray = field(repr=False, default=None)
    v_codes: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        if abs(self.prob.sum() - 1.0) > 1e-9 or np.any(self.prob < 0):
            raise OracleError("joint probabilities must be non-negative and sum to one")

    @property
    def n_cells(self) -> int:
        return len(self.prob)

    def to_cohort(self) -> Cohort:
        """Weighted cohort with one row per cell (weights = probabilities)."""
        return Cohort(z=self.z, x=self.x.astype(np.int64), w=self.w, v=self.v, y=self.ey, weights=self.prob)

    def dense(self, max_cells: int = 5_000_000):
        """Arrays P[z, x, w, v] and EY[z, x, w, v] over unique block values."""
        zu, zc = np.unique(self.z, axis=0, return_inverse=True)
        wu, wc = np.unique(self.w, axis=0, return_inverse=True)
        vu, vc = np.unique(self.v, axis=0, return_inverse=True)
        shape = (len(zu), 2, len(wu), len(vu))
        if np.prod(shape, dtype=float) > max_cells:
            raise OracleError(f"joint table too large for dense evaluation: {shape}")
        P = np.zeros(shape)
        S = np.zeros(shape)
        idx = (zc.reshape(-1), self.x.astype(int), wc.reshape(-1), vc.reshape(-1))
        np.add.at(P, idx, self.prob)
        np.add.at(S, idx, self.prob * self.ey)
        EY = np.divide(S, P, out=np.zeros(shape), where=P > 0)
        return P, EY, (zu, wu, vu)


def tabulate(cohort: Cohort) -> JointTable:
    """Empirical joint of a cohort with discrete covariates (weights respected)."""
    w = cohort.row_weights()
    keys = np.column_stack([cohort.z, cohort.x[:, None], cohort.w, cohort.v])
    uniq, inv = np.unique(keys, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    mass = np.bincount(inv, weights=w, minlength=len(uniq))
    sy = np.bincount(inv, weights=w * cohort.y, minlength=len(uniq))
    dz, dw = cohort.z.shape[1], cohort.w.shape[1]
    keep = mass > 0
    uniq, mass, sy = uniq[keep], mass[keep], sy[keep]
    return JointTable(
        z=uniq[:, :dz],
        x=uniq[:, dz].astype(np.int64),
        w=uniq[:, dz + 1 : dz + 1 + dw],
        v=uniq[:, dz + 1 + dw :],
        prob=mass / mass.sum(),
        ey=sy / mass,
    )


def enumerate_joint(spec: _scm.ScmSpec) -> JointTable:
    """Exact observational joint of a discrete-enumerable spec."""
    if spec.kind != "discrete-enumerable":
        raise OracleError(f"enumeration needs a discrete-enumerable spec, got {spec.kind!r}")
    u, prob = _enumerated(spec)
    z, x, w, v, y = _scm.observe(spec, u)
    return tabulate(Cohort(z=z, x=x.astype(np.int64), w=w, v=v, y=y, weights=prob))


def quadrature_joint(spec: _scm.ScmSpec) -> JointTable:
    """Exact observational joint of the binary threshold model."""
    _check_binary(spec)
    pzx = _z_x_table(spec)
    rows = []
    for z in (0, 1):
        for x in (0, 1):
            pw = _p_w(spec, x, z)
            for w in (0, 1):
                pv = _p_v(spec, x, z, w)
                for v in (0, 1):
                    p = pzx[z, x] * _bern(pw, w) * _bern(pv, v)
                    rows.append((z, x, w, v, p, _p_y(spec, x, z, w, v)))
    a = np.array(rows)
    a = a[a[:, 4] > 0]
    return JointTable(
        z=a[:, [0]], x=a[:, 1].astype(np.int64), w=a[:, [2]], v=a[:, [3]],
        prob=a[:, 4] / a[:, 4].sum(), ey=a[:, 5],
    )


def exact_joint(spec: _scm.ScmSpec) -> JointTable:
    if spec.kind == "discrete-enumerable":
        return enumerate_joint(spec)
    if spec.kind == "binary-threshold":
        return quadrature_joint(spec)
    raise OracleError(f"no exact joint for {spec.kind!r}")


def _fmt(names, values) -> str:
    return "(" + ", ".join(f"{n}={np.asarray(v).tolist()}" for n, v in zip(names, values)) + ")"


def _ratio(num: np.ndarray, den: np.ndarray, needed: np.ndarray, describe) -> np.ndarray:
    """num / den where ``needed``; raises naming the first needed cell with den = 0."""
    bad = needed & ~(den > 0)
    if bad.any():
        raise PositivityError(describe(tuple(int(i[0]) for i in np.nonzero(bad))))
    return np.divide(num, den, out=np.zeros(np.broadcast(num, den).shape), where=den > 0)


def backdoor_eval(joint: JointTable, x: int) -> float:
    """sum_z E[Y | x, z] P(z)."""
    P, EY, (zu, _, _) = joint.dense()
    pz = P.sum(axis=(1, 2, 3))
    pxz = P[:, x].sum(axis=(1, 2))
    ey_xz = _ratio((P[:, x] * EY[:, x]).sum(axis=(1, 2)), pxz, pz > 0,
                   lambda c: _fmt(("x", "z"), (x, zu[c[0]])))
    return float(ey_xz @ pz)


def idformula_eval(joint: JointTable, x0: int = 0, x1: int = 1, term: str = "nested_vde") -> float:
    """Identification formula for a nested counterfactual mean.

    ``nested_vde``: sum E[Y | x1, w, v, z] P(v | x0, w, z) P(w | x1, z) P(z).
    ``nested_nde``: sum E[Y | x1, m, z] P(m | x0, z) P(z) with m = (w, v).
    ``nested_v``:   sum E[Y | x1, v, z] P(v | x0, z) P(z), ignoring W.
    ``backdoor``:   sum E[Y | x1, z] P(z).
    """
    if term == "backdoor":
        return backdoor_eval(joint, x1)
    P, EY, (zu, wu, vu) = joint.dense()
    pz = P.sum(axis=(1, 2, 3))
    if term == "nested_vde":
        p_x1z = P[:, x1].sum(axis=(1, 2))
        p_w = _ratio(P[:, x1].sum(axis=2), p_x1z[:, None], (pz > 0)[:, None],
                     lambda c: _fmt(("x", "z"), (x1, zu[c[0]])))
        p_x0wz = P[:, x0].sum(axis=2)
        p_v = _ratio(P[:, x0], p_x0wz[:, :, None], (p_w > 0)[:, :, None],
                     lambda c: _fmt(("x", "w", "z"), (x0, wu[c[1]], zu[c[0]])))
        need = (p_v > 0) & (p_w > 0)[:, :, None] & (pz > 0)[:, None, None]
        _ratio(EY[:, x1], P[:, x1], need,
               lambda c: _fmt(("x", "w", "v", "z"), (x1, wu[c[1]], vu[c[2]], zu[c[0]])))
        return float(np.einsum("zwv,zwv,zw,z->", EY[:, x1], p_v, p_w, pz))
    if term == "nested_nde":
        p_x0z = P[:, x0].sum(axis=(1, 2))
        p_m = _ratio(P[:, x0], p_x0z[:, None, None], (pz > 0)[:, None, None],
                     lambda c: _fmt(("x", "z"), (x0, zu[c[0]])))
        _ratio(EY[:, x1], P[:, x1], (p_m > 0),
               lambda c: _fmt(("x", "w", "v", "z"), (x1, wu[c[1]], vu[c[2]], zu[c[0]])))
        return float(np.einsum("zwv,zwv,z->", EY[:, x1], p_m, pz))
    if term == "nested_v":
        p_x0z = P[:, x0].sum(axis=(1, 2))
        p_v = _ratio(P[:, x0].sum(axis=1), p_x0z[:, None], (pz > 0)[:, None],
                     lambda c: _fmt(("x", "z"), (x0, zu[c[0]])))
        p_x1vz = P[:, x1].sum(axis=1)
        ey_v = _ratio((P[:, x1] * EY[:, x1]).sum(axis=1), p_x1vz, p_v > 0,
                      lambda c: _fmt(("x", "v", "z"), (x1, vu[c[1]], zu[c[0]])))
        return float(np.einsum("zv,zv,z->", ey_v, p_v, pz))
    raise OracleError(f"unknown identification term {term!r}")


def identified_effect(joint: JointTable, query: EffectQuery) -> float:
    """Effect assembled from identification formulas (NIE* uses the V-only formula)."""
    a, b = query.x0, query.x1
    m1 = backdoor_eval(joint, b)
    m0 = backdoor_eval(joint, a)
    nested_m = "nested_v" if query.mediators == "v" else "nested_nde"
    if query.kind == "mean_Yx":
        return m1
    if query.kind == "nested_vde":
        return idformula_eval(joint, a, b, "nested_vde")
    if query.kind == "nested_nde":
        return idformula_eval(joint, a, b, nested_m)
    if query.kind == "te":
        return m1 - m0
    if query.kind == "nde":
        return idformula_eval(joint, a, b, "nested_nde") - m0
    if query.kind == "nie":
        return m1 - idformula_eval(joint, a, b, "nested_nde")
    if query.kind == "nie_star":
        return m1 - idformula_eval(joint, a, b, "nested_v")
    return m1 - idformula_eval(joint, a, b, "nested_vde")


@lru_cache(maxsize=None)
def binary_reference() -> dict[str, float]:
    """Exact reference values for the shipped binary model (x0 = 0, x1 = 1)."""
    spec = _scm.binary_scm()
    joint = quadrature_joint(spec)
    out = {k: quadrature_exact(spec, EffectQuery(k)) for k in ("te", "nde", "nie", "vde", "nie_star")}
    for k in ("mean_Yx", "nested_vde", "nested_nde"):
        out[k] = quadrature_exact(spec, EffectQuery(k))
    out["mean_Y0"] = quadrature_exact(spec, EffectQuery("mean_Yx", 1, 0))
    out["nested_v_formula"] = idformula_eval(joint, 0, 1, "nested_v")
    out["nie_star_formula"] = identified_effect(joint, EffectQuery("nie_star"))
    return out
