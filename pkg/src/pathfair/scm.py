"""Structural causal models over the two-mediator fairness graph.

Every model here shares one graph::

    Z -> {X, W, V, Y},  X -> {W, V, Y},  W -> {V, Y},  V -> Y,  X <-> Z

where the latent X-Z confounding is carried by a shared exogenous term
``u_xz``.  Mechanisms differ by ``kind``:

* ``binary-threshold``: singleton binary variables, thresholds of linear
  indices with standard normal noise.
* ``linear-gaussian``: continuous Z, W, V, Y; binary X from a thresholded
  linear index.
* ``nonlinear-surrogate``: random oblivious-tree ensembles; binary Y drawn
  through a sigmoid.
* ``discrete-enumerable``: threshold mechanisms with finite-support noise,
  so the full joint can be enumerated exactly.

The same structural functions serve observational sampling and the
counterfactual oracles (see :func:`potential_outcome`).
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy.special import expit, ndtr

from .cohort import Cohort

KINDS = ("binary-threshold", "linear-gaussian", "nonlinear-surrogate", "discrete-enumerable")
LINKS = ("step", "identity", "sigmoid-bernoulli")
NOISE_KEYS = ("u_xz", "u_z", "u_x", "u_w", "u_v", "u_y")


class ScmError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSpec:
    """Distribution of one exogenous component (applied i.i.d. per dimension)."""

    kind: str = "normal"
    scale: float = 1.0
    atoms: tuple[float, ...] = ()
    probs: tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind == "normal":
            if self.scale < 0:
                raise ScmError("noise scale must be non-negative")
        elif self.kind == "discrete":
            if len(self.atoms) == 0 or len(self.atoms) != len(self.probs):
                raise ScmError("discrete noise needs matching atoms and probs")
            if min(self.probs) <= 0 or abs(sum(self.probs) - 1.0) > 1e-12:
                raise ScmError("discrete noise probs must be positive and sum to 1")
        else:
            raise ScmError(f"unknown noise kind {self.kind!r}")

    @property
    def finite(self) -> bool:
        return self.kind == "discrete" or self.scale == 0.0

    def support(self) -> tuple[np.ndarray, np.ndarray]:
        if self.kind == "discrete":
            return np.asarray(self.atoms, float), np.asarray(self.probs, float)
        if self.scale == 0.0:
            return np.zeros(1), np.ones(1)
        raise ScmError("normal noise has no finite support")

    def draw(self, rng: np.random.Generator, shape) -> np.ndarray:
        if self.kind == "discrete":
            idx = rng.choice(len(self.atoms), size=shape, p=np.asarray(self.probs))
            return np.asarray(self.atoms, float)[idx]
        return self.scale * rng.standard_normal(shape)

    def to_dict(self) -> dict:
        if self.kind == "discrete":
            return {"kind": "discrete", "atoms": list(self.atoms), "probs": list(self.probs)}
        return {"kind": "normal", "scale": self.scale}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSpec":
        if d["kind"] == "discrete":
            return cls("discrete", atoms=tuple(d["atoms"]), probs=tuple(d["probs"]))
        return cls("normal", scale=float(d.get("scale", 1.0)))


@dataclass(frozen=True)
class TreeEnsemble:
    """Sum of oblivious trees: every level of a tree shares one split."""

    features: np.ndarray  # (n_trees, depth) int
    thresholds: np.ndarray  # (n_trees, depth)
    leaves: np.ndarray  # (n_trees, 2**depth)

    @property
    def n_trees(self) -> int:
        return int(self.features.shape[0])

    def predict(self, inputs: np.ndarray) -> np.ndarray:
        out = np.zeros(inputs.shape[0])
        for t in range(self.n_trees):
            code = np.zeros(inputs.shape[0], dtype=np.int64)
            for level, (f, thr) in enumerate(zip(self.features[t], self.thresholds[t])):
                code |= (inputs[:, f] > thr).astype(np.int64) << level
            out += self.leaves[t][code]
        return out

    def to_dict(self) -> dict:
        return {
            "features": self.features.tolist(),
            "thresholds": self.thresholds.tolist(),
            "leaves": self.leaves.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict, depth: int) -> "TreeEnsemble":
        feats = np.asarray(d["features"], dtype=np.int64).reshape(-1, depth)
        return cls(
            features=feats,
            thresholds=np.asarray(d["thresholds"], float).reshape(-1, depth),
            leaves=np.asarray(d["leaves"], float).reshape(-1, 2**depth),
        )


@dataclass(frozen=True)
class ScmSpec:
    kind: str
    dim_z: int
    dim_w: int
    dim_v: int
    weights: dict[str, np.ndarray]
    thresholds: dict[str, np.ndarray]
    noise: dict[str, NoiseSpec]
    links: dict[str, str]
    seed: int = 0
    ensembles: dict[str, list[TreeEnsemble]] = field(default_factory=dict)
    depth: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ScmError(f"unknown mechanism kind {self.kind!r}")
        for name in ("dim_z", "dim_w", "dim_v"):
            if int(getattr(self, name)) < 1:
                raise ScmError(f"{name} must be a positive integer")
        if not 0 <= int(self.seed) < 2**64:
            raise ScmError("seed must be a 64-bit unsigned integer")
        missing = [k for k in NOISE_KEYS if k not in self.noise]
        if missing:
            raise ScmError(f"missing noise specs: {missing}")
        if self.kind == "discrete-enumerable":
            infinite = [k for k in NOISE_KEYS if not self.noise[k].finite]
            if infinite:
                raise ScmError(f"discrete-enumerable spec needs finite noise; got normal {infinite}")
        for arr in list(self.weights.values()) + list(self.thresholds.values()):
            arr.setflags(write=False)

    @property
    def noise_dims(self) -> dict[str, int]:
        return {"u_xz": 1, "u_z": self.dim_z, "u_x": 1, "u_w": self.dim_w, "u_v": self.dim_v, "u_y": 1}

    def with_x_threshold(self, threshold: float) -> "ScmSpec":
        thr = dict(self.thresholds)
        thr["x"] = np.array([float(threshold)])
        return dataclasses.replace(self, thresholds=thr)

    # -- serialization -------------------------------------------------
    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "dims": {"z": self.dim_z, "w": self.dim_w, "v": self.dim_v},
            "weights": {k: np.asarray(v).tolist() for k, v in sorted(self.weights.items())},
            "thresholds": {k: np.asarray(v).tolist() for k, v in sorted(self.thresholds.items())},
            "noise": {k: self.noise[k].to_dict() for k in NOISE_KEYS},
            "links": dict(sorted(self.links.items())),
            "ensembles": {k: [e.to_dict() for e in v] for k, v in sorted(self.ensembles.items())},
            "depth": self.depth,
            "seed": int(self.seed),
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ScmSpec":
        depth = int(d.get("depth", 0))
        return cls(
            kind=d["kind"],
            dim_z=int(d["dims"]["z"]),
            dim_w=int(d["dims"]["w"]),
            dim_v=int(d["dims"]["v"]),
            weights={k: np.asarray(v, float) for k, v in d["weights"].items()},
            thresholds={k: np.asarray(v, float) for k, v in d["thresholds"].items()},
            noise={k: NoiseSpec.from_dict(v) for k, v in d["noise"].items()},
            links=dict(d["links"]),
            ensembles={
                k: [TreeEnsemble.from_dict(e, depth) for e in v]
                for k, v in d.get("ensembles", {}).items()
            },
            depth=depth,
            seed=int(d.get("seed", 0)),
        )

    @classmethod
    def from_json(cls, text: str) -> "ScmSpec":
        return cls.from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# constructors


def _std_normal() -> NoiseSpec:
    return NoiseSpec("normal", 1.0)


def binary_scm() -> ScmSpec:
    """The singleton-binary threshold model with standard normal noise.

    Z = 1[u_xz > 0.2]; X = 1[Z + u_x + u_xz > 0.2]; W = 1[X - Z + u_w > 0.8];
    V = 1[X - Z + W + u_v > 0.8]; Y = 1[X - Z + 2(W - V) + u_y > 0.2].
    """
    a = lambda *v: np.array(v, dtype=float)  # noqa: E731
    weights = {
        "z_uxz": a(1.0),
        "x_z": a(1.0),
        "x_uxz": a(1.0),
        "w_x": a(1.0),
        "w_z": a([-1.0]),
        "v_x": a(1.0),
        "v_z": a([-1.0]),
        "v_w": a([1.0]),
        "y_x": a(1.0),
        "y_z": a(-1.0),
        "y_w": a(2.0),
        "y_v": a(-2.0),
    }
    thresholds = {"z": a(0.2), "x": a(0.2), "w": a(0.8), "v": a(0.8), "y": a(0.2)}
    noise = {k: _std_normal() for k in NOISE_KEYS}
    noise["u_z"] = NoiseSpec("normal", 0.0)
    links = {"z": "step", "w": "step", "v": "step", "y": "step"}
    return ScmSpec("binary-threshold", 1, 1, 1, weights, thresholds, noise, links, seed=0)


def reference_scm() -> ScmSpec:
    """Small discrete-enumerable model with two- and three-atom noise terms.

    All (z, x, w, v) cells carry positive probability, so every conditional
    used by the identification formula is defined.
    """
    a = lambda *v: np.array(v, dtype=float)  # noqa: E731
    three = NoiseSpec("discrete", atoms=(-1.0, 0.0, 1.0), probs=(0.3, 0.45, 0.25))
    wide = NoiseSpec("discrete", atoms=(-1.5, 0.0, 1.5), probs=(0.3, 0.45, 0.25))
    two = NoiseSpec("discrete", atoms=(-0.5, 0.5), probs=(0.4, 0.6))
    weights = {
        "z_uxz": a(1.0),
        "x_z": a(0.6),
        "x_uxz": a(0.8),
        "w_x": a(0.9),
        "w_z": a([-0.5]),
        "v_x": a(1.1),
        "v_z": a([-0.4]),
        "v_w": a([0.7]),
        "y_x": a(0.5),
        "y_z": a(-0.8),
        "y_w": a(1.2),
        "y_v": a(-1.5),
    }
    thresholds = {"z": a(0.1), "x": a(0.3), "w": a(0.6), "v": a(0.55), "y": a(-0.2)}
    noise = {
        "u_xz": two,
        "u_z": three,
        "u_x": wide,
        "u_w": wide,
        "u_v": wide,
        "u_y": NoiseSpec("discrete", atoms=(-1.2, 0.3, 1.0), probs=(0.35, 0.4, 0.25)),
    }
    links = {"z": "step", "w": "step", "v": "step", "y": "identity"}
    return ScmSpec("discrete-enumerable", 1, 1, 1, weights, thresholds, noise, links, seed=0)


def _check_dims(*dims: int) -> None:
    for d in dims:
        if int(d) < 1:
            raise ScmError(f"dimensions must be positive integers, got {d}")


def linear_scm(
    dim_z: int = 3,
    dim_w: int = 10,
    dim_v: int = 3,
    seed: int = 0,
    noise_scale: float = 1.0,
) -> ScmSpec:
    """Linear-gaussian model with weights ~ U[-1, 1] / sqrt(fan-in), fixed by ``seed``.

    X = 1[Z @ x_z + u_xz + u_x > 0] stays binary; W, V, Y are linear plus noise
    with standard deviation ``noise_scale``.
    """
    _check_dims(dim_z, dim_w, dim_v)
    rng = np.random.default_rng(seed)

    def draw(shape, fan_in):
        return rng.uniform(-1.0, 1.0, size=shape) / np.sqrt(fan_in)

    fw, fv, fy = 1 + dim_z, 1 + dim_z + dim_w, 1 + dim_z + dim_w + dim_v
    weights = {
        "z_uxz": draw(dim_z, 1),
        "x_z": draw(dim_z, dim_z),
        "x_uxz": np.array([1.0]),
        "w_x": draw(dim_w, fw),
        "w_z": draw((dim_w, dim_z), fw),
        "v_x": draw(dim_v, fv),
        "v_z": draw((dim_v, dim_z), fv),
        "v_w": draw((dim_v, dim_w), fv),
        "y_x": draw(1, fy),
        "y_z": draw(dim_z, fy),
        "y_w": draw(dim_w, fy),
        "y_v": draw(dim_v, fy),
    }
    thresholds = {
        "z": np.zeros(dim_z),
        "x": np.zeros(1),
        "w": np.zeros(dim_w),
        "v": np.zeros(dim_v),
        "y": np.zeros(1),
    }
    noise = {k: _std_normal() for k in NOISE_KEYS}
    for k in ("u_w", "u_v", "u_y"):
        noise[k] = NoiseSpec("normal", float(noise_scale))
    links = {"z": "identity", "w": "identity", "v": "identity", "y": "identity"}
    return ScmSpec("linear-gaussian", dim_z, dim_w, dim_v, weights, thresholds, noise, links, seed=seed)


def _random_ensemble(rng, n_inputs, n_trees, depth, binary_inputs, leaf_scale, forced=None):
    feats = rng.integers(0, n_inputs, size=(n_trees, depth))
    if forced is not None and n_trees > 0:
        # every tree splits once on a designated input so that edge is active
        feats[:, 0] = rng.choice(forced, size=n_trees)
    thr = rng.normal(0.0, 0.7, size=(n_trees, depth))
    for b in binary_inputs:
        thr[feats == b] = 0.5
    scale = leaf_scale * np.sqrt(3.0 / max(n_trees, 1))
    leaves = rng.uniform(-1.0, 1.0, size=(n_trees, 2**depth)) * scale
    return TreeEnsemble(feats.astype(np.int64), thr, leaves)


def nonlinear_scm(
    dim_z: int = 3,
    dim_w: int = 10,
    dim_v: int = 3,
    depth: int = 2,
    seed: int = 0,
    n_trees: int = 20,
) -> ScmSpec:
    """Nonlinear surrogate: each mechanism is a random oblivious-tree ensemble.

    Inputs are ordered ``[x, z..., w..., v...]`` restricted to the parents of
    the variable.  Y is binary, drawn as 1[Phi(u_y) < sigmoid(f_y)].
    Stands in for mechanisms learned from real cohorts; nothing is fit to data.
    """
    _check_dims(dim_z, dim_w, dim_v, depth)
    if n_trees < 0:
        raise ScmError("n_trees must be non-negative")
    rng = np.random.default_rng(seed)
    ens = {
        "x": [_random_ensemble(rng, dim_z, n_trees, depth, (), 1.0)],
        "w": [_random_ensemble(rng, 1 + dim_z, n_trees, depth, (0,), 1.0, forced=[0]) for _ in range(dim_w)],
        "v": [
            _random_ensemble(rng, 1 + dim_z + dim_w, n_trees, depth, (0,), 1.0, forced=[0])
            for _ in range(dim_v)
        ],
        "y": [
            _random_ensemble(
                rng,
                1 + dim_z + dim_w + dim_v,
                n_trees,
                depth,
                (0,),
                2.0,
                forced=list(range(1 + dim_z + dim_w, 1 + dim_z + dim_w + dim_v)),
            )
        ],
    }
    weights = {"z_uxz": rng.uniform(-1.0, 1.0, size=dim_z), "x_uxz": np.array([1.0])}
    thresholds = {
        "z": np.zeros(dim_z),
        "x": np.zeros(1),
        "w": np.zeros(dim_w),
        "v": np.zeros(dim_v),
        "y": np.zeros(1),
    }
    noise = {k: _std_normal() for k in NOISE_KEYS}
    links = {"z": "identity", "w": "identity", "v": "identity", "y": "sigmoid-bernoulli"}
    return ScmSpec(
        "nonlinear-surrogate", dim_z, dim_w, dim_v, weights, thresholds, noise, links,
        seed=seed, ensembles=ens, depth=depth,
    )


# ---------------------------------------------------------------------------
# structural equations


def _apply_link(link: str, index: np.ndarray, u: np.ndarray | None = None) -> np.ndarray:
    if link == "identity":
        return index
    if link == "step":
        return (index > 0).astype(float)
    if link == "sigmoid-bernoulli":
        return (ndtr(u) < expit(index)).astype(float)
    raise ScmError(f"unknown link {link!r}")


def _col(x, n: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return np.broadcast_to(x.reshape(-1), (n,)) if x.size == 1 else x


def draw_noise(spec: ScmSpec, n: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    dims = spec.noise_dims
    return {k: spec.noise[k].draw(rng, (n, dims[k])) for k in NOISE_KEYS}


def solve_z(spec: ScmSpec, u) -> np.ndarray:
    idx = u["u_xz"] * spec.weights["z_uxz"][None, :] + u["u_z"] - spec.thresholds["z"][None, :]
    return _apply_link(spec.links["z"], idx)


def x_index(spec: ScmSpec, u, z) -> np.ndarray:
    """Latent index whose exceedance of the X threshold sets X = 1."""
    if spec.kind == "nonlinear-surrogate":
        s = spec.ensembles["x"][0].predict(z)
    else:
        s = z @ spec.weights["x_z"]
    return s + spec.weights["x_uxz"][0] * u["u_xz"][:, 0] + u["u_x"][:, 0]


def solve_x(spec: ScmSpec, u, z) -> np.ndarray:
    return (x_index(spec, u, z) > spec.thresholds["x"][0]).astype(float)


def solve_w(spec: ScmSpec, u, z, x) -> np.ndarray:
    n = z.shape[0]
    x = _col(x, n)
    if spec.kind == "nonlinear-surrogate":
        inp = np.column_stack([x, z])
        idx = np.column_stack([e.predict(inp) for e in spec.ensembles["w"]])
    else:
        idx = x[:, None] * spec.weights["w_x"][None, :] + z @ spec.weights["w_z"].T
    return _apply_link(spec.links["w"], idx + u["u_w"] - spec.thresholds["w"][None, :])


def solve_v(spec: ScmSpec, u, z, x, w) -> np.ndarray:
    n = z.shape[0]
    x = _col(x, n)
    if spec.kind == "nonlinear-surrogate":
        inp = np.column_stack([x, z, w])
        idx = np.column_stack([e.predict(inp) for e in spec.ensembles["v"]])
    else:
        idx = (
            x[:, None] * spec.weights["v_x"][None, :]
            + z @ spec.weights["v_z"].T
            + w @ spec.weights["v_w"].T
        )
    return _apply_link(spec.links["v"], idx + u["u_v"] - spec.thresholds["v"][None, :])


def solve_y(spec: ScmSpec, u, z, x, w, v) -> np.ndarray:
    n = z.shape[0]
    x = _col(x, n)
    if spec.kind == "nonlinear-surrogate":
        f = spec.ensembles["y"][0].predict(np.column_stack([x, z, w, v]))
        return _apply_link("sigmoid-bernoulli", f - spec.thresholds["y"][0], u["u_y"][:, 0])
    idx = (
        x * spec.weights["y_x"][0]
        + z @ spec.weights["y_z"]
        + w @ spec.weights["y_w"]
        + v @ spec.weights["y_v"]
    )
    return _apply_link(spec.links["y"], idx + u["u_y"][:, 0] - spec.thresholds["y"][0])


def observe(spec: ScmSpec, u) -> tuple[np.ndarray, ...]:
    """Observational solution (z, x, w, v, y) for given exogenous draws."""
    z = solve_z(spec, u)
    x = solve_x(spec, u, z)
    w = solve_w(spec, u, z, x)
    v = solve_v(spec, u, z, x, w)
    y = solve_y(spec, u, z, x, w, v)
    return z, x, w, v, y


def potential_outcome(spec: ScmSpec, u, y_x: int, w_x: int, v_x: int, v_w_x: int) -> np.ndarray:
    """Nested potential response Y_{y_x, W_{w_x}, V_{v_x, W_{v_w_x}}}(u).

    ``w_x`` is the exposure feeding the W that enters Y; ``v_w_x`` the one
    feeding the W that enters V.  ``E[Y_x]`` is the case where all four agree.
    """
    z = solve_z(spec, u)
    w_y = solve_w(spec, u, z, w_x)
    w_v = w_y if v_w_x == w_x else solve_w(spec, u, z, v_w_x)
    v = solve_v(spec, u, z, v_x, w_v)
    return solve_y(spec, u, z, y_x, w_y, v)


def enumerate_noise(spec: ScmSpec, max_cells: int = 2_000_000) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Every joint atom of the exogenous noise together with its probability."""
    comps = []
    for k in NOISE_KEYS:
        atoms, probs = spec.noise[k].support()
        comps.extend([(k, atoms, probs)] * spec.noise_dims[k])
    total = int(np.prod([len(c[1]) for c in comps], dtype=float))
    if total > max_cells:
        raise ScmError(f"noise support has {total} atoms, above the {max_cells} limit")
    grids = np.meshgrid(*[np.arange(len(c[1])) for c in comps], indexing="ij")
    idx = [g.reshape(-1) for g in grids]
    prob = np.ones(total)
    cols: dict[str, list[np.ndarray]] = {k: [] for k in NOISE_KEYS}
    for (k, atoms, probs), i in zip(comps, idx):
        cols[k].append(atoms[i])
        prob *= probs[i]
    u = {k: np.column_stack(cols[k]) for k in NOISE_KEYS}
    return u, prob


# ---------------------------------------------------------------------------
# sampling


def sample(spec: ScmSpec, n: int, seed: int = 0) -> Cohort:
    """``n`` i.i.d. observational draws; deterministic in ``(spec.seed, seed)``."""
    if int(n) < 1:
        raise ScmError("sample size must be at least 1")
    rng = np.random.default_rng([int(spec.seed), int(seed)])
    u = draw_noise(spec, int(n), rng)
    z, x, w, v, y = observe(spec, u)
    return Cohort(z=z, x=x.astype(np.int64), w=w, v=v, y=y)


def calibrate_imbalance(
    spec: ScmSpec,
    eta: float,
    n_draws: int = 1_000_000,
    tol: float = 0.005,
    seed: int = 0,
    bounds: tuple[float, float] | None = None,
) -> ScmSpec:
    """Shift the X threshold so that P(X = 1) is within ``tol`` of ``eta``.

    Bisection on the exceedance rate of a fixed set of ``n_draws`` index draws.
    """
    if not 0.0 < eta < 1.0:
        raise ScmError("eta must lie strictly between 0 and 1")
    rng = np.random.default_rng([int(spec.seed), int(seed), 7])
    u = draw_noise(spec, int(n_draws), rng)
    index = x_index(spec, u, solve_z(spec, u))
    lo, hi = bounds if bounds is not None else (float(index.min()) - 1.0, float(index.max()) + 1.0)

    def rate(t):
        return float(np.mean(index > t))

    if not rate(hi) <= eta <= rate(lo):
        raise ScmError(f"eta={eta} unreachable for thresholds in [{lo}, {hi}]")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if rate(mid) > eta:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-12:
            break
    t = lo if abs(rate(lo) - eta) <= abs(rate(hi) - eta) else hi
    if abs(rate(t) - eta) > tol:
        raise ScmError(f"eta={eta} unreachable within tolerance {tol}; closest rate {rate(t):.4f}")
    return spec.with_x_threshold(t)
