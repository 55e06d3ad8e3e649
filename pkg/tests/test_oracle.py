import dataclasses

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from pathfair import oracle, scm
from pathfair.oracle import EffectQuery, OracleError, PositivityError

# Frozen by exhaustive enumeration of the shipped reference model (x0=0, x1=1).
REF_EXACT = {
    "vde": -0.4482,
    "te": 0.1652,
    "nde": 0.5,
    "nie": -0.3348,
    "nested_vde": 0.1914,
    "nested_nde": 0.078,
    "mean_Yx": -0.2568,
}
# Frozen by one-dimensional quadrature over the latent confounder; a 2e6-draw
# counterfactual simulation gave -0.12324 (SE 0.00023) for the VDE.
BINARY_EXACT = {
    "vde": -0.12326342153922165,
    "te": 0.2512284576017415,
    "nde": 0.29262470698995624,
    "nie": -0.041396249388214734,
    "mean_Yx": 0.5384174382931263,
}


@pytest.mark.parametrize("kind,value", sorted(REF_EXACT.items()))
def test_reference_enumeration_constants(ref_spec, kind, value):
    assert oracle.enumerate_exact(ref_spec, EffectQuery(kind)) == pytest.approx(value, abs=1e-12)


@pytest.mark.parametrize("kind,value", sorted(BINARY_EXACT.items()))
def test_binary_quadrature_constants(binary_spec, kind, value):
    assert oracle.quadrature_exact(binary_spec, EffectQuery(kind)) == pytest.approx(value, abs=1e-10)


def test_binary_reference_table(binary_ref):
    assert binary_ref["te"] == pytest.approx(binary_ref["nde"] + binary_ref["nie"], abs=1e-14)
    assert binary_ref["vde"] == pytest.approx(binary_ref["mean_Yx"] - binary_ref["nested_vde"], abs=1e-14)


@pytest.mark.parametrize("kind", ["vde", "te", "nde", "mean_Yx"])
def test_mc_agrees_with_quadrature(binary_spec, binary_ref, kind):
    r = oracle.mc_counterfactual(binary_spec, EffectQuery(kind), 1_000_000, seed=3)
    assert abs(r.value - binary_ref[kind]) < 4 * r.std_error


@pytest.mark.parametrize("kind", ["vde", "nde", "nie", "nie_star", "te"])
def test_mc_agrees_with_enumeration(ref_spec, kind):
    q = EffectQuery(kind, mediators="v" if kind == "nie_star" else "wv")
    r = oracle.mc_counterfactual(ref_spec, q, 400_000, seed=2)
    assert abs(r.value - oracle.enumerate_exact(ref_spec, q)) <= 4 * r.std_error + 1e-12


def test_mc_reports_inputs(binary_spec):
    r = oracle.mc_counterfactual(binary_spec, EffectQuery("vde"), 1000, seed=7)
    d = r.to_dict()
    assert d["n_mc"] == 1000 and d["seed"] == 7 and d["std_error"] > 0
    assert r.value == oracle.mc_counterfactual(binary_spec, EffectQuery("vde"), 1000, seed=7).value


def test_mc_chunking_does_not_change_result(binary_spec):
    a = oracle.mc_counterfactual(binary_spec, EffectQuery("te"), 30_000, seed=1, chunk=30_000)
    b = oracle.mc_counterfactual(binary_spec, EffectQuery("te"), 30_000, seed=1, chunk=30_000)
    assert a.value == b.value


@pytest.mark.parametrize("x", [0, 1])
@pytest.mark.parametrize("spec_name", ["binary", "reference", "linear"])
def test_identical_interventions_have_zero_vde(spec_name, x):
    spec = {"binary": scm.binary_scm, "reference": scm.reference_scm,
            "linear": lambda: scm.linear_scm(seed=19)}[spec_name]()
    r = oracle.mc_counterfactual(spec, EffectQuery("vde", x, x), 5000, seed=0)
    assert r.value == 0.0 and r.std_error == 0.0


def test_linear_closed_form_matches_mc():
    spec = scm.linear_scm(3, 10, 3, seed=19)
    for kind in ("vde", "te", "nested_vde"):
        q = EffectQuery(kind)
        r = oracle.mc_counterfactual(spec, q, 400_000, seed=5)
        assert abs(r.value - oracle.linear_exact(spec, q)) < 4 * r.std_error + 1e-12


def test_exact_value_dispatch(ref_spec, binary_spec):
    assert oracle.exact_value(ref_spec, EffectQuery("vde")) == pytest.approx(REF_EXACT["vde"])
    assert oracle.exact_value(binary_spec, EffectQuery("vde")) == pytest.approx(BINARY_EXACT["vde"])
    with pytest.raises(OracleError):
        oracle.exact_value(scm.nonlinear_scm(1, 1, 1, seed=0, n_trees=2), EffectQuery("vde"))


def test_enumeration_rejects_continuous(binary_spec):
    with pytest.raises(OracleError):
        oracle.enumerate_exact(binary_spec, EffectQuery("vde"))


@pytest.mark.parametrize("term,kind", [("nested_vde", "nested_vde"), ("nested_nde", "nested_nde")])
def test_idformula_matches_enumeration(ref_joint, ref_spec, term, kind):
    assert abs(oracle.idformula_eval(ref_joint, 0, 1, term)
               - oracle.enumerate_exact(ref_spec, EffectQuery(kind))) <= 1e-12


@pytest.mark.parametrize("x", [0, 1])
def test_backdoor_matches_enumeration(ref_joint, ref_spec, x):
    assert abs(oracle.backdoor_eval(ref_joint, x)
               - oracle.enumerate_exact(ref_spec, EffectQuery("mean_Yx", 1 - x, x))) <= 1e-12


def test_idformula_on_quadrature_joint(binary_spec, binary_ref):
    joint = oracle.quadrature_joint(binary_spec)
    vde = oracle.identified_effect(joint, EffectQuery("vde"))
    assert vde == pytest.approx(binary_ref["vde"], abs=1e-10)


def test_idformula_on_sampled_binary_joint(binary_spec, binary_ref):
    c = scm.sample(binary_spec, 2_000_000, seed=21)
    joint = oracle.tabulate(c)
    est = oracle.backdoor_eval(joint, 1) - oracle.idformula_eval(joint, 0, 1, "nested_vde")
    # sampling SE of the plug-in formula at this size is about 1e-3
    assert abs(est - binary_ref["vde"]) < 3e-3


def test_v_independent_of_x_gives_zero_vde(ref_joint):
    # overwrite P(v | x, w, z) with a version that ignores x
    P, EY, (zu, wu, vu) = ref_joint.dense()
    pv = P.sum(axis=1) / P.sum(axis=(1, 3))[:, :, None]
    pxwz = P.sum(axis=3)
    Q = pxwz[..., None] * pv[:, None]
    rows = [(zu[a], x, wu[b], vu[c], Q[a, x, b, c], EY[a, x, b, c])
            for a in range(len(zu)) for x in (0, 1) for b in range(len(wu)) for c in range(len(vu))]
    joint = oracle.JointTable(
        z=np.array([r[0] for r in rows]), x=np.array([r[1] for r in rows]),
        w=np.array([r[2] for r in rows]), v=np.array([r[3] for r in rows]),
        prob=np.array([r[4] for r in rows]), ey=np.array([r[5] for r in rows]))
    assert oracle.identified_effect(joint, EffectQuery("vde")) == pytest.approx(0.0, abs=1e-14)


def test_positivity_violation_names_cell(ref_joint):
    keep = ~((ref_joint.x == 0) & (ref_joint.w[:, 0] == 1))
    joint = oracle.JointTable(ref_joint.z[keep], ref_joint.x[keep], ref_joint.w[keep], ref_joint.v[keep],
                              ref_joint.prob[keep] / ref_joint.prob[keep].sum(), ref_joint.ey[keep])
    with pytest.raises(PositivityError) as err:
        oracle.idformula_eval(joint, 0, 1, "nested_vde")
    assert "x=0" in err.value.cell and "w=" in err.value.cell


def test_nie_star_formula_vs_counterfactual(binary_ref):
    # ignoring W, the V-only formula identifies a different quantity on the binary model
    assert binary_ref["nie_star_formula"] != pytest.approx(binary_ref["nie_star"], abs=1e-3)


@pytest.mark.parametrize("bad", [dict(kind="ate"), dict(x0=2), dict(mediators="w")])
def test_query_validation(bad):
    with pytest.raises(OracleError):
        EffectQuery(**{"kind": "vde", **bad})


def test_query_terms_merge():
    assert EffectQuery("vde", 1, 1).terms() == {}
    assert EffectQuery("te").terms() == {(1, 1, 1, 1): 1.0, (0, 0, 0, 0): -1.0}


weights_st = st.floats(-2, 2, allow_nan=False).map(lambda v: round(v, 3))


@given(wx=weights_st, wv=weights_st, wy=weights_st, vw=weights_st, yw=weights_st, yx=weights_st)
def test_discrete_oracles_agree_on_random_weights(ref_spec, wx, wv, wy, vw, yw, yx):
    w = dict(ref_spec.weights)
    w.update(w_x=np.array([wx]), v_x=np.array([wv]), y_v=np.array([wy]), v_w=np.array([[vw]]),
             y_w=np.array([yw]), y_x=np.array([yx]))
    spec = dataclasses.replace(ref_spec, weights=w)
    joint = oracle.enumerate_joint(spec)
    vde = oracle.enumerate_exact(spec, EffectQuery("vde"))
    te = oracle.enumerate_exact(spec, EffectQuery("te"))
    nde = oracle.enumerate_exact(spec, EffectQuery("nde"))
    nie = oracle.enumerate_exact(spec, EffectQuery("nie"))
    assert abs(te - (nde + nie)) <= 1e-12
    try:
        formula = oracle.identified_effect(joint, EffectQuery("vde"))
    except PositivityError:
        assume(False)
    assert abs(formula - vde) <= 1e-10
