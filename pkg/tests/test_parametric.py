import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bkmrcma.errors import InputError, SchemaError, SingularDesignError
from bkmrcma.model import Dataset, make_rng
from bkmrcma.parametric import (INTERACTION, TRADITIONAL, ExtraTerm, LinearMediationFit, bootstrap_effects,
                                fit_linear_mediation, linear_cde, linear_nde, linear_nie, method_effects,
                                traditional_effects)

from oracles import linear_gcomp


def _manual_fit(coef, mode=INTERACTION):
    L = len(coef["b1"])
    P = len(coef["b2"])
    return LinearMediationFit(
        mode=mode, z_names=tuple(f"z{i + 1}" for i in range(L)), c_names=tuple(f"c{i + 1}" for i in range(P)),
        beta0=coef["b0"], beta1=np.asarray(coef["b1"]), beta2=np.asarray(coef["b2"]),
        theta0=coef["t0"], theta1=np.asarray(coef["t1"]), theta2=coef["t2"], theta3=np.asarray(coef["t3"]),
        theta4=np.asarray(coef["t4"]), theta5=np.zeros(0), extra_terms=(), sigma2_m=coef["sm"] ** 2,
        sigma2_y=coef["sy"] ** 2, mediator_cov=np.eye(1 + L + P), outcome_cov=np.eye(1), c_means=np.zeros(P))


COEF = {"b0": 0.3, "b1": np.array([0.8, -0.4]), "b2": np.array([0.5]), "t0": -0.2,
        "t1": np.array([0.6, 0.25]), "t2": 0.9, "t3": np.array([0.35, -0.15]), "t4": np.array([1.1]),
        "sm": 1.0, "sy": 0.5}


def _data(n, seed, coef=COEF, noise=True, orthogonal_m=False):
    rng = make_rng(seed)
    L = len(coef["b1"])
    z = rng.standard_normal((n, L))
    c = rng.standard_normal((n, len(coef["b2"])))
    e = coef["sm"] * rng.standard_normal(n)
    if orthogonal_m:
        # residual orthogonal to the mediator design: OLS recovers b exactly
        X = np.column_stack([np.ones(n), z, c])
        e = e - X @ np.linalg.lstsq(X, e, rcond=None)[0]
    m = coef["b0"] + z @ coef["b1"] + c @ coef["b2"] + e
    y = (coef["t0"] + z @ coef["t1"] + coef["t2"] * m + (z @ coef["t3"]) * m + c @ coef["t4"]
         + (coef["sy"] * rng.standard_normal(n) if noise else 0))
    return Dataset(y=y, z=z, m=m, c=c)


def test_noiseless_coefficient_recovery():
    fit = fit_linear_mediation(_data(50, 1, noise=False, orthogonal_m=True))
    assert fit.beta0 == pytest.approx(COEF["b0"], abs=1e-8)
    np.testing.assert_allclose(fit.beta1, COEF["b1"], atol=1e-8)
    np.testing.assert_allclose(fit.beta2, COEF["b2"], atol=1e-8)
    assert fit.theta0 == pytest.approx(COEF["t0"], abs=1e-8)
    np.testing.assert_allclose(fit.theta1, COEF["t1"], atol=1e-8)
    assert fit.theta2 == pytest.approx(COEF["t2"], abs=1e-8)
    np.testing.assert_allclose(fit.theta3, COEF["t3"], atol=1e-8)
    np.testing.assert_allclose(fit.theta4, COEF["t4"], atol=1e-8)


def test_traditional_has_no_interaction_block():
    fit = fit_linear_mediation(_data(100, 2), TRADITIONAL)
    assert np.all(fit.theta3 == 0.0)
    assert fit.outcome_cov.shape == (1 + 2 + 1 + 1,) * 2


def test_mediator_slope_within_three_se():
    rng = make_rng(3)
    n = 300
    z = rng.standard_normal((n, 3))
    m = z[:, 0] + rng.standard_normal(n)
    y = z[:, 0] + z[:, 1] + m + rng.standard_normal(n)
    fit = fit_linear_mediation(Dataset(y=y, z=z, m=m))
    se = np.sqrt(np.diag(fit.mediator_cov))[1:4]
    assert np.all(np.abs(fit.beta1 - [1.0, 0.0, 0.0]) < 3 * se)


def test_closed_forms_match_monte_carlo():
    fit = _manual_fit(COEF)
    z, zs, c = np.array([0.7, -0.2]), np.array([-0.5, 0.4]), np.array([0.3])
    nde, nie, cde = linear_gcomp(COEF, z, zs, c, m_values=(-1.0, 2.0), n=1_000_000, seed=4)
    assert linear_nde(fit, z, zs, c) == pytest.approx(nde, abs=0.01)
    assert linear_nie(fit, z, zs) == pytest.approx(nie, abs=0.01)
    for m in (-1.0, 2.0):
        assert linear_cde(fit, z, zs, m, c) == pytest.approx(cde[m], abs=0.01)


def test_scalar_indirect_example():
    coef = dict(COEF, b1=np.array([1.0]), t1=np.array([0.0]), t2=1.0, t3=np.array([0.0]))
    fit = _manual_fit(coef)
    assert linear_nie(fit, [0.674], [-0.674]) == pytest.approx(1.348, abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2 ** 31 - 1))
def test_effects_add_up(seed):
    rng = make_rng(seed)
    coef = {"b0": rng.normal(), "b1": rng.normal(size=2), "b2": rng.normal(size=1), "t0": rng.normal(),
            "t1": rng.normal(size=2), "t2": rng.normal(), "t3": rng.normal(size=2), "t4": rng.normal(size=1),
            "sm": 1.0, "sy": 1.0}
    fit = _manual_fit(coef)
    z, zs, c = rng.normal(size=2), rng.normal(size=2), rng.normal(size=1)
    eff = method_effects(fit, "linear", z, zs, c)
    te_direct = (fit.outcome_mean(z, fit.mediator_mean(z, c), c)
                 - fit.outcome_mean(zs, fit.mediator_mean(zs, c), c))
    assert eff[("te", None)] == pytest.approx(te_direct, abs=1e-10)
    assert eff[("nde", None)] + eff[("nie", None)] == pytest.approx(eff[("te", None)], abs=1e-12)


def test_doubling_contrast_doubles_effects_without_interaction():
    coef = dict(COEF, t3=np.zeros(2))
    fit = _manual_fit(coef, TRADITIONAL)
    z = np.array([0.5, -0.3])
    one = traditional_effects(fit, z, np.zeros(2), np.zeros(1))
    two = traditional_effects(fit, 2 * z, np.zeros(2), np.zeros(1))
    np.testing.assert_allclose(two, 2 * np.array(one), atol=1e-12)


def test_traditional_cde_does_not_depend_on_m():
    fit = fit_linear_mediation(_data(200, 5), TRADITIONAL)
    eff = method_effects(fit, "traditional", [1.0, 0.0], [0.0, 0.0], m_values=(-2.0, 0.0, 3.0))
    vals = [eff[("cde", m)] for m in (-2.0, 0.0, 3.0)]
    assert max(vals) - min(vals) < 1e-12
    assert vals[0] == pytest.approx(eff[("nde", None)], abs=1e-12)
    with pytest.raises(InputError):
        traditional_effects(fit_linear_mediation(_data(50, 5)), [1.0, 0.0], [0.0, 0.0])


def test_singular_design_names_columns():
    ds = _data(40, 6)
    dup = Dataset(y=ds.y, z=np.column_stack([ds.z, ds.z[:, 0] * 2]), m=ds.m, c=ds.c)
    with pytest.raises(SingularDesignError) as err:
        fit_linear_mediation(dup)
    assert "z3" in err.value.columns
    with pytest.raises(SchemaError):
        fit_linear_mediation(Dataset(y=ds.y, z=ds.z))


def test_extra_terms():
    assert ExtraTerm.parse("age^2").factors == ("age", "age")
    assert ExtraTerm.parse("age*Mn").factors == ("age", "Mn")
    assert ExtraTerm.parse("age:Mn").label == "age*Mn"
    assert ExtraTerm.parse(" sex ").factors == ("sex",)
    with pytest.raises(InputError):
        ExtraTerm.parse("a*b*c")
    rng = make_rng(7)
    n = 150
    z = rng.standard_normal((n, 1))
    age = rng.standard_normal(n)
    m = z[:, 0] + rng.standard_normal(n)
    y = z[:, 0] + m + 0.8 * age * z[:, 0] + 0.1 * rng.standard_normal(n)
    ds = Dataset(y=y, z=z, m=m, x=age[:, None], x_names=("age",), z_names=("Mn",))
    fit = fit_linear_mediation(ds, TRADITIONAL, ["age", "age*Mn"])
    assert fit.theta5[1] == pytest.approx(0.8, abs=0.05)
    lo = method_effects(fit, "traditional", [1.0], [0.0], modifiers=[-1.0])[("nde", None)]
    hi = method_effects(fit, "traditional", [1.0], [0.0], modifiers=[1.0])[("nde", None)]
    assert hi - lo == pytest.approx(1.6, abs=0.1)
    with pytest.raises(SchemaError):
        fit_linear_mediation(ds, TRADITIONAL, ["m*age"])


def test_bootstrap_is_seeded_and_centered():
    ds = _data(200, 8)
    z, zs = [0.5, 0.0], [-0.5, 0.0]
    a = bootstrap_effects(ds, "linear", z, zs, m_values=(0.0,), n_boot=200, seed=3)
    b = bootstrap_effects(ds, "linear", z, zs, m_values=(0.0,), n_boot=200, seed=3)
    assert np.array_equal(a.nie, b.nie) and np.array_equal(a.cde[0.0], b.cde[0.0])
    point = method_effects(fit_linear_mediation(ds), "linear", z, zs, ds.c.mean(axis=0))
    assert np.mean(a.te) == pytest.approx(point[("te", None)], abs=0.1)
    assert a.metadata["used"] == 200
    with pytest.raises(InputError):
        bootstrap_effects(ds, "bkmr", z, zs)
