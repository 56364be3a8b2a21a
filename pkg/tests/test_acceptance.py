"""End-to-end acceptance criteria, one PASS/FAIL line each (see the terminal summary).

The two desk-scale simulation studies take most of the runtime (about 25
minutes each on one core); they are marked ``slow``.
"""

import math
import warnings

import numpy as np
import pytest

from bkmrcma.cli import main
from bkmrcma.mediation import ContrastSpec, estimate_cde, estimate_mediation
from bkmrcma.model import Dataset, KernelInputs, KernelState, kernel_matrix, make_rng
from bkmrcma.parametric import (INTERACTION, TRADITIONAL, LinearMediationFit, fit_linear_mediation, linear_cde,
                                linear_nde, linear_nie, method_effects)
from bkmrcma.sampler import McmcConfig, fit_bkmr, with_seed
from bkmrcma.simulation import (ALL_METHODS, ScenarioSpec, desk_mcmc, desk_scenario, generate_truth, run_study,
                                summarize_replicates)

from oracles import batch_means_se, linear_gcomp, nig_posterior

EFFECTS = ("te", "nde", "nie")


def _three_models(ds, seed, iterations=1000, vs=False):
    cfg = McmcConfig(iterations=iterations, seed=seed, variable_selection=vs)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        med = fit_bkmr(ds, KernelInputs.for_dataset(ds), mcmc=with_seed(cfg, seed, 1), response="m")
        out = fit_bkmr(ds, KernelInputs.for_dataset(ds, mediator=True), mcmc=with_seed(cfg, seed, 2))
        te = fit_bkmr(ds, KernelInputs.for_dataset(ds), mcmc=with_seed(cfg, seed, 3))
    return med, out, te


def _scenario_sample(sid, n, seed, **kw):
    spec = ScenarioSpec(sid, n_truth=50_000, n=n, seed=seed, **kw)
    pop, oracle = generate_truth(spec, n_oracle=50_000)
    rows = make_rng(seed, 99).choice(pop.y.shape[0], n, replace=False)
    return Dataset(y=pop.y[rows], z=pop.z[rows], m=pop.m[rows]), oracle


# ---------------------------------------------------------------------------
# 1


def test_c01_per_draw_identity(report_line):
    ds, oracle = _scenario_sample(2, 150, 11)
    models = _three_models(ds, 3)
    spec = ContrastSpec(z=oracle.z, z_star=oracle.z_star, k_inner=100)
    worst = 0.0
    for seed in range(3):
        eff = estimate_mediation(*models, spec, seed=seed)
        worst = max(worst, float(np.max(np.abs(eff.nde + eff.nie - eff.te))))
    ok = worst < 1e-12
    report_line("C1 per-draw NDE+NIE=TE", ok, f"max |error| {worst:.2e} over {3 * eff.te.shape[0]} draws (< 1e-12)")
    assert ok


# ---------------------------------------------------------------------------
# 2


def _random_coef(rng):
    return {"b0": rng.uniform(-1, 1), "b1": rng.uniform(-1, 1, 3), "b2": rng.uniform(-1, 1, 2),
            "t0": rng.uniform(-1, 1), "t1": rng.uniform(-1, 1, 3), "t2": rng.uniform(-1, 1),
            "t3": rng.uniform(-1, 1, 3), "t4": rng.uniform(-1, 1, 2), "sm": 0.5, "sy": 0.5}


def _fit_from(coef):
    return LinearMediationFit(
        mode=INTERACTION, z_names=("z1", "z2", "z3"), c_names=("c1", "c2"), beta0=coef["b0"],
        beta1=coef["b1"], beta2=coef["b2"], theta0=coef["t0"], theta1=coef["t1"], theta2=coef["t2"],
        theta3=coef["t3"], theta4=coef["t4"], theta5=np.zeros(0), extra_terms=(), sigma2_m=coef["sm"] ** 2,
        sigma2_y=coef["sy"] ** 2, mediator_cov=np.eye(6), outcome_cov=np.eye(1), c_means=np.zeros(2))


def test_c02_closed_form_vs_gcomputation(report_line):
    rng = make_rng(2024)
    worst = 0.0
    for k in range(20):
        coef = _random_coef(rng)
        fit = _fit_from(coef)
        z, zs, c = rng.normal(size=3), rng.normal(size=3), rng.normal(size=2)
        m_values = tuple(rng.normal(size=2))
        nde, nie, cde = linear_gcomp(coef, z, zs, c, m_values, n=1_000_000, seed=k)
        errs = [linear_nde(fit, z, zs, c) - nde, linear_nie(fit, z, zs) - nie]
        errs += [linear_cde(fit, z, zs, m, c) - cde[float(m)] for m in m_values]
        worst = max(worst, max(abs(e) for e in errs))
    ok = worst < 0.01
    report_line("C2 closed form vs 1e6 g-computation", ok, f"max |diff| {worst:.4f} over 20 sets (< 0.01)")
    assert ok


# ---------------------------------------------------------------------------
# 3


def test_c03_conjugate_subcase(report_line):
    rng = make_rng(33)
    n = 40
    c = rng.standard_normal((n, 1))
    y = 1.0 + 0.5 * c[:, 0] + rng.standard_normal(n)
    ds = Dataset(y=y, z=rng.standard_normal((n, 2)), c=c)
    cfg = McmcConfig(iterations=20_000, burn_in=10_000, seed=5, fix_lambda=0.0)
    draws = fit_bkmr(ds, mcmc=cfg)
    C = np.column_stack([np.ones(n), c])
    ref = nig_posterior(y, C, 0.001, 0.001)
    checks = []
    for i in range(2):
        b = draws.beta[:, i]
        checks.append((f"beta{i} mean", b.mean(), ref["beta_mean"][i], batch_means_se(b)))
        dev = (b - b.mean()) ** 2
        checks.append((f"beta{i} var", dev.mean(), ref["beta_var"][i], batch_means_se(dev)))
    s = draws.sigma2
    checks.append(("sigma2 mean", s.mean(), ref["sigma2_mean"], batch_means_se(s)))
    dev = (s - s.mean()) ** 2
    checks.append(("sigma2 var", dev.mean(), ref["sigma2_var"], batch_means_se(dev)))
    zs = [abs(est - truth) / se for _, est, truth, se in checks]
    ok = draws.J == 10_000 and max(zs) < 3
    detail = ", ".join(f"{name} {z:.2f}se" for (name, *_), z in zip(checks, zs))
    report_line("C3 lambda=0 conjugate posterior", ok, f"{draws.J} draws; {detail} (< 3 se)")
    assert ok


# ---------------------------------------------------------------------------
# 4


def test_c04_kernel_soundness(report_line):
    rng = make_rng(44)
    min_eig, max_diff = np.inf, 0.0
    for _ in range(100):
        n = int(rng.integers(2, 51))
        L = int(rng.integers(1, 13))
        x = rng.standard_normal((n, L)) * rng.uniform(0.2, 3.0)
        delta = rng.uniform(size=L) < 0.7
        r = np.where(delta, rng.exponential(1.0, L), 0.0)
        K = kernel_matrix(x, KernelState.weights(r, delta))
        min_eig = min(min_eig, float(np.linalg.eigvalsh(K).min()))
        rho = float(rng.uniform(0.05, 100.0))
        Ks = kernel_matrix(x, KernelState.single(rho))
        Kw = kernel_matrix(x, KernelState.weights(np.full(L, 1.0 / rho)))
        max_diff = max(max_diff, float(np.max(np.abs(Ks - Kw))))
    ok = min_eig >= -1e-8 and max_diff <= 1e-12
    report_line("C4 kernel soundness", ok, f"min eigenvalue {min_eig:.2e} (>= -1e-8); "
                f"single vs weights max diff {max_diff:.1e} (<= 1e-12)")
    assert ok


# ---------------------------------------------------------------------------
# 5 and 6: desk-scale studies


@pytest.fixture(scope="session")
def scenario1_study():
    return run_study(desk_scenario(1), methods=ALL_METHODS, mcmc=desk_mcmc())


@pytest.fixture(scope="session")
def scenario4_study():
    return run_study(desk_scenario(4), methods=ALL_METHODS, mcmc=desk_mcmc())


@pytest.mark.slow
def test_c05_scenario1_unbiased(scenario1_study, report_line):
    res = scenario1_study
    oracle = res.oracle
    tol_floor = 0.1 * abs(oracle.te)
    worst, bad = 0.0, []
    parts = []
    for method in ALL_METHODS:
        for eff in EFFECTS:
            s = summarize_replicates(res.values(method, eff), oracle.value(eff))
            tol = max(tol_floor, 2 * s["sd"] / math.sqrt(s["n"]))
            gap = abs(s["median"] - s["truth"])
            worst = max(worst, gap / tol)
            if gap > tol or s["n"] < 50:
                bad.append(f"{method}/{eff}")
            parts.append(f"{method}/{eff} {s['median']:.3f}")
    ok = not bad
    detail = (f"truth TE/NDE/NIE {oracle.te:.3f}/{oracle.nde:.3f}/{oracle.nie:.3f}; medians " + ", ".join(parts)
              + f"; worst gap/tolerance {worst:.2f}" + (f"; outside: {bad}" if bad else ""))
    report_line("C5 scenario 1 medians within tolerance", ok, detail)
    assert ok


@pytest.mark.slow
def test_c06_scenario4_ordering(scenario4_study, report_line):
    res = scenario4_study
    truth = res.oracle.nie
    stats = {m: summarize_replicates(res.values(m, "nie"), truth) for m in ALL_METHODS}
    lin = stats["linear"]
    graded = {m: abs(stats[m]["bias"]) <= abs(lin["bias"]) and stats[m]["rmse"] <= lin["rmse"]
              for m in ("bkmr-cma", "bkmr-cma-vs")}
    ok = all(graded.values())
    detail = f"NIE truth {truth:.3f}; " + ", ".join(
        f"{m} |bias| {abs(s['bias']):.3f} rMSE {s['rmse']:.3f}" for m, s in stats.items())
    report_line("C6 scenario 4 bkmr-cma (with and without selection) NIE |bias| and rMSE <= linear", ok,
                detail + ("" if ok else f"; failing: {[m for m, g in graded.items() if not g]}"))
    a, b = stats["bkmr-cma"], stats["traditional"]
    better = abs(a["bias"]) <= abs(b["bias"]) and a["rmse"] <= b["rmse"]
    report_line("C6 supplementary bkmr-cma vs traditional", None,
                f"|bias| {abs(a['bias']):.3f} vs {abs(b['bias']):.3f}, rMSE {a['rmse']:.3f} vs "
                f"{b['rmse']:.3f} ({'no worse on both' if better else 'worse on at least one'})")
    assert ok


# ---------------------------------------------------------------------------
# 7


def test_c07_variable_selection(report_line):
    gaps = []
    for seed in range(5):
        rng = make_rng(700, seed)
        n = 150
        z = rng.standard_normal((n, 4))
        m = z[:, 0] + 0.7 * rng.standard_normal(n)
        ds = Dataset(y=rng.standard_normal(n), z=z, m=m)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            fit = fit_bkmr(ds, KernelInputs.for_dataset(ds), response="m",
                           mcmc=McmcConfig(iterations=2000, seed=seed, variable_selection=True))
        pip = fit.pip
        gaps.append(float(pip[0] - pip[1:].max()))
    mean_gap = float(np.mean(gaps))
    ok = mean_gap >= 0.2
    report_line("C7 PIP(z1) - max inactive PIP", ok,
                f"mean {mean_gap:.3f} over 5 seeds (>= 0.2); per seed {[round(g, 3) for g in gaps]}")
    assert ok


# ---------------------------------------------------------------------------
# 8


def test_c08_quantile_contrast(report_line):
    _, oracle = generate_truth(ScenarioSpec(1, n_truth=1_000_000), n_oracle=10_000)
    dev = float(np.max(np.abs(oracle.z_star - (-0.674))))
    ok = dev < 0.01
    report_line("C8 truth z* near -0.674", ok, f"z* {np.round(oracle.z_star, 4).tolist()}; max |dev| {dev:.4f} (< 0.01)")
    assert ok


# ---------------------------------------------------------------------------
# 9


def test_c09_cde_invariance_and_flatness(report_line):
    ds, oracle = _scenario_sample(1, 200, 91)
    m_values = (-1.5, -0.5, 0.5, 1.5)
    fit = fit_linear_mediation(ds, TRADITIONAL)
    eff = method_effects(fit, "traditional", oracle.z, oracle.z_star, m_values=m_values)
    cdes = [eff[("cde", m)] for m in m_values]
    exact_spread = max(cdes) - min(cdes)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        out = fit_bkmr(ds, KernelInputs.for_dataset(ds, mediator=True), mcmc=McmcConfig(iterations=2000, seed=9))
    samples = estimate_cde(out, ContrastSpec(z=oracle.z, z_star=oracle.z_star, m_values=m_values))
    means = [float(np.mean(samples.cde[m])) for m in m_values]
    bkmr_spread = max(means) - min(means)
    ok = exact_spread <= 1e-12 and bkmr_spread <= 0.2
    report_line("C9 CDE m-invariance / flatness", ok,
                f"traditional spread {exact_spread:.1e} (<= 1e-12); bkmr-cma posterior-mean spread "
                f"{bkmr_spread:.3f} (<= 0.2) at m={list(m_values)}")
    assert ok


# ---------------------------------------------------------------------------
# 10


def test_c10_cli_determinism(tmp_path, report_line):
    from importlib import resources
    from pathlib import Path

    data = str(Path(resources.files("bkmrcma") / "data" / "example.csv"))
    cols = ["--data", data, "--outcome", "cs", "--exposures", "as,mn,pb", "--mediator", "bl",
            "--covariates", "age,sex", "--log", "exposures", "--seed", "17"]
    quick = ["--iterations", "200", "--k-inner", "20", "--n-boot", "50"]
    runs = {
        "fit": ["fit", *cols, "--vs", "--iterations", "300"],
        "mediate": ["mediate", *cols, *quick],
        "cde": ["cde", *cols, *quick],
        "simulate": ["simulate", "--scenarios", "1", "--replicates", "2", "--n", "80", "--n-truth", "20000",
                     "--iterations", "100", "--k-inner", "10", "--seed", "17", "--threads", "2"],
    }
    mismatched = []
    for name, args in runs.items():
        outs = []
        for k in range(2):
            d = tmp_path / f"{name}{k}"
            assert main(args + ["--out-dir", str(d)]) == 0
            outs.append({p.name: p.read_bytes() for p in sorted(d.iterdir())})
        if outs[0] != outs[1]:
            mismatched.append(name)
    for k in range(2):
        assert main(["report", str(tmp_path / "simulate0" / "results.csv"), "--out-dir", str(tmp_path / f"report{k}")]) == 0
    a = {p.name: p.read_bytes() for p in sorted((tmp_path / "report0").iterdir())}
    b = {p.name: p.read_bytes() for p in sorted((tmp_path / "report1").iterdir())}
    if a != b:
        mismatched.append("report")
    ok = not mismatched
    report_line("C10 CLI byte-identical reruns", ok,
                "fit, mediate, cde, simulate (2 workers), report" + (f"; differ: {mismatched}" if mismatched else ""))
    assert ok
