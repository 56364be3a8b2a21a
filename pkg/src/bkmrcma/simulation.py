"""Simulation scenarios, brute-force truth oracles and the replicated study.

Exposure 1 plays the role of Mn, exposure 2 As and exposure 3 Pb. Scenario
surfaces:

====  ====================  ======================
 id   mediator surface       outcome surface
====  ====================  ======================
 1    h1_lin(z1)             h2_add(z1, m)
 2    h1_log(z1)             h2_log(z1, m)
 3    h1_quad(z1)            h2_log(z1, m)
 4    h2_quad(z1, z3)        h2_quad(z1, m)
====  ====================  ======================

Scenario 1 is linear in both arguments without a product term
(``h2_add(x, y) = x + y``); pass ``outcome_surface="h2_lin"`` to add the
``0.5 x y`` exposure-mediator interaction instead. Noise standard deviations default to a signal-to-noise ratio of one half,
``Var(h) / (Var(h) + sigma^2) = 0.5``, measured on the truth population.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import BkmrError, InputError
from .mediation import ContrastSpec, estimate_mediation
from .model import Dataset, KernelInputs, PriorConfig, derive_seed, make_rng
from .parametric import METHOD_MODE, fit_linear_mediation, method_effects
from .sampler import McmcConfig, fit_bkmr

log = logging.getLogger(__name__)

LINEAR_METHODS = ("linear", "linear-noint", "traditional")
BKMR_METHODS = ("bkmr-cma", "bkmr-cma-vs")
ALL_METHODS = ("bkmr-cma", "bkmr-cma-vs", "linear", "traditional")

DEFAULT_BLOCK = np.array([[1.0, 0.34, 0.25],
                          [0.34, 1.0, 0.29],
                          [0.25, 0.29, 1.0]])


def _logistic(t):
    return 4.0 / (1.0 + np.exp(-t)) - 2.0


SURFACES = {
    "h1_lin": (1, lambda x: x),
    "h1_log": (1, lambda x: _logistic(4.0 * x)),
    "h1_quad": (1, lambda x: x ** 2 / 2.0 + x / 2.0),
    "h2_add": (2, lambda x, y: x + y),
    "h2_lin": (2, lambda x, y: x + y + 0.5 * x * y),
    "h2_log": (2, lambda x, y: _logistic(2.0 * (x + y) + x * y)),
    "h2_quad": (2, lambda x, y: (x ** 2 + y ** 2) / 4.0 + x / 2.0 + y / 2.0 + 0.5 * x * y),
}

# (mediator surface, exposure indices), (outcome surface, exposure indices; mediator appended)
SCENARIOS = {
    1: (("h1_lin", (0,)), ("h2_add", (0,))),
    2: (("h1_log", (0,)), ("h2_log", (0,))),
    3: (("h1_quad", (0,)), ("h2_log", (0,))),
    4: (("h2_quad", (0, 2)), ("h2_quad", (0,))),
}


def surface(name: str, *inputs):
    try:
        arity, fn = SURFACES[name]
    except KeyError:
        raise InputError(f"unknown surface {name!r}; choose from {sorted(SURFACES)}") from None
    if len(inputs) != arity:
        raise InputError(f"{name} takes {arity} input(s), got {len(inputs)}")
    return fn(*(np.asarray(v, dtype=float) for v in inputs))


def build_sigma(L: int, source=None, fill: float = 0.3) -> np.ndarray:
    """Exposure covariance: a leading block, ``fill`` elsewhere off the diagonal.

    ``source`` is ``None`` (built-in 3x3 block), ``"identity"``, or a square
    array placed verbatim in the upper-left corner.
    """
    if L < 1:
        raise InputError("L must be >= 1")
    if isinstance(source, str):
        if source != "identity":
            raise InputError(f"unknown covariance source {source!r}")
        return np.eye(L)
    block = DEFAULT_BLOCK if source is None else np.asarray(source, dtype=float)
    if block.ndim != 2 or block.shape[0] != block.shape[1]:
        raise InputError("covariance block must be square")
    k = min(block.shape[0], L)
    sigma = np.full((L, L), float(fill))
    np.fill_diagonal(sigma, 1.0)
    sigma[:k, :k] = block[:k, :k]
    if not np.allclose(sigma, sigma.T):
        raise InputError("covariance is not symmetric")
    if np.linalg.eigvalsh(sigma).min() < -1e-10:
        raise InputError("covariance is not positive semidefinite")
    return sigma


@dataclass(frozen=True, eq=False)
class ScenarioSpec:
    scenario_id: int
    L: int = 3
    sigma: np.ndarray | None = None
    sigma_m: float | None = None
    sigma_y: float | None = None
    snr: float = 0.5
    n_truth: int = 1_000_000
    n_replicates: int = 500
    n: int = 300
    seed: int = 2019
    contrast: str = "population"
    outcome_surface: str | None = None

    def __post_init__(self):
        if self.scenario_id not in SCENARIOS:
            raise InputError(f"scenario must be one of {sorted(SCENARIOS)}")
        sigma = build_sigma(self.L) if self.sigma is None else np.asarray(self.sigma, dtype=float)
        if sigma.shape != (self.L, self.L):
            raise InputError(f"sigma must be {self.L}x{self.L}")
        if not np.allclose(sigma, sigma.T) or np.linalg.eigvalsh(sigma).min() <= 0:
            raise InputError("sigma must be symmetric positive definite")
        object.__setattr__(self, "sigma", sigma)
        (_, med_idx), (_, out_idx) = SCENARIOS[self.scenario_id]
        if max(med_idx + out_idx) >= self.L:
            raise InputError(f"scenario {self.scenario_id} needs at least {max(med_idx + out_idx) + 1} exposures")
        if self.outcome_surface is not None and SURFACES.get(self.outcome_surface, (0,))[0] != 2:
            raise InputError(f"outcome surface must be a 2-input surface, got {self.outcome_surface!r}")
        if not 0 < self.snr < 1:
            raise InputError("snr must lie in (0, 1)")
        if self.contrast not in ("population", "replicate"):
            raise InputError("contrast must be 'population' or 'replicate'")
        if self.n < 2 or self.n > self.n_truth:
            raise InputError("replicate size must be between 2 and n_truth")

    @property
    def z_names(self) -> tuple[str, ...]:
        return tuple(f"z{i + 1}" for i in range(self.L))

    def h_m(self, z: np.ndarray) -> np.ndarray:
        name, idx = SCENARIOS[self.scenario_id][0]
        return surface(name, *(z[..., i] for i in idx))

    def h_y(self, z: np.ndarray, m) -> np.ndarray:
        name, idx = SCENARIOS[self.scenario_id][1]
        name = self.outcome_surface or name
        return surface(name, *(z[..., i] for i in idx), m)

    def settings(self) -> dict:
        d = asdict(self)
        d["sigma"] = self.sigma.tolist()
        return d


def desk_scenario(scenario_id: int, L: int = 3, **overrides) -> ScenarioSpec:
    """Reduced replication settings for routine checks: 50 x 200, truth 2e5."""
    base = dict(n_truth=200_000, n_replicates=50, n=200)
    base.update(overrides)
    return ScenarioSpec(scenario_id, L, **base)


def desk_mcmc(**overrides) -> McmcConfig:
    return McmcConfig(**{"iterations": 2000, "burn_in": 1000, **overrides})


@dataclass(frozen=True, eq=False)
class TruthOracle:
    z_star: np.ndarray
    z: np.ndarray
    m_quantiles: tuple[float, float, float]
    nde: float
    nie: float
    te: float
    cde: dict
    sigma_m: float
    sigma_y: float

    def value(self, effect: str, m_value=None) -> float:
        if effect == "cde":
            return self.cde[float(m_value)]
        return getattr(self, effect)

    def as_dict(self) -> dict:
        return {"z_star": self.z_star.tolist(), "z": self.z.tolist(),
                "m_quantiles": list(self.m_quantiles), "nde": self.nde, "nie": self.nie,
                "te": self.te, "cde": {repr(k): v for k, v in self.cde.items()},
                "sigma_m": self.sigma_m, "sigma_y": self.sigma_y}


@dataclass(frozen=True, eq=False)
class TruthPopulation:
    z: np.ndarray
    m: np.ndarray
    y: np.ndarray


def _blocks(N: int, block: int):
    for b, start in enumerate(range(0, N, block)):
        yield b, start, min(start + block, N)


def generate_truth(spec: ScenarioSpec, block: int = 100_000, max_bytes: float = 2e9,
                   n_oracle: int | None = None):
    """Simulate the truth population and brute-force the oracle effects.

    Every block of rows draws from its own substream, so the population does
    not depend on ``block`` boundaries being processed in any order.
    Counterfactual means use ``n_oracle`` (default ``n_truth``) noise draws;
    TE uses its own streams, independent of those behind NDE and NIE.
    """
    N, L = int(spec.n_truth), spec.L
    need = N * (L + 4) * 8
    if need > max_bytes:
        raise InputError(f"truth population needs ~{need / 1e9:.1f} GB (limit {max_bytes / 1e9:.1f} GB)")
    chol = np.linalg.cholesky(spec.sigma)
    z = np.empty((N, L))
    hm = np.empty(N)
    for b, lo, hi in _blocks(N, block):
        z[lo:hi] = make_rng(spec.seed, 0, b).standard_normal((hi - lo, L)) @ chol.T
        hm[lo:hi] = spec.h_m(z[lo:hi])
    sigma_m = spec.sigma_m if spec.sigma_m is not None else _noise_sd(hm, spec.snr)
    m = np.empty(N)
    hy = np.empty(N)
    for b, lo, hi in _blocks(N, block):
        m[lo:hi] = hm[lo:hi] + sigma_m * make_rng(spec.seed, 1, b).standard_normal(hi - lo)
        hy[lo:hi] = spec.h_y(z[lo:hi], m[lo:hi])
    del hm
    sigma_y = spec.sigma_y if spec.sigma_y is not None else _noise_sd(hy, spec.snr)
    y = hy
    for b, lo, hi in _blocks(N, block):
        y[lo:hi] += sigma_y * make_rng(spec.seed, 2, b).standard_normal(hi - lo)

    z_star = np.quantile(z, 0.25, axis=0)
    z_hi = np.quantile(z, 0.75, axis=0)
    mq = tuple(float(v) for v in np.quantile(m, [0.25, 0.5, 0.75]))
    oracle = oracle_effects(spec, z_hi, z_star, sigma_m, mq, n_oracle or N, block)
    oracle = replace(oracle, sigma_y=float(sigma_y))
    return TruthPopulation(z=z, m=m, y=y), oracle


def _noise_sd(signal: np.ndarray, snr: float) -> float:
    return math.sqrt(float(np.var(signal)) * (1.0 - snr) / snr)


def oracle_effects(spec: ScenarioSpec, z, z_star, sigma_m: float, m_values, n_draws: int,
                   block: int = 100_000) -> TruthOracle:
    """Population g-computation with the true surfaces."""
    z = np.asarray(z, dtype=float)
    zs = np.asarray(z_star, dtype=float)
    mu_z = float(spec.h_m(z))
    mu_zs = float(spec.h_m(zs))
    sums = np.zeros(5)
    for b, lo, hi in _blocks(n_draws, block):
        k = hi - lo
        rng_a = make_rng(spec.seed, 3, b)
        rng_b = make_rng(spec.seed, 4, b)
        m_zs = mu_zs + sigma_m * rng_a.standard_normal(k)
        m_z = mu_z + sigma_m * rng_a.standard_normal(k)
        y_z_mzs = spec.h_y(z, m_zs)
        sums[0] += np.sum(y_z_mzs - spec.h_y(zs, m_zs))       # NDE
        sums[1] += np.sum(spec.h_y(z, m_z) - y_z_mzs)          # NIE
        # TE from independent streams
        sums[2] += np.sum(spec.h_y(z, mu_z + sigma_m * rng_b.standard_normal(k)))
        sums[3] += np.sum(spec.h_y(zs, mu_zs + sigma_m * rng_b.standard_normal(k)))
    nde, nie = sums[0] / n_draws, sums[1] / n_draws
    te = (sums[2] - sums[3]) / n_draws
    cde = {float(mv): float(spec.h_y(z, mv) - spec.h_y(zs, mv)) for mv in m_values}
    return TruthOracle(z_star=zs, z=z, m_quantiles=tuple(float(v) for v in m_values),
                       nde=float(nde), nie=float(nie), te=float(te), cde=cde,
                       sigma_m=float(sigma_m), sigma_y=float("nan"))


# ---------------------------------------------------------------------------
# replicated study


@dataclass
class StudyResult:
    spec: ScenarioSpec
    oracle: TruthOracle
    methods: tuple[str, ...]
    estimates: list = field(default_factory=list)   # dicts: replicate, method, effect, m_value, estimate
    failures: list = field(default_factory=list)    # dicts: replicate, method, error
    settings: dict = field(default_factory=dict)

    def values(self, method: str, effect: str, m_value=None) -> np.ndarray:
        m_key = None if m_value is None else float(m_value)
        return np.array([e["estimate"] for e in self.estimates
                         if e["method"] == method and e["effect"] == effect and e["m_value"] == m_key])

    def summary(self) -> list[dict]:
        """Tidy rows: scenario, L, method, effect, m_value, statistic, value."""
        keys = []
        for e in self.estimates:
            k = (e["method"], e["effect"], e["m_value"])
            if k not in keys:
                keys.append(k)
        order = {m: i for i, m in enumerate(self.methods)}
        eff_order = {"te": 0, "nde": 1, "nie": 2, "cde": 3}
        keys.sort(key=lambda k: (order.get(k[0], 99), eff_order[k[1]], -1 if k[2] is None else k[2]))
        rows = []
        for method, effect, m in keys:
            est = self.values(method, effect, m)
            truth = self.oracle.value(effect, m)
            for stat, val in summarize_replicates(est, truth).items():
                rows.append({"scenario": self.spec.scenario_id, "L": self.spec.L, "method": method,
                             "effect": effect, "m_value": m, "statistic": stat, "value": val})
        return rows


def summarize_replicates(estimates, truth: float) -> dict:
    est = np.asarray(estimates, dtype=float)
    err = est - truth
    lo, med, hi = np.quantile(est, [0.025, 0.5, 0.975])
    return {"truth": float(truth), "n": float(est.shape[0]), "median": float(med),
            "lower": float(lo), "upper": float(hi), "mean": float(est.mean()),
            "sd": float(est.std(ddof=1)) if est.shape[0] > 1 else 0.0,
            "bias": float(err.mean()), "rmse": rmse(est, truth)}


def rmse(estimates, truth: float) -> float:
    err = np.asarray(estimates, dtype=float) - truth
    return float(np.sqrt(np.mean(err ** 2)))


def _replicate(r: int, ds: Dataset, spec: ScenarioSpec, oracle: TruthOracle, methods, mcmc: McmcConfig,
               priors: PriorConfig, k_inner: int):
    from threadpoolctl import threadpool_limits

    if spec.contrast == "replicate":
        z_star = np.quantile(ds.z, 0.25, axis=0)
        z_hi = np.quantile(ds.z, 0.75, axis=0)
    else:
        z_star, z_hi = oracle.z_star, oracle.z
    m_values = oracle.m_quantiles
    rows, failures = [], []
    with threadpool_limits(1):
        for mi, method in enumerate(methods):
            try:
                if method in LINEAR_METHODS:
                    fit = fit_linear_mediation(ds, METHOD_MODE[method])
                    eff = method_effects(fit, method, z_hi, z_star, m_values=m_values)
                else:
                    eff = _bkmr_effects(r, mi, method, ds, spec, mcmc, priors, z_hi, z_star, m_values, k_inner)
            except (BkmrError, np.linalg.LinAlgError) as exc:
                failures.append({"replicate": r, "method": method, "error": f"{type(exc).__name__}: {exc}"})
                continue
            for (effect, m), val in eff.items():
                rows.append({"replicate": r, "method": method, "effect": effect,
                             "m_value": None if m is None else float(m), "estimate": float(val)})
    return rows, failures


def _bkmr_effects(r, mi, method, ds, spec, mcmc, priors, z_hi, z_star, m_values, k_inner):
    vs = method == "bkmr-cma-vs"
    ki = KernelInputs.for_dataset(ds)
    ki_out = KernelInputs.for_dataset(ds, mediator=True)
    fits = []
    for k, (kin, resp) in enumerate(((ki, "m"), (ki_out, "y"), (ki, "y"))):
        cfg = replace(mcmc, variable_selection=vs, seed=derive_seed(spec.seed, 7, r, mi, k), stream=0)
        fits.append(fit_bkmr(ds, kin, priors, cfg, response=resp))
    contrast = ContrastSpec(z=z_hi, z_star=z_star, k_inner=k_inner, m_values=m_values)
    samples = estimate_mediation(*fits, contrast, seed=derive_seed(spec.seed, 8, r, mi))
    return {(name, m): float(np.mean(s)) for name, m, s in samples.items()}


def replicate_rows(spec: ScenarioSpec, N: int, r: int) -> np.ndarray:
    """Row indices of replicate ``r``: sampled without replacement, own substream."""
    return make_rng(spec.seed, 10, r).choice(N, size=spec.n, replace=False)


def run_study(spec: ScenarioSpec, methods=ALL_METHODS, truth=None, mcmc: McmcConfig | None = None,
              priors: PriorConfig | None = None, k_inner: int = 100, n_jobs: int = 1,
              replicates: int | None = None) -> StudyResult:
    """Run every method on every replicate and collect point estimates.

    BKMR methods report posterior means. Replicate failures are recorded in
    ``StudyResult.failures`` and excluded from the summaries.
    """
    from joblib import Parallel, delayed

    methods = tuple(methods)
    for m in methods:
        if m not in LINEAR_METHODS + BKMR_METHODS:
            raise InputError(f"unknown method {m!r}")
    mcmc = mcmc or desk_mcmc()
    priors = priors or PriorConfig()
    pop, oracle = truth if truth is not None else generate_truth(spec)
    N = pop.y.shape[0]
    R = spec.n_replicates if replicates is None else int(replicates)

    def jobs():
        for r in range(R):
            rows = replicate_rows(spec, N, r)
            ds = Dataset(y=pop.y[rows], z=pop.z[rows], m=pop.m[rows], z_names=spec.z_names)
            yield delayed(_replicate)(r, ds, spec, oracle, methods, mcmc, priors, k_inner)

    out = Parallel(n_jobs=n_jobs)(jobs())
    result = StudyResult(spec=spec, oracle=oracle, methods=methods,
                         settings={"scenario": spec.settings(), "mcmc": asdict(mcmc),
                                   "priors": asdict(priors), "k_inner": k_inner,
                                   "replicates": R, "methods": list(methods)})
    for rows, failures in out:
        result.estimates.extend(rows)
        result.failures.extend(failures)
    if result.failures:
        log.warning("%d replicate/method failures excluded", len(result.failures))
    return result
