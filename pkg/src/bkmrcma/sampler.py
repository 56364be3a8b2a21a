"""Metropolis-within-Gibbs sampler for Gaussian-kernel machine regression.

The latent surface ``h`` is integrated out, so the state is
``(beta, sigma2, lambda, kernel state)`` and the working likelihood is

    y ~ N(C beta, sigma2 (I + lambda K)).

Block updates, in order: beta (Gibbs, flat prior), sigma^-2 (Gibbs, gamma
prior), lambda (log-scale random walk), kernel state (smoothness random walk,
or spike-and-slab toggle / log random walk on each ``r_l``).
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import asdict, dataclass, replace

import numpy as np
import scipy.linalg as sla
from scipy.linalg.lapack import dpotrs as _potrs
from scipy.linalg.lapack import dtrtrs as _trtrs

from .errors import InitializationError, InputError, NumericalError
from .model import (
    SINGLE,
    WEIGHTS,
    Dataset,
    KernelInputs,
    KernelState,
    PosteriorDraws,
    PriorConfig,
    kernel_from_stack,
    kernel_matrix,
    make_rng,
    sq_diff_stack,
    stable_cholesky,
)

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class McmcConfig:
    iterations: int = 10000
    burn_in: int | None = None
    thin: int = 1
    seed: int = 0
    stream: int = 0
    lambda_step: float = 0.3
    r_step: float = 0.2
    rho_step: float = 2.0
    variable_selection: bool = False
    kernel_mode: str | None = None
    adapt: bool = True
    adapt_fraction: float = 0.5
    target_accept: float = 0.35
    toggle_proposal_mean: float = 1.0
    # test hooks
    fix_lambda: float | None = None
    sample_prior: bool = False

    def __post_init__(self):
        if self.iterations < 1:
            raise InputError("iterations must be >= 1")
        if self.thin < 1:
            raise InputError("thin must be >= 1")
        if not self.burn_in_resolved < self.iterations:
            raise InputError("burn_in must be smaller than iterations")
        for name in ("lambda_step", "r_step", "rho_step", "toggle_proposal_mean"):
            if not getattr(self, name) > 0:
                raise InputError(f"{name} must be positive")
        if self.kernel_mode is not None and self.kernel_mode not in (SINGLE, WEIGHTS):
            raise InputError(f"unknown kernel mode {self.kernel_mode!r}")
        if self.variable_selection and self.kernel_mode == SINGLE:
            raise InputError("variable selection needs component weights")

    @property
    def burn_in_resolved(self) -> int:
        return self.iterations // 2 if self.burn_in is None else int(self.burn_in)

    @property
    def mode(self) -> str:
        if self.kernel_mode is not None:
            return self.kernel_mode
        return WEIGHTS if self.variable_selection else SINGLE

    @property
    def retained(self) -> int:
        return (self.iterations - self.burn_in_resolved) // self.thin


def _tri(chol: np.ndarray, b: np.ndarray) -> np.ndarray:
    """chol^{-1} b for lower-triangular chol."""
    x, info = _trtrs(chol, b, lower=1)
    if info != 0:
        raise NumericalError("triangular solve failed")
    return x


def loglik_from_factor(resid: np.ndarray, sigma2: float, chol: np.ndarray, logdet: float) -> float:
    """log N(resid; 0, sigma2 V) given the lower Cholesky factor of V."""
    u = _tri(chol, resid)
    n = resid.shape[0]
    return -0.5 * (n * (LOG_2PI + math.log(sigma2)) + logdet + float(u @ u) / sigma2)


def factor_v(K: np.ndarray, lam: float) -> tuple[np.ndarray, float]:
    """Cholesky factor and log-determinant of I + lam K."""
    V = lam * K
    V.flat[:: V.shape[0] + 1] += 1.0
    chol, _ = stable_cholesky(V)
    return chol, 2.0 * float(np.sum(np.log(np.diag(chol))))


def marginal_loglik(dataset: Dataset, beta, sigma2: float, lam: float, state: KernelState,
                    kernel_inputs: KernelInputs | None = None, response: str = "y",
                    intercept: bool = False) -> float:
    """Log density of the response under N(C beta, sigma2 (I + lam K)).

    ``beta`` must match the covariate design, which gains a leading column of
    ones when ``intercept`` is set.
    """
    if not (sigma2 > 0 and lam >= 0):
        raise InputError("need sigma2 > 0 and lambda >= 0")
    ki = kernel_inputs or KernelInputs.for_dataset(dataset)
    y = dataset.m if response == "m" else dataset.y
    C = dataset.c
    if intercept:
        C = np.column_stack([np.ones(dataset.n), C])
    beta = np.asarray(beta, dtype=float).ravel()
    if beta.shape[0] != C.shape[1]:
        raise InputError(f"beta has length {beta.shape[0]}, design has {C.shape[1]} columns")
    K = kernel_matrix(ki.design(dataset), state)
    chol, logdet = factor_v(K, lam)
    val = loglik_from_factor(y - C @ beta, sigma2, chol, logdet)
    if not math.isfinite(val):
        raise NumericalError("non-finite marginal log-likelihood")
    return val


def beta_conditional(y: np.ndarray, C: np.ndarray, sigma2: float, chol: np.ndarray):
    """Mean and covariance of beta | rest under a flat prior (GLS)."""
    W = sla.solve_triangular(chol, C, lower=True, check_finite=False)
    u = sla.solve_triangular(chol, y, lower=True, check_finite=False)
    A = W.T @ W
    mean = np.linalg.solve(A, W.T @ u)
    return mean, sigma2 * np.linalg.inv(A)


def update_beta(y: np.ndarray, C: np.ndarray, sigma2: float, chol: np.ndarray,
                rng: np.random.Generator) -> np.ndarray:
    W = _tri(chol, C)
    u = _tri(chol, y)
    A = W.T @ W
    A_chol = np.linalg.cholesky(A)
    mean = sla.cho_solve((A_chol, True), W.T @ u, check_finite=False)
    # A^{-1} = A_chol^{-T} A_chol^{-1}
    noise = sla.solve_triangular(A_chol.T, rng.standard_normal(C.shape[1]), lower=False, check_finite=False)
    return mean + math.sqrt(sigma2) * noise


def update_sigma2(resid: np.ndarray, chol: np.ndarray, priors: PriorConfig,
                  rng: np.random.Generator) -> float:
    """Draw sigma2 via sigma^-2 ~ Gamma(a + n/2, rate = b + q/2)."""
    u = _tri(chol, resid)
    shape = priors.a_sigma + 0.5 * resid.shape[0]
    rate = priors.b_sigma + 0.5 * float(u @ u)
    return 1.0 / rng.gamma(shape, 1.0 / rate)


def update_lambda(lam: float, loglik, priors: PriorConfig, step: float,
                  rng: np.random.Generator, current_ll: float):
    """One log-scale random-walk step for lambda.

    ``loglik(lam)`` returns ``(ll, payload)``. Returns
    ``(lam, ll, payload_or_None, accepted)``.
    """
    prop = lam * math.exp(step * rng.standard_normal())
    ll_prop, payload = loglik(prop)
    # gamma prior density times the log-scale Jacobian
    a, b = priors.lambda_shape, priors.lambda_rate
    log_ratio = ll_prop - current_ll + a * (math.log(prop) - math.log(lam)) - b * (prop - lam)
    if math.log(rng.uniform()) < log_ratio:
        return prop, ll_prop, payload, True
    return lam, current_ll, None, False


def _slab_logpdf(r: float, priors: PriorConfig) -> float:
    a, b = priors.slab_shape, priors.slab_rate
    return a * math.log(b) - math.lgamma(a) + (a - 1.0) * math.log(r) - b * r


def update_kernel_state(r: np.ndarray, delta: np.ndarray, l: int, loglik, priors: PriorConfig,
                        step: float, rng: np.random.Generator, current_ll: float,
                        variable_selection: bool, toggle_mean: float = 1.0):
    """One spike-and-slab move on component ``l``.

    With variable selection, a fair coin picks a toggle of ``delta_l`` or a
    log random walk on ``r_l`` (a no-op when excluded). Turning a component on
    proposes ``r_l`` from an exponential with mean ``toggle_mean``.
    ``loglik(r_new)`` returns ``(ll, payload)``.

    Returns ``(r, delta, ll, payload_or_None, move, accepted)`` where move is
    ``"toggle"``, ``"walk"`` or ``None``.
    """
    pi = priors.pi_inclusion
    if variable_selection and rng.uniform() < 0.5:
        r_new = r.copy()
        d_new = delta.copy()
        q_logpdf = lambda v: -math.log(toggle_mean) - v / toggle_mean
        if delta[l]:
            old = r[l]
            r_new[l] = 0.0
            d_new[l] = False
            ll_prop, payload = loglik(r_new)
            log_ratio = (ll_prop - current_ll + math.log(1 - pi) - math.log(pi)
                         + q_logpdf(old) - _slab_logpdf(old, priors))
        else:
            val = rng.exponential(toggle_mean)
            r_new[l] = val
            d_new[l] = True
            ll_prop, payload = loglik(r_new)
            log_ratio = (ll_prop - current_ll + math.log(pi) - math.log(1 - pi)
                         + _slab_logpdf(val, priors) - q_logpdf(val))
        if math.log(rng.uniform()) < log_ratio:
            return r_new, d_new, ll_prop, payload, "toggle", True
        return r, delta, current_ll, None, "toggle", False
    if not delta[l]:
        return r, delta, current_ll, None, None, False
    r_new = r.copy()
    r_new[l] = r[l] * math.exp(step * rng.standard_normal())
    if r_new[l] <= 0.0:
        return r, delta, current_ll, None, "walk", False
    ll_prop, payload = loglik(r_new)
    a, b = priors.slab_shape, priors.slab_rate
    log_ratio = (ll_prop - current_ll + a * (math.log(r_new[l]) - math.log(r[l]))
                 - b * (r_new[l] - r[l]))
    if math.log(rng.uniform()) < log_ratio:
        return r_new, delta, ll_prop, payload, "walk", True
    return r, delta, current_ll, None, "walk", False


class _Chain:
    """Mutable sampler state for one chain. Not shared between threads."""

    def __init__(self, y, C, X, priors: PriorConfig, cfg: McmcConfig, rng):
        self.y, self.C, self.priors, self.cfg, self.rng = y, C, priors, cfg, rng
        self.n = y.shape[0]
        self.P = C.shape[1]
        self.dim = X.shape[1]
        self.stack = sq_diff_stack(X, X)
        self.mode = cfg.mode
        self.vs = cfg.variable_selection

        if self.P:
            self.beta = np.linalg.lstsq(C, y, rcond=None)[0]
            resid = y - C @ self.beta
        else:
            self.beta = np.zeros(0)
            resid = y
        dof = max(self.n - self.P, 1)
        self.sigma2 = max(float(resid @ resid) / dof, 1e-8)
        self.lam = 10.0 if cfg.fix_lambda is None else float(cfg.fix_lambda)
        if self.mode == SINGLE:
            self.rho = float(min(max(self.dim, 1e-3), priors.rho_bounds[1] * 0.999))
            self.r = np.full(self.dim, 1.0 / self.rho)
            self.delta = np.ones(self.dim, dtype=bool)
        else:
            self.rho = float("nan")
            self.r = rng.gamma(priors.slab_shape, 1.0 / priors.slab_rate, size=self.dim)
            self.delta = np.ones(self.dim, dtype=bool)
        self.K = kernel_from_stack(self.r, self.stack)
        self._refactor()
        self.ll = self._ll(self.chol, self.logdet)
        if not math.isfinite(self.ll):
            raise InitializationError("non-finite log-likelihood at initialization")

        self.steps = {"lambda": cfg.lambda_step, "rho": cfg.rho_step}
        self.r_steps = np.full(self.dim, cfg.r_step)

    # likelihood helpers -------------------------------------------------
    def _resid(self):
        return self.y - self.C @ self.beta if self.P else self.y

    def _ll(self, chol, logdet):
        if self.cfg.sample_prior:
            return 0.0
        return loglik_from_factor(self._resid(), self.sigma2, chol, logdet)

    def _refactor(self):
        self.chol, self.logdet = factor_v(self.K, self.lam)

    def _ll_lambda(self, lam):
        if self.cfg.sample_prior:
            return 0.0, None
        chol, logdet = factor_v(self.K, lam)
        return loglik_from_factor(self._resid(), self.sigma2, chol, logdet), (chol, logdet)

    def _ll_weights(self, w):
        K = kernel_from_stack(w, self.stack)
        if self.cfg.sample_prior:
            return 0.0, (K, None, None)
        chol, logdet = factor_v(K, self.lam)
        return loglik_from_factor(self._resid(), self.sigma2, chol, logdet), (K, chol, logdet)

    def _accept_kernel(self, payload):
        K, chol, logdet = payload
        self.K = K
        if chol is None:
            self._refactor()
        else:
            self.chol, self.logdet = chol, logdet

    # one sweep ----------------------------------------------------------
    def sweep(self, counts: dict | None):
        rng, cfg = self.rng, self.cfg
        if not cfg.sample_prior:
            if self.P:
                self.beta = update_beta(self.y, self.C, self.sigma2, self.chol, rng)
            self.sigma2 = update_sigma2(self._resid(), self.chol, self.priors, rng)
        self.ll = self._ll(self.chol, self.logdet)

        accepted = {}
        if cfg.fix_lambda is None:
            self.lam, self.ll, payload, acc = update_lambda(
                self.lam, self._ll_lambda, self.priors, self.steps["lambda"], rng, self.ll)
            if acc and payload is not None:
                self.chol, self.logdet = payload
            elif acc:
                self._refactor()
            accepted["lambda"] = acc
            self._tally(counts, "lambda", acc)

        if cfg.fix_lambda is not None and cfg.fix_lambda == 0.0:
            return accepted
        if self.mode == SINGLE:
            accepted["rho"] = self._update_rho(counts)
        else:
            walk = np.zeros(self.dim)
            for l in range(self.dim):
                self.r, self.delta, self.ll, payload, move, acc = update_kernel_state(
                    self.r, self.delta, l, self._ll_weights, self.priors, self.r_steps[l], rng,
                    self.ll, self.vs, cfg.toggle_proposal_mean)
                if acc:
                    self._accept_kernel(payload)
                if move == "walk":
                    walk[l] = 1.0 if acc else -1.0
                if move is not None:
                    self._tally(counts, "r" if move == "walk" else "toggle", acc)
            accepted["r"] = walk
        return accepted

    def _update_rho(self, counts):
        lo, hi = self.priors.rho_bounds
        prop = self.rho + self.steps["rho"] * self.rng.standard_normal()
        acc = False
        if lo < prop < hi:
            w = np.full(self.dim, 1.0 / prop)
            ll_prop, payload = self._ll_weights(w)
            if math.log(self.rng.uniform()) < ll_prop - self.ll:
                self.rho, self.r, self.ll = prop, w, ll_prop
                self._accept_kernel(payload)
                acc = True
        self._tally(counts, "rho", acc)
        return acc

    @staticmethod
    def _tally(counts, key, acc):
        if counts is None:
            return
        c = counts.setdefault(key, [0, 0])
        c[0] += int(acc)
        c[1] += 1

    def adapt(self, t: int, accepted: dict):
        gain = (t + 1.0) ** -0.6
        target = self.cfg.target_accept
        for key in ("lambda", "rho"):
            if key in accepted:
                self.steps[key] *= math.exp(gain * (float(accepted[key]) - target))
        if "r" in accepted:
            walk = accepted["r"]
            moved = walk != 0
            self.r_steps[moved] *= np.exp(gain * ((walk[moved] > 0) - target))


def fit_bkmr(dataset: Dataset, kernel_inputs: KernelInputs | None = None,
             priors: PriorConfig | None = None, mcmc: McmcConfig | None = None,
             response: str = "y", intercept: bool = True) -> PosteriorDraws:
    """Fit one kernel machine regression and return the retained draws.

    ``response`` selects the modelled variable (``"y"`` for outcome and
    total-effect models, ``"m"`` for the mediator model). The covariate design
    gets a leading intercept column unless ``intercept=False``.
    """
    priors = priors or PriorConfig()
    mcmc = mcmc or McmcConfig()
    kernel_inputs = kernel_inputs or KernelInputs.for_dataset(dataset)
    if response == "m" and kernel_inputs.mediator:
        raise InputError("the mediator cannot be both response and kernel input")
    X = kernel_inputs.design(dataset)
    y = dataset.m if response == "m" else dataset.y
    if y is None:
        raise InputError("mediator response requested but dataset has no mediator")
    C = dataset.c
    if intercept:
        C = np.column_stack([np.ones(dataset.n), C])
    if C.shape[1] and np.linalg.matrix_rank(C) < C.shape[1]:
        raise InputError("covariate design is rank deficient")

    rng = make_rng(mcmc.seed, mcmc.stream)
    try:
        chain = _Chain(y, C, X, priors, mcmc, rng)
    except NumericalError as exc:
        raise InitializationError(f"initialization failed: {exc}") from exc

    burn = mcmc.burn_in_resolved
    adapt_until = int(burn * mcmc.adapt_fraction) if mcmc.adapt else 0
    J = mcmc.retained
    P, dim = C.shape[1], X.shape[1]
    out_beta = np.empty((J, P))
    out_sigma2 = np.empty(J)
    out_lam = np.empty(J)
    out_rho = np.full(J, np.nan)
    out_r = np.empty((J, dim))
    out_delta = np.empty((J, dim), dtype=bool)
    # V^{-1}(y - C beta) per draw, consumed by surface predictions
    out_alpha = np.empty((J, dataset.n))

    counts: dict = {}
    j = 0
    for it in range(mcmc.iterations):
        kept_phase = it >= burn
        accepted = chain.sweep(counts if kept_phase else None)
        if it < adapt_until:
            chain.adapt(it, accepted)
        if kept_phase and (it - burn) % mcmc.thin == mcmc.thin - 1 and j < J:
            out_beta[j] = chain.beta
            out_sigma2[j] = chain.sigma2
            out_lam[j] = chain.lam
            out_rho[j] = chain.rho
            out_r[j] = chain.r
            out_delta[j] = chain.delta
            out_alpha[j] = _potrs(chain.chol, chain._resid(), lower=1)[0]
            j += 1

    acceptance = {k: v[0] / v[1] for k, v in sorted(counts.items()) if v[1]}
    warn = [f"MH block {k!r} rejected every proposal after adaptation"
            for k, rate in acceptance.items() if rate == 0.0]
    for msg in warn:
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    diagnostics = {
        "warnings": warn,
        "final_steps": {**{k: float(v) for k, v in chain.steps.items()},
                        "r": [float(s) for s in chain.r_steps]},
        "mcmc": asdict(mcmc),
        "priors": asdict(priors),
    }
    return PosteriorDraws(
        dataset=dataset, kernel_inputs=kernel_inputs, response=response,
        mode=mcmc.mode, intercept=intercept, beta=out_beta, sigma2=out_sigma2, lam=out_lam,
        rho=out_rho, r=out_r, delta=out_delta, acceptance=acceptance, diagnostics=diagnostics,
        _cache=dict(enumerate(out_alpha)),
    )


def with_seed(mcmc: McmcConfig, seed: int, stream: int = 0) -> McmcConfig:
    return replace(mcmc, seed=int(seed), stream=int(stream))


def write_trace_csv(draws: PosteriorDraws, path) -> None:
    """One row per retained draw; floats written with ``repr`` for exact round-trips."""
    names = draws.kernel_inputs.names
    header = (["draw"] + [f"beta[{c}]" for c in draws.covariate_names] + ["sigma2", "lambda"]
              + (["rho"] if draws.mode == SINGLE else [])
              + [f"r[{nm}]" for nm in names] + [f"delta[{nm}]" for nm in names])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for j in range(draws.J):
            row = [j] + [repr(float(b)) for b in draws.beta[j]]
            row += [repr(float(draws.sigma2[j])), repr(float(draws.lam[j]))]
            if draws.mode == SINGLE:
                row.append(repr(float(draws.rho[j])))
            row += [repr(float(v)) for v in draws.r[j]]
            row += [int(d) for d in draws.delta[j]]
            w.writerow(row)
