"""Linear-model mediation: OLS fits and closed-form effects.

Mediator:  E[M] = b0 + b1'z + b2'c
Outcome:   E[Y] = t0 + t1'z + t2 m + t3'z m + t4'c + t5'e(z, c, x)

``traditional`` mode drops the ``z m`` block (t3 = 0). ``e`` are optional
extra outcome terms such as ``age``, ``age^2`` or ``age*Mn``; they may not
involve the mediator.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, SchemaError, SingularDesignError
from .mediation import EffectSamples
from .model import Dataset, make_rng

INTERACTION = "interaction"
TRADITIONAL = "traditional"

_TERM = re.compile(r"^\s*([^*^:]+?)\s*(?:\^\s*(\d+)|[*:]\s*([^*^:]+?))?\s*$")


@dataclass(frozen=True)
class ExtraTerm:
    """Product of dataset columns, e.g. ``age^2`` -> ('age', 'age')."""

    factors: tuple[str, ...]

    @classmethod
    def parse(cls, text: str) -> "ExtraTerm":
        match = _TERM.match(text)
        if not match:
            raise InputError(f"cannot parse extra term {text!r}")
        name, power, other = match.groups()
        if power is not None:
            return cls((name,) * int(power))
        if other is not None:
            return cls((name, other))
        return cls((name,))

    @property
    def label(self) -> str:
        if len(self.factors) > 1 and len(set(self.factors)) == 1:
            return f"{self.factors[0]}^{len(self.factors)}"
        return "*".join(self.factors)

    def evaluate(self, lookup) -> np.ndarray:
        out = 1.0
        for f in self.factors:
            out = out * np.asarray(lookup(f), dtype=float)
        return out


@dataclass(frozen=True, eq=False)
class LinearMediationFit:
    mode: str
    z_names: tuple[str, ...]
    c_names: tuple[str, ...]
    beta0: float
    beta1: np.ndarray
    beta2: np.ndarray
    theta0: float
    theta1: np.ndarray
    theta2: float
    theta3: np.ndarray
    theta4: np.ndarray
    theta5: np.ndarray
    extra_terms: tuple[ExtraTerm, ...]
    sigma2_m: float
    sigma2_y: float
    mediator_cov: np.ndarray
    outcome_cov: np.ndarray
    c_means: np.ndarray
    x_names: tuple[str, ...] = ()
    x_means: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def L(self) -> int:
        return self.beta1.shape[0]

    def mediator_mean(self, z, c) -> float:
        return float(self.beta0 + self.beta1 @ z + self.beta2 @ c)

    def outcome_mean(self, z, m, c, modifiers=None) -> float:
        z = np.asarray(z, dtype=float)
        val = (self.theta0 + self.theta1 @ z + self.theta2 * m + (self.theta3 @ z) * m
               + self.theta4 @ c)
        return float(val + self.theta5 @ _extra_row(self, z, c, modifiers))


def _design_columns(X: np.ndarray, names: list[str]):
    rank = np.linalg.matrix_rank(X)
    if rank == X.shape[1]:
        return
    bad = []
    kept = np.zeros((X.shape[0], 0))
    for i, nm in enumerate(names):
        trial = np.column_stack([kept, X[:, i]])
        if np.linalg.matrix_rank(trial) > kept.shape[1]:
            kept = trial
        else:
            bad.append(nm)
    raise SingularDesignError(f"design is rank deficient; offending columns: {bad}", bad)


def _ols(X: np.ndarray, y: np.ndarray, names: list[str]):
    n, p = X.shape
    if n <= p:
        raise SingularDesignError(f"need more observations ({n}) than regressors ({p})", [])
    _design_columns(X, names)
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    s2 = float(resid @ resid) / (n - p)
    cov = s2 * np.linalg.inv(X.T @ X)
    return coef, s2, cov


def _extra_row(fit: LinearMediationFit, z, c, modifiers) -> np.ndarray:
    if not fit.extra_terms:
        return np.zeros(0)
    z = np.asarray(z, dtype=float)
    c = np.asarray(c, dtype=float)
    mods = fit.x_means if modifiers is None else np.asarray(modifiers, dtype=float).ravel()
    if mods.shape[0] != len(fit.x_names):
        raise InputError(f"expected {len(fit.x_names)} modifier values, got {mods.shape[0]}")

    def lookup(name):
        if name in fit.z_names:
            return z[fit.z_names.index(name)]
        if name in fit.c_names:
            return c[fit.c_names.index(name)]
        if name in fit.x_names:
            return mods[fit.x_names.index(name)]
        raise SchemaError(f"extra term references unknown column {name!r}")

    return np.array([float(t.evaluate(lookup)) for t in fit.extra_terms])


def fit_linear_mediation(dataset: Dataset, mode: str = INTERACTION, extra_terms=()) -> LinearMediationFit:
    if mode not in (INTERACTION, TRADITIONAL):
        raise InputError(f"unknown mode {mode!r}")
    if dataset.m is None:
        raise SchemaError("linear mediation needs a mediator column")
    terms = tuple(t if isinstance(t, ExtraTerm) else ExtraTerm.parse(t) for t in extra_terms)
    for t in terms:
        if dataset.m_name in t.factors:
            raise SchemaError(f"extra term {t.label!r} involves the mediator")
    n, L, P = dataset.n, dataset.L, dataset.P
    ones = np.ones((n, 1))
    zn, cn = list(dataset.z_names), list(dataset.c_names)

    Xm = np.hstack([ones, dataset.z, dataset.c])
    bm, s2m, covm = _ols(Xm, dataset.m, ["(intercept)"] + zn + cn)

    m = dataset.m[:, None]
    blocks = [ones, dataset.z, m]
    names = ["(intercept)"] + zn + [dataset.m_name]
    if mode == INTERACTION:
        blocks.append(dataset.z * m)
        names += [f"{z}*{dataset.m_name}" for z in zn]
    blocks.append(dataset.c)
    names += cn
    if terms:
        blocks.append(np.column_stack([t.evaluate(dataset.column) for t in terms]))
        names += [t.label for t in terms]
    Xy = np.hstack(blocks)
    by, s2y, covy = _ols(Xy, dataset.y, names)

    i = 0
    theta0 = by[i]; i += 1
    theta1 = by[i:i + L]; i += L
    theta2 = by[i]; i += 1
    if mode == INTERACTION:
        theta3 = by[i:i + L]; i += L
    else:
        theta3 = np.zeros(L)
    theta4 = by[i:i + P]; i += P
    theta5 = by[i:]
    return LinearMediationFit(
        mode=mode, z_names=dataset.z_names, c_names=dataset.c_names,
        beta0=float(bm[0]), beta1=bm[1:1 + L].copy(), beta2=bm[1 + L:].copy(),
        theta0=float(theta0), theta1=theta1.copy(), theta2=float(theta2), theta3=theta3.copy(),
        theta4=theta4.copy(), theta5=theta5.copy(), extra_terms=terms,
        sigma2_m=s2m, sigma2_y=s2y, mediator_cov=covm, outcome_cov=covy,
        c_means=dataset.c.mean(axis=0), x_names=dataset.x_names, x_means=dataset.x.mean(axis=0),
    )


def _vecs(fit, z, z_star):
    z = np.asarray(z, dtype=float).ravel()
    zs = np.asarray(z_star, dtype=float).ravel()
    if z.shape[0] != fit.L or zs.shape[0] != fit.L:
        raise InputError(f"exposure profiles must have length {fit.L}")
    return z, zs


def _c(fit, c_bar):
    c = fit.c_means if c_bar is None else np.asarray(c_bar, dtype=float).ravel()
    if c.shape[0] != fit.beta2.shape[0]:
        raise InputError(f"c_bar must have length {fit.beta2.shape[0]}")
    return c


def _extra_diff(fit, z, zs, c, modifiers) -> float:
    if not fit.extra_terms:
        return 0.0
    return float(fit.theta5 @ (_extra_row(fit, z, c, modifiers) - _extra_row(fit, zs, c, modifiers)))


def linear_nde(fit: LinearMediationFit, z, z_star, c_bar=None, modifiers=None) -> float:
    z, zs = _vecs(fit, z, z_star)
    c = _c(fit, c_bar)
    dz = z - zs
    return float(fit.theta1 @ dz + (fit.theta3 @ dz) * fit.mediator_mean(zs, c)
                 + _extra_diff(fit, z, zs, c, modifiers))


def linear_nie(fit: LinearMediationFit, z, z_star) -> float:
    z, zs = _vecs(fit, z, z_star)
    return float((fit.theta2 + fit.theta3 @ z) * (fit.beta1 @ (z - zs)))


def linear_cde(fit: LinearMediationFit, z, z_star, m: float, c_bar=None, modifiers=None) -> float:
    z, zs = _vecs(fit, z, z_star)
    c = _c(fit, c_bar)
    return float((fit.theta1 + fit.theta3 * m) @ (z - zs) + _extra_diff(fit, z, zs, c, modifiers))


def traditional_effects(fit: LinearMediationFit, z, z_star, c_bar=None, modifiers=None):
    """Product-method (NDE, NIE) from a fit without exposure-mediator terms.

    The indirect effect uses the traditional outcome model's own mediator
    coefficient.
    """
    if fit.mode != TRADITIONAL:
        raise InputError("traditional effects need a fit in traditional mode")
    z, zs = _vecs(fit, z, z_star)
    c = _c(fit, c_bar)
    dz = z - zs
    nde = float(fit.theta1 @ dz + _extra_diff(fit, z, zs, c, modifiers))
    return nde, float(fit.theta2 * (fit.beta1 @ dz))


def method_effects(fit: LinearMediationFit, method: str, z, z_star, c_bar=None, modifiers=None,
                   m_values=()) -> dict:
    """Point estimates keyed ``("te"|"nde"|"nie", None)`` and ``("cde", m)``."""
    if method == "traditional":
        nde, nie = traditional_effects(fit, z, z_star, c_bar, modifiers)
    elif method in ("linear", "linear-noint"):
        nde = linear_nde(fit, z, z_star, c_bar, modifiers)
        nie = linear_nie(fit, z, z_star)
    else:
        raise InputError(f"unknown linear method {method!r}")
    out = {("te", None): nde + nie, ("nde", None): nde, ("nie", None): nie}
    for m in m_values:
        out[("cde", float(m))] = linear_cde(fit, z, z_star, m, c_bar, modifiers)
    return out


METHOD_MODE = {"linear": INTERACTION, "linear-noint": TRADITIONAL, "traditional": TRADITIONAL}


def bootstrap_effects(dataset: Dataset, method: str, z, z_star, c_bar=None, modifiers=None,
                      m_values=(), extra_terms=(), n_boot: int = 500, seed: int = 0) -> EffectSamples:
    """Nonparametric bootstrap of the closed-form effects.

    Resample ``b`` uses substream ``(seed, b)``, so results do not depend on
    evaluation order. ``c_bar`` defaults to the full-sample covariate means.
    """
    mode = METHOD_MODE.get(method)
    if mode is None:
        raise InputError(f"unknown linear method {method!r}")
    if c_bar is None:
        c_bar = dataset.c.mean(axis=0)
    keys = None
    rows = []
    for b in range(n_boot):
        idx = make_rng(seed, b).integers(0, dataset.n, dataset.n)
        try:
            fit = fit_linear_mediation(dataset.subset(idx), mode, extra_terms)
        except SingularDesignError:
            continue
        eff = method_effects(fit, method, z, z_star, c_bar, modifiers, m_values)
        keys = keys or list(eff)
        rows.append([eff[k] for k in keys])
    if len(rows) < 2:
        raise SingularDesignError("fewer than two bootstrap resamples produced a full-rank design")
    arr = np.array(rows)
    samples = EffectSamples(metadata={"n_boot": n_boot, "used": len(rows), "seed": seed})
    for i, (name, m) in enumerate(keys):
        if name == "cde":
            samples.cde[m] = arr[:, i]
        else:
            setattr(samples, name, arr[:, i])
    return samples
