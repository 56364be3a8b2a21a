"""Shared domain types and Gaussian-kernel algebra.

Kernel inputs are always laid out as ``[exposures..., mediator?, modifiers...]``.
That layout is recorded on every fit through :class:`KernelInputs`, so
prediction code can rebuild query points without guessing.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg.lapack import dpotrf as _potrf

from .errors import InputError, InvalidStateError, NumericalError, SchemaError

SINGLE = "single-smoothness"
WEIGHTS = "component-weights"
KERNEL_MODES = (SINGLE, WEIGHTS)

INTERCEPT = "(intercept)"

JITTER_LADDER = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Generator for ``seed`` on the substream identified by ``stream``.

    Distinct stream tuples give statistically independent generators, which is
    how chains, replicates and per-draw inner loops stay order-independent.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.PCG64(ss))


def derive_seed(seed: int, *key: int) -> int:
    """A 32-bit seed for the child identified by ``key``; stable across runs."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1)[0])


def _frozen(a, ndim: int, name: str) -> np.ndarray:
    arr = np.array(a, dtype=float, copy=True)
    if arr.ndim != ndim:
        raise InputError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InputError(f"{name} contains non-finite values")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Dataset:
    """Observed sample: outcome, exposures, optional mediator, covariates.

    ``x`` holds continuous effect modifiers (for example child age) that may be
    placed in a kernel next to the exposures. Covariates ``c`` only ever enter
    linearly.
    """

    y: np.ndarray
    z: np.ndarray
    m: np.ndarray | None = None
    c: np.ndarray | None = None
    z_names: tuple[str, ...] = ()
    c_names: tuple[str, ...] = ()
    m_name: str = "m"
    y_name: str = "y"
    x: np.ndarray | None = None
    x_names: tuple[str, ...] = ()

    def __post_init__(self):
        y = _frozen(self.y, 1, "y")
        n = y.shape[0]
        z = np.asarray(self.z, dtype=float)
        if z.ndim == 1:
            z = z[:, None]
        z = _frozen(z, 2, "z")
        if n < 2:
            raise InputError("need at least 2 observations")
        if z.shape[0] != n or z.shape[1] < 1:
            raise InputError(f"z must have shape ({n}, L>=1), got {z.shape}")
        m = None if self.m is None else _frozen(self.m, 1, "m")
        if m is not None and m.shape[0] != n:
            raise InputError(f"m has length {m.shape[0]}, expected {n}")
        c = np.zeros((n, 0)) if self.c is None else np.asarray(self.c, dtype=float)
        if c.ndim == 1:
            c = c[:, None]
        c = _frozen(c, 2, "c")
        if c.shape[0] != n:
            raise InputError(f"c has {c.shape[0]} rows, expected {n}")
        x = np.zeros((n, 0)) if self.x is None else np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        x = _frozen(x, 2, "x")
        if x.shape[0] != n:
            raise InputError(f"x has {x.shape[0]} rows, expected {n}")

        z_names = tuple(self.z_names) or tuple(f"z{i + 1}" for i in range(z.shape[1]))
        c_names = tuple(self.c_names) or tuple(f"c{i + 1}" for i in range(c.shape[1]))
        x_names = tuple(self.x_names) or tuple(f"x{i + 1}" for i in range(x.shape[1]))
        for names, arr, label in ((z_names, z, "z"), (c_names, c, "c"), (x_names, x, "x")):
            if len(names) != arr.shape[1]:
                raise InputError(f"{label}_names has {len(names)} entries for {arr.shape[1]} columns")
        all_names = list(z_names) + list(c_names) + list(x_names)
        if len(set(all_names)) != len(all_names):
            raise SchemaError(f"duplicate column names: {all_names}")

        for name, val in (("y", y), ("z", z), ("m", m), ("c", c), ("x", x),
                          ("z_names", z_names), ("c_names", c_names), ("x_names", x_names)):
            object.__setattr__(self, name, val)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def L(self) -> int:
        return self.z.shape[1]

    @property
    def P(self) -> int:
        return self.c.shape[1]

    def column(self, name: str) -> np.ndarray:
        """Any single named column, regardless of role."""
        if name in self.z_names:
            return self.z[:, self.z_names.index(name)]
        if name in self.c_names:
            return self.c[:, self.c_names.index(name)]
        if name in self.x_names:
            return self.x[:, self.x_names.index(name)]
        if self.m is not None and name == self.m_name:
            return self.m
        if name == self.y_name:
            return self.y
        raise SchemaError(f"unknown column {name!r}")

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        return Dataset(
            y=self.y[rows], z=self.z[rows],
            m=None if self.m is None else self.m[rows],
            c=self.c[rows], z_names=self.z_names, c_names=self.c_names,
            m_name=self.m_name, y_name=self.y_name,
            x=self.x[rows], x_names=self.x_names,
        )


@dataclass(frozen=True)
class KernelInputs:
    """Which dataset columns enter the kernel, in layout order."""

    exposures: tuple[str, ...]
    mediator: bool = False
    modifiers: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "exposures", tuple(self.exposures))
        object.__setattr__(self, "modifiers", tuple(self.modifiers))
        if not self.exposures and not self.mediator and not self.modifiers:
            raise SchemaError("kernel inputs must not be empty")

    @classmethod
    def for_dataset(cls, ds: Dataset, mediator: bool = False,
                    modifiers: Sequence[str] = ()) -> "KernelInputs":
        return cls(exposures=ds.z_names, mediator=mediator, modifiers=tuple(modifiers))

    @property
    def names(self) -> list[str]:
        return list(self.exposures) + (["<mediator>"] if self.mediator else []) + list(self.modifiers)

    @property
    def dim(self) -> int:
        return len(self.exposures) + int(self.mediator) + len(self.modifiers)

    def design(self, ds: Dataset) -> np.ndarray:
        cols = []
        for name in self.exposures:
            if name not in ds.z_names:
                raise SchemaError(f"exposure {name!r} not in dataset")
            cols.append(ds.z[:, ds.z_names.index(name)])
        if self.mediator:
            if ds.m is None:
                raise SchemaError("kernel requires a mediator but the dataset has none")
            cols.append(ds.m)
        for name in self.modifiers:
            if name not in ds.x_names:
                raise SchemaError(f"modifier {name!r} not in dataset")
            cols.append(ds.x[:, ds.x_names.index(name)])
        return np.column_stack(cols)

    def points(self, z, m_values=None, modifiers=None) -> np.ndarray:
        """Query rows sharing one exposure profile, one row per mediator value."""
        if not self.mediator:
            return self.point(z, modifiers=modifiers)[None, :]
        m_values = np.atleast_1d(np.asarray(m_values, dtype=float))
        base = self.point(z, m=0.0, modifiers=modifiers)
        out = np.repeat(base[None, :], m_values.shape[0], axis=0)
        out[:, len(self.exposures)] = m_values
        return out

    def point(self, z: np.ndarray, m: float | None = None,
              modifiers: np.ndarray | None = None) -> np.ndarray:
        """Single query row from exposure values (already in exposure order)."""
        z = np.asarray(z, dtype=float).ravel()
        if z.shape[0] != len(self.exposures):
            raise InputError(f"exposure profile has length {z.shape[0]}, expected {len(self.exposures)}")
        parts = [z]
        if self.mediator:
            if m is None:
                raise SchemaError("mediator value required for this kernel")
            parts.append([float(m)])
        mods = np.zeros(0) if modifiers is None else np.asarray(modifiers, dtype=float).ravel()
        if mods.shape[0] != len(self.modifiers):
            raise SchemaError(f"expected {len(self.modifiers)} modifier values, got {mods.shape[0]}")
        parts.append(mods)
        return np.concatenate(parts)


@dataclass(frozen=True, eq=False)
class KernelState:
    mode: str
    rho: float = 1.0
    r: np.ndarray | None = None
    delta: np.ndarray | None = None

    def __post_init__(self):
        if self.mode not in KERNEL_MODES:
            raise InvalidStateError(f"unknown kernel mode {self.mode!r}")
        if self.mode == SINGLE:
            if not (np.isfinite(self.rho) and self.rho > 0):
                raise InvalidStateError(f"rho must be positive, got {self.rho}")
            return
        if self.r is None:
            raise InvalidStateError("component-weights mode needs r")
        r = np.array(self.r, dtype=float).ravel()
        if np.any(~np.isfinite(r)) or np.any(r < 0):
            raise InvalidStateError(f"r must be finite and nonnegative, got {r}")
        delta = (r > 0) if self.delta is None else np.array(self.delta, dtype=bool).ravel()
        if delta.shape != r.shape:
            raise InvalidStateError("delta and r lengths differ")
        if np.any((r == 0) != ~delta):
            raise InvalidStateError("r_l must be 0 exactly when delta_l is 0")
        r.setflags(write=False)
        delta.setflags(write=False)
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "delta", delta)

    @classmethod
    def single(cls, rho: float) -> "KernelState":
        return cls(mode=SINGLE, rho=float(rho))

    @classmethod
    def weights(cls, r, delta=None) -> "KernelState":
        return cls(mode=WEIGHTS, r=r, delta=delta)

    def weight_vector(self, dim: int) -> np.ndarray:
        if self.mode == SINGLE:
            return np.full(dim, 1.0 / self.rho)
        if self.r.shape[0] != dim:
            raise InputError(f"kernel state has dimension {self.r.shape[0]}, inputs have {dim}")
        return self.r


@dataclass(frozen=True)
class PriorConfig:
    a_sigma: float = 0.001
    b_sigma: float = 0.001
    mu_lambda: float = 10.0
    var_lambda: float = 100.0
    rho_bounds: tuple[float, float] = (0.0, 100.0)
    pi_inclusion: float = 0.5
    slab_shape: float = 1.0
    slab_rate: float = 0.1

    def __post_init__(self):
        for name in ("a_sigma", "b_sigma", "mu_lambda", "var_lambda", "slab_shape", "slab_rate"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise InputError(f"{name} must be strictly positive, got {v}")
        if not 0 < self.pi_inclusion < 1:
            raise InputError("pi_inclusion must lie in (0, 1)")
        lo, hi = self.rho_bounds
        if not (0 <= lo < hi):
            raise InputError(f"bad rho_bounds {self.rho_bounds}")

    # lambda ~ Gamma(shape, rate) with the stated mean and variance
    @property
    def lambda_shape(self) -> float:
        return self.mu_lambda ** 2 / self.var_lambda

    @property
    def lambda_rate(self) -> float:
        return self.mu_lambda / self.var_lambda


@dataclass(eq=False)
class PosteriorDraws:
    """Retained MCMC trace of one fitted kernel machine regression.

    Arrays are indexed by retained draw ``j``. ``covariate_names`` includes the
    intercept column when the model was fitted with one; ``covariates()``
    rebuilds the matching design matrix.
    """

    dataset: Dataset
    kernel_inputs: KernelInputs
    response: str
    mode: str
    intercept: bool
    beta: np.ndarray
    sigma2: np.ndarray
    lam: np.ndarray
    rho: np.ndarray
    r: np.ndarray
    delta: np.ndarray
    acceptance: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        J = self.sigma2.shape[0]
        if J < 1:
            raise InvalidStateError("a fit needs at least one retained draw")
        if np.any(self.sigma2 <= 0) or np.any(self.lam < 0):
            raise InvalidStateError("sigma2 must be positive and lambda nonnegative")
        if self.response not in ("y", "m"):
            raise SchemaError(f"response must be 'y' or 'm', got {self.response!r}")
        for a in (self.beta, self.sigma2, self.lam, self.rho, self.r, self.delta):
            a.setflags(write=False)

    @property
    def J(self) -> int:
        return self.sigma2.shape[0]

    @property
    def covariate_names(self) -> list[str]:
        return ([INTERCEPT] if self.intercept else []) + list(self.dataset.c_names)

    def covariates(self) -> np.ndarray:
        c = self.dataset.c
        if self.intercept:
            c = np.column_stack([np.ones(self.dataset.n), c])
        return c

    def response_vector(self) -> np.ndarray:
        if self.response == "m":
            if self.dataset.m is None:
                raise SchemaError("mediator response requested but dataset has no mediator")
            return self.dataset.m
        return self.dataset.y

    def kernel_design(self) -> np.ndarray:
        X = self._cache.get("design")
        if X is None:
            X = self.kernel_inputs.design(self.dataset)
            X.setflags(write=False)
            self._cache["design"] = X
        return X

    def kernel_state(self, j: int) -> KernelState:
        if self.mode == SINGLE:
            return KernelState.single(self.rho[j])
        return KernelState.weights(self.r[j], self.delta[j])

    def c_row(self, c_bar=None) -> np.ndarray:
        """Covariate fixing row, including the intercept when present.

        ``c_bar`` is given for the dataset's own covariates only; the default
        is the column means (proportions for indicator columns).
        """
        if c_bar is None:
            c_bar = self.dataset.c.mean(axis=0)
        c_bar = np.asarray(c_bar, dtype=float).ravel()
        if c_bar.shape[0] != self.dataset.P:
            raise InputError(f"c_bar has length {c_bar.shape[0]}, model has {self.dataset.P} covariates")
        return np.concatenate([[1.0], c_bar]) if self.intercept else c_bar

    @property
    def pip(self) -> np.ndarray:
        """Posterior inclusion probability of each kernel input."""
        return self.delta.mean(axis=0)

    def truncate(self, J: int) -> "PosteriorDraws":
        return PosteriorDraws(
            dataset=self.dataset, kernel_inputs=self.kernel_inputs, response=self.response,
            mode=self.mode, intercept=self.intercept, beta=self.beta[:J], sigma2=self.sigma2[:J],
            lam=self.lam[:J], rho=self.rho[:J], r=self.r[:J], delta=self.delta[:J],
            acceptance=dict(self.acceptance), diagnostics=dict(self.diagnostics),
        )


def _check_state_dims(x: np.ndarray, state: KernelState) -> np.ndarray:
    if not isinstance(state, KernelState):
        raise InvalidStateError("state must be a KernelState")
    return state.weight_vector(x.shape[-1])


def gaussian_kernel(zi, zj, state: KernelState) -> float:
    """exp(-sum_l w_l (zi_l - zj_l)^2) with w = r, or w = 1/rho in single mode."""
    zi = np.asarray(zi, dtype=float).ravel()
    zj = np.asarray(zj, dtype=float).ravel()
    if zi.shape != zj.shape:
        raise InputError(f"points have different lengths {zi.shape[0]} and {zj.shape[0]}")
    if not (np.all(np.isfinite(zi)) and np.all(np.isfinite(zj))):
        raise InputError("non-finite kernel input")
    w = _check_state_dims(zi, state)
    return float(np.exp(-np.dot(w, (zi - zj) ** 2)))


def _as_matrix(x, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise InputError(f"{name} must be a matrix")
    if not np.all(np.isfinite(x)):
        raise InputError(f"{name} contains non-finite values")
    return x


def sq_diff_stack(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-component squared differences, shape (L', len(a), len(b))."""
    return np.stack([(a[:, l, None] - b[None, :, l]) ** 2 for l in range(a.shape[1])])


def kernel_from_stack(w: np.ndarray, stack: np.ndarray) -> np.ndarray:
    return np.exp(-np.tensordot(w, stack, axes=1))


def kernel_matrix(x, state: KernelState) -> np.ndarray:
    x = _as_matrix(x, "x")
    if x.shape[0] < 1:
        raise InputError("kernel_matrix needs at least one row")
    w = _check_state_dims(x, state)
    K = kernel_from_stack(w, sq_diff_stack(x, x))
    # the difference stack is exactly symmetric, so K is too
    np.fill_diagonal(K, 1.0)
    return K


def cross_kernel(x_new, x_obs, state: KernelState) -> np.ndarray:
    x_new = _as_matrix(x_new, "x_new")
    x_obs = _as_matrix(x_obs, "x_obs")
    if x_new.shape[1] != x_obs.shape[1]:
        raise InputError(f"column counts differ: {x_new.shape[1]} vs {x_obs.shape[1]}")
    w = _check_state_dims(x_obs, state)
    return kernel_from_stack(w, sq_diff_stack(x_new, x_obs))


def stable_cholesky(a: np.ndarray) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor, escalating a diagonal jitter on failure.

    Returns ``(L, jitter_used)``. Raises :class:`NumericalError` once the
    ladder (up to 1e-6) is exhausted.
    """
    n = a.shape[0]
    for jitter in JITTER_LADDER:
        trial = a
        if jitter:
            trial = a.copy()
            trial.flat[:: n + 1] += jitter
        chol, info = _potrf(trial, lower=1, clean=1)
        if info == 0:
            return chol, jitter
    raise NumericalError(f"Cholesky failed for a {a.shape[0]}x{a.shape[0]} matrix after jitter {JITTER_LADDER[-1]:g}")
