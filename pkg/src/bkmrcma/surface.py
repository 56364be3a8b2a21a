"""Per-draw Gaussian-process predictions of the fitted surface.

For draw ``j`` with ``V = I + lam K``:

    mean = lam K_*n V^{-1} (y - C beta)
    cov  = sigma2 lam (K_** - lam K_*n V^{-1} K_n*)

``V^{-1}(y - C beta)`` is cached per draw on the :class:`PosteriorDraws`
object. Dict inserts are idempotent, so concurrent readers at worst compute
the same vector twice.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .errors import InputError
from .model import PosteriorDraws, cross_kernel, kernel_matrix, stable_cholesky
from .sampler import factor_v

MEAN = "conditional-mean"
DRAW = "conditional-draw"


@dataclass(frozen=True, eq=False)
class SurfaceQuery:
    points: np.ndarray
    c_bar: np.ndarray | None = None
    mode: str = MEAN

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[None, :]
        if pts.ndim != 2 or pts.shape[0] < 1:
            raise InputError("query needs at least one point")
        if not np.all(np.isfinite(pts)):
            raise InputError("query points must be finite")
        if self.mode not in (MEAN, DRAW):
            raise InputError(f"unknown query mode {self.mode!r}")
        object.__setattr__(self, "points", pts)
        if self.c_bar is not None:
            c = np.asarray(self.c_bar, dtype=float).ravel()
            if not np.all(np.isfinite(c)):
                raise InputError("c_bar must be finite")
            object.__setattr__(self, "c_bar", c)


def _factor(draws: PosteriorDraws, j: int):
    K = kernel_matrix(draws.kernel_design(), draws.kernel_state(j))
    return K, factor_v(K, float(draws.lam[j]))[0]


def _alpha(draws: PosteriorDraws, j: int) -> np.ndarray:
    alpha = draws._cache.get(j)
    if alpha is None:
        _, chol = _factor(draws, j)
        resid = draws.response_vector() - draws.covariates() @ draws.beta[j]
        alpha = sla.cho_solve((chol, True), resid, check_finite=False)
        draws._cache[j] = alpha
    return alpha


def _check(draws: PosteriorDraws, points: np.ndarray, j: int):
    if not 0 <= j < draws.J:
        raise InputError(f"draw index {j} outside 0..{draws.J - 1}")
    if points.shape[1] != draws.kernel_inputs.dim:
        raise InputError(f"query points have {points.shape[1]} columns, model has {draws.kernel_inputs.dim}")


def h_moments(draws: PosteriorDraws, points, j: int):
    """Conditional mean and covariance of h at ``points`` for draw ``j``."""
    points = SurfaceQuery(points).points
    _check(draws, points, j)
    state = draws.kernel_state(j)
    lam = float(draws.lam[j])
    X = draws.kernel_design()
    K, chol = _factor(draws, j)
    Kx = cross_kernel(points, X, state)
    mean = lam * Kx @ _alpha(draws, j)
    W = sla.solve_triangular(chol, Kx.T, lower=True, check_finite=False)
    cov = float(draws.sigma2[j]) * lam * (kernel_matrix(points, state) - lam * W.T @ W)
    return mean, 0.5 * (cov + cov.T)


def h_at(draws: PosteriorDraws, query: SurfaceQuery, j: int,
         rng: np.random.Generator | None = None) -> np.ndarray:
    """Surface values at the query points for draw ``j``."""
    _check(draws, query.points, j)
    lam = float(draws.lam[j])
    if query.mode == MEAN:
        if lam == 0.0:
            return np.zeros(query.points.shape[0])
        Kx = cross_kernel(query.points, draws.kernel_design(), draws.kernel_state(j))
        return lam * Kx @ _alpha(draws, j)
    if rng is None:
        raise InputError("conditional-draw mode needs an rng")
    mean, cov = h_moments(draws, query.points, j)
    if lam == 0.0:
        return mean
    L, _ = stable_cholesky(cov)
    return mean + L @ rng.standard_normal(mean.shape[0])


def predict_mean_response(draws: PosteriorDraws, query: SurfaceQuery, j: int,
                          rng: np.random.Generator | None = None) -> np.ndarray:
    """h at the query points plus the linear covariate term at ``c_bar``."""
    h = h_at(draws, query, j, rng)
    return h + float(draws.c_row(query.c_bar) @ draws.beta[j])
