"""Counterfactual simulation of natural and controlled effects from fitted draws.

Three separately fitted models are combined draw by draw:

* mediator model   M ~ h_M(z, modifiers) + c'beta
* outcome model    Y ~ h_Y(z, M, modifiers) + c'theta
* total model      Y ~ g(z, modifiers) + c'gamma

For each draw the mediator is simulated under ``z_star``, pushed through the
outcome surface at ``z`` and averaged over the inner samples; the two pure
arms come from the total model.
"""

from __future__ import annotations

import warnings
from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, SchemaError
from .model import PosteriorDraws, make_rng
from .surface import DRAW, MEAN, SurfaceQuery, h_at, predict_mean_response

EFFECTS = ("te", "nde", "nie")

IDENTIFIABILITY_NOTE = (
    "Causal reading of NDE/NIE requires no unmeasured exposure-outcome, mediator-outcome "
    "or exposure-mediator confounding, and no mediator-outcome confounder affected by exposure. "
    "CDE(m) needs only the first two. None of these can be checked from data."
)


@dataclass(frozen=True, eq=False)
class ContrastSpec:
    """Counterfactual question: move exposures from ``z_star`` to ``z``.

    ``modifiers`` fixes the kernel modifiers either as a mapping from name to
    value, which lets the three models carry different modifier sets, or as an
    array in the models' own modifier order.
    """

    z: np.ndarray
    z_star: np.ndarray
    c_bar: np.ndarray | None = None
    modifiers: Mapping | np.ndarray | None = None
    k_inner: int = 100
    m_values: tuple[float, ...] = ()

    def __post_init__(self):
        z = np.asarray(self.z, dtype=float).ravel()
        zs = np.asarray(self.z_star, dtype=float).ravel()
        if z.shape != zs.shape:
            raise InputError("z and z_star must have the same length")
        if not (np.all(np.isfinite(z)) and np.all(np.isfinite(zs))):
            raise InputError("exposure profiles must be finite")
        if int(self.k_inner) < 1:
            raise InputError("k_inner must be >= 1")
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "z_star", zs)
        object.__setattr__(self, "k_inner", int(self.k_inner))
        object.__setattr__(self, "m_values", tuple(float(m) for m in self.m_values))
        if self.c_bar is not None:
            object.__setattr__(self, "c_bar", np.asarray(self.c_bar, dtype=float).ravel())
        if isinstance(self.modifiers, Mapping):
            mods = {str(k): float(v) for k, v in self.modifiers.items()}
            if not all(np.isfinite(v) for v in mods.values()):
                raise InputError("modifier values must be finite")
            object.__setattr__(self, "modifiers", mods)
        elif self.modifiers is not None:
            object.__setattr__(self, "modifiers", np.asarray(self.modifiers, dtype=float).ravel())

    def modifier_values(self, names) -> np.ndarray:
        names = tuple(names)
        if isinstance(self.modifiers, dict):
            missing = [n for n in names if n not in self.modifiers]
            if missing:
                raise SchemaError(f"contrast does not fix kernel modifiers {missing}")
            return np.array([self.modifiers[n] for n in names], dtype=float)
        have = 0 if self.modifiers is None else self.modifiers.shape[0]
        if have != len(names):
            raise SchemaError(f"model has {len(names)} kernel modifiers but the contrast fixes {have}")
        return np.zeros(0) if self.modifiers is None else self.modifiers

    def swapped(self) -> "ContrastSpec":
        return ContrastSpec(z=self.z_star, z_star=self.z, c_bar=self.c_bar, modifiers=self.modifiers,
                            k_inner=self.k_inner, m_values=self.m_values)


@dataclass
class EffectSamples:
    """Per-draw effect samples; ``cde`` is keyed by the mediator fixing value."""

    nde: np.ndarray | None = None
    nie: np.ndarray | None = None
    te: np.ndarray | None = None
    cde: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def items(self):
        """(effect, m_value, samples) triples in a stable order."""
        for name in EFFECTS:
            s = getattr(self, name)
            if s is not None:
                yield name, None, s
        for m in sorted(self.cde):
            yield "cde", m, self.cde[m]

    def summary(self) -> list[dict]:
        rows = []
        for name, m, s in self.items():
            rows.append({"effect": name, "m_value": m, **summarize_effects(s)})
        return rows


def summarize_effects(samples) -> dict:
    """Mean, median and 2.5/97.5 percentiles (linear interpolation)."""
    s = np.asarray(samples, dtype=float).ravel()
    if s.shape[0] < 2:
        raise InputError("need at least 2 samples to summarize")
    lo, med, hi = np.quantile(s, [0.025, 0.5, 0.975])
    return {"mean": float(np.mean(s)), "median": float(med), "lower": float(lo), "upper": float(hi)}


def _modifiers(draws: PosteriorDraws, spec: ContrastSpec) -> np.ndarray:
    return spec.modifier_values(draws.kernel_inputs.modifiers)


def _check_schemas(med: PosteriorDraws, out: PosteriorDraws, te: PosteriorDraws | None, spec: ContrastSpec):
    if med.response != "m" or med.kernel_inputs.mediator:
        raise SchemaError("mediator model must have the mediator as response and not in its kernel")
    if out.response != "y" or not out.kernel_inputs.mediator:
        raise SchemaError("outcome model must include the mediator among its kernel inputs")
    models = [("mediator", med), ("outcome", out)]
    if te is not None:
        if te.response != "y" or te.kernel_inputs.mediator:
            raise SchemaError("total-effect model must not include the mediator in its kernel")
        models.append(("total", te))
    ref = med.kernel_inputs
    for label, d in models:
        if d.kernel_inputs.exposures != ref.exposures:
            raise SchemaError(f"{label} model exposures {d.kernel_inputs.exposures} differ from {ref.exposures}")
        if spec.z.shape[0] != len(d.kernel_inputs.exposures):
            raise SchemaError(f"contrast has {spec.z.shape[0]} exposures, {label} model has "
                              f"{len(d.kernel_inputs.exposures)}")
        _modifiers(d, spec)


def _common_J(*models: PosteriorDraws) -> int:
    Js = [d.J for d in models if d is not None]
    J = min(Js)
    if len(set(Js)) > 1:
        warnings.warn(f"retained draw counts differ {Js}; truncating to {J}", RuntimeWarning, stacklevel=3)
    return J


def _mediator_samples(med, spec, j, rng, noise, mode, zprof):
    ki = med.kernel_inputs
    q = SurfaceQuery(ki.point(zprof, modifiers=_modifiers(med, spec)), spec.c_bar, mode)
    mean = predict_mean_response(med, q, j, rng)[0]
    if not noise:
        return np.full(spec.k_inner, mean)
    return mean + np.sqrt(med.sigma2[j]) * rng.standard_normal(spec.k_inner)


def _outcome_mean(out, spec, j, z, m_values, rng, mode):
    ki = out.kernel_inputs
    pts = ki.points(z, m_values, _modifiers(out, spec))
    return predict_mean_response(out, SurfaceQuery(pts, spec.c_bar, mode), j, rng)


def estimate_mediation(med_draws: PosteriorDraws, out_draws: PosteriorDraws,
                       te_draws: PosteriorDraws | None, spec: ContrastSpec, seed: int = 0,
                       mediator_noise: bool = True, surface_mode: str = MEAN,
                       te_path: str = "total-model") -> EffectSamples:
    """Posterior samples of TE, NDE and NIE (plus CDEs when ``spec.m_values`` is set).

    ``te_path="mediator-outcome"`` replaces the total-effect model by
    simulating ``Y_{z M_z}`` and ``Y_{z* M_z*}`` from the mediator and outcome
    models; it exists for sensitivity checks. ``mediator_noise=False``
    disables the inner mediator noise.
    """
    if te_path not in ("total-model", "mediator-outcome"):
        raise InputError(f"unknown te_path {te_path!r}")
    if te_path == "total-model" and te_draws is None:
        raise InputError("te_draws required unless te_path='mediator-outcome'")
    te_model = te_draws if te_path == "total-model" else None
    _check_schemas(med_draws, out_draws, te_model, spec)
    J = _common_J(med_draws, out_draws, te_model)

    y_zmzs = np.empty(J)
    y_z = np.empty(J)
    y_zs = np.empty(J)
    for j in range(J):
        rng = make_rng(seed, j)
        m_zs = _mediator_samples(med_draws, spec, j, rng, mediator_noise, surface_mode, spec.z_star)
        y_zmzs[j] = _outcome_mean(out_draws, spec, j, spec.z, m_zs, rng, surface_mode).mean()
        if te_model is not None:
            ki = te_model.kernel_inputs
            mods = _modifiers(te_model, spec)
            pts = np.vstack([ki.point(spec.z, modifiers=mods), ki.point(spec.z_star, modifiers=mods)])
            y_z[j], y_zs[j] = predict_mean_response(te_model, SurfaceQuery(pts, spec.c_bar, surface_mode), j, rng)
        else:
            m_z = _mediator_samples(med_draws, spec, j, rng, mediator_noise, surface_mode, spec.z)
            y_z[j] = _outcome_mean(out_draws, spec, j, spec.z, m_z, rng, surface_mode).mean()
            y_zs[j] = _outcome_mean(out_draws, spec, j, spec.z_star, m_zs, rng, surface_mode).mean()

    samples = EffectSamples(
        nde=y_zmzs - y_zs, nie=y_z - y_zmzs, te=y_z - y_zs,
        metadata={"draws": J, "k_inner": spec.k_inner, "seed": seed, "te_path": te_path,
                  "surface_mode": surface_mode, "assumptions": IDENTIFIABILITY_NOTE},
    )
    if spec.m_values:
        samples.cde = estimate_cde(out_draws, spec, seed, surface_mode, J=J).cde
    return samples


def estimate_cde(out_draws: PosteriorDraws, spec: ContrastSpec, seed: int = 0,
                 surface_mode: str = MEAN, J: int | None = None) -> EffectSamples:
    """Controlled direct effects Y(z, m) - Y(z*, m) for each m in ``spec.m_values``."""
    if not out_draws.kernel_inputs.mediator:
        raise SchemaError("CDE needs an outcome model with the mediator in its kernel")
    if not spec.m_values:
        raise InputError("m_values must not be empty")
    if spec.z.shape[0] != len(out_draws.kernel_inputs.exposures):
        raise SchemaError("contrast and outcome model disagree on the number of exposures")
    _modifiers(out_draws, spec)
    J = out_draws.J if J is None else J
    m_vals = np.asarray(spec.m_values)
    cde = np.empty((J, m_vals.shape[0]))
    for j in range(J):
        # separate substream from the mediation loop, only used in draw mode
        rng = make_rng(seed, j, 1) if surface_mode == DRAW else None
        y1 = _outcome_mean(out_draws, spec, j, spec.z, m_vals, rng, surface_mode)
        y0 = _outcome_mean(out_draws, spec, j, spec.z_star, m_vals, rng, surface_mode)
        cde[j] = y1 - y0
    return EffectSamples(cde={float(m): cde[:, i].copy() for i, m in enumerate(m_vals)},
                         metadata={"draws": J, "seed": seed, "assumptions": IDENTIFIABILITY_NOTE})
