"""Command-line entry point: ``bkmrcma {fit,mediate,cde,simulate,report}``.

Options can come from a YAML file (``--config``); flags given on the command
line win. Every run writes ``manifest.json`` next to its outputs with the
resolved configuration, seed, thread count and package versions, which is
enough to repeat it. Exit status is 0 only when every output was written;
errors map to the ``exit_code`` of the raised exception.
"""

from __future__ import annotations

import argparse
import logging
import platform
import sys
import warnings
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .dataio import (ColumnRoles, TransformRecord, ensure_dir, file_sha256, load_dataset, read_rows,
                     save_draws, write_json, write_rows)
from .errors import BkmrError, DataIOError, InputError, SchemaError
from .mediation import ContrastSpec, estimate_cde, estimate_mediation, summarize_effects
from .model import Dataset, KernelInputs, PriorConfig, derive_seed
from .parametric import METHOD_MODE, bootstrap_effects, fit_linear_mediation, method_effects
from .sampler import McmcConfig, fit_bkmr, write_trace_csv

log = logging.getLogger("bkmrcma")

EXIT_USAGE = 2
BKMR = ("bkmr-cma", "bkmr-cma-vs")
LINEAR = tuple(METHOD_MODE)
RESULT_COLUMNS = ["scenario", "L", "method", "effect", "m_value", "statistic", "value"]
EFFECT_COLUMNS = ["method", "effect", "m_value", "estimate", "mean", "median", "lower", "upper", "scale"]

# option name -> built-in default, applied after the config file
DEFAULTS = {
    "seed": 0, "threads": 1, "out_dir": "bkmrcma-out",
    "data": None, "outcome": None, "exposures": None, "mediator": None, "covariates": [],
    "modifiers": [], "mediator_modifiers": [],
    "log": [], "center": [], "scale": [],
    "response": "y", "mediator_in_kernel": False,
    "variable_selection": False, "iterations": None, "burn_in": None, "thin": 1,
    "mcmc": {}, "priors": {},
    "methods": ["bkmr-cma", "bkmr-cma-vs", "linear", "traditional"],
    "contrast_quantiles": [25, 75], "z": None, "z_star": None, "contrast_scale": "raw",
    "fix": {}, "m_quantiles": [25, 50, 75], "m_values": None,
    "k_inner": 100, "n_boot": 500, "extra_terms": [], "effect_scale": "model",
    "scenarios": [1], "L": 3, "scale_preset": "desk", "replicates": None, "n": None,
    "n_truth": None, "study_seed": None, "snr": 0.5, "contrast": "population",
    "outcome_surface": None,
    "results": [],
}


# ---------------------------------------------------------------------------
# parsing helpers


def _list(text):
    if text is None:
        return None
    if isinstance(text, (list, tuple)):
        return list(text)
    return [t.strip() for t in str(text).split(",") if t.strip()]


def _floats(value, what: str):
    if value is None:
        return None
    try:
        return [float(v) for v in _list(value)]
    except ValueError:
        raise InputError(f"{what} must be a comma-separated list of numbers") from None


def _pairs(items, what: str) -> dict:
    if items is None:
        return {}
    if isinstance(items, dict):
        return {str(k): float(v) for k, v in items.items()}
    out = {}
    for item in items:
        name, sep, val = str(item).partition("=")
        if not sep:
            raise InputError(f"{what} entries look like name=value, got {item!r}")
        try:
            out[name.strip()] = float(val)
        except ValueError:
            raise InputError(f"{what} value for {name!r} is not a number") from None
    return out


def _load_config(path) -> dict:
    if path is None:
        return {}
    import yaml

    try:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise DataIOError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    except yaml.YAMLError as exc:
        raise InputError(f"config {path} is not valid YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise InputError(f"config {path} must be a mapping of option names to values")
    data = {str(k).replace("-", "_"): v for k, v in data.items()}
    unknown = sorted(set(data) - set(DEFAULTS))
    if unknown:
        raise InputError(f"unknown config keys: {unknown}")
    return data


def resolve(args: argparse.Namespace) -> dict:
    """Merge built-in defaults, config file and explicit flags (in that order)."""
    cfg = dict(DEFAULTS)
    cfg.update(_load_config(getattr(args, "config", None)))
    for key, val in vars(args).items():
        if key in DEFAULTS and val is not None:
            cfg[key] = val
    for key in ("exposures", "covariates", "modifiers", "mediator_modifiers", "log", "center",
                "scale", "methods", "extra_terms", "results"):
        cfg[key] = _list(cfg[key]) if cfg[key] is not None else None
    cfg["scenarios"] = [int(s) for s in _list(cfg["scenarios"])]
    cfg["seed"] = int(cfg["seed"])
    cfg["threads"] = int(cfg["threads"])
    if cfg["threads"] < 1:
        raise InputError("--threads must be >= 1")
    return cfg


def _roles(cfg, need_mediator: bool) -> ColumnRoles:
    for key in ("data", "outcome", "exposures"):
        if not cfg.get(key):
            raise InputError(f"missing required option {key!r}")
    if need_mediator and not cfg.get("mediator"):
        raise InputError("missing required option 'mediator'")
    extra = [m for m in cfg["mediator_modifiers"] if m not in cfg["modifiers"]]
    if extra:
        raise SchemaError(f"mediator_modifiers {extra} must also be listed under modifiers")
    return ColumnRoles(outcome=cfg["outcome"], exposures=tuple(cfg["exposures"]),
                       mediator=cfg.get("mediator") or None, covariates=tuple(cfg["covariates"]),
                       modifiers=tuple(cfg["modifiers"]))


def _transform(cfg) -> dict:
    return {step: cfg[step] for step in ("log", "center", "scale") if cfg[step]}


def _mcmc(cfg, vs: bool, seed: int) -> McmcConfig:
    extra = dict(cfg.get("mcmc") or {})
    names = {f.name for f in fields(McmcConfig)}
    bad = sorted(set(extra) - names)
    if bad:
        raise InputError(f"unknown mcmc settings {bad}")
    base = dict(iterations=10000 if cfg["iterations"] is None else int(cfg["iterations"]), burn_in=None if cfg["burn_in"] is None else int(cfg["burn_in"]),
                thin=int(cfg["thin"]))
    base.update(extra)
    base.update(variable_selection=vs, seed=seed)
    return McmcConfig(**base)


def _priors(cfg) -> PriorConfig:
    extra = dict(cfg.get("priors") or {})
    names = {f.name for f in fields(PriorConfig)}
    bad = sorted(set(extra) - names)
    if bad:
        raise InputError(f"unknown prior settings {bad}")
    if "rho_bounds" in extra:
        extra["rho_bounds"] = tuple(extra["rho_bounds"])
    return PriorConfig(**extra)


def _echo(cfg) -> dict:
    """Configuration as recorded in the manifest (output location excluded)."""
    return {k: v for k, v in sorted(cfg.items()) if k not in ("out_dir",)}


def _manifest(out: Path, command: str, cfg: dict, outputs: list[Path], extra: dict | None = None):
    man = {
        "command": command,
        "config": _echo(cfg),
        "seed": cfg["seed"],
        "threads": cfg["threads"],
        "versions": {"bkmrcma": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": _scipy_version()},
        "outputs": {p.name: file_sha256(p) for p in outputs},
    }
    if cfg.get("data"):
        man["input_sha256"] = file_sha256(cfg["data"]) if Path(cfg["data"]).exists() else None
    man.update(extra or {})
    return write_json(out / "manifest.json", man)


def _scipy_version() -> str:
    import scipy

    return scipy.__version__


# ---------------------------------------------------------------------------
# contrasts


def _contrast_profiles(cfg, ds: Dataset, rec: TransformRecord):
    """(z, z_star) on the model scale, plus a description for the manifest."""
    if cfg["z"] is not None or cfg["z_star"] is not None:
        if cfg["z"] is None or cfg["z_star"] is None:
            raise InputError("give both z and z_star, or neither")
        z = _floats(cfg["z"], "z")
        zs = _floats(cfg["z_star"], "z_star")
        names = list(ds.z_names)
        if cfg["contrast_scale"] == "raw":
            zm, zsm = rec.to_model(names, z), rec.to_model(names, zs)
        elif cfg["contrast_scale"] == "model":
            zm, zsm = np.asarray(z), np.asarray(zs)
            if zm.shape[0] != len(names) or zsm.shape[0] != len(names):
                raise InputError(f"contrast profiles need {len(names)} values")
        else:
            raise InputError("contrast_scale must be 'raw' or 'model'")
        desc = {"type": "values", "scale": cfg["contrast_scale"], "z_input": z, "z_star_input": zs}
    else:
        q = _floats(cfg["contrast_quantiles"], "contrast_quantiles")
        if len(q) != 2 or not all(0 <= v <= 100 for v in q):
            raise InputError("contrast_quantiles needs two percentiles in [0, 100]")
        zsm = np.quantile(ds.z, q[0] / 100.0, axis=0)
        zm = np.quantile(ds.z, q[1] / 100.0, axis=0)
        desc = {"type": "quantiles", "from": q[0], "to": q[1]}
    desc.update(z_model=np.asarray(zm).tolist(), z_star_model=np.asarray(zsm).tolist(),
                z_raw=rec.to_raw(ds.z_names, zm).tolist(), z_star_raw=rec.to_raw(ds.z_names, zsm).tolist())
    return np.asarray(zm, dtype=float), np.asarray(zsm, dtype=float), desc


def _modifier_values(cfg, ds: Dataset, rec: TransformRecord) -> dict:
    """Kernel modifier fixing values on the model scale; default is the median."""
    given = _pairs(cfg["fix"], "fix")
    unknown = sorted(set(given) - set(ds.x_names))
    if unknown:
        raise SchemaError(f"fix refers to columns that are not modifiers: {unknown}")
    out = {}
    for i, name in enumerate(ds.x_names):
        if name in given:
            out[name] = float(rec.get(name).forward(given[name]))
        else:
            out[name] = float(np.median(ds.x[:, i]))
    return out


def _m_values(cfg, ds: Dataset, rec: TransformRecord) -> list[float]:
    if cfg["m_values"] is not None:
        raw = _floats(cfg["m_values"], "m_values")
        return [float(rec.get(ds.m_name).forward(v)) for v in raw]
    q = _floats(cfg["m_quantiles"], "m_quantiles") or []
    return [float(v) for v in np.quantile(ds.m, np.asarray(q) / 100.0)] if q else []


def _methods(cfg, allowed) -> list[str]:
    methods = cfg["methods"] or []
    bad = [m for m in methods if m not in allowed]
    if bad:
        raise InputError(f"unknown methods {bad}; choose from {list(allowed)}")
    if not methods:
        raise InputError("no methods requested")
    return methods


# ---------------------------------------------------------------------------
# subcommands


def cmd_fit(cfg) -> list[Path]:
    roles = _roles(cfg, need_mediator=cfg["response"] == "m" or cfg["mediator_in_kernel"])
    ds, rec = load_dataset(cfg["data"], roles, _transform(cfg))
    if cfg["response"] not in ("y", "m"):
        raise InputError("response must be 'y' or 'm'")
    mods = cfg["mediator_modifiers"] if cfg["response"] == "m" else cfg["modifiers"]
    ki = KernelInputs.for_dataset(ds, mediator=bool(cfg["mediator_in_kernel"]), modifiers=mods)
    mcmc = _mcmc(cfg, bool(cfg["variable_selection"]), cfg["seed"])
    with warnings.catch_warnings(record=True):
        warnings.simplefilter("always")
        draws = fit_bkmr(ds, ki, _priors(cfg), mcmc, response=cfg["response"])
    out = ensure_dir(cfg["out_dir"])
    trace = out / "trace.csv"
    write_trace_csv(draws, trace)
    names = ki.names
    pip = draws.pip
    diag = {
        "response": draws.response, "kernel_inputs": names, "kernel_mode": draws.mode,
        "retained_draws": draws.J, "acceptance": draws.acceptance,
        "pip": {nm: float(pip[i]) for i, nm in enumerate(names)},
        "warnings": draws.diagnostics.get("warnings", []),
        "final_steps": draws.diagnostics.get("final_steps", {}),
        "transforms": rec.as_dict(),
    }
    diag_path = write_json(out / "diagnostics.json", diag)
    npz = save_draws(out / "draws.npz", draws)
    outputs = [trace, diag_path, npz]
    _manifest(out, "fit", cfg, outputs, {"transforms": rec.as_dict()})
    return outputs


def _bkmr_fits(cfg, ds, method_index: int, vs: bool, modifiers, med_modifiers, need_med=True):
    priors = _priors(cfg)
    ki_med = KernelInputs.for_dataset(ds, modifiers=med_modifiers)
    ki_out = KernelInputs.for_dataset(ds, mediator=True, modifiers=modifiers)
    ki_te = KernelInputs.for_dataset(ds, modifiers=modifiers)
    plan = [("m", ki_med), ("y", ki_out), ("y", ki_te)] if need_med else [("y", ki_out)]
    fits = []
    with warnings.catch_warnings(record=True):
        warnings.simplefilter("always")
        for k, (resp, ki) in enumerate(plan):
            mcmc = _mcmc(cfg, vs, derive_seed(cfg["seed"], 1, method_index, k))
            fits.append(fit_bkmr(ds, ki, priors, mcmc, response=resp))
    return fits


def _effect_rows(method, samples, point=None, scale=1.0, scale_label="model"):
    rows = []
    for name, m, s in samples.items():
        summ = summarize_effects(np.asarray(s) * scale)
        est = summ["mean"] if point is None else point[(name, m)] * scale
        rows.append({"method": method, "effect": name, "m_value": m, "estimate": est, **summ,
                     "scale": scale_label})
    return rows


def _run_effects(cfg, cde_only: bool):
    roles = _roles(cfg, need_mediator=True)
    ds, rec = load_dataset(cfg["data"], roles, _transform(cfg))
    methods = _methods(cfg, BKMR + LINEAR)
    z, zs, desc = _contrast_profiles(cfg, ds, rec)
    mods = _modifier_values(cfg, ds, rec)
    m_values = _m_values(cfg, ds, rec)
    if cde_only and not m_values:
        raise InputError("cde needs m_values or m_quantiles")
    k_inner = int(cfg["k_inner"])
    spec = ContrastSpec(z=z, z_star=zs, modifiers=mods, k_inner=k_inner, m_values=m_values)
    mod_arr = np.array([mods[n] for n in ds.x_names])
    if cfg["effect_scale"] == "raw":
        scale, label = rec.effect_scale(ds.y_name), "raw"
    elif cfg["effect_scale"] == "model":
        scale, label = 1.0, "model"
    else:
        raise InputError("effect_scale must be 'model' or 'raw'")

    rows = []
    for i, method in enumerate(methods):
        if method in BKMR:
            fits = _bkmr_fits(cfg, ds, i, method == "bkmr-cma-vs", cfg["modifiers"],
                              cfg["mediator_modifiers"], need_med=not cde_only)
            eseed = derive_seed(cfg["seed"], 2, i)
            if cde_only:
                samples = estimate_cde(fits[0], spec, seed=eseed)
            else:
                samples = estimate_mediation(*fits, spec, seed=eseed)
            rows += _effect_rows(method, samples, scale=scale, scale_label=label)
        else:
            fit = fit_linear_mediation(ds, METHOD_MODE[method], cfg["extra_terms"])
            point = method_effects(fit, method, z, zs, modifiers=mod_arr, m_values=m_values)
            boot = bootstrap_effects(ds, method, z, zs, modifiers=mod_arr, m_values=m_values,
                                     extra_terms=cfg["extra_terms"], n_boot=int(cfg["n_boot"]),
                                     seed=derive_seed(cfg["seed"], 3, i))
            if cde_only:
                boot.nde = boot.nie = boot.te = None
            rows += _effect_rows(method, boot, point, scale, label)
    contrast = {**desc, "modifiers_model": mods,
                "modifiers_raw": {n: float(rec.get(n).inverse(v)) for n, v in mods.items()},
                "m_values_model": m_values,
                "m_values_raw": [float(rec.get(ds.m_name).inverse(v)) for v in m_values],
                "k_inner": k_inner, "exposures": list(ds.z_names)}
    return rows, contrast, rec


def cmd_mediate(cfg) -> list[Path]:
    rows, contrast, rec = _run_effects(cfg, cde_only=False)
    out = ensure_dir(cfg["out_dir"])
    outputs = [write_rows(out / "effects.csv", rows, EFFECT_COLUMNS),
               write_json(out / "contrast.json", contrast)]
    _manifest(out, "mediate", cfg, outputs, {"transforms": rec.as_dict()})
    return outputs


def cmd_cde(cfg) -> list[Path]:
    rows, contrast, rec = _run_effects(cfg, cde_only=True)
    out = ensure_dir(cfg["out_dir"])
    outputs = [write_rows(out / "cde.csv", rows, EFFECT_COLUMNS),
               write_json(out / "contrast.json", contrast)]
    _manifest(out, "cde", cfg, outputs, {"transforms": rec.as_dict()})
    return outputs


def cmd_simulate(cfg) -> list[Path]:
    from .simulation import ALL_METHODS, BKMR_METHODS, LINEAR_METHODS, ScenarioSpec, run_study

    methods = _methods(cfg, LINEAR_METHODS + BKMR_METHODS)
    preset = cfg["scale_preset"]
    if preset == "desk":
        base = dict(n_truth=200_000, n_replicates=50, n=200)
        mcmc_base = dict(iterations=2000, burn_in=1000)
    elif preset == "full":
        base = dict(n_truth=1_000_000, n_replicates=500, n=300)
        mcmc_base = dict(iterations=10000, burn_in=5000)
    else:
        raise InputError("scale_preset must be 'desk' or 'full'")
    for key, target in (("n_truth", "n_truth"), ("replicates", "n_replicates"), ("n", "n")):
        if cfg[key] is not None:
            base[target] = int(cfg[key])
    mcmc_cfg = dict(cfg)
    if cfg["iterations"] is None:
        mcmc_cfg["iterations"] = mcmc_base["iterations"]
        if cfg["burn_in"] is None:
            mcmc_cfg["burn_in"] = mcmc_base["burn_in"]
    mcmc = _mcmc(mcmc_cfg, False, 0)
    study_seed = cfg["seed"] if cfg["study_seed"] is None else int(cfg["study_seed"])

    estimates, summary, failures, oracles = [], [], [], {}
    for sid in cfg["scenarios"]:
        spec = ScenarioSpec(sid, L=int(cfg["L"]), snr=float(cfg["snr"]), seed=study_seed,
                            contrast=cfg["contrast"], outcome_surface=cfg["outcome_surface"], **base)
        res = run_study(spec, methods, mcmc=mcmc, priors=_priors(cfg), k_inner=int(cfg["k_inner"]),
                        n_jobs=cfg["threads"])
        summary += res.summary()
        for e in res.estimates:
            estimates.append({"scenario": sid, "L": spec.L, **e})
        for f in res.failures:
            failures.append({"scenario": sid, "L": spec.L, **f})
        oracles[f"scenario{sid}_L{spec.L}"] = res.oracle.as_dict()
    out = ensure_dir(cfg["out_dir"])
    outputs = [
        write_rows(out / "results.csv", summary, RESULT_COLUMNS),
        write_rows(out / "estimates.csv", estimates,
                   ["scenario", "L", "replicate", "method", "effect", "m_value", "estimate"]),
        write_rows(out / "failures.csv", failures, ["scenario", "L", "replicate", "method", "error"]),
        write_json(out / "oracle.json", oracles),
    ]
    _manifest(out, "simulate", cfg, outputs,
              {"study": {"preset": preset, **base, "seed": study_seed, "mcmc": asdict(mcmc),
                         "failures": len(failures)}})
    if failures:
        log.warning("%d replicate/method fits failed and were excluded", len(failures))
    return outputs


FIGURES = {
    "fig_effects.csv": (("te", "nde", "nie"), ("truth", "median", "lower", "upper")),
    "fig_rmse.csv": (("te", "nde", "nie"), ("rmse",)),
    "fig_cde.csv": (("cde",), ("truth", "median", "lower", "upper")),
    "fig_cde_rmse.csv": (("cde",), ("rmse",)),
}


def _num(text: str):
    return None if text == "" else float(text)


def cmd_report(cfg) -> list[Path]:
    paths = cfg["results"] or []
    if not paths:
        raise InputError("report needs at least one results.csv")
    merged = []
    for p in paths:
        rows = read_rows(p)
        if rows and set(RESULT_COLUMNS) - set(rows[0]):
            raise SchemaError(f"{p} is not a results table (columns {RESULT_COLUMNS})")
        merged += rows
    out = ensure_dir(cfg["out_dir"])
    outputs = [write_rows(out / "merged.csv", merged, RESULT_COLUMNS)]
    for fname, (effects, stats) in FIGURES.items():
        wide = {}
        for r in merged:
            if r["effect"] not in effects or r["statistic"] not in stats:
                continue
            key = (r["scenario"], r["L"], r["method"], r["effect"], r["m_value"])
            wide.setdefault(key, {})[r["statistic"]] = _num(r["value"])
        rows = [{"scenario": k[0], "L": k[1], "method": k[2], "effect": k[3], "m_value": k[4], **v}
                for k, v in wide.items()]
        outputs.append(write_rows(out / fname, rows, ["scenario", "L", "method", "effect", "m_value", *stats]))
    _manifest(out, "report", cfg, outputs, {"inputs": {str(p): file_sha256(p) for p in paths}})
    return outputs


COMMANDS = {"fit": cmd_fit, "mediate": cmd_mediate, "cde": cmd_cde, "simulate": cmd_simulate,
            "report": cmd_report}


# ---------------------------------------------------------------------------
# argument parser


def _data_args(p, mediator_required=False):
    g = p.add_argument_group("data")
    g.add_argument("--data", help="input CSV with a header row")
    g.add_argument("--outcome", help="outcome column")
    g.add_argument("--exposures", help="comma-separated exposure columns")
    g.add_argument("--mediator", help="mediator column" + (" (required)" if mediator_required else ""))
    g.add_argument("--covariates", help="comma-separated covariate columns (linear terms)")
    g.add_argument("--modifiers", help="comma-separated continuous modifiers placed in the kernel")
    g.add_argument("--mediator-modifiers", help="subset of --modifiers used in the mediator model")
    g.add_argument("--log", help="columns or roles to log-transform (e.g. exposures)")
    g.add_argument("--center", help="columns or roles to center ('all' for every used column)")
    g.add_argument("--scale", help="columns or roles to scale to unit sd")


def _mcmc_args(p):
    g = p.add_argument_group("sampler")
    g.add_argument("--iterations", type=int, help="MCMC iterations (default 10000)")
    g.add_argument("--burn-in", type=int, help="burn-in iterations (default half)")
    g.add_argument("--thin", type=int, help="keep every k-th post-burn-in draw")


def _effect_args(p):
    g = p.add_argument_group("contrast")
    g.add_argument("--methods", help="comma list from bkmr-cma, bkmr-cma-vs, linear, linear-noint, traditional")
    g.add_argument("--contrast-quantiles", help="percentiles for z* and z, default 25,75")
    g.add_argument("--z", help="exposure profile z (exposure order)")
    g.add_argument("--z-star", help="reference exposure profile z*")
    g.add_argument("--contrast-scale", choices=("raw", "model"), help="scale of --z/--z-star (default raw)")
    g.add_argument("--fix", action="append", metavar="NAME=VALUE",
                   help="raw-scale value of a kernel modifier (default: its median)")
    g.add_argument("--m-quantiles", help="mediator percentiles for CDEs, default 25,50,75")
    g.add_argument("--m-values", help="raw mediator values for CDEs (overrides --m-quantiles)")
    g.add_argument("--k-inner", type=int, help="mediator samples per draw (default 100)")
    g.add_argument("--n-boot", type=int, help="bootstrap resamples for linear methods (default 500)")
    g.add_argument("--extra-terms", help="extra outcome terms for linear methods, e.g. age,age^2,age*Mn")
    g.add_argument("--effect-scale", choices=("model", "raw"), help="report effects in model or raw outcome units")


def build_parser() -> argparse.ArgumentParser:
    # SUPPRESS keeps a subcommand's parser from resetting global flags given before it
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--seed", type=int, help="master seed (default 0)")
    common.add_argument("--threads", type=int, help="worker processes / BLAS threads (default 1)")
    common.add_argument("--out-dir", help="output directory (default ./bkmrcma-out)")
    common.add_argument("--config", help="YAML file with option values; flags override it")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="bkmrcma", parents=[common],
                                     description="Kernel machine regression mediation analysis for exposure mixtures.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    p = sub.add_parser("fit", parents=[common], help="fit one model and write its trace")
    _data_args(p)
    _mcmc_args(p)
    p.add_argument("--response", choices=("y", "m"), help="model the outcome (y) or the mediator (m)")
    p.add_argument("--mediator-in-kernel", action="store_const", const=True,
                   help="put the mediator in the kernel (outcome model)")
    p.add_argument("--vs", dest="variable_selection", action="store_const", const=True,
                   help="component-wise variable selection")

    for name, text in (("mediate", "natural direct/indirect and total effects"),
                       ("cde", "controlled direct effects")):
        p = sub.add_parser(name, parents=[common], help=text)
        _data_args(p, mediator_required=True)
        _mcmc_args(p)
        _effect_args(p)

    p = sub.add_parser("simulate", parents=[common], help="run the simulation study")
    p.add_argument("--scenarios", help="comma-separated scenario ids (1-4)")
    p.add_argument("--L", type=int, help="number of exposures (default 3)")
    p.add_argument("--scale-preset", choices=("desk", "full"), help="desk (50 x 200) or full (500 x 300)")
    p.add_argument("--replicates", type=int)
    p.add_argument("--n", type=int, help="observations per replicate")
    p.add_argument("--n-truth", type=int, help="truth population size")
    p.add_argument("--study-seed", type=int, help="seed for data generation (default --seed)")
    p.add_argument("--methods", help="comma list from bkmr-cma, bkmr-cma-vs, linear, linear-noint, traditional")
    p.add_argument("--k-inner", type=int)
    p.add_argument("--outcome-surface", help="override the scenario outcome surface (e.g. h2_lin)")
    _mcmc_args(p)

    p = sub.add_parser("report", parents=[common], help="merge results and write per-figure tables")
    p.add_argument("results", nargs="*", help="results.csv files from simulate")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if getattr(args, "fix", None) is not None:
        args.fix = _pairs(args.fix, "--fix")
    try:
        cfg = resolve(args)
        from threadpoolctl import threadpool_limits

        with threadpool_limits(cfg["threads"]):
            outputs = COMMANDS[args.command](cfg)
    except BkmrError as exc:
        print(f"bkmrcma: error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return exc.exit_code
    except KeyboardInterrupt:
        return 130
    for p in outputs:
        log.info("wrote %s", p)
    return 0


if __name__ == "__main__":
    sys.exit(main())
