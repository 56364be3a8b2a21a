"""CSV ingestion, column transforms and deterministic output writers.

Input is a comma-separated file with a header row. Every used column must be
numeric; categorical covariates have to be encoded as indicator columns
before they get here.

Transforms run in the order log -> center -> scale and their parameters are
kept in a :class:`TransformRecord`, so values given on the raw scale (for
example exposure contrasts) can be mapped onto the model scale and effects on
a standardized outcome can be mapped back.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataIOError, InputError, SchemaError
from .model import Dataset, KernelInputs, PosteriorDraws

TRANSFORM_STEPS = ("log", "center", "scale")


# ---------------------------------------------------------------------------
# reading


def read_table(path) -> tuple[list[str], dict[str, np.ndarray]]:
    """Header and numeric columns of a CSV file."""
    path = Path(path)
    try:
        with open(path, newline="", encoding="utf-8-sig") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataIOError(f"cannot read {path}: {exc.strerror or exc}") from exc
    if not rows or not any(cell.strip() for cell in rows[0]):
        raise DataIOError(f"{path} has no header row")
    header = [h.strip() for h in rows[0]]
    if len(set(header)) != len(header):
        raise SchemaError(f"{path} has duplicate column names")
    body = [r for r in rows[1:] if any(cell.strip() for cell in r)]
    cols: dict[str, list] = {h: [] for h in header}
    for lineno, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise DataIOError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        for h, cell in zip(header, row):
            cols[h].append(cell.strip())
    # conversion is deferred per column so unused text columns do not fail
    return header, {h: _LazyColumn(path, h, v) for h, v in cols.items()}


class _LazyColumn:
    def __init__(self, path, name, cells):
        self.path, self.name, self.cells = path, name, cells

    def values(self) -> np.ndarray:
        out = np.empty(len(self.cells))
        for i, cell in enumerate(self.cells):
            try:
                out[i] = float(cell)
            except ValueError:
                raise SchemaError(f"{self.path}: column {self.name!r} row {i + 2} is not numeric: {cell!r}") from None
        if not np.all(np.isfinite(out)):
            raise SchemaError(f"{self.path}: column {self.name!r} has missing or non-finite values")
        return out


# ---------------------------------------------------------------------------
# roles and transforms


@dataclass(frozen=True)
class ColumnRoles:
    outcome: str
    exposures: tuple[str, ...]
    mediator: str | None = None
    covariates: tuple[str, ...] = ()
    modifiers: tuple[str, ...] = ()

    def __post_init__(self):
        for name in ("exposures", "covariates", "modifiers"):
            val = getattr(self, name)
            object.__setattr__(self, name, (val,) if isinstance(val, str) else tuple(val))
        if not self.outcome:
            raise SchemaError("an outcome column is required")
        if not self.exposures:
            raise SchemaError("at least one exposure column is required")
        used = self.all_columns()
        dup = sorted({c for c in used if used.count(c) > 1})
        if dup:
            raise SchemaError(f"columns assigned to more than one role: {dup}")

    def all_columns(self) -> list[str]:
        return ([self.outcome] + list(self.exposures) + ([self.mediator] if self.mediator else [])
                + list(self.covariates) + list(self.modifiers))

    def role_of(self, column: str) -> str:
        if column == self.outcome:
            return "outcome"
        if column == self.mediator:
            return "mediator"
        for role in ("exposures", "covariates", "modifiers"):
            if column in getattr(self, role):
                return role
        raise SchemaError(f"column {column!r} has no role")


@dataclass(frozen=True)
class ColumnTransform:
    log: bool = False
    center: float | None = None
    scale: float | None = None

    def forward(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.log:
            if np.any(x <= 0):
                raise InputError("log transform needs strictly positive values")
            x = np.log(x)
        if self.center is not None:
            x = x - self.center
        if self.scale is not None:
            x = x / self.scale
        return x

    def inverse(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.scale is not None:
            x = x * self.scale
        if self.center is not None:
            x = x + self.center
        if self.log:
            x = np.exp(x)
        return x

    def as_dict(self) -> dict:
        return {"log": self.log, "center": self.center, "scale": self.scale}


@dataclass
class TransformRecord:
    columns: dict = field(default_factory=dict)   # name -> ColumnTransform

    def get(self, name: str) -> ColumnTransform:
        return self.columns.get(name, ColumnTransform())

    def to_model(self, names, raw) -> np.ndarray:
        raw = np.asarray(raw, dtype=float).ravel()
        if raw.shape[0] != len(names):
            raise InputError(f"expected {len(names)} values for {list(names)}, got {raw.shape[0]}")
        return np.array([float(self.get(n).forward(v)) for n, v in zip(names, raw)])

    def to_raw(self, names, values) -> np.ndarray:
        values = np.asarray(values, dtype=float).ravel()
        return np.array([float(self.get(n).inverse(v)) for n, v in zip(names, values)])

    def effect_scale(self, outcome: str) -> float:
        """Factor turning a difference on the model scale into raw outcome units."""
        t = self.get(outcome)
        if t.log:
            raise InputError("outcome was log-transformed; differences have no raw-scale equivalent")
        return 1.0 if t.scale is None else float(t.scale)

    def as_dict(self) -> dict:
        return {k: self.columns[k].as_dict() for k in sorted(self.columns)}


def _select(spec, roles: ColumnRoles) -> list[str]:
    """Expand a transform target list: column names, role names, or 'all'."""
    if spec in (None, False):
        return []
    if spec is True or spec == "all":
        return roles.all_columns()
    if isinstance(spec, str):
        spec = [spec]
    out = []
    for item in spec:
        if item == "all":
            out.extend(roles.all_columns())
        elif item in ("exposures", "covariates", "modifiers"):
            out.extend(getattr(roles, item))
        elif item in ("outcome", "mediator"):
            val = getattr(roles, item)
            if val:
                out.append(val)
        elif item in roles.all_columns():
            out.append(item)
        else:
            raise SchemaError(f"transform refers to unknown column {item!r}")
    return out


def fit_transforms(columns: dict[str, np.ndarray], roles: ColumnRoles, transform: dict | None) -> TransformRecord:
    """Estimate center/scale parameters on the (possibly logged) columns."""
    transform = transform or {}
    unknown = set(transform) - set(TRANSFORM_STEPS)
    if unknown:
        raise InputError(f"unknown transform steps {sorted(unknown)}")
    sel = {step: set(_select(transform.get(step), roles)) for step in TRANSFORM_STEPS}
    rec = TransformRecord()
    for name in roles.all_columns():
        if not any(name in s for s in sel.values()):
            continue
        x = columns[name]
        log = name in sel["log"]
        if log:
            if np.any(x <= 0):
                raise InputError(f"column {name!r} has non-positive values and cannot be log-transformed")
            x = np.log(x)
        center = float(np.mean(x)) if name in sel["center"] else None
        scale = None
        if name in sel["scale"]:
            scale = float(np.std(x, ddof=1))
            if not scale > 0:
                raise InputError(f"column {name!r} is constant and cannot be scaled")
        rec.columns[name] = ColumnTransform(log=log, center=center, scale=scale)
    return rec


def load_dataset(path, roles: ColumnRoles, transform: dict | None = None) -> tuple[Dataset, TransformRecord]:
    header, table = read_table(path)
    missing = [c for c in roles.all_columns() if c not in table]
    if missing:
        labels = ", ".join(f"{c!r} ({roles.role_of(c)})" for c in missing)
        raise SchemaError(f"{path}: missing column(s) {labels}")
    raw = {c: table[c].values() for c in roles.all_columns()}
    n = len(next(iter(raw.values())))
    if n < 2:
        raise SchemaError(f"{path}: need at least 2 data rows")
    rec = fit_transforms(raw, roles, transform)
    cols = {c: rec.get(c).forward(v) for c, v in raw.items()}

    def stack(names):
        return np.column_stack([cols[c] for c in names]) if names else None

    ds = Dataset(
        y=cols[roles.outcome], z=stack(roles.exposures),
        m=cols[roles.mediator] if roles.mediator else None,
        c=stack(roles.covariates), z_names=roles.exposures, c_names=roles.covariates,
        m_name=roles.mediator or "m", y_name=roles.outcome,
        x=stack(roles.modifiers), x_names=roles.modifiers,
    )
    return ds, rec


# ---------------------------------------------------------------------------
# writing


def fmt(value) -> str:
    """Text form of one cell: shortest round-trip repr for floats, '' for None."""
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        v = float(value)
        if math.isnan(v):
            return "NaN"
        return repr(v)
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return str(value)


def write_rows(path, rows, columns) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\r\n", quoting=csv.QUOTE_MINIMAL)
            w.writerow(columns)
            for row in rows:
                w.writerow([fmt(row.get(c)) for c in columns])
    except OSError as exc:
        raise DataIOError(f"cannot write {path}: {exc.strerror or exc}") from exc
    return path


def read_rows(path) -> list[dict]:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            return list(csv.DictReader(fh))
    except OSError as exc:
        raise DataIOError(f"cannot read {path}: {exc.strerror or exc}") from exc


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, Path):
        return str(obj)
    return obj


def write_json(path, obj) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(_jsonable(obj), fh, sort_keys=True, indent=2, allow_nan=False)
            fh.write("\n")
    except OSError as exc:
        raise DataIOError(f"cannot write {path}: {exc.strerror or exc}") from exc
    return path


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# posterior draws on disk


def save_draws(path, draws: PosteriorDraws, roles: ColumnRoles | None = None) -> Path:
    """Write a fit (trace plus its training data) to a compressed ``.npz``."""
    ds = draws.dataset
    meta = {
        "response": draws.response, "mode": draws.mode, "intercept": draws.intercept,
        "exposures": list(draws.kernel_inputs.exposures), "mediator": draws.kernel_inputs.mediator,
        "modifiers": list(draws.kernel_inputs.modifiers),
        "z_names": list(ds.z_names), "c_names": list(ds.c_names), "x_names": list(ds.x_names),
        "m_name": ds.m_name, "y_name": ds.y_name, "acceptance": draws.acceptance,
    }
    arrays = dict(beta=draws.beta, sigma2=draws.sigma2, lam=draws.lam, rho=draws.rho, r=draws.r,
                  delta=draws.delta, y=ds.y, z=ds.z, c=ds.c, x=ds.x)
    if ds.m is not None:
        arrays["m"] = ds.m
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            np.savez_compressed(fh, meta=np.array(json.dumps(_jsonable(meta), sort_keys=True)), **arrays)
    except OSError as exc:
        raise DataIOError(f"cannot write {path}: {exc.strerror or exc}") from exc
    return path


def load_draws(path) -> PosteriorDraws:
    try:
        with np.load(path, allow_pickle=False) as f:
            meta = json.loads(str(f["meta"]))
            arr = {k: f[k] for k in f.files if k != "meta"}
    except (OSError, ValueError, KeyError) as exc:
        raise DataIOError(f"cannot read draws from {path}: {exc}") from exc
    ds = Dataset(y=arr["y"], z=arr["z"], m=arr.get("m"), c=arr["c"], x=arr["x"],
                 z_names=tuple(meta["z_names"]), c_names=tuple(meta["c_names"]),
                 x_names=tuple(meta["x_names"]), m_name=meta["m_name"], y_name=meta["y_name"])
    ki = KernelInputs(tuple(meta["exposures"]), meta["mediator"], tuple(meta["modifiers"]))
    return PosteriorDraws(dataset=ds, kernel_inputs=ki, response=meta["response"], mode=meta["mode"],
                          intercept=meta["intercept"], beta=arr["beta"], sigma2=arr["sigma2"],
                          lam=arr["lam"], rho=arr["rho"], r=arr["r"], delta=arr["delta"].astype(bool),
                          acceptance=meta["acceptance"])


def ensure_dir(path) -> Path:
    path = Path(path)
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise DataIOError(f"cannot create output directory {path}: {exc.strerror or exc}") from exc
    return path
