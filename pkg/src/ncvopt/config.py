"""Run configuration (TOML) and CSV data loading with line-precise errors.

Config grammar
--------------
Top-level keys: ``data`` (CSV path, relative to the config file), ``seed``,
``threads``, ``out_dir``. Tables:

``[model]``
    ``terms`` (list of term strings, one predictor) or ``predictors``
    (list of lists, one per linear predictor), ``family`` and an optional
    ``[model.family_params]`` table (e.g. ``phi`` for gamma, ``tau`` and
    ``lam`` for elf), ``response`` (column name, default ``y``).
``[scheme]``
    ``kind`` (loo, kfold, nei, forecast), ``rule`` (neighbourhood rule for
    nei), ``folds``, ``block``.
``[ncv]``
    ``variant``, ``gamma``.
``[optimizer]``
    Any :class:`ncvopt.optimize.OptimizerSettings` field, plus ``rho0``.
``[uq]``
    ``kind``, ``use_cv_residuals``, ``scaled_by_edf``, ``nu_method``,
    ``level``.
``[sim]``
    Any :class:`ncvopt.simulate.SimRecipe` field.
``[quantile]``
    ``tau``, ``n_boot``, ``grid``, ``var_terms``.

Unknown keys are rejected with the line on which they appear.
"""

from __future__ import annotations

import csv
import re
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .model import ModelSpec
from .optimize import OptimizerSettings
from .simulate import SimRecipe

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


_SCHEMA = {
    "": {"data", "seed", "threads", "out_dir", "model", "scheme", "ncv", "optimizer", "uq", "sim", "quantile"},
    "model": {"terms", "predictors", "family", "family_params", "response"},
    "scheme": {"kind", "rule", "folds", "block"},
    "ncv": {"variant", "gamma"},
    "optimizer": {f.name for f in fields(OptimizerSettings)} | {"rho0"},
    "uq": {"kind", "use_cv_residuals", "scaled_by_edf", "nu_method", "level"},
    "sim": {f.name for f in fields(SimRecipe)},
    "quantile": {"tau", "n_boot", "grid", "var_terms"},
}
_OPEN_TABLES = {"model.family_params", "sim.extra"}


@dataclass
class RunConfig:
    data_path: Path | None = None
    predictors: tuple = (("s(x)",),)
    family: str = "gaussian"
    family_params: dict = field(default_factory=dict)
    response: str = "y"
    scheme: dict = field(default_factory=lambda: {"kind": "loo"})
    variant: str = "plain"
    gamma: float = 1.0
    optimizer: OptimizerSettings = field(default_factory=OptimizerSettings)
    rho0: list | None = None
    uq: dict = field(default_factory=lambda: {"kind": "autocorr_plus_bayes_bias"})
    seed: int = 0
    threads: int = 1
    out_dir: Path = Path("ncvopt-out")
    sim: dict = field(default_factory=dict)
    quantile: dict = field(default_factory=dict)
    source: str = "<config>"

    @property
    def model_spec(self) -> ModelSpec:
        return ModelSpec(self.predictors, self.family)

    def sim_recipe(self, **overrides) -> SimRecipe:
        kw = dict(self.sim)
        kw.setdefault("seed", self.seed)
        kw.update({k: v for k, v in overrides.items() if v is not None})
        return SimRecipe(**kw)


def _line_of(text: str, table: str, key: str) -> int | None:
    """First line defining ``key`` inside ``[table]`` (or a dotted form)."""
    lines = text.splitlines()
    current = ""
    pat = re.compile(rf"^\s*[\"']?{re.escape(key)}[\"']?\s*[=.]")
    header = re.compile(r"^\s*\[+\s*([^\]]+?)\s*\]+")
    for i, line in enumerate(lines, 1):
        h = header.match(line)
        if h:
            current = h.group(1).strip()
            if current.rsplit(".", 1)[-1] == key and current.rsplit(".", 1)[0] == table:
                return i
            continue
        if current == table and pat.match(line):
            return i
    return None


def _check_keys(doc: dict, text: str, source: str):
    for table, allowed in _SCHEMA.items():
        sub = doc if table == "" else doc.get(table, {})
        if not isinstance(sub, dict):
            line = _line_of(text, "", table)
            raise ConfigError(f"{source}:{line or '?'}: [{table}] must be a table")
        for key in sub:
            if key not in allowed:
                line = _line_of(text, table, key)
                where = f"[{table}]" if table else "top level"
                raise ConfigError(
                    f"{source}:{line or '?'}: unknown key {key!r} at {where}; allowed: {', '.join(sorted(allowed))}"
                )


def parse_config(text: str, source: str = "<config>", base: Path | None = None) -> RunConfig:
    """Parse TOML text into a :class:`RunConfig`."""
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as err:
        raise ConfigError(f"{source}: {err}") from None
    _check_keys(doc, text, source)

    def fail(table, key, msg):
        line = _line_of(text, table, key)
        raise ConfigError(f"{source}:{line or '?'}: {msg}")

    cfg = RunConfig(source=source)
    base = base or Path(".")
    if "data" in doc:
        cfg.data_path = (base / doc["data"]).resolve()
    for key, typ in (("seed", int), ("threads", int)):
        if key in doc:
            if not isinstance(doc[key], typ) or doc[key] < (0 if key == "seed" else 1):
                fail("", key, f"{key} must be a {'non-negative' if key == 'seed' else 'positive'} integer")
            setattr(cfg, key, doc[key])
    if "out_dir" in doc:
        cfg.out_dir = base / doc["out_dir"]

    model = doc.get("model", {})
    if "terms" in model and "predictors" in model:
        fail("model", "predictors", "give either terms or predictors, not both")
    preds = model.get("predictors", [model["terms"]] if "terms" in model else None)
    if preds is not None:
        if not all(isinstance(p, list) and all(isinstance(t, str) for t in p) for p in preds):
            fail("model", "predictors" if "predictors" in model else "terms", "terms must be lists of strings")
        cfg.predictors = tuple(tuple(p) for p in preds)
    cfg.family = model.get("family", cfg.family)
    cfg.family_params = dict(model.get("family_params", {}))
    cfg.response = model.get("response", cfg.response)
    try:
        spec = cfg.model_spec
    except (ValueError, TypeError) as err:
        fail("model", "predictors" if "predictors" in model else "terms", str(err))
    if spec.K > 1 and cfg.family not in ("gaussian_ls", "gaulss"):
        fail("model", "family", f"family {cfg.family!r} takes one linear predictor, got {spec.K}")

    sch = doc.get("scheme", {})
    cfg.scheme = {"kind": "loo", **sch}
    if cfg.scheme["kind"] not in ("loo", "kfold", "nei", "forecast"):
        fail("scheme", "kind", f"unknown scheme kind {cfg.scheme['kind']!r}")
    if cfg.scheme["kind"] == "nei" and "rule" not in sch:
        fail("scheme", "kind", "scheme kind 'nei' needs a rule")

    ncv = doc.get("ncv", {})
    cfg.variant = ncv.get("variant", cfg.variant)
    cfg.gamma = float(ncv.get("gamma", cfg.gamma))
    if cfg.variant not in ("plain", "robust", "perturbed", "quadratic"):
        fail("ncv", "variant", f"unknown NCV variant {cfg.variant!r}")
    if cfg.gamma < 1:
        fail("ncv", "gamma", "gamma must be >= 1")

    opt = dict(doc.get("optimizer", {}))
    cfg.rho0 = opt.pop("rho0", None)
    cfg.optimizer = OptimizerSettings(**opt)

    uq = doc.get("uq", {})
    cfg.uq = {"kind": "autocorr_plus_bayes_bias", **uq}
    kinds = ("jackknife", "autocorr_robust", "bayes_large_sample", "autocorr_plus_bayes_bias")
    if cfg.uq["kind"] not in kinds:
        fail("uq", "kind", f"unknown covariance kind {cfg.uq['kind']!r}; choose from {', '.join(kinds)}")

    cfg.sim = dict(doc.get("sim", {}))
    if cfg.sim:
        try:
            cfg.sim_recipe()
        except (ValueError, TypeError) as err:
            fail("sim", next(iter(cfg.sim)), str(err))
    cfg.quantile = dict(doc.get("quantile", {}))
    tau = cfg.quantile.get("tau", 0.5)
    if not 0 < tau < 1:
        fail("quantile", "tau", "tau must lie in (0, 1)")
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err.strerror}") from None
    return parse_config(text, str(path), path.parent)


def read_csv(path) -> dict:
    """Read a header-first CSV into a dict of columns.

    Columns whose every value parses as a float become float arrays; others
    are kept as string arrays (usable as factors). Ragged rows and empty
    numeric cells raise :class:`DataError` naming the line.
    """
    path = Path(path)
    try:
        fh = path.open(newline="")
    except OSError as err:
        raise DataError(f"cannot read data {path}: {err.strerror}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if len(set(header)) != len(header) or any(not h for h in header):
            raise DataError(f"{path}:1: header has empty or duplicate column names")
        rows, lines = [], []
        for row in reader:
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{reader.line_num}: expected {len(header)} fields, found {len(row)}")
            rows.append([c.strip() for c in row])
            lines.append(reader.line_num)
    if not rows:
        raise DataError(f"{path}: no data rows")
    cols = {}
    for j, name in enumerate(header):
        vals = [r[j] for r in rows]
        try:
            cols[name] = np.array([float(v) for v in vals])
        except ValueError:
            cols[name] = np.array(vals)
            cols.setdefault("__bad__", {})[name] = next(
                lines[i] for i, v in enumerate(vals) if not _is_float(v)
            )
    return cols


def _is_float(v: str) -> bool:
    try:
        float(v)
    except ValueError:
        return False
    return True


def numeric_column(data: dict, name: str, source: str = "data") -> np.ndarray:
    """Column as float, or a :class:`DataError` naming the first bad line."""
    if name not in data:
        raise DataError(f"{source}: no column named {name!r}")
    bad = data.get("__bad__", {})
    if name in bad:
        raise DataError(f"{source}:{bad[name]}: column {name!r} has a non-numeric value")
    col = np.asarray(data[name], dtype=float)
    if not np.all(np.isfinite(col)):
        raise DataError(f"{source}: column {name!r} has non-finite values")
    return col
