"""Command line front end: ``ssgam fit | predict | summarize``.

``ssgam fit --config run.yaml`` reads a YAML run configuration, ingests the CSV
data, fits the model and writes into the output directory:

* ``summary.txt`` and ``summary.json``: text summary and its JSON twin.
* ``samples.csv``: one row per saved draw and chain.  Columns are ``chain``,
  ``iter``, then ``<term label>.<i>`` for the xi entries of every term,
  ``alpha.<label>``, ``gamma.<label>``, ``tau2.<label>`` per term, ``w``,
  ``phi``, ``beta_u.<name>`` for the unpenalized coefficients and ``deviance``.
  Floats use ``%.17g`` so the file round-trips exactly.
* ``model_table.json``: ranked inclusion configurations.
* ``effects/<name>.json``: effect curves on a grid (100 equally spaced points
  per numeric covariate inside the training range, every level of a factor).
  By default one file per covariate combination, summing every term whose
  covariates lie in that combination; ``--separate-effects`` writes one file
  per term instead.
* ``diagnostics.json``: Gelman-Rubin R-hat values and P-IWLS acceptance rates.
* ``fit.npz``: archive for ``ssgam predict`` and ``ssgam summarize``.
* ``manifest.json``: configuration echo, seed, library versions and timing.
* ``predictions.csv`` when test data is given.

Configuration keys: ``formula``, ``family``, ``data``, ``schema`` (column to
``factor``/``numeric``), ``hyper`` (HyperParams fields), ``mcmc`` (McmcConfig
fields), ``seed``, ``out``, ``test_data`` and ``design`` (``decomposition``,
``mass``, ``solver``, ``scaling``).  Relative paths are resolved against the
directory of the configuration file.
"""
from __future__ import annotations

import argparse
import json
import platform
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from itertools import product
from pathlib import Path

import numpy as np
import pandas as pd
import scipy
import yaml

from . import __version__
from .api import DesignConfig, fit as fit_model, load_fit, save_fit
from .design import DesignError
from .family import get_family
from .formula import FormulaError, parse_formula
from .sampler import HyperParams, McmcConfig, SamplerError
from .summary import (
    effect_summary,
    format_summary,
    gelman_rubin,
    model_table,
    predict,
    summary_dict,
)

__all__ = ["RunConfig", "load_config", "ingest", "main"]

GRID_POINTS = 100


class CliError(Exception):
    """Error tagged with the module it came from."""

    def __init__(self, module, message):
        super().__init__(f"{module}: {message}")


@dataclass
class RunConfig:
    formula: str
    data: str
    family: str = "gaussian"
    schema: dict = field(default_factory=dict)
    hyper: HyperParams = field(default_factory=HyperParams)
    mcmc: McmcConfig = field(default_factory=McmcConfig)
    design: DesignConfig = field(default_factory=DesignConfig)
    seed: int | None = None
    out: str = "ssgam-out"
    test_data: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def _sub(cls, values, what):
    if values is None:
        return cls()
    if not isinstance(values, dict):
        raise CliError("config", f"{what} must be a mapping")
    known = {f.name for f in fields(cls)}
    extra = sorted(set(values) - known)
    if extra:
        raise CliError("config", f"unknown {what} key(s): {', '.join(extra)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as e:
        raise CliError("config", f"{what}: {e}") from None


def load_config(path, seed=None, out=None) -> RunConfig:
    """Read a YAML run configuration; ``seed`` and ``out`` override the file."""
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except OSError as e:
        raise CliError("config", f"cannot read {path}: {e.strerror}") from None
    except yaml.YAMLError as e:
        raise CliError("config", f"{path}: invalid YAML ({e})") from None
    if not isinstance(raw, dict):
        raise CliError("config", f"{path}: expected a mapping at the top level")
    known = {f.name for f in fields(RunConfig)}
    extra = sorted(set(raw) - known)
    if extra:
        raise CliError("config", f"unknown key(s): {', '.join(extra)}")
    for key in ("formula", "data"):
        if key not in raw:
            raise CliError("config", f"missing required key {key!r}")
    base = path.parent

    def resolve(p):
        return None if p is None else str(base / p)

    seed = seed if seed is not None else raw.get("seed")
    mcmc = _sub(McmcConfig, raw.get("mcmc"), "mcmc")
    if seed is not None:
        mcmc = McmcConfig(**{**asdict(mcmc), "seed": int(seed)})
    cfg = RunConfig(
        formula=str(raw["formula"]), data=resolve(raw["data"]),
        family=str(raw.get("family", "gaussian")), schema=dict(raw.get("schema") or {}),
        hyper=_sub(HyperParams, raw.get("hyper"), "hyper"), mcmc=mcmc,
        design=_sub(DesignConfig, raw.get("design"), "design"),
        seed=mcmc.seed, out=out if out is not None else resolve(raw.get("out", "ssgam-out")),
        test_data=resolve(raw.get("test_data")),
    )
    try:
        get_family(cfg.family)
    except ValueError as e:
        raise CliError("config", str(e)) from None
    for p in (cfg.data, cfg.test_data):
        if p is not None and not Path(p).is_file():
            raise CliError("config", f"file not found: {p}")
    return cfg


def ingest(path, schema=None, allow_empty=False, strict=True) -> tuple[pd.DataFrame, dict]:
    """Read a CSV file; returns the frame and the column kinds.

    Numeric columns become floats, factor columns strings.  A column is numeric
    unless declared ``factor`` or some cell fails to parse as a number.  Missing
    cells are an error, as are schema columns absent from the file when ``strict``.
    """
    schema = dict(schema or {})
    try:
        raw = pd.read_csv(path, dtype=str, skipinitialspace=True)
    except pd.errors.EmptyDataError:
        raise CliError("ingest", f"{path}: file is empty") from None
    except (OSError, pd.errors.ParserError) as e:
        raise CliError("ingest", f"{path}: {e}") from None
    if raw.empty and not allow_empty:
        raise CliError("ingest", f"{path}: no data rows")
    for name in schema:
        if strict and name not in raw.columns:
            raise CliError("ingest", f"{path}: schema column {name!r} not in file")
    missing = raw.isna().to_numpy()
    if missing.any():
        r, c = np.argwhere(missing)[0]
        raise CliError("ingest", f"{path}: missing value in row {r + 1}, column "
                       f"{raw.columns[c]!r} (missing values are not allowed)")
    out, kinds = {}, {}
    for name in raw.columns:
        col = raw[name].str.strip()
        kind = schema.get(name)
        if kind not in (None, "numeric", "factor"):
            raise CliError("ingest", f"schema kind for {name!r} must be 'numeric' or 'factor'")
        num = pd.to_numeric(col, errors="coerce")
        if kind == "numeric" and num.isna().any():
            r = int(np.flatnonzero(num.isna().to_numpy())[0])
            raise CliError("ingest", f"{path}: cannot parse {col.iloc[r]!r} as a number in "
                           f"row {r + 1}, column {name!r}")
        if kind is None:
            kind = "numeric" if len(col) and not num.isna().any() else "factor"
        kinds[name] = kind
        out[name] = num.astype(float) if kind == "numeric" else col.astype(str)
    return pd.DataFrame(out, columns=raw.columns), kinds


# ---------------------------------------------------------------------------
# artifacts

def samples_frame(fit) -> pd.DataFrame:
    """All saved draws as one wide table, chains stacked."""
    labels, dims = fit.design.labels, fit.design.dims
    parts = []
    for c in fit.chains:
        cols = {"chain": np.full(len(c.w), c.chain), "iter": c.iteration}
        k = 0
        for lab, d in zip(labels, dims):
            for i in range(d):
                cols[f"{lab}.{i + 1}"] = c.xi[:, k]
                k += 1
        for name in ("alpha", "gamma", "tau2"):
            arr = getattr(c, name)
            for j, lab in enumerate(labels):
                cols[f"{name}.{lab}"] = arr[:, j]
        cols["w"] = c.w
        cols["phi"] = c.phi
        for k, lab in enumerate(fit.design.u_labels):
            cols[f"beta_u.{lab}"] = c.beta_u[:, k]
        cols["deviance"] = c.deviance
        parts.append(pd.DataFrame(cols))
    return pd.concat(parts, ignore_index=True)


def write_samples(fit, path):
    samples_frame(fit).to_csv(path, index=False, float_format="%.17g", lineterminator="\n")


def _effect_terms(fit):
    """(label, covariates) of every non-intercept term in model order."""
    out = [(t.label, tuple(t.covariates)) for t in fit.design.unpenalized if t.covariates]
    out += [(b.label, tuple(b.covariates)) for b in fit.design.blocks]
    return out


def _grid(fit, data, covariates):
    axes = {}
    for cov in covariates:
        col = data[cov]
        if fit.meta.get("schema", {}).get(cov) == "factor":
            axes[cov] = sorted(pd.unique(col.astype(str)), key=str)
        else:
            x = np.asarray(col, dtype=float)
            axes[cov] = np.linspace(x.min(), x.max(), GRID_POINTS).tolist()
    rows = list(product(*axes.values()))
    frame = pd.DataFrame(rows, columns=list(covariates))
    return axes, frame


def effect_groups(fit, separate=False) -> dict[str, tuple[tuple, list[str]]]:
    """Name -> (covariates, term labels) for every effect file to write."""
    terms = _effect_terms(fit)
    if separate:
        return {lab: (covs, [lab]) for lab, covs in terms}
    groups = {}
    for _, covs in terms:
        key = ":".join(covs)
        if key not in groups:
            members = [lab for lab, c in terms if set(c) <= set(covs)]
            groups[key] = (covs, members)
    return groups


def write_effects(fit, data, outdir, separate=False):
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, (covs, labels) in effect_groups(fit, separate).items():
        axes, frame = _grid(fit, data, covs)
        eff = effect_summary(fit, frame, labels)
        doc = {
            "name": name, "terms": labels, "covariates": list(covs),
            "cumulative": not separate, "axes": axes,
            "grid": {c: frame[c].tolist() for c in covs},
            "mean": eff["mean"].tolist(), "lower": eff["lower"].tolist(),
            "upper": eff["upper"].tolist(), "quantiles": list(eff["quantiles"]),
        }
        path = outdir / f"{name}.json"
        path.write_text(json.dumps(doc))
        written.append(path)
    return written


def write_predictions(fit, data, path):
    pred = predict(fit, data) if len(data) else None
    if pred is None:
        cols = ["eta", "eta_q10", "eta_q90", "fit", "fit_q10", "fit_q90"]
        pd.DataFrame(columns=cols).to_csv(path, index=False)
        return
    pred.to_frame().to_csv(path, index=False, float_format="%.17g", lineterminator="\n")


def diagnostics(fit) -> dict:
    rhat = gelman_rubin(fit)
    return {
        "rhat": rhat, "rhat_available": rhat is not None,
        "max_rhat": max(rhat.values()) if rhat else None,
        "acceptance": fit.acceptance,
    }


def _versions():
    return {"ssgam": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__, "pandas": pd.__version__,
            "pyyaml": yaml.__version__}


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def _dump(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2, default=_json_default) + "\n")


def _check_data(cfg, data):
    try:
        ast = parse_formula(cfg.formula)
    except FormulaError as e:
        raise CliError("formula", str(e)) from None
    if ast.response not in data.columns:
        raise CliError("ingest", f"response column {ast.response!r} not in {cfg.data}")
    try:
        get_family(cfg.family).validate(data[ast.response].to_numpy(dtype=float))
    except ValueError as e:
        raise CliError("ingest", f"{cfg.data}: {e}") from None


def run_fit(cfg: RunConfig, separate_effects=False, predict_path=None) -> Path:
    started = time.time()
    data, kinds = ingest(cfg.data, cfg.schema)
    _check_data(cfg, data)
    try:
        result = fit_model(cfg.formula, data, cfg.family, cfg.hyper, cfg.mcmc, cfg.design,
                           schema=kinds)
    except FormulaError as e:
        raise CliError("formula", str(e)) from None
    except DesignError as e:
        raise CliError("design", str(e)) from None
    except SamplerError as e:
        raise CliError("sampler", str(e)) from None
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    fit_seconds = time.time() - started
    (out / "summary.txt").write_text(format_summary(result))
    _dump(summary_dict(result), out / "summary.json")
    write_samples(result, out / "samples.csv")
    _dump(model_table(result), out / "model_table.json")
    write_effects(result, data, out / "effects", separate_effects)
    _dump(diagnostics(result), out / "diagnostics.json")
    save_fit(result, out / "fit.npz")
    predict_path = predict_path or cfg.test_data
    if predict_path:
        test, _ = ingest(predict_path, _predict_schema(result), allow_empty=True, strict=False)
        _predict_to(result, test, out / "predictions.csv")
    _dump({
        "config": cfg.to_dict(), "seed": cfg.mcmc.seed, "versions": _versions(),
        "command": sys.argv, "fit_seconds": fit_seconds,
        "wall_clock_seconds": time.time() - started,
        "started": time.strftime("%Y-%m-%dT%H:%M:%S%z", time.localtime(started)),
        "artifacts": sorted(str(p.relative_to(out)) for p in out.rglob("*") if p.is_file()),
    }, out / "manifest.json")
    return out


def _predict_schema(fit):
    return dict(fit.meta.get("schema", {}))


def _predict_to(fit, data, path):
    try:
        write_predictions(fit, data, path)
    except DesignError as e:
        raise CliError("design", str(e)) from None
    except ValueError as e:
        raise CliError("predict", str(e)) from None


def _load(path):
    try:
        return load_fit(path)
    except OSError as e:
        raise CliError("archive", f"cannot read {path}: {e.strerror}") from None
    except ValueError as e:
        raise CliError("archive", str(e)) from None


def run_predict(archive, data_path, out_path):
    fit = _load(archive)
    schema = _predict_schema(fit)
    data, _ = ingest(data_path, schema, allow_empty=True, strict=False)
    _predict_to(fit, data, out_path)


def run_summarize(archive, threshold=0.5, as_json=False):
    fit = _load(archive)
    if as_json:
        return json.dumps(summary_dict(fit, threshold), indent=2, default=_json_default) + "\n"
    return format_summary(fit, threshold)


def build_parser():
    p = argparse.ArgumentParser(prog="ssgam", description="Spike-and-slab additive models.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    f = sub.add_parser("fit", help="fit a model described by a YAML config")
    f.add_argument("--config", required=True)
    f.add_argument("--out", help="output directory (overrides the config)")
    f.add_argument("--seed", type=int, help="base seed (overrides the config)")
    f.add_argument("--separate-effects", action="store_true",
                   help="write one effect file per term instead of cumulative effects")
    f.add_argument("--predict", metavar="CSV", help="also predict for these rows")
    pr = sub.add_parser("predict", help="predict from a saved fit")
    pr.add_argument("--fit", required=True, help="fit.npz archive")
    pr.add_argument("--data", required=True, help="CSV with the covariates")
    pr.add_argument("--out", default="predictions.csv")
    s = sub.add_parser("summarize", help="print the summary of a saved fit")
    s.add_argument("--fit", required=True, help="fit.npz archive")
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--json", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "fit":
            cfg = load_config(args.config, args.seed, args.out)
            out = run_fit(cfg, args.separate_effects, args.predict)
            print(f"wrote {out}")
        elif args.command == "predict":
            run_predict(args.fit, args.data, args.out)
            print(f"wrote {args.out}")
        else:
            sys.stdout.write(run_summarize(args.fit, args.threshold, args.json))
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # anything unexpected still exits nonzero
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
