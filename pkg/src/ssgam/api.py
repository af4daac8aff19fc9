"""One-call model fitting plus saving and loading of fitted models."""
from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass, fields

import numpy as np
import pandas as pd

from .design import FullDesign, build_full_design
from .family import get_family
from .formula import model_spec, render_formula
from .sampler import ChainSamples, HyperParams, McmcConfig, Sampler
from .summary import FitResult

__all__ = ["DesignConfig", "infer_schema", "fit", "save_fit", "load_fit", "ARCHIVE_VERSION"]

ARCHIVE_FORMAT = "ssgam-fit"
ARCHIVE_VERSION = 1


@dataclass(frozen=True)
class DesignConfig:
    decomposition: str = "orthogonal"
    mass: float = 0.999
    solver: str = "dense"
    scaling: str = "total"


def infer_schema(data, overrides=None) -> dict[str, str]:
    """Column kinds: ``"factor"`` for non-numeric or categorical columns, else ``"numeric"``."""
    overrides = dict(overrides or {})
    schema = {}
    for name in data.columns if hasattr(data, "columns") else data:
        col = data[name]
        dtype = getattr(col, "dtype", np.asarray(col).dtype)
        numeric = pd.api.types.is_numeric_dtype(dtype) and not pd.api.types.is_bool_dtype(dtype)
        schema[name] = "numeric" if numeric else "factor"
    for name, kind in overrides.items():
        if kind not in ("numeric", "factor"):
            raise ValueError(f"schema kind for {name!r} must be 'numeric' or 'factor'")
        schema[name] = kind
    return schema


def _as_factors(data, schema):
    """Cast declared factor columns to strings so numeric codes act as levels."""
    if not hasattr(data, "columns"):
        data = pd.DataFrame(dict(data))
    out = data.copy()
    for name, kind in schema.items():
        if kind == "factor" and name in out and not isinstance(out[name].dtype, pd.CategoricalDtype):
            out[name] = out[name].astype(str)
    return out


def fit(formula: str, data, family: str = "gaussian", hyper: HyperParams | None = None,
        mcmc: McmcConfig | None = None, design: DesignConfig | None = None,
        schema=None, matrices=None, offset=None, likelihood: bool = True,
        rescale: bool = True) -> FitResult:
    """Parse ``formula``, build the design on ``data`` and run the sampler."""
    hyper = hyper or HyperParams()
    mcmc = mcmc or McmcConfig()
    design = design or DesignConfig()
    schema = infer_schema(data, schema)
    spec = model_spec(formula, schema, family)
    frame = _as_factors(data, schema)
    des = build_full_design(spec, frame, design.decomposition, design.mass, design.solver,
                            matrices, offset, design.scaling)
    y = np.asarray(frame[spec.response], dtype=float)
    sampler = Sampler(des, y, family, hyper, mcmc, likelihood=likelihood, rescale=rescale)
    chains = sampler.run()
    meta = {"formula": formula, "schema": schema, "design": asdict(design),
            "likelihood": likelihood, "rescale": rescale}
    return FitResult(chains, des, y, get_family(family), hyper, mcmc, spec, meta)


_CHAIN_FIELDS = [f.name for f in fields(ChainSamples) if f.name not in ("chain", "accept")]


def save_fit(fit: FitResult, path) -> None:
    """Write a fitted model to a single ``.npz`` archive."""
    meta = {
        "format": ARCHIVE_FORMAT, "version": ARCHIVE_VERSION,
        "family": fit.family.name, "hyper": asdict(fit.hyper), "mcmc": asdict(fit.config),
        "formula": render_formula(fit.spec) if fit.spec is not None else None,
        "meta": fit.meta, "design": fit.design.to_dict(with_matrix=True),
        "accept": [c.accept for c in fit.chains],
    }
    arrays = {"y": fit.y, "meta": np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)}
    for k, c in enumerate(fit.chains):
        for name in _CHAIN_FIELDS:
            arrays[f"c{k}.{name}"] = getattr(c, name)
    with open(path, "wb") as fh:
        np.savez_compressed(fh, **arrays)


def load_fit(path) -> FitResult:
    with open(path, "rb") as fh:
        buf = io.BytesIO(fh.read())
    try:
        z = np.load(buf, allow_pickle=False)
        meta = json.loads(bytes(z["meta"]).decode())
    except Exception as e:
        raise ValueError(f"{path}: not a fit archive ({e})") from None
    if meta.get("format") != ARCHIVE_FORMAT:
        raise ValueError(f"{path}: not a fit archive")
    if meta.get("version") != ARCHIVE_VERSION:
        raise ValueError(f"{path}: archive version {meta.get('version')} is not supported "
                         f"(expected {ARCHIVE_VERSION})")
    design = FullDesign.from_dict(meta["design"])
    chains = []
    for k, acc in enumerate(meta["accept"]):
        arrs = {name: z[f"c{k}.{name}"] for name in _CHAIN_FIELDS}
        chains.append(ChainSamples(chain=k, accept=acc, **arrs))
    spec = None
    inner = meta["meta"]
    if meta["formula"] is not None:
        spec = model_spec(meta["formula"], inner["schema"], meta["family"])
    return FitResult(chains, design, z["y"], get_family(meta["family"]),
                     HyperParams(**meta["hyper"]), McmcConfig(**meta["mcmc"]), spec, inner)
