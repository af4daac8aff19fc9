"""Posterior summaries: inclusion probabilities, term importance, model table,
predictions, deviances and Gelman-Rubin diagnostics."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .design import FullDesign
from .family import Family, get_family
from .formula import ModelSpec, render_formula
from .sampler import ChainSamples, HyperParams, McmcConfig

__all__ = [
    "FitResult",
    "TermSummary",
    "Prediction",
    "inclusion_probabilities",
    "term_importance",
    "term_summaries",
    "model_table",
    "predict",
    "effect_summary",
    "deviance_summary",
    "null_deviance",
    "potential_scale_reduction",
    "gelman_rubin",
    "summary_dict",
    "format_summary",
    "STAR_THRESHOLDS",
]

STAR_THRESHOLDS = (0.25, 0.5, 0.9)


@dataclass
class FitResult:
    """Saved draws of every chain together with the model they belong to."""

    chains: list[ChainSamples]
    design: FullDesign
    y: np.ndarray
    family: Family
    hyper: HyperParams
    config: McmcConfig
    spec: ModelSpec | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.family = get_family(self.family)
        lengths = {len(c.w) for c in self.chains}
        if len(lengths) > 1:
            raise ValueError("all chains must have the same number of saved draws")

    @property
    def n_chains(self) -> int:
        return len(self.chains)

    @property
    def n_saved(self) -> int:
        return sum(len(c.w) for c in self.chains)

    @property
    def labels(self) -> list[str]:
        return self.design.labels

    def draws(self, name: str) -> np.ndarray:
        """Pooled draws of one state component, chains stacked along axis 0."""
        return np.concatenate([getattr(c, name) for c in self.chains], axis=0)

    def beta_draws(self) -> np.ndarray:
        term_of = np.repeat(np.arange(len(self.design.dims)), self.design.dims)
        return self.draws("xi") * self.draws("alpha")[:, term_of]

    @property
    def acceptance(self) -> dict:
        keys = sorted({k for c in self.chains for k in c.accept})
        return {k: float(np.mean([c.accept[k] for c in self.chains if k in c.accept]))
                for k in keys}


@dataclass
class TermSummary:
    label: str
    p_include: float | None
    pi: float | None
    dim: int

    @property
    def stars(self) -> str:
        if self.p_include is None:
            return ""
        return "*" * sum(self.p_include > t for t in STAR_THRESHOLDS)


def inclusion_probabilities(fit: FitResult) -> np.ndarray:
    """Fraction of saved draws with ``gamma_j = 1``, pooled over chains."""
    g = fit.draws("gamma")
    return np.mean(g == 1.0, axis=0)


def _contributions(fit: FitResult):
    """Posterior-mean contributions to the linear predictor, keyed by term label."""
    beta = fit.beta_draws().mean(axis=0)
    beta_u = fit.draws("beta_u").mean(axis=0)
    out = {}
    col = 0
    for t in fit.design.unpenalized:
        out[t.label] = t.B @ beta_u[col:col + t.dim]
        col += t.dim
    col = 0
    for b in fit.design.blocks:
        out[b.label] = b.B @ beta[col:col + b.dim]
        col += b.dim
    return out


def term_importance(fit: FitResult) -> dict[str, float]:
    """``pi_j = eta_j' eta_{-1} / eta_{-1}' eta_{-1}`` for every non-intercept term.

    ``eta_{-1}`` is the posterior-mean linear predictor without the intercept and
    offset; unpenalized columns other than the intercept are part of it.
    """
    contrib = _contributions(fit)
    contrib.pop("u", None)
    total = np.sum(list(contrib.values()), axis=0) if contrib else np.zeros(fit.design.n)
    denom = float(total @ total)
    if denom == 0:
        return {k: float("nan") for k in contrib}
    return {k: float(v @ total / denom) for k, v in contrib.items()}


def term_summaries(fit: FitResult) -> list[TermSummary]:
    pi = term_importance(fit)
    inc = inclusion_probabilities(fit)
    rows = [TermSummary(t.label, None, pi.get(t.label), t.dim) for t in fit.design.unpenalized]
    rows[0].pi = None
    for b, p in zip(fit.design.blocks, inc):
        rows.append(TermSummary(b.label, float(p), pi[b.label], b.dim))
    return rows


def model_table(fit: FitResult, threshold: float = 0.5, max_models: int | None = None):
    """Posterior frequencies of inclusion configurations.

    A term counts as included in a draw when its conditional inclusion
    probability ``P(gamma_j = 1 | .)`` in that draw exceeds ``threshold``.
    Returns rows ``{"terms", "included", "prob", "cumulative"}`` sorted by
    decreasing probability.
    """
    pinc = fit.draws("p_include") > threshold
    uniq, counts = np.unique(pinc, axis=0, return_counts=True)
    order = np.argsort(-counts, kind="stable")[:max_models]
    total = pinc.shape[0]
    rows = []
    cum = 0
    for k in order:
        cum += counts[k]
        incl = uniq[k]
        rows.append({
            "terms": [lab for lab, i in zip(fit.labels, incl) if i],
            "included": [bool(i) for i in incl],
            "prob": counts[k] / total,
            "cumulative": cum / total,
        })
    return rows


@dataclass
class Prediction:
    """Posterior summaries of the linear predictor and the mean response."""

    eta_mean: np.ndarray
    eta_lower: np.ndarray
    eta_upper: np.ndarray
    mean: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    terms: dict = field(default_factory=dict)
    quantiles: tuple = (0.1, 0.9)

    def to_frame(self):
        import pandas as pd
        lo, hi = (f"q{int(round(100 * q))}" for q in self.quantiles)
        return pd.DataFrame({
            "eta": self.eta_mean, f"eta_{lo}": self.eta_lower, f"eta_{hi}": self.eta_upper,
            "fit": self.mean, f"fit_{lo}": self.lower, f"fit_{hi}": self.upper,
        })


def _term_draws(fit: FitResult, X_u, blocks, draws=None):
    beta = fit.beta_draws() if draws is None else draws[0]
    beta_u = fit.draws("beta_u") if draws is None else draws[1]
    out = {}
    col = 0
    for t in fit.design.unpenalized:
        out[t.label] = X_u[:, col:col + t.dim] @ beta_u[:, col:col + t.dim].T
        col += t.dim
    col = 0
    for b, B in zip(fit.design.blocks, blocks):
        out[b.label] = B @ beta[:, col:col + b.dim].T
        col += b.dim
    return out


def predict(fit: FitResult, newdata=None, quantiles=(0.1, 0.9), offset=None,
            terms: bool = False) -> Prediction:
    """Posterior means and equal-tailed bands of ``eta`` and ``h(eta)`` on new data.

    ``newdata=None`` reuses the training design.  With ``terms=True`` the
    per-term contributions (mean, lower, upper) are included.
    """
    if newdata is None:
        X_u, blocks = fit.design.X_u, [b.B for b in fit.design.blocks]
        off = fit.design.offset if offset is None else np.asarray(offset, float)
    else:
        X_u, blocks = fit.design.evaluate(newdata)
        off = np.zeros(X_u.shape[0]) if offset is None else np.asarray(offset, float)
    if off.shape != (X_u.shape[0],):
        raise ValueError("offset must have one entry per row of newdata")
    beta, beta_u = fit.beta_draws(), fit.draws("beta_u")
    Xp = np.hstack(blocks) if blocks else np.zeros((X_u.shape[0], 0))
    eta = off[:, None] + X_u @ beta_u.T + Xp @ beta.T
    mu = fit.family.inverse_link(eta)
    lo, hi = quantiles
    pred = Prediction(
        eta_mean=eta.mean(axis=1),
        eta_lower=np.quantile(eta, lo, axis=1), eta_upper=np.quantile(eta, hi, axis=1),
        mean=mu.mean(axis=1),
        lower=np.quantile(mu, lo, axis=1), upper=np.quantile(mu, hi, axis=1),
        quantiles=(lo, hi))
    if terms:
        for lab, e in _term_draws(fit, X_u, blocks, (beta, beta_u)).items():
            pred.terms[lab] = (e.mean(axis=1), np.quantile(e, lo, axis=1),
                               np.quantile(e, hi, axis=1))
    return pred


def effect_summary(fit: FitResult, newdata, labels, quantiles=(0.1, 0.9),
                   chunk: int = 1000) -> dict:
    """Posterior mean and equal-tailed band of the summed contribution of ``labels``.

    ``labels`` may name penalized blocks and unpenalized terms; rows of
    ``newdata`` are processed in chunks to bound memory.
    """
    beta, beta_u = fit.beta_draws(), fit.draws("beta_u")
    cols = {}
    start = 0
    for t in fit.design.unpenalized:
        cols[t.label] = (beta_u, slice(start, start + t.dim))
        start += t.dim
    start = 0
    for b in fit.design.blocks:
        cols[b.label] = (beta, slice(start, start + b.dim))
        start += b.dim
    unknown = [lab for lab in labels if lab not in cols]
    if unknown:
        raise KeyError(f"unknown term(s): {', '.join(unknown)}")
    n = len(newdata)
    lo, hi = quantiles
    mean, lower, upper = np.empty(n), np.empty(n), np.empty(n)
    for s0 in range(0, n, chunk):
        rows = newdata.iloc[s0:s0 + chunk] if hasattr(newdata, "iloc") else newdata
        mats = fit.design.evaluate_terms(rows, labels)
        eta = 0.0
        for lab in labels:
            draws, sl = cols[lab]
            eta = eta + mats[lab] @ draws[:, sl].T
        eta = np.broadcast_to(eta, (mats[labels[0]].shape[0], draws.shape[0]))
        mean[s0:s0 + chunk] = eta.mean(axis=1)
        lower[s0:s0 + chunk] = np.quantile(eta, lo, axis=1)
        upper[s0:s0 + chunk] = np.quantile(eta, hi, axis=1)
    return {"mean": mean, "lower": lower, "upper": upper, "quantiles": (lo, hi)}


def null_deviance(y, family, offset=None) -> float:
    """Deviance of the intercept-only maximum-likelihood fit."""
    fam = get_family(family)
    y = np.asarray(y, dtype=float)
    if offset is not None and np.any(offset != 0):
        raise NotImplementedError("null deviance with a non-zero offset")
    eta = np.full(len(y), fam.null_eta(y))
    phi = float(np.mean((y - eta) ** 2)) if fam.has_dispersion else 1.0
    return fam.deviance(y, eta, phi)


def deviance_summary(fit: FitResult, y=None) -> tuple[float, float]:
    """(null deviance, mean posterior deviance)."""
    y = fit.y if y is None else np.asarray(y, dtype=float)
    return null_deviance(y, fit.family), float(np.mean(fit.draws("deviance")))


def potential_scale_reduction(x) -> float:
    """R-hat for an (n_chains, n_draws) array.

    Uses ``sqrt((W + B/n) / W)`` with ``W`` the mean within-chain variance and
    ``B/n`` the variance of the chain means, so duplicated chains give exactly 1.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("R-hat needs at least two chains")
    if x.shape[1] < 2:
        raise ValueError("R-hat needs at least two draws per chain")
    W = float(np.mean(np.var(x, axis=1, ddof=1)))
    B_n = float(np.var(np.mean(x, axis=1), ddof=1))
    if W == 0:
        return 1.0 if B_n == 0 else float("inf")
    return float(np.sqrt((W + B_n) / W))


def gelman_rubin(fit: FitResult) -> dict[str, float] | None:
    """R-hat for every scalar parameter; ``None`` for a single chain."""
    if fit.n_chains < 2:
        return None
    out = {}

    def add(name, arr):
        if arr.shape[1] >= 2:
            out[name] = potential_scale_reduction(arr)

    stack = lambda attr: np.stack([getattr(c, attr) for c in fit.chains])  # noqa: E731
    alpha = stack("alpha")
    # alpha is identified only up to sign (alpha * xi is invariant), so use |alpha|
    for j, lab in enumerate(fit.labels):
        add(f"abs_alpha.{lab}", np.abs(alpha[:, :, j]))
    bu = stack("beta_u")
    for k, lab in enumerate(fit.design.u_labels):
        add(f"beta_u.{lab}", bu[:, :, k])
    term_of = np.repeat(np.arange(len(fit.design.dims)), fit.design.dims)
    beta = stack("xi") * alpha[:, :, term_of]
    names = [f"{lab}.{i + 1}" for lab, d in zip(fit.labels, fit.design.dims) for i in range(d)]
    for k, name in enumerate(names):
        add(f"beta.{name}", beta[:, :, k])
    add("w", stack("w"))
    if fit.family.has_dispersion:
        add("phi", stack("phi"))
    add("deviance", stack("deviance"))
    return out


# ---------------------------------------------------------------------------
# reporting

def summary_dict(fit: FitResult, threshold: float = 0.5, max_models: int = 8) -> dict:
    null, mean_dev = deviance_summary(fit)
    cfg = fit.config
    rhat = gelman_rubin(fit)
    return {
        "family": fit.family.name,
        "formula": render_formula(fit.spec) if fit.spec is not None else None,
        "n": int(fit.design.n),
        "n_coefficients": int(fit.design.q + fit.design.X_u.shape[1]),
        "n_terms": len(fit.design.unpenalized) + len(fit.design.blocks),
        "prior": asdict(fit.hyper),
        "mcmc": {
            "n_saved": fit.n_saved, "n_chains": fit.n_chains,
            "chain_length": cfg.chain_length, "burnin": cfg.burnin, "thin": cfg.thin,
            "acceptance": fit.acceptance if fit.family.name != "gaussian" else None,
        },
        "null_deviance": null,
        "mean_posterior_deviance": mean_dev,
        "terms": [{"label": t.label, "p_include": t.p_include, "pi": t.pi, "dim": t.dim,
                   "stars": t.stars} for t in term_summaries(fit)],
        "threshold": threshold,
        "models": model_table(fit, threshold, max_models),
        "max_rhat": max(rhat.values()) if rhat else None,
    }


def _fmt(v, spec):
    return "NA" if v is None else format(v, spec)


def format_summary(fit: FitResult, threshold: float = 0.5, max_models: int = 8) -> str:
    d = summary_dict(fit, threshold, max_models)
    fam = d["family"].capitalize()
    lines = [f"Spike-and-slab additive model for {fam} data", "", "Model:"]
    if d["formula"]:
        lines.append(d["formula"])
    lines.append(f"{d['n']} observations; {d['n_coefficients']} coefficients in "
                 f"{d['n_terms']} model terms.")
    lines += ["", "Prior:"]
    prior = d["prior"]
    keys = [k for k in prior if fit.family.has_dispersion or not k.endswith("phi")]
    lines.append("  ".join(f"{k}={prior[k]:.1e}" for k in keys))
    m = d["mcmc"]
    lines += ["", "MCMC:",
              f"Saved {m['n_saved']} samples from {m['n_chains']} chain(s), each ran "
              f"{m['chain_length']} iterations after a burn-in of {m['burnin']}; "
              f"Thinning: {m['thin']}"]
    if m["acceptance"]:
        acc = m["acceptance"]
        lines.append("P-IWLS acceptance rates: " + "; ".join(
            f"{acc[k]:.2f} for {k}" for k in ("alpha", "xi") if k in acc) + ".")
    lines += ["", f"Null deviance:           {d['null_deviance']:.0f}",
              f"Mean posterior deviance: {d['mean_posterior_deviance']:.0f}", "",
              "Marginal posterior inclusion probabilities and term importance:"]
    w = max(len(t["label"]) for t in d["terms"]) + 2
    lines.append(f"{'':{w}}{'P(gamma=1)':>11}{'pi':>8}{'dim':>5}")
    for t in d["terms"]:
        lines.append(f"{t['label']:<{w}}{_fmt(t['p_include'], '.3f'):>11}"
                     f"{_fmt(t['pi'], '.3f'):>8}{t['dim']:>5} {t['stars']}")
    lines.append("*:P(gamma=1)>.25 **:P(gamma=1)>.5 ***:P(gamma=1)>.9")
    lines += ["", f"Posterior model probabilities (inclusion threshold = {threshold}):"]
    models = d["models"]
    if models:
        cols = [f"{k + 1}" for k in range(len(models))]
        lines.append(f"{'':{w}}" + "".join(f"{c:>7}" for c in cols))
        lines.append(f"{'prob.:':<{w}}" + "".join(f"{r['prob']:>7.3f}" for r in models))
        for j, lab in enumerate(fit.labels):
            lines.append(f"{lab:<{w}}" + "".join(
                f"{'x' if r['included'][j] else '':>7}" for r in models))
        lines.append(f"{'cumulative:':<{w}}" + "".join(f"{r['cumulative']:>7.3f}" for r in models))
    if d["max_rhat"] is not None:
        lines += ["", f"Largest Gelman-Rubin R-hat: {d['max_rhat']:.3f}"]
    return "\n".join(lines) + "\n"


def summary_json(fit: FitResult, threshold: float = 0.5, max_models: int = 8) -> str:
    return json.dumps(summary_dict(fit, threshold, max_models), indent=2)
