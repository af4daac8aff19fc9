"""Synthetic datasets used by the examples and the acceptance suite."""
from __future__ import annotations

import numpy as np
import pandas as pd
from scipy.stats import beta as beta_dist

__all__ = ["additive_benchmark", "diabetes_like", "SIMULATION_FORMULA", "DIABETES_FORMULA"]

SIMULATION_FORMULA = ("y ~ (sm1 + sm2 + f + lin1)^2 + lin2 + lin3 + noise1 + noise2"
                      " + noise3 + noise4")
DIABETES_FORMULA = "diabetes ~ pregnant + glucose + pressure + mass + pedigree + age"


def _factor(codes, n_levels):
    return pd.Categorical.from_codes(codes, categories=[str(k + 1) for k in range(n_levels)])


def additive_benchmark(n: int = 200, snr: float = 3.0, seed: int = 0) -> pd.DataFrame:
    """Gaussian additive benchmark with smooth, varying-coefficient, linear and noise effects.

    ``eta = f(sm1) + f(sm2, f) + 0.1 lin1 + 0.2 lin2 + 0.3 lin3`` and
    ``y = eta + sd(eta)/snr * t_5`` noise.  The columns ``noise1..noise4`` have no effect;
    ``noise1`` is correlated with ``sm1``.
    """
    rng = np.random.default_rng(seed)
    sm1 = rng.uniform(size=n)
    fsm1 = beta_dist.pdf(sm1, 7, 3) / 2
    sm2 = rng.uniform(size=n)
    # three contiguous level blocks, recycled when n is not a multiple of 3
    fcodes = np.repeat(np.arange(3), int(np.ceil(n / 3)))[:n]
    ff = (fcodes + 1) / 2
    fsm2f = ff + ff * sm2 + ((fcodes == 0) * -beta_dist.pdf(sm2, 6, 4)
                             + (fcodes == 1) * beta_dist.pdf(sm2, 6, 9)
                             + (fcodes == 2) * beta_dist.pdf(sm2, 9, 6)) / 2
    lin = rng.standard_normal((n, 3))
    noise1 = sm1 + rng.standard_normal(n)
    noise2 = rng.uniform(size=n)
    noise3 = rng.uniform(size=n)
    noise4 = rng.permutation(np.arange(n) * 4 // n)
    eta = fsm1 + fsm2f + lin @ np.array([0.1, 0.2, 0.3])
    y = eta + np.std(eta, ddof=1) / snr * rng.standard_t(5, size=n)
    return pd.DataFrame({
        "y": y, "sm1": sm1, "sm2": sm2, "f": _factor(fcodes, 3),
        "lin1": lin[:, 0], "lin2": lin[:, 1], "lin3": lin[:, 2],
        "noise1": noise1, "noise2": noise2, "noise3": noise3, "noise4": _factor(noise4, 4),
    })


def diabetes_like(n: int = 524, seed: int = 0) -> pd.DataFrame:
    """Logistic simulation with covariates named after a classic diabetes screening study.

    Glucose and body mass have strong increasing effects, age a concave one; the
    remaining covariates have weak or no effect.
    """
    rng = np.random.default_rng(seed)
    pregnant = rng.poisson(3.5, size=n).astype(float)
    age = np.clip(21 + rng.gamma(2.0, 6.0, size=n) + 0.8 * pregnant, 21, 81)
    glucose = np.clip(rng.normal(122, 30, size=n), 55, 199)
    pressure = np.clip(rng.normal(72, 12, size=n), 24, 122)
    mass = np.clip(rng.normal(33, 7, size=n), 18, 67)
    pedigree = np.round(rng.gamma(2.0, 0.25, size=n), 3)
    age_z = (age - 21) / 20
    eta = (-0.8 + 0.035 * (glucose - 122) + 0.09 * (mass - 33)
           + 2.2 * age_z * np.exp(-0.7 * age_z) - 1.0 + 0.3 * (pedigree - 0.5))
    p = 1 / (1 + np.exp(-eta))
    diabetes = (rng.uniform(size=n) < p).astype(float)
    return pd.DataFrame({
        "diabetes": diabetes, "pregnant": pregnant, "glucose": np.round(glucose),
        "pressure": np.round(pressure), "mass": np.round(mass, 1), "pedigree": pedigree,
        "age": np.round(age),
    })
