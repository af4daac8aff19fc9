"""Exponential-family responses: Gaussian (identity), binomial (logit), Poisson (log)."""
from __future__ import annotations

import numpy as np
from scipy.special import expit, gammaln

__all__ = ["Family", "Gaussian", "Binomial", "Poisson", "get_family"]

W_MIN, W_MAX = 1e-10, 1e10


class Family:
    name = "family"
    has_dispersion = False

    def inverse_link(self, eta):
        raise NotImplementedError

    def loglik_obs(self, y, eta, phi=1.0):
        raise NotImplementedError

    def loglik(self, y, eta, phi=1.0) -> float:
        return float(np.sum(self.loglik_obs(y, eta, phi)))

    def deviance(self, y, eta, phi=1.0) -> float:
        return -2.0 * self.loglik(y, eta, phi)

    def working(self, y, eta, phi=1.0):
        """IWLS weights and working response at ``eta``."""
        raise NotImplementedError

    def validate(self, y):
        y = np.asarray(y, dtype=float)
        if np.any(~np.isfinite(y)):
            raise ValueError("response contains missing or non-finite values")
        return y

    def null_eta(self, y):
        """Intercept-only maximum-likelihood linear predictor."""
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}()"

    def __eq__(self, other):
        return type(self) is type(other)

    def __hash__(self):
        return hash(self.name)


class Gaussian(Family):
    name = "gaussian"
    has_dispersion = True

    def inverse_link(self, eta):
        return np.asarray(eta, dtype=float)

    def loglik_obs(self, y, eta, phi=1.0):
        r = y - eta
        return -0.5 * (np.log(2 * np.pi * phi) + r * r / phi)

    def working(self, y, eta, phi=1.0):
        return np.full(len(y), 1.0 / phi), np.asarray(y, dtype=float)

    def null_eta(self, y):
        return float(np.mean(y))


class Binomial(Family):
    """Single-trial binomial; responses must lie in [0, 1]."""

    name = "binomial"

    def inverse_link(self, eta):
        return expit(eta)

    def loglik_obs(self, y, eta, phi=1.0):
        # y*eta - log(1 + exp(eta)), overflow safe
        return y * eta - np.logaddexp(0.0, eta)

    def working(self, y, eta, phi=1.0):
        p = expit(eta)
        w = np.clip(p * (1 - p), W_MIN, W_MAX)
        return w, eta + (y - p) / w

    def validate(self, y):
        y = super().validate(y)
        if np.any((y < 0) | (y > 1)):
            raise ValueError("binomial models need responses between 0 and 1")
        return y

    def null_eta(self, y):
        p = np.clip(np.mean(y), 1e-10, 1 - 1e-10)
        return float(np.log(p / (1 - p)))


class Poisson(Family):
    name = "poisson"

    def inverse_link(self, eta):
        return np.exp(eta)

    def loglik_obs(self, y, eta, phi=1.0):
        return y * eta - np.exp(eta) - gammaln(y + 1)

    def working(self, y, eta, phi=1.0):
        mu = np.exp(eta)
        w = np.clip(mu, W_MIN, W_MAX)
        return w, eta + (y - mu) / w

    def validate(self, y):
        y = super().validate(y)
        if np.any(y < 0) or np.any(y != np.round(y)):
            raise ValueError("poisson models need nonnegative integer responses")
        return y

    def null_eta(self, y):
        return float(np.log(max(np.mean(y), 1e-10)))


_FAMILIES = {"gaussian": Gaussian, "binomial": Binomial, "poisson": Poisson}


def get_family(family) -> Family:
    if isinstance(family, Family):
        return family
    try:
        return _FAMILIES[str(family).lower()]()
    except KeyError:
        raise ValueError(f"unknown family {family!r}; expected one of {sorted(_FAMILIES)}") from None
