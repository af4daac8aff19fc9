"""Effect of the per-term rescale step on prior reproduction and inclusion.

Part 1 runs the sampler with the likelihood switched off and reports KS
distances of tau2 and w draws from their priors, with and without rescaling.
Part 2 fits a one-term Gaussian model y = c * x + e and compares the
posterior inclusion probability with and without rescaling.

Usage: python3 scripts/rescale_study.py
"""
import numpy as np
import pandas as pd
from scipy import stats

from ssgam import HyperParams, McmcConfig, fit, inclusion_probabilities

TOY = "y ~ lin(a, degree=3) + lin(b, degree=2)"


def toy_data(n=20, seed=0):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=n), rng.normal(size=n)
    return pd.DataFrame({"y": a - 0.5 * b + rng.normal(size=n), "a": a, "b": b})


def prior_ks(rescale, n_draws=100_000):
    hyper = HyperParams()
    mcmc = McmcConfig(n_chains=1, chain_length=n_draws, burnin=100, thin=1, seed=3)
    res = fit(TOY, toy_data(), mcmc=mcmc, likelihood=False, rescale=rescale)
    ch = res.chains[0]
    tau2 = stats.invgamma(hyper.a_tau, scale=hyper.b_tau).cdf
    w = stats.beta(hyper.a_w, hyper.b_w).cdf
    return stats.kstest(ch.tau2[:, 0], tau2).statistic, stats.kstest(ch.w, w).statistic


def one_term(coef, rescale, seed=7, n=100):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=n)
    data = pd.DataFrame({"y": coef * x + rng.normal(size=n), "x": x})
    mcmc = McmcConfig(n_chains=4, chain_length=8000, burnin=500, thin=1, seed=seed, n_jobs=4)
    return inclusion_probabilities(fit("y ~ lin(x)", data, mcmc=mcmc, rescale=rescale))[0]


def main():
    print("prior reproduction (likelihood off), KS distance to the prior")
    for rescale in (True, False):
        ks_tau2, ks_w = prior_ks(rescale)
        print(f"  rescale={str(rescale):5s} KS(tau2)={ks_tau2:.4f} KS(w)={ks_w:.4f}")
    print("one-term Gaussian model, P(gamma=1)")
    for coef in (0.0, 0.1, 0.2):
        on, off = one_term(coef, True), one_term(coef, False)
        print(f"  coef={coef:.1f} rescale on {on:.3f}  rescale off {off:.3f}")


if __name__ == "__main__":
    main()
