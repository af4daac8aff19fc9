"""Simulation recovery under the two design scalings.

Fits the additive benchmark for several seeds with blocks scaled to Frobenius
norm 0.5 ("total", the default) and to 0.5 * sqrt(n) ("per_obs"), then prints
the smallest inclusion probability among the true terms, the largest among
noise terms, and whether the top model contains lin(lin1).

Usage: python3 scripts/scaling_study.py [N_SEEDS]
"""
import sys
import time

from ssgam import DesignConfig, McmcConfig, fit, inclusion_probabilities, model_table
from ssgam.datasets import SIMULATION_FORMULA, additive_benchmark

TRUE_TERMS = ["lin(sm1)", "sm(sm1)", "lin(sm2)", "sm(sm2)", "fct(f)", "lin(lin2)", "lin(lin3)",
              "lin(sm2):fct(f)", "sm(sm2):fct(f)"]
NOISE = {"noise1", "noise2", "noise3", "noise4"}
SCHEMA = {"f": "factor", "noise4": "factor"}


def recovery(seed, scaling):
    data = additive_benchmark(n=200, snr=3, seed=seed)
    mcmc = McmcConfig(n_chains=3, chain_length=2500, burnin=100, thin=5, seed=seed + 1, n_jobs=3)
    res = fit(SIMULATION_FORMULA, data, mcmc=mcmc, schema=SCHEMA,
              design=DesignConfig(scaling=scaling))
    inc = dict(zip(res.labels, inclusion_probabilities(res)))
    noise = max(v for k, v in inc.items() if NOISE & set(res.design.block(k).covariates))
    top_has_lin1 = "lin(lin1)" in model_table(res)[0]["terms"]
    return min(inc[t] for t in TRUE_TERMS), noise, inc["lin(lin1)"], top_has_lin1


def main(n_seeds=5):
    print(f"{'scaling':8s} {'seed':>4s} {'true min':>9s} {'noise max':>9s} "
          f"{'lin(lin1)':>9s} {'top has lin1':>12s} {'secs':>6s}")
    for scaling in ("total", "per_obs"):
        for seed in range(int(n_seeds)):
            t0 = time.perf_counter()
            tmin, nmax, lin1, top = recovery(seed, scaling)
            print(f"{scaling:8s} {seed:4d} {tmin:9.3f} {nmax:9.3f} {lin1:9.3f} {str(top):>12s} "
                  f"{time.perf_counter() - t0:6.1f}")


if __name__ == "__main__":
    main(*sys.argv[1:])
