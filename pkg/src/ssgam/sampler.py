"""Blockwise MCMC for the parameter-expanded NMIG spike-and-slab prior.

Each penalized term ``j`` has coefficients ``beta_j = alpha_j * xi_j``.  One
sweep updates, in order: the alpha blocks (and the unpenalized coefficients),
the sign means ``m``, the xi blocks, a per-term rescale of ``(xi_j, alpha_j)``,
then ``tau2``, ``gamma``, ``w`` and, for Gaussian responses, ``phi``.
Gaussian responses use exact full conditionals; binomial and Poisson
responses use P-IWLS Metropolis-Hastings proposals for the coefficient blocks.
"""
from __future__ import annotations

import copy
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.special import expit

from .design import FullDesign
from .family import Family, get_family

__all__ = [
    "HyperParams",
    "McmcConfig",
    "ChainState",
    "SamplerError",
    "Sampler",
    "ChainSamples",
    "update_m",
    "rescale",
    "update_tau2",
    "update_gamma",
    "update_w",
    "update_phi",
    "gamma_inclusion_prob",
    "run_chains",
]

BETA_U_PRIOR_VAR = 1e6
INIT_HYPERVAR = 100.0
FISHER_STEPS = 5


@dataclass(frozen=True)
class HyperParams:
    a_tau: float = 5.0
    b_tau: float = 25.0
    v0: float = 2.5e-4
    a_w: float = 1.0
    b_w: float = 1.0
    a_phi: float = 1e-4
    b_phi: float = 1e-4

    def __post_init__(self):
        for k, v in self.__dict__.items():
            if not v > 0:
                raise ValueError(f"hyperparameter {k} must be positive, got {v}")
        if not self.v0 < 1:
            raise ValueError("v0 must be < 1")


@dataclass(frozen=True)
class McmcConfig:
    """Chain settings.

    ``chain_length`` counts iterations after burn-in; each chain saves
    ``chain_length // thin`` draws.
    """

    n_chains: int = 3
    chain_length: int = 2500
    burnin: int = 100
    thin: int = 5
    block_alpha: int = 15
    block_xi: int = 15
    seed: int = 1
    n_jobs: int = 1

    def __post_init__(self):
        if self.n_chains < 1:
            raise ValueError("n_chains must be >= 1")
        if self.burnin < 0:
            raise ValueError("burnin must be >= 0")
        if self.thin < 1 or self.block_alpha < 1 or self.block_xi < 1:
            raise ValueError("thin and block sizes must be >= 1")
        if self.chain_length < self.thin:
            raise ValueError("chain_length must be at least thin")

    @property
    def n_saved(self) -> int:
        return self.chain_length // self.thin

    @property
    def total_iterations(self) -> int:
        return self.burnin + self.chain_length


@dataclass
class ChainState:
    alpha: np.ndarray
    xi: np.ndarray
    m: np.ndarray
    gamma: np.ndarray
    tau2: np.ndarray
    w: float
    phi: float
    beta_u: np.ndarray
    term_of: np.ndarray = field(repr=False)
    # caches kept in sync by the sampler
    eta: np.ndarray = field(default=None, repr=False)
    X_alpha: np.ndarray = field(default=None, repr=False)

    @property
    def beta(self) -> np.ndarray:
        return self.xi * self.alpha[self.term_of]

    def copy(self) -> "ChainState":
        return copy.deepcopy(self)


class SamplerError(RuntimeError):
    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


# ---------------------------------------------------------------------------
# closed-form conditionals

def update_m(state: ChainState, rng) -> np.ndarray:
    p = expit(2.0 * state.xi)
    state.m = np.where(rng.random(len(p)) < p, 1.0, -1.0)
    return state.m


def rescale(state: ChainState, j: int, sl: slice):
    """Normalize ``xi_j`` to mean absolute value 1, moving the scale into ``alpha_j``."""
    s = np.mean(np.abs(state.xi[sl]))
    if s > 0 and np.isfinite(s):
        state.xi[sl] /= s
        state.alpha[j] *= s
    return state.xi[sl], state.alpha[j]


def update_tau2(state: ChainState, hyper: HyperParams, rng) -> np.ndarray:
    shape = hyper.a_tau + 0.5
    scale = hyper.b_tau + state.alpha ** 2 / (2.0 * state.gamma)
    state.tau2 = scale / rng.gamma(shape, 1.0, size=len(scale))
    return state.tau2


def gamma_inclusion_prob(alpha, tau2, w, v0) -> np.ndarray:
    """P(gamma_j = 1 | alpha_j, tau2_j, w), evaluated on the log-odds scale."""
    log_odds = (np.log(w) - np.log1p(-w) + 0.5 * np.log(v0)
                + (1.0 - v0) / (2.0 * v0) * np.asarray(alpha) ** 2 / tau2)
    return expit(log_odds)


def update_gamma(state: ChainState, hyper: HyperParams, rng) -> np.ndarray:
    p = gamma_inclusion_prob(state.alpha, state.tau2, state.w, hyper.v0)
    state.gamma = np.where(rng.random(len(p)) < p, 1.0, hyper.v0)
    return state.gamma


def update_w(state: ChainState, hyper: HyperParams, rng) -> float:
    n_slab = int(np.sum(state.gamma == 1.0))
    n_spike = len(state.gamma) - n_slab
    state.w = float(rng.beta(hyper.a_w + n_slab, hyper.b_w + n_spike))
    # keep w strictly inside (0, 1) for the gamma log-odds
    state.w = min(max(state.w, 1e-300), 1 - 1e-16)
    return state.w


def update_phi(state: ChainState, y, hyper: HyperParams, rng) -> float:
    r = y - state.eta
    shape = hyper.a_phi + 0.5 * len(y)
    scale = hyper.b_phi + 0.5 * float(r @ r)
    state.phi = float(scale / rng.gamma(shape, 1.0))
    return state.phi


# ---------------------------------------------------------------------------

def _draw_gaussian(Q, b, rng):
    """Draw from N(Q^{-1} b, Q^{-1}); returns (draw, mean, cholesky factor)."""
    try:
        L = np.linalg.cholesky(Q)
    except np.linalg.LinAlgError:
        raise SamplerError("conditional precision is not positive definite") from None
    mean = scipy.linalg.cho_solve((L, True), b, check_finite=False)
    z = rng.standard_normal(len(b))
    draw = mean + scipy.linalg.solve_triangular(L.T, z, lower=False, check_finite=False)
    return draw, mean, L


def _log_gauss(x, mean, L):
    """log N(x | mean, (L L')^{-1}) up to the 2*pi constant."""
    d = L.T @ (x - mean)
    return float(np.sum(np.log(np.diag(L))) - 0.5 * d @ d)


def _blocks(n, size):
    return [np.arange(s, min(s + size, n)) for s in range(0, n, size)]


@dataclass
class ChainSamples:
    """Saved draws of one chain; leading axis is the saved iteration."""

    chain: int
    iteration: np.ndarray
    alpha: np.ndarray
    xi: np.ndarray
    m: np.ndarray
    gamma: np.ndarray
    tau2: np.ndarray
    w: np.ndarray
    phi: np.ndarray
    beta_u: np.ndarray
    eta: np.ndarray
    deviance: np.ndarray
    p_include: np.ndarray
    accept: dict


class Sampler:
    """MCMC sampler for one design/response pair.

    ``likelihood=False`` switches the data term off so the chains sample
    from the prior.
    """

    def __init__(self, design: FullDesign, y, family="gaussian", hyper=None,
                 config=None, likelihood: bool = True, rescale: bool = True):
        self.design = design
        self.family: Family = get_family(family)
        self.y = self.family.validate(y)
        self.hyper = hyper or HyperParams()
        self.config = config or McmcConfig()
        self.likelihood = likelihood
        self.do_rescale = rescale
        self.X_u = design.X_u
        self.Xp = np.hstack([b.B for b in design.blocks]) if design.blocks else np.zeros((design.n, 0))
        self.offset = design.offset
        dims = design.dims
        self.p = len(dims)
        self.q = sum(dims)
        self.starts = np.cumsum([0] + dims[:-1]).astype(int)
        self.slices = [slice(s, s + d) for s, d in zip(self.starts, dims)]
        self.term_of = np.repeat(np.arange(self.p), dims)
        self.alpha_blocks = _blocks(self.p, self.config.block_alpha)
        self.xi_blocks = []
        for j, sl in enumerate(self.slices):
            for idx in _blocks(sl.stop - sl.start, self.config.block_xi):
                self.xi_blocks.append((j, idx + sl.start))
        self.xi_gram = [self.Xp[:, idx].T @ self.Xp[:, idx] for _, idx in self.xi_blocks]
        self.u_gram = self.X_u.T @ self.X_u
        if len(self.y) != design.n:
            raise ValueError(f"response has {len(self.y)} rows, design has {design.n}")
        self.gaussian = self.family.name == "gaussian"

    # -- helpers -------------------------------------------------------------
    def collapsed_design(self, xi) -> np.ndarray:
        """``X_alpha = X blockdiag(xi_1, ..., xi_p)`` (penalized part)."""
        if self.p == 0:
            return np.zeros((self.design.n, 0))
        return np.add.reduceat(self.Xp * xi, self.starts, axis=1)

    def linear_predictor(self, state: ChainState) -> np.ndarray:
        return self.offset + self.X_u @ state.beta_u + self.Xp @ state.beta

    def refresh(self, state: ChainState):
        state.X_alpha = self.collapsed_design(state.xi)
        state.eta = self.offset + self.X_u @ state.beta_u + state.X_alpha @ state.alpha

    # -- initial values --------------------------------------------------------
    def _fisher_scoring(self):
        X = np.hstack([self.X_u, self.Xp])
        k_u = self.X_u.shape[1]
        prec = np.r_[np.full(k_u, 1.0 / BETA_U_PRIOR_VAR), np.full(self.q, 1.0 / INIT_HYPERVAR)]
        y = self.y
        phi = float(np.var(y)) if self.gaussian else 1.0
        phi = phi if phi > 0 else 1.0
        beta = np.zeros(X.shape[1])
        beta[0] = self.family.null_eta(y) - np.mean(self.offset)
        try:
            for _ in range(FISHER_STEPS):
                eta = self.offset + X @ beta
                W, z = self.family.working(y, eta, phi)
                Q = X.T @ (W[:, None] * X) + np.diag(prec)
                beta = np.linalg.solve(Q, X.T @ (W * (z - self.offset)))
                if not np.all(np.isfinite(beta)):
                    raise FloatingPointError
            eta = self.offset + X @ beta
            W, _ = self.family.working(y, eta, phi)
            Q = X.T @ (W[:, None] * X) + np.diag(prec)
            L = np.linalg.cholesky(Q)
        except (np.linalg.LinAlgError, FloatingPointError):
            warnings.warn("Fisher scoring for starting values failed; starting from zero",
                          stacklevel=3)
            beta = np.zeros(X.shape[1])
            L = np.diag(np.sqrt(prec + 1.0))
        return beta, L

    def init_state(self, rng, fisher=None) -> ChainState:
        """Random starting values: ridge fit + noise, then per-term prior rescaling."""
        hyper = self.hyper
        beta0, L = fisher if fisher is not None else self._fisher_scoring()
        z = rng.standard_normal(len(beta0))
        beta = beta0 + scipy.linalg.solve_triangular(L.T, z, lower=False)
        k_u = self.X_u.shape[1]
        beta_u, beta_p = beta[:k_u].copy(), beta[k_u:].copy()
        w = float(rng.beta(hyper.a_w, hyper.b_w))
        w = min(max(w, 1e-12), 1 - 1e-12)
        gamma = np.where(rng.random(self.p) < w, 1.0, hyper.v0)
        tau2 = hyper.b_tau / rng.gamma(hyper.a_tau, 1.0, size=self.p)
        tau2_mean = hyper.b_tau / (hyper.a_tau - 1) if hyper.a_tau > 1 else hyper.b_tau
        alpha = np.empty(self.p)
        xi = np.empty(self.q)
        for j, sl in enumerate(self.slices):
            bj = beta_p[sl] * np.sqrt(gamma[j] * tau2[j] / tau2_mean)
            a = np.mean(np.abs(bj))
            if not a > 0:
                a = 1e-8
                bj = a * np.where(rng.random(len(bj)) < 0.5, 1.0, -1.0)
            alpha[j] = a
            xi[sl] = bj / a
        m = np.where(xi >= 0, 1.0, -1.0)
        state = ChainState(alpha=alpha, xi=xi, m=m, gamma=gamma, tau2=tau2, w=w, phi=1.0,
                           beta_u=beta_u, term_of=self.term_of)
        self.refresh(state)
        if self.gaussian:
            r = self.y - state.eta
            state.phi = float(max(r @ r / len(r), 1e-8))
        return state

    # -- Gaussian full conditionals -------------------------------------------
    def alpha_fcd(self, state: ChainState, block) -> tuple[np.ndarray, np.ndarray]:
        """Mean and covariance of the Gaussian full conditional of an alpha block."""
        Q, b = self._alpha_system(state, np.asarray(block))
        cov = np.linalg.inv(Q)
        return cov @ b, cov

    def _alpha_system(self, state, J):
        Xa = state.X_alpha[:, J]
        Q = np.diag(1.0 / (state.gamma[J] * state.tau2[J]))
        b = np.zeros(len(J))
        if self.likelihood:
            r = self.y - state.eta + Xa @ state.alpha[J]
            Q = Q + Xa.T @ Xa / state.phi
            b = Xa.T @ r / state.phi
        return Q, b

    def xi_fcd(self, state: ChainState, k: int):
        """Mean and covariance of the Gaussian full conditional of xi block ``k``."""
        Q, b = self._xi_system(state, k)
        cov = np.linalg.inv(Q)
        return cov @ b, cov

    def _xi_system(self, state, k):
        j, idx = self.xi_blocks[k]
        a = state.alpha[j]
        Q = np.eye(len(idx))
        b = state.m[idx].copy()
        if self.likelihood:
            G = self.xi_gram[k]
            Bb = self.Xp[:, idx]
            Btr = Bb.T @ (self.y - state.eta) + a * (G @ state.xi[idx])
            Q = Q + (a * a / state.phi) * G
            b = b + (a / state.phi) * Btr
        return Q, b

    # -- coefficient updates -----------------------------------------------------
    def update_alpha(self, state: ChainState, block, rng) -> bool:
        J = np.asarray(block)
        if self.gaussian or not self.likelihood:
            Q, b = self._alpha_system(state, J)
            new, _, _ = _draw_gaussian(Q, b, rng)
            accepted = True
        else:
            Xa = state.X_alpha[:, J]
            new, accepted = self.piwls(state, Xa, state.alpha[J],
                                       1.0 / (state.gamma[J] * state.tau2[J]), 0.0, rng)
        delta = new - state.alpha[J]
        state.alpha[J] = new
        state.eta = state.eta + state.X_alpha[:, J] @ delta
        return accepted

    def update_xi(self, state: ChainState, k: int, rng) -> bool:
        j, idx = self.xi_blocks[k]
        if self.gaussian or not self.likelihood:
            Q, b = self._xi_system(state, k)
            new, _, _ = _draw_gaussian(Q, b, rng)
            accepted = True
        else:
            Xb = state.alpha[j] * self.Xp[:, idx]
            new, accepted = self.piwls(state, Xb, state.xi[idx], 1.0, state.m[idx], rng)
        delta = new - state.xi[idx]
        state.xi[idx] = new
        state.eta = state.eta + state.alpha[j] * (self.Xp[:, idx] @ delta)
        return accepted

    def update_beta_u(self, state: ChainState, rng) -> bool:
        k = self.X_u.shape[1]
        prec = 1.0 / BETA_U_PRIOR_VAR
        if not self.likelihood:
            new = rng.standard_normal(k) * np.sqrt(BETA_U_PRIOR_VAR)
            accepted = True
        elif self.gaussian:
            r = self.y - state.eta + self.X_u @ state.beta_u
            Q = self.u_gram / state.phi + prec * np.eye(k)
            new, _, _ = _draw_gaussian(Q, self.X_u.T @ r / state.phi, rng)
            accepted = True
        else:
            new, accepted = self.piwls(state, self.X_u, state.beta_u, prec, 0.0, rng)
        state.eta = state.eta + self.X_u @ (new - state.beta_u)
        state.beta_u = new
        return accepted

    def piwls(self, state: ChainState, Xb, theta, prior_prec, prior_mean, rng):
        """One P-IWLS Metropolis-Hastings step for the block ``theta`` with design ``Xb``.

        The prior on ``theta`` is ``N(prior_mean, diag(prior_prec)^{-1})``.
        Returns ``(value, accepted)``.
        """
        y, fam, phi = self.y, self.family, state.phi
        prior_prec = np.broadcast_to(np.asarray(prior_prec, dtype=float), theta.shape)
        prior_mean = np.broadcast_to(np.asarray(prior_mean, dtype=float), theta.shape)
        eta_rest = state.eta - Xb @ theta

        def proposal(th):
            W, z = fam.working(y, eta_rest + Xb @ th, phi)
            Q = Xb.T @ (W[:, None] * Xb) + np.diag(prior_prec)
            b = Xb.T @ (W * (z - eta_rest)) + prior_prec * prior_mean
            return Q, b

        def log_post(th):
            d = th - prior_mean
            return fam.loglik(y, eta_rest + Xb @ th, phi) - 0.5 * float(np.sum(prior_prec * d * d))

        Q, b = proposal(theta)
        cand, mean_fwd, L_fwd = _draw_gaussian(Q, b, rng)
        Q2, b2 = proposal(cand)
        try:
            L_bwd = np.linalg.cholesky(Q2)
        except np.linalg.LinAlgError:
            return theta.copy(), False
        mean_bwd = scipy.linalg.cho_solve((L_bwd, True), b2, check_finite=False)
        log_ratio = (log_post(cand) - log_post(theta)
                     + _log_gauss(theta, mean_bwd, L_bwd) - _log_gauss(cand, mean_fwd, L_fwd))
        if np.isfinite(log_ratio) and np.log(rng.random()) < log_ratio:
            return cand, True
        return theta.copy(), False

    # -- one full sweep ------------------------------------------------------------
    def sweep(self, state: ChainState, rng, counts=None):
        counts = counts if counts is not None else {}
        for J in self.alpha_blocks:
            ok = self.update_alpha(state, J, rng)
            _count(counts, "alpha", ok)
        ok = self.update_beta_u(state, rng)
        _count(counts, "beta_u", ok)
        update_m(state, rng)
        for k in range(len(self.xi_blocks)):
            ok = self.update_xi(state, k, rng)
            _count(counts, "xi", ok)
        if self.do_rescale:
            for j, sl in enumerate(self.slices):
                rescale(state, j, sl)
        self.refresh(state)
        update_tau2(state, self.hyper, rng)
        update_gamma(state, self.hyper, rng)
        update_w(state, self.hyper, rng)
        if self.gaussian and self.likelihood:
            update_phi(state, self.y, self.hyper, rng)
        return state

    # -- chains ---------------------------------------------------------------------
    def rng(self, chain: int):
        return np.random.Generator(np.random.PCG64(self.config.seed + chain))

    def run_chain(self, chain: int, fisher=None) -> ChainSamples:
        cfg = self.config
        rng = self.rng(chain)
        state = self.init_state(rng, fisher)
        ns = cfg.n_saved
        n = self.design.n
        out = {
            "iteration": np.empty(ns, dtype=int),
            "alpha": np.empty((ns, self.p)), "xi": np.empty((ns, self.q)),
            "m": np.empty((ns, self.q), dtype=np.int8), "gamma": np.empty((ns, self.p)),
            "tau2": np.empty((ns, self.p)), "w": np.empty(ns), "phi": np.empty(ns),
            "beta_u": np.empty((ns, self.X_u.shape[1])), "eta": np.empty((ns, n)),
            "deviance": np.empty(ns), "p_include": np.empty((ns, self.p)),
        }
        counts: dict = {}
        s = 0
        for t in range(1, cfg.total_iterations + 1):
            try:
                self.sweep(state, rng, counts if t > cfg.burnin else None)
            except Exception as e:
                raise SamplerError(f"chain {chain}, iteration {t}: {e}", state.copy()) from e
            if t > cfg.burnin and (t - cfg.burnin) % cfg.thin == 0:
                out["iteration"][s] = t
                out["alpha"][s] = state.alpha
                out["xi"][s] = state.xi
                out["m"][s] = state.m
                out["gamma"][s] = state.gamma
                out["tau2"][s] = state.tau2
                out["w"][s] = state.w
                out["phi"][s] = state.phi if self.gaussian else np.nan
                out["beta_u"][s] = state.beta_u
                out["eta"][s] = state.eta
                out["deviance"][s] = self.family.deviance(self.y, state.eta, state.phi)
                out["p_include"][s] = gamma_inclusion_prob(state.alpha, state.tau2, state.w,
                                                           self.hyper.v0)
                s += 1
        accept = {k: v[0] / v[1] for k, v in counts.items() if v[1]}
        return ChainSamples(chain=chain, accept=accept, **out)

    def run(self) -> list[ChainSamples]:
        fisher = self._fisher_scoring()
        chains = range(self.config.n_chains)
        if self.config.n_jobs > 1 and self.config.n_chains > 1:
            with ProcessPoolExecutor(max_workers=self.config.n_jobs) as ex:
                return list(ex.map(self.run_chain, chains, [fisher] * len(chains)))
        return [self.run_chain(c, fisher) for c in chains]


def _count(counts, key, ok):
    if counts is None:
        return
    a, n = counts.get(key, (0, 0))
    counts[key] = (a + int(ok), n + 1)


def run_chains(design: FullDesign, y, family="gaussian", hyper=None, config=None,
               likelihood: bool = True) -> list[ChainSamples]:
    return Sampler(design, y, family, hyper, config, likelihood).run()
