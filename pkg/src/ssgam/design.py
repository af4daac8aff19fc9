"""Design matrices for the model terms.

Every term starts from a raw basis ``B_tilde`` with a (possibly rank
deficient) prior precision ``P``.  The term is then reparameterized so its
coefficients are a priori iid (orthogonal or mixed-model decomposition),
centered against the intercept / penalty nullspace / parent main effects,
and scaled to Frobenius norm 0.5.  All steps are linear maps of columns plus
a correction ``- Z @ G``, so the same pipeline can be replayed on new data.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
import scipy.linalg
import scipy.sparse.csgraph
import scipy.sparse.linalg
from scipy.interpolate import BSpline

from .formula import ModelSpec, TermSpec

__all__ = [
    "DesignError",
    "PenalizedBasis",
    "Decomposition",
    "TermDesign",
    "FullDesign",
    "poly_basis",
    "bspline_penalized_basis",
    "tensor_bspline_penalized_basis",
    "difference_penalty",
    "fct_design",
    "rnd_design",
    "mrf_design",
    "tensor_interaction",
    "orthogonal_decomposition",
    "mixed_model_decomposition",
    "center",
    "centering_coefficients",
    "scale_frobenius",
    "build_full_design",
    "factor_levels",
]

RANK_TOL = 1e-10
TARGET_NORM = 0.5


class DesignError(ValueError):
    pass


# ---------------------------------------------------------------------------
# raw bases

class PolyRecipe:
    """Discrete orthogonal polynomials (three-term recurrence, like R's ``poly``)."""

    kind = "poly"

    def __init__(self, alpha, norm2, degree):
        self.alpha = np.asarray(alpha, dtype=float)
        self.norm2 = np.asarray(norm2, dtype=float)
        self.degree = int(degree)

    @classmethod
    def fit(cls, x, degree):
        x = np.asarray(x, dtype=float)
        n = len(x)
        Z = np.empty((n, degree + 1))
        Z[:, 0] = 1.0
        alpha = np.empty(degree)
        norm2 = np.empty(degree + 2)
        norm2[0] = 1.0
        norm2[1] = n
        for k in range(degree):
            alpha[k] = np.dot(x * Z[:, k], Z[:, k]) / norm2[k + 1]
            nxt = (x - alpha[k]) * Z[:, k]
            if k > 0:
                nxt -= norm2[k + 1] / norm2[k] * Z[:, k - 1]
            Z[:, k + 1] = nxt
            norm2[k + 2] = np.dot(nxt, nxt)
        return cls(alpha, norm2, degree)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        Z = np.empty((len(x), self.degree + 1))
        Z[:, 0] = 1.0
        for k in range(self.degree):
            nxt = (x - self.alpha[k]) * Z[:, k]
            if k > 0:
                nxt -= self.norm2[k + 1] / self.norm2[k] * Z[:, k - 1]
            Z[:, k + 1] = nxt
        return Z[:, 1:] / np.sqrt(self.norm2[2:])

    def to_dict(self):
        return {"kind": self.kind, "alpha": self.alpha.tolist(),
                "norm2": self.norm2.tolist(), "degree": self.degree}


def poly_basis(x, degree: int = 1) -> np.ndarray:
    """Orthonormal polynomials of degree 1..degree in ``x`` (constant excluded)."""
    x = np.asarray(x, dtype=float)
    if degree < 1:
        raise DesignError("degree must be >= 1")
    if len(np.unique(x)) < degree + 1:
        raise DesignError(f"need at least {degree + 1} distinct values for degree {degree}")
    return PolyRecipe.fit(x, degree)(x)


class SplineRecipe:
    kind = "bspline"

    def __init__(self, knots, degree):
        self.knots = np.asarray(knots, dtype=float)
        self.degree = int(degree)

    @property
    def n_basis(self):
        return len(self.knots) - self.degree - 1

    @property
    def bounds(self):
        return self.knots[self.degree], self.knots[-self.degree - 1]

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        lo, hi = self.bounds
        bad = (x < lo) | (x > hi)
        if np.any(bad):
            raise DesignError(
                f"value {x[bad][0]:g} outside spline range [{lo:g}, {hi:g}]; "
                "extrapolation is not supported")
        return BSpline.design_matrix(x, self.knots, self.degree).toarray()

    def to_dict(self):
        return {"kind": self.kind, "knots": self.knots.tolist(), "degree": self.degree}


def _check_numeric(x, what="covariate"):
    x = np.asarray(x, dtype=float)
    if np.any(~np.isfinite(x)):
        raise DesignError(f"{what} contains missing or non-finite values")
    return x


def _spline_recipe(x, n_basis, degree):
    lo, hi = float(np.min(x)), float(np.max(x))
    if hi <= lo:
        raise DesignError("degenerate covariate: all values are equal")
    eps = 1e-6 * (hi - lo)
    lo, hi = lo - eps, hi + eps
    n_int = n_basis - degree
    h = (hi - lo) / n_int
    knots = lo + h * np.arange(-degree, n_int + degree + 1)
    # pin the boundary knots exactly so the evaluation range is [lo, hi]
    knots[degree] = lo
    knots[-degree - 1] = hi
    return SplineRecipe(knots, degree)


def difference_penalty(n: int, order: int) -> np.ndarray:
    D = np.diff(np.eye(n), n=order, axis=0)
    return D.T @ D


@dataclass
class PenalizedBasis:
    """Raw basis ``B_tilde`` with prior precision ``P`` (nullspace dim ``nullspace_dim``)."""

    B_tilde: np.ndarray
    P: np.ndarray
    nullspace_dim: int
    recipe: object = None


def bspline_penalized_basis(x, n_basis: int = 20, spline_degree: int = 3,
                            penalty_order: int = 2) -> PenalizedBasis:
    x = _check_numeric(x)
    if n_basis < spline_degree + 1 + penalty_order:
        raise DesignError(
            f"n_basis={n_basis} too small for degree {spline_degree} and penalty order {penalty_order}")
    recipe = _spline_recipe(x, n_basis, spline_degree)
    return PenalizedBasis(recipe(x), difference_penalty(n_basis, penalty_order),
                          penalty_order, recipe)


class TensorSplineRecipe:
    kind = "tensor_bspline"

    def __init__(self, margins):
        self.margins = list(margins)

    def __call__(self, *xs):
        out = self.margins[0](xs[0])
        for rec, x in zip(self.margins[1:], xs[1:]):
            out = tensor_interaction(out, rec(x))
        return out

    def to_dict(self):
        return {"kind": self.kind, "margins": [m.to_dict() for m in self.margins]}


def tensor_bspline_penalized_basis(x1, x2, n_basis: int = 7, spline_degree: int = 3,
                                   penalty_order: int = 1) -> PenalizedBasis:
    """Tensor-product B-splines with a sum of marginal difference penalties."""
    x1, x2 = _check_numeric(x1), _check_numeric(x2)
    if n_basis < spline_degree + 1 + penalty_order:
        raise DesignError("n_basis too small for srf()")
    r1 = _spline_recipe(x1, n_basis, spline_degree)
    r2 = _spline_recipe(x2, n_basis, spline_degree)
    recipe = TensorSplineRecipe([r1, r2])
    P1 = difference_penalty(n_basis, penalty_order)
    I = np.eye(n_basis)
    P = np.kron(P1, I) + np.kron(I, P1)
    return PenalizedBasis(recipe(x1, x2), P, penalty_order ** 2, recipe)


class FactorRecipe:
    kind = "factor"

    def __init__(self, levels, coding):
        self.levels = [str(v) for v in levels]
        self.coding = coding

    def codes(self, f):
        index = {lev: i for i, lev in enumerate(self.levels)}
        out = np.empty(len(f), dtype=int)
        for i, v in enumerate(f):
            if v is None or (isinstance(v, float) and np.isnan(v)):
                raise DesignError("factor contains missing values")
            try:
                out[i] = index[str(v)]
            except KeyError:
                raise DesignError(f"unseen factor level {str(v)!r}") from None
        return out

    def __call__(self, f):
        c = self.codes(f)
        K = len(self.levels)
        ind = np.zeros((len(c), K))
        ind[np.arange(len(c)), c] = 1.0
        if self.coding == "sum":
            out = ind[:, :-1].copy()
            out[c == K - 1] = -1.0
            return out
        return ind

    def to_dict(self):
        return {"kind": self.kind, "levels": self.levels, "coding": self.coding}


def factor_levels(f) -> list[str]:
    cats = getattr(getattr(f, "cat", None), "categories", None)
    if cats is not None:
        return [str(v) for v in cats]
    vals = list(f)
    for v in vals:
        if v is None or (isinstance(v, float) and np.isnan(v)):
            raise DesignError("factor contains missing values")
    try:
        uniq = sorted(set(vals))
    except TypeError:
        uniq = sorted(set(map(str, vals)))
    out = []
    for v in uniq:
        if str(v) not in out:
            out.append(str(v))
    return out


def fct_design(f, levels=None) -> PenalizedBasis:
    """Sum-to-zero contrast coding with identity precision."""
    levels = factor_levels(f) if levels is None else levels
    if len(levels) < 2:
        raise DesignError("factor needs at least 2 levels")
    recipe = FactorRecipe(levels, "sum")
    B = recipe(f)
    if len(np.unique(recipe.codes(f))) < len(levels):
        raise DesignError("every factor level must be observed")
    return PenalizedBasis(B, np.eye(len(levels) - 1), 0, recipe)


def rnd_design(f, C=None, levels=None) -> PenalizedBasis:
    """Random intercept: level indicators with precision ``C^{-1}``."""
    levels = factor_levels(f) if levels is None else levels
    K = len(levels)
    C = np.eye(K) if C is None else np.asarray(C, dtype=float)
    if C.shape != (K, K):
        raise DesignError(f"correlation matrix must be {K}x{K}")
    try:
        L = np.linalg.cholesky(C)
    except np.linalg.LinAlgError:
        raise DesignError("correlation matrix C is not positive definite") from None
    P = scipy.linalg.cho_solve((L, True), np.eye(K))
    recipe = FactorRecipe(levels, "indicator")
    return PenalizedBasis(recipe(f), (P + P.T) / 2, 0, recipe)


def mrf_design(f, N, regions=None) -> PenalizedBasis:
    """First-order IGMRF: region indicators with graph-Laplacian precision."""
    N = np.asarray(N, dtype=float)
    if N.ndim != 2 or N.shape[0] != N.shape[1]:
        raise DesignError("adjacency matrix must be square")
    if not np.allclose(N, N.T) or np.any(N < 0) or np.any(np.diag(N) != 0):
        raise DesignError("adjacency must be symmetric, nonnegative with zero diagonal")
    regions = factor_levels(f) if regions is None else [str(r) for r in regions]
    if len(regions) != N.shape[0]:
        raise DesignError(f"{len(regions)} regions but adjacency is {N.shape[0]}x{N.shape[0]}")
    n_comp = scipy.sparse.csgraph.connected_components(N > 0, directed=False)[0]
    if n_comp != 1:
        raise DesignError(f"adjacency graph is disconnected ({n_comp} components)")
    P = np.diag(N.sum(axis=1)) - N
    recipe = FactorRecipe(regions, "indicator")
    return PenalizedBasis(recipe(f), P, 1, recipe)


def tensor_interaction(A, B) -> np.ndarray:
    """Row-wise Kronecker product; column ``i*b + j`` is ``A[:, i] * B[:, j]``."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.shape[0] != B.shape[0]:
        raise DesignError(f"row mismatch: {A.shape[0]} vs {B.shape[0]}")
    return (A[:, :, None] * B[:, None, :]).reshape(A.shape[0], -1)


# ---------------------------------------------------------------------------
# decompositions

def _penalty_eigen(P):
    P = np.asarray(P, dtype=float)
    w, V = np.linalg.eigh((P + P.T) / 2)
    top = max(w.max(), 0.0)
    if top == 0.0:
        return w, V, np.zeros(len(w), dtype=bool)
    if w.min() < -1e-8 * top:
        raise DesignError("penalty matrix is indefinite")
    return w, V, w > RANK_TOL * top


@dataclass
class Decomposition:
    B: np.ndarray          # n x d reduced penalized design
    T: np.ndarray          # d_tilde x d, B = B_tilde @ T
    null_T: np.ndarray     # d_tilde x n_P, nullspace of P
    U0: np.ndarray         # orthonormal basis of B_tilde @ null_T
    eigenvalues: np.ndarray
    retained: float


def orthogonal_decomposition(pb: PenalizedBasis, mass: float = 0.999,
                             solver: str = "dense") -> Decomposition:
    """Reduced-rank basis from the eigendecomposition of ``B~ P^- B~'``.

    Uses ``B~ P^- B~' = M M'`` with ``M = B~ L``, ``L L' = P^-``, so the
    eigenpairs come from the thin SVD of ``M``.  ``solver="lanczos"`` grows a
    truncated ``svds`` until the requested mass is reached.
    """
    if not 0 < mass <= 1:
        raise DesignError("mass must be in (0, 1]")
    w, Lam, pos = _penalty_eigen(pb.P)
    L = Lam[:, pos] / np.sqrt(w[pos])
    null_T = Lam[:, ~pos]
    M = pb.B_tilde @ L
    total = float(np.sum(M * M))
    if M.size == 0 or total <= 0:
        raise DesignError("penalized part is empty (all eigenvalues zero)")
    S, Vt = _leading_svd(M, mass, total, solver)
    ev = S ** 2
    keep = ev > RANK_TOL * ev[0]
    ev, Vt = ev[keep], Vt[keep]
    cum = np.cumsum(ev)
    d = int(np.searchsorted(cum, mass * total * (1 - 1e-12)) + 1)
    d = min(d, len(ev))
    V = Vt[:d].T
    T = L @ V
    B = M @ V
    U0 = _orth(pb.B_tilde @ null_T) if null_T.shape[1] else np.zeros((M.shape[0], 0))
    return Decomposition(B, T, null_T, U0, ev[:d], float(cum[d - 1] / total))


def _leading_svd(M, mass, total, solver):
    if solver == "dense":
        _, S, Vt = np.linalg.svd(M, full_matrices=False)
        return S, Vt
    if solver != "lanczos":
        raise DesignError(f"unknown eigensolver {solver!r}")
    r = min(M.shape)
    k = min(8, r - 1)
    while k < r - 1:
        _, S, Vt = scipy.sparse.linalg.svds(M, k=k, random_state=0)
        order = np.argsort(S)[::-1]
        S, Vt = S[order], Vt[order]
        if np.sum(S ** 2) >= mass * total * (1 - 1e-12):
            return S, Vt
        k = min(2 * k, r - 1)
    _, S, Vt = np.linalg.svd(M, full_matrices=False)
    return S, Vt


def _orth(A):
    if A.shape[1] == 0:
        return A
    U, s, _ = np.linalg.svd(A, full_matrices=False)
    if s.size == 0 or s[0] == 0:
        return U[:, :0]
    return U[:, s > np.sqrt(RANK_TOL) * s[0]]


def mixed_model_decomposition(pb: PenalizedBasis):
    """Split into unpenalized ``B_u = B~ Lambda_0`` and penalized ``B = B~ L (L'L)^{-1}``.

    Returns ``(B_u, B, T_u, T)`` with ``B_u = B~ @ T_u`` and ``B = B~ @ T``.
    """
    w, Lam, pos = _penalty_eigen(pb.P)
    T_u = Lam[:, ~pos]
    Lmat = Lam[:, pos] * np.sqrt(w[pos])
    T = Lmat @ np.linalg.inv(Lmat.T @ Lmat)
    return pb.B_tilde @ T_u, pb.B_tilde @ T, T_u, T


def centering_coefficients(B, Z):
    """Return ``(keep, G)`` so that ``B - Z[:, keep] @ G`` is orthogonal to ``Z``."""
    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    if Z.shape[1] == 0:
        return np.zeros(0, dtype=int), np.zeros((0, B.shape[1]))
    Q, R, piv = scipy.linalg.qr(Z, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    r = int(np.sum(diag ** 2 > RANK_TOL * diag[0] ** 2)) if diag[0] > 0 else 0
    keep = np.sort(piv[:r])
    Zk = Z[:, keep]
    G = np.linalg.lstsq(Zk, B, rcond=None)[0]
    # one refinement step for orthogonality at round-off level
    G += np.linalg.lstsq(Zk, B - Zk @ G, rcond=None)[0]
    return keep, G


def center(B, Z) -> np.ndarray:
    """Project the columns of ``B`` onto the orthogonal complement of ``span(Z)``."""
    B = np.asarray(B, dtype=float)
    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    if Z.shape[1] == 0:
        warnings.warn("nothing to center against; returning B unchanged", stacklevel=2)
        return B.copy()
    keep, G = centering_coefficients(B, Z)
    return B - Z[:, keep] @ G


def scale_frobenius(B) -> np.ndarray:
    B = np.asarray(B, dtype=float)
    nrm = np.linalg.norm(B)
    if nrm == 0:
        raise DesignError("cannot scale a zero matrix")
    return B * (TARGET_NORM / nrm)


def _compact(B):
    """Orthogonal column rotation of ``B`` that drops numerically null directions."""
    _, s, Vt = np.linalg.svd(B, full_matrices=False)
    if s.size == 0 or s[0] == 0:
        return np.zeros((B.shape[1], 0))
    keep = s ** 2 > RANK_TOL * s[0] ** 2
    return Vt[keep].T


# ---------------------------------------------------------------------------
# per-term pipelines

def _recipe_from_dict(d):
    if d is None:
        return None
    kind = d["kind"]
    if kind == "poly":
        return PolyRecipe(d["alpha"], d["norm2"], d["degree"])
    if kind == "bspline":
        return SplineRecipe(d["knots"], d["degree"])
    if kind == "tensor_bspline":
        return TensorSplineRecipe([_recipe_from_dict(m) for m in d["margins"]])
    if kind == "factor":
        return FactorRecipe(d["levels"], d["coding"])
    if kind == "identity":
        return IdentityRecipe()
    raise ValueError(f"unknown basis recipe {kind!r}")


class IdentityRecipe:
    kind = "identity"

    def __call__(self, x):
        return np.asarray(x, dtype=float)[:, None]

    def to_dict(self):
        return {"kind": self.kind}


@dataclass
class TermDesign:
    """Final design of one term plus everything needed to rebuild it on new data.

    ``B = ((B_tilde @ T) - Z[:, z_keep] @ G) @ V * scale`` where ``B_tilde`` is
    the raw basis (or the row-wise Kronecker product of the parents) and
    ``Z = [1, B_tilde @ null_T, parent designs]``.
    """

    label: str
    kind: str
    covariates: tuple
    B: np.ndarray
    lineage: dict
    recipe: object = None
    parents: tuple = ()
    T: np.ndarray | None = None
    z_intercept: bool = False
    null_T: np.ndarray | None = None
    z_parents: tuple = ()
    z_keep: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    G: np.ndarray | None = None
    V: np.ndarray | None = None
    scale: float = 1.0
    penalized: bool = True

    @property
    def dim(self) -> int:
        return self.B.shape[1]

    def to_dict(self, with_matrix=True):
        def arr(a):
            return None if a is None else np.asarray(a).tolist()
        d = {
            "label": self.label, "kind": self.kind, "covariates": list(self.covariates),
            "dim": self.dim, "lineage": self.lineage, "penalized": self.penalized,
            "recipe": None if self.recipe is None else self.recipe.to_dict(),
            "parents": list(self.parents), "T": arr(self.T), "z_intercept": self.z_intercept,
            "null_T": arr(self.null_T), "z_parents": list(self.z_parents),
            "z_keep": arr(self.z_keep), "G": arr(self.G), "V": arr(self.V), "scale": self.scale,
        }
        if with_matrix:
            d["shape"] = list(self.B.shape)
            d["B"] = self.B.tolist()
        return d

    @classmethod
    def from_dict(cls, d):
        def arr(a, dtype=float):
            return None if a is None else np.asarray(a, dtype=dtype)
        B = np.asarray(d["B"], dtype=float).reshape(d["shape"]) if "B" in d else np.zeros((0, d["dim"]))
        return cls(
            label=d["label"], kind=d["kind"], covariates=tuple(d["covariates"]), B=B,
            lineage=d["lineage"], recipe=_recipe_from_dict(d["recipe"]),
            parents=tuple(d["parents"]), T=arr(d["T"]), z_intercept=d["z_intercept"],
            null_T=arr(d["null_T"]), z_parents=tuple(d["z_parents"]),
            z_keep=arr(d["z_keep"], int), G=arr(d["G"]), V=arr(d["V"]), scale=d["scale"],
            penalized=d["penalized"],
        )


def _column(data, name):
    try:
        col = data[name]
    except KeyError:
        raise DesignError(f"column {name!r} missing from data") from None
    return col


def _raw_basis(td: TermDesign, data, evaluated):
    if td.recipe is None and not td.parents:
        return np.ones((_n_rows(data), 1))
    if td.parents:
        out = evaluated[td.parents[0]]
        for p in td.parents[1:]:
            out = tensor_interaction(out, evaluated[p])
        return out
    cols = [_column(data, c) for c in td.covariates]
    if isinstance(td.recipe, (PolyRecipe, SplineRecipe, TensorSplineRecipe, IdentityRecipe)):
        cols = [_check_numeric(c) for c in cols]
    return td.recipe(*cols)


def _n_rows(data):
    if hasattr(data, "shape"):
        return data.shape[0]
    return len(next(iter(data.values())))


def _replay(td: TermDesign, data, evaluated) -> np.ndarray:
    raw = _raw_basis(td, data, evaluated)
    B0 = raw if td.T is None else raw @ td.T
    if td.G is not None and len(td.z_keep):
        Z = _z_matrix(td, raw, evaluated, B0.shape[0])
        B0 = B0 - Z[:, td.z_keep] @ td.G
    if td.V is not None:
        B0 = B0 @ td.V
    return B0 * td.scale


def _z_matrix(td, raw, evaluated, n):
    parts = []
    if td.z_intercept:
        parts.append(np.ones((n, 1)))
    if td.null_T is not None and td.null_T.shape[1]:
        parts.append(raw @ td.null_T)
    for p in td.z_parents:
        parts.append(evaluated[p])
    return np.hstack(parts) if parts else np.zeros((n, 0))


@dataclass
class FullDesign:
    """Concatenated design ``X = [X_u  B_1 ... B_p]`` with its rebuild recipes."""

    unpenalized: list[TermDesign]
    blocks: list[TermDesign]
    offset: np.ndarray
    hidden: list[TermDesign] = field(default_factory=list)
    decomposition: str = "orthogonal"

    @property
    def X_u(self) -> np.ndarray:
        return np.hstack([t.B for t in self.unpenalized])

    @property
    def X(self) -> np.ndarray:
        return np.hstack([self.X_u] + [b.B for b in self.blocks])

    @property
    def dims(self) -> list[int]:
        return [b.dim for b in self.blocks]

    @property
    def q(self) -> int:
        return sum(self.dims)

    @property
    def labels(self) -> list[str]:
        return [b.label for b in self.blocks]

    @property
    def u_labels(self) -> list[str]:
        out = []
        for t in self.unpenalized:
            out += [t.label] if t.dim == 1 else [f"{t.label}.{i + 1}" for i in range(t.dim)]
        return out

    @property
    def n(self) -> int:
        return self.offset.shape[0]

    def block(self, label) -> TermDesign:
        for b in self.blocks:
            if b.label == label:
                return b
        raise KeyError(label)

    def _all_terms(self):
        return {t.label: t for t in self.hidden + self.unpenalized + self.blocks}

    def evaluate_terms(self, data, labels) -> dict[str, np.ndarray]:
        """Rebuild the listed terms (and whatever they depend on) on new data."""
        by_label = self._all_terms()
        evaluated: dict[str, np.ndarray] = {}

        def ev(lab):
            if lab not in evaluated:
                td = by_label[lab]
                for p in td.parents + td.z_parents:
                    ev(p)
                evaluated[lab] = _replay(td, data, evaluated)
            return evaluated[lab]
        return {lab: ev(lab) for lab in labels}

    def evaluate(self, data):
        """Rebuild ``(X_u, [B_1..B_p])`` for new data using the stored transforms."""
        labels = [t.label for t in self.unpenalized] + self.labels
        out = self.evaluate_terms(data, labels)
        X_u = np.hstack([out[t.label] for t in self.unpenalized])
        return X_u, [out[b.label] for b in self.blocks]

    def to_dict(self, with_matrix=True):
        return {
            "format": "ssgam-design", "version": 1,
            "n": self.n, "q": self.q, "p": len(self.blocks),
            "decomposition": self.decomposition,
            "offset": self.offset.tolist() if with_matrix else None,
            "unpenalized": [t.to_dict(with_matrix) for t in self.unpenalized],
            "blocks": [t.to_dict(with_matrix) for t in self.blocks],
            "hidden": [t.to_dict(False) for t in self.hidden],
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != "ssgam-design":
            raise ValueError("not an ssgam design container")
        offset = np.asarray(d["offset"] if d["offset"] is not None else np.zeros(0), dtype=float)
        return cls(
            unpenalized=[TermDesign.from_dict(t) for t in d["unpenalized"]],
            blocks=[TermDesign.from_dict(t) for t in d["blocks"]],
            offset=offset,
            hidden=[TermDesign.from_dict(t) for t in d["hidden"]],
            decomposition=d["decomposition"],
        )

    def to_json(self, path=None, with_matrix=True):
        text = json.dumps(self.to_dict(with_matrix))
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


class _Builder:
    def __init__(self, spec: ModelSpec, data, decomposition, mass, solver, matrices,
                 scaling="total"):
        self.spec = spec
        self.data = data
        self.decomposition = decomposition
        self.mass = mass
        self.solver = solver
        self.matrices = matrices or {}
        self.n = len(np.asarray(_column(data, spec.response)))
        # "per_obs" targets a root-mean-square row norm of 0.5 instead of a total norm
        self.target_norm = TARGET_NORM * (np.sqrt(self.n) if scaling == "per_obs" else 1.0)
        self.main: dict[str, TermDesign] = {}
        self.extra_u: list[TermDesign] = []
        lin_cov = {}
        for t in spec.terms:
            if t.kind == "lin":
                lin_cov[t.covariates[0]] = t.opts["degree"]
        self.lin_cov = lin_cov

    def matrix(self, name, what):
        if name is None:
            return None
        try:
            return self.matrices[name]
        except KeyError:
            raise DesignError(f"{what} matrix {name!r} not supplied") from None

    def raw(self, t: TermSpec) -> PenalizedBasis:
        opts = t.opts
        cols = [_column(self.data, c) for c in t.covariates]
        if t.kind == "lin":
            x = _check_numeric(cols[0], t.covariates[0])
            deg = opts["degree"]
            if len(np.unique(x)) < deg + 1:
                raise DesignError(f"{t.label}: need at least {deg + 1} distinct values")
            rec = PolyRecipe.fit(x, deg)
            return PenalizedBasis(rec(x), np.eye(deg), 0, rec)
        if t.kind == "sm":
            return bspline_penalized_basis(cols[0], opts["K"], opts["degree"], opts["order"])
        if t.kind == "srf":
            return tensor_bspline_penalized_basis(cols[0], cols[1], opts["K"], opts["degree"],
                                                  opts["order"])
        if t.kind == "fct":
            return fct_design(cols[0])
        if t.kind == "rnd":
            C = self.matrix(opts["C"], "correlation")
            levels = None
            if isinstance(C, tuple):
                levels, C = C
            return rnd_design(cols[0], C, levels)
        if t.kind == "mrf":
            N = self.matrix(opts["N"], "adjacency")
            if N is None:
                raise DesignError(f"{t.label}: mrf() needs an adjacency matrix N=<name>")
            regions = None
            if isinstance(N, tuple):
                regions, N = N
            return mrf_design(cols[0], N, regions)
        if t.kind == "u":
            x = cols[0]
            if np.asarray(x).dtype.kind in "iufb":
                x = _check_numeric(x)
                rec = IdentityRecipe()
                return PenalizedBasis(rec(x), np.zeros((1, 1)), 1, rec)
            return fct_design(x)
        raise DesignError(f"unsupported term kind {t.kind!r}")

    def term(self, t: TermSpec) -> TermDesign:
        try:
            if t.is_interaction:
                return self._interaction(t)
            return self._main(t)
        except DesignError as e:
            raise DesignError(f"{t.label}: {e}") from None

    def _main(self, t: TermSpec) -> TermDesign:
        if t.label in self.main:
            return self.main[t.label]
        pb = self.raw(t)
        ones = np.ones((self.n, 1))
        lineage = {"kind": t.kind, "raw_dim": int(pb.B_tilde.shape[1]),
                   "nullspace_dim": int(pb.nullspace_dim)}
        null_T = None
        if t.kind in ("lin", "fct", "u"):
            T = None
            B0 = pb.B_tilde
            lineage.update(decomposition="none", mass=1.0)
        elif self.decomposition == "mixed":
            B_u, B0, T_u, T = mixed_model_decomposition(pb)
            null_T = T_u
            lineage.update(decomposition="mixed", mass=1.0)
        else:
            dec = orthogonal_decomposition(pb, self.mass, self.solver)
            B0, T, null_T = dec.B, dec.T, dec.null_T
            lineage.update(decomposition="orthogonal", mass=dec.retained)
        z_parts = [ones]
        if null_T is not None and null_T.shape[1]:
            z_parts.append(pb.B_tilde @ null_T)
            self._route_nullspace(t, pb, null_T)
        Z = np.hstack(z_parts)
        keep, G = centering_coefficients(B0, Z)
        Bc = B0 - Z[:, keep] @ G
        V = _compact(Bc)
        if V.shape[1] == 0:
            raise DesignError("penalized part is empty after centering")
        Bc = Bc @ V
        scale = self.target_norm / np.linalg.norm(Bc)
        td = TermDesign(
            label=t.label, kind=t.kind, covariates=t.covariates, B=Bc * scale,
            lineage=lineage, recipe=pb.recipe, T=T, z_intercept=True, null_T=null_T,
            z_keep=keep, G=G, V=V, scale=float(scale), penalized=t.kind != "u")
        self.main[t.label] = td
        return td

    def _route_nullspace(self, t: TermSpec, pb: PenalizedBasis, null_T):
        """Send the non-constant unpenalized part of a smooth term to ``X_u``."""
        if t.kind == "sm" and self.lin_cov.get(t.covariates[0], 0) >= t.opts["order"] - 1:
            return
        raw_null = pb.B_tilde @ null_T
        keep, G = centering_coefficients(raw_null, np.ones((self.n, 1)))
        Bc = raw_null - np.ones((self.n, 1))[:, keep] @ G
        V = _compact(Bc)
        if V.shape[1] == 0:
            return
        Bc = Bc @ V
        scale = self.target_norm / np.linalg.norm(Bc)
        warnings.warn(f"unpenalized part of {t.label} enters the model as unselected "
                      f"columns u({t.label})", stacklevel=3)
        self.extra_u.append(TermDesign(
            label=f"u({t.label})", kind="u", covariates=t.covariates, B=Bc * scale,
            lineage={"kind": "u", "decomposition": "nullspace", "mass": 1.0,
                     "raw_dim": int(pb.B_tilde.shape[1]), "nullspace_dim": int(null_T.shape[1])},
            recipe=pb.recipe, T=null_T, z_intercept=True, z_keep=keep, G=G, V=V,
            scale=float(scale), penalized=False))

    def _interaction(self, t: TermSpec) -> TermDesign:
        parents = [self._main(p) for p in t.parts]
        raw = parents[0].B
        for p in parents[1:]:
            raw = tensor_interaction(raw, p.B)
        lineage = {"kind": "interaction", "raw_dim": int(raw.shape[1]), "nullspace_dim": 0}
        if self.decomposition == "orthogonal" and raw.shape[1] > 1:
            pb = PenalizedBasis(raw, np.eye(raw.shape[1]), 0)
            dec = orthogonal_decomposition(pb, self.mass, self.solver)
            B0, T = dec.B, dec.T
            lineage.update(decomposition="orthogonal", mass=dec.retained)
        else:
            B0, T = raw, None
            lineage.update(decomposition="none", mass=1.0)
        Z = np.hstack([np.ones((self.n, 1))] + [p.B for p in parents])
        keep, G = centering_coefficients(B0, Z)
        Bc = B0 - Z[:, keep] @ G
        V = _compact(Bc)
        if V.shape[1] == 0:
            raise DesignError("interaction is empty after centering against its main effects")
        Bc = Bc @ V
        scale = self.target_norm / np.linalg.norm(Bc)
        return TermDesign(
            label=t.label, kind="interaction", covariates=t.covariates, B=Bc * scale,
            lineage=lineage, parents=tuple(p.label for p in parents), T=T, z_intercept=True,
            z_parents=tuple(p.label for p in parents), z_keep=keep, G=G, V=V,
            scale=float(scale))


def build_full_design(spec: ModelSpec, data, decomposition: str = "orthogonal",
                      mass: float = 0.999, solver: str = "dense",
                      matrices: Mapping | None = None, offset=None,
                      scaling: str = "total") -> FullDesign:
    """Build ``X = [X_u  B_1 ... B_p]`` for a model spec.

    ``data`` is any column mapping (dict of arrays, DataFrame).  ``matrices``
    resolves ``rnd(f, C=name)`` and ``mrf(f, N=name)`` references; values are
    arrays or ``(levels, array)`` pairs.  ``scaling="total"`` scales every block to
    Frobenius norm 0.5; ``scaling="per_obs"`` scales to ``0.5 * sqrt(n)`` instead,
    which keeps coefficient magnitudes comparable across sample sizes.
    """
    if scaling not in ("total", "per_obs"):
        raise DesignError(f"unknown scaling {scaling!r}")
    if decomposition not in ("orthogonal", "mixed"):
        raise DesignError(f"unknown decomposition {decomposition!r}")
    y = np.asarray(_column(data, spec.response))
    if y.dtype.kind in "fc" and np.any(~np.isfinite(y)):
        raise DesignError("response contains missing values")
    bld = _Builder(spec, data, decomposition, mass, solver, matrices, scaling)
    n = bld.n
    intercept = TermDesign(label="u", kind="u", covariates=(), B=np.ones((n, 1)),
                           lineage={"kind": "u", "decomposition": "none", "mass": 1.0,
                                    "raw_dim": 1, "nullspace_dim": 0},
                           recipe=None, penalized=False)
    unpen = [intercept]
    blocks = []
    for t in spec.terms:
        if t.label == "u":
            continue
        td = bld.term(t)
        (unpen if t.kind == "u" else blocks).append(td)
    unpen += bld.extra_u
    used = {b.label for b in blocks} | {u.label for u in unpen}
    hidden = [td for lab, td in bld.main.items() if lab not in used]
    off = np.zeros(n) if offset is None else np.asarray(offset, dtype=float)
    if off.shape != (n,):
        raise DesignError("offset must have one entry per observation")
    return FullDesign(unpen, blocks, off, hidden, decomposition)

