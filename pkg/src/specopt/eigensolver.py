"""Smallest eigenpairs of the pencil K w = lambda M w.

Shift-invert Lanczos (ARPACK through :func:`scipy.sparse.linalg.eigsh`) on
the free dofs with a sparse LU of K, followed by a Rayleigh-Ritz pass in the
M inner product so that the returned vectors are M-orthonormal to rounding.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh_fem import SparseSymOperator

log = logging.getLogger(__name__)

DEFAULT_TOL = 1e-9
DEFAULT_SEED = 42


class EigenSolveError(RuntimeError):
    pass


@dataclass(frozen=True)
class EigenPair:
    value: float
    vector: np.ndarray
    residual: float
    material_fraction: float = float("nan")


@dataclass
class Spectrum:
    pairs: list[EigenPair]
    iterations: int = 0
    shift: float = 0.0
    near_degenerate: list[int] = field(default_factory=list)
    lu: object = field(default=None, repr=False)

    @property
    def values(self) -> np.ndarray:
        return np.array([p.value for p in self.pairs])

    def vectors(self) -> np.ndarray:
        return np.column_stack([p.vector for p in self.pairs])

    def __len__(self):
        return len(self.pairs)

    def __getitem__(self, i) -> EigenPair:
        return self.pairs[i]


class PermutedLU:
    """Sparse LU of P A P^T with a user ordering and diagonal pivots."""

    def __init__(self, A, order):
        A = sp.csc_matrix(A)
        self.order = np.asarray(order)
        self.lu = spla.splu(A[self.order][:, self.order].tocsc(), permc_spec="NATURAL",
                            options={"SymmetricMode": True, "DiagPivotThresh": 0.0})

    def solve(self, b):
        b = np.asarray(b, dtype=float)
        x = np.empty_like(b)
        x[self.order] = self.lu.solve(b[self.order])
        return x


def factorize(A: sp.spmatrix, shift: float = 0.0, order=None):
    """LU of a free-dof block; ``order`` (a fill-reducing permutation) is used for SPD matrices."""
    try:
        if order is not None:
            return PermutedLU(A, order)
        return spla.splu(sp.csc_matrix(A), permc_spec="COLAMD")
    except RuntimeError as exc:  # singular factor
        raise EigenSolveError(f"factorization of K - sigma*M failed at sigma={shift}: {exc}") from exc


def _ritz(Kr, Mr, W):
    A = W.T @ (Kr @ W)
    B = W.T @ (Mr @ W)
    A = 0.5 * (A + A.T)
    B = 0.5 * (B + B.T)
    vals, C = la.eigh(A, B)
    return vals, W @ C


def _residuals(Kr, Mr, vals, W):
    KW = Kr @ W
    MW = Mr @ W
    R = KW - MW * vals
    return np.linalg.norm(R, axis=0) / (np.linalg.norm(KW, axis=0) + np.abs(vals) * np.linalg.norm(MW, axis=0))


def solve_generalized(K: SparseSymOperator, M: SparseSymOperator, k: int, tol: float = DEFAULT_TOL,
                      seed: int = DEFAULT_SEED, M_material: SparseSymOperator | None = None,
                      sigma: float = 0.0, max_refine: int = 5) -> Spectrum:
    """The ``k`` eigenpairs closest to ``sigma`` (smallest for ``sigma = 0``).

    Eigenvectors are returned on the full dof vector (zero on Dirichlet dofs)
    and normalised so that ``w.T @ M @ w = 1``.
    """
    free = K.free
    Kr = K.reduced()
    Mr = M.reduced()
    n = Kr.shape[0]
    if not 1 <= k < n:
        raise ValueError(f"need 1 <= k < {n}, got k={k}")
    A = Kr if sigma == 0.0 else (Kr - sigma * Mr).tocsc()
    lu = factorize(A, sigma, K.order if sigma == 0.0 else None)
    opinv = spla.LinearOperator((n, n), matvec=lu.solve, dtype=float)
    v0 = np.random.default_rng(seed).standard_normal(n)
    ncv = min(n, max(2 * k + 1, 20))
    try:
        vals, W = spla.eigsh(Kr, k=k, M=Mr, sigma=sigma, which="LM", OPinv=opinv, v0=v0,
                             tol=tol * 1e-2, ncv=ncv, maxiter=max(1000, 10 * n))
    except spla.ArpackNoConvergence as exc:
        raise EigenSolveError(f"shift-invert Lanczos did not converge ({len(exc.eigenvalues)} of {k} pairs)") from exc

    vals, W = _ritz(Kr, Mr, W)
    res = _residuals(Kr, Mr, vals, W)
    it = 0
    while res.max() > tol and it < max_refine:
        # block inverse iteration + Rayleigh-Ritz
        W = lu.solve(np.asarray(Mr @ W))
        vals, W = _ritz(Kr, Mr, W)
        res = _residuals(Kr, Mr, vals, W)
        it += 1
    if res.max() > tol:
        log.warning("eigen residual %.2e above tolerance %.1e", res.max(), tol)

    order = np.argsort(vals)
    vals, W, res = vals[order], W[:, order], res[order]
    full = np.zeros((K.dim, k))
    full[free] = W
    # M-normalisation and a deterministic sign
    Mfull = M.matrix
    for j in range(k):
        w = full[:, j]
        w /= np.sqrt(w @ (Mfull @ w))
        i = np.argmax(np.abs(w))
        if w[i] < 0:
            w *= -1.0
    if M_material is not None:
        Mm = M_material.reduced()
        fracs = [_fraction(full[free, j], Mm, Mr) for j in range(k)]
    else:
        fracs = [float("nan")] * k
    pairs = [EigenPair(float(vals[j]), full[:, j].copy(), float(res[j]), float(fracs[j])) for j in range(k)]
    degenerate = [j for j in range(k - 1) if vals[j + 1] - vals[j] < 1e-8 * abs(vals[j])]
    if degenerate:
        log.warning("near-degenerate eigenvalues at indices %s", degenerate)
    return Spectrum(pairs, iterations=it, shift=sigma, near_degenerate=degenerate, lu=lu if sigma == 0.0 else None)


def solve_dense(K: SparseSymOperator, M: SparseSymOperator, k: int | None = None):
    """Reference generalized eigensolver on the free dofs (LAPACK)."""
    Kr = K.reduced().toarray()
    Mr = M.reduced().toarray()
    vals, W = la.eigh(Kr, Mr)
    if k is not None:
        vals, W = vals[:k], W[:, :k]
    full = np.zeros((K.dim, W.shape[1]))
    full[K.free] = W
    return vals, full


def rayleigh_quotient(K: SparseSymOperator, M: SparseSymOperator, w) -> float:
    w = np.asarray(w, dtype=float)
    den = w @ (M.matrix @ w)
    if not np.any(w) or den == 0.0:
        raise ValueError("Rayleigh quotient of the zero vector")
    return float(w @ (K.matrix @ w) / den)


def material_fraction(w, M_material: SparseSymOperator, M: SparseSymOperator) -> float:
    """Share of modal mass carried by the material phases."""
    w = np.asarray(w, dtype=float)
    return _fraction(w[M.free], M_material.reduced(), M.reduced())


def _fraction(wf, Mm, M) -> float:
    num = wf @ (Mm @ wf)
    den = wf @ (M @ wf)
    return float(min(max(num / den, 0.0), 1.0))
