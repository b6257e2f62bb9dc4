"""Sparse symmetric matrices, Cholesky factors and constrained GMRF computations.

Factorisations reorder with reverse Cuthill-McKee and keep the factor in
LAPACK banded storage when the profile is narrow, falling back to a dense
factor otherwise. Marginal variances come from the Takahashi recursion on the
band, so nothing outside the band of ``L`` is ever formed.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.linalg.lapack import dpotri, dtbtrs
from scipy.sparse.csgraph import reverse_cuthill_mckee


class NotPositiveDefinite(np.linalg.LinAlgError):
    pass


class SymSparseMatrix:
    """Symmetric sparse matrix stored as its lower triangle (CSC, sorted, summed)."""

    def __init__(self, lower):
        lower = sp.csc_matrix(lower, dtype=float)
        if lower.shape[0] != lower.shape[1] or lower.shape[0] == 0:
            raise ValueError(f"expected a non-empty square matrix, got {lower.shape}")
        lower = sp.tril(lower, format="csc")
        lower.sum_duplicates()
        lower.sort_indices()
        self._lower = lower

    @classmethod
    def from_dense(cls, a) -> "SymSparseMatrix":
        a = np.asarray(a, dtype=float)
        if not np.allclose(a, a.T, rtol=0, atol=1e-12 * max(1.0, np.abs(a).max())):
            raise ValueError("matrix is not symmetric")
        return cls(sp.csc_matrix(np.tril(a)))

    @classmethod
    def from_full(cls, m) -> "SymSparseMatrix":
        return cls(sp.tril(sp.csc_matrix(m)))

    @classmethod
    def identity(cls, n: int, scale: float = 1.0) -> "SymSparseMatrix":
        return cls(sp.identity(n, format="csc") * scale)

    @property
    def n(self) -> int:
        return self._lower.shape[0]

    @property
    def shape(self):
        return self._lower.shape

    @property
    def nnz(self) -> int:
        """Stored entries of the lower triangle."""
        return self._lower.nnz

    @property
    def lower(self) -> sp.csc_matrix:
        return self._lower

    def to_scipy(self) -> sp.csc_matrix:
        low = self._lower
        return (low + sp.tril(low, k=-1).T).tocsc()

    def to_dense(self) -> np.ndarray:
        return self.to_scipy().toarray()

    def diagonal(self) -> np.ndarray:
        return self._lower.diagonal()

    def coo_lower(self):
        c = self._lower.tocoo()
        order = np.lexsort((c.row, c.col))
        return c.row[order], c.col[order], c.data[order]

    def __matmul__(self, x):
        return self.to_scipy() @ x

    def __add__(self, other):
        if isinstance(other, SymSparseMatrix):
            return SymSparseMatrix(self._lower + other._lower)
        return NotImplemented

    def __mul__(self, c):
        return SymSparseMatrix(self._lower * float(c))

    __rmul__ = __mul__

    def submatrix(self, idx) -> "SymSparseMatrix":
        idx = np.asarray(idx)
        full = self.to_scipy()[idx][:, idx]
        return SymSparseMatrix.from_full(full)

    def __repr__(self):
        return f"SymSparseMatrix(n={self.n}, nnz_lower={self.nnz})"


@dataclass(frozen=True)
class ConstraintSet:
    """Linear constraints ``A x = e``; rows are usually component indicators."""

    A: np.ndarray
    e: np.ndarray

    @classmethod
    def empty(cls, n: int) -> "ConstraintSet":
        return cls(np.zeros((0, n)), np.zeros(0))

    @classmethod
    def from_groups(cls, n: int, groups) -> "ConstraintSet":
        A = np.zeros((len(groups), n))
        for r, members in enumerate(groups):
            A[r, np.asarray(members, dtype=int)] = 1.0
        return cls(A, np.zeros(len(groups)))

    @property
    def k(self) -> int:
        return self.A.shape[0]

    def stack(self, other: "ConstraintSet") -> "ConstraintSet":
        return ConstraintSet(np.vstack([self.A, other.A]), np.concatenate([self.e, other.e]))

    def embed(self, dim: int, offset: int) -> "ConstraintSet":
        """Place the constraint columns at ``offset`` inside a ``dim``-vector."""
        A = np.zeros((self.k, dim))
        A[:, offset:offset + self.A.shape[1]] = self.A
        return ConstraintSet(A, self.e.copy())


@dataclass(frozen=True, eq=False)
class CholeskyFactor:
    """Factor of ``P M P^T = L L^T``; ``perm[k]`` is the original index of row k."""

    n: int
    perm: np.ndarray
    kind: str  # "banded" or "dense"
    factor: np.ndarray
    bandwidth: int
    logdet: float

    def _permute(self, b):
        return b[self.perm]

    def _unpermute(self, xp):
        x = np.empty_like(xp)
        x[self.perm] = xp
        return x

    def solve(self, b) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        if b.shape[0] != self.n:
            raise ValueError(f"right-hand side has length {b.shape[0]}, expected {self.n}")
        bp = self._permute(b)
        if self.kind == "banded":
            xp = sla.cho_solve_banded((self.factor, True), bp, check_finite=False)
        else:
            xp = sla.cho_solve((self.factor, True), bp, check_finite=False)
        return self._unpermute(xp)

    def solve_lt(self, z) -> np.ndarray:
        """Return ``x`` with ``L^T x = z`` (mapped back to the original order)."""
        z = np.asarray(z, dtype=float)
        if self.kind == "banded":
            xp, info = dtbtrs(self.factor, z, uplo="L", trans="T")
            if info != 0:
                raise np.linalg.LinAlgError(f"dtbtrs failed with info={info}")
        else:
            xp = sla.solve_triangular(self.factor, z, lower=True, trans="T", check_finite=False)
        return self._unpermute(xp)

    def lower_dense(self) -> np.ndarray:
        """``L`` as a dense array in the permuted ordering."""
        if self.kind == "dense":
            return np.tril(self.factor)
        L = np.zeros((self.n, self.n))
        for d in range(self.bandwidth + 1):
            idx = np.arange(self.n - d)
            L[idx + d, idx] = self.factor[d, : self.n - d]
        return L

    def reconstruct(self) -> np.ndarray:
        L = self.lower_dense()
        Mp = L @ L.T
        M = np.empty_like(Mp)
        M[np.ix_(self.perm, self.perm)] = Mp
        return M

    def selected_inverse_diag(self) -> np.ndarray:
        if self.kind == "dense":
            inv, info = dpotri(self.factor, lower=1)
            if info != 0:
                raise np.linalg.LinAlgError(f"dpotri failed with info={info}")
            dp = np.diag(inv).copy()
        else:
            dp = _takahashi_band_diag(self.factor, self.bandwidth)
        return self._unpermute(dp)


def _takahashi_band_diag(cb: np.ndarray, bw: int) -> np.ndarray:
    """Diagonal of (L L^T)^{-1} from a banded lower factor.

    Runs the recursion Sigma_ij = delta_ij / L_ii^2 - sum_{k>i} L_ki Sigma_kj / L_ii
    backwards over rows, keeping only the band of Sigma.
    """
    n = cb.shape[1]
    S = np.zeros((bw + 1, n))
    ar = np.arange(bw)
    absdiff = np.abs(ar[:, None] - ar[None, :])
    minidx = np.minimum(ar[:, None], ar[None, :])
    for i in range(n - 1, -1, -1):
        lii = cb[0, i]
        m = min(bw, n - 1 - i)
        if m == 0:
            S[0, i] = 1.0 / (lii * lii)
            continue
        l = cb[1:m + 1, i]
        block = S[absdiff[:m, :m], i + 1 + minidx[:m, :m]]
        sik = -(block @ l) / lii
        S[1:m + 1, i] = sik
        S[0, i] = 1.0 / (lii * lii) - (l @ sik) / lii
    return S[0]


def _pivot_check(diag_l: np.ndarray, scale: float) -> None:
    tol = diag_l.size * np.finfo(float).eps * max(scale, np.finfo(float).tiny)
    if not np.all(np.isfinite(diag_l)) or np.any(diag_l * diag_l <= tol):
        raise NotPositiveDefinite("non-positive pivot in Cholesky factorisation")


def default_jitter(m) -> float:
    """Scale-free diagonal jitter: 1e-6 times the mean diagonal."""
    d = m.diagonal() if isinstance(m, SymSparseMatrix) else np.diag(m)
    return 1e-6 * float(np.mean(d))


def factorize(m, jitter: float = 0.0, dense_threshold: float = 0.25) -> CholeskyFactor:
    """Cholesky factorisation of ``m + jitter * I``.

    ``m`` may be a :class:`SymSparseMatrix` (reordered by RCM, banded storage
    when the half-bandwidth is at most ``dense_threshold * n``) or a dense
    array, which is factored as given.
    """
    if jitter < 0:
        raise ValueError("jitter must be non-negative")
    if isinstance(m, SymSparseMatrix):
        n = m.n
        full = m.to_scipy()
        perm = reverse_cuthill_mckee(full.tocsr(), symmetric_mode=True).astype(int)
        mp = full[perm][:, perm].tocoo()
        bw = int(np.max(np.abs(mp.row - mp.col))) if mp.nnz else 0
        scale = float(np.max(np.abs(m.diagonal()))) + jitter
        if bw <= dense_threshold * n:
            ab = np.zeros((bw + 1, n))
            low = mp.row >= mp.col
            ab[mp.row[low] - mp.col[low], mp.col[low]] = mp.data[low]
            ab[0] += jitter
            try:
                cb = sla.cholesky_banded(ab, lower=True, check_finite=False)
            except np.linalg.LinAlgError as exc:
                raise NotPositiveDefinite(str(exc)) from None
            _pivot_check(cb[0], scale)
            return CholeskyFactor(n, perm, "banded", cb, bw, 2.0 * float(np.sum(np.log(cb[0]))))
        dense = mp.toarray()
    else:
        dense = np.array(m, dtype=float)
        n = dense.shape[0]
        perm = np.arange(n)
        scale = float(np.max(np.abs(np.diag(dense)))) + jitter
    if jitter:
        dense[np.diag_indices(n)] += jitter
    try:
        L = sla.cholesky(dense, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from None
    d = np.diag(L)
    _pivot_check(d, scale)
    return CholeskyFactor(n, perm, "dense", L, n - 1, 2.0 * float(np.sum(np.log(d))))


def solve(f: CholeskyFactor, b) -> np.ndarray:
    return f.solve(b)


def _kriging_parts(f: CholeskyFactor, c: ConstraintSet):
    V = f.solve(c.A.T)  # Sigma A^T, n x k
    W = c.A @ V
    try:
        W_chol = sla.cho_factor(W, lower=True)
    except np.linalg.LinAlgError:
        raise np.linalg.LinAlgError("constraint covariance A Sigma A^T is singular") from None
    return V, W_chol


def constrained_marginal_variances(q, c: ConstraintSet, jitter: float | None = None,
                                   method: str = "sparse") -> np.ndarray:
    """``diag Var(x | A x = e)`` for ``x ~ N(0, (q + jitter I)^{-1})``.

    ``method="dense"`` forms the full inverse and is the reference path for
    moderate ``n``; ``"sparse"`` uses the selected inverse of the band factor.
    """
    if jitter is None:
        jitter = default_jitter(q)
    if method == "dense":
        dense = q.to_dense() if isinstance(q, SymSparseMatrix) else np.array(q, dtype=float)
        dense[np.diag_indices_from(dense)] += jitter
        f = factorize(dense)
        Sigma = sla.cho_solve((f.factor, True), np.eye(f.n))
        var = np.diag(Sigma).copy()
        if c.k:
            V = Sigma @ c.A.T
            var -= np.einsum("ij,ji->i", V, np.linalg.solve(c.A @ V, V.T))
        return var
    if method != "sparse":
        raise ValueError(f"unknown method {method!r}")
    f = factorize(q, jitter)
    var = f.selected_inverse_diag()
    if c.k:
        V, W_chol = _kriging_parts(f, c)
        var = var - np.einsum("ij,ji->i", V, sla.cho_solve(W_chol, V.T))
    return var


def sample_constrained_gmrf(q, c: ConstraintSet, jitter: float | None, rng,
                           size: int | None = None) -> np.ndarray:
    """Draw ``x ~ N(0, (q + jitter I)^{-1})`` corrected by kriging onto ``A x = e``.

    Returns shape ``(n,)`` or ``(size, n)``.
    """
    if jitter is None:
        jitter = default_jitter(q)
    f = factorize(q, jitter)
    m = 1 if size is None else int(size)
    z = rng.standard_normal((f.n, m))
    x = f.solve_lt(z)
    if c.k:
        V, W_chol = _kriging_parts(f, c)
        x = x - V @ sla.cho_solve(W_chol, c.A @ x - c.e[:, None])
    x = x.T
    return x[0] if size is None else x


def dense_pseudo_inverse(m, rank_deficiency: int) -> np.ndarray:
    """Inverse on the range of ``m``, dropping the ``rank_deficiency`` smallest-|eigenvalue| modes."""
    m = m.to_dense() if isinstance(m, SymSparseMatrix) else np.asarray(m, dtype=float)
    w, U = np.linalg.eigh(m)
    keep = np.argsort(np.abs(w))[rank_deficiency:]
    Uk = U[:, keep]
    return (Uk / w[keep]) @ Uk.T


def eigenvalues_sym(m) -> np.ndarray:
    m = m.to_dense() if isinstance(m, SymSparseMatrix) else np.asarray(m, dtype=float)
    return np.linalg.eigvalsh(m)
