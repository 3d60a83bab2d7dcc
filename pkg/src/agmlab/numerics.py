"""Dense linear-algebra substrate and seeded splittable randomness.

Everything here operates on plain float64 numpy arrays.  Rank decisions use a
single relative eigenvalue threshold so that null-space splits are consistent
across the rest of the package.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

Array = np.ndarray

# Relative eigenvalue cutoff used for every pseudoinverse / null-space split.
DEFAULT_REL_THRESHOLD = 1e-8
# Absolute floor applied before the -1/2 matrix power (purely numerical).
DEFAULT_EIG_FLOOR = 1e-12


class LinAlgContractError(ValueError):
    """Input violates a precondition of a numerics operation."""


def max_asymmetry(a: Array) -> float:
    """Largest |A_ij - A_ji| of a square matrix."""
    return float(np.max(np.abs(a - a.T))) if a.size else 0.0


def require_symmetric(a: Array, tol: float = 1e-10) -> None:
    """Reject matrices with |A_ij - A_ji| > tol * (1 + |A_ij|)."""
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise LinAlgContractError(f"expected a square matrix, got shape {a.shape}")
    gap = np.abs(a - a.T) - tol * (1.0 + np.abs(a))
    if np.any(gap > 0):
        raise LinAlgContractError(
            f"matrix is not symmetric: max asymmetry {max_asymmetry(a):.3e}"
        )


def symmetrize(a: Array) -> Array:
    return 0.5 * (a + a.T)


@dataclass(frozen=True)
class SymEig:
    """Eigendecomposition of a symmetric matrix, eigenvalues ascending."""

    eigenvalues: Array
    eigenvectors: Array  # orthonormal columns, A = Q diag(w) Q^T

    def reconstruct(self) -> Array:
        q, w = self.eigenvectors, self.eigenvalues
        return (q * w) @ q.T


def sym_eig(a: Array, tol: float = 1e-10) -> SymEig:
    """Eigendecomposition of a symmetric matrix.

    Raises LinAlgContractError when the input is not symmetric within ``tol``.
    """
    a = np.asarray(a, dtype=float)
    require_symmetric(a, tol)
    w, q = np.linalg.eigh(symmetrize(a))
    return SymEig(eigenvalues=w, eigenvectors=q)


def pinv_psd(a: Array, rel_threshold: float = DEFAULT_REL_THRESHOLD) -> Array:
    """Moore-Penrose pseudoinverse of a symmetric PSD matrix.

    Eigenvalues below ``rel_threshold * max eigenvalue`` are treated as exact
    zeros.  Rejects matrices with a genuinely negative eigenvalue.
    """
    e = sym_eig(a)
    w = e.eigenvalues
    wmax = float(w[-1]) if w.size else 0.0
    neg_tol = 1e-10 * (1.0 + abs(wmax))
    if w.size and w[0] < -neg_tol:
        raise LinAlgContractError(f"matrix is not PSD: min eigenvalue {w[0]:.3e}")
    cut = rel_threshold * max(wmax, 0.0)
    inv = np.where(w > cut, 1.0 / np.where(w > cut, w, 1.0), 0.0)
    q = e.eigenvectors
    return symmetrize((q * inv) @ q.T)


def psd_sqrt(a: Array) -> Array:
    """Symmetric PSD square root; tiny negative eigenvalues are clamped to 0."""
    e = sym_eig(a)
    w = np.clip(e.eigenvalues, 0.0, None)
    q = e.eigenvectors
    return symmetrize((q * np.sqrt(w)) @ q.T)


def inv_sqrt_psd(a: Array, eig_floor: float = DEFAULT_EIG_FLOOR) -> Array:
    """A^{-1/2} for symmetric PSD A, clamping eigenvalues below ``eig_floor``.

    The floor keeps the result finite when A is singular; it must be positive.
    """
    if eig_floor <= 0:
        raise LinAlgContractError(f"eig_floor must be positive, got {eig_floor}")
    e = sym_eig(a)
    w = np.clip(e.eigenvalues, eig_floor, None)
    q = e.eigenvectors
    return symmetrize((q * (1.0 / np.sqrt(w))) @ q.T)


def kron(a: Array, b: Array) -> Array:
    """Kronecker product (thin wrapper, kept for a single call-site idiom)."""
    return np.kron(np.asarray(a, dtype=float), np.asarray(b, dtype=float))


def vec(x: Array) -> Array:
    """Column-major (Fortran) vectorization, so vec(A X B^T) = (B kron A) vec(X)."""
    return np.asarray(x, dtype=float).ravel(order="F")


def unvec(v: Array, shape: tuple[int, int]) -> Array:
    """Inverse of :func:`vec`."""
    return np.asarray(v, dtype=float).reshape(shape, order="F")


def oblique_projector(tangent_basis: Array, oblique_basis: Array) -> Array:
    """Projector P with range span(tangent_basis) and kernel span(oblique_basis).

    The two bases together must span R^d.  ``tangent_basis`` may have zero
    columns, in which case the zero matrix is returned.
    """
    t = np.atleast_2d(np.asarray(tangent_basis, dtype=float))
    o = np.atleast_2d(np.asarray(oblique_basis, dtype=float))
    if t.size == 0 and o.size == 0:
        raise LinAlgContractError("both bases are empty")
    d = t.shape[0] if t.size else o.shape[0]
    k = t.shape[1] if t.size else 0
    m = o.shape[1] if o.size else 0
    if k + m != d:
        raise LinAlgContractError(
            f"combined basis has {k + m} columns, expected the full dimension {d}"
        )
    if k == 0:
        return np.zeros((d, d))
    mfull = np.hstack([t, o]) if m else t
    sv = np.linalg.svd(mfull, compute_uv=False)
    if sv[-1] <= 1e-12 * sv[0]:
        raise LinAlgContractError(
            f"combined basis is rank deficient (condition {sv[0] / max(sv[-1], 1e-300):.3e})"
        )
    minv = np.linalg.inv(mfull)
    return t @ minv[:k, :]


class Rng:
    """Seeded, splittable random source (wraps numpy's SeedSequence/Generator).

    Identical seeds produce identical draw sequences; ``split(k)`` yields k
    statistically independent child streams, deterministically.
    """

    def __init__(self, seed: int | np.random.SeedSequence = 0):
        if isinstance(seed, np.random.SeedSequence):
            self._ss = seed
        else:
            self._ss = np.random.SeedSequence(int(seed))
        self.generator = np.random.Generator(np.random.PCG64(self._ss))

    @property
    def seed_entropy(self):
        return self._ss.entropy

    def split(self, k: int) -> list["Rng"]:
        return [Rng(ss) for ss in self._ss.spawn(k)]

    def normal(self, size=None, scale: float = 1.0) -> Array:
        return self.generator.normal(0.0, scale, size=size)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None) -> Array:
        return self.generator.uniform(low, high, size=size)

    def integers(self, low: int, high: int, size=None):
        return self.generator.integers(low, high, size=size)

    def rademacher(self, size=None) -> Array:
        return self.generator.integers(0, 2, size=size).astype(float) * 2.0 - 1.0

    def choice(self, values, size=None):
        return self.generator.choice(values, size=size)


# --- finite-difference helpers (shared by tests and manifold diagnostics) ---


def fd_grad(f, x: Array, h: float | None = None) -> Array:
    """Central-difference gradient of a scalar function."""
    x = np.asarray(x, dtype=float)
    if h is None:
        h = 1e-6 * (1.0 + float(np.linalg.norm(x)))
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def fd_jacobian(fvec, x: Array, h: float | None = None) -> Array:
    """Central-difference Jacobian of a vector function, columns = d/dx_i."""
    x = np.asarray(x, dtype=float)
    if h is None:
        h = 1e-6 * (1.0 + float(np.linalg.norm(x)))
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        cols.append((np.asarray(fvec(x + e)) - np.asarray(fvec(x - e))) / (2 * h))
    return np.stack(cols, axis=1)
