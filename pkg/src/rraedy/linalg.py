"""Dense real linear algebra: SVD, truncation, pseudoinverse, small eigensolver.

All routines operate on 64-bit float matrices and are deterministic for
identical inputs.  Factorizations follow a fixed sign convention (the
largest-magnitude entry of every left singular vector is nonnegative) so
that checkpoints and test fixtures are reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class LinalgError(Exception):
    """Base class for numerical failures in this module."""


class SvdConvergenceError(LinalgError):
    """The iterative SVD kernel did not converge within its budget."""


class EigConvergenceError(LinalgError):
    """The eigenvalue iteration did not converge within its budget."""


class SingularTruncationError(LinalgError):
    """A condition number was requested at a rank with zero singular value."""


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Validate and coerce input to a finite, 2-D float64 array."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {m.shape}")
    if m.size == 0:
        raise ValueError(f"{name} must be nonempty")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} contains NaN or Inf entries")
    return m


@dataclass(frozen=True)
class SvdFactorization:
    """Thin SVD ``A = U @ diag(sigma) @ Vt`` with ``r = min(m, n)``."""

    u: np.ndarray        # (m, r), orthonormal columns
    sigma: np.ndarray    # (r,), sorted descending, nonnegative
    vt: np.ndarray       # (r, n), orthonormal rows

    @property
    def rank_bound(self) -> int:
        return self.sigma.shape[0]

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.sigma) @ self.vt


@dataclass(frozen=True)
class TruncatedSvd:
    """Best rank-``k`` factorization ``A_k = U_k @ alpha``.

    ``alpha = diag(sigma_k) @ Vt_k`` is the coefficient matrix; row ``i``
    of ``alpha`` has 2-norm ``sigma_k[i]``.
    """

    k: int
    u_k: np.ndarray      # (m, k)
    sigma_k: np.ndarray  # (k,)
    alpha: np.ndarray    # (k, n)

    def reconstruct(self) -> np.ndarray:
        return self.u_k @ self.alpha


@dataclass(frozen=True)
class Spectrum:
    """Eigenvalues sorted by descending modulus (ties: descending re, im)."""

    eigenvalues: np.ndarray  # (k,) complex128

    @property
    def moduli(self) -> np.ndarray:
        return np.abs(self.eigenvalues)

    def max_modulus(self) -> float:
        return float(np.max(self.moduli))

    def min_modulus(self) -> float:
        return float(np.min(self.moduli))


def _apply_sign_convention(u: np.ndarray, vt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Flip singular-vector pairs so each U column's peak entry is >= 0."""
    peaks = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[peaks, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    return u * signs, vt * signs[:, None]


def svd(a) -> SvdFactorization:
    """Thin singular value decomposition with deterministic signs.

    Raises :class:`SvdConvergenceError` if the underlying iterative kernel
    fails to converge.
    """
    m = as_matrix(a)
    try:
        u, s, vt = np.linalg.svd(m, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise SvdConvergenceError(
            f"SVD kernel did not converge on a {m.shape[0]}x{m.shape[1]} matrix "
            f"within the LAPACK iteration budget: {exc}"
        ) from exc
    u, vt = _apply_sign_convention(u, vt)
    return SvdFactorization(u=u, sigma=s, vt=vt)


def truncated_svd(a, k: int) -> TruncatedSvd:
    """Best rank-``k`` approximation via the thin SVD."""
    m = as_matrix(a)
    r = min(m.shape)
    if not 1 <= k <= r:
        raise ValueError(f"rank k={k} out of range [1, {r}] for shape {m.shape}")
    f = svd(m)
    u_k = f.u[:, :k]
    sigma_k = f.sigma[:k]
    alpha = sigma_k[:, None] * f.vt[:k, :]
    return TruncatedSvd(k=k, u_k=u_k, sigma_k=sigma_k, alpha=alpha)


def pseudoinverse(a, rcond: float = 1e-12) -> np.ndarray:
    """Moore-Penrose pseudoinverse via SVD.

    Singular values below ``rcond * sigma_1`` are treated as zero.
    """
    m = as_matrix(a)
    if not 0.0 < rcond < 1.0:
        raise ValueError(f"rcond must lie in (0, 1), got {rcond}")
    f = svd(m)
    cutoff = rcond * (f.sigma[0] if f.sigma.size else 0.0)
    inv = np.where(f.sigma > cutoff, 1.0 / np.where(f.sigma > 0, f.sigma, 1.0), 0.0)
    return (f.vt.T * inv) @ f.u.T


def eigenvalues(a) -> Spectrum:
    """Eigenvalues of a small square matrix, with multiplicity.

    Intended for operators of size at most 64; raises
    :class:`EigConvergenceError` on QR-iteration failure.
    """
    m = as_matrix(a)
    if m.shape[0] != m.shape[1]:
        raise ValueError(f"matrix must be square, got shape {m.shape}")
    if m.shape[0] > 64:
        raise ValueError(f"eigensolver is restricted to k <= 64, got k={m.shape[0]}")
    try:
        vals = np.linalg.eigvals(m)
    except np.linalg.LinAlgError as exc:
        raise EigConvergenceError(
            f"QR eigenvalue iteration did not converge for a "
            f"{m.shape[0]}x{m.shape[0]} matrix: {exc}"
        ) from exc
    order = np.lexsort((-vals.imag, -vals.real, -np.abs(vals)))
    return Spectrum(eigenvalues=vals[order].astype(np.complex128))


def condition_number(a, k: int) -> float:
    """Ratio ``sigma_1 / sigma_k`` of the rank-``k`` truncation."""
    m = as_matrix(a)
    r = min(m.shape)
    if not 1 <= k <= r:
        raise ValueError(f"rank k={k} out of range [1, {r}] for shape {m.shape}")
    s = svd(m).sigma
    if s[k - 1] <= 0.0:
        raise SingularTruncationError(
            f"sigma_{k} is zero; condition number of the rank-{k} truncation undefined"
        )
    return float(s[0] / s[k - 1])


def spectral_norm(a) -> float:
    """Largest singular value."""
    m = as_matrix(a)
    return float(svd(m).sigma[0])
